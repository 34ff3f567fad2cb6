#include "taintradar/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "taintradar/dataset.hpp"

namespace taintradar {

namespace {

std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  s.erase(s.find_last_not_of(" \t\r") + 1);
  return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename F>
std::vector<T> split_map(const std::string& s, F f) {
  std::vector<T> out;
  for (const auto& item : split(s, ',')) out.push_back(f(item));
  return out;
}

std::map<std::string, std::string> word_pairs(const std::string& rest) {
  std::map<std::string, std::string> kv;
  std::stringstream in(rest);
  std::string word;
  while (in >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + word + "'");
    kv[word.substr(0, eq)] = word.substr(eq + 1);
  }
  return kv;
}

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(6) << v;
  return out.str();
}

}  // namespace

void finish_row(MetricsRow& row) {
  row.sr = row.attempts > 0 ? static_cast<double>(row.successes) / static_cast<double>(row.attempts) : 0.0;
  row.tpr = row.successes > 0 ? static_cast<double>(row.detected) / static_cast<double>(row.successes) : 0.0;
  row.post_defense_sr = row.sr * (1.0 - row.tpr);
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsTable& table) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kMetricsCsvHeader << '\n';
  for (const auto& r : table.rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    out << r.setting << ',' << fmt(r.target_fpr) << ',' << r.k << ',' << r.dr << ',' << r.attempts << ','
        << r.successes << ',' << fmt(r.sr) << ',' << r.detected << ',' << fmt(r.tpr) << ',' << fmt(r.fpr) << ','
        << fmt(r.mean_iou) << ',' << fmt(r.post_defense_sr) << ',' << status << '\n';
  }
}

std::string BatteryEntry::label() const {
  std::ostringstream out;
  out << shape_name(shape) << '-' << size << '-';
  switch (placement.kind) {
    case Placement::Kind::kRightBottom: out << "rb"; break;
    case Placement::Kind::kRandom: out << "random"; break;
    case Placement::Kind::kFixed: out << "fixed" << placement.x << 'x' << placement.y; break;
  }
  out << "-b" << batch_size;
  return out.str();
}

std::vector<BatteryEntry> expand_battery(const std::vector<double>& sizes, const std::vector<Placement>& placements,
                                         const std::vector<Index>& batches, const std::vector<PatchShape>& shapes) {
  std::vector<BatteryEntry> out;
  for (PatchShape shape : shapes) {
    for (double size : sizes) {
      for (const Placement& p : placements) {
        for (Index b : batches) out.push_back({size, p, b, shape});
      }
    }
  }
  return out;
}

ExperimentSpec parse_experiment_spec(const std::string& text, const std::filesystem::path& base_dir) {
  ExperimentSpec spec;
  auto path_of = [&](const std::string& v) {
    const std::filesystem::path p(v);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  };
  std::stringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      if (line.rfind("attack ", 0) == 0) {
        const auto kv = word_pairs(line.substr(7));
        BatteryEntry e;
        if (kv.count("size")) e.size = std::stod(kv.at("size"));
        if (kv.count("placement")) e.placement = Placement::parse(kv.at("placement"));
        if (kv.count("batch")) e.batch_size = std::stol(kv.at("batch"));
        if (kv.count("shape")) e.shape = parse_shape(kv.at("shape"));
        spec.battery.push_back(e);
        continue;
      }
      if (line.rfind("grid ", 0) == 0) {
        const auto kv = word_pairs(line.substr(5));
        const auto sizes = split_map<double>(kv.count("sizes") ? kv.at("sizes") : "0.3",
                                             [](const std::string& s) { return std::stod(s); });
        const auto places = split_map<Placement>(kv.count("placements") ? kv.at("placements") : "rb", Placement::parse);
        const auto batches = split_map<Index>(kv.count("batches") ? kv.at("batches") : "1",
                                              [](const std::string& s) { return std::stol(s); });
        const auto shapes = split_map<PatchShape>(kv.count("shapes") ? kv.at("shapes") : "square", parse_shape);
        for (auto& e : expand_battery(sizes, places, batches, shapes)) spec.battery.push_back(e);
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("expected 'key = value'");
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      if (key == "model") spec.model = path_of(value);
      else if (key == "benign") spec.benign = path_of(value);
      else if (key == "victims") spec.victims = path_of(value);
      else if (key == "out") spec.output = path_of(value);
      else if (key == "calibration") spec.calibration = path_of(value);
      else if (key == "target_fpr") spec.target_fprs = split_map<double>(value, [](const std::string& s) { return std::stod(s); });
      else if (key == "k") spec.detection.top_k = std::stol(value);
      else if (key == "dr") spec.detection.rank_threshold = std::stol(value);
      else if (key == "fill") spec.detection.fill = value == "noise" ? FillMode::kRandomNoise : FillMode::kDatasetMean;
      else if (key == "seed") spec.seed = std::stoull(value);
      else if (key == "target") spec.target = std::stol(value);
      else if (key == "victims_per_entry") spec.victims_per_entry = std::stol(value);
      else if (key == "benign_count") spec.benign_count = std::stol(value);
      else if (key == "calibration_count") spec.calibration_count = std::stol(value);
      else if (key == "iterations") spec.iterations = std::stoi(value);
      else if (key == "step_size") spec.step_size = std::stod(value);
      else if (key == "stop_probability") spec.stop_probability = std::stod(value);
      else throw std::invalid_argument("unknown key '" + key + "'");
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("experiment spec line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  spec.seed = seed_from_env(spec.seed);
  spec.detection.seed = spec.seed;
  return spec;
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read experiment spec " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  ExperimentSpec spec = parse_experiment_spec(buf.str(), path.parent_path());
  auto require = [](const std::filesystem::path& p, const char* what) {
    if (p.empty()) throw std::invalid_argument(std::string("experiment spec needs '") + what + "'");
    if (!std::filesystem::exists(p)) throw std::runtime_error(std::string(what) + " not found: " + p.string());
  };
  require(spec.model, "model");
  require(spec.benign, "benign");
  if (!spec.battery.empty()) require(spec.victims, "victims");
  if (spec.calibration) require(*spec.calibration, "calibration");
  if (spec.output.empty()) throw std::invalid_argument("experiment spec needs 'out'");
  return spec;
}

MetricsTable run_experiment(const ExperimentSpec& spec) {
  const Model<float> model = load_model(spec.model);
  const Index m = model.num_classes();
  std::filesystem::create_directories(spec.output);
  MetricsTable table;

  // Detector settings: one per target FPR, or the calibration file, or the spec's own.
  std::vector<Tensor<float>> benign = correctly_classified(model, load_dataset(spec.benign));
  std::vector<std::pair<double, DetectionConfig>> configs;
  std::vector<Tensor<float>> held_out = benign;
  if (!spec.target_fprs.empty()) {
    const Index n_cal = std::min<Index>(spec.calibration_count, static_cast<Index>(benign.size()));
    const std::vector<Tensor<float>> cal(benign.begin(), benign.begin() + n_cal);
    held_out.assign(benign.begin() + n_cal, benign.end());
    const FprSurface surface =
        fpr_surface(model, cal, clipped_range(2, 16, m), clipped_range(1, 20, m), spec.detection);
    write_surface_csv(spec.output / "surface.csv", surface);
    for (double target : spec.target_fprs) {
      DetectionConfig c = spec.detection;
      try {
        const CalibrationResult r = choose_params(surface, target);
        c.top_k = r.k;
        c.rank_threshold = r.dr;
        configs.emplace_back(target, c);
      } catch (const CalibrationError& e) {
        MetricsRow row;
        row.setting = "calibration";
        row.target_fpr = target;
        row.status = std::string("failed: ") + e.what();
        table.rows.push_back(row);
        table.partial = true;
      }
    }
  } else if (spec.calibration) {
    configs.emplace_back(0.0, load_calibration(*spec.calibration, spec.detection));
  } else {
    configs.emplace_back(0.0, spec.detection);
  }
  if (static_cast<Index>(held_out.size()) > spec.benign_count) held_out.resize(static_cast<std::size_t>(spec.benign_count));
  if (held_out.empty()) throw std::invalid_argument("no correctly classified benign images left for FPR");

  std::set<Index> kset;
  for (const auto& [t, c] : configs) {
    c.validate(m);
    kset.insert(c.top_k);
  }
  const std::vector<Index> ks(kset.begin(), kset.end());
  auto k_pos = [&](Index k) { return static_cast<std::size_t>(std::find(ks.begin(), ks.end(), k) - ks.begin()); };
  const DetectionConfig base = configs.empty() ? spec.detection : configs.front().second;
  const RankingChanges benign_changes =
      ks.empty() ? RankingChanges{} : collect_ranking_changes(model, held_out, base, ks);
  auto benign_fpr = [&](Index k, Index dr) {
    Index f = 0;
    for (const auto& c : benign_changes.per_image) f += c[k_pos(k)] >= dr;
    return static_cast<double>(f) / static_cast<double>(benign_changes.per_image.size());
  };

  if (spec.battery.empty()) {
    for (const auto& [target, c] : configs) {
      MetricsRow row;
      row.setting = "benign";
      row.target_fpr = target;
      row.k = c.top_k;
      row.dr = c.rank_threshold;
      row.fpr = benign_fpr(c.top_k, c.rank_threshold);
      finish_row(row);
      table.rows.push_back(row);
    }
    write_metrics_csv(spec.output / "metrics.csv", table);
    return table;
  }

  const Dataset victim_data = load_dataset(spec.victims);
  std::vector<Tensor<float>> pool = correctly_classified(model, victim_data, spec.target);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  if (static_cast<Index>(pool.size()) > spec.victims_per_entry) pool.resize(static_cast<std::size_t>(spec.victims_per_entry));

  std::ofstream reports(spec.output / "reports.jsonl");
  std::ofstream roc(spec.output / "roc.csv");
  roc << "setting,k,dr,tpr,fpr\n";
  const auto& in_shape = model.input_shape();
  for (const BatteryEntry& entry : spec.battery) {
    try {
      if (configs.empty()) throw std::runtime_error("no detector settings");
      AttackConfig ac;
      ac.target = spec.target;
      ac.batch_size = entry.batch_size;
      ac.iterations = spec.iterations;
      ac.step_size = spec.step_size;
      ac.stop_probability = spec.stop_probability;
      ac.seed = spec.seed;
      const PatchSpec patch = make_patch_spec(entry.shape, entry.size, in_shape[0], in_shape[1], in_shape[2],
                                              {entry.placement});
      const AttackResult res = attack_groups(model, pool, patch, ac);

      std::vector<std::vector<Index>> changes;
      double iou_sum = 0.0;
      Index successes = 0;
      for (std::size_t i = 0; i < res.victims.size(); ++i) {
        if (!res.success[i]) continue;
        ++successes;
        DetectionReport rep = detect(res.victims[i], model, base);
        iou_sum += iou(rep.estimated, res.regions[i]);
        auto j = nlohmann::ordered_json::parse(report_to_json(rep));
        j["setting"] = entry.label();
        j["victim"] = i;
        j["g_area"] = res.regions[i].area();
        reports << j.dump() << '\n';
        changes.push_back(ks.size() == 1 ? std::vector<Index>{rep.ranking_change}
                                         : detect_ranking_changes(res.victims[i], model, base, ks));
      }
      for (const auto& [target, c] : configs) {
        MetricsRow row;
        row.setting = entry.label();
        row.target_fpr = target;
        row.k = c.top_k;
        row.dr = c.rank_threshold;
        row.attempts = static_cast<Index>(res.victims.size());
        row.successes = successes;
        for (const auto& ch : changes) row.detected += ch[k_pos(c.top_k)] >= c.rank_threshold;
        row.fpr = benign_fpr(c.top_k, c.rank_threshold);
        row.mean_iou = successes > 0 ? iou_sum / static_cast<double>(successes) : 0.0;
        finish_row(row);
        if (successes == 0) row.status = "ok: no successful attacks";
        table.rows.push_back(row);
      }
      const Index k0 = base.top_k;
      for (Index dr = 1; dr < m; ++dr) {
        Index hit = 0;
        for (const auto& ch : changes) hit += ch[k_pos(k0)] >= dr;
        roc << entry.label() << ',' << k0 << ',' << dr << ','
            << fmt(changes.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(changes.size())) << ','
            << fmt(benign_fpr(k0, dr)) << '\n';
      }
    } catch (const std::exception& e) {
      MetricsRow row;
      row.setting = entry.label();
      row.status = std::string("failed: ") + e.what();
      table.rows.push_back(row);
      table.partial = true;
    }
  }
  write_metrics_csv(spec.output / "metrics.csv", table);
  return table;
}

std::vector<Verdict> frame_vote(const std::vector<Verdict>& verdicts, Index window) {
  if (window < 1) throw std::invalid_argument("window must be >= 1");
  std::vector<Verdict> out;
  if (verdicts.empty()) return out;
  const Index n = static_cast<Index>(verdicts.size());
  const Index w = std::min(window, n);
  for (Index start = 0; start + w <= n; ++start) {
    Index adversarial = 0;
    for (Index i = start; i < start + w; ++i) adversarial += verdicts[static_cast<std::size_t>(i)] == Verdict::kAdversarial;
    out.push_back(2 * adversarial > w ? Verdict::kAdversarial : Verdict::kBenign);
  }
  return out;
}

BenchSummary bench(const Model<float>& model, const std::vector<Tensor<float>>& images, const DetectionConfig& config,
                   const std::vector<Index>& ks) {
  if (images.empty()) throw std::invalid_argument("bench needs at least one image");
  BenchSummary s;
  s.images = static_cast<Index>(images.size());
  s.k = config.top_k;
  auto check = [&](const DetectionReport& r, Index k) {
    if (r.forward_passes != 3 || r.backward_passes != k + 1) s.pass_counts_ok = false;
  };
  // Warm caches before timing.
  detect(images.front(), model, config);

  std::vector<double> wall;
  for (const auto& image : images) {
    const DetectionReport r = detect(image, model, config);
    check(r, config.top_k);
    wall.push_back(r.wall_ms);
    s.forward_ms += r.forward_ms;
    s.backward_ms += r.backward_ms;
  }
  s.forward_ms /= static_cast<double>(images.size());
  s.backward_ms /= static_cast<double>(images.size());
  s.mean_ms = std::accumulate(wall.begin(), wall.end(), 0.0) / static_cast<double>(wall.size());
  std::sort(wall.begin(), wall.end());
  auto pct = [&](double q) { return wall[static_cast<std::size_t>(q * static_cast<double>(wall.size() - 1) + 0.5)]; };
  s.p50_ms = pct(0.5);
  s.p90_ms = pct(0.9);
  s.max_ms = wall.back();

  // K values are interleaved per image so that slow stretches hit every K alike.
  double bw_total = 0.0;
  Index bw_passes = 0;
  std::vector<std::vector<double>> per_k(ks.size());
  for (Index k : ks) {
    DetectionConfig c = config;
    c.top_k = k;
    c.validate(model.num_classes());
  }
  for (const auto& image : images) {
    for (std::size_t i = 0; i < ks.size(); ++i) {
      DetectionConfig c = config;
      c.top_k = ks[i];
      const DetectionReport r = detect(image, model, c);
      check(r, ks[i]);
      per_k[i].push_back(r.wall_ms);
      bw_total += r.backward_ms;
      bw_passes += r.backward_passes;
    }
  }
  for (std::size_t i = 0; i < ks.size(); ++i) {
    auto& v = per_k[i];
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    s.ks.push_back(ks[i]);
    s.median_ms_per_k.push_back(v[v.size() / 2]);
  }
  s.backward_pass_ms = bw_passes > 0 ? bw_total / static_cast<double>(bw_passes) : 0.0;
  if (s.ks.size() >= 2) {
    const double n = static_cast<double>(s.ks.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < s.ks.size(); ++i) {
      mx += static_cast<double>(s.ks[i]) / n;
      my += s.median_ms_per_k[i] / n;
    }
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < s.ks.size(); ++i) {
      const double dx = static_cast<double>(s.ks[i]) - mx;
      sxy += dx * (s.median_ms_per_k[i] - my);
      sxx += dx * dx;
    }
    s.marginal_ms = sxy / sxx;
  }
  return s;
}

std::string bench_to_text(const BenchSummary& s) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  out << "images " << s.images << "\nk " << s.k << "\nmean_ms " << s.mean_ms << "\np50_ms " << s.p50_ms
      << "\np90_ms " << s.p90_ms << "\nmax_ms " << s.max_ms << "\nforward_ms " << s.forward_ms << "\nbackward_ms "
      << s.backward_ms << "\nbackward_pass_ms " << s.backward_pass_ms << "\nmarginal_ms_per_k " << s.marginal_ms
      << "\nmarginal_ratio " << s.marginal_ratio() << "\npass_counts " << (s.pass_counts_ok ? "ok" : "MISMATCH")
      << '\n';
  for (std::size_t i = 0; i < s.ks.size(); ++i) out << "k" << s.ks[i] << "_median_ms " << s.median_ms_per_k[i] << '\n';
  return out.str();
}

std::vector<Tensor<float>> correctly_classified(const Model<float>& model, const Dataset& data,
                                                std::optional<Index> exclude_label, Index limit) {
  std::vector<Tensor<float>> out;
  if (data.size() == 0) return out;
  const std::vector<Index> predicted = predict_labels(model, data.images);
  for (Index i = 0; i < data.size(); ++i) {
    if (limit >= 0 && static_cast<Index>(out.size()) >= limit) break;
    const Index label = data.labels[static_cast<std::size_t>(i)];
    if (predicted[static_cast<std::size_t>(i)] != label) continue;
    if (exclude_label && label == *exclude_label) continue;
    out.push_back(data.image(i));
  }
  return out;
}

std::uint64_t seed_from_env(std::uint64_t fallback) {
  if (const char* env = std::getenv("TAINTRADAR_SEED"); env != nullptr && *env != '\0') {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("TAINTRADAR_SEED is not an unsigned integer: ") + env);
    }
  }
  return fallback;
}

}  // namespace taintradar
