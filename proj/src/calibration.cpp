#include "taintradar/calibration.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

namespace taintradar {

RankingChanges collect_ranking_changes(const Model<float>& model, const std::vector<Tensor<float>>& images,
                                       const DetectionConfig& config, const std::vector<Index>& ks) {
  if (ks.empty()) throw std::invalid_argument("empty K range");
  RankingChanges out;
  out.ks = ks;
  out.per_image.reserve(images.size());
  for (const auto& image : images) out.per_image.push_back(detect_ranking_changes(image, model, config, ks));
  return out;
}

double FprSurface::at(Index k, Index dr) const {
  const auto ki = std::find(ks.begin(), ks.end(), k);
  const auto di = std::find(drs.begin(), drs.end(), dr);
  if (ki == ks.end() || di == drs.end()) throw std::out_of_range("(K, ΔR) not on the surface grid");
  return fpr[static_cast<std::size_t>(ki - ks.begin())][static_cast<std::size_t>(di - drs.begin())];
}

FprSurface surface_from_changes(const RankingChanges& changes, const std::vector<Index>& drs) {
  if (changes.per_image.empty()) throw std::invalid_argument("empty benign set");
  if (drs.empty()) throw std::invalid_argument("empty ΔR range");
  FprSurface s;
  s.ks = changes.ks;
  s.drs = drs;
  s.benign_count = static_cast<Index>(changes.per_image.size());
  for (std::size_t ki = 0; ki < s.ks.size(); ++ki) {
    std::vector<double> row;
    for (Index dr : drs) {
      Index flagged = 0;
      for (const auto& c : changes.per_image) flagged += c[ki] >= dr;
      row.push_back(static_cast<double>(flagged) / static_cast<double>(s.benign_count));
    }
    s.fpr.push_back(std::move(row));
  }
  return s;
}

FprSurface fpr_surface(const Model<float>& model, const std::vector<Tensor<float>>& benign,
                       const std::vector<Index>& ks, const std::vector<Index>& drs, const DetectionConfig& config) {
  if (benign.empty()) throw std::invalid_argument("empty benign set");
  if (drs.empty()) throw std::invalid_argument("empty ΔR range");
  return surface_from_changes(collect_ranking_changes(model, benign, config, ks), drs);
}

std::vector<Index> clipped_range(Index lo, Index hi, Index num_classes) {
  std::vector<Index> out;
  for (Index v = std::max<Index>(lo, 1); v <= hi && v < num_classes; ++v) out.push_back(v);
  return out;
}

CalibrationResult choose_params(const FprSurface& surface, double target_fpr) {
  if (surface.ks.empty() || surface.drs.empty()) throw std::invalid_argument("empty surface");
  std::vector<double> floor;
  for (const auto& row : surface.fpr) floor.push_back(*std::min_element(row.begin(), row.end()));
  const double best = *std::min_element(floor.begin(), floor.end());

  CalibrationResult r;
  r.target_fpr = target_fpr;
  for (std::size_t ki = 0; ki < surface.ks.size(); ++ki) {
    if (floor[ki] <= best + kKmaxTolerance) r.k_max = std::max(r.k_max, surface.ks[ki]);
  }

  bool found = false;
  for (std::size_t di = 0; di < surface.drs.size() && !found; ++di) {
    for (std::size_t ki = 0; ki < surface.ks.size(); ++ki) {
      if (surface.ks[ki] > r.k_max || surface.fpr[ki][di] > target_fpr) continue;
      if (!found || surface.ks[ki] > r.k) {
        r.k = surface.ks[ki];
        r.dr = surface.drs[di];
        r.achieved_fpr = surface.fpr[ki][di];
        found = true;
      }
    }
  }
  if (!found) {
    std::ostringstream msg;
    msg << "target FPR " << target_fpr << " unachievable; best attainable FPR is " << best;
    throw CalibrationError(msg.str(), best);
  }
  return r;
}

void save_calibration(const std::filesystem::path& path, const CalibrationResult& result,
                      const DetectionConfig& config, Index benign_count) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(10);
  out << "# taintradar calibration\n"
      << "k = " << result.k << "\n"
      << "dr = " << result.dr << "\n"
      << "target_fpr = " << result.target_fpr << "\n"
      << "achieved_fpr = " << result.achieved_fpr << "\n"
      << "k_max = " << result.k_max << "\n"
      << "benign_count = " << benign_count << "\n"
      << "temperature = " << config.temperature << "\n"
      << "binarize_threshold = " << config.binarize_threshold << "\n"
      << "fill = " << (config.fill == FillMode::kRandomNoise ? "noise" : "mean") << "\n"
      << "negative_source = " << (config.negative_source == NegativeSource::kOriginal ? "original" : "intermediate")
      << "\n";
}

DetectionConfig load_calibration(const std::filesystem::path& path, DetectionConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read calibration file " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  if (!kv.count("k") || !kv.count("dr")) throw std::runtime_error("calibration file lacks k or dr");
  base.top_k = std::stol(kv["k"]);
  base.rank_threshold = std::stol(kv["dr"]);
  if (kv.count("temperature")) base.temperature = std::stod(kv["temperature"]);
  if (kv.count("binarize_threshold")) base.binarize_threshold = std::stod(kv["binarize_threshold"]);
  if (kv.count("fill")) base.fill = kv["fill"] == "noise" ? FillMode::kRandomNoise : FillMode::kDatasetMean;
  if (kv.count("negative_source")) {
    base.negative_source = kv["negative_source"] == "original" ? NegativeSource::kOriginal : NegativeSource::kIntermediate;
  }
  return base;
}

void write_surface_csv(const std::filesystem::path& path, const FprSurface& surface) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "k,dr,fpr\n";
  for (std::size_t ki = 0; ki < surface.ks.size(); ++ki) {
    for (std::size_t di = 0; di < surface.drs.size(); ++di) {
      out << surface.ks[ki] << ',' << surface.drs[di] << ',' << surface.fpr[ki][di] << '\n';
    }
  }
}

}  // namespace taintradar
