#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "taintradar/calibration.hpp"
#include "taintradar/dataset.hpp"
#include "taintradar/eval.hpp"

using namespace taintradar;
namespace fs = std::filesystem;

namespace {

std::pair<Index, Index> parse_range(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw CLI::ValidationError("range", "expected lo:hi, got " + text);
  return {std::stol(text.substr(0, colon)), std::stol(text.substr(colon + 1))};
}

FillMode parse_fill(const std::string& s) {
  if (s == "noise") return FillMode::kRandomNoise;
  if (s == "mean") return FillMode::kDatasetMean;
  throw CLI::ValidationError("--fill", "expected noise or mean");
}

void dump_mask(const fs::path& dir, const std::string& name, const BinaryMask& mask) {
  const Tensor<float> t = mask.to_tensor();
  write_rt1(dir / (name + ".rt1"), t);
  write_ppm(dir / (name + ".ppm"), t);
}

Architecture read_architecture(const std::string& arg) {
  if (arg == "default") return default_architecture();
  std::ifstream in(arg);
  if (!in) throw std::runtime_error("cannot read architecture file " + arg);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_architecture(buf.str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"taintradar: localized adversarial example detection laboratory"};
  app.require_subcommand(1);
  int exit_code = 0;

  // dataset
  auto* ds = app.add_subcommand("dataset", "Generate the synthetic toy dataset");
  Index ds_count = 5000;
  std::uint64_t ds_seed = 11;
  std::string ds_out;
  ds->add_option("--count", ds_count, "Number of images")->capture_default_str();
  ds->add_option("--seed", ds_seed, "Generator seed")->capture_default_str();
  ds->add_option("--out", ds_out, "Output directory")->required();
  ds->callback([&] {
    save_dataset(ds_out, make_toy_dataset(ds_count, seed_from_env(ds_seed)));
    std::printf("wrote %ld images to %s\n", ds_count, ds_out.c_str());
  });

  // train
  auto* tr = app.add_subcommand("train", "Train a classifier");
  std::string tr_arch = "default", tr_data, tr_out;
  TrainConfig tc;
  std::uint64_t tr_init_seed = 3;
  tr->add_option("--arch", tr_arch, "Architecture file, or 'default'")->capture_default_str();
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Output TRM1 model")->required();
  tr->add_option("--epochs", tc.epochs)->capture_default_str();
  tr->add_option("--lr", tc.learning_rate)->capture_default_str();
  tr->add_option("--batch-size", tc.batch_size)->capture_default_str();
  tr->add_option("--seed", tr_init_seed, "Weight initialisation seed")->capture_default_str();
  tr->callback([&] {
    const Dataset data = load_dataset(tr_data);
    Model<float> model = Model<float>::build(read_architecture(tr_arch), seed_from_env(tr_init_seed));
    tc.seed = seed_from_env(tc.seed);
    const TrainResult r = train(model, data, tc);
    save_model(tr_out, model);
    std::printf("held-out accuracy %.4f (%ld train, %ld held out), final loss %.4f\n", r.holdout_accuracy,
                r.train_count, r.holdout_count, r.final_loss);
  });

  // attack
  auto* at = app.add_subcommand("attack", "Generate localized adversarial patches");
  std::string at_model, at_data, at_out, at_shape = "square", at_place = "rb", at_est = "none", at_calib;
  AttackConfig ac;
  double at_size = 0.3, at_stop = 0.0;
  Index at_victims = 16;
  bool at_bpda = false;
  at->add_option("--model", at_model)->required();
  at->add_option("--data", at_data, "Victim dataset directory")->required();
  at->add_option("--target", ac.target)->required();
  at->add_option("--batch-size", ac.batch_size)->capture_default_str();
  at->add_option("--size", at_size)->capture_default_str();
  at->add_option("--shape", at_shape, "square|star|lightning|glasses")->capture_default_str();
  at->add_option("--placement", at_place, "rb|random|fixed:x,y")->capture_default_str();
  at->add_option("--lambda", ac.lambda)->capture_default_str();
  at->add_option("--est", at_est, "none|mislead|minimize|target")->capture_default_str();
  at->add_option("--out", at_out)->required();
  at->add_option("--victims", at_victims, "Number of correctly classified victims")->capture_default_str();
  at->add_option("--iterations", ac.iterations)->capture_default_str();
  at->add_option("--step-size", ac.step_size)->capture_default_str();
  at->add_option("--stop-prob", at_stop, "Stop probability (0 = off)");
  at->add_flag("--multiple-sizes", ac.multiple_sizes);
  at->add_flag("--bpda", at_bpda, "End-to-end BPDA attack through the detector");
  at->add_option("--calib", at_calib, "Calibration file for the detector used by --bpda / --est");
  at->add_option("--seed", ac.seed)->capture_default_str();
  at->callback([&] {
    const Model<float> model = load_model(at_model);
    ac.seed = seed_from_env(ac.seed);
    ac.est = parse_est_variant(at_est);
    if (at_stop > 0) ac.stop_probability = at_stop;
    const auto victims = correctly_classified(model, load_dataset(at_data), ac.target, at_victims);
    if (victims.empty()) throw std::runtime_error("no correctly classified victims outside the target class");
    const auto& s = model.input_shape();
    const PatchSpec patch = make_patch_spec(parse_shape(at_shape), at_size, s[0], s[1], s[2], {Placement::parse(at_place)});
    DetectionConfig dc;
    if (!at_calib.empty()) dc = load_calibration(at_calib);
    dc.seed = ac.seed;
    AttackResult res;
    if (at_bpda) {
      res = bpda_attack(model, victims, patch, ac, dc, BpdaSchedule{});
    } else if (ac.est != EstVariant::kNone) {
      const auto r = region_misleading_attack(model, victims, patch, ac, dc);
      res = r.attack;
      std::printf("mean IoU(L_est, G) %.4f\n", r.mean_iou());
    } else {
      res = attack_groups(model, victims, patch, ac);
    }
    fs::create_directories(at_out);
    write_rt1(fs::path(at_out) / "patch.rt1", res.patch.pattern);
    write_ppm(fs::path(at_out) / "patch.ppm", res.patch.pattern);
    for (std::size_t i = 0; i < res.victims.size(); ++i) {
      const std::string stem = "victim_" + std::to_string(i);
      write_rt1(fs::path(at_out) / (stem + ".rt1"), res.victims[i]);
      write_ppm(fs::path(at_out) / (stem + ".ppm"), res.victims[i]);
    }
    write_attack_csv(fs::path(at_out) / "results.csv", res);
    std::printf("SR %.4f over %zu victims\n", res.success_rate(), res.victims.size());
  });

  // detect
  auto* de = app.add_subcommand("detect", "Run the detector on one image");
  std::string de_model, de_image, de_fill = "mean", de_report, de_masks, de_calib;
  DetectionConfig dc;
  de->add_option("--model", de_model)->required();
  de->add_option("--image", de_image, ".ppm or .rt1")->required();
  auto* k_opt = de->add_option("--k", dc.top_k)->capture_default_str();
  auto* dr_opt = de->add_option("--dr", dc.rank_threshold)->capture_default_str();
  auto* fill_opt = de->add_option("--fill", de_fill, "noise|mean")->capture_default_str();
  de->add_option("--temperature", dc.temperature)->capture_default_str();
  de->add_option("--seed", dc.seed)->capture_default_str();
  de->add_option("--calib", de_calib, "Calibration file (explicit --k/--dr/--fill win)");
  de->add_option("--report", de_report, "JSON report path (default: stdout)");
  de->add_option("--dump-masks", de_masks, "Directory for mask RT1/PPM dumps");
  de->callback([&] {
    const Model<float> model = load_model(de_model);
    DetectionConfig c = dc;
    if (!de_calib.empty()) {
      c = load_calibration(de_calib, dc);
      if (k_opt->count()) c.top_k = dc.top_k;
      if (dr_opt->count()) c.rank_threshold = dc.rank_threshold;
    }
    if (de_calib.empty() || fill_opt->count()) c.fill = parse_fill(de_fill);
    c.seed = seed_from_env(c.seed);
    const DetectionReport r = detect(load_image(de_image), model, c);
    const std::string json = report_to_json(r);
    if (de_report.empty()) {
      std::cout << json << '\n';
    } else {
      std::ofstream(de_report) << json << '\n';
      std::printf("%s (ranking change %ld)\n", verdict_name(r.verdict), r.ranking_change);
    }
    if (!de_masks.empty()) {
      fs::create_directories(de_masks);
      dump_mask(de_masks, "estimated", r.estimated);
      for (std::size_t i = 0; i < r.negatives.size(); ++i) {
        dump_mask(de_masks, "negative_" + std::to_string(r.suppressed[i]), r.negatives[i]);
      }
      dump_mask(de_masks, "final", r.final_mask);
    }
  });

  // calibrate
  auto* ca = app.add_subcommand("calibrate", "Choose K and ΔR from benign images");
  std::string ca_model, ca_benign, ca_out, ca_k = "2:16", ca_dr = "1:20", ca_surface, ca_fill = "mean";
  double ca_target = 0.06;
  Index ca_count = 200;
  ca->add_option("--model", ca_model)->required();
  ca->add_option("--benign", ca_benign, "Benign dataset directory")->required();
  ca->add_option("--target-fpr", ca_target)->capture_default_str();
  ca->add_option("--k-range", ca_k)->capture_default_str();
  ca->add_option("--dr-range", ca_dr)->capture_default_str();
  ca->add_option("--count", ca_count, "Correctly classified benign images to use")->capture_default_str();
  ca->add_option("--fill", ca_fill, "noise|mean")->capture_default_str();
  ca->add_option("--out", ca_out, "Calibration file")->required();
  ca->add_option("--surface", ca_surface, "Optional k,dr,fpr CSV");
  ca->callback([&] {
    const Model<float> model = load_model(ca_model);
    const auto benign = correctly_classified(model, load_dataset(ca_benign), std::nullopt, ca_count);
    DetectionConfig c;
    c.fill = parse_fill(ca_fill);
    c.seed = seed_from_env(c.seed);
    const auto [klo, khi] = parse_range(ca_k);
    const auto [dlo, dhi] = parse_range(ca_dr);
    const FprSurface surface =
        fpr_surface(model, benign, clipped_range(klo, khi, model.num_classes()),
                    clipped_range(dlo, dhi, model.num_classes()), c);
    if (!ca_surface.empty()) write_surface_csv(ca_surface, surface);
    const CalibrationResult r = choose_params(surface, ca_target);
    save_calibration(ca_out, r, c, surface.benign_count);
    std::printf("K=%ld dR=%ld FPR %.4f (target %.4f, k_max %ld, %ld benign images)\n", r.k, r.dr, r.achieved_fpr,
                r.target_fpr, r.k_max, surface.benign_count);
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Run an experiment spec");
  std::string ev_spec;
  ev->add_option("--spec", ev_spec)->required();
  ev->callback([&] {
    const ExperimentSpec spec = load_experiment_spec(ev_spec);
    const MetricsTable t = run_experiment(spec);
    for (const auto& r : t.rows) {
      std::printf("%-24s fpr_target %.2f K=%ld dR=%ld SR %.3f TPR %.3f FPR %.3f IoU %.3f post-defense SR %.3f %s\n",
                  r.setting.c_str(), r.target_fpr, r.k, r.dr, r.sr, r.tpr, r.fpr, r.mean_iou, r.post_defense_sr,
                  r.status.c_str());
    }
    if (t.partial) exit_code = 2;
  });

  // bench
  auto* be = app.add_subcommand("bench", "Detection latency and per-K cost");
  std::string be_model, be_data, be_calib;
  Index be_images = 100;
  DetectionConfig bc;
  be->add_option("--model", be_model)->required();
  be->add_option("--data", be_data, "Dataset directory")->required();
  be->add_option("--images", be_images)->capture_default_str();
  be->add_option("--k", bc.top_k)->capture_default_str();
  be->add_option("--calib", be_calib);
  be->callback([&] {
    const Model<float> model = load_model(be_model);
    if (!be_calib.empty()) bc = load_calibration(be_calib, bc);
    const auto images = correctly_classified(model, load_dataset(be_data), std::nullopt, be_images);
    const BenchSummary s = bench(model, images, bc, clipped_range(4, 12, model.num_classes()));
    std::cout << bench_to_text(s);
    if (!s.pass_counts_ok) exit_code = 2;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return exit_code;
}
