#ifndef TAINTRADAR_EVAL_HPP_
#define TAINTRADAR_EVAL_HPP_

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "taintradar/attack.hpp"
#include "taintradar/calibration.hpp"

namespace taintradar {

struct MetricsRow {
  std::string setting;
  double target_fpr = 0.0;  // 0 when the detector settings were given directly
  Index k = 0;
  Index dr = 0;
  Index attempts = 0;
  Index successes = 0;
  Index detected = 0;
  double sr = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
  double mean_iou = 0.0;
  double post_defense_sr = 0.0;  // sr * (1 - tpr)
  std::string status = "ok";
};

/// Fills sr, tpr and post_defense_sr from the counts.
void finish_row(MetricsRow& row);

struct MetricsTable {
  std::vector<MetricsRow> rows;
  bool partial = false;
};

/// Column order: setting,target_fpr,k,dr,attempts,successes,sr,detected,tpr,fpr,mean_iou,post_defense_sr,status
inline constexpr const char* kMetricsCsvHeader =
    "setting,target_fpr,k,dr,attempts,successes,sr,detected,tpr,fpr,mean_iou,post_defense_sr,status";
void write_metrics_csv(const std::filesystem::path& path, const MetricsTable& table);

struct BatteryEntry {
  double size = 0.3;
  Placement placement;
  Index batch_size = 1;
  PatchShape shape = PatchShape::kSquare;

  /// e.g. "square-0.3-rb-b1".
  std::string label() const;
};

std::vector<BatteryEntry> expand_battery(const std::vector<double>& sizes, const std::vector<Placement>& placements,
                                         const std::vector<Index>& batches,
                                         const std::vector<PatchShape>& shapes = {PatchShape::kSquare});

/// Text format, one "key = value" per line ('#' starts a comment):
///   model, benign, victims, out      paths (relative to the spec file)
///   calibration                      calibration file; or
///   target_fpr = 0.03,0.06           calibrate on the first `calibration_count` benign images
///   k, dr, fill                      direct detector settings
///   seed, target, victims_per_entry, benign_count, calibration_count, iterations, step_size, stop_probability
///   attack size=0.3 placement=rb batch=1 shape=square
///   grid sizes=0.2,0.3,0.4 placements=rb,random batches=1,4,16 [shapes=square]
/// TAINTRADAR_SEED, when set, overrides `seed`.
struct ExperimentSpec {
  std::filesystem::path model;
  std::filesystem::path benign;
  std::filesystem::path victims;
  std::filesystem::path output;
  std::optional<std::filesystem::path> calibration;
  std::vector<double> target_fprs;
  DetectionConfig detection;
  std::uint64_t seed = 1;
  Index target = 0;
  Index victims_per_entry = 40;
  Index benign_count = 200;
  Index calibration_count = 200;
  int iterations = 300;
  double step_size = 0.1;
  std::optional<double> stop_probability;
  std::vector<BatteryEntry> battery;
};

ExperimentSpec parse_experiment_spec(const std::string& text, const std::filesystem::path& base_dir = {});
/// Parses and checks that every referenced file exists.
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

/// Runs every battery entry against every detector setting. Writes metrics.csv,
/// reports.jsonl, roc.csv and, when calibrating, surface.csv into spec.output.
/// A failing entry yields a row with status "failed: ..." and marks the table partial.
MetricsTable run_experiment(const ExperimentSpec& spec);

/// Sliding majority vote (strictly more than half adversarial). One vote per
/// full window; a stream shorter than the window gets a single vote over all frames.
std::vector<Verdict> frame_vote(const std::vector<Verdict>& verdicts, Index window = 5);

struct BenchSummary {
  Index images = 0;
  Index k = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p90_ms = 0.0;
  double max_ms = 0.0;
  double forward_ms = 0.0;   // mean per image
  double backward_ms = 0.0;  // mean per image
  double backward_pass_ms = 0.0;  // mean of one backward pass, over the K sweep
  bool pass_counts_ok = true;
  std::vector<Index> ks;
  std::vector<double> median_ms_per_k;
  double marginal_ms = 0.0;  // least-squares slope of median latency in K
  double marginal_ratio() const { return backward_pass_ms > 0 ? marginal_ms / backward_pass_ms : 0.0; }
};

BenchSummary bench(const Model<float>& model, const std::vector<Tensor<float>>& images, const DetectionConfig& config,
                   const std::vector<Index>& ks = {4, 5, 6, 7, 8, 9, 10, 11, 12});

std::string bench_to_text(const BenchSummary& summary);

/// Correctly classified images of `data`, optionally excluding one label, in dataset order.
std::vector<Tensor<float>> correctly_classified(const Model<float>& model, const Dataset& data,
                                                std::optional<Index> exclude_label = std::nullopt,
                                                Index limit = -1);

/// TAINTRADAR_SEED if set, else `fallback`.
std::uint64_t seed_from_env(std::uint64_t fallback);

}  // namespace taintradar

#endif  // TAINTRADAR_EVAL_HPP_
