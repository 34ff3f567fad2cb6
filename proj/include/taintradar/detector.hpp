#ifndef TAINTRADAR_DETECTOR_HPP_
#define TAINTRADAR_DETECTOR_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "taintradar/masks.hpp"
#include "taintradar/model.hpp"

namespace taintradar {

enum class FillMode { kRandomNoise, kDatasetMean };

/// Pixel content substituted into removed regions.
class FillPattern {
 public:
  static FillPattern random_noise() { return FillPattern(FillMode::kRandomNoise, {}); }
  static FillPattern dataset_mean(Tensor<float> mean) { return FillPattern(FillMode::kDatasetMean, std::move(mean)); }

  FillMode mode() const { return mode_; }
  const Tensor<float>& mean() const { return mean_; }

  /// Replaces masked pixels (all channels). Random-noise mode draws uniform
  /// [0,1] values from `call_seed`; dataset-mean mode ignores it.
  Tensor<float> apply(const Tensor<float>& image, const BinaryMask& mask, std::uint64_t call_seed) const;

 private:
  FillPattern(FillMode mode, Tensor<float> mean) : mode_(mode), mean_(std::move(mean)) {}
  FillMode mode_;
  Tensor<float> mean_;
};

Tensor<float> fill_region(const Tensor<float>& image, const BinaryMask& mask, const FillPattern& fill,
                          std::uint64_t call_seed = 0);

/// Where the negative masks of the suppressed labels are computed.
enum class NegativeSource { kOriginal, kIntermediate };

struct DetectionConfig {
  Index top_k = 9;
  Index rank_threshold = 2;  // ΔR
  double temperature = 2.0;
  double binarize_threshold = 0.15;
  FillMode fill = FillMode::kDatasetMean;
  std::uint64_t seed = 0;
  NegativeSource negative_source = NegativeSource::kIntermediate;

  /// Throws std::invalid_argument unless 1 <= K < m, 1 <= ΔR < m and T > 0.
  void validate(Index num_classes) const;
};

FillPattern make_fill(const DetectionConfig& config, const Model<float>& model);

/// Records l = log softmax(Z / T)_c, the negated cross-entropy against the one-hot label.
template <typename S>
NodeId estimation_loss(Tape<S>& tape, NodeId logits, Index label, S temperature);

template <typename S>
struct RegionEstimate {
  Tensor<S> weights;  // α, one per feature map
  Tensor<S> heatmap;  // normalised, feature resolution
  BinaryMask mask;    // input resolution
  bool degenerate = false;
};

/// α_k = mean_ij ∂l/∂A^k_ij via one backward pass; heatmap = ReLU(Σ α_k A^k) / max.
template <typename S>
RegionEstimate<S> critical_region(TapedPrediction<S>& pred, double temperature, double threshold);

/// α^l_k = mean_ij ∂Z^l/∂A^k_ij via one backward pass; heatmap = ReLU(-Σ α^l_k A^k) / max.
template <typename S>
RegionEstimate<S> negative_region(TapedPrediction<S>& pred, Index label, double threshold);

/// The K labels other than `exclude` with the largest logit increase, descending; ties by index.
template <typename S>
std::vector<Index> top_k_suppressed(const Tensor<S>& before, const Tensor<S>& after, Index k, Index exclude);

/// Per-image pooled head Jacobian J[s][k] = mean_ij dZ^s/dA^k_ij, one m x K matrix per
/// batch element. Costs m head-only backward passes (the tape is not expanded below A);
/// appends the m roots to the tape.
template <typename S>
std::vector<Mat<S>> pooled_head_jacobian(Tape<S>& tape, const typename Model<S>::Recorded& rec);

/// Differentiable pre-binarisation critical heatmap at input resolution for batch
/// element `b`: upsample(ReLU(alpha . A) / max) with alpha = J^T (onehot_c - p) / T.
/// J is treated as a constant; p and A carry gradients.
template <typename S>
NodeId soft_critical_heatmap(Tape<S>& tape, const typename Model<S>::Recorded& rec, Index b, Index label,
                             const Mat<S>& jacobian, S temperature, Index out_h, Index out_w);

/// Same for the negative map of label l: upsample(ReLU(-J_l . A) / max).
template <typename S>
NodeId soft_negative_heatmap(Tape<S>& tape, const typename Model<S>::Recorded& rec, Index b, Index label,
                             const Mat<S>& jacobian, Index out_h, Index out_w);

enum class Verdict { kBenign, kAdversarial };
const char* verdict_name(Verdict v);

struct DetectionReport {
  Verdict verdict = Verdict::kBenign;
  Index label = 0;
  Index rank_after = 1;
  Index ranking_change = 0;
  Index top_k = 0;
  Index rank_threshold = 0;
  double temperature = 0.0;
  FillMode fill = FillMode::kDatasetMean;
  std::uint64_t seed = 0;
  BinaryMask estimated;               // L_est
  std::vector<BinaryMask> negatives;  // L_negative per suppressed label
  BinaryMask final_mask;              // intersection of the negatives
  std::vector<Index> suppressed;
  std::vector<double> logit_deltas;
  int forward_passes = 0;
  int backward_passes = 0;
  double wall_ms = 0.0;
  double forward_ms = 0.0;
  double backward_ms = 0.0;
  std::vector<std::string> notes;
};

/// The full five-pass pipeline: predict, critical region, fill, predict,
/// top-K, K negative masks, intersect, fill, predict. Verdict is adversarial
/// iff the original label's rank dropped by at least ΔR.
DetectionReport detect(const Tensor<float>& image, const Model<float>& model, const DetectionConfig& config);

/// Runs passes 1-4 once for max(ks) and finishes pass 5 for every K in `ks`.
/// The ranking change for each K equals what `detect` reports with that K.
std::vector<Index> detect_ranking_changes(const Tensor<float>& image, const Model<float>& model,
                                          const DetectionConfig& config, const std::vector<Index>& ks);

/// Flat JSON object with verdict, ranks, top-K labels/deltas, pass counts, seed and timings.
std::string report_to_json(const DetectionReport& report);

/// Rank of the predicted label after zero-filling the next `step_pixels`
/// most important pixels, `steps` times. Entry 0 is the unmodified image.
std::vector<Index> removal_curve(const Tensor<float>& image, const Model<float>& model, Index step_pixels,
                                 Index steps, double temperature = 2.0);

}  // namespace taintradar

#endif  // TAINTRADAR_DETECTOR_HPP_
