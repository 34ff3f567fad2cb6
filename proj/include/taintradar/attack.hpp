#ifndef TAINTRADAR_ATTACK_HPP_
#define TAINTRADAR_ATTACK_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "taintradar/detector.hpp"
#include "taintradar/masks.hpp"
#include "taintradar/model.hpp"

namespace taintradar {

enum class PatchShape { kSquare, kStar, kLightning, kGlasses };
PatchShape parse_shape(const std::string& name);
const char* shape_name(PatchShape shape);

/// Five-point star and three-segment bolt, rasterised at pixel centres into a side x side box.
/// Glasses are two lens ellipses joined by a bridge.
BinaryMask shape_mask(PatchShape shape, Index side);

/// side = round(sqrt(fraction * H * W)); 0.25 on 32x32 gives 16.
Index patch_side(Index height, Index width, double fraction);

struct Placement {
  enum class Kind { kRightBottom, kRandom, kFixed };
  Kind kind = Kind::kRightBottom;
  Index x = 0;  // left, for kFixed
  Index y = 0;  // top, for kFixed

  static Placement right_bottom() { return {}; }
  static Placement random() { return {Kind::kRandom, 0, 0}; }
  static Placement fixed(Index x, Index y) { return {Kind::kFixed, x, y}; }
  /// "rb", "random" or "fixed:x,y".
  static Placement parse(const std::string& text);
};

struct Position {
  Index top = 0;
  Index left = 0;
};

/// Random placement only draws positions where the patch fits; fixed positions that clip throw.
Position resolve_placement(const Placement& placement, Index height, Index width, Index patch_h, Index patch_w,
                           std::mt19937_64& rng);

struct PatchSpec {
  Tensor<float> pattern;  // C x h x w in [0,1]
  BinaryMask shape_mask;  // h x w
  PatchShape shape = PatchShape::kSquare;
  double size_fraction = 0.3;
  std::vector<Placement> placements{Placement::right_bottom()};  // two entries = multi-patch

  Index height() const { return shape_mask.height(); }
  Index width() const { return shape_mask.width(); }
};

/// Mid-grey pattern of the given shape and size.
PatchSpec make_patch_spec(PatchShape shape, double size_fraction, Index channels, Index height, Index width,
                          std::vector<Placement> placements = {Placement::right_bottom()});

struct Patched {
  Tensor<float> image;
  BinaryMask region;  // G
};

/// Writes the pattern at every position; G is the union of written pixels.
Patched apply_patch(const Tensor<float>& image, const PatchSpec& patch, const std::vector<Position>& positions);
Patched apply_patch(const Tensor<float>& image, const PatchSpec& patch, Position position);

/// Horizontal band of `rows` x `cols` pixels centred on (cy, cx); the toy accessory.
BinaryMask glasses_band(Index height, Index width, Index cy, Index cx, Index rows = 3, Index cols = 24);

enum class EstVariant { kNone, kMislead, kMinimize, kTarget };
EstVariant parse_est_variant(const std::string& name);
const char* est_variant_name(EstVariant v);

struct AttackConfig {
  Index target = 0;
  Index batch_size = 1;  // victims per shared patch; 1 = partial
  bool multiple_sizes = false;
  int iterations = 300;
  double step_size = 0.1;  // Adam rate on pixel logits
  std::optional<double> stop_probability;
  double lambda = 0.0;
  EstVariant est = EstVariant::kNone;
  int norm = 2;           // 1 or 2
  BinaryMask est_target;  // tar_t for kTarget
  double temperature = 2.0;
  std::uint64_t seed = 1;
};

struct AttackResult {
  PatchSpec patch;
  std::vector<bool> success;
  std::vector<bool> fooled;        // classified as the target, ignoring any defense
  std::vector<double> confidence;  // probability of the target
  std::vector<Tensor<float>> victims;
  std::vector<BinaryMask> regions;
  std::vector<Index> labels;  // prediction on each final victim
  std::vector<Index> targets;
  int iterations_run = 0;
  double success_rate() const;
};

/// Maximises mean log p(target) over all victims jointly, with one shared
/// pattern. With multiple sizes the scale is drawn from {0.2, 0.3, 0.4} each
/// step; random placements are redrawn each step. When cfg.lambda > 0 and an
/// estimator variant is set, the objective is (1-λ)·l_prd + λ·l_est.
AttackResult generate_patch(const Model<float>& model, const std::vector<Tensor<float>>& victims, PatchSpec patch,
                            const AttackConfig& config);

/// Splits victims into groups of cfg.batch_size and attacks each group with its own patch.
AttackResult attack_groups(const Model<float>& model, const std::vector<Tensor<float>>& victims,
                           const PatchSpec& patch, const AttackConfig& config);

/// Applies a finished patch to fresh images (universality check).
AttackResult evaluate_patch(const Model<float>& model, const std::vector<Tensor<float>>& images,
                            const PatchSpec& patch, Index target, std::uint64_t seed,
                            std::optional<double> stop_probability = std::nullopt);

/// Optimises only the pixels under `accessory` (a full-image mask), shared across the victims.
AttackResult masked_accessory_attack(const Model<float>& model, const std::vector<Tensor<float>>& victims,
                                     const BinaryMask& accessory, const AttackConfig& config);

/// Region misleading/minimisation/targeting; same as generate_patch with an
/// estimator term. `iou` holds IoU(L_est, G) per final victim.
struct RegionAttackResult {
  AttackResult attack;
  std::vector<double> iou;
  double mean_iou() const;
};
RegionAttackResult region_misleading_attack(const Model<float>& model, const std::vector<Tensor<float>>& victims,
                                            const PatchSpec& patch, const AttackConfig& config,
                                            const DetectionConfig& detection);

enum class RankingMode { kUniversal, kPartial };

/// Highest-ranked label of the averaged probability vector that is not the
/// original label of any victim.
Index ranking_target(const Model<float>& model, const std::vector<Tensor<float>>& victims);

AttackResult ranking_manipulation_attack(const Model<float>& model, const std::vector<Tensor<float>>& victims,
                                         RankingMode mode, const PatchSpec& patch, AttackConfig config);

/// 1 / (1 + exp(-t (L - threshold))).
double bpda_surrogate(double value, double threshold, double t);

struct BpdaSchedule {
  int iterations = 2000;
  double step_size = 1.0;  // in 8-bit pixel units
  double t_start = 1.0;
  double t_increment = 1.0;
  int t_every = 100;
  int check_every = 10;  // hard-detector checks for early stopping
};

/// End-to-end attack through the detector with sigmoid-softened masks. A
/// victim counts as a success only if it is classified as the target and the
/// hard detector says benign.
AttackResult bpda_attack(const Model<float>& model, const std::vector<Tensor<float>>& victims, const PatchSpec& patch,
                         const AttackConfig& config, const DetectionConfig& detection, const BpdaSchedule& schedule);

/// One row per victim: index,success,label,target,confidence,g_area.
void write_attack_csv(const std::filesystem::path& path, const AttackResult& result);

}  // namespace taintradar

#endif  // TAINTRADAR_ATTACK_HPP_
