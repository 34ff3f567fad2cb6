#ifndef TAINTRADAR_CALIBRATION_HPP_
#define TAINTRADAR_CALIBRATION_HPP_

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "taintradar/detector.hpp"

namespace taintradar {

/// Ranking change of every benign image for every K, one pipeline run per image.
struct RankingChanges {
  std::vector<Index> ks;
  std::vector<std::vector<Index>> per_image;  // [image][k index]
};

RankingChanges collect_ranking_changes(const Model<float>& model, const std::vector<Tensor<float>>& images,
                                       const DetectionConfig& config, const std::vector<Index>& ks);

struct FprSurface {
  std::vector<Index> ks;
  std::vector<Index> drs;
  std::vector<std::vector<double>> fpr;  // [k index][dr index]
  Index benign_count = 0;

  double at(Index k, Index dr) const;
};

/// FPR(K, ΔR) = fraction of images whose change at K is >= ΔR.
FprSurface surface_from_changes(const RankingChanges& changes, const std::vector<Index>& drs);

/// Throws std::invalid_argument on an empty benign set or empty ranges.
FprSurface fpr_surface(const Model<float>& model, const std::vector<Tensor<float>>& benign,
                       const std::vector<Index>& ks, const std::vector<Index>& drs, const DetectionConfig& config);

/// Ranges clipped to K < m and ΔR < m.
std::vector<Index> clipped_range(Index lo, Index hi, Index num_classes);

struct CalibrationResult {
  Index k = 0;
  Index dr = 0;
  double achieved_fpr = 0.0;
  double target_fpr = 0.0;
  Index k_max = 0;
};

class CalibrationError : public std::runtime_error {
 public:
  CalibrationError(const std::string& what, double best) : std::runtime_error(what), best_fpr(best) {}
  double best_fpr;
};

inline constexpr double kKmaxTolerance = 0.005;

/// k_max = largest K whose min-over-ΔR FPR is within 0.5 pp of the best such
/// value on the grid. Among K <= k_max and FPR <= target: smallest ΔR, then largest K.
CalibrationResult choose_params(const FprSurface& surface, double target_fpr);

// Key-value calibration file ("key = value" lines, '#' comments).
void save_calibration(const std::filesystem::path& path, const CalibrationResult& result,
                      const DetectionConfig& config, Index benign_count);
/// Applies k, dr and any stored detector settings on top of `base`.
DetectionConfig load_calibration(const std::filesystem::path& path, DetectionConfig base = {});

/// k,dr,fpr rows.
void write_surface_csv(const std::filesystem::path& path, const FprSurface& surface);

}  // namespace taintradar

#endif  // TAINTRADAR_CALIBRATION_HPP_
