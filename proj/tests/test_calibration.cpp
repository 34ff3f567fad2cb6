#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "taintradar/calibration.hpp"

using namespace taintradar;

namespace {

FprSurface surface(std::vector<Index> ks, std::vector<Index> drs, std::vector<std::vector<double>> fpr) {
  FprSurface s;
  s.ks = std::move(ks);
  s.drs = std::move(drs);
  s.fpr = std::move(fpr);
  s.benign_count = 100;
  return s;
}

}  // namespace

TEST_CASE("FPR surface counts changes at or above the threshold") {
  RankingChanges c{{1, 2}, {{0, 3}, {1, 1}, {2, 0}, {0, 0}}};
  const auto s = surface_from_changes(c, {1, 2, 3});
  CHECK(s.benign_count == 4);
  CHECK(s.at(1, 1) == doctest::Approx(0.5));
  CHECK(s.at(1, 2) == doctest::Approx(0.25));
  CHECK(s.at(1, 3) == doctest::Approx(0.0));
  CHECK(s.at(2, 1) == doctest::Approx(0.5));
  CHECK(s.at(2, 3) == doctest::Approx(0.25));
  CHECK_THROWS(s.at(5, 1));
}

TEST_CASE("FPR never rises with the rank threshold") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<Index> change(0, 9);
  RankingChanges c;
  c.ks = {1, 2, 3, 4};
  for (int i = 0; i < 200; ++i) c.per_image.push_back({change(rng), change(rng), change(rng), change(rng)});
  const auto s = surface_from_changes(c, clipped_range(1, 12, 10));
  CHECK(s.drs.back() == 9);
  for (const auto& row : s.fpr)
    for (std::size_t d = 1; d < row.size(); ++d) CHECK(row[d] <= row[d - 1]);
}

TEST_CASE("ranges stop below the class count") {
  CHECK(clipped_range(2, 20, 10) == std::vector<Index>{2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(clipped_range(4, 6, 10) == std::vector<Index>{4, 5, 6});
}

TEST_CASE("a zero surface picks the largest K and the smallest threshold") {
  const auto s = surface({3, 4, 5}, {1, 2, 3}, {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}});
  const auto r = choose_params(s, 0.05);
  CHECK(r.k == 5);
  CHECK(r.dr == 1);
  CHECK(r.k_max == 5);
  CHECK(r.achieved_fpr == 0.0);
}

TEST_CASE("chooser prefers a small threshold, then a large K") {
  // Rows are K = 2..4, columns ΔR = 1..3.
  const auto s = surface({2, 3, 4}, {1, 2, 3}, {{0.20, 0.04, 0.01}, {0.08, 0.03, 0.00}, {0.06, 0.05, 0.00}});
  const auto r = choose_params(s, 0.05);
  CHECK(r.k == 4);
  CHECK(r.dr == 2);
  CHECK(r.achieved_fpr == doctest::Approx(0.05));
  const auto strict = choose_params(s, 0.035);
  CHECK(strict.k == 3);
  CHECK(strict.dr == 2);
}

TEST_CASE("K beyond the FPR floor is excluded") {
  // K = 4 never gets below 0.10, so k_max is 3.
  const auto s = surface({2, 3, 4}, {1, 2}, {{0.04, 0.00}, {0.03, 0.00}, {0.12, 0.10}});
  const auto r = choose_params(s, 0.2);
  CHECK(r.k_max == 3);
  CHECK(r.k == 3);
  CHECK(r.dr == 1);
}

TEST_CASE("an unreachable target reports the best FPR") {
  const auto s = surface({1, 2}, {1, 2}, {{0.3, 0.2}, {0.25, 0.15}});
  try {
    choose_params(s, 0.1);
    FAIL("expected CalibrationError");
  } catch (const CalibrationError& e) {
    CHECK(e.best_fpr == doctest::Approx(0.15));
  }
}

TEST_CASE("calibration files round-trip") {
  const auto path = std::filesystem::temp_directory_path() / "taintradar_calib_test.txt";
  CalibrationResult r{6, 2, 0.04, 0.05, 8};
  DetectionConfig c;
  c.temperature = 1.5;
  c.fill = FillMode::kRandomNoise;
  c.negative_source = NegativeSource::kOriginal;
  save_calibration(path, r, c, 200);
  const auto loaded = load_calibration(path);
  CHECK(loaded.top_k == 6);
  CHECK(loaded.rank_threshold == 2);
  CHECK(loaded.temperature == doctest::Approx(1.5));
  CHECK(loaded.fill == FillMode::kRandomNoise);
  CHECK(loaded.negative_source == NegativeSource::kOriginal);
  std::filesystem::remove(path);
  CHECK_THROWS(load_calibration(path));
}

TEST_CASE("surface CSV has one row per cell") {
  const auto path = std::filesystem::temp_directory_path() / "taintradar_surface_test.csv";
  write_surface_csv(path, surface({1, 2}, {1, 2, 3}, {{0.1, 0.0, 0.0}, {0.2, 0.1, 0.0}}));
  std::ifstream in(path);
  std::string line;
  int rows = 0;
  std::getline(in, line);
  CHECK(line == "k,dr,fpr");
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 6);
  std::filesystem::remove(path);
}
