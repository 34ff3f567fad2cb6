#ifndef TAINTRADAR_DATASET_HPP_
#define TAINTRADAR_DATASET_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "taintradar/model.hpp"

namespace taintradar {

inline constexpr Index kToyClasses = 10;
inline constexpr Index kToySide = 32;

/// Names of the ten toy classes, indexed by label: five solid shapes
/// (disk, square, triangle, plus, ring) and five textured ones.
const std::vector<std::string>& toy_class_names();

/// Synthetic 3x32x32 scenes: two or three scattered, randomly coloured
/// instances of the class shape over a smooth noisy background.
/// Deterministic in (count, seed).
Dataset make_toy_dataset(Index count, std::uint64_t seed);

/// A dataset directory holds images.rt1 (N x C x H x W) and labels.rt1 (N).
void save_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

/// Binary PPM (P6); CHW float images in [0,1]. Single-channel tensors are written as grey.
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::filesystem::path& path);

/// Reads a CHW image from .ppm or .rt1 (a 1 x C x H x W RT1 is accepted too).
Tensor<float> load_image(const std::filesystem::path& path);

}  // namespace taintradar

#endif  // TAINTRADAR_DATASET_HPP_
