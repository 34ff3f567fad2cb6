#include "taintradar/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "binary_io.hpp"

namespace taintradar {

namespace {

const char* const kClassNames[kToyClasses] = {"disk",    "square",   "triangle", "plus",  "ring",
                                              "hstripe", "vstripe",  "checker",  "cross", "diamond"};

bool inside(Index label, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double box = std::max(ax, ay);
  auto band = [&](double v) { return static_cast<long>(std::floor((v + r) / 2.0)); };
  switch (label) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return box <= 0.85 * r;
    case 2:
      if (dy < -r || dy > 0.8 * r) return false;
      return ax <= (dy + r) / 1.8;
    case 3: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
    case 4: {
      const double d = std::sqrt(dx * dx + dy * dy);
      return d <= r && d >= 0.55 * r;
    }
    case 5: return box <= r && band(dy) % 2 == 0;
    case 6: return box <= r && band(dx) % 2 == 0;
    case 7: return box <= r && (band(dx) + band(dy)) % 2 == 0;
    case 8: return box <= r && std::abs(ax - ay) <= 0.9;
    case 9: return ax + ay <= r;
  }
  return false;
}

}  // namespace

const std::vector<std::string>& toy_class_names() {
  static const std::vector<std::string> names(std::begin(kClassNames), std::end(kClassNames));
  return names;
}

Dataset make_toy_dataset(Index count, std::uint64_t seed) {
  if (count <= 0) throw std::invalid_argument("toy dataset needs a positive count");
  constexpr Index side = kToySide;
  Dataset data;
  data.images = Tensor<float>({count, 3, side, side});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.03);
  const Index per = 3 * side * side;
  for (Index n = 0; n < count; ++n) {
    const Index label = static_cast<Index>(rng() % kToyClasses);
    data.labels.push_back(label);
    auto img = data.images.flat().segment(n * per, per);

    double base[3], slope_x[3], slope_y[3];
    for (int c = 0; c < 3; ++c) {
      base[c] = 0.25 + 0.5 * u(rng);
      slope_x[c] = (u(rng) - 0.5) * 0.3;
      slope_y[c] = (u(rng) - 0.5) * 0.3;
    }
    for (int c = 0; c < 3; ++c) {
      for (Index y = 0; y < side; ++y) {
        for (Index x = 0; x < side; ++x) {
          const double v = base[c] + slope_x[c] * (static_cast<double>(x) / side - 0.5) +
                           slope_y[c] * (static_cast<double>(y) / side - 0.5) + noise(rng);
          img[(c * side + y) * side + x] = static_cast<float>(v);
        }
      }
    }

    // Two or three instances of the class shape, scattered without overlap.
    struct Placed {
      double cx, cy, r;
    };
    const int instances = rng() % 2 ? 2 : 3;
    std::vector<Placed> placed;
    for (int i = 0; i < instances; ++i) {
      for (int attempt = 0; attempt < 200; ++attempt) {
        const double r = 3.5 + 2.0 * u(rng);
        const double cx = r + 0.5 + u(rng) * (side - 2 * r - 1.0);
        const double cy = r + 0.5 + u(rng) * (side - 2 * r - 1.0);
        bool clear = true;
        for (const Placed& p : placed) {
          if (std::hypot(p.cx - cx, p.cy - cy) < p.r + r + 1.0) clear = false;
        }
        if (clear) {
          placed.push_back({cx, cy, r});
          break;
        }
      }
    }
    for (const Placed& p : placed) {
      double color[3];
      double contrast = 0.0;
      while (contrast < 0.45) {
        contrast = 0.0;
        for (int c = 0; c < 3; ++c) {
          color[c] = u(rng) < 0.5 ? 0.05 + 0.25 * u(rng) : 0.7 + 0.25 * u(rng);
          contrast += std::abs(color[c] - base[c]);
        }
      }
      for (Index y = 0; y < side; ++y) {
        for (Index x = 0; x < side; ++x) {
          if (!inside(label, static_cast<double>(x) + 0.5 - p.cx, static_cast<double>(y) + 0.5 - p.cy, p.r)) continue;
          for (int c = 0; c < 3; ++c) img[(c * side + y) * side + x] = static_cast<float>(color[c] + noise(rng));
        }
      }
    }
    img = img.cwiseMax(0.0f).cwiseMin(1.0f);
  }
  return data;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  write_rt1(dir / "images.rt1", data.images);
  Tensor<float> labels({data.size()});
  for (Index i = 0; i < data.size(); ++i) labels[i] = static_cast<float>(data.labels[static_cast<std::size_t>(i)]);
  write_rt1(dir / "labels.rt1", labels);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset data;
  data.images = read_rt1(dir / "images.rt1");
  if (data.images.rank() != 4) throw FormatError("images.rt1 must be N x C x H x W");
  const Tensor<float> labels = read_rt1(dir / "labels.rt1");
  if (labels.size() != data.images.dim(0)) throw FormatError("label count does not match image count");
  for (Index i = 0; i < labels.size(); ++i) data.labels.push_back(static_cast<Index>(std::lround(labels[i])));
  return data;
}

void write_ppm(const std::filesystem::path& path, const Tensor<float>& image) {
  Tensor<float> img = image;
  if (img.rank() == 2) img = img.reshaped({1, img.dim(0), img.dim(1)});
  if (img.rank() != 3 || (img.dim(0) != 3 && img.dim(0) != 1)) {
    throw ShapeError("PPM export needs a 1- or 3-channel CHW image, got " + shape_string(image.shape()));
  }
  const Index h = img.dim(1), w = img.dim(2);
  std::ostringstream header;
  header << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<char> bytes;
  const std::string head = header.str();
  bytes.insert(bytes.end(), head.begin(), head.end());
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      for (Index c = 0; c < 3; ++c) {
        const float v = img.at(img.dim(0) == 3 ? c : 0, y, x);
        bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
      }
    }
  }
  detail::write_file(path, bytes);
}

Tensor<float> read_ppm(const std::filesystem::path& path) {
  const std::vector<char> bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    std::string t;
    while (pos < bytes.size()) {
      const char ch = bytes[pos];
      if (ch == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        ++pos;
      } else {
        t.push_back(ch);
        ++pos;
      }
    }
    return t;
  };
  if (token() != "P6") throw FormatError("only binary P6 PPM is supported");
  long w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(token());
    h = std::stol(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw FormatError("malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw FormatError("unsupported PPM geometry");
  ++pos;  // single whitespace after maxval
  if (bytes.size() - pos < static_cast<std::size_t>(w * h * 3)) throw FormatError("PPM payload truncated");
  Tensor<float> img({3, h, w});
  for (long y = 0; y < h; ++y) {
    for (long x = 0; x < w; ++x) {
      for (long c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(static_cast<unsigned char>(bytes[pos++])) / static_cast<float>(maxval);
      }
    }
  }
  return img;
}

Tensor<float> load_image(const std::filesystem::path& path) {
  if (path.extension() == ".ppm") return read_ppm(path);
  Tensor<float> t = read_rt1(path);
  if (t.rank() == 4 && t.dim(0) == 1) t = t.reshaped({t.dim(1), t.dim(2), t.dim(3)});
  if (t.rank() != 3) throw FormatError("expected a CHW image in " + path.string());
  return t;
}

}  // namespace taintradar
