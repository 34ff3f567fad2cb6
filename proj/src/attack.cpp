#include "taintradar/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "taintradar/optim.hpp"

namespace taintradar {

namespace {

struct Point {
  double x, y;
};

bool inside_polygon(const std::vector<Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

std::vector<Point> star_polygon() {
  const double pi = std::acos(-1.0);
  std::vector<Point> poly;
  for (int i = 0; i < 10; ++i) {
    const double r = i % 2 == 0 ? 0.5 : 0.2;
    const double a = -pi / 2 + i * pi / 5;
    poly.push_back({0.5 + r * std::cos(a), 0.52 + r * std::sin(a)});
  }
  return poly;
}

// Three strokes: down-left, right, down-left again.
std::vector<Point> bolt_polygon() {
  return {{0.60, 0.00}, {0.15, 0.55}, {0.45, 0.55}, {0.25, 1.00},
          {0.85, 0.40}, {0.55, 0.40}, {0.80, 0.00}};
}

double sq(double v) { return v * v; }

bool inside_glasses(double x, double y) {
  const bool left = sq((x - 0.26) / 0.24) + sq((y - 0.5) / 0.3) <= 1.0;
  const bool right = sq((x - 0.74) / 0.24) + sq((y - 0.5) / 0.3) <= 1.0;
  const bool bridge = x >= 0.45 && x <= 0.55 && y >= 0.42 && y <= 0.52;
  return left || right || bridge;
}

Tensor<float> channel_mask(const BinaryMask& mask, Index channels) {
  Tensor<float> out({channels, mask.height(), mask.width()});
  const Tensor<float> plane = mask.to_tensor();
  for (Index c = 0; c < channels; ++c) out.flat().segment(c * plane.size(), plane.size()) = plane.flat();
  return out;
}

// Bilinear resize of every channel of a C x n x n pattern to C x s x s.
std::shared_ptr<const Mat<float>> channel_resize(Index channels, Index n, Index s) {
  const auto single = bilinear_matrix<float>(n, n, s, s);
  auto m = std::make_shared<Mat<float>>(Mat<float>::Zero(channels * s * s, channels * n * n));
  for (Index c = 0; c < channels; ++c) m->block(c * s * s, c * n * n, s * s, n * n) = *single;
  return m;
}

// One step's patch geometry: pattern size, mask and positions per victim.
struct StepGeometry {
  Index h = 0, w = 0;
  BinaryMask mask;
  std::shared_ptr<const Mat<float>> resize;  // null when the parameter is used as is
  std::vector<std::vector<Position>> positions;
};

class PatchOptimizer {
 public:
  PatchOptimizer(const Model<float>& model, const std::vector<Tensor<float>>& victims, PatchSpec patch,
                 const AttackConfig& config)
      : model_(model), victims_(victims), patch_(std::move(patch)), cfg_(config), rng_(config.seed) {
    if (victims_.empty()) throw std::invalid_argument("attack needs at least one victim");
    if (cfg_.target < 0 || cfg_.target >= model.num_classes()) throw std::invalid_argument("target out of range");
    if (cfg_.iterations < 0) throw std::invalid_argument("iterations must be non-negative");
    const Shape& in = model.input_shape();
    channels_ = in[0];
    height_ = in[1];
    width_ = in[2];
    if (cfg_.multiple_sizes) {
      for (double f : {0.2, 0.3, 0.4}) {
        const Index s = patch_side(height_, width_, f);
        sizes_.push_back(s);
      }
      base_ = sizes_.back();
      for (Index s : sizes_) {
        if (s != base_) resizers_[s] = channel_resize(channels_, base_, s);
      }
      param_ = Tensor<float>({channels_, base_, base_});
    } else {
      param_ = Tensor<float>({channels_, patch_.height(), patch_.width()});
    }
    std::uniform_real_distribution<float> u(0.25f, 0.75f);
    for (Index i = 0; i < param_.size(); ++i) {
      const float v = u(rng_);
      param_[i] = std::log(v / (1.0f - v));
    }
  }

  Index channels() const { return channels_; }
  Index height() const { return height_; }
  Index width() const { return width_; }
  std::mt19937_64& rng() { return rng_; }
  const Tensor<float>& parameter() const { return param_; }
  Tensor<float>& parameter() { return param_; }

  StepGeometry sample_geometry() {
    StepGeometry g;
    if (cfg_.multiple_sizes) {
      std::uniform_int_distribution<std::size_t> pickf(0, sizes_.size() - 1);
      const Index s = sizes_[pickf(rng_)];
      g.h = g.w = s;
      g.mask = shape_mask(patch_.shape, s);
      if (s != base_) g.resize = resizers_.at(s);
    } else {
      g.h = patch_.height();
      g.w = patch_.width();
      g.mask = patch_.shape_mask;
    }
    for (std::size_t b = 0; b < victims_.size(); ++b) {
      std::vector<Position> ps;
      for (const Placement& p : patch_.placements) ps.push_back(resolve_placement(p, height_, width_, g.h, g.w, rng_));
      g.positions.push_back(std::move(ps));
    }
    return g;
  }

  struct Recorded {
    NodeId param;
    std::vector<NodeId> victims;
    std::vector<BinaryMask> regions;
    Model<float>::Recorded net;
  };

  Recorded record(Tape<float>& tape, const StepGeometry& g) const {
    Recorded r;
    r.param = tape.leaf(param_);
    NodeId pattern = sigmoid(tape, r.param);
    if (g.resize) pattern = linear_map(tape, pattern, g.resize, Shape{channels_, g.h, g.w});
    const NodeId masked = mul(tape, pattern, tape.leaf(channel_mask(g.mask, channels_)));
    for (std::size_t b = 0; b < victims_.size(); ++b) {
      BinaryMask region(height_, width_);
      NodeId canvas{};
      bool first = true;
      for (const Position& p : g.positions[b]) {
        region = region | place(g.mask, p);
        const NodeId e = embed(tape, masked, Shape{channels_, height_, width_}, p.top, p.left);
        canvas = first ? e : add(tape, canvas, e);
        first = false;
      }
      // Overlapping copies would double-count; keep the embedded pattern only once per pixel.
      if (g.positions[b].size() > 1) canvas = mul(tape, canvas, tape.leaf(overlap_scale(g, b)));
      Tensor<float> base = victims_[b];
      const Tensor<float> keep = channel_mask(~region, channels_);
      base.flat().array() *= keep.flat().array();
      r.victims.push_back(add(tape, tape.leaf(std::move(base)), canvas));
      r.regions.push_back(std::move(region));
    }
    const NodeId batch = reshape(tape, concat(tape, r.victims),
                                 Shape{static_cast<Index>(victims_.size()), channels_, height_, width_});
    r.net = model_.record(tape, batch);
    return r;
  }

  /// Final pattern at the configured size.
  PatchSpec finished() const {
    PatchSpec out = patch_;
    Tensor<float> p = param_;
    p.flat() = (1.0f + (-p.flat().array()).exp()).inverse().matrix();
    if (cfg_.multiple_sizes) {
      const Index s = patch_side(height_, width_, patch_.size_fraction);
      out.shape_mask = shape_mask(patch_.shape, s);
      if (s != base_) {
        const auto m = channel_resize(channels_, base_, s);
        Tensor<float> q({channels_, s, s});
        q.flat() = *m * p.flat();
        p = std::move(q);
      }
    }
    p.flat() = p.flat().cwiseMax(0.0f).cwiseMin(1.0f);
    out.pattern = std::move(p);
    return out;
  }

 private:
  BinaryMask place(const BinaryMask& mask, Position p) const {
    BinaryMask out(height_, width_);
    for (Index y = 0; y < mask.height(); ++y) {
      for (Index x = 0; x < mask.width(); ++x) {
        if (mask(y, x)) out.set(p.top + y, p.left + x);
      }
    }
    return out;
  }

  Tensor<float> overlap_scale(const StepGeometry& g, std::size_t b) const {
    Tensor<float> count({height_, width_});
    for (const Position& p : g.positions[b]) count.flat() += place(g.mask, p).to_tensor().flat();
    Tensor<float> scale3({channels_, height_, width_});
    for (Index i = 0; i < count.size(); ++i) {
      const float s = count[i] > 1.0f ? 1.0f / count[i] : 1.0f;
      for (Index c = 0; c < channels_; ++c) scale3[c * count.size() + i] = s;
    }
    return scale3;
  }

  const Model<float>& model_;
  const std::vector<Tensor<float>>& victims_;
  PatchSpec patch_;
  AttackConfig cfg_;
  std::mt19937_64 rng_;
  Index channels_ = 0, height_ = 0, width_ = 0;
  std::vector<Index> sizes_;
  Index base_ = 0;
  std::map<Index, std::shared_ptr<const Mat<float>>> resizers_;
  Tensor<float> param_;
};

NodeId vector_norm(Tape<float>& tape, NodeId x, int norm) {
  if (norm == 1) return sum(tape, abs(tape, x));
  return sqrt(tape, sum(tape, square(tape, x)), 1e-12f);
}

// -mean_b log p(target) for the batch recorded in `net`.
NodeId prediction_loss(Tape<float>& tape, const Model<float>::Recorded& net, Index batch, Index m, Index target) {
  std::vector<Index> picks;
  for (Index b = 0; b < batch; ++b) picks.push_back(b * m + target);
  return scale(tape, sum(tape, pick(tape, log_softmax(tape, net.logits), picks)), -1.0f / static_cast<float>(batch));
}

Index argmax_row(const Tensor<float>& logits, Index b, Index m) {
  Index best = 0;
  for (Index i = 1; i < m; ++i) {
    if (logits[b * m + i] > logits[b * m + best]) best = i;
  }
  return best;
}

bool succeeded(const Prediction<float>& p, Index target, const std::optional<double>& stop) {
  return p.label == target && (!stop || p.probs[target] >= *stop);
}

void check_finite(const Tensor<float>& t, int iteration) {
  if (!t.all_finite()) {
    throw std::runtime_error("attack diverged: non-finite loss at iteration " + std::to_string(iteration));
  }
}

AttackResult finalize(const Model<float>& model, const std::vector<Tensor<float>>& victims, const PatchSpec& patch,
                      Index target, std::mt19937_64& rng, const std::optional<double>& stop) {
  AttackResult out;
  out.patch = patch;
  const Index h = model.input_shape()[1], w = model.input_shape()[2];
  for (const Tensor<float>& v : victims) {
    std::vector<Position> ps;
    for (const Placement& p : patch.placements) ps.push_back(resolve_placement(p, h, w, patch.height(), patch.width(), rng));
    Patched patched = apply_patch(v, patch, ps);
    const Prediction<float> pred = predict(model, patched.image);
    out.success.push_back(succeeded(pred, target, stop));
    out.fooled.push_back(pred.label == target);
    out.confidence.push_back(pred.probs[target]);
    out.labels.push_back(pred.label);
    out.targets.push_back(target);
    out.victims.push_back(std::move(patched.image));
    out.regions.push_back(std::move(patched.region));
  }
  return out;
}

void append(AttackResult& into, AttackResult&& part) {
  if (into.victims.empty()) into.patch = part.patch;
  auto move_all = [](auto& a, auto& b) { a.insert(a.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end())); };
  move_all(into.success, part.success);
  move_all(into.fooled, part.fooled);
  move_all(into.confidence, part.confidence);
  move_all(into.victims, part.victims);
  move_all(into.regions, part.regions);
  move_all(into.labels, part.labels);
  move_all(into.targets, part.targets);
  into.iterations_run += part.iterations_run;
}

std::vector<std::vector<Tensor<float>>> chunk(const std::vector<Tensor<float>>& victims, Index size) {
  if (size < 1) throw std::invalid_argument("batch size must be positive");
  std::vector<std::vector<Tensor<float>>> groups;
  for (std::size_t i = 0; i < victims.size(); i += static_cast<std::size_t>(size)) {
    const auto end = std::min(victims.size(), i + static_cast<std::size_t>(size));
    groups.emplace_back(victims.begin() + static_cast<std::ptrdiff_t>(i), victims.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return groups;
}

}  // namespace

PatchShape parse_shape(const std::string& name) {
  if (name == "square") return PatchShape::kSquare;
  if (name == "star") return PatchShape::kStar;
  if (name == "lightning") return PatchShape::kLightning;
  if (name == "glasses") return PatchShape::kGlasses;
  throw std::invalid_argument("unknown patch shape '" + name + "'");
}

const char* shape_name(PatchShape shape) {
  switch (shape) {
    case PatchShape::kSquare: return "square";
    case PatchShape::kStar: return "star";
    case PatchShape::kLightning: return "lightning";
    case PatchShape::kGlasses: return "glasses";
  }
  return "?";
}

BinaryMask shape_mask(PatchShape shape, Index side) {
  if (side < 1) throw std::invalid_argument("patch side must be positive");
  if (shape == PatchShape::kSquare) return BinaryMask::full(side, side);
  const std::vector<Point> poly = shape == PatchShape::kStar ? star_polygon() : bolt_polygon();
  BinaryMask out(side, side);
  for (Index y = 0; y < side; ++y) {
    for (Index x = 0; x < side; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(side);
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(side);
      const bool on = shape == PatchShape::kGlasses ? inside_glasses(u, v) : inside_polygon(poly, u, v);
      out.set(y, x, on);
    }
  }
  return out;
}

Index patch_side(Index height, Index width, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0) throw std::invalid_argument("size fraction must lie in (0, 1]");
  return std::max<Index>(1, static_cast<Index>(std::lround(std::sqrt(fraction * static_cast<double>(height * width)))));
}

Placement Placement::parse(const std::string& text) {
  if (text == "rb") return right_bottom();
  if (text == "random") return random();
  if (text.rfind("fixed:", 0) == 0) {
    const std::string rest = text.substr(6);
    const auto comma = rest.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("placement 'fixed:x,y' needs two coordinates");
    return fixed(std::stol(rest.substr(0, comma)), std::stol(rest.substr(comma + 1)));
  }
  throw std::invalid_argument("unknown placement '" + text + "'");
}

Position resolve_placement(const Placement& placement, Index height, Index width, Index patch_h, Index patch_w,
                           std::mt19937_64& rng) {
  if (patch_h > height || patch_w > width) throw std::out_of_range("patch larger than image");
  switch (placement.kind) {
    case Placement::Kind::kRightBottom:
      return {height - patch_h, width - patch_w};
    case Placement::Kind::kRandom: {
      std::uniform_int_distribution<Index> top(0, height - patch_h);
      std::uniform_int_distribution<Index> left(0, width - patch_w);
      const Index t = top(rng);
      return {t, left(rng)};
    }
    case Placement::Kind::kFixed:
      if (placement.x < 0 || placement.y < 0 || placement.y + patch_h > height || placement.x + patch_w > width) {
        throw std::out_of_range("patch at (" + std::to_string(placement.x) + "," + std::to_string(placement.y) +
                                ") leaves the image");
      }
      return {placement.y, placement.x};
  }
  return {};
}

PatchSpec make_patch_spec(PatchShape shape, double size_fraction, Index channels, Index height, Index width,
                          std::vector<Placement> placements) {
  PatchSpec p;
  p.shape = shape;
  p.size_fraction = size_fraction;
  p.shape_mask = shape_mask(shape, patch_side(height, width, size_fraction));
  p.pattern = Tensor<float>({channels, p.height(), p.width()}, 0.5f);
  p.placements = std::move(placements);
  return p;
}

Patched apply_patch(const Tensor<float>& image, const PatchSpec& patch, const std::vector<Position>& positions) {
  if (image.rank() != 3) throw ShapeError("apply_patch expects a C x H x W image");
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (patch.pattern.shape() != Shape{c, patch.height(), patch.width()}) {
    throw ShapeError("pattern " + shape_string(patch.pattern.shape()) + " does not match mask and image channels");
  }
  Patched out{image, BinaryMask(h, w)};
  for (const Position& p : positions) {
    if (p.top < 0 || p.left < 0 || p.top + patch.height() > h || p.left + patch.width() > w) {
      throw std::out_of_range("patch placement leaves the image");
    }
    for (Index y = 0; y < patch.height(); ++y) {
      for (Index x = 0; x < patch.width(); ++x) {
        if (!patch.shape_mask(y, x)) continue;
        for (Index ch = 0; ch < c; ++ch) {
          out.image.at(ch, p.top + y, p.left + x) = std::clamp(patch.pattern.at(ch, y, x), 0.0f, 1.0f);
        }
        out.region.set(p.top + y, p.left + x);
      }
    }
  }
  return out;
}

Patched apply_patch(const Tensor<float>& image, const PatchSpec& patch, Position position) {
  return apply_patch(image, patch, std::vector<Position>{position});
}

BinaryMask glasses_band(Index height, Index width, Index cy, Index cx, Index rows, Index cols) {
  return BinaryMask::block(height, width, cy - rows / 2, cx - cols / 2, rows, cols);
}

EstVariant parse_est_variant(const std::string& name) {
  if (name == "none") return EstVariant::kNone;
  if (name == "mislead") return EstVariant::kMislead;
  if (name == "minimize") return EstVariant::kMinimize;
  if (name == "target") return EstVariant::kTarget;
  throw std::invalid_argument("unknown estimator variant '" + name + "'");
}

const char* est_variant_name(EstVariant v) {
  switch (v) {
    case EstVariant::kNone: return "none";
    case EstVariant::kMislead: return "mislead";
    case EstVariant::kMinimize: return "minimize";
    case EstVariant::kTarget: return "target";
  }
  return "?";
}

double AttackResult::success_rate() const {
  if (success.empty()) return 0.0;
  return static_cast<double>(std::count(success.begin(), success.end(), true)) / static_cast<double>(success.size());
}

AttackResult generate_patch(const Model<float>& model, const std::vector<Tensor<float>>& victims, PatchSpec patch,
                            const AttackConfig& config) {
  PatchOptimizer opt(model, victims, std::move(patch), config);
  Adam<float> adam(config.step_size);
  const Index m = model.num_classes();
  const Index batch = static_cast<Index>(victims.size());
  const bool with_est = config.lambda > 0.0 && config.est != EstVariant::kNone;
  if (config.est == EstVariant::kTarget && with_est &&
      (config.est_target.height() != opt.height() || config.est_target.width() != opt.width())) {
    throw std::invalid_argument("region-targeting needs a target mask at input resolution");
  }
  const float lambda = static_cast<float>(config.lambda);
  int it = 0;
  for (; it < config.iterations; ++it) {
    const StepGeometry g = opt.sample_geometry();
    Tape<float> tape;
    const auto rec = opt.record(tape, g);
    const Tensor<float> logits = tape.value(rec.net.logits);
    check_finite(logits, it);

    bool all = true;
    for (Index b = 0; b < batch && all; ++b) {
      const Index label = argmax_row(logits, b, m);
      Tensor<float> z({m}, Vec<float>(logits.flat().segment(b * m, m)));
      const float p = softmax_with_temperature(z, 1.0f)[config.target];
      all = label == config.target && (!config.stop_probability || p >= *config.stop_probability);
    }
    // Stop once every victim is fooled, unless the estimator term still has work to do.
    if (all && !with_est) break;

    NodeId loss = prediction_loss(tape, rec.net, batch, m, config.target);
    if (with_est) {
      const auto jac = pooled_head_jacobian(tape, rec.net);
      NodeId est{};
      for (Index b = 0; b < batch; ++b) {
        const NodeId e = soft_critical_heatmap(tape, rec.net, b, argmax_row(logits, b, m),
                                               jac[static_cast<std::size_t>(b)],
                                               static_cast<float>(config.temperature), opt.height(), opt.width());
        const BinaryMask& region = rec.regions[static_cast<std::size_t>(b)];
        NodeId term{};
        switch (config.est) {
          case EstVariant::kMislead:
            term = scale(tape, vector_norm(tape, sub(tape, e, tape.leaf(region.to_tensor())), config.norm), -1.0f);
            break;
          case EstVariant::kMinimize:
            term = vector_norm(tape, mul(tape, e, tape.leaf(region.to_tensor())), config.norm);
            break;
          case EstVariant::kTarget:
            term = vector_norm(tape, sub(tape, e, tape.leaf(config.est_target.to_tensor())), config.norm);
            break;
          case EstVariant::kNone: break;
        }
        est = b == 0 ? term : add(tape, est, term);
      }
      est = scale(tape, est, 1.0f / static_cast<float>(batch));
      loss = add(tape, scale(tape, loss, 1.0f - lambda), scale(tape, est, lambda));
    }
    check_finite(tape.value(loss), it);
    const auto grads = backward(tape, loss);
    adam.begin_step();
    adam.update(0, opt.parameter(), grads[rec.param]);
  }
  AttackResult out = finalize(model, victims, opt.finished(), config.target, opt.rng(), config.stop_probability);
  out.iterations_run = it;
  return out;
}

AttackResult attack_groups(const Model<float>& model, const std::vector<Tensor<float>>& victims,
                           const PatchSpec& patch, const AttackConfig& config) {
  AttackResult all;
  std::uint64_t g = 0;
  for (const auto& group : chunk(victims, config.batch_size)) {
    AttackConfig c = config;
    c.seed = config.seed + 7919 * g++;
    append(all, generate_patch(model, group, patch, c));
  }
  return all;
}

AttackResult evaluate_patch(const Model<float>& model, const std::vector<Tensor<float>>& images,
                            const PatchSpec& patch, Index target, std::uint64_t seed,
                            std::optional<double> stop_probability) {
  std::mt19937_64 rng(seed);
  return finalize(model, images, patch, target, rng, stop_probability);
}

AttackResult masked_accessory_attack(const Model<float>& model, const std::vector<Tensor<float>>& victims,
                                     const BinaryMask& accessory, const AttackConfig& config) {
  if (accessory.none()) throw std::invalid_argument("accessory mask is empty");
  Index top = accessory.height(), left = accessory.width(), bottom = -1, right = -1;
  for (Index y = 0; y < accessory.height(); ++y) {
    for (Index x = 0; x < accessory.width(); ++x) {
      if (!accessory(y, x)) continue;
      top = std::min(top, y);
      left = std::min(left, x);
      bottom = std::max(bottom, y);
      right = std::max(right, x);
    }
  }
  PatchSpec patch;
  patch.shape = PatchShape::kGlasses;
  patch.shape_mask = BinaryMask(bottom - top + 1, right - left + 1);
  for (Index y = top; y <= bottom; ++y) {
    for (Index x = left; x <= right; ++x) patch.shape_mask.set(y - top, x - left, accessory(y, x));
  }
  patch.size_fraction = static_cast<double>(accessory.area()) / static_cast<double>(accessory.height() * accessory.width());
  patch.placements = {Placement::fixed(left, top)};
  patch.pattern = Tensor<float>({model.input_shape()[0], patch.height(), patch.width()}, 0.5f);
  AttackConfig c = config;
  c.multiple_sizes = false;
  if (config.iterations == 0) {
    // Nothing optimised: victims stay as they are.
    AttackResult out;
    out.patch = patch;
    for (const Tensor<float>& v : victims) {
      const Prediction<float> p = predict(model, v);
      out.success.push_back(succeeded(p, c.target, c.stop_probability));
      out.fooled.push_back(p.label == c.target);
      out.confidence.push_back(p.probs[c.target]);
      out.labels.push_back(p.label);
      out.targets.push_back(c.target);
      out.victims.push_back(v);
      out.regions.push_back(BinaryMask(accessory.height(), accessory.width()));
    }
    return out;
  }
  return generate_patch(model, victims, patch, c);
}

double RegionAttackResult::mean_iou() const {
  if (iou.empty()) return 0.0;
  return std::accumulate(iou.begin(), iou.end(), 0.0) / static_cast<double>(iou.size());
}

RegionAttackResult region_misleading_attack(const Model<float>& model, const std::vector<Tensor<float>>& victims,
                                            const PatchSpec& patch, const AttackConfig& config,
                                            const DetectionConfig& detection) {
  RegionAttackResult out;
  out.attack = attack_groups(model, victims, patch, config);
  for (std::size_t i = 0; i < out.attack.victims.size(); ++i) {
    TapedPrediction<float> pred = predict_taped(model, out.attack.victims[i]);
    const auto est = critical_region(pred, detection.temperature, detection.binarize_threshold);
    out.iou.push_back(iou(est.mask, out.attack.regions[i]));
  }
  return out;
}

Index ranking_target(const Model<float>& model, const std::vector<Tensor<float>>& victims) {
  if (victims.empty()) throw std::invalid_argument("ranking manipulation needs victims");
  const Index m = model.num_classes();
  Vec<float> mean = Vec<float>::Zero(m);
  std::vector<bool> source(static_cast<std::size_t>(m), false);
  for (const Tensor<float>& v : victims) {
    const Prediction<float> p = predict(model, v);
    mean += p.probs.flat();
    source[static_cast<std::size_t>(p.label)] = true;
  }
  const Ranking r = rankings(Tensor<float>({m}, Vec<float>(mean / static_cast<float>(victims.size()))));
  for (Index label : r.order) {
    if (!source[static_cast<std::size_t>(label)]) return label;
  }
  throw std::invalid_argument("every label is a source label; no target left");
}

AttackResult ranking_manipulation_attack(const Model<float>& model, const std::vector<Tensor<float>>& victims,
                                         RankingMode mode, const PatchSpec& patch, AttackConfig config) {
  std::vector<std::vector<Tensor<float>>> groups;
  if (mode == RankingMode::kUniversal) {
    groups = chunk(victims, config.batch_size);
  } else {
    std::map<Index, std::vector<Tensor<float>>> by_label;
    for (const Tensor<float>& v : victims) by_label[predict(model, v).label].push_back(v);
    for (auto& [label, members] : by_label) {
      for (auto& g : chunk(members, config.batch_size)) groups.push_back(std::move(g));
    }
  }
  AttackResult all;
  std::uint64_t g = 0;
  for (const auto& group : groups) {
    AttackConfig c = config;
    c.target = ranking_target(model, group);
    c.seed = config.seed + 7919 * g++;
    append(all, generate_patch(model, group, patch, c));
  }
  return all;
}

double bpda_surrogate(double value, double threshold, double t) {
  return 1.0 / (1.0 + std::exp(-t * (value - threshold)));
}

namespace {

// x + m * (fill - x), with an H x W soft mask broadcast over channels.
NodeId soft_fill(Tape<float>& tape, NodeId x, NodeId mask, const Tensor<float>& fill) {
  const Index c = fill.dim(0), h = fill.dim(1), w = fill.dim(2);
  const NodeId m3 = reshape(tape, concat(tape, std::vector<NodeId>(static_cast<std::size_t>(c), mask)), Shape{c, h, w});
  return add(tape, x, mul(tape, m3, sub(tape, tape.leaf(fill), x)));
}

NodeId soft_binarize(Tape<float>& tape, NodeId heat, float threshold, float t) {
  return sigmoid(tape, affine(tape, heat, t, -t * threshold));
}

}  // namespace

AttackResult bpda_attack(const Model<float>& model, const std::vector<Tensor<float>>& victims, const PatchSpec& patch,
                         const AttackConfig& config, const DetectionConfig& detection, const BpdaSchedule& schedule) {
  detection.validate(model.num_classes());
  AttackResult all;
  const Index m = model.num_classes();
  const Index channels = model.input_shape()[0], h = model.input_shape()[1], w = model.input_shape()[2];
  const FillPattern fill = make_fill(detection, model);
  // The same fills the hard detector uses at passes 3 and 5.
  const Tensor<float> zeros({channels, h, w});
  const Tensor<float> fill1 = fill.apply(zeros, BinaryMask::full(h, w), detection.seed);
  const Tensor<float> fill2 = fill.apply(zeros, BinaryMask::full(h, w), detection.seed + 1);
  const float thr = static_cast<float>(detection.binarize_threshold);
  const float temp = static_cast<float>(detection.temperature);
  // Step size in 8-bit pixel units; the logit parametrisation has slope 1/4 at mid-grey.
  const double lr = 4.0 * schedule.step_size / 255.0;

  std::uint64_t group_index = 0;
  for (const auto& group : chunk(victims, config.batch_size)) {
    AttackConfig c = config;
    c.seed = config.seed + 7919 * group_index++;
    c.multiple_sizes = false;
    PatchOptimizer opt(model, group, patch, c);
    Adam<float> adam(lr);
    const Index batch = static_cast<Index>(group.size());
    std::vector<std::vector<Index>> suppressed(group.size());
    int it = 0;
    for (; it < schedule.iterations; ++it) {
      const float t = static_cast<float>(schedule.t_start + schedule.t_increment * (it / schedule.t_every));
      const StepGeometry g = opt.sample_geometry();
      Tape<float> tape;
      const auto rec = opt.record(tape, g);
      check_finite(tape.value(rec.net.logits), it);

      if (it % schedule.check_every == 0) {
        bool all_ok = true;
        for (Index b = 0; b < batch; ++b) {
          const Tensor<float> victim = tape.value(rec.victims[static_cast<std::size_t>(b)]);
          const DetectionReport report = detect(victim, model, detection);
          suppressed[static_cast<std::size_t>(b)] = report.suppressed;
          all_ok = all_ok && report.label == c.target && report.verdict == Verdict::kBenign;
        }
        if (all_ok) break;
      }

      const Tensor<float> logits0 = tape.value(rec.net.logits);
      auto jac = pooled_head_jacobian(tape, rec.net);
      auto source = rec.net;
      if (detection.negative_source == NegativeSource::kIntermediate) {
        std::vector<NodeId> inter;
        for (Index b = 0; b < batch; ++b) {
          const NodeId e = soft_critical_heatmap(tape, rec.net, b, argmax_row(logits0, b, m),
                                                 jac[static_cast<std::size_t>(b)], temp, h, w);
          inter.push_back(soft_fill(tape, rec.victims[static_cast<std::size_t>(b)], soft_binarize(tape, e, thr, t), fill1));
        }
        source = model.record(tape, reshape(tape, concat(tape, inter), Shape{batch, channels, h, w}));
        jac = pooled_head_jacobian(tape, source);
      }
      std::vector<NodeId> finals;
      for (Index b = 0; b < batch; ++b) {
        NodeId mask{};
        bool first = true;
        for (Index l : suppressed[static_cast<std::size_t>(b)]) {
          const NodeId heat = soft_negative_heatmap(tape, source, b, l, jac[static_cast<std::size_t>(b)], h, w);
          const NodeId s = soft_binarize(tape, heat, thr, t);
          mask = first ? s : mul(tape, mask, s);
          first = false;
        }
        finals.push_back(soft_fill(tape, rec.victims[static_cast<std::size_t>(b)], mask, fill2));
      }
      const auto last = model.record(tape, reshape(tape, concat(tape, finals), Shape{batch, channels, h, w}));
      const NodeId loss = add(tape, prediction_loss(tape, rec.net, batch, m, c.target),
                              prediction_loss(tape, last, batch, m, c.target));
      check_finite(tape.value(loss), it);
      const auto grads = backward(tape, loss);
      adam.begin_step();
      adam.update(0, opt.parameter(), grads[rec.param]);
    }
    AttackResult part = finalize(model, group, opt.finished(), c.target, opt.rng(), std::nullopt);
    for (std::size_t i = 0; i < part.victims.size(); ++i) {
      const DetectionReport report = detect(part.victims[i], model, detection);
      part.success[i] = part.fooled[i] && report.verdict == Verdict::kBenign;
    }
    part.iterations_run = it;
    append(all, std::move(part));
  }
  return all;
}

void write_attack_csv(const std::filesystem::path& path, const AttackResult& result) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "index,success,label,target,confidence,g_area\n";
  for (std::size_t i = 0; i < result.victims.size(); ++i) {
    out << i << ',' << (result.success[i] ? 1 : 0) << ',' << result.labels[i] << ',' << result.targets[i] << ','
        << result.confidence[i] << ',' << result.regions[i].area() << '\n';
  }
}

}  // namespace taintradar
