#include "taintradar/detector.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>

#include "json.hpp"

namespace taintradar {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

template <typename S>
Tensor<S> weighted_feature_sum(const Tensor<S>& features, const Tensor<S>& weights, S sign) {
  const Index k = features.dim(0), h = features.dim(1), w = features.dim(2);
  Tensor<S> heat({h, w});
  heat.flat().transpose() = sign * (weights.flat().transpose() * features.matrix(k, h * w));
  heat.flat() = heat.flat().cwiseMax(S(0));
  return heat;
}

template <typename S>
Tensor<S> pooled_gradient(const Tensor<S>& grad) {
  const Index k = grad.dim(0);
  const Index n = grad.size() / k;
  return Tensor<S>({k}, Vec<S>(grad.matrix(k, n).rowwise().mean()));
}

template <typename S>
RegionEstimate<S> finish_region(const TapedPrediction<S>& pred, Tensor<S> weights, S sign, double threshold) {
  RegionEstimate<S> out;
  const Tensor<S>& features = pred.prediction.feature_maps;
  out.heatmap = normalize_by_max(weighted_feature_sum(features, weights, sign));
  out.weights = std::move(weights);
  out.degenerate = out.heatmap.flat().maxCoeff() <= S(0);
  const Shape& in = pred.tape.value(pred.nodes.input).shape();
  const Index h = in[in.size() - 2], w = in.back();
  out.mask = out.degenerate ? BinaryMask(h, w) : heatmap_to_mask(out.heatmap, static_cast<S>(threshold), h, w);
  return out;
}

}  // namespace

Tensor<float> FillPattern::apply(const Tensor<float>& image, const BinaryMask& mask, std::uint64_t call_seed) const {
  if (image.rank() != 3 || image.dim(1) != mask.height() || image.dim(2) != mask.width()) {
    throw ShapeError("fill mask does not match image " + shape_string(image.shape()));
  }
  Tensor<float> source;
  if (mode_ == FillMode::kDatasetMean) {
    if (mean_.shape() != image.shape()) throw ShapeError("mean image does not match input");
    source = mean_;
  } else {
    source = Tensor<float>(image.shape());
    std::mt19937_64 rng(call_seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (Index i = 0; i < source.size(); ++i) source[i] = u(rng);
  }
  Tensor<float> out = image;
  const Index channels = image.dim(0);
  for (Index y = 0; y < mask.height(); ++y) {
    for (Index x = 0; x < mask.width(); ++x) {
      if (!mask(y, x)) continue;
      for (Index c = 0; c < channels; ++c) out.at(c, y, x) = source.at(c, y, x);
    }
  }
  return out;
}

Tensor<float> fill_region(const Tensor<float>& image, const BinaryMask& mask, const FillPattern& fill,
                          std::uint64_t call_seed) {
  return fill.apply(image, mask, call_seed);
}

void DetectionConfig::validate(Index num_classes) const {
  if (top_k < 1 || top_k >= num_classes) {
    throw std::invalid_argument("K must lie in [1, " + std::to_string(num_classes - 1) + "], got " +
                                std::to_string(top_k));
  }
  if (rank_threshold < 1 || rank_threshold >= num_classes) {
    throw std::invalid_argument("ΔR must lie in [1, " + std::to_string(num_classes - 1) + "], got " +
                                std::to_string(rank_threshold));
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
}

FillPattern make_fill(const DetectionConfig& config, const Model<float>& model) {
  if (config.fill == FillMode::kRandomNoise) return FillPattern::random_noise();
  if (model.mean_image().empty()) throw std::invalid_argument("model carries no dataset-mean image");
  return FillPattern::dataset_mean(model.mean_image());
}

template <typename S>
NodeId estimation_loss(Tape<S>& tape, NodeId logits, Index label, S temperature) {
  const Index m = tape.value(logits).size();
  if (label < 0 || label >= m) throw std::invalid_argument("label out of range");
  return pick(tape, log_softmax(tape, logits, temperature), {label});
}

template <typename S>
RegionEstimate<S> critical_region(TapedPrediction<S>& pred, double temperature, double threshold) {
  const NodeId loss =
      estimation_loss(pred.tape, pred.nodes.logits, pred.prediction.label, static_cast<S>(temperature));
  const auto grads = backward(pred.tape, loss);
  return finish_region(pred, pooled_gradient(grads[pred.nodes.feature_maps]), S(1), threshold);
}

template <typename S>
RegionEstimate<S> negative_region(TapedPrediction<S>& pred, Index label, double threshold) {
  if (label < 0 || label >= pred.prediction.logits.size()) throw std::invalid_argument("label out of range");
  const NodeId logit = pick(pred.tape, pred.nodes.logits, {label});
  const auto grads = backward(pred.tape, logit);
  return finish_region(pred, pooled_gradient(grads[pred.nodes.feature_maps]), S(-1), threshold);
}

template <typename S>
std::vector<Index> top_k_suppressed(const Tensor<S>& before, const Tensor<S>& after, Index k, Index exclude) {
  if (before.shape() != after.shape()) throw ShapeError("logit vectors differ in shape");
  const Index m = before.size();
  if (k < 1 || k > m - 1) throw std::invalid_argument("K out of range: " + std::to_string(k));
  std::vector<Index> labels;
  for (Index i = 0; i < m; ++i) {
    if (i != exclude) labels.push_back(i);
  }
  std::stable_sort(labels.begin(), labels.end(),
                   [&](Index a, Index b) { return after[a] - before[a] > after[b] - before[b]; });
  labels.resize(static_cast<std::size_t>(k));
  return labels;
}

namespace {

// Feature-map and logit geometry of one batch element.
template <typename S>
struct TapGeometry {
  Index batch, maps, spatial, classes;
};

template <typename S>
TapGeometry<S> tap_geometry(const Tape<S>& tape, const typename Model<S>::Recorded& rec) {
  const Tensor<S>& a = tape.value(rec.feature_maps);
  const Tensor<S>& z = tape.value(rec.logits);
  TapGeometry<S> g;
  g.batch = a.rank() == 4 ? a.dim(0) : 1;
  g.maps = a.dim(a.rank() - 3);
  g.spatial = a.dim(a.rank() - 2) * a.dim(a.rank() - 1);
  g.classes = z.size() / g.batch;
  return g;
}

std::vector<Index> iota_from(Index start, Index count) {
  std::vector<Index> v(static_cast<std::size_t>(count));
  std::iota(v.begin(), v.end(), start);
  return v;
}

template <typename S>
NodeId normalised_upsampled(Tape<S>& tape, NodeId heat, Index fh, Index fw, Index out_h, Index out_w) {
  heat = relu(tape, heat);
  const NodeId denom = affine(tape, max_all(tape, heat), S(1), S(1e-6));
  const NodeId norm = div_by_scalar(tape, heat, denom);
  return linear_map(tape, norm, bilinear_matrix<S>(fh, fw, out_h, out_w), Shape{out_h, out_w});
}

template <typename S>
NodeId soft_heatmap(Tape<S>& tape, const typename Model<S>::Recorded& rec, Index b, NodeId alpha, Index out_h,
                    Index out_w) {
  const auto g = tap_geometry<S>(tape, rec);
  const Shape& fs = tape.value(rec.feature_maps).shape();
  const Index fh = fs[fs.size() - 2], fw = fs.back();
  const NodeId a = reshape(tape, pick(tape, rec.feature_maps, iota_from(b * g.maps * g.spatial, g.maps * g.spatial)),
                           Shape{g.maps, g.spatial});
  const NodeId heat = matmul(tape, reshape(tape, alpha, Shape{1, g.maps}), a);
  return normalised_upsampled(tape, reshape(tape, heat, Shape{fh, fw}), fh, fw, out_h, out_w);
}

}  // namespace

template <typename S>
std::vector<Mat<S>> pooled_head_jacobian(Tape<S>& tape, const typename Model<S>::Recorded& rec) {
  const auto g = tap_geometry<S>(tape, rec);
  std::vector<Mat<S>> out(static_cast<std::size_t>(g.batch), Mat<S>(g.classes, g.maps));
  for (Index s = 0; s < g.classes; ++s) {
    std::vector<Index> picks;
    for (Index b = 0; b < g.batch; ++b) picks.push_back(b * g.classes + s);
    const NodeId root = sum(tape, pick(tape, rec.logits, picks));
    const auto grads = backward(tape, root, rec.feature_maps);
    const Tensor<S>& ga = grads[rec.feature_maps];
    for (Index b = 0; b < g.batch; ++b) {
      const ConstMatMap<S> block(ga.data() + b * g.maps * g.spatial, g.maps, g.spatial);
      out[static_cast<std::size_t>(b)].row(s) = block.rowwise().mean().transpose();
    }
  }
  return out;
}

template <typename S>
NodeId soft_critical_heatmap(Tape<S>& tape, const typename Model<S>::Recorded& rec, Index b, Index label,
                             const Mat<S>& jacobian, S temperature, Index out_h, Index out_w) {
  const auto g = tap_geometry<S>(tape, rec);
  const NodeId z = pick(tape, rec.logits, iota_from(b * g.classes, g.classes));
  Tensor<S> onehot({g.classes});
  onehot[label] = S(1);
  const NodeId residual = sub(tape, tape.leaf(std::move(onehot)), softmax(tape, z, temperature));
  Tensor<S> jt({g.maps, g.classes});
  jt.matrix(g.maps, g.classes) = jacobian.transpose() / temperature;
  const NodeId alpha = matmul(tape, tape.leaf(std::move(jt)), residual);
  return soft_heatmap(tape, rec, b, alpha, out_h, out_w);
}

template <typename S>
NodeId soft_negative_heatmap(Tape<S>& tape, const typename Model<S>::Recorded& rec, Index b, Index label,
                             const Mat<S>& jacobian, Index out_h, Index out_w) {
  const Index k = jacobian.cols();
  Tensor<S> alpha({k});
  alpha.flat() = -jacobian.row(label).transpose();
  return soft_heatmap(tape, rec, b, tape.leaf(std::move(alpha)), out_h, out_w);
}

const char* verdict_name(Verdict v) { return v == Verdict::kAdversarial ? "adversarial" : "benign"; }

namespace {

struct Cascade {
  Index label = 0;
  Tensor<float> logits;
  BinaryMask estimated;
  std::vector<Index> suppressed;
  std::vector<double> deltas;
  std::vector<BinaryMask> negatives;
  int forward = 0;
  int backward = 0;
  double forward_ms = 0.0;
  double backward_ms = 0.0;
  std::vector<std::string> notes;
};

// Passes 1-4.
Cascade run_cascade(const Tensor<float>& image, const Model<float>& model, const DetectionConfig& config,
                    const FillPattern& fill, Index k) {
  Cascade out;
  auto t = Clock::now();
  TapedPrediction<float> original = predict_taped(model, image);
  out.forward_ms += ms_since(t);
  ++out.forward;
  out.label = original.prediction.label;
  out.logits = original.prediction.logits;

  t = Clock::now();
  RegionEstimate<float> est = critical_region(original, config.temperature, config.binarize_threshold);
  out.backward_ms += ms_since(t);
  ++out.backward;
  out.estimated = est.mask;
  if (est.degenerate) out.notes.push_back("degenerate critical-region heatmap");

  const Tensor<float> intermediate = fill.apply(image, est.mask, config.seed);
  t = Clock::now();
  TapedPrediction<float> filled = predict_taped(model, intermediate);
  out.forward_ms += ms_since(t);
  ++out.forward;

  out.suppressed = top_k_suppressed(original.prediction.logits, filled.prediction.logits, k, out.label);
  for (Index l : out.suppressed) {
    out.deltas.push_back(static_cast<double>(filled.prediction.logits[l] - original.prediction.logits[l]));
  }

  TapedPrediction<float>& source = config.negative_source == NegativeSource::kOriginal ? original : filled;
  for (Index l : out.suppressed) {
    t = Clock::now();
    RegionEstimate<float> neg = negative_region(source, l, config.binarize_threshold);
    out.backward_ms += ms_since(t);
    ++out.backward;
    if (neg.degenerate) out.notes.push_back("degenerate negative heatmap for label " + std::to_string(l));
    out.negatives.push_back(std::move(neg.mask));
  }
  return out;
}

Index rank_after_fill(const Tensor<float>& image, const Model<float>& model, const FillPattern& fill,
                      const BinaryMask& mask, Index label, std::uint64_t seed) {
  const Prediction<float> p = predict(model, fill.apply(image, mask, seed));
  return rankings(p.probs).rank_of[static_cast<std::size_t>(label)];
}

}  // namespace

DetectionReport detect(const Tensor<float>& image, const Model<float>& model, const DetectionConfig& config) {
  config.validate(model.num_classes());
  const auto start = Clock::now();
  const FillPattern fill = make_fill(config, model);
  Cascade cascade = run_cascade(image, model, config, fill, config.top_k);

  DetectionReport report;
  report.label = cascade.label;
  report.top_k = config.top_k;
  report.rank_threshold = config.rank_threshold;
  report.temperature = config.temperature;
  report.fill = config.fill;
  report.seed = config.seed;
  report.estimated = cascade.estimated;
  report.suppressed = cascade.suppressed;
  report.logit_deltas = cascade.deltas;
  report.notes = cascade.notes;
  report.final_mask = BinaryMask::full(cascade.estimated.height(), cascade.estimated.width());
  for (const BinaryMask& m : cascade.negatives) report.final_mask = report.final_mask & m;
  report.negatives = std::move(cascade.negatives);
  if (report.final_mask.none()) report.notes.push_back("empty final mask");

  auto t = Clock::now();
  report.rank_after = rank_after_fill(image, model, fill, report.final_mask, report.label, config.seed + 1);
  cascade.forward_ms += ms_since(t);
  ++cascade.forward;

  report.ranking_change = report.rank_after - 1;
  report.verdict = report.ranking_change >= config.rank_threshold ? Verdict::kAdversarial : Verdict::kBenign;
  report.forward_passes = cascade.forward;
  report.backward_passes = cascade.backward;
  report.forward_ms = cascade.forward_ms;
  report.backward_ms = cascade.backward_ms;
  report.wall_ms = ms_since(start);
  return report;
}

std::vector<Index> detect_ranking_changes(const Tensor<float>& image, const Model<float>& model,
                                          const DetectionConfig& config, const std::vector<Index>& ks) {
  if (ks.empty()) return {};
  const Index k_max = *std::max_element(ks.begin(), ks.end());
  DetectionConfig probe = config;
  probe.top_k = k_max;
  probe.validate(model.num_classes());
  const FillPattern fill = make_fill(config, model);
  const Cascade cascade = run_cascade(image, model, probe, fill, k_max);

  std::vector<Index> changes;
  for (Index k : ks) {
    if (k < 1) throw std::invalid_argument("K must be positive");
    BinaryMask mask = BinaryMask::full(cascade.estimated.height(), cascade.estimated.width());
    for (Index i = 0; i < k; ++i) mask = mask & cascade.negatives[static_cast<std::size_t>(i)];
    changes.push_back(rank_after_fill(image, model, fill, mask, cascade.label, config.seed + 1) - 1);
  }
  return changes;
}

std::string report_to_json(const DetectionReport& r) {
  nlohmann::ordered_json j;
  j["verdict"] = verdict_name(r.verdict);
  j["label"] = r.label;
  j["rank_after"] = r.rank_after;
  j["ranking_change"] = r.ranking_change;
  j["top_k"] = r.top_k;
  j["rank_threshold"] = r.rank_threshold;
  j["temperature"] = r.temperature;
  j["fill"] = r.fill == FillMode::kDatasetMean ? "mean" : "noise";
  j["seed"] = r.seed;
  j["suppressed_labels"] = r.suppressed;
  j["logit_deltas"] = r.logit_deltas;
  j["estimated_area"] = r.estimated.area();
  j["final_area"] = r.final_mask.area();
  j["forward_passes"] = r.forward_passes;
  j["backward_passes"] = r.backward_passes;
  j["wall_ms"] = r.wall_ms;
  j["forward_ms"] = r.forward_ms;
  j["backward_ms"] = r.backward_ms;
  j["notes"] = r.notes;
  return j.dump(2);
}

std::vector<Index> removal_curve(const Tensor<float>& image, const Model<float>& model, Index step_pixels,
                                 Index steps, double temperature) {
  if (step_pixels <= 0 || steps < 0) throw std::invalid_argument("removal curve needs positive step size");
  TapedPrediction<float> pred = predict_taped(model, image);
  const Index label = pred.prediction.label;
  const RegionEstimate<float> est = critical_region(pred, temperature, 0.15);
  const Index h = image.dim(1), w = image.dim(2), channels = image.dim(0);
  const Tensor<float> importance = upsample_bilinear(est.heatmap, h, w);

  std::vector<Index> order(static_cast<std::size_t>(h * w));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return importance[a] > importance[b]; });

  std::vector<Index> ranks{1};
  Tensor<float> batch({steps, channels, h, w});
  Tensor<float> current = image;
  std::size_t removed = 0;
  for (Index s = 0; s < steps; ++s) {
    for (Index n = 0; n < step_pixels && removed < order.size(); ++n, ++removed) {
      const Index pix = order[removed];
      for (Index c = 0; c < channels; ++c) current[c * h * w + pix] = 0.0f;
    }
    batch.flat().segment(s * current.size(), current.size()) = current.flat();
  }
  if (steps == 0) return ranks;
  Tape<float> tape;
  const auto rec = model.record(tape, tape.leaf(std::move(batch)));
  const Tensor<float>& logits = tape.value(rec.logits);
  const Index m = model.num_classes();
  for (Index s = 0; s < steps; ++s) {
    const Tensor<float> z({m}, Vec<float>(logits.flat().segment(s * m, m)));
    ranks.push_back(rankings(softmax_with_temperature(z, 1.0f)).rank_of[static_cast<std::size_t>(label)]);
  }
  return ranks;
}

template NodeId estimation_loss(Tape<float>&, NodeId, Index, float);
template NodeId estimation_loss(Tape<double>&, NodeId, Index, double);
template RegionEstimate<float> critical_region(TapedPrediction<float>&, double, double);
template RegionEstimate<double> critical_region(TapedPrediction<double>&, double, double);
template RegionEstimate<float> negative_region(TapedPrediction<float>&, Index, double);
template RegionEstimate<double> negative_region(TapedPrediction<double>&, Index, double);
template std::vector<Index> top_k_suppressed(const Tensor<float>&, const Tensor<float>&, Index, Index);
template std::vector<Mat<float>> pooled_head_jacobian(Tape<float>&, const Model<float>::Recorded&);
template std::vector<Mat<double>> pooled_head_jacobian(Tape<double>&, const Model<double>::Recorded&);
template NodeId soft_critical_heatmap(Tape<float>&, const Model<float>::Recorded&, Index, Index,
                                      const Mat<float>&, float, Index, Index);
template NodeId soft_critical_heatmap(Tape<double>&, const Model<double>::Recorded&, Index, Index,
                                      const Mat<double>&, double, Index, Index);
template NodeId soft_negative_heatmap(Tape<float>&, const Model<float>::Recorded&, Index, Index,
                                      const Mat<float>&, Index, Index);
template NodeId soft_negative_heatmap(Tape<double>&, const Model<double>::Recorded&, Index, Index,
                                      const Mat<double>&, Index, Index);
template std::vector<Index> top_k_suppressed(const Tensor<double>&, const Tensor<double>&, Index, Index);

}  // namespace taintradar
