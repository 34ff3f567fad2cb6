#include "taintradar/model.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "taintradar/optim.hpp"

namespace taintradar {

namespace {

const char* layer_keyword(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kDense: return "dense";
    case LayerKind::kGlobalAvgPool: return "gap";
  }
  return "?";
}

bool has_params(LayerKind kind) { return kind == LayerKind::kConv || kind == LayerKind::kDense; }

}  // namespace

Architecture parse_architecture(const std::string& text) {
  Architecture arch;
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream in(line);
    std::string word;
    if (!(in >> word)) continue;
    auto fail = [&](const std::string& why) {
      throw std::invalid_argument("architecture line " + std::to_string(line_no) + ": " + why);
    };
    auto read = [&](Index& v) {
      if (!(in >> v)) fail("missing integer after '" + word + "'");
    };
    LayerSpec layer;
    if (word == "input") {
      arch.input.assign(3, 0);
      for (auto& d : arch.input) read(d);
      continue;
    } else if (word == "conv") {
      layer.kind = LayerKind::kConv;
      read(layer.units);
      read(layer.kernel);
      read(layer.stride);
      read(layer.padding);
    } else if (word == "relu") {
      layer.kind = LayerKind::kRelu;
    } else if (word == "maxpool") {
      layer.kind = LayerKind::kMaxPool;
      read(layer.kernel);
      read(layer.stride);
    } else if (word == "flatten") {
      layer.kind = LayerKind::kFlatten;
    } else if (word == "gap") {
      layer.kind = LayerKind::kGlobalAvgPool;
    } else if (word == "dense") {
      layer.kind = LayerKind::kDense;
      read(layer.units);
    } else {
      fail("unknown layer '" + word + "'");
    }
    arch.layers.push_back(layer);
  }
  trace_architecture(arch);
  return arch;
}

std::string format_architecture(const Architecture& arch) {
  std::ostringstream os;
  os << "input " << arch.input.at(0) << ' ' << arch.input.at(1) << ' ' << arch.input.at(2) << '\n';
  for (const LayerSpec& l : arch.layers) {
    os << layer_keyword(l.kind);
    switch (l.kind) {
      case LayerKind::kConv: os << ' ' << l.units << ' ' << l.kernel << ' ' << l.stride << ' ' << l.padding; break;
      case LayerKind::kMaxPool: os << ' ' << l.kernel << ' ' << l.stride; break;
      case LayerKind::kDense: os << ' ' << l.units; break;
      default: break;
    }
    os << '\n';
  }
  return os.str();
}

Architecture default_architecture(Index num_classes) {
  return parse_architecture(
      "input 3 32 32\n"
      "conv 16 3 1 1\nrelu\nmaxpool 2 2\n"
      "conv 32 3 1 1\nrelu\nmaxpool 2 2\n"
      "conv 32 3 1 1\nrelu\n"
      "gap\n"
      "dense " + std::to_string(num_classes) + "\n");
}

ShapeTrace trace_architecture(const Architecture& arch) {
  if (arch.input.size() != 3 || arch.input[0] <= 0 || arch.input[1] <= 0 || arch.input[2] <= 0) {
    throw std::invalid_argument("architecture needs a positive 'input C H W' line");
  }
  ShapeTrace trace;
  Shape cur = arch.input;
  bool seen_dense = false;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    auto fail = [&](const std::string& why) {
      throw std::invalid_argument("layer " + std::to_string(i) + " (" + layer_keyword(l.kind) + "): " + why);
    };
    switch (l.kind) {
      case LayerKind::kConv:
        if (seen_dense) fail("conv after dense unsupported");
        if (cur.size() != 3) fail("conv after flatten unsupported");
        if (l.units <= 0 || l.kernel <= 0) fail("conv needs positive channels and kernel");
        if (l.stride <= 0 || l.padding < 0) fail("unsupported stride/padding");
        cur = {l.units, conv_output_size(cur[1], l.kernel, l.stride, l.padding),
               conv_output_size(cur[2], l.kernel, l.stride, l.padding)};
        trace.last_conv = static_cast<Index>(i);
        break;
      case LayerKind::kRelu:
        break;
      case LayerKind::kMaxPool:
        if (cur.size() != 3) fail("maxpool needs an image-shaped input");
        if (l.kernel <= 0 || l.stride <= 0) fail("maxpool needs positive kernel and stride");
        cur = {cur[0], conv_output_size(cur[1], l.kernel, l.stride, 0),
               conv_output_size(cur[2], l.kernel, l.stride, 0)};
        break;
      case LayerKind::kFlatten:
        cur = {shape_size(cur)};
        break;
      case LayerKind::kGlobalAvgPool:
        if (cur.size() != 3) fail("gap needs an image-shaped input");
        cur = {cur[0]};
        break;
      case LayerKind::kDense:
        if (cur.size() != 1) fail("dense requires a flattened input");
        if (l.units <= 0) fail("dense needs positive outputs");
        cur = {l.units};
        seen_dense = true;
        break;
    }
    trace.outputs.push_back(cur);
  }
  if (trace.last_conv < 0) throw std::invalid_argument("architecture is missing a conv layer");
  if (arch.layers.empty() || arch.layers.back().kind != LayerKind::kDense) {
    throw std::invalid_argument("architecture must end with a dense layer");
  }
  if (arch.layers.back().units < 2) throw std::invalid_argument("need at least 2 classes");
  trace.tap = trace.last_conv;
  const auto next = static_cast<std::size_t>(trace.last_conv + 1);
  if (next < arch.layers.size() && arch.layers[next].kind == LayerKind::kRelu) trace.tap = trace.last_conv + 1;
  return trace;
}

template <typename S>
Ranking rankings(const Tensor<S>& probs) {
  const Index m = probs.size();
  if (m < 2) throw ShapeError("rankings need at least 2 classes");
  Ranking r;
  r.order.resize(static_cast<std::size_t>(m));
  std::iota(r.order.begin(), r.order.end(), Index{0});
  std::stable_sort(r.order.begin(), r.order.end(), [&](Index a, Index b) { return probs[a] > probs[b]; });
  r.rank_of.resize(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) r.rank_of[static_cast<std::size_t>(r.order[static_cast<std::size_t>(i)])] = i + 1;
  return r;
}

template <typename S>
Model<S> Model<S>::build(const Architecture& arch, std::uint64_t seed) {
  Model<S> model;
  model.arch_ = arch;
  model.trace_ = trace_architecture(arch);
  model.num_classes_ = arch.layers.back().units;
  std::mt19937_64 rng(seed);
  Shape cur = arch.input;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    Tensor<S> w, b;
    if (l.kind == LayerKind::kConv) {
      w = Tensor<S>({l.units, cur[0], l.kernel, l.kernel});
      b = Tensor<S>({l.units});
    } else if (l.kind == LayerKind::kDense) {
      w = Tensor<S>({l.units, cur[0]});
      b = Tensor<S>({l.units});
    }
    if (!w.empty()) {
      const double fan_in = static_cast<double>(w.size() / w.dim(0));
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Index k = 0; k < w.size(); ++k) w[k] = static_cast<S>(u(rng));
    }
    model.weights_.push_back(std::move(w));
    model.biases_.push_back(std::move(b));
    cur = model.trace_.outputs[i];
  }
  return model;
}

template <typename S>
typename Model<S>::Recorded Model<S>::record(Tape<S>& tape, NodeId input) const {
  const Shape& in_shape = tape.value(input).shape();
  const bool batched = in_shape.size() == 4;
  if ((in_shape.size() != 3 && !batched) || !std::equal(in_shape.end() - 3, in_shape.end(), arch_.input.begin())) {
    throw ShapeError("model input " + shape_string(arch_.input) + " does not match image " +
                     shape_string(in_shape));
  }
  Recorded rec;
  rec.input = input;
  rec.weights.resize(arch_.layers.size());
  rec.biases.resize(arch_.layers.size());
  NodeId cur = input;
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const LayerSpec& l = arch_.layers[i];
    if (has_params(l.kind)) {
      rec.weights[i] = tape.leaf(weights_[i]);
      rec.biases[i] = tape.leaf(biases_[i]);
    }
    switch (l.kind) {
      case LayerKind::kConv:
        cur = conv2d(tape, cur, rec.weights[i], rec.biases[i], Conv2dParams{l.stride, l.padding});
        break;
      case LayerKind::kRelu:
        cur = relu(tape, cur);
        break;
      case LayerKind::kMaxPool:
        cur = maxpool2d(tape, cur, PoolParams{l.kernel, l.stride});
        break;
      case LayerKind::kFlatten:
        cur = flatten(tape, cur);
        break;
      case LayerKind::kGlobalAvgPool: {
        const Shape s = tape.value(cur).shape();
        const Index rows = shape_size(s) / (s[s.size() - 2] * s.back());
        const Index spatial = s[s.size() - 2] * s.back();
        const NodeId avg = tape.leaf(Tensor<S>({spatial}, S(1) / static_cast<S>(spatial)));
        const NodeId pooled = matmul(tape, reshape(tape, cur, Shape{rows, spatial}), avg);
        cur = batched ? reshape(tape, pooled, Shape{s[0], s[1]}) : pooled;
        break;
      }
      case LayerKind::kDense:
        cur = dense(tape, cur, rec.weights[i], rec.biases[i]);
        break;
    }
    if (static_cast<Index>(i) == trace_.tap) rec.feature_maps = cur;
  }
  rec.logits = cur;
  return rec;
}

template <typename S>
template <typename T>
Model<T> Model<S>::cast() const {
  Model<T> out;
  out.arch_ = arch_;
  out.trace_ = trace_;
  out.num_classes_ = num_classes_;
  for (const auto& w : weights_) out.weights_.push_back(w.empty() ? Tensor<T>() : w.template cast<T>());
  for (const auto& b : biases_) out.biases_.push_back(b.empty() ? Tensor<T>() : b.template cast<T>());
  if (!mean_image_.empty()) out.mean_image_ = mean_image_.template cast<T>();
  return out;
}

template <typename S>
TapedPrediction<S> predict_taped(const Model<S>& model, const Tensor<S>& image) {
  TapedPrediction<S> out;
  out.nodes = model.record(out.tape, out.tape.leaf(image));
  Prediction<S>& p = out.prediction;
  p.logits = out.tape.value(out.nodes.logits);
  if (p.logits.rank() != 1) throw ShapeError("predict takes a single CHW image");
  p.probs = softmax_with_temperature(p.logits, S(1));
  p.label = rankings(p.probs).order[0];
  p.feature_maps = out.tape.value(out.nodes.feature_maps);
  return out;
}

template <typename S>
Prediction<S> predict(const Model<S>& model, const Tensor<S>& image) {
  return predict_taped(model, image).prediction;
}

template <typename S>
std::vector<Index> predict_labels(const Model<S>& model, const Tensor<S>& images) {
  if (images.rank() != 4) throw ShapeError("predict_labels takes an NCHW batch");
  const Index n = images.dim(0);
  const Index per = images.size() / n;
  const Index m = model.num_classes();
  std::vector<Index> labels;
  constexpr Index kChunk = 64;
  for (Index start = 0; start < n; start += kChunk) {
    const Index count = std::min(kChunk, n - start);
    Shape shape = images.shape();
    shape[0] = count;
    Tape<S> tape;
    auto rec = model.record(tape, tape.leaf(Tensor<S>(shape, images.flat().segment(start * per, count * per))));
    const Tensor<S>& z = tape.value(rec.logits);
    for (Index r = 0; r < count; ++r) {
      // First maximum, matching the rankings tie-break.
      Index best = 0;
      for (Index k = 1; k < m; ++k) {
        if (z[r * m + k] > z[r * m + best]) best = k;
      }
      labels.push_back(best);
    }
  }
  return labels;
}

Tensor<float> Dataset::image(Index i) const {
  const Index per = images.size() / images.dim(0);
  return Tensor<float>({images.dim(1), images.dim(2), images.dim(3)}, images.flat().segment(i * per, per));
}

Dataset Dataset::subset(const std::vector<Index>& indices) const {
  if (indices.empty()) throw std::invalid_argument("empty dataset subset");
  const Index per = images.size() / images.dim(0);
  Dataset out;
  Shape shape = images.shape();
  shape[0] = static_cast<Index>(indices.size());
  out.images = Tensor<float>(shape);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    out.images.flat().segment(static_cast<Index>(k) * per, per) = images.flat().segment(indices[k] * per, per);
    out.labels.push_back(labels.at(static_cast<std::size_t>(indices[k])));
  }
  return out;
}

Dataset Dataset::slice(Index begin, Index end) const {
  std::vector<Index> idx(static_cast<std::size_t>(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return subset(idx);
}

double accuracy(const Model<float>& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const auto predicted = predict_labels(model, data.images);
  Index correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train(Model<float>& model, const Dataset& data, const TrainConfig& config) {
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  if (data.images.rank() != 4 || Shape(data.images.shape().begin() + 1, data.images.shape().end()) != model.input_shape()) {
    throw ShapeError("dataset images " + shape_string(data.images.shape()) + " do not match model input " +
                     shape_string(model.input_shape()));
  }
  for (Index label : data.labels) {
    if (label < 0 || label >= model.num_classes()) {
      throw std::invalid_argument("label " + std::to_string(label) + " out of range");
    }
  }
  TrainResult result;
  const Index n = data.size();
  result.holdout_count = std::min<Index>(n - 1, static_cast<Index>(std::lround(config.holdout_fraction * static_cast<double>(n))));
  result.train_count = n - result.holdout_count;
  const Dataset train_split = data.slice(0, result.train_count);

  const Index per = data.images.size() / n;
  const Shape& in = model.input_shape();
  Tensor<float> mean_img(in);
  for (Index i = 0; i < result.train_count; ++i) mean_img.flat() += train_split.images.flat().segment(i * per, per);
  mean_img.flat() /= static_cast<float>(result.train_count);
  model.set_mean_image(mean_img);

  Adam<float> adam(config.learning_rate);
  std::mt19937_64 rng(config.seed);
  std::vector<Index> order(static_cast<std::size_t>(result.train_count));
  std::iota(order.begin(), order.end(), Index{0});
  const Index m = model.num_classes();
  const Index height = in[1], width = in[2];

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    Index batches = 0;
    for (Index start = 0; start < result.train_count; start += config.batch_size) {
      const Index count = std::min(config.batch_size, result.train_count - start);
      Tensor<float> batch({count, in[0], height, width});
      std::vector<Index> targets;
      for (Index k = 0; k < count; ++k) {
        const Index src = order[static_cast<std::size_t>(start + k)];
        auto dst = batch.flat().segment(k * per, per);
        dst = train_split.images.flat().segment(src * per, per);
        if (config.horizontal_flip && (rng() & 1u)) {
          for (Index c = 0; c < in[0]; ++c) {
            for (Index y = 0; y < height; ++y) {
              auto row = dst.segment((c * height + y) * width, width);
              row.reverseInPlace();
            }
          }
        }
        targets.push_back(k * m + train_split.labels[static_cast<std::size_t>(src)]);
      }
      Tape<float> tape;
      auto rec = model.record(tape, tape.leaf(std::move(batch)));
      NodeId loss = scale(tape, mean(tape, pick(tape, log_softmax(tape, rec.logits), targets)), -1.0f);
      auto grads = backward(tape, loss);
      adam.begin_step();
      for (std::size_t i = 0; i < model.weights().size(); ++i) {
        if (model.weights()[i].empty()) continue;
        adam.update(2 * i, model.weights()[i], grads[rec.weights[i]]);
        adam.update(2 * i + 1, model.biases()[i], grads[rec.biases[i]]);
      }
      loss_sum += tape.value(loss)[0];
      ++batches;
    }
    result.final_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
  }
  result.holdout_accuracy = result.holdout_count > 0 ? accuracy(model, data.slice(result.train_count, n)) : 0.0;
  return result;
}

namespace {

constexpr std::uint32_t kModelVersion = 1;

void put_tensor(detail::ByteWriter& w, const Tensor<float>& t) {
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.bytes(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
}

Tensor<float> get_tensor(detail::ByteReader& r, const Shape& expected) {
  const std::uint32_t rank = r.u32();
  if (rank != expected.size()) throw FormatError("tensor rank does not match layer descriptor");
  Shape shape(rank);
  for (auto& d : shape) d = r.u32();
  if (shape != expected) {
    throw FormatError("tensor shape " + shape_string(shape) + " does not match descriptor " + shape_string(expected));
  }
  Tensor<float> t(shape);
  r.bytes(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
  return t;
}

std::uint32_t crc_of(const char* data, std::size_t size) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

}  // namespace

std::vector<char> encode_model(const Model<float>& model) {
  detail::ByteWriter w;
  const Architecture& arch = model.architecture();
  w.str("TRM1");
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(model.num_classes()));
  for (Index d : arch.input) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(arch.layers.size()));
  for (const LayerSpec& l : arch.layers) {
    w.u32(static_cast<std::uint32_t>(l.kind));
    w.u32(static_cast<std::uint32_t>(l.units));
    w.u32(static_cast<std::uint32_t>(l.kernel));
    w.u32(static_cast<std::uint32_t>(l.stride));
    w.u32(static_cast<std::uint32_t>(l.padding));
  }
  w.u32(static_cast<std::uint32_t>(model.last_conv_index()));
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (!has_params(arch.layers[i].kind)) continue;
    put_tensor(w, model.weights()[i]);
    put_tensor(w, model.biases()[i]);
  }
  const bool has_mean = !model.mean_image().empty();
  w.u32(has_mean ? 1u : 0u);
  if (has_mean) put_tensor(w, model.mean_image());
  auto& buf = w.buffer();
  const std::uint32_t crc = crc_of(buf.data(), buf.size());
  w.u32(crc);
  return std::move(w.buffer());
}

Model<float> decode_model(const std::vector<char>& bytes) {
  if (bytes.size() < 8) throw ChecksumError("model file truncated");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc_of(bytes.data(), bytes.size() - 4) != stored) throw ChecksumError("model checksum mismatch");
  detail::ByteReader r(bytes.data(), bytes.size() - 4);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "TRM1") throw FormatError("bad TRM1 magic");
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) throw FormatError("unsupported TRM1 version " + std::to_string(version));
  const std::uint32_t classes = r.u32();
  Architecture arch;
  arch.input = {r.u32(), r.u32(), r.u32()};
  const std::uint32_t count = r.u32();
  if (count > 4096) throw FormatError("implausible layer count");
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerSpec l;
    const std::uint32_t kind = r.u32();
    if (kind < 1 || kind > 6) throw FormatError("unknown layer kind " + std::to_string(kind));
    l.kind = static_cast<LayerKind>(kind);
    l.units = r.u32();
    l.kernel = r.u32();
    l.stride = r.u32();
    l.padding = r.u32();
    arch.layers.push_back(l);
  }
  Model<float> model;
  try {
    model = Model<float>::build(arch, 0);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid layer descriptors: ") + e.what());
  }
  if (static_cast<Index>(classes) != model.num_classes()) throw FormatError("class count does not match head");
  if (static_cast<Index>(r.u32()) != model.last_conv_index()) throw FormatError("last conv index mismatch");
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    if (!has_params(arch.layers[i].kind)) continue;
    model.weights()[i] = get_tensor(r, model.weights()[i].shape());
    model.biases()[i] = get_tensor(r, model.biases()[i].shape());
  }
  if (r.u32() == 1) model.set_mean_image(get_tensor(r, arch.input));
  if (r.remaining() != 0) throw FormatError("trailing bytes in model file");
  return model;
}

void save_model(const std::filesystem::path& path, const Model<float>& model) {
  detail::write_file(path, encode_model(model));
}

Model<float> load_model(const std::filesystem::path& path) {
  return decode_model(detail::read_file(path));
}

template Ranking rankings(const Tensor<float>&);
template Ranking rankings(const Tensor<double>&);
template class Model<float>;
template class Model<double>;
template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;
template TapedPrediction<float> predict_taped(const Model<float>&, const Tensor<float>&);
template TapedPrediction<double> predict_taped(const Model<double>&, const Tensor<double>&);
template Prediction<float> predict(const Model<float>&, const Tensor<float>&);
template Prediction<double> predict(const Model<double>&, const Tensor<double>&);
template std::vector<Index> predict_labels(const Model<float>&, const Tensor<float>&);
template std::vector<Index> predict_labels(const Model<double>&, const Tensor<double>&);

}  // namespace taintradar
