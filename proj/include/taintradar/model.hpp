#ifndef TAINTRADAR_MODEL_HPP_
#define TAINTRADAR_MODEL_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "taintradar/tape.hpp"
#include "taintradar/tensor.hpp"

namespace taintradar {

enum class LayerKind : std::uint32_t { kConv = 1, kRelu = 2, kMaxPool = 3, kFlatten = 4, kDense = 5, kGlobalAvgPool = 6 };

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  Index units = 0;  // output channels for conv, outputs for dense
  Index kernel = 0;
  Index stride = 1;
  Index padding = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Architecture {
  Shape input;  // C x H x W
  std::vector<LayerSpec> layers;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Text form, one layer per line:
///   input C H W | conv OUT K STRIDE PAD | relu | maxpool K STRIDE | flatten | gap | dense OUT
/// (`gap` averages each channel over space).
/// Blank lines and '#' comments are ignored.
Architecture parse_architecture(const std::string& text);
std::string format_architecture(const Architecture& arch);

/// 32x32x3 input, three conv blocks, 8x8x32 feature maps at the tap, global
/// average pooling and a dense head.
Architecture default_architecture(Index num_classes = 10);

struct ShapeTrace {
  std::vector<Shape> outputs;  // per layer, without batch dimension
  Index last_conv = -1;
  Index tap = -1;  // layer whose output is A (the ReLU following the last conv, when present)
};

/// Shape-chains the architecture; throws std::invalid_argument on violations.
ShapeTrace trace_architecture(const Architecture& arch);

struct Ranking {
  std::vector<Index> order;   // class indices, most probable first
  std::vector<Index> rank_of;  // 1-based rank of each class
};

/// Descending sort, ties broken by ascending class index.
template <typename S>
Ranking rankings(const Tensor<S>& probs);

template <typename S>
struct Prediction {
  Tensor<S> logits;
  Tensor<S> probs;
  Index label = 0;
  Tensor<S> feature_maps;  // K x Hf x Wf
};

template <typename S>
class Model {
 public:
  Model() = default;

  /// He-uniform initialisation for conv and dense weights, zero biases.
  static Model build(const Architecture& arch, std::uint64_t seed);

  const Architecture& architecture() const { return arch_; }
  Index num_classes() const { return num_classes_; }
  Index last_conv_index() const { return trace_.last_conv; }
  Index tap_index() const { return trace_.tap; }
  const Shape& input_shape() const { return arch_.input; }
  const Shape& feature_shape() const { return trace_.outputs.at(static_cast<std::size_t>(trace_.tap)); }

  std::vector<Tensor<S>>& weights() { return weights_; }
  const std::vector<Tensor<S>>& weights() const { return weights_; }
  std::vector<Tensor<S>>& biases() { return biases_; }
  const std::vector<Tensor<S>>& biases() const { return biases_; }

  /// Per-pixel mean image of the training split; empty until set.
  const Tensor<S>& mean_image() const { return mean_image_; }
  void set_mean_image(Tensor<S> mean) { mean_image_ = std::move(mean); }

  struct Recorded {
    NodeId input;
    NodeId feature_maps;
    NodeId logits;
    std::vector<NodeId> weights;  // per layer; unused entries for parameterless layers
    std::vector<NodeId> biases;
  };

  /// Records the network on `tape` for an NCHW batch or a single CHW image node.
  Recorded record(Tape<S>& tape, NodeId input) const;

  template <typename T>
  Model<T> cast() const;

 private:
  template <typename>
  friend class Model;

  Architecture arch_;
  ShapeTrace trace_;
  Index num_classes_ = 0;
  std::vector<Tensor<S>> weights_;
  std::vector<Tensor<S>> biases_;
  Tensor<S> mean_image_;
};

/// Forward pass kept alive on its tape, for callers that need gradients.
template <typename S>
struct TapedPrediction {
  Tape<S> tape;
  typename Model<S>::Recorded nodes;
  Prediction<S> prediction;
};

template <typename S>
Prediction<S> predict(const Model<S>& model, const Tensor<S>& image);

template <typename S>
TapedPrediction<S> predict_taped(const Model<S>& model, const Tensor<S>& image);

/// Labels for a batch of NCHW images.
template <typename S>
std::vector<Index> predict_labels(const Model<S>& model, const Tensor<S>& images);

struct Dataset {
  Tensor<float> images;  // N x C x H x W, values in [0,1]
  std::vector<Index> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  Tensor<float> image(Index i) const;
  Dataset subset(const std::vector<Index>& indices) const;
  Dataset slice(Index begin, Index end) const;
};

struct TrainConfig {
  int epochs = 12;
  double learning_rate = 2e-3;
  Index batch_size = 32;
  double holdout_fraction = 0.1;
  bool horizontal_flip = true;
  std::uint64_t seed = 1;
};

struct TrainResult {
  double holdout_accuracy = 0.0;
  double final_loss = 0.0;
  Index train_count = 0;
  Index holdout_count = 0;
};

/// Cross-entropy with Adam. The trailing `holdout_fraction` of the dataset is
/// held out; the model's mean image is set from the training split.
TrainResult train(Model<float>& model, const Dataset& data, const TrainConfig& config);

double accuracy(const Model<float>& model, const Dataset& data);

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

// TRM1 model files.
std::vector<char> encode_model(const Model<float>& model);
Model<float> decode_model(const std::vector<char>& bytes);
void save_model(const std::filesystem::path& path, const Model<float>& model);
Model<float> load_model(const std::filesystem::path& path);

}  // namespace taintradar

#endif  // TAINTRADAR_MODEL_HPP_
