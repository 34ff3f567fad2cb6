#include <random>

#include "doctest.h"
#include "taintradar/dataset.hpp"
#include "taintradar/model.hpp"

using namespace taintradar;

namespace {

// Two classes separated by mean brightness.
Dataset blobs(Index count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.05);
  Dataset d;
  d.images = Tensor<float>({count, 1, 6, 6});
  for (Index n = 0; n < count; ++n) {
    const Index label = n % 2;
    d.labels.push_back(label);
    for (Index i = 0; i < 36; ++i) d.images[n * 36 + i] = static_cast<float>((label ? 0.7 : 0.3) + noise(rng));
  }
  return d;
}

const char* kTiny = "input 1 6 6\nconv 4 3 1 1\nrelu\ngap\ndense 2\n";

}  // namespace

TEST_CASE("last conv index resolves to the second conv") {
  auto arch = parse_architecture(
      "input 3 16 16\nconv 4 3 1 1\nrelu\nmaxpool 2 2\nconv 8 3 1 1\nrelu\nmaxpool 2 2\nflatten\ndense 10\n");
  auto model = Model<float>::build(arch, 1);
  CHECK(model.last_conv_index() == 3);
  CHECK(model.num_classes() == 10);
}

TEST_CASE("dense before conv is rejected") {
  CHECK_THROWS_WITH_AS(parse_architecture("input 3 8 8\nflatten\ndense 5\nconv 4 3 1 1\ndense 2\n"),
                       doctest::Contains("conv after dense unsupported"),
                       std::invalid_argument);
  CHECK_THROWS_AS(trace_architecture(parse_architecture("input 3 8 8\nflatten\ndense 2\n")), std::invalid_argument);
}

TEST_CASE("default architecture taps 8x8x32 feature maps") {
  const auto trace = trace_architecture(default_architecture());
  CHECK(trace.outputs.at(static_cast<std::size_t>(trace.tap)) == Shape{32, 8, 8});
  CHECK(trace.outputs.back() == Shape{10});
}

TEST_CASE("architecture text round trip") {
  const auto arch = default_architecture();
  CHECK(parse_architecture(format_architecture(arch)) == arch);
}

TEST_CASE("rankings") {
  auto r = rankings(Tensor<double>::from({0.1, 0.7, 0.2}));
  CHECK(r.order == std::vector<Index>{1, 2, 0});
  CHECK(r.rank_of == std::vector<Index>{3, 1, 2});
  auto u = rankings(Tensor<double>::from({0.25, 0.25, 0.25, 0.25}));
  CHECK(u.rank_of == std::vector<Index>{1, 2, 3, 4});
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> p({7});
    for (Index i = 0; i < 7; ++i) p[i] = std::round(d(rng) * 4) / 4;  // plenty of ties
    auto v = rankings(p);
    for (Index i = 0; i < 7; ++i) CHECK(v.rank_of[static_cast<std::size_t>(v.order[static_cast<std::size_t>(i)])] == i + 1);
  }
}

TEST_CASE("predict: normalised, deterministic, argmax invariant under logit scaling") {
  auto model = Model<float>::build(default_architecture(), 7);
  auto data = make_toy_dataset(4, 1);
  for (Index i = 0; i < data.size(); ++i) {
    auto a = predict(model, data.image(i));
    auto b = predict(model, data.image(i));
    CHECK(a.probs.flat().sum() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(a.logits == b.logits);
    CHECK(a.label == rankings(a.probs).order[0]);
    CHECK(a.feature_maps.shape() == Shape{32, 8, 8});
    Tensor<float> scaled = a.logits;
    scaled.flat() *= 3.5f;
    CHECK(rankings(softmax_with_temperature(scaled, 1.0f)).order == rankings(a.probs).order);
  }
}

TEST_CASE("input shape mismatch") {
  auto model = Model<float>::build(default_architecture(), 7);
  CHECK_THROWS_AS(predict(model, Tensor<float>({3, 16, 16})), ShapeError);
}

TEST_CASE("training separates blobs") {
  auto model = Model<float>::build(parse_architecture(kTiny), 2);
  TrainConfig tc;
  tc.epochs = 20;
  tc.learning_rate = 1e-2;
  tc.horizontal_flip = false;
  auto r = train(model, blobs(400, 5), tc);
  CHECK(r.holdout_accuracy >= 0.99);
  CHECK(accuracy(model, blobs(200, 6)) >= 0.99);
}

TEST_CASE("zero epochs leaves weights untouched") {
  auto model = Model<float>::build(parse_architecture(kTiny), 2);
  const auto before = model.weights();
  TrainConfig tc;
  tc.epochs = 0;
  train(model, blobs(100, 5), tc);
  CHECK(model.weights() == before);
}

TEST_CASE("training rejects bad labels and empty data") {
  auto model = Model<float>::build(parse_architecture(kTiny), 2);
  auto d = blobs(10, 1);
  d.labels[3] = 5;
  CHECK_THROWS_AS(train(model, d, TrainConfig{}), std::invalid_argument);
  CHECK_THROWS_AS(train(model, Dataset{}, TrainConfig{}), std::invalid_argument);
}

TEST_CASE("TRM1 round trip, header and truncation") {
  auto model = Model<float>::build(default_architecture(), 9);
  model.set_mean_image(Tensor<float>::ones({3, 32, 32}));
  const auto bytes = encode_model(model);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TRM1");
  const auto back = decode_model(bytes);
  CHECK(back.architecture() == model.architecture());
  CHECK(back.weights() == model.weights());
  CHECK(back.mean_image() == model.mean_image());
  auto data = make_toy_dataset(100, 4);
  for (Index i = 0; i < data.size(); ++i) CHECK(predict(back, data.image(i)).logits == predict(model, data.image(i)).logits);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  CHECK_THROWS_AS(decode_model(truncated), ChecksumError);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(decode_model(flipped), ChecksumError);
}

TEST_CASE("gap head gradients match finite differences") {
  auto model = Model<double>::build(
      parse_architecture("input 2 6 6\nconv 3 3 1 1\nrelu\nmaxpool 2 2\nconv 4 3 1 1\nrelu\ngap\ndense 3\n"), 11);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<double> x({2, 6, 6});
  for (Index i = 0; i < x.size(); ++i) x[i] = u(rng);
  Tape<double> t;
  auto rec = model.record(t, t.leaf(x));
  auto root = sum(t, pick(t, rec.logits, {1}));
  auto g = backward(t, root);
  std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& v) { return predict(model, v).logits[1]; };
  const auto fd = finite_difference_gradient(f, x, 1e-5);
  CHECK((g[rec.input].flat() - fd.flat()).norm() / fd.flat().norm() < 1e-6);
}

TEST_CASE("toy dataset") {
  const auto a = make_toy_dataset(50, 3), b = make_toy_dataset(50, 3);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.images.shape() == Shape{50, 3, 32, 32});
  CHECK(a.images.flat().minCoeff() >= 0.0f);
  CHECK(a.images.flat().maxCoeff() <= 1.0f);
  for (Index l : a.labels) CHECK((l >= 0 && l < kToyClasses));
  CHECK(toy_class_names().size() == static_cast<std::size_t>(kToyClasses));
  CHECK_FALSE(make_toy_dataset(50, 4).images == a.images);
}
