#include <cmath>
#include <random>

#include "doctest.h"
#include "taintradar/detector.hpp"

using namespace taintradar;

namespace {

const char* kArch = "input 3 16 16\nconv 6 3 1 1\nrelu\nmaxpool 2 2\nconv 8 3 1 1\nrelu\ngap\ndense 5\n";

Model<float> small_model(std::uint64_t seed) {
  auto model = Model<float>::build(parse_architecture(kArch), seed);
  model.set_mean_image(Tensor<float>({3, 16, 16}, 0.5f));
  return model;
}

Tensor<float> random_image(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> x({3, 16, 16});
  for (Index i = 0; i < x.size(); ++i) x[i] = u(rng);
  return x;
}

DetectionConfig config(Index k, Index dr) {
  DetectionConfig c;
  c.top_k = k;
  c.rank_threshold = dr;
  return c;
}

}  // namespace

TEST_CASE("estimation loss of two equal logits is log 1/2") {
  Tape<double> tape;
  const NodeId z = tape.leaf(Tensor<double>::from({0.0, 0.0}));
  const NodeId l = estimation_loss(tape, z, 0, 1.0);
  CHECK(tape.value(l)[0] == doctest::Approx(-0.6931).epsilon(1e-4));
}

TEST_CASE("estimation loss gradient is (onehot - p) / T") {
  Tape<double> tape;
  const auto logits = Tensor<double>::from({1.0, -0.5, 2.0, 0.3});
  const double t = 2.0;
  const NodeId z = tape.leaf(logits);
  const auto grads = backward(tape, estimation_loss(tape, z, 2, t));
  const auto p = softmax_with_temperature(logits, t);
  for (Index s = 0; s < 4; ++s) CHECK(grads[z][s] == doctest::Approx(((s == 2) - p[s]) / t).epsilon(1e-12));
  CHECK_THROWS_AS(estimation_loss(tape, z, 4, t), std::invalid_argument);
}

TEST_CASE("pooled weights match the closed form of a pooled head") {
  const auto model = small_model(3).cast<double>();
  const auto& w = model.weights().back();  // m x K
  const Index m = w.dim(0), k = w.dim(1);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const double t = 1.5;
    auto pred = predict_taped(model, random_image(seed).cast<double>());
    const auto est = critical_region(pred, t, 0.15);
    const Index n = pred.prediction.feature_maps.size() / k;
    const auto p = softmax_with_temperature(pred.prediction.logits, t);
    for (Index j = 0; j < k; ++j) {
      double expected = 0.0;
      for (Index s = 0; s < m; ++s) expected += ((s == pred.prediction.label) - p[s]) * w[s * k + j];
      CHECK(est.weights[j] == doctest::Approx(expected / (n * t)).epsilon(1e-9));
    }
    auto pred2 = predict_taped(model, random_image(seed).cast<double>());
    const auto neg = negative_region(pred2, 1, 0.15);
    for (Index j = 0; j < k; ++j) CHECK(neg.weights[j] == doctest::Approx(w[k + j] / n).epsilon(1e-9));
  }
}

TEST_CASE("heatmaps are normalised and masks threshold them") {
  const auto model = small_model(5);
  auto pred = predict_taped(model, random_image(9));
  const auto est = critical_region(pred, 2.0, 0.15);
  if (!est.degenerate) {
    CHECK(est.heatmap.flat().maxCoeff() == doctest::Approx(1.0f));
    CHECK(est.heatmap.flat().minCoeff() >= 0.0f);
    CHECK(est.mask == heatmap_to_mask(est.heatmap, 0.15f, 16, 16));
  }
}

TEST_CASE("zero weights give empty masks and a benign verdict") {
  auto model = small_model(1);
  for (auto& w : model.weights()) w.flat().setZero();
  for (auto& b : model.biases()) b.flat().setZero();
  const auto r = detect(random_image(2), model, config(3, 1));
  CHECK(r.estimated.none());
  CHECK(r.final_mask.none());
  CHECK(r.rank_after == 1);
  CHECK(r.verdict == Verdict::kBenign);
}

TEST_CASE("top-K orders by logit increase") {
  const auto before = Tensor<float>::from({1, 1, 1, 1, 1});
  const auto after = Tensor<float>::from({1, 0, 3, 2, 1});
  CHECK(top_k_suppressed(before, after, 2, 0) == std::vector<Index>{2, 3});
  CHECK(top_k_suppressed(before, after, 4, 0) == std::vector<Index>{2, 3, 4, 1});
  // Unchanged logits: ascending index, skipping the excluded label.
  CHECK(top_k_suppressed(before, before, 3, 1) == std::vector<Index>{0, 2, 3});
  CHECK_THROWS_AS(top_k_suppressed(before, after, 5, 0), std::invalid_argument);
}

TEST_CASE("fill touches only masked pixels") {
  const auto image = random_image(4);
  const auto mask = BinaryMask::block(16, 16, 2, 3, 5, 4);
  const auto mean = Tensor<float>({3, 16, 16}, 0.25f);
  const auto filled = fill_region(image, mask, FillPattern::dataset_mean(mean));
  const auto noisy = fill_region(image, mask, FillPattern::random_noise(), 7);
  CHECK(noisy == fill_region(image, mask, FillPattern::random_noise(), 7));
  CHECK(!(noisy == fill_region(image, mask, FillPattern::random_noise(), 8)));
  for (Index c = 0; c < 3; ++c) {
    for (Index y = 0; y < 16; ++y) {
      for (Index x = 0; x < 16; ++x) {
        if (mask(y, x)) {
          CHECK(filled.at(c, y, x) == 0.25f);
          CHECK(noisy.at(c, y, x) >= 0.0f);
          CHECK(noisy.at(c, y, x) <= 1.0f);
        } else {
          CHECK(filled.at(c, y, x) == image.at(c, y, x));
          CHECK(noisy.at(c, y, x) == image.at(c, y, x));
        }
      }
    }
  }
  CHECK(fill_region(image, BinaryMask(16, 16), FillPattern::random_noise(), 3) == image);
  CHECK_THROWS_AS(fill_region(image, BinaryMask(8, 8), FillPattern::dataset_mean(mean)), ShapeError);
}

TEST_CASE("pipeline uses three forward and K+1 backward passes") {
  const auto model = small_model(2);
  for (Index k = 1; k <= 4; ++k) {
    const auto r = detect(random_image(k), model, config(k, 1));
    CHECK(r.forward_passes == 3);
    CHECK(r.backward_passes == k + 1);
    CHECK(static_cast<Index>(r.negatives.size()) == k);
    CHECK(r.ranking_change == r.rank_after - 1);
  }
}

TEST_CASE("detection is deterministic and the sweep matches single runs") {
  const auto model = small_model(6);
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto image = random_image(40 + s);
    auto c = config(2, 1);
    c.fill = s % 2 ? FillMode::kRandomNoise : FillMode::kDatasetMean;
    c.seed = s;
    const auto changes = detect_ranking_changes(image, model, c, {1, 2, 3, 4});
    for (Index k = 1; k <= 4; ++k) {
      c.top_k = k;
      const auto a = detect(image, model, c);
      const auto b = detect(image, model, c);
      CHECK(a.final_mask == b.final_mask);
      CHECK(a.ranking_change == changes[static_cast<std::size_t>(k - 1)]);
    }
  }
}

TEST_CASE("final mask shrinks as K grows") {
  const auto model = small_model(8);
  const auto image = random_image(11);
  Index previous = 16 * 16 + 1;
  for (Index k = 1; k <= 4; ++k) {
    const auto r = detect(image, model, config(k, 1));
    CHECK(r.final_mask.area() <= previous);
    previous = r.final_mask.area();
  }
}

TEST_CASE("removal curve starts at rank 1") {
  const auto model = small_model(4);
  const auto curve = removal_curve(random_image(3), model, 20, 6);
  REQUIRE(curve.size() == 7);
  CHECK(curve[0] == 1);
  for (Index r : curve) CHECK((r >= 1 && r <= 5));
  CHECK_THROWS_AS(removal_curve(random_image(3), model, 0, 6), std::invalid_argument);
}

TEST_CASE("configuration ranges are validated") {
  CHECK_NOTHROW(config(4, 4).validate(5));
  CHECK_THROWS_AS(config(0, 1).validate(5), std::invalid_argument);
  CHECK_THROWS_AS(config(5, 1).validate(5), std::invalid_argument);
  CHECK_THROWS_AS(config(2, 0).validate(5), std::invalid_argument);
  CHECK_THROWS_AS(config(2, 5).validate(5), std::invalid_argument);
  auto c = config(2, 1);
  c.temperature = 0.0;
  CHECK_THROWS_AS(c.validate(5), std::invalid_argument);
}

TEST_CASE("report serialises as a flat object") {
  const auto model = small_model(2);
  const auto json = report_to_json(detect(random_image(1), model, config(2, 1)));
  CHECK(json.find("\"verdict\"") != std::string::npos);
  CHECK(json.find("\"backward_passes\": 3") != std::string::npos);
}
