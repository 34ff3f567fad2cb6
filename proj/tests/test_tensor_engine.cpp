#include <cmath>
#include <random>

#include "doctest.h"
#include "support/random_nets.hpp"
#include "taintradar/tape.hpp"

using namespace taintradar;

TEST_CASE("relu clamps negatives") {
  Tape<double> t;
  NodeId y = relu(t, t.leaf(Tensor<double>::from({-1, 0, 2})));
  CHECK(t.value(y) == Tensor<double>::from({0, 0, 2}));
}

TEST_CASE("conv2d hand-summed window") {
  Tape<float> t;
  NodeId x = t.leaf(Tensor<float>::ones({1, 1, 3, 3}));
  NodeId w = t.leaf(Tensor<float>::ones({1, 1, 2, 2}));
  NodeId b = t.leaf(Tensor<float>::zeros({1}));
  NodeId y = conv2d(t, x, w, b);
  CHECK(t.value(y).shape() == Shape{1, 1, 2, 2});
  for (Index i = 0; i < 4; ++i) CHECK(t.value(y)[i] == 4.0f);
}

TEST_CASE("dense with identity weights is the identity") {
  Tape<double> t;
  Tensor<double> eye({3, 3});
  eye.matrix(3, 3).setIdentity();
  Tensor<double> in = Tensor<double>::from({0.5, -2, 7});
  NodeId y = dense(t, t.leaf(in), t.leaf(eye), t.leaf(Tensor<double>::zeros({3})));
  CHECK(t.value(y) == in);
}

TEST_CASE("conv2d shape law over parameter combinations") {
  for (Index in = 3; in <= 9; ++in) {
    for (Index k = 1; k <= 3; ++k) {
      for (Index stride = 1; stride <= 3; ++stride) {
        for (Index pad = 0; pad <= 2; ++pad) {
          if (in + 2 * pad < k) continue;
          Tape<float> t;
          NodeId y = conv2d(t, t.leaf(Tensor<float>::ones({1, 2, in, in + 1})),
                            t.leaf(Tensor<float>::ones({3, 2, k, k})), t.leaf(Tensor<float>::zeros({3})),
                            Conv2dParams{stride, pad});
          const Shape expected{1, 3, (in + 2 * pad - k) / stride + 1, (in + 1 + 2 * pad - k) / stride + 1};
          CHECK(t.value(y).shape() == expected);
        }
      }
    }
  }
}

TEST_CASE("shape errors name the offending dimension") {
  Tape<float> t;
  NodeId x = t.leaf(Tensor<float>::ones({1, 3, 4, 4}));
  NodeId w = t.leaf(Tensor<float>::ones({2, 2, 3, 3}));
  NodeId b = t.leaf(Tensor<float>::zeros({2}));
  try {
    conv2d(t, x, w, b);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("input channels 3") != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d(t, x, t.leaf(Tensor<float>::ones({2, 3, 3, 3})), b, Conv2dParams{-1, 0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(conv2d(t, x, t.leaf(Tensor<float>::ones({2, 3, 3, 3})), b, Conv2dParams{1, -1}),
                  std::invalid_argument);
  CHECK_THROWS_AS(add(t, x, b), ShapeError);
}

TEST_CASE("softmax with temperature") {
  SUBCASE("symmetric logits") {
    auto p = softmax_with_temperature(Tensor<double>::from({0, 0, 0}), 3.7);
    for (Index i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("two-class direct evaluation") {
    auto p = softmax_with_temperature(Tensor<double>::from({2, 0}), 2.0);
    CHECK(p[0] == doctest::Approx(0.7310585786).epsilon(1e-9));
    CHECK(p[1] == doctest::Approx(0.2689414214).epsilon(1e-9));
  }
  SUBCASE("softening lowers peak confidence") {
    CHECK(softmax_with_temperature(Tensor<double>::from({4, 0}), 1.0)[0] ==
          doctest::Approx(0.9820137900).epsilon(1e-9));
    CHECK(softmax_with_temperature(Tensor<double>::from({4, 0}), 2.0)[0] ==
          doctest::Approx(0.8807970780).epsilon(1e-9));
  }
  SUBCASE("huge logits stay finite") {
    auto p = softmax_with_temperature(Tensor<double>::from({1e4, -1e4, 3e3}), 2.0);
    CHECK(p.all_finite());
    CHECK(p.flat().sum() == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(softmax_with_temperature(Tensor<double>::from({1, 2}), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(softmax_with_temperature(Tensor<double>::from({1, 2}), -1.0), std::invalid_argument);
}

TEST_CASE("softmax sums to one with components in (0,1)") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 20.0);
  std::uniform_real_distribution<double> temp(0.1, 10.0);
  for (int trial = 0; trial < 500; ++trial) {
    Tensor<double> z({2 + trial % 9});
    for (Index i = 0; i < z.size(); ++i) z[i] = n(rng);
    auto p = softmax_with_temperature(z, temp(rng));
    CHECK(std::abs(p.flat().sum() - 1.0) < 1e-9);
    CHECK(p.flat().minCoeff() >= 0.0);
    CHECK(p.flat().maxCoeff() <= 1.0);
  }
}

TEST_CASE("backward of sum is all ones") {
  Tape<double> t;
  NodeId x = t.leaf(Tensor<double>({2, 3, 4}, 0.25));
  NodeId s = sum(t, x);
  auto g = backward(t, s);
  CHECK(g[x] == Tensor<double>::ones({2, 3, 4}));
}

TEST_CASE("backward rejects non-scalar roots") {
  Tape<double> t;
  NodeId x = t.leaf(Tensor<double>::ones({2}));
  CHECK_THROWS_AS(backward(t, x), std::invalid_argument);
}

TEST_CASE("unreached nodes get zero gradients") {
  Tape<double> t;
  NodeId x = t.leaf(Tensor<double>::ones({3}));
  NodeId unused = t.leaf(Tensor<double>::ones({2, 2}));
  NodeId s = sum(t, square(t, x));
  auto g = backward(t, s);
  CHECK(g[unused] == Tensor<double>::zeros({2, 2}));
  CHECK(g[x] == Tensor<double>({3}, 2.0));
}

TEST_CASE("log-softmax gradient matches (delta - p) / T") {
  const Tensor<double> z = Tensor<double>::from({1.5, -0.3, 2.2, 0.1});
  const double temperature = 2.0;
  const Index c = 2;
  Tape<double> t;
  NodeId zn = t.leaf(z);
  NodeId l = pick(t, log(t, softmax(t, zn, temperature)), {c});
  auto g = backward(t, l);
  auto p = softmax_with_temperature(z, temperature);
  std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& v) {
    return std::log(softmax_with_temperature(v, temperature)[c]);
  };
  auto fd = finite_difference_gradient(f, z, 1e-6);
  for (Index s = 0; s < 4; ++s) {
    const double closed = ((s == c ? 1.0 : 0.0) - p[s]) / temperature;
    CHECK(g[zn][s] == doctest::Approx(closed).epsilon(1e-12));
    CHECK(fd[s] == doctest::Approx(closed).epsilon(1e-7));
  }
}

TEST_CASE("finite differences on analytic functions") {
  std::function<double(const Tensor<double>&)> sq = [](const Tensor<double>& v) {
    return v.flat().squaredNorm();
  };
  auto g = finite_difference_gradient(sq, Tensor<double>::from({1, 2}), 1e-5);
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(4.0));

  std::function<double(const Tensor<double>&)> constant = [](const Tensor<double>&) { return 3.0; };
  CHECK(finite_difference_gradient(constant, Tensor<double>::from({1, 2, 3}), 1e-5) ==
        Tensor<double>::zeros({3}));

  std::function<double(const Tensor<double>&)> prod = [](const Tensor<double>& v) {
    return v.flat().prod();
  };
  g = finite_difference_gradient(prod, Tensor<double>::from({2, 3}), 1e-5);
  CHECK(g[0] == doctest::Approx(3.0));
  CHECK(g[1] == doctest::Approx(2.0));
  CHECK_THROWS_AS(finite_difference_gradient(prod, Tensor<double>::from({2, 3}), 0.0),
                  std::invalid_argument);
}

TEST_CASE("maxpool routes ties to the first maximum") {
  Tape<double> t;
  NodeId x = t.leaf(Tensor<double>({1, 1, 2, 2}, 1.0));
  NodeId s = sum(t, maxpool2d(t, x, PoolParams{2, 2}));
  auto g = backward(t, s);
  CHECK(g[x] == Tensor<double>(Shape{1, 1, 2, 2}, Vec<double>((Vec<double>(4) << 1, 0, 0, 0).finished())));
}

TEST_CASE("elementwise ops against finite differences") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.2, 2.0);
  Tensor<double> x({2, 3});
  for (Index i = 0; i < x.size(); ++i) x[i] = u(rng);
  Tensor<double> other = x;
  other.flat().reverseInPlace();
  auto build = [&](Tape<double>& t, const Tensor<double>& v) {
    NodeId xn = t.leaf(v);
    NodeId o = t.leaf(other);
    NodeId y = mul(t, sigmoid(t, xn), o);
    y = add(t, y, abs(t, affine(t, xn, -1.5, 0.7)));
    y = sub(t, y, scale(t, sqrt(t, xn, 1e-3), 0.3));
    NodeId m = max_all(t, square(t, y));
    y = div_by_scalar(t, log(t, affine(t, square(t, y), 1.0, 1.0)), m);
    NodeId mm = matmul(t, reshape(t, y, {2, 3}), t.leaf(Tensor<double>::from({0.2, -1.0, 0.5})));
    return std::pair{xn, sum(t, mean(t, mm))};
  };
  Tape<double> t;
  auto [xn, out] = build(t, x);
  auto g = backward(t, out);
  std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& v) {
    Tape<double> tt;
    return tt.value(build(tt, v).second)[0];
  };
  auto fd = finite_difference_gradient(f, x, 1e-6);
  CHECK(testing::relative_error(g[xn], fd) < 1e-6);
}

TEST_CASE("embed, concat, pick and linear_map gradients") {
  Tensor<double> patch({2, 2, 2});
  for (Index i = 0; i < patch.size(); ++i) patch[i] = 0.1 * static_cast<double>(i + 1);
  auto m = std::make_shared<const Mat<double>>(Mat<double>::Random(5, 2 * 4 * 4));
  auto build = [&](Tape<double>& t, const Tensor<double>& v) {
    NodeId p = t.leaf(v);
    NodeId a = embed(t, p, {2, 4, 4}, 1, 2);
    NodeId b = embed(t, sigmoid(t, p), {2, 4, 4}, 0, 0);
    NodeId cat = concat(t, std::vector<NodeId>{reshape(t, a, {1, 2, 4, 4}), reshape(t, b, {1, 2, 4, 4})});
    NodeId picked = pick(t, cat, {0, 7, 13, 40, 63});
    NodeId mapped = linear_map(t, b, m, {5});
    return std::pair{p, sum(t, mul(t, square(t, picked), mapped))};
  };
  Tape<double> t;
  auto [p, out] = build(t, patch);
  auto g = backward(t, out);
  std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& v) {
    Tape<double> tt;
    return tt.value(build(tt, v).second)[0];
  };
  CHECK(testing::relative_error(g[p], finite_difference_gradient(f, patch, 1e-6)) < 1e-7);
  Tape<double> bad;
  CHECK_THROWS_AS(embed(bad, bad.leaf(patch), {2, 4, 4}, 3, 0), ShapeError);
}

TEST_CASE("random conv nets: autodiff matches central differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto net = testing::RandomNet::make(seed);
    auto x = net.random_input(seed + 1000);
    Tape<double> t;
    auto rec = net.record(t, x);
    auto g = backward(t, rec.out);
    std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& v) {
      return net.evaluate(v);
    };
    INFO("seed " << seed);
    CHECK(testing::relative_error(g[rec.x], finite_difference_gradient(f, x, 1e-4)) < 1e-4);
  }
}

TEST_CASE("floor limits expansion") {
  Tape<double> t;
  NodeId x = t.leaf(Tensor<double>::from({1, 2}));
  NodeId y = square(t, x);
  NodeId s = sum(t, scale(t, y, 3.0));
  auto g = backward(t, s, y);
  CHECK(g[y] == Tensor<double>({2}, 3.0));
  CHECK(g[x] == Tensor<double>::zeros({2}));
}

TEST_CASE("tape replay reproduces stored values bit for bit") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto net = testing::RandomNet::make(seed);
    Tape<double> t;
    net.record(t, net.random_input(seed));
    auto first = t.replay();
    auto second = t.replay();
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(first[i] == t.value(NodeId{i}));
      CHECK(second[i] == first[i]);
    }
  }
}

TEST_CASE("RT1 round trip and corruption") {
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> u(-5.f, 5.f);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    for (int d = 0; d < 1 + trial % 4; ++d) shape.push_back(1 + (trial * 7 + d * 3) % 6);
    Tensor<float> x(shape);
    for (Index i = 0; i < x.size(); ++i) x[i] = u(rng);
    CHECK(decode_rt1(encode_rt1(x)) == x);
  }
  auto bytes = encode_rt1(Tensor<float>::ones({2, 3}));
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RT1\n");
  CHECK(bytes.size() == 4 + 4 + 8 + 24);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_rt1(truncated), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_rt1(bad_magic), FormatError);
}
