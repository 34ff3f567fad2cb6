#ifndef TAINTRADAR_TESTS_SUPPORT_RANDOM_NETS_HPP_
#define TAINTRADAR_TESTS_SUPPORT_RANDOM_NETS_HPP_

#include <random>

#include "taintradar/tape.hpp"

namespace taintradar::testing {

// Small random conv net with a random scalar head, used for gradient checks.
struct RandomNet {
  Shape input_shape;
  Tensor<double> w1, b1, w2, b2, wd, bd, head;
  Conv2dParams c1, c2;
  bool pool = false;
  double temperature = 1.0;

  static RandomNet make(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto pick_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    std::normal_distribution<double> normal(0.0, 0.5);
    auto fill = [&](Shape s) {
      Tensor<double> t(std::move(s));
      for (Index i = 0; i < t.size(); ++i) t[i] = normal(rng);
      return t;
    };
    RandomNet net;
    const Index channels = pick_int(1, 3);
    const Index side = pick_int(6, 9);
    net.input_shape = {1, channels, side, side};
    const Index f1 = pick_int(2, 4), k1 = pick_int(2, 3);
    net.c1 = {pick_int(1, 2), pick_int(0, 1)};
    net.w1 = fill({f1, channels, k1, k1});
    net.b1 = fill({f1});
    Index h = conv_output_size(side, k1, net.c1.stride, net.c1.padding);
    net.pool = h >= 4 && pick_int(0, 1) == 1;
    if (net.pool) h = conv_output_size(h, 2, 2, 0);
    const Index f2 = pick_int(2, 4), k2 = std::min<Index>(pick_int(1, 2), h);
    net.c2 = {1, pick_int(0, 1)};
    net.w2 = fill({f2, f1, k2, k2});
    net.b2 = fill({f2});
    const Index h2 = conv_output_size(h, k2, 1, net.c2.padding);
    const Index classes = pick_int(2, 6);
    net.wd = fill({classes, f2 * h2 * h2});
    net.bd = fill({classes});
    net.head = fill({classes});
    net.temperature = 0.5 + std::uniform_real_distribution<double>(0.0, 2.5)(rng);
    return net;
  }

  Tensor<double> random_input(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor<double> x(input_shape);
    for (Index i = 0; i < x.size(); ++i) x[i] = u(rng);
    return x;
  }

  struct Recorded {
    NodeId x, w1, w2, wd, out;
  };

  // scalar = <head, log_softmax(Z / T)>
  Recorded record(Tape<double>& t, const Tensor<double>& x) const {
    Recorded r;
    r.x = t.leaf(x);
    r.w1 = t.leaf(w1);
    NodeId h = relu(t, conv2d(t, r.x, r.w1, t.leaf(b1), c1));
    if (pool) h = maxpool2d(t, h, PoolParams{2, 2});
    r.w2 = t.leaf(w2);
    h = relu(t, conv2d(t, h, r.w2, t.leaf(b2), c2));
    r.wd = t.leaf(wd);
    NodeId z = dense(t, flatten(t, h), r.wd, t.leaf(bd));
    NodeId lp = log_softmax(t, z, temperature);
    NodeId hd = t.leaf(head.reshaped({1, head.size()}));
    r.out = mul(t, reshape(t, lp, {1, head.size()}), hd);
    r.out = sum(t, r.out);
    return r;
  }

  double evaluate(const Tensor<double>& x) const {
    Tape<double> t;
    return t.value(record(t, x).out)[0];
  }
};

inline double relative_error(const Tensor<double>& a, const Tensor<double>& b) {
  const double scale = std::max({a.flat().norm(), b.flat().norm(), 1e-12});
  return (a.flat() - b.flat()).norm() / scale;
}

}  // namespace taintradar::testing

#endif  // TAINTRADAR_TESTS_SUPPORT_RANDOM_NETS_HPP_
