#include <doctest.h>

#include <cmath>
#include <limits>

#include "moby/optim.hpp"

using namespace moby;

namespace {

Tensor<double> param(std::initializer_list<double> values) {
  Tensor<double> t = Tensor<double>::from({static_cast<Index>(values.size())}, values);
  t.set_requires_grad(true);
  return t;
}

void set_grad(Tensor<double>& t, std::initializer_list<double> g) {
  t.clear_grad();
  Index i = 0;
  for (double v : g) t.grad_buffer()[i++] = v;
}

// Textbook Adam written directly from the recurrence, one scalar at a time.
struct ScalarAdam {
  double lr, b1, b2, eps;
  double m = 0, v = 0;
  int t = 0;
  double step(double w, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return w - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace

TEST_CASE("adamw first step from w=1 g=1") {
  Tensor<double> w = param({1.0});
  AdamW<double> opt({{"w", w}}, AdamWConfig{});
  set_grad(w, {1.0});
  opt.step();
  const double expected = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8)) - 0.001 * 0.05 * 1.0;
  CHECK(std::abs(w.data()[0] - expected) < 1e-9);
  CHECK(std::abs(w.data()[0] - 0.99895) < 1e-9);
}

TEST_CASE("adamw with zero gradient is pure geometric decay") {
  Tensor<double> w = param({3.0, -2.0, 0.5});
  AdamW<double> opt({{"w", w}}, AdamWConfig{});
  for (int n = 1; n <= 50; ++n) {
    set_grad(w, {0.0, 0.0, 0.0});
    opt.step();
    const double f = std::pow(1.0 - 0.001 * 0.05, n);
    CHECK(std::abs(w.data()[0] - 3.0 * f) < 1e-14);
    CHECK(std::abs(w.data()[1] + 2.0 * f) < 1e-14);
    CHECK(std::abs(w.data()[2] - 0.5 * f) < 1e-14);
  }
  CHECK(opt.first_moments()[0].isZero(0.0));
  CHECK(opt.second_moments()[0].isZero(0.0));
}

TEST_CASE("adamw without decay matches an independent adam") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  Tensor<double> w = param({0.7, -1.3});
  AdamW<double> opt({{"w", w}}, cfg);
  ScalarAdam a{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps}, b = a;
  double wa = 0.7, wb = -1.3;
  double worst = 0.0;
  for (int s = 0; s < 200; ++s) {
    const double ga = 0.4, gb = -2.5 + 0.01 * s;
    set_grad(w, {ga, gb});
    opt.step();
    wa = a.step(wa, ga);
    wb = b.step(wb, gb);
    worst = std::max({worst, std::abs(w.data()[0] - wa), std::abs(w.data()[1] - wb)});
  }
  CHECK(worst < 1e-12);
  CHECK(opt.steps() == 200);
}

TEST_CASE("adamw update magnitude tends to lr for a constant gradient") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.eps = 1e-300;
  Tensor<double> w = param({0.0, 0.0});
  AdamW<double> opt({{"w", w}}, cfg);
  for (int s = 0; s < 100; ++s) {
    const double before0 = w.data()[0], before1 = w.data()[1];
    set_grad(w, {3.0, -0.02});
    opt.step();
    CHECK(std::abs((before0 - w.data()[0]) - cfg.lr) < 1e-12);
    CHECK(std::abs((w.data()[1] - before1) - cfg.lr) < 1e-12);
  }
}

TEST_CASE("adamw rejects a non-finite gradient and names the parameter") {
  Tensor<double> ok = param({1.0});
  Tensor<double> bad = param({1.0});
  AdamW<double> opt({{"layer.ok", ok}, {"layer.bad", bad}}, AdamWConfig{});
  set_grad(ok, {1.0});
  set_grad(bad, {std::numeric_limits<double>::quiet_NaN()});
  try {
    opt.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer.bad") != std::string::npos);
  }
  // Nothing moved.
  CHECK(ok.data()[0] == 1.0);
  CHECK(opt.steps() == 0);
}

TEST_CASE("adamw requires a gradient on every parameter") {
  Tensor<double> w = param({1.0});
  AdamW<double> opt({{"w", w}}, AdamWConfig{});
  CHECK_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("adamw config validation") {
  AdamWConfig cfg;
  cfg.lr = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta2 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.weight_decay = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("decay exclusion switch") {
  AdamWConfig cfg;
  cfg.exclude_norm_and_bias = true;
  Tensor<double> bias = param({1.0});
  Tensor<double> weight = Tensor<double>::full({1, 1}, 1.0);
  weight.set_requires_grad(true);
  AdamW<double> opt({{"fc.bias", bias}, {"fc.weight", weight}}, cfg);
  set_grad(bias, {0.0});
  weight.grad_buffer()[0] = 0.0;
  opt.step();
  CHECK(bias.data()[0] == 1.0);
  CHECK(std::abs(weight.data()[0] - (1.0 - 0.001 * 0.05)) < 1e-15);
}

TEST_CASE("sgd without momentum") {
  Tensor<double> w = param({2.0});
  Sgd<double> opt({{"w", w}}, 0.0);
  set_grad(w, {1.0});
  opt.step(1.0);
  CHECK(w.data()[0] == 1.0);
}

TEST_CASE("sgd velocity recurrence") {
  Tensor<double> w = param({0.0});
  Sgd<double> opt({{"w", w}}, 0.9);
  const double g = 0.5;
  set_grad(w, {g});
  opt.step(0.1);
  CHECK(opt.velocity()[0][0] == doctest::Approx(g).epsilon(1e-15));
  set_grad(w, {g});
  opt.step(0.1);
  CHECK(opt.velocity()[0][0] == doctest::Approx(0.9 * g + g).epsilon(1e-15));
  CHECK(w.data()[0] == doctest::Approx(-0.1 * g - 0.1 * (1.9 * g)).epsilon(1e-14));
}

TEST_CASE("sgd on a quadratic follows the closed-form linear recurrence") {
  // f(w) = a/2 (w - c)^2. With e = w - c the heavy-ball iteration is
  // [e_{t+1}, e_t] = M [e_t, e_{t-1}],  M = [[1 + mu - lr a, -mu], [1, 0]].
  const double a = 2.0, c = 0.3, lr = 0.05, mu = 0.9;
  Tensor<double> w = param({1.7});
  Sgd<double> opt({{"w", w}}, mu);
  Eigen::Matrix2d m;
  m << 1 + mu - lr * a, -mu, 1, 0;
  Eigen::Vector2d state(1.7 - c, 1.7 - c);  // v_0 = 0 means e_{-1} = e_0
  Eigen::Matrix2d power = Eigen::Matrix2d::Identity();
  double worst = 0.0;
  for (int t = 1; t <= 150; ++t) {
    set_grad(w, {a * (w.data()[0] - c)});
    opt.step(lr);
    power = m * power;
    const double e = (power * state)(0);
    worst = std::max(worst, std::abs((w.data()[0] - c) - e));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("sgd weight decay and float") {
  Tensor<float> w = Tensor<float>::from({2}, {1.0f, -1.0f});
  w.set_requires_grad(true);
  Sgd<float> opt({{"w", w}}, 0.0, 0.5);
  w.grad_buffer().setZero();
  opt.step(0.1);
  CHECK(w.data()[0] == doctest::Approx(0.95));
  CHECK(w.data()[1] == doctest::Approx(-0.95));
  CHECK_THROWS_AS(Sgd<float>({{"w", w}}, 1.0), ConfigError);
}
