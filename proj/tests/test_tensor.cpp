#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "phonelm/autograd.hpp"
#include "phonelm/gradcheck.hpp"
#include "phonelm/optimizer.hpp"
#include "phonelm/rng.hpp"
#include "phonelm/tensor.hpp"

using namespace phonelm;

namespace {

Tensor64 random_tensor(std::vector<size_t> shape, Rng& rng,
                       double scale = 1.0) {
  Tensor64 t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) {
    t[i] = rng.next_normal(0.0, scale);
  }
  return t;
}

// Naive reference matmul, independent of the kernels under test.
Tensor64 naive_mm(const Tensor64& a, const Tensor64& b) {
  const size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor64 c({n, m});
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < m; ++j) {
      double acc = 0;
      for (size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

}  // namespace

TEST_CASE("matmul kernels match the naive reference") {
  Rng rng(11);
  for (int trial = 0; trial < 8; ++trial) {
    const size_t n = 1 + rng.next_index(6);
    const size_t k = 1 + rng.next_index(6);
    const size_t m = 1 + rng.next_index(6);
    Tensor64 a = random_tensor({n, k}, rng);
    Tensor64 b = random_tensor({k, m}, rng);
    Tensor64 want = naive_mm(a, b);

    Tensor64 got({n, m});
    kern::mm_nn_acc(a.data(), b.data(), got.data(), n, k, m);
    for (size_t i = 0; i < want.size(); ++i) {
      REQUIRE(got[i] == Catch::Approx(want[i]).margin(1e-12));
    }

    // nt: feed b transposed.
    Tensor64 bt({m, k});
    for (size_t i = 0; i < k; ++i) {
      for (size_t j = 0; j < m; ++j) bt.at(j, i) = b.at(i, j);
    }
    Tensor64 got_nt({n, m});
    kern::mm_nt_acc(a.data(), bt.data(), got_nt.data(), n, k, m);
    for (size_t i = 0; i < want.size(); ++i) {
      REQUIRE(got_nt[i] == Catch::Approx(want[i]).margin(1e-12));
    }

    // tn: feed a transposed.
    Tensor64 at({k, n});
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < k; ++j) at.at(j, i) = a.at(i, j);
    }
    Tensor64 got_tn({n, m});
    kern::mm_tn_acc(at.data(), b.data(), got_tn.data(), k, n, m);
    for (size_t i = 0; i < want.size(); ++i) {
      REQUIRE(got_tn[i] == Catch::Approx(want[i]).margin(1e-12));
    }
  }
}

TEST_CASE("layer_norm matches hand-computed values") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor64({1, 3}, {1.0, 2.0, 3.0}));
  auto gamma = tape.constant(Tensor64::full({3}, 1.0));
  auto beta = tape.constant(Tensor64({3}));
  auto y = ag::layer_norm(x, gamma, beta, 0.0);
  // mean 2, population variance 2/3
  const double inv = 1.0 / std::sqrt(2.0 / 3.0);
  REQUIRE(tape.value(y)[0] == Catch::Approx(-inv).epsilon(1e-12));
  REQUIRE(tape.value(y)[1] == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(tape.value(y)[2] == Catch::Approx(inv).epsilon(1e-12));
}

TEST_CASE("layer_norm: constant row maps to zeros") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor64::full({2, 4}, 3.25));
  auto gamma = tape.constant(Tensor64::full({4}, 1.0));
  auto beta = tape.constant(Tensor64({4}));
  auto y = ag::layer_norm(x, gamma, beta, 1e-5);
  for (size_t i = 0; i < 8; ++i) {
    REQUIRE(tape.value(y)[i] == Catch::Approx(0.0).margin(1e-9));
  }
}

TEST_CASE("layer_norm is invariant to constant shifts") {
  Rng rng(7);
  Tensor64 base = random_tensor({3, 5}, rng);
  for (double c : {0.5, -2.0, 10.0}) {
    Tape<double> tape;
    auto gamma = tape.constant(Tensor64::full({5}, 1.0));
    auto beta = tape.constant(Tensor64({5}));
    auto x0 = tape.leaf(base);
    Tensor64 shifted = base;
    for (size_t i = 0; i < shifted.size(); ++i) shifted[i] += c;
    auto x1 = tape.leaf(shifted);
    auto y0 = ag::layer_norm(x0, gamma, beta, 1e-5);
    auto y1 = ag::layer_norm(x1, gamma, beta, 1e-5);
    for (size_t i = 0; i < base.size(); ++i) {
      REQUIRE(tape.value(y0)[i] ==
              Catch::Approx(tape.value(y1)[i]).margin(1e-6));
    }
  }
}

TEST_CASE("layer_norm rejects empty last axis") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor64({2, 0}));
  auto gamma = tape.constant(Tensor64({0}));
  auto beta = tape.constant(Tensor64({0}));
  REQUIRE_THROWS_AS(ag::layer_norm(x, gamma, beta, 1e-5), ConfigError);
}

TEST_CASE("softmax rows sum to one and survive huge logits") {
  Rng rng(3);
  Tape<double> tape;
  Tensor64 logits = random_tensor({6, 9}, rng, 1.0);
  logits[3] = 1e4;
  logits[10] = -1e4;
  auto y = ag::softmax_lastdim(tape.leaf(logits));
  const auto& yv = tape.value(y);
  REQUIRE(yv.all_finite());
  for (size_t r = 0; r < 6; ++r) {
    double sum = 0;
    for (size_t j = 0; j < 9; ++j) sum += yv[r * 9 + j];
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("cross entropy on uniform logits equals ln(V)") {
  Tape<double> tape;
  auto z = tape.leaf(Tensor64({4, 7}));
  auto loss = ag::cross_entropy_mean(z, {0, 3, 6, 2});
  REQUIRE(tape.value(loss)[0] == Catch::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy saturates for a dominant target logit") {
  Tape<double> tape;
  Tensor64 z({1, 5});
  z[2] = 30.0;
  auto loss = ag::cross_entropy_mean(tape.leaf(z), {2});
  REQUIRE(tape.value(loss)[0] < 1e-9);
  REQUIRE(tape.value(loss)[0] >= 0.0);
}

TEST_CASE("cross entropy rejects out-of-range targets") {
  Tape<double> tape;
  auto z = tape.leaf(Tensor64({2, 3}));
  REQUIRE_THROWS_AS(ag::cross_entropy_sum(z, {0, 3}), ConfigError);
  REQUIRE_THROWS_AS(ag::cross_entropy_sum(z, {-1, 0}), ConfigError);
}

TEST_CASE("gradient check: linear function is exact") {
  Rng rng(5);
  auto f = [](Tape<double>& tape, const std::vector<Var<double>>& p) {
    return ag::sum_all(ag::scale(p[0], 3.0));
  };
  auto report = gradient_check(f, {random_tensor({4, 3}, rng)});
  REQUIRE(report.max_rel_error < 1e-9);
}

TEST_CASE("gradient check: every primitive") {
  Rng rng(17);

  SECTION("add/mul/scale/add_bias") {
    auto f = [](Tape<double>& tape, const std::vector<Var<double>>& p) {
      auto s = ag::add(p[0], p[1]);
      auto m = ag::mul(s, p[0]);
      auto b = ag::add_bias(m, p[2]);
      return ag::sum_all(ag::scale(b, 0.5));
    };
    auto report = gradient_check(
        f, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng),
            random_tensor({4}, rng)});
    REQUIRE(report.max_rel_error < 1e-4);
  }

  SECTION("matmul and matmul_nt") {
    auto f = [](Tape<double>& tape, const std::vector<Var<double>>& p) {
      auto y = ag::matmul(p[0], p[1]);
      auto z = ag::matmul_nt(y, p[2]);
      return ag::sum_all(ag::mul(z, z));
    };
    auto report = gradient_check(
        f, {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng),
            random_tensor({6, 5}, rng)});
    REQUIRE(report.max_rel_error < 1e-4);
  }

  SECTION("bmm, bmm_nt, split/merge heads") {
    auto f = [](Tape<double>& tape, const std::vector<Var<double>>& p) {
      auto q = ag::split_heads(p[0], 2);
      auto k = ag::split_heads(p[1], 2);
      auto v = ag::split_heads(p[2], 2);
      auto scores = ag::scale(ag::bmm_nt(q, k), 0.7);
      auto probs = ag::softmax_lastdim(scores);
      auto ctx = ag::merge_heads(ag::bmm(probs, v));
      return ag::sum_all(ag::mul(ctx, ctx));
    };
    auto report = gradient_check(
        f, {random_tensor({5, 6}, rng), random_tensor({5, 6}, rng),
            random_tensor({5, 6}, rng)});
    REQUIRE(report.max_rel_error < 1e-4);
  }

  SECTION("layer_norm") {
    auto f = [](Tape<double>& tape, const std::vector<Var<double>>& p) {
      auto y = ag::layer_norm(p[0], p[1], p[2], 1e-5);
      return ag::sum_all(ag::mul(y, y));
    };
    auto report = gradient_check(
        f, {random_tensor({4, 6}, rng), random_tensor({6}, rng),
            random_tensor({6}, rng)});
    REQUIRE(report.max_rel_error < 1e-4);
  }

  SECTION("gelu") {
    auto f = [](Tape<double>& tape, const std::vector<Var<double>>& p) {
      return ag::sum_all(ag::gelu(p[0]));
    };
    auto report = gradient_check(f, {random_tensor({5, 5}, rng, 2.0)});
    REQUIRE(report.max_rel_error < 1e-4);
  }

  SECTION("embedding and gather_rows") {
    auto f = [](Tape<double>& tape, const std::vector<Var<double>>& p) {
      auto e = ag::embedding(p[0], {0, 2, 2, 1});
      auto g = ag::gather_rows(e, {1, 3});
      return ag::sum_all(ag::mul(g, g));
    };
    auto report = gradient_check(f, {random_tensor({4, 3}, rng)});
    REQUIRE(report.max_rel_error < 1e-4);
  }

  SECTION("softmax cross entropy") {
    auto f = [](Tape<double>& tape, const std::vector<Var<double>>& p) {
      return ag::cross_entropy_mean(p[0], {1, 0, 4});
    };
    auto report = gradient_check(f, {random_tensor({3, 5}, rng, 2.0)});
    REQUIRE(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("embedding rejects out-of-range ids") {
  Tape<double> tape;
  auto table = tape.leaf(Tensor64({3, 2}));
  REQUIRE_THROWS_AS(ag::embedding(table, {0, 3}), ConfigError);
  REQUIRE_THROWS_AS(ag::embedding(table, {-1}), ConfigError);
}

TEST_CASE("forward evaluation is deterministic") {
  Rng rng(29);
  Tensor64 a = random_tensor({4, 4}, rng);
  Tensor64 b = random_tensor({4, 4}, rng);
  auto run = [&] {
    Tape<double> tape;
    auto y = ag::softmax_lastdim(
        ag::matmul(tape.leaf(a, true), tape.leaf(b, true)));
    auto loss = ag::sum_all(ag::mul(y, y));
    tape.backward(loss);
    return std::make_pair(tape.value(loss)[0],
                          tape.grad(Var<double>{&tape, 0}));
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  REQUIRE(l1 == l2);
  for (size_t i = 0; i < g1.size(); ++i) REQUIRE(g1[i] == g2[i]);
}

TEST_CASE("adam: zero gradient leaves fresh parameters unchanged") {
  Adam<double> adam({.lr = 0.1});
  Tensor64 p({3}, {1.0, -2.0, 0.5});
  Tensor64 before = p;
  adam.begin_step();
  adam.update("p", p, Tensor64({3}));
  REQUIRE(adam.step_count() == 1);
  for (size_t i = 0; i < 3; ++i) REQUIRE(p[i] == before[i]);
}

TEST_CASE("adam: first-step update magnitude is about lr") {
  Adam<double> adam({.lr = 0.05});
  Tensor64 p({2}, {0.0, 0.0});
  Tensor64 g({2}, {0.3, -7.0});
  adam.begin_step();
  adam.update("p", p, g);
  REQUIRE(p[0] == Catch::Approx(-0.05).epsilon(1e-6));
  REQUIRE(p[1] == Catch::Approx(0.05).epsilon(1e-6));
}

TEST_CASE("adam: two-step scalar trajectory matches the recurrence") {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8, g = 1.0;
  // Independent recurrence, evaluated step by step.
  double m = 0, v = 0, theta_ref = 0.7;
  std::vector<double> want;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, t));
    const double vhat = v / (1 - std::pow(b2, t));
    theta_ref -= lr * mhat / (std::sqrt(vhat) + eps);
    want.push_back(theta_ref);
  }

  Adam<double> adam({.lr = lr, .beta1 = b1, .beta2 = b2, .eps = eps});
  Tensor64 p({1}, {0.7});
  for (int t = 0; t < 2; ++t) {
    adam.begin_step();
    adam.update("p", p, Tensor64({1}, {g}));
    REQUIRE(p[0] == Catch::Approx(want[t]).epsilon(1e-12));
  }
}

TEST_CASE("adam rejects non-finite gradients, naming the parameter") {
  Adam<double> adam;
  Tensor64 p({2});
  Tensor64 g({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  adam.begin_step();
  REQUIRE_THROWS_WITH(adam.update("encoder.wq", p, g),
                      Catch::Matchers::ContainsSubstring("encoder.wq"));
}

TEST_CASE("warmup/decay schedule shape") {
  const size_t total = 100;
  REQUIRE(warmup_decay_scale(0, total, 0.1) == Catch::Approx(0.1));
  REQUIRE(warmup_decay_scale(9, total, 0.1) == Catch::Approx(1.0));
  REQUIRE(warmup_decay_scale(10, total, 0.1) == Catch::Approx(1.0));
  REQUIRE(warmup_decay_scale(99, total, 0.1) ==
          Catch::Approx(1.0 / 90.0).epsilon(1e-9));
  for (size_t s = 1; s < total; ++s) {
    REQUIRE(warmup_decay_scale(s, total, 0.1) > 0.0);
  }
}
