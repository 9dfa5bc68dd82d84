#include <cmath>
#include <numeric>

#include "doctest.h"
#include "mtts/errors.hpp"
#include "mtts/grad_check.hpp"
#include "mtts/gradient_suite.hpp"
#include "mtts/ops.hpp"

using namespace mtts;

namespace {

Tensor random_tensor(SeededRng& rng, Shape shape, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Direct summation over an explicitly zero-padded input; independent of conv1d_grouped.
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t groups) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), T = x.dim(2), Co = w.dim(0), K = w.dim(2);
  const std::size_t pad = (K - 1) / 2, cig = Ci / groups, cog = Co / groups;
  std::vector<double> padded(B * Ci * (T + 2 * pad), 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < Ci; ++c)
      for (std::size_t t = 0; t < T; ++t) padded[(b * Ci + c) * (T + 2 * pad) + t + pad] = x.data()[(b * Ci + c) * T + t];
  std::vector<double> y(B * Co * T, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t t = 0; t < T; ++t) {
        double s = bias.defined() ? bias.data()[o] : 0.0;
        for (std::size_t i = 0; i < cig; ++i)
          for (std::size_t k = 0; k < K; ++k)
            s += w.data()[(o * cig + i) * K + k] * padded[(b * Ci + (o / cog) * cig + i) * (T + 2 * pad) + t + k];
        y[(b * Co + o) * T + t] = s;
      }
  return y;
}

}  // namespace

TEST_CASE("matmul, softmax and cross-entropy hand values") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c[0] == 3.0);
  CHECK(c[1] == 7.0);

  Tensor s = softmax(Tensor::from({2}, {0, 0}), 0);
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));

  for (int classes : {2, 5, 17}) {
    Tensor logits = Tensor::full({1, static_cast<std::size_t>(classes)}, 0.3);
    std::vector<int> label{classes - 1};
    CHECK(cross_entropy_with_logits(logits, label).item() == doctest::Approx(std::log(classes)).epsilon(1e-14));
  }
}

TEST_CASE("shape mismatch names the op and both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  try {
    add(a, b);
    FAIL("expected ContractViolation");
  } catch (const ContractViolation& e) {
    std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, a), ContractViolation);
  // broadcasting only over a leading axis
  CHECK_NOTHROW(add(a, Tensor::zeros({3})));
  CHECK_THROWS_AS(add(a, Tensor::zeros({2})), ContractViolation);
  CHECK_THROWS_AS(log(Tensor::from({2}, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(exp(Tensor::from({1}, {1000.0})), DomainError);
}

TEST_CASE("conv1d_grouped matches direct summation") {
  Tensor x = Tensor::from({1, 1, 3}, {1, 2, 3});
  Tensor w = Tensor::from({1, 1, 3}, {1, 0, -1});
  Tensor y = conv1d_grouped(x, w, Tensor::zeros({1}), 1);
  CHECK(y.values() == std::vector<double>{-2, -2, 2});
  CHECK(conv_oracle(x, w, Tensor::zeros({1}), 1) == std::vector<double>{-2, -2, 2});

  SeededRng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t groups = 1 + rng.below(3), ci = groups * (1 + rng.below(3)), co = groups * (1 + rng.below(3));
    const std::size_t k = 2 * rng.below(3) + 1, T = 1 + rng.below(7), B = 1 + rng.below(3);
    Tensor xi = random_tensor(rng, {B, ci, T});
    Tensor wi = random_tensor(rng, {co, ci / groups, k});
    Tensor bi = random_tensor(rng, {co});
    Tensor yi = conv1d_grouped(xi, wi, bi, groups);
    auto expect = conv_oracle(xi, wi, bi, groups);
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(yi[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("grouped convolution equals independent per-group runs") {
  SeededRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t G = 1 + rng.below(4), cig = 1 + rng.below(3), cog = 1 + rng.below(3);
    const std::size_t B = 1 + rng.below(3), T = 1 + rng.below(8), k = 2 * rng.below(3) + 1;
    Tensor x = random_tensor(rng, {B, G * cig, T});
    Tensor w = random_tensor(rng, {G * cog, cig, k});
    Tensor bias = random_tensor(rng, {G * cog});
    Tensor grouped = conv1d_grouped(x, w, bias, G);

    std::vector<Tensor> parts;
    for (std::size_t g = 0; g < G; ++g) {
      parts.push_back(conv1d_grouped(slice(x, 1, g * cig, cig), slice(w, 0, g * cog, cog), slice(bias, 0, g * cog, cog), 1));
    }
    Tensor sequential = concat(parts, 1);
    for (std::size_t i = 0; i < grouped.numel(); ++i) CHECK(std::abs(grouped[i] - sequential[i]) <= 1e-12);

    // the same computation as a dense convolution with zero cross-group blocks
    std::vector<double> dense(G * cog * G * cig * k, 0.0);
    for (std::size_t o = 0; o < G * cog; ++o)
      for (std::size_t i = 0; i < cig; ++i)
        for (std::size_t kk = 0; kk < k; ++kk)
          dense[(o * G * cig + (o / cog) * cig + i) * k + kk] = w[(o * cig + i) * k + kk];
    Tensor full = conv1d_grouped(x, Tensor::from({G * cog, G * cig, k}, dense), bias, 1);
    for (std::size_t i = 0; i < grouped.numel(); ++i) CHECK(std::abs(grouped[i] - full[i]) <= 1e-12);
  }
  CHECK_THROWS_AS(conv1d_grouped(Tensor::zeros({1, 3, 4}), Tensor::zeros({2, 1, 3}), Tensor(), 2), ConfigError);
  CHECK_THROWS_AS(conv1d_grouped(Tensor::zeros({1, 2, 4}), Tensor::zeros({2, 2, 2}), Tensor(), 1), ConfigError);
}

TEST_CASE("tanh and sigmoid agree with libm to about one ulp of 1") {
  std::vector<double> xs{0.0, -0.0, 1e-300, -1e-12, 0.0624999, 0.0625, -0.0625, 0.5, -3.0, 19.0, -40.0, 400.0, -800.0};
  SeededRng rng(4);
  for (int i = 0; i < 2000; ++i) xs.push_back(rng.uniform(-8.0, 8.0) * std::pow(10.0, rng.uniform(-6.0, 0.0)));
  Tensor x = Tensor::from({xs.size()}, xs);
  Tensor t = tanh(x), s = sigmoid(x);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double rt = std::tanh(xs[i]), rs = 1.0 / (1.0 + std::exp(-xs[i]));
    CHECK(std::abs(t.data()[i] - rt) <= 2.5e-16 + 8e-16 * std::abs(rt));
    CHECK(std::abs(s.data()[i] - rs) <= 8e-16 * rs + 1e-300);
  }
}

TEST_CASE("additive_energies equals the unfused composition") {
  SeededRng rng(17);
  const std::size_t B = 3, T = 5, A = 4;
  Tensor keys = random_tensor(rng, {B, T, A}, true), loc = random_tensor(rng, {B, T, A}, true);
  Tensor q = random_tensor(rng, {B, A}, true), v = random_tensor(rng, {A, 1}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor fused = additive_energies(keys, q, loc, v);
  Tensor plain = reshape(matmul(reshape(tanh(add(add(keys, expand_time(q, T)), loc)), {B * T, A}), v), {B, T});
  for (std::size_t i = 0; i < B * T; ++i) CHECK(fused.data()[i] == doctest::Approx(plain.data()[i]).epsilon(1e-14));
  CHECK_THROWS_AS(additive_energies(keys, q, loc, Tensor::zeros({A + 1, 1})), ContractViolation);
}

TEST_CASE("batch_norm_1d moments and modes") {
  BatchNormState state(2);
  Tensor gamma = Tensor::full({2}, 1.0), beta = Tensor::zeros({2});
  CHECK_THROWS_AS(batch_norm_1d(Tensor::zeros({1, 2, 4}), gamma, beta, state, Mode::Eval), ContractViolation);

  Tensor constant = Tensor::full({2, 2, 3}, 4.5);
  Tensor z = batch_norm_1d(constant, gamma, beta, state, Mode::Train);
  for (double v : z.data()) CHECK(v == 0.0);

  SeededRng rng(3);
  std::vector<double> v(3 * 2 * 50);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 7.0 + 3.0 * rng.normal();
  Tensor x = Tensor::from({3, 2, 50}, v);
  auto moments = [](const Tensor& y, std::size_t ch) {
    double s = 0, ss = 0, n = 0;
    for (std::size_t b = 0; b < y.dim(0); ++b)
      for (std::size_t t = 0; t < y.dim(2); ++t) {
        double val = y[(b * y.dim(1) + ch) * y.dim(2) + t];
        s += val;
        ss += val * val;
        n += 1;
      }
    const double m = s / n;
    return std::pair{m, std::sqrt(ss / n - m * m)};
  };
  Tensor y = batch_norm_1d(x, gamma, beta, state, Mode::Train);
  for (std::size_t ch = 0; ch < 2; ++ch) {
    auto [m, s] = moments(y, ch);
    CHECK(std::abs(m) < 1e-6);
    // eps = 1e-5 shrinks the std by ~ eps / (2 var)
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
  Tensor y2 = batch_norm_1d(x, Tensor::full({2}, 2.0), Tensor::full({2}, 3.0), state, Mode::Train);
  for (std::size_t ch = 0; ch < 2; ++ch) {
    auto [m, s] = moments(y2, ch);
    CHECK(m == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(s == doctest::Approx(2.0).epsilon(1e-6));
  }
  CHECK(state.updates[0] == 3);
  CHECK_NOTHROW(batch_norm_1d(x, gamma, beta, state, Mode::Eval));
  CHECK_THROWS_AS(batch_norm_1d(Tensor::zeros({1, 2, 1}), gamma, beta, state, Mode::Train), ContractViolation);
}

TEST_CASE("masked batch norm ignores padded positions") {
  SeededRng rng(9);
  Tensor x = random_tensor(rng, {2, 3, 5});
  std::vector<double> mv{1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  Tensor mask = Tensor::from({2, 1, 5}, mv);
  Tensor changed = x.clone();
  changed.mutable_data()[3] = 100.0;  // b=0, ch=0, t=3 is padding
  BatchNormState s1(3), s2(3);
  Tensor g = Tensor::full({3}, 1.0), bt = Tensor::zeros({3});
  Tensor y1 = batch_norm_1d(x, g, bt, s1, Mode::Train, mask);
  Tensor y2 = batch_norm_1d(changed, g, bt, s2, Mode::Train, mask);
  CHECK(y1.values() == y2.values());
  CHECK(y1[3] == 0.0);
}

TEST_CASE("dropout") {
  SeededRng rng(1);
  Tensor ones = Tensor::full({100000}, 1.0);
  CHECK(dropout(ones, 0.0, rng, Mode::Train).values() == ones.values());
  CHECK(dropout(ones, 0.7, rng, Mode::Eval).values() == ones.values());
  Tensor d = dropout(ones, 0.5, rng, Mode::Train);
  const double m = std::accumulate(d.data().begin(), d.data().end(), 0.0) / 100000.0;
  CHECK(m >= 0.98);
  CHECK(m <= 1.02);
  for (double v : d.data()) CHECK((v == 0.0 || v == 2.0));
  CHECK_THROWS_AS(dropout(ones, 1.0, rng, Mode::Train), ConfigError);
}

TEST_CASE("lstm_cell fixed points and saturation") {
  const std::size_t I = 3, H = 4, B = 2;
  LstmWeights zero{Tensor::zeros({I, 4 * H}), Tensor::zeros({H, 4 * H}), Tensor::zeros({4 * H})};
  auto [h0, c0] = lstm_cell(Tensor::zeros({B, I}), Tensor::zeros({B, H}), Tensor::zeros({B, H}), zero);
  for (double v : h0.data()) CHECK(v == 0.0);
  for (double v : c0.data()) CHECK(v == 0.0);

  SeededRng rng(4);
  Tensor x = random_tensor(rng, {B, I}), h = random_tensor(rng, {B, H}), c = random_tensor(rng, {B, H});
  LstmWeights w{random_tensor(rng, {I, 4 * H}), random_tensor(rng, {H, 4 * H}), random_tensor(rng, {4 * H})};
  // forget pre-activation exactly 10: 1 - sigmoid(10) < 4.6e-5 bounds the deviation for |c| <= 1
  for (std::size_t j = 0; j < H; ++j) {
    w.bias.mutable_data()[H + j] = 10.0;
    for (std::size_t r = 0; r < I; ++r) w.input_weight.mutable_data()[r * 4 * H + H + j] = 0.0;
    for (std::size_t r = 0; r < H; ++r) w.hidden_weight.mutable_data()[r * 4 * H + H + j] = 0.0;
  }
  auto [h1, c1] = lstm_cell(x, h, c, w);
  // direct evaluation of i*g with the same weights
  Tensor gates = add(add(matmul(x, w.input_weight), matmul(h, w.hidden_weight)), w.bias);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < H; ++j) {
      const double gi = 1.0 / (1.0 + std::exp(-gates[b * 4 * H + j]));
      const double gg = std::tanh(gates[b * 4 * H + 2 * H + j]);
      CHECK(std::abs(c1[b * H + j] - (c[b * H + j] + gi * gg)) < 1e-4);
    }
  }
  for (int trial = 0; trial < 20; ++trial) {
    Tensor xs = random_tensor(rng, {B, I});
    for (auto& v : xs.mutable_data()) v *= 50.0;
    auto [hs, cs] = lstm_cell(xs, h, c, w);
    for (double v : hs.data()) CHECK((v > -1.0 && v < 1.0));
  }
  CHECK_THROWS_AS(lstm_cell(Tensor::zeros({B, I + 1}), h, c, w), ContractViolation);
}

TEST_CASE("gradient_reverse and backward basics") {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = Tensor::from({2}, {0.2, -0.4}, true);
  Tensor y = gradient_reverse(x, 1.0);
  CHECK(y.values() == std::vector<double>{0.2, -0.4});
  Tensor upstream = Tensor::from({2}, {0.2, -0.4});
  backward(sum(mul(y, upstream)));
  CHECK(x.grad()[0] == doctest::Approx(-0.2));
  CHECK(x.grad()[1] == doctest::Approx(0.4));

  x.zero_grad();
  backward(sum(mul(gradient_reverse(x, 0.0), upstream)));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);

  x.zero_grad();
  backward(sum(gradient_reverse(x, 2.0)));
  CHECK(x.grad()[0] == -2.0);
  CHECK(x.grad()[1] == -2.0);

  Tensor s = Tensor::scalar(3.0, true);
  Tensor loss = mul(s, s);
  backward(loss);
  CHECK(s.grad()[0] == 6.0);
  backward(loss);  // accumulates
  CHECK(s.grad()[0] == 12.0);
  CHECK_THROWS_AS(backward(mul(x, x)), ContractViolation);
}

TEST_CASE("backward visits nodes in strictly decreasing creation order") {
  Tape tape;
  TapeScope scope(tape);
  Tensor a = Tensor::from({3}, {1, 2, 3}, true);
  Tensor b = tanh(a);
  Tensor c = mul(b, a);
  Tensor d = sum(add(c, b));
  backward(d);
  const auto& order = tape.last_visit_order();
  REQUIRE(order.size() == tape.size());
  for (std::size_t i = 1; i < order.size(); ++i) CHECK(order[i] < order[i - 1]);
}

TEST_CASE("backward is linear in the loss") {
  SeededRng rng(21);
  Tensor x = random_tensor(rng, {1, 2, 6}, true);
  Tensor w = random_tensor(rng, {4, 2, 3}, true);
  Tensor y1 = random_tensor(rng, {1, 4, 6}), y2 = random_tensor(rng, {1, 4, 6});
  auto grads = [&](double a, double b) {
    x.zero_grad();
    w.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor out = conv1d_grouped(x, w, Tensor(), 1);
    Tensor l1 = mse_loss(tanh(out), y1);
    Tensor l2 = mse_loss(sigmoid(out), y2);
    backward(add(scale(l1, a), scale(l2, b)));
    std::vector<double> g(x.grad().begin(), x.grad().end());
    g.insert(g.end(), w.grad().begin(), w.grad().end());
    return g;
  };
  auto g1 = grads(1, 0), g2 = grads(0, 1), g = grads(0.7, -1.3);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - (0.7 * g1[i] - 1.3 * g2[i])) <= 1e-10);
}

TEST_CASE("conv1d gradients match finite differences through mse") {
  SeededRng rng(8);
  Tensor x = random_tensor(rng, {2, 4, 7}, true);
  Tensor w = random_tensor(rng, {6, 2, 5}, true);
  Tensor y = random_tensor(rng, {2, 6, 7});
  auto report = grad_check([y](const auto& in) { return mse_loss(conv1d_grouped(in[0], in[1], Tensor(), 2), y); },
                           {x, w}, 1e-4);
  CHECK(report.passed);
  CHECK(report.max_rel_error <= 1e-4);
}

TEST_CASE("grad_check positive and negative controls") {
  SeededRng rng(2);
  Tensor x = random_tensor(rng, {3, 4}, true);
  auto ok = grad_check([](const auto& in) { return sum(sigmoid(in[0])); }, {x}, 1e-5);
  CHECK(ok.passed);

  // Square with a deliberately wrong backward rule (missing the factor 2).
  auto broken_square = [](const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.mutable_data()[i] = a[i] * a[i];
    if (detail::should_record({&a})) {
      detail::record(out, [a](const std::vector<double>& g) {
        auto& ga = a.impl()->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * a[i];
      });
    }
    return out;
  };
  auto bad = grad_check([&](const auto& in) { return sum(broken_square(in[0])); }, {x}, 1e-4);
  CHECK_FALSE(bad.passed);
  CHECK_FALSE(bad.numerical_failure);

  Tensor big = Tensor::from({1}, {709.0 - 1e-6}, true);
  auto failing = grad_check([](const auto& in) { return sum(exp(in[0])); }, {big}, 1e-4);
  CHECK(failing.numerical_failure);
  CHECK_FALSE(failing.passed);
}

TEST_CASE("every primitive passes finite differences across 20 seeds") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (const auto& check : check_primitives(seed)) {
      INFO("seed " << seed << " op " << check.op << ": " << check.report.detail);
      CHECK(check.report.passed);
    }
  }
}

TEST_CASE("identical seeds give bit-identical values and gradients") {
  auto run = [] {
    SeededRng rng(77);
    Tensor x = random_tensor(rng, {2, 3, 6}, true);
    Tensor w = random_tensor(rng, {3, 3, 3}, true);
    Tape tape;
    TapeScope scope(tape);
    BatchNormState st(3);
    Tensor y = dropout(relu(batch_norm_1d(conv1d_grouped(x, w, Tensor(), 1), Tensor::full({3}, 1.0),
                                         Tensor::zeros({3}), st, Mode::Train)),
                       0.2, rng, Mode::Train);
    Tensor loss = mean(mul(y, y));
    backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  CHECK(run() == run());
}
