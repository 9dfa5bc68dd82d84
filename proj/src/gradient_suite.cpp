#include "mtts/gradient_suite.hpp"

#include "mtts/ops.hpp"
#include "mtts/rng.hpp"

namespace mtts {

namespace {

std::size_t dim_in(SeededRng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

Tensor random_tensor(SeededRng& rng, Shape shape, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from 0 so relu/log kinks stay outside the FD stencil.
Tensor away_from_zero(SeededRng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor weighted_sum(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

}  // namespace

std::vector<OpCheck> check_primitives(std::uint64_t seed, double tol) {
  SeededRng rng(seed);
  std::vector<OpCheck> out;
  auto check = [&](const std::string& name, const ScalarFn& f, const std::vector<Tensor>& inputs,
                   double expected_scale = 1.0) {
    out.push_back({name, grad_check(f, inputs, tol, 1e-5, expected_scale)});
  };

  const std::size_t b = dim_in(rng, 1, 3), m = dim_in(rng, 1, 4), n = dim_in(rng, 1, 4), k = dim_in(rng, 1, 4);

  {
    Tensor x = random_tensor(rng, {b, m}), y = random_tensor(rng, {b, m}), row = random_tensor(rng, {m});
    Tensor w = random_tensor(rng, {b, m}, 1.0, false);
    check("add", [w](const auto& in) { return weighted_sum(add(in[0], in[1]), w); }, {x, y});
    check("add_broadcast", [w](const auto& in) { return weighted_sum(add(in[0], in[1]), w); }, {x, row});
    check("sub", [w](const auto& in) { return weighted_sum(sub(in[0], in[1]), w); }, {x, y});
    check("mul", [w](const auto& in) { return weighted_sum(mul(in[0], in[1]), w); }, {x, y});
    check("mul_broadcast", [w](const auto& in) { return weighted_sum(mul(in[1], in[0]), w); }, {x, row});
  }
  {
    Tensor a = random_tensor(rng, {m, k}), c = random_tensor(rng, {k, n});
    Tensor w = random_tensor(rng, {m, n}, 1.0, false);
    check("matmul", [w](const auto& in) { return weighted_sum(matmul(in[0], in[1]), w); }, {a, c});
    Tensor ba = random_tensor(rng, {b, m, k}), bc = random_tensor(rng, {b, k, n});
    Tensor bw = random_tensor(rng, {b, m, n}, 1.0, false);
    check("bmm", [bw](const auto& in) { return weighted_sum(bmm(in[0], in[1]), bw); }, {ba, bc});
  }
  {
    Tensor x = random_tensor(rng, {b, m}), y = random_tensor(rng, {b, n});
    Tensor w = random_tensor(rng, {b, m + n}, 1.0, false);
    check("concat", [w](const auto& in) { return weighted_sum(concat({in[0], in[1]}, 1), w); }, {x, y});
    Tensor z = random_tensor(rng, {b, m + n});
    Tensor ws = random_tensor(rng, {b, n}, 1.0, false);
    const std::size_t start = m;
    check("slice", [ws, start, n](const auto& in) { return weighted_sum(slice(in[0], 1, start, n), ws); }, {z});
    Tensor r = random_tensor(rng, {b, m, n});
    Tensor wr = random_tensor(rng, {b, n, m}, 1.0, false);
    check("swap_last_axes", [wr](const auto& in) { return weighted_sum(swap_last_axes(in[0]), wr); }, {r});
    Tensor wre = random_tensor(rng, {b * m * n}, 1.0, false);
    check("reshape", [wre](const auto& in) { return weighted_sum(reshape(in[0], {in[0].numel()}), wre); }, {r});
    Tensor e = random_tensor(rng, {b, m});
    Tensor we = random_tensor(rng, {b, k, m}, 1.0, false);
    check("expand_time", [we, k](const auto& in) { return weighted_sum(expand_time(in[0], k), we); }, {e});
  }
  {
    Tensor x = random_tensor(rng, {b, m}, 2.0);
    Tensor w = random_tensor(rng, {b, m}, 1.0, false);
    check("sigmoid", [w](const auto& in) { return weighted_sum(sigmoid(in[0]), w); }, {x});
    check("tanh", [w](const auto& in) { return weighted_sum(tanh(in[0]), w); }, {x});
    check("exp", [w](const auto& in) { return weighted_sum(exp(in[0]), w); }, {x});
    Tensor xr = away_from_zero(rng, {b, m}, 0.1, 2.0);
    check("relu", [w](const auto& in) { return weighted_sum(relu(in[0]), w); }, {xr});
    Tensor xp = random_tensor(rng, {b, m}, 1.0);
    for (auto& v : xp.mutable_data()) v = std::abs(v) + 0.2;
    check("log", [w](const auto& in) { return weighted_sum(log(in[0]), w); }, {xp});
    check("scale", [w](const auto& in) { return weighted_sum(scale(in[0], -1.7), w); }, {x});
  }
  {
    Tensor x = random_tensor(rng, {b, m, n}, 2.0);
    Tensor w = random_tensor(rng, {b, m, n}, 1.0, false);
    check("softmax", [w](const auto& in) { return weighted_sum(softmax(in[0], 1), w); }, {x});
    Tensor x2 = random_tensor(rng, {b, n + 1}, 2.0);
    std::vector<double> mv(b * (n + 1), 1.0);
    for (std::size_t i = 0; i < b; ++i) mv[i * (n + 1) + n] = 0.0;  // last position padded
    Tensor mask = Tensor::from({b, n + 1}, mv);
    Tensor w2 = random_tensor(rng, {b, n + 1}, 1.0, false);
    check("masked_softmax", [w2, mask](const auto& in) { return weighted_sum(masked_softmax(in[0], mask), w2); }, {x2});
  }
  {
    Tensor table = random_tensor(rng, {5, m});
    std::vector<int> ids;
    for (std::size_t i = 0; i < 2 * b; ++i) ids.push_back(static_cast<int>(rng.below(5)));
    Tensor w = random_tensor(rng, {ids.size(), m}, 1.0, false);
    check("embedding_lookup", [w, ids](const auto& in) { return weighted_sum(embedding_lookup(in[0], ids), w); },
          {table});
  }
  {
    Tensor x = random_tensor(rng, {b, m});
    check("sum", [](const auto& in) { return sum(in[0]); }, {x});
    check("mean", [](const auto& in) { return mean(in[0]); }, {x});
    Tensor p = random_tensor(rng, {b, m, n}), t = random_tensor(rng, {b, m, n});
    check("mse_loss", [](const auto& in) { return mse_loss(in[0], in[1]); }, {p, t});
    std::vector<double> mv(b * m, 1.0);
    mv[0] = 0.0;
    if (mv.size() > 1) mv.back() = 0.5;
    if (b * m == 1) mv[0] = 1.0;
    Tensor mask = Tensor::from({b, m}, mv);
    check("masked_mse_loss", [mask](const auto& in) { return masked_mse_loss(in[0], in[1], mask); }, {p, t});
    Tensor logits = random_tensor(rng, {b, m}, 3.0);
    std::vector<double> yv(b * m);
    for (auto& y : yv) y = rng.bernoulli(0.3) ? 1.0 : 0.0;
    Tensor targets = Tensor::from({b, m}, yv);
    check("binary_cross_entropy",
          [targets, mask](const auto& in) { return binary_cross_entropy(in[0], targets, mask, 5.0); }, {logits});
    const std::size_t classes = dim_in(rng, 2, 5);
    Tensor cl = random_tensor(rng, {b * 2, classes}, 2.0);
    std::vector<int> labels;
    for (std::size_t i = 0; i < b * 2; ++i) labels.push_back(static_cast<int>(rng.below(classes)));
    std::vector<double> rmask(b * 2, 1.0);
    rmask.back() = 0.0;
    check("cross_entropy_with_logits",
          [labels, rmask](const auto& in) { return cross_entropy_with_logits(in[0], labels, rmask); }, {cl});
  }
  {
    Tensor x = random_tensor(rng, {b, m});
    Tensor w = random_tensor(rng, {b, m}, 1.0, false);
    const double lambda = rng.uniform(0.0, 2.0);
    check("gradient_reverse", [w, lambda](const auto& in) { return weighted_sum(gradient_reverse(in[0], lambda), w); },
          {x}, -lambda);
    check("clamp_gradient", [w](const auto& in) { return weighted_sum(clamp_gradient(in[0], 10.0), w); }, {x});
  }
  {
    const std::size_t steps = dim_in(rng, 1, 5), width = dim_in(rng, 1, 4);
    Tensor keys = random_tensor(rng, {b, steps, width}), loc = random_tensor(rng, {b, steps, width});
    Tensor q = random_tensor(rng, {b, width}), v = random_tensor(rng, {width, 1});
    Tensor w = random_tensor(rng, {b, steps}, 1.0, false);
    check("additive_energies",
          [w](const auto& in) { return weighted_sum(additive_energies(in[0], in[1], in[2], in[3]), w); },
          {keys, q, loc, v});
  }
  {
    const std::size_t groups = dim_in(rng, 1, 3), cin = groups * dim_in(rng, 1, 2), cout = groups * dim_in(rng, 1, 2);
    const std::size_t ks = 2 * dim_in(rng, 0, 2) + 1, steps = dim_in(rng, 3, 6);
    Tensor x = random_tensor(rng, {b, cin, steps});
    Tensor wt = random_tensor(rng, {cout, cin / groups, ks});
    Tensor bias = random_tensor(rng, {cout});
    Tensor w = random_tensor(rng, {b, cout, steps}, 1.0, false);
    check("conv1d_grouped",
          [w, groups](const auto& in) { return weighted_sum(conv1d_grouped(in[0], in[1], in[2], groups), w); },
          {x, wt, bias});

    std::vector<double> mv(b * groups * steps, 1.0);
    for (std::size_t i = 0; i < b * groups; ++i) mv[i * steps + steps - 1] = 0.0;
    Tensor tmask = Tensor::from({b, groups, steps}, mv);
    Tensor wm = random_tensor(rng, {b, cin, steps}, 1.0, false);
    check("apply_time_mask", [wm, tmask](const auto& in) { return weighted_sum(apply_time_mask(in[0], tmask), wm); },
          {x});

    Tensor gamma = random_tensor(rng, {cin}), beta = random_tensor(rng, {cin});
    check("batch_norm_1d_train",
          [wm, tmask](const auto& in) {
            BatchNormState state(in[0].dim(1));
            return weighted_sum(batch_norm_1d(in[0], in[1], in[2], state, Mode::Train, tmask), wm);
          },
          {x, gamma, beta});
    check("batch_norm_1d_eval",
          [wm](const auto& in) {
            BatchNormState state(in[0].dim(1));
            for (std::size_t c = 0; c < state.channels(); ++c) {
              state.running_mean[c] = 0.1 * static_cast<double>(c);
              state.running_var[c] = 0.5 + 0.2 * static_cast<double>(c);
              state.updates[c] = 1;
            }
            return weighted_sum(batch_norm_1d(in[0], in[1], in[2], state, Mode::Eval), wm);
          },
          {x, gamma, beta});
    const std::uint64_t mask_seed = rng.next_u64();
    check("dropout",
          [wm, mask_seed](const auto& in) {
            SeededRng r(mask_seed);
            return weighted_sum(dropout(in[0], 0.3, r, Mode::Train), wm);
          },
          {x});
  }
  {
    const std::size_t in_dim = dim_in(rng, 1, 4), hidden = dim_in(rng, 1, 4);
    Tensor x = random_tensor(rng, {b, in_dim}), h = random_tensor(rng, {b, hidden}), c = random_tensor(rng, {b, hidden});
    Tensor wi = random_tensor(rng, {in_dim, 4 * hidden}), wh = random_tensor(rng, {hidden, 4 * hidden});
    Tensor bias = random_tensor(rng, {4 * hidden});
    Tensor w1 = random_tensor(rng, {b, hidden}, 1.0, false), w2 = random_tensor(rng, {b, hidden}, 1.0, false);
    check("lstm_cell",
          [w1, w2](const auto& in) {
            auto [hn, cn] = lstm_cell(in[0], in[1], in[2], LstmWeights{in[3], in[4], in[5]});
            return add(weighted_sum(hn, w1), weighted_sum(cn, w2));
          },
          {x, h, c, wi, wh, bias});
  }
  return out;
}

}  // namespace mtts
