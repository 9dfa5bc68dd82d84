#include "mtts/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>

#include "mtts/errors.hpp"

namespace mtts {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Tensor make_out(Shape shape) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ContractViolation(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                            shape_str(t.shape()));
  }
}

bool is_suffix_shape(const Shape& big, const Shape& small) {
  return small.size() + 1 == big.size() && std::equal(small.begin(), small.end(), big.begin() + 1);
}

enum class Broadcast { None, B, A };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (is_suffix_shape(a.shape(), b.shape())) return Broadcast::B;
  if (is_suffix_shape(b.shape(), a.shape())) return Broadcast::A;
  shape_error(op, a.shape(), b.shape());
}

void accumulate(const Tensor& t, const std::vector<double>& g) {
  auto& dst = t.impl()->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// Shared driver for add/sub/mul with leading-axis broadcasting.
// da(x, y, g) and db(x, y, g) give the local gradient contributions.
template <typename F, typename DA, typename DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const Broadcast kind = broadcast_kind(name, a, b);
  const Shape& out_shape = kind == Broadcast::A ? b.shape() : a.shape();
  Tensor out = make_out(out_shape);
  const std::size_t n = out.numel();
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();
  // Broadcast operands repeat with period na or nb; the loops below walk whole periods.
  for (std::size_t base = 0; base < n; base += std::min(na, nb)) {
    const double* xa = pa + (na == n ? base : 0);
    const double* xb = pb + (nb == n ? base : 0);
    double* y = po + base;
    for (std::size_t i = 0, m = std::min(na, nb); i < m; ++i) y[i] = f(xa[i], xb[i]);
  }

  if (detail::should_record({&a, &b})) {
    detail::record(out, [a, b, da, db, n, na, nb](const std::vector<double>& g) {
      const std::size_t period = std::min(na, nb);
      const double* pa = a.data().data();
      const double* pb = b.data().data();
      double* ga = detail::wants_grad(a) ? a.impl()->ensure_grad().data() : nullptr;
      double* gb = detail::wants_grad(b) ? b.impl()->ensure_grad().data() : nullptr;
      for (std::size_t base = 0; base < n; base += period) {
        const std::size_t oa = na == n ? base : 0, ob = nb == n ? base : 0;
        const double* xa = pa + oa;
        const double* xb = pb + ob;
        const double* gi = g.data() + base;
        if (ga)
          for (std::size_t i = 0; i < period; ++i) ga[oa + i] += da(xa[i], xb[i], gi[i]);
        if (gb)
          for (std::size_t i = 0; i < period; ++i) gb[ob + i] += db(xa[i], xb[i], gi[i]);
      }
    });
  }
  return out;
}

template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F f, DF df_from_xy) {
  Tensor out = make_out(a.shape());
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  const std::size_t n = a.numel();
  if constexpr (std::is_invocable_v<F, const double*, double*, std::size_t>) {
    f(pa, po, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  }
  if (detail::should_record({&a})) {
    // Capturing the output impl by raw pointer avoids a self-reference cycle.
    TensorImpl* yimpl = out.impl();
    detail::record(out, [a, yimpl, df_from_xy, n](const std::vector<double>& g) {
      auto& ga = a.impl()->ensure_grad();
      const double* x = a.data().data();
      const double* yv = yimpl->data.data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * df_from_xy(x[i], yv[i]);
    });
  }
  return out;
}

// Vectorized kernels on top of Eigen's packet exp (about 1 ulp). Inputs are
// staged through fixed-size aligned chunks so every element takes the packet
// path; an unaligned map would send a pointer-dependent head through scalar
// exp and make results depend on allocation addresses.
constexpr std::size_t kChunk = 64;
using Chunk = Eigen::Array<double, kChunk, 1>;

template <typename F>
void chunked(const double* x, double* y, std::size_t n, F f) {
  alignas(64) double in[kChunk];
  alignas(64) double out[kChunk];
  for (std::size_t i = 0; i < n; i += kChunk) {
    const std::size_t m = std::min(kChunk, n - i);
    std::copy_n(x + i, m, in);
    std::fill(in + m, in + kChunk, 0.0);
    f(Eigen::Map<const Chunk, Eigen::Aligned64>(in), Eigen::Map<Chunk, Eigen::Aligned64>(out));
    std::copy_n(out, m, y + i);
  }
}

// For |x| below kTanhSeriesBound tanh uses its odd Taylor series; above it
// 1 - 2/(e^{2|x|} + 1) loses at most about one ulp of 1 to cancellation.
constexpr double kTanhSeriesBound = 0.0625;

void tanh_into(const double* x, double* y, std::size_t n) {
  chunked(x, y, n, [](const auto& in, auto out) {
    const Chunk ax = in.abs();
    const Chunk far = in.sign() * (1.0 - 2.0 / ((2.0 * ax).exp() + 1.0));
    const Chunk x2 = in.square();
    // Coefficients of x^(2k+1), k = 0..5; the next term is below 1e-16 relative.
    const Chunk near = in * (1.0 + x2 * (-1.0 / 3 + x2 * (2.0 / 15 + x2 * (-17.0 / 315 + x2 * (62.0 / 2835 +
                                                                                             x2 * (-1382.0 / 155925))))));
    out = (ax < kTanhSeriesBound).select(near, far);
  });
}

void sigmoid_into(const double* x, double* y, std::size_t n) {
  chunked(x, y, n, [](const auto& in, auto out) { out = 1.0 / (1.0 + (-in).exp()); });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor scale(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Tensor out = make_out({a.dim(0), b.dim(1)});
  MutMap(out.mutable_data().data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  if (detail::should_record({&a, &b})) {
    detail::record(out, [a, b, m, k, n](const std::vector<double>& g) {
      ConstMap gm(g.data(), m, n);
      if (detail::wants_grad(a)) {
        MutMap(a.impl()->ensure_grad().data(), m, k).noalias() += gm * ConstMap(b.data().data(), k, n).transpose();
      }
      if (detail::wants_grad(b)) {
        MutMap(b.impl()->ensure_grad().data(), k, n).noalias() += ConstMap(a.data().data(), m, k).transpose() * gm;
      }
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) shape_error("bmm", a.shape(), b.shape());
  const std::size_t batch = a.dim(0);
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto n = static_cast<Eigen::Index>(b.dim(2));
  Tensor out = make_out({batch, a.dim(1), b.dim(2)});
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out.mutable_data().data() + i * m * n, m, n).noalias() =
        ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * k * n, k, n);
  }
  if (detail::should_record({&a, &b})) {
    detail::record(out, [a, b, batch, m, k, n](const std::vector<double>& g) {
      double* ga = detail::wants_grad(a) ? a.impl()->ensure_grad().data() : nullptr;
      double* gb = detail::wants_grad(b) ? b.impl()->ensure_grad().data() : nullptr;
      for (std::size_t i = 0; i < batch; ++i) {
        ConstMap gm(g.data() + i * m * n, m, n);
        if (ga) MutMap(ga + i * m * k, m, k).noalias() += gm * ConstMap(b.data().data() + i * k * n, k, n).transpose();
        if (gb) MutMap(gb + i * k * n, k, n).noalias() += ConstMap(a.data().data() + i * m * k, m, k).transpose() * gm;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  Tensor y = matmul(x, w);
  return bias.defined() ? add(y, bias) : y;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractViolation("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ContractViolation("concat: axis out of range for shape " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_error("concat", first, s);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) shape_error("concat", first, s);
    }
    out_shape[axis] += s[axis];
  }
  const AxisSplit split = split_at(out_shape, axis);
  Tensor out = make_out(out_shape);
  double* po = out.mutable_data().data();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t run = p.shape()[axis] * split.inner;
    const double* src = p.data().data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src + o * run, run, po + o * split.extent * split.inner + offset);
    }
    offsets.push_back(offset);
    offset += run;
  }
  if (detail::should_record(parts)) {
    detail::record(out, [parts, offsets, split, axis](const std::vector<double>& g) {
      for (std::size_t p = 0; p < parts.size(); ++p) {
        if (!detail::wants_grad(parts[p])) continue;
        const std::size_t run = parts[p].shape()[axis] * split.inner;
        auto& gp = parts[p].impl()->ensure_grad();
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = g.data() + o * split.extent * split.inner + offsets[p];
          double* dst = gp.data() + o * run;
          for (std::size_t i = 0; i < run; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank() || start + length > a.shape()[axis]) {
    throw ContractViolation("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                            ") on axis " + std::to_string(axis) + " out of bounds for shape " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const AxisSplit split = split_at(a.shape(), axis);
  Tensor out = make_out(out_shape);
  const std::size_t run = length * split.inner;
  const std::size_t src_stride = split.extent * split.inner;
  const std::size_t off = start * split.inner;
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(a.data().data() + o * src_stride + off, run, out.mutable_data().data() + o * run);
  }
  if (detail::should_record({&a})) {
    detail::record(out, [a, split, run, src_stride, off](const std::vector<double>& g) {
      auto& ga = a.impl()->ensure_grad();
      for (std::size_t o = 0; o < split.outer; ++o) {
        double* dst = ga.data() + o * src_stride + off;
        const double* src = g.data() + o * run;
        for (std::size_t i = 0; i < run; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  Tensor out = make_out(std::move(shape));
  std::copy(a.data().begin(), a.data().end(), out.mutable_data().begin());
  if (detail::should_record({&a})) {
    detail::record(out, [a](const std::vector<double>& g) { accumulate(a, g); });
  }
  return out;
}

Tensor swap_last_axes(const Tensor& a) {
  if (a.rank() < 2) throw ContractViolation("swap_last_axes: rank < 2 for shape " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  const std::size_t r = a.rank();
  const std::size_t m = out_shape[r - 2], n = out_shape[r - 1];
  std::swap(out_shape[r - 2], out_shape[r - 1]);
  const std::size_t batch = a.numel() / std::max<std::size_t>(m * n, 1);
  Tensor out = make_out(out_shape);
  const double* src = a.data().data();
  double* dst = out.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) dst[b * m * n + j * m + i] = src[b * m * n + i * n + j];
    }
  }
  if (detail::should_record({&a})) {
    detail::record(out, [a, batch, m, n](const std::vector<double>& g) {
      auto& ga = a.impl()->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) ga[b * m * n + i * n + j] += g[b * m * n + j * m + i];
        }
      }
    });
  }
  return out;
}

Tensor expand_time(const Tensor& a, std::size_t steps) {
  require_rank("expand_time", a, 2);
  const std::size_t batch = a.dim(0), d = a.dim(1);
  Tensor out = make_out({batch, steps, d});
  double* po = out.mutable_data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < steps; ++t) std::copy_n(a.data().data() + b * d, d, po + (b * steps + t) * d);
  }
  if (detail::should_record({&a})) {
    detail::record(out, [a, batch, steps, d](const std::vector<double>& g) {
      auto& ga = a.impl()->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < steps; ++t) {
          for (std::size_t i = 0; i < d; ++i) ga[b * d + i] += g[(b * steps + t) * d + i];
        }
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(a, sigmoid_into, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(a, tanh_into, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  constexpr double kMaxExpArg = 709.0;
  for (double x : a.data()) {
    if (!(x <= kMaxExpArg)) throw DomainError("exp: argument " + std::to_string(x) + " overflows");
  }
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data()) {
    if (!(x > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(x));
  }
  return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ContractViolation("softmax: axis out of range for shape " + shape_str(a.shape()));
  const AxisSplit s = split_at(a.shape(), axis);
  Tensor out = make_out(a.shape());
  const double* x = a.data().data();
  double* y = out.mutable_data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, x[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) z += (y[base + k * s.inner] = std::exp(x[base + k * s.inner] - mx));
      for (std::size_t k = 0; k < s.extent; ++k) y[base + k * s.inner] /= z;
    }
  }
  if (detail::should_record({&a})) {
    TensorImpl* yimpl = out.impl();
    detail::record(out, [a, yimpl, s](const std::vector<double>& g) {
      auto& ga = a.impl()->ensure_grad();
      const double* yv = yimpl->data.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < s.extent; ++k) dot += g[base + k * s.inner] * yv[base + k * s.inner];
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t i = base + k * s.inner;
            ga[i] += yv[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor masked_softmax(const Tensor& a, const Tensor& mask) {
  require_rank("masked_softmax", a, 2);
  if (mask.shape() != a.shape()) shape_error("masked_softmax", a.shape(), mask.shape());
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor out = make_out(a.shape());
  const double* x = a.data().data();
  const double* m = mask.data().data();
  double* y = out.mutable_data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (m[r * cols + c] > 0) mx = std::max(mx, x[r * cols + c]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ContractViolation("masked_softmax: row " + std::to_string(r) + " has no unmasked position");
    }
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t i = r * cols + c;
      y[i] = m[i] > 0 ? std::exp(x[i] - mx) : 0.0;
      z += y[i];
    }
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] /= z;
  }
  if (detail::should_record({&a})) {
    TensorImpl* yimpl = out.impl();
    detail::record(out, [a, yimpl, rows, cols](const std::vector<double>& g) {
      auto& ga = a.impl()->ensure_grad();
      const double* yv = yimpl->data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * yv[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          ga[i] += yv[i] * (g[i] - dot);
        }
      }
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank("embedding_lookup", table, 2);
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw LookupError("embedding_lookup: id " + std::to_string(id) + " outside table of " + std::to_string(vocab) +
                        " rows");
    }
  }
  Tensor out = make_out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(table.data().data() + static_cast<std::size_t>(idx[i]) * d, d, out.mutable_data().data() + i * d);
  }
  if (detail::should_record({&table})) {
    detail::record(out, [table, idx, d](const std::vector<double>& g) {
      auto& gt = table.impl()->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = gt.data() + static_cast<std::size_t>(idx[i]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor out = make_out({});
  out.mutable_data()[0] = s;
  if (detail::should_record({&a})) {
    detail::record(out, [a](const std::vector<double>& g) {
      auto& ga = a.impl()->ensure_grad();
      for (auto& v : ga) v += g[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ContractViolation("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) shape_error("mse_loss", pred.shape(), target.shape());
  Tensor diff = sub(pred, target);
  return mean(mul(diff, diff));
}

Tensor masked_mse_loss(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  if (pred.shape() != target.shape()) shape_error("masked_mse_loss", pred.shape(), target.shape());
  const Shape& ms = mask.shape();
  if (ms.size() > pred.rank() || !std::equal(ms.begin(), ms.end(), pred.shape().begin())) {
    shape_error("masked_mse_loss", pred.shape(), ms);
  }
  const std::size_t inner = pred.numel() / std::max<std::size_t>(mask.numel(), 1);
  double weight = 0.0;
  for (double m : mask.data()) weight += m;
  if (weight <= 0) throw ContractViolation("masked_mse_loss: mask selects no positions");
  const double denom = weight * static_cast<double>(inner);
  const double* p = pred.data().data();
  const double* t = target.data().data();
  const double* m = mask.data().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double w = m[i / inner];
    if (w == 0) continue;
    const double d = p[i] - t[i];
    acc += w * d * d;
  }
  Tensor out = make_out({});
  out.mutable_data()[0] = acc / denom;
  if (detail::should_record({&pred, &target})) {
    detail::record(out, [pred, target, mask, inner, denom](const std::vector<double>& g) {
      const double* p = pred.data().data();
      const double* t = target.data().data();
      const double* m = mask.data().data();
      double* gp = detail::wants_grad(pred) ? pred.impl()->ensure_grad().data() : nullptr;
      double* gt = detail::wants_grad(target) ? target.impl()->ensure_grad().data() : nullptr;
      for (std::size_t i = 0; i < pred.numel(); ++i) {
        const double w = m[i / inner];
        if (w == 0) continue;
        const double d = 2.0 * w * (p[i] - t[i]) / denom * g[0];
        if (gp) gp[i] += d;
        if (gt) gt[i] -= d;
      }
    });
  }
  return out;
}

Tensor binary_cross_entropy(const Tensor& logits, const Tensor& targets, const Tensor& mask, double pos_weight) {
  if (logits.shape() != targets.shape()) shape_error("binary_cross_entropy", logits.shape(), targets.shape());
  if (mask.defined() && mask.shape() != logits.shape()) {
    shape_error("binary_cross_entropy", logits.shape(), mask.shape());
  }
  const std::size_t n = logits.numel();
  const double* x = logits.data().data();
  const double* y = targets.data().data();
  const double* m = mask.defined() ? mask.data().data() : nullptr;
  double weight = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = m ? m[i] : 1.0;
    if (w == 0) continue;
    weight += w;
    acc += w * (pos_weight * y[i] * softplus(-x[i]) + (1.0 - y[i]) * softplus(x[i]));
  }
  if (weight <= 0) throw ContractViolation("binary_cross_entropy: mask selects no positions");
  Tensor out = make_out({});
  out.mutable_data()[0] = acc / weight;
  if (detail::should_record({&logits})) {
    detail::record(out, [logits, targets, mask, pos_weight, weight, n](const std::vector<double>& g) {
      auto& gl = logits.impl()->ensure_grad();
      const double* x = logits.data().data();
      const double* y = targets.data().data();
      const double* m = mask.defined() ? mask.data().data() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const double w = m ? m[i] : 1.0;
        if (w == 0) continue;
        const double s = stable_sigmoid(x[i]);
        gl[i] += g[0] * w * (-pos_weight * y[i] * (1.0 - s) + (1.0 - y[i]) * s) / weight;
      }
    });
  }
  return out;
}

Tensor cross_entropy_with_logits(const Tensor& logits, std::span<const int> labels, std::span<const double> mask) {
  require_rank("cross_entropy_with_logits", logits, 2);
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != rows) {
    throw ContractViolation("cross_entropy_with_logits: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(rows) + " rows");
  }
  if (!mask.empty() && mask.size() != rows) {
    throw ContractViolation("cross_entropy_with_logits: mask length does not match rows");
  }
  std::vector<double> probs(rows * classes);
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<double> w(rows, 1.0);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), w.begin());
  double weight = 0.0, acc = 0.0;
  const double* x = logits.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    if (w[r] == 0) continue;
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= classes) {
      throw LookupError("cross_entropy_with_logits: label " + std::to_string(lab[r]) + " outside " +
                        std::to_string(classes) + " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, x[r * classes + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += (probs[r * classes + c] = std::exp(x[r * classes + c] - mx));
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] /= z;
    acc += w[r] * (std::log(z) + mx - x[r * classes + static_cast<std::size_t>(lab[r])]);
    weight += w[r];
  }
  if (weight <= 0) throw ContractViolation("cross_entropy_with_logits: mask selects no rows");
  Tensor out = make_out({});
  out.mutable_data()[0] = acc / weight;
  if (detail::should_record({&logits})) {
    detail::record(out, [logits, probs = std::move(probs), lab, w, weight, rows, classes](const std::vector<double>& g) {
      auto& gl = logits.impl()->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        if (w[r] == 0) continue;
        const double f = g[0] * w[r] / weight;
        for (std::size_t c = 0; c < classes; ++c) {
          const double target = static_cast<int>(c) == lab[r] ? 1.0 : 0.0;
          gl[r * classes + c] += f * (probs[r * classes + c] - target);
        }
      }
    });
  }
  return out;
}

Tensor gradient_reverse(const Tensor& x, double lambda) {
  if (!(lambda >= 0)) throw ConfigError("gradient_reverse: lambda must be >= 0");
  Tensor out = make_out(x.shape());
  std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
  if (detail::should_record({&x})) {
    detail::record(out, [x, lambda](const std::vector<double>& g) {
      auto& gx = x.impl()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += -lambda * g[i];
    });
  }
  return out;
}

Tensor clamp_gradient(const Tensor& x, double bound) {
  if (!(bound > 0)) throw ConfigError("clamp_gradient: bound must be > 0");
  Tensor out = make_out(x.shape());
  std::copy(x.data().begin(), x.data().end(), out.mutable_data().begin());
  if (detail::should_record({&x})) {
    detail::record(out, [x, bound](const std::vector<double>& g) {
      auto& gx = x.impl()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += std::clamp(g[i], -bound, bound);
    });
  }
  return out;
}

Tensor additive_energies(const Tensor& keys, const Tensor& query, const Tensor& location, const Tensor& v) {
  require_rank("additive_energies", keys, 3);
  const std::size_t B = keys.dim(0), T = keys.dim(1), A = keys.dim(2);
  if (location.shape() != keys.shape()) shape_error("additive_energies", keys.shape(), location.shape());
  if (query.shape() != Shape{B, A}) shape_error("additive_energies", keys.shape(), query.shape());
  if (v.shape() != Shape{A, 1}) shape_error("additive_energies", keys.shape(), v.shape());
  // hidden holds tanh(...) for the backward pass.
  auto hidden = std::make_shared<std::vector<double>>(B * T * A);
  Tensor out = make_out({B, T});
  const double* pk = keys.data().data();
  const double* pl = location.data().data();
  const double* pq = query.data().data();
  const double* pv = v.data().data();
  double* ph = hidden->data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t row = (b * T + t) * A;
      for (std::size_t a = 0; a < A; ++a) ph[row + a] = pk[row + a] + pq[b * A + a] + pl[row + a];
    }
  tanh_into(ph, ph, B * T * A);
  for (std::size_t r = 0; r < B * T; ++r) {
    double e = 0.0;
    for (std::size_t a = 0; a < A; ++a) e += pv[a] * ph[r * A + a];
    out.mutable_data()[r] = e;
  }
  if (detail::should_record({&keys, &query, &location, &v})) {
    detail::record(out, [=](const std::vector<double>& g) {
      double* gk = detail::wants_grad(keys) ? keys.impl()->ensure_grad().data() : nullptr;
      double* gq = detail::wants_grad(query) ? query.impl()->ensure_grad().data() : nullptr;
      double* gl = detail::wants_grad(location) ? location.impl()->ensure_grad().data() : nullptr;
      double* gv = detail::wants_grad(v) ? v.impl()->ensure_grad().data() : nullptr;
      const double* pv = v.data().data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t row = (b * T + t) * A;
          const double ge = g[b * T + t];
          for (std::size_t a = 0; a < A; ++a) {
            const double h = (*hidden)[row + a];
            const double gs = ge * pv[a] * (1.0 - h * h);
            if (gk) gk[row + a] += gs;
            if (gl) gl[row + a] += gs;
            if (gq) gq[b * A + a] += gs;
            if (gv) gv[a] += ge * h;
          }
        }
    });
  }
  return out;
}

Tensor conv1d_grouped(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t groups) {
  require_rank("conv1d_grouped", input, 3);
  require_rank("conv1d_grouped", weight, 3);
  const std::size_t batch = input.dim(0), c_in = input.dim(1), steps = input.dim(2);
  const std::size_t c_out = weight.dim(0), cin_g = weight.dim(1), k = weight.dim(2);
  if (groups == 0 || c_in % groups != 0 || c_out % groups != 0) {
    throw ConfigError("conv1d_grouped: channels (" + std::to_string(c_in) + " in, " + std::to_string(c_out) +
                      " out) not divisible by groups " + std::to_string(groups));
  }
  if (k % 2 == 0) throw ConfigError("conv1d_grouped: kernel size must be odd, got " + std::to_string(k));
  if (cin_g != c_in / groups) shape_error("conv1d_grouped", input.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != c_out)) {
    shape_error("conv1d_grouped", weight.shape(), bias.shape());
  }
  const std::size_t cout_g = c_out / groups;
  const long pad = static_cast<long>(k - 1) / 2;
  const long T = static_cast<long>(steps);

  // Per group: Y_g [cout_g, B*T] = W_g [cout_g, cin_g*k] x cols_g [cin_g*k, B*T],
  // where cols_g[(ic*k + kk), b*T + t] = x[b, g*cin_g + ic, t + kk - pad] (zero outside).
  const std::size_t rows = cin_g * k, width = batch * steps;
  auto cols = std::make_shared<std::vector<double>>(groups * rows * width, 0.0);
  const double* x = input.data().data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t ic = 0; ic < cin_g; ++ic)
      for (std::size_t kk = 0; kk < k; ++kk) {
        double* crow = cols->data() + (g * rows + ic * k + kk) * width;
        const long shift = static_cast<long>(kk) - pad;
        const long t0 = std::max(0L, -shift), t1 = std::min(T, T - shift);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* xrow = x + (b * c_in + g * cin_g + ic) * steps;
          for (long t = t0; t < t1; ++t) crow[b * steps + static_cast<std::size_t>(t)] = xrow[t + shift];
        }
      }

  Tensor out = make_out({batch, c_out, steps});
  double* y = out.mutable_data().data();
  const auto er = static_cast<Eigen::Index>(rows), ew = static_cast<Eigen::Index>(width),
             eo = static_cast<Eigen::Index>(cout_g);
  RowMat prod(eo, ew);
  for (std::size_t g = 0; g < groups; ++g) {
    ConstMap wg(weight.data().data() + g * cout_g * rows, eo, er);
    ConstMap cg(cols->data() + g * rows * width, er, ew);
    prod.noalias() = wg * cg;
    for (std::size_t o = 0; o < cout_g; ++o) {
      const std::size_t oc = g * cout_g + o;
      const double bv = bias.defined() ? bias.data()[oc] : 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        double* yrow = y + (b * c_out + oc) * steps;
        const double* prow = prod.data() + o * width + b * steps;
        for (std::size_t t = 0; t < steps; ++t) yrow[t] = prow[t] + bv;
      }
    }
  }
  if (detail::should_record({&input, &weight, &bias})) {
    detail::record(out, [=](const std::vector<double>& gout) {
      double* gx = detail::wants_grad(input) ? input.impl()->ensure_grad().data() : nullptr;
      double* gw = detail::wants_grad(weight) ? weight.impl()->ensure_grad().data() : nullptr;
      double* gb = bias.defined() && detail::wants_grad(bias) ? bias.impl()->ensure_grad().data() : nullptr;
      RowMat dy(eo, ew), dcols;
      for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t o = 0; o < cout_g; ++o) {
          const std::size_t oc = g * cout_g + o;
          double s = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const double* grow = gout.data() + (b * c_out + oc) * steps;
            double* drow = dy.data() + o * width + b * steps;
            for (std::size_t t = 0; t < steps; ++t) {
              drow[t] = grow[t];
              s += grow[t];
            }
          }
          if (gb) gb[oc] += s;
        }
        ConstMap cg(cols->data() + g * rows * width, er, ew);
        if (gw) MutMap(gw + g * cout_g * rows, eo, er).noalias() += dy * cg.transpose();
        if (!gx) continue;
        dcols.noalias() = ConstMap(weight.data().data() + g * cout_g * rows, eo, er).transpose() * dy;
        for (std::size_t ic = 0; ic < cin_g; ++ic)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double* crow = dcols.data() + (ic * k + kk) * width;
            const long shift = static_cast<long>(kk) - pad;
            const long t0 = std::max(0L, -shift), t1 = std::min(T, T - shift);
            for (std::size_t b = 0; b < batch; ++b) {
              double* xrow = gx + (b * c_in + g * cin_g + ic) * steps;
              for (long t = t0; t < t1; ++t) xrow[t + shift] += crow[b * steps + static_cast<std::size_t>(t)];
            }
          }
      }
    });
  }
  return out;
}

Tensor apply_time_mask(const Tensor& x, const Tensor& mask) {
  require_rank("apply_time_mask", x, 3);
  require_rank("apply_time_mask", mask, 3);
  const std::size_t n = x.dim(0), c = x.dim(1), steps = x.dim(2), groups = mask.dim(1);
  if (mask.dim(0) != n || mask.dim(2) != steps || groups == 0 || c % groups != 0) {
    shape_error("apply_time_mask", x.shape(), mask.shape());
  }
  const std::size_t per_group = c / groups;
  Tensor out = make_out(x.shape());
  const double* xv = x.data().data();
  const double* m = mask.data().data();
  double* y = out.mutable_data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* mrow = m + (b * groups + ch / per_group) * steps;
      const std::size_t off = (b * c + ch) * steps;
      for (std::size_t t = 0; t < steps; ++t) y[off + t] = xv[off + t] * mrow[t];
    }
  }
  if (detail::should_record({&x})) {
    detail::record(out, [x, mask, n, c, steps, groups, per_group](const std::vector<double>& g) {
      auto& gx = x.impl()->ensure_grad();
      const double* m = mask.data().data();
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* mrow = m + (b * groups + ch / per_group) * steps;
          const std::size_t off = (b * c + ch) * steps;
          for (std::size_t t = 0; t < steps; ++t) gx[off + t] += g[off + t] * mrow[t];
        }
      }
    });
  }
  return out;
}

Tensor batch_norm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, Mode mode,
                     const Tensor& mask, std::size_t state_offset) {
  require_rank("batch_norm_1d", x, 3);
  const std::size_t batch = x.dim(0), channels = x.dim(1), steps = x.dim(2);
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    shape_error("batch_norm_1d", x.shape(), gamma.shape());
  }
  if (state_offset + channels > state.channels()) {
    throw ContractViolation("batch_norm_1d: state has " + std::to_string(state.channels()) +
                            " channels, need offset " + std::to_string(state_offset) + " + " +
                            std::to_string(channels));
  }
  std::size_t groups = 1;
  if (mask.defined()) {
    groups = mask.rank() == 3 ? mask.dim(1) : 0;
    if (mask.rank() != 3 || mask.dim(0) != batch || mask.dim(2) != steps || groups == 0 || channels % groups != 0) {
      shape_error("batch_norm_1d", x.shape(), mask.shape());
    }
  }
  const std::size_t per_group = channels / groups;
  const double* m = mask.defined() ? mask.data().data() : nullptr;
  auto weight_at = [m, groups, per_group, steps](std::size_t b, std::size_t ch, std::size_t t) {
    return m ? m[(b * groups + ch / per_group) * steps + t] : 1.0;
  };

  constexpr double eps = BatchNormState::kEpsilon;
  std::vector<double> xhat(x.numel(), 0.0);
  std::vector<double> inv_std(channels);
  std::vector<double> count(channels, 0.0);
  const double* xv = x.data().data();
  Tensor out = make_out(x.shape());
  double* y = out.mutable_data().data();

  for (std::size_t ch = 0; ch < channels; ++ch) {
    const std::size_t sc = state_offset + ch;
    double mu, var;
    if (mode == Mode::Train) {
      double n = 0.0, s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < steps; ++t) {
          if (weight_at(b, ch, t) > 0) {
            n += 1.0;
            s += xv[(b * channels + ch) * steps + t];
          }
        }
      }
      if (n < 2) {
        throw ContractViolation("batch_norm_1d: channel " + std::to_string(ch) + " has " +
                                std::to_string(static_cast<long>(n)) + " real positions, need >= 2 in train mode");
      }
      mu = s / n;
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < steps; ++t) {
          if (weight_at(b, ch, t) > 0) {
            const double d = xv[(b * channels + ch) * steps + t] - mu;
            ss += d * d;
          }
        }
      }
      var = ss / n;
      count[ch] = n;
      const double mom = BatchNormState::kMomentum;
      state.running_mean[sc] = (1 - mom) * state.running_mean[sc] + mom * mu;
      state.running_var[sc] = (1 - mom) * state.running_var[sc] + mom * (ss / (n - 1));
      ++state.updates[sc];
    } else {
      if (state.updates[sc] == 0) {
        throw ContractViolation("batch_norm_1d: eval mode with uninitialized running stats (channel " +
                                std::to_string(sc) + ")");
      }
      mu = state.running_mean[sc];
      var = state.running_var[sc];
    }
    inv_std[ch] = 1.0 / std::sqrt(var + eps);
    const double gm = gamma.data()[ch], bt = beta.data()[ch];
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t i = (b * channels + ch) * steps + t;
        if (weight_at(b, ch, t) > 0) {
          xhat[i] = (xv[i] - mu) * inv_std[ch];
          y[i] = gm * xhat[i] + bt;
        }
      }
    }
  }

  if (detail::should_record({&x, &gamma, &beta})) {
    detail::record(out, [=, keep_mask = mask, xhat = std::move(xhat), inv_std = std::move(inv_std),
                         count = std::move(count)](const std::vector<double>& g) {
      (void)keep_mask;  // owns the buffer weight_at reads
      double* gx = detail::wants_grad(x) ? x.impl()->ensure_grad().data() : nullptr;
      double* gg = detail::wants_grad(gamma) ? gamma.impl()->ensure_grad().data() : nullptr;
      double* gbt = detail::wants_grad(beta) ? beta.impl()->ensure_grad().data() : nullptr;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double gm = gamma.data()[ch];
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < steps; ++t) {
            if (weight_at(b, ch, t) > 0) {
              const std::size_t i = (b * channels + ch) * steps + t;
              sum_g += g[i];
              sum_gx += g[i] * xhat[i];
            }
          }
        }
        if (gg) gg[ch] += sum_gx;
        if (gbt) gbt[ch] += sum_g;
        if (!gx) continue;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t t = 0; t < steps; ++t) {
            if (!(weight_at(b, ch, t) > 0)) continue;
            const std::size_t i = (b * channels + ch) * steps + t;
            if (mode == Mode::Train) {
              const double n = count[ch];
              gx[i] += gm * inv_std[ch] / n * (n * g[i] - sum_g - xhat[i] * sum_gx);
            } else {
              gx[i] += gm * inv_std[ch] * g[i];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, SeededRng& rng, Mode mode) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (mode == Mode::Eval || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> factor(x.numel());
  for (auto& f : factor) f = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = make_out(x.shape());
  for (std::size_t i = 0; i < factor.size(); ++i) out.mutable_data()[i] = x.data()[i] * factor[i];
  if (detail::should_record({&x})) {
    detail::record(out, [x, factor = std::move(factor)](const std::vector<double>& g) {
      auto& gx = x.impl()->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor[i];
    });
  }
  return out;
}

namespace {

// c' = sigmoid(f) * c + sigmoid(i) * tanh(g), reading gates [B, 4H] in (i, f, g, o) order.
Tensor lstm_next_cell(const Tensor& gates, const Tensor& c) {
  const std::size_t batch = c.dim(0), hidden = c.dim(1);
  Tensor out = make_out({batch, hidden});
  std::vector<double> si(batch * hidden), sf(batch * hidden), tg(batch * hidden);
  const double* gv = gates.data().data();
  const double* cv = c.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const double* row = gv + b * 4 * hidden;
    const std::size_t k0 = b * hidden;
    sigmoid_into(row, si.data() + k0, hidden);
    sigmoid_into(row + hidden, sf.data() + k0, hidden);
    tanh_into(row + 2 * hidden, tg.data() + k0, hidden);
    for (std::size_t k = k0; k < k0 + hidden; ++k) out.mutable_data()[k] = sf[k] * cv[k] + si[k] * tg[k];
  }
  if (detail::should_record({&gates, &c})) {
    detail::record(out, [gates, c, batch, hidden, si = std::move(si), sf = std::move(sf),
                         tg = std::move(tg)](const std::vector<double>& g) {
      double* gg = detail::wants_grad(gates) ? gates.impl()->ensure_grad().data() : nullptr;
      double* gc = detail::wants_grad(c) ? c.impl()->ensure_grad().data() : nullptr;
      const double* cv = c.data().data();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < hidden; ++j) {
          const std::size_t k = b * hidden + j;
          if (gc) gc[k] += g[k] * sf[k];
          if (gg) {
            double* row = gg + b * 4 * hidden;
            row[j] += g[k] * tg[k] * si[k] * (1 - si[k]);
            row[hidden + j] += g[k] * cv[k] * sf[k] * (1 - sf[k]);
            row[2 * hidden + j] += g[k] * si[k] * (1 - tg[k] * tg[k]);
          }
        }
      }
    });
  }
  return out;
}

// h' = sigmoid(o) * tanh(c').
Tensor lstm_next_hidden(const Tensor& gates, const Tensor& c_next) {
  const std::size_t batch = c_next.dim(0), hidden = c_next.dim(1);
  Tensor out = make_out({batch, hidden});
  std::vector<double> so(batch * hidden), tc(batch * hidden);
  for (std::size_t b = 0; b < batch; ++b)
    sigmoid_into(gates.data().data() + b * 4 * hidden + 3 * hidden, so.data() + b * hidden, hidden);
  tanh_into(c_next.data().data(), tc.data(), batch * hidden);
  for (std::size_t k = 0; k < batch * hidden; ++k) out.mutable_data()[k] = so[k] * tc[k];
  if (detail::should_record({&gates, &c_next})) {
    detail::record(out, [gates, c_next, batch, hidden, so = std::move(so),
                         tc = std::move(tc)](const std::vector<double>& g) {
      double* gg = detail::wants_grad(gates) ? gates.impl()->ensure_grad().data() : nullptr;
      double* gc = detail::wants_grad(c_next) ? c_next.impl()->ensure_grad().data() : nullptr;
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < hidden; ++j) {
          const std::size_t k = b * hidden + j;
          if (gg) gg[b * 4 * hidden + 3 * hidden + j] += g[k] * tc[k] * so[k] * (1 - so[k]);
          if (gc) gc[k] += g[k] * so[k] * (1 - tc[k] * tc[k]);
        }
      }
    });
  }
  return out;
}

}  // namespace

std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c, const LstmWeights& w) {
  require_rank("lstm_cell", x, 2);
  require_rank("lstm_cell", h, 2);
  if (h.shape() != c.shape()) shape_error("lstm_cell", h.shape(), c.shape());
  const std::size_t hidden = h.dim(1);
  if (w.input_weight.rank() != 2 || w.input_weight.dim(0) != x.dim(1) || w.input_weight.dim(1) != 4 * hidden) {
    shape_error("lstm_cell", x.shape(), w.input_weight.shape());
  }
  if (w.hidden_weight.shape() != Shape{hidden, 4 * hidden}) shape_error("lstm_cell", h.shape(), w.hidden_weight.shape());
  if (w.bias.shape() != Shape{4 * hidden}) shape_error("lstm_cell", h.shape(), w.bias.shape());
  if (x.dim(0) != h.dim(0)) shape_error("lstm_cell", x.shape(), h.shape());

  Tensor gates = add(add(matmul(x, w.input_weight), matmul(h, w.hidden_weight)), w.bias);
  Tensor c_next = lstm_next_cell(gates, c);
  Tensor h_next = lstm_next_hidden(gates, c_next);
  return {h_next, c_next};
}

}  // namespace mtts
