#include "stm3/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "stm3/error.hpp"

namespace stm3 {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(std::span<const double> s, std::size_t rows, std::size_t cols) {
  return ConstMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MutMap mmap(std::span<double> s, std::size_t rows, std::size_t cols) {
  return MutMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

std::size_t last_dim(const char* op, const Tensor& x) {
  if (x.ndim() == 0) throw DimensionError(std::string(op) + ": scalar input has no last axis");
  return x.shape().back();
}

void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// --- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) { return OpRecorder::view(x, std::move(shape)); }

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t nd = x.ndim();
  if (axes.size() != nd) throw DimensionError("permute: axis list rank mismatch");
  std::vector<bool> seen(nd, false);
  for (std::size_t a : axes) {
    if (a >= nd || seen[a]) throw ArgumentError("permute: invalid axis list");
    seen[a] = true;
  }
  const Shape& in_shape = x.shape();
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = in_shape[axes[i]];

  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  // out index -> in offset, computed once and shared with backward.
  auto map = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < nd; ++i) off += idx[i] * in_strides[axes[i]];
    (*map)[flat] = off;
    for (std::size_t i = nd; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor out(out_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[(*map)[i]];
  return OpRecorder::finish("permute", std::move(out), {&x}, [map](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    for (std::size_t i = 0; i < go.size(); ++i) g[(*map)[i]] += go[i];
  });
}

Tensor slice_last(const Tensor& x, std::size_t start, std::size_t len) {
  const std::size_t n = last_dim("slice_last", x);
  if (start + len > n) throw DimensionError("slice_last: range exceeds last axis");
  const std::size_t rows = x.size() / n;
  Shape shape = x.shape();
  shape.back() = len;
  Tensor out(shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(r * n + start), len,
                o.begin() + static_cast<std::ptrdiff_t>(r * len));
  }
  return OpRecorder::finish("slice_last", std::move(out), {&x}, [rows, n, start, len](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < len; ++j) g[r * n + start + j] += go[r * len + j];
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("concat_last: no inputs");
  const Shape& ref = parts.front().shape();
  if (ref.empty()) throw DimensionError("concat_last: scalar inputs");
  const std::size_t rows = parts.front().size() / ref.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != ref.size() || !std::equal(ref.begin(), ref.end() - 1, p.shape().begin())) {
      throw DimensionError("concat_last: leading shapes differ");
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  Shape shape = ref;
  shape.back() = total;
  Tensor out(shape);
  auto o = out.mutable_data();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto in = parts[k].data();
    const std::size_t w = widths[k];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  o.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    offset += w;
  }
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  return OpRecorder::finish("concat_last", std::move(out), inputs, [rows, total, widths](BackwardContext& ctx) {
    auto go = ctx.grad_out();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (ctx.needs(k)) {
        auto g = ctx.grad_in(k);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < w; ++j) g[r * w + j] += go[r * total + offset + j];
      }
      offset += w;
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
  const Shape& ref = parts.front().shape();
  if (ref.empty()) throw DimensionError("concat_rows: scalar inputs");
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  for (const Tensor& p : parts) {
    if (p.ndim() != ref.size() || !std::equal(ref.begin() + 1, ref.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: trailing shapes differ");
    }
    rows += p.shape()[0];
    sizes.push_back(p.size());
  }
  Shape shape = ref;
  shape[0] = rows;
  Tensor out(shape);
  auto o = out.mutable_data();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.size();
  }
  std::vector<const Tensor*> inputs;
  for (const Tensor& p : parts) inputs.push_back(&p);
  return OpRecorder::finish("concat_rows", std::move(out), inputs, [sizes](BackwardContext& ctx) {
    auto go = ctx.grad_out();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (ctx.needs(k)) accumulate(ctx.grad_in(k), go.subspan(offset, sizes[k]));
      offset += sizes[k];
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& index) {
  if (x.ndim() == 0) throw DimensionError("gather_rows: scalar input");
  const std::size_t rows = x.shape()[0];
  const std::size_t width = rows ? x.size() / rows : 0;
  for (std::size_t i : index)
    if (i >= rows) throw DimensionError("gather_rows: index out of range");
  Shape shape = x.shape();
  shape[0] = index.size();
  Tensor out(shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(index[r] * width), width,
                o.begin() + static_cast<std::ptrdiff_t>(r * width));
  return OpRecorder::finish("gather_rows", std::move(out), {&x}, [index, width](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < width; ++j) g[index[r] * width + j] += go[r * width + j];
  });
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& index, std::size_t rows) {
  if (x.ndim() == 0 || x.shape()[0] != index.size()) {
    throw DimensionError("scatter_rows: row count does not match index length");
  }
  const std::size_t width = index.empty() ? shape_size(Shape(x.shape().begin() + 1, x.shape().end()))
                                          : x.size() / index.size();
  for (std::size_t i : index)
    if (i >= rows) throw DimensionError("scatter_rows: index out of range");
  Shape shape = x.shape();
  shape[0] = rows;
  Tensor out(shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t r = 0; r < index.size(); ++r)
    for (std::size_t j = 0; j < width; ++j) o[index[r] * width + j] += in[r * width + j];
  return OpRecorder::finish("scatter_rows", std::move(out), {&x}, [index, width](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t j = 0; j < width; ++j) g[r * width + j] += go[index[r] * width + j];
  });
}

// --- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() != 2) {
    throw DimensionError("matmul: expected a[..., k] (rank >= 2) and b[k, n], got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t k = a.shape().back();
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t n = b.shape()[1];
  const std::size_t m = a.size() / std::max<std::size_t>(k, 1);
  Shape shape = a.shape();
  shape.back() = n;
  Tensor out(shape);
  if (k == 0) {
    std::fill(out.mutable_data().begin(), out.mutable_data().end(), 0.0);
  } else {
    mmap(out.mutable_data(), m, n).noalias() = cmap(a.data(), m, k) * cmap(b.data(), k, n);
  }
  return OpRecorder::finish("matmul", std::move(out), {&a, &b}, [a, b, m, k, n](BackwardContext& ctx) {
    auto go = cmap(ctx.grad_out(), m, n);
    if (ctx.needs(0)) mmap(ctx.grad_in(0), m, k).noalias() += go * cmap(b.data(), k, n).transpose();
    if (ctx.needs(1)) mmap(ctx.grad_in(1), k, n).noalias() += cmap(a.data(), m, k).transpose() * go;
  });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0]) {
    throw DimensionError("bmm: expected matching batched rank-3 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t batch = a.shape()[0];
  const std::size_t m = a.shape()[1];
  const std::size_t k = a.shape()[2];
  const std::size_t n = transpose_b ? b.shape()[1] : b.shape()[2];
  const std::size_t kb = transpose_b ? b.shape()[2] : b.shape()[1];
  if (kb != k) {
    throw DimensionError("bmm: inner dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out({batch, m, n});
  auto o = out.mutable_data();
  const std::size_t sa = m * k;
  const std::size_t sb = k * n;
  const std::size_t so = m * n;
  for (std::size_t i = 0; i < batch; ++i) {
    auto am = cmap(a.data().subspan(i * sa, sa), m, k);
    auto om = mmap(o.subspan(i * so, so), m, n);
    if (transpose_b) {
      om.noalias() = am * cmap(b.data().subspan(i * sb, sb), n, k).transpose();
    } else {
      om.noalias() = am * cmap(b.data().subspan(i * sb, sb), k, n);
    }
  }
  return OpRecorder::finish(
      "bmm", std::move(out), {&a, &b}, [a, b, batch, m, k, n, sa, sb, so, transpose_b](BackwardContext& ctx) {
        auto go = ctx.grad_out();
        for (std::size_t i = 0; i < batch; ++i) {
          auto gom = cmap(go.subspan(i * so, so), m, n);
          if (ctx.needs(0)) {
            auto ga = mmap(ctx.grad_in(0).subspan(i * sa, sa), m, k);
            if (transpose_b) {
              ga.noalias() += gom * cmap(b.data().subspan(i * sb, sb), n, k);
            } else {
              ga.noalias() += gom * cmap(b.data().subspan(i * sb, sb), k, n).transpose();
            }
          }
          if (ctx.needs(1)) {
            auto am = cmap(a.data().subspan(i * sa, sa), m, k);
            if (transpose_b) {
              mmap(ctx.grad_in(1).subspan(i * sb, sb), n, k).noalias() += gom.transpose() * am;
            } else {
              mmap(ctx.grad_in(1).subspan(i * sb, sb), k, n).noalias() += am.transpose() * gom;
            }
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight) { return matmul(x, weight); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

// --- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  return OpRecorder::finish("add", std::move(out), {&a, &b}, [](BackwardContext& ctx) {
    if (ctx.needs(0)) accumulate(ctx.grad_in(0), ctx.grad_out());
    if (ctx.needs(1)) accumulate(ctx.grad_in(1), ctx.grad_out());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  return OpRecorder::finish("sub", std::move(out), {&a, &b}, [](BackwardContext& ctx) {
    if (ctx.needs(0)) accumulate(ctx.grad_in(0), ctx.grad_out());
    if (ctx.needs(1)) {
      auto g = ctx.grad_in(1);
      auto go = ctx.grad_out();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  return OpRecorder::finish("mul", std::move(out), {&a, &b}, [a, b](BackwardContext& ctx) {
    auto go = ctx.grad_out();
    if (ctx.needs(0)) {
      auto g = ctx.grad_in(0);
      auto y = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * y[i];
    }
    if (ctx.needs(1)) {
      auto g = ctx.grad_in(1);
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * x[i];
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = last_dim("add_bias", x);
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias length " + std::to_string(bias.size()) + " vs last axis " +
                         std::to_string(n));
  }
  const std::size_t rows = x.size() / std::max<std::size_t>(n, 1);
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] = in[r * n + j] + b[j];
  return OpRecorder::finish("add_bias", std::move(out), {&x, &bias}, [rows, n](BackwardContext& ctx) {
    auto go = ctx.grad_out();
    if (ctx.needs(0)) accumulate(ctx.grad_in(0), go);
    if (ctx.needs(1)) {
      auto g = ctx.grad_in(1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += go[r * n + j];
    }
  });
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  if (x.ndim() != 3 || bias.ndim() != 2 || bias.shape()[0] != x.shape()[0] || bias.shape()[1] != x.shape()[2]) {
    throw DimensionError("add_rowwise: expected x[B, M, n] and bias[B, n], got " + shape_str(x.shape()) +
                         " and " + shape_str(bias.shape()));
  }
  const std::size_t batch = x.shape()[0];
  const std::size_t m = x.shape()[1];
  const std::size_t n = x.shape()[2];
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  auto b = bias.data();
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t idx = (i * m + r) * n + j;
        o[idx] = in[idx] + b[i * n + j];
      }
  return OpRecorder::finish("add_rowwise", std::move(out), {&x, &bias}, [batch, m, n](BackwardContext& ctx) {
    auto go = ctx.grad_out();
    if (ctx.needs(0)) accumulate(ctx.grad_in(0), go);
    if (ctx.needs(1)) {
      auto g = ctx.grad_in(1);
      for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += go[(i * m + r) * n + j];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * factor;
  return OpRecorder::finish("scale", std::move(out), {&x}, [factor](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * factor;
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] + value;
  return OpRecorder::finish("add_scalar", std::move(out), {&x},
                            [](BackwardContext& ctx) { accumulate(ctx.grad_in(0), ctx.grad_out()); });
}

Tensor square(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * in[i];
  return OpRecorder::finish("square", std::move(out), {&x}, [x](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    auto in = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * in[i] * go[i];
  });
}

Tensor activation(Activation kind, const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0 ? in[i] : 0.0;
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(in[i]);
      break;
    case Activation::silu:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * sigmoid_value(in[i]);
      break;
    case Activation::softplus:
      for (std::size_t i = 0; i < o.size(); ++i)
        o[i] = std::max(in[i], 0.0) + std::log1p(std::exp(-std::abs(in[i])));
      break;
    case Activation::exp:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(in[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigmoid_value(in[i]);
      break;
    case Activation::abs:
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(in[i]);
      break;
  }
  Tensor y = out.detach();
  return OpRecorder::finish("activation", std::move(out), {&x}, [kind, x, y](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    auto in = x.data();
    auto o = y.data();
    switch (kind) {
      case Activation::relu:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += in[i] > 0 ? go[i] : 0.0;
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * (1.0 - o[i] * o[i]);
        break;
      case Activation::silu:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = sigmoid_value(in[i]);
          g[i] += go[i] * (s + in[i] * s * (1.0 - s));
        }
        break;
      case Activation::softplus:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * sigmoid_value(in[i]);
        break;
      case Activation::exp:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * o[i];
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * o[i] * (1.0 - o[i]);
        break;
      case Activation::abs:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += in[i] > 0 ? go[i] : (in[i] < 0 ? -go[i] : 0.0);
        break;
    }
  });
}

// --- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return OpRecorder::finish("sum", Tensor::scalar(s), {&x}, [](BackwardContext& ctx) {
    const double go = ctx.grad_out()[0];
    for (double& g : ctx.grad_in(0)) g += go;
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ArgumentError("mean of an empty tensor");
  const double inv = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.data()) s += v;
  return OpRecorder::finish("mean", Tensor::scalar(s * inv), {&x}, [inv](BackwardContext& ctx) {
    const double go = ctx.grad_out()[0] * inv;
    for (double& g : ctx.grad_in(0)) g += go;
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.ndim()) throw DimensionError("mean_axis: axis out of range");
  const Shape& s = x.shape();
  const std::size_t len = s[axis];
  if (len == 0) throw ArgumentError("mean_axis over an empty axis");
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) shape.push_back(s[i]);
  Tensor out(shape);
  auto o = out.mutable_data();
  auto in = x.data();
  const double inv = 1.0 / static_cast<double>(len);
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t b = 0; b < inner; ++b) o[a * inner + b] += in[(a * len + l) * inner + b] * inv;
  return OpRecorder::finish("mean_axis", std::move(out), {&x}, [outer, len, inner, inv](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    for (std::size_t a = 0; a < outer; ++a)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t b = 0; b < inner; ++b) g[(a * len + l) * inner + b] += go[a * inner + b] * inv;
  });
}

// --- normalization ----------------------------------------------------------

namespace {

Tensor softmax_impl(const char* op, const Tensor& x, const double* mask, std::size_t mask_size) {
  const std::size_t n = last_dim(op, x);
  const std::size_t rows = x.size() / std::max<std::size_t>(n, 1);
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* m = mask ? mask + (r * n) % mask_size : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[r * n + j] + (m ? m[j] : 0.0));
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ArgumentError(std::string(op) + ": degenerate distribution (all entries -inf)");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(in[r * n + j] + (m ? m[j] : 0.0) - mx);
      o[r * n + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) o[r * n + j] /= z;
  }
  Tensor y = out.detach();
  return OpRecorder::finish(op, std::move(out), {&x}, [y, rows, n](BackwardContext& ctx) {
    auto g = ctx.grad_in(0);
    auto go = ctx.grad_out();
    auto p = y.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += go[r * n + j] * p[r * n + j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += p[r * n + j] * (go[r * n + j] - dot);
    }
  });
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) { return softmax_impl("softmax_lastdim", x, nullptr, 0); }

Tensor masked_softmax_lastdim(const Tensor& x, const Tensor& mask) {
  if (x.ndim() < 2 || mask.ndim() != 2 || mask.shape()[0] != x.shape()[x.ndim() - 2] ||
      mask.shape()[1] != x.shape().back()) {
    throw DimensionError("masked_softmax_lastdim: mask " + shape_str(mask.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  return softmax_impl("masked_softmax_lastdim", x, mask.data().data(), mask.size());
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = last_dim("layer_norm", x);
  if (gain.size() != n || bias.size() != n) throw DimensionError("layer_norm: gain/bias length mismatch");
  const std::size_t rows = x.size() / std::max<std::size_t>(n, 1);
  Tensor out(x.shape());
  auto normalized = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  auto o = out.mutable_data();
  auto in = x.data();
  auto gm = gain.data();
  auto bs = bias.data();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[r * n + j];
    mu *= inv_n;
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = in[r * n + j] - mu;
      var += d * d;
    }
    var *= inv_n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (in[r * n + j] - mu) * is;
      (*normalized)[r * n + j] = xh;
      o[r * n + j] = gm[j] * xh + bs[j];
    }
  }
  return OpRecorder::finish(
      "layer_norm", std::move(out), {&x, &gain, &bias},
      [normalized, inv_std, gain, rows, n, inv_n](BackwardContext& ctx) {
        auto go = ctx.grad_out();
        auto gm = gain.data();
        const auto& xh = *normalized;
        if (ctx.needs(1)) {
          auto g = ctx.grad_in(1);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) g[j] += go[r * n + j] * xh[r * n + j];
        }
        if (ctx.needs(2)) {
          auto g = ctx.grad_in(2);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) g[j] += go[r * n + j];
        }
        if (ctx.needs(0)) {
          auto g = ctx.grad_in(0);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0;
            double m2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gx = go[r * n + j] * gm[j];
              m1 += gx;
              m2 += gx * xh[r * n + j];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double gx = go[r * n + j] * gm[j];
              g[r * n + j] += (*inv_std)[r] * (gx - m1 - xh[r * n + j] * m2);
            }
          }
        }
      });
}

// --- convolution ------------------------------------------------------------

Tensor conv1d_causal(const Tensor& x, const Tensor& kernel, std::size_t groups) {
  if (kernel.ndim() != 3) throw DimensionError("conv1d_causal: kernel must be [s, c_in/groups, c_out]");
  const std::size_t s = kernel.shape()[0];
  if (s < 1) throw ArgumentError("conv1d_causal: kernel size must be at least 1");
  if (x.ndim() < 2) throw DimensionError("conv1d_causal: input must be [..., T, c_in]");
  if (groups < 1) throw ArgumentError("conv1d_causal: groups must be at least 1");
  const std::size_t cin = x.shape().back();
  const std::size_t steps = x.shape()[x.ndim() - 2];
  const std::size_t cin_g = kernel.shape()[1];
  const std::size_t cout = kernel.shape()[2];
  if (cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g) {
    throw DimensionError("conv1d_causal: channel counts not compatible with groups");
  }
  const std::size_t cout_g = cout / groups;
  const std::size_t batch = x.size() / std::max<std::size_t>(steps * cin, 1);
  Shape shape = x.shape();
  shape.back() = cout;
  Tensor out(shape);
  auto o = out.mutable_data();
  auto in = x.data();
  auto w = kernel.data();
  const bool depthwise = cin_g == 1 && cout_g == 1;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = in.data() + b * steps * cin;
    double* yb = o.data() + b * steps * cout;
    for (std::size_t t = 0; t < steps; ++t) {
      if (depthwise) {
        double* yt = yb + t * cout;
        for (std::size_t j = 0; j < s; ++j) {
          if (t + j < s - 1) continue;
          const double* xt = xb + (t + j - (s - 1)) * cin;
          const double* wj = w.data() + j * cout;
          for (std::size_t oc = 0; oc < cout; ++oc) yt[oc] += wj[oc] * xt[oc];
        }
        continue;
      }
      for (std::size_t j = 0; j < s; ++j) {
        const std::ptrdiff_t tt = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(s - 1);
        if (tt < 0) continue;
        const double* xt = xb + static_cast<std::size_t>(tt) * cin;
        const double* wj = w.data() + j * cin_g * cout;
        for (std::size_t oc = 0; oc < cout; ++oc) {
          const std::size_t base = (oc / cout_g) * cin_g;
          double acc = 0.0;
          for (std::size_t i = 0; i < cin_g; ++i) acc += wj[i * cout + oc] * xt[base + i];
          yb[t * cout + oc] += acc;
        }
      }
    }
  }
  return OpRecorder::finish(
      "conv1d_causal", std::move(out), {&x, &kernel},
      [x, kernel, batch, steps, cin, cin_g, cout, cout_g, s](BackwardContext& ctx) {
        auto go = ctx.grad_out();
        auto in = x.data();
        auto w = kernel.data();
        const bool gx_on = ctx.needs(0);
        const bool gw_on = ctx.needs(1);
        auto gx = ctx.grad_in(0);
        auto gw = ctx.grad_in(1);
        const bool depthwise = cin_g == 1 && cout_g == 1;
        for (std::size_t b = 0; b < batch; ++b) {
          const double* xb = in.data() + b * steps * cin;
          const double* gyb = go.data() + b * steps * cout;
          for (std::size_t t = 0; t < steps; ++t) {
            if (depthwise) {
              const double* gy = gyb + t * cout;
              for (std::size_t j = 0; j < s; ++j) {
                if (t + j < s - 1) continue;
                const std::size_t tu = t + j - (s - 1);
                const double* wj = w.data() + j * cout;
                if (gx_on) {
                  double* gxt = gx.data() + (b * steps + tu) * cin;
                  for (std::size_t oc = 0; oc < cout; ++oc) gxt[oc] += gy[oc] * wj[oc];
                }
                if (gw_on) {
                  const double* xt = xb + tu * cin;
                  double* gwj = gw.data() + j * cout;
                  for (std::size_t oc = 0; oc < cout; ++oc) gwj[oc] += gy[oc] * xt[oc];
                }
              }
              continue;
            }
            for (std::size_t j = 0; j < s; ++j) {
              const std::ptrdiff_t tt = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(s - 1);
              if (tt < 0) continue;
              const std::size_t tu = static_cast<std::size_t>(tt);
              for (std::size_t oc = 0; oc < cout; ++oc) {
                const double gy = gyb[t * cout + oc];
                if (gy == 0.0) continue;
                const std::size_t base = (oc / cout_g) * cin_g;
                for (std::size_t i = 0; i < cin_g; ++i) {
                  const std::size_t widx = (j * cin_g + i) * cout + oc;
                  if (gx_on) gx[(b * steps + tu) * cin + base + i] += gy * w[widx];
                  if (gw_on) gw[widx] += gy * xb[tu * cin + base + i];
                }
              }
            }
          }
        }
      });
}

// --- similarity -------------------------------------------------------------

Tensor cosine_similarity(const Tensor& x, const Tensor& y, double eps) {
  if (x.ndim() != 2 || y.ndim() != 2 || x.shape()[1] != y.shape()[1]) {
    throw DimensionError("cosine_similarity: expected x[M, d], y[P, d]");
  }
  const std::size_t m = x.shape()[0];
  const std::size_t p = y.shape()[0];
  const std::size_t d = x.shape()[1];
  auto norms = [d](std::span<const double> v, std::size_t rows) {
    std::vector<double> n(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += v[r * d + j] * v[r * d + j];
      n[r] = std::sqrt(s);
    }
    return n;
  };
  auto nx = std::make_shared<std::vector<double>>(norms(x.data(), m));
  auto ny = std::make_shared<std::vector<double>>(norms(y.data(), p));
  Tensor dots({m, p});
  if (d > 0) mmap(dots.mutable_data(), m, p).noalias() = cmap(x.data(), m, d) * cmap(y.data(), p, d).transpose();
  Tensor out({m, p});
  auto o = out.mutable_data();
  auto g = dots.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) o[i * p + j] = g[i * p + j] / ((*nx)[i] * (*ny)[j] + eps);
  return OpRecorder::finish(
      "cosine_similarity", std::move(out), {&x, &y}, [x, y, dots, nx, ny, m, p, d, eps](BackwardContext& ctx) {
        auto go = ctx.grad_out();
        auto xd = x.data();
        auto yd = y.data();
        auto gd = dots.data();
        const bool need_x = ctx.needs(0);
        const bool need_y = ctx.needs(1);
        auto gx = ctx.grad_in(0);
        auto gy = ctx.grad_in(1);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < p; ++j) {
            const double c = go[i * p + j];
            if (c == 0.0) continue;
            const double den = (*nx)[i] * (*ny)[j] + eps;
            const double dot = gd[i * p + j];
            const double q = dot / (den * den);
            if (need_x) {
              const double rx = (*nx)[i] > 0 ? q * (*ny)[j] / (*nx)[i] : 0.0;
              for (std::size_t k = 0; k < d; ++k) gx[i * d + k] += c * (yd[j * d + k] / den - rx * xd[i * d + k]);
            }
            if (need_y) {
              const double ry = (*ny)[j] > 0 ? q * (*nx)[i] / (*ny)[j] : 0.0;
              for (std::size_t k = 0; k < d; ++k) gy[j * d + k] += c * (xd[i * d + k] / den - ry * yd[j * d + k]);
            }
          }
        }
      });
}

}  // namespace stm3
