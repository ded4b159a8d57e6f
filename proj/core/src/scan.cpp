#include "stm3/scan.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "stm3/error.hpp"

namespace stm3 {

void linear_recurrence_seq(const double* a, const double* b, double* u, std::size_t steps,
                           std::size_t lanes) {
  if (steps == 0) return;
  for (std::size_t l = 0; l < lanes; ++l) u[l] = b[l];
  for (std::size_t t = 1; t < steps; ++t) {
    const double* at = a + t * lanes;
    const double* bt = b + t * lanes;
    const double* prev = u + (t - 1) * lanes;
    double* ut = u + t * lanes;
    for (std::size_t l = 0; l < lanes; ++l) ut[l] = at[l] * prev[l] + bt[l];
  }
}

void linear_recurrence_par(const double* a, const double* b, double* u, std::size_t steps,
                           std::size_t lanes) {
  if (steps == 0) return;
  std::size_t padded = 1;
  while (padded < steps) padded <<= 1;
  std::vector<double> pa(padded * lanes, 1.0);
  std::vector<double> pb(padded * lanes, 0.0);
  std::copy(a, a + steps * lanes, pa.begin());
  std::copy(b, b + steps * lanes, pb.begin());

  // Up-sweep: node k accumulates the composition of its subtree.
  for (std::size_t d = 1; d < padded; d <<= 1) {
    for (std::size_t k = 2 * d - 1; k < padded; k += 2 * d) {
      double* ar = &pa[k * lanes];
      double* br = &pb[k * lanes];
      const double* al = &pa[(k - d) * lanes];
      const double* bl = &pb[(k - d) * lanes];
      for (std::size_t l = 0; l < lanes; ++l) {
        br[l] = ar[l] * bl[l] + br[l];
        ar[l] *= al[l];
      }
    }
  }

  // Down-sweep to exclusive prefixes.
  std::fill(pa.begin() + static_cast<std::ptrdiff_t>((padded - 1) * lanes), pa.end(), 1.0);
  std::fill(pb.begin() + static_cast<std::ptrdiff_t>((padded - 1) * lanes), pb.end(), 0.0);
  for (std::size_t d = padded >> 1; d >= 1; d >>= 1) {
    for (std::size_t k = 2 * d - 1; k < padded; k += 2 * d) {
      double* ar = &pa[k * lanes];
      double* br = &pb[k * lanes];
      double* al = &pa[(k - d) * lanes];
      double* bl = &pb[(k - d) * lanes];
      for (std::size_t l = 0; l < lanes; ++l) {
        const double left_a = al[l];
        const double left_b = bl[l];
        al[l] = ar[l];
        bl[l] = br[l];
        br[l] = left_a * br[l] + left_b;
        ar[l] = left_a * ar[l];
      }
    }
    if (d == 1) break;
  }

  // The exclusive prefix applied to u[-1] = 0 leaves only its offset.
  for (std::size_t t = 0; t < steps; ++t) {
    const double* at = a + t * lanes;
    const double* bt = b + t * lanes;
    const double* ex = &pb[t * lanes];
    double* ut = u + t * lanes;
    for (std::size_t l = 0; l < lanes; ++l) ut[l] = at[l] * ex[l] + bt[l];
  }
}

void linear_recurrence(ScanMode mode, const double* a, const double* b, double* u, std::size_t steps,
                       std::size_t lanes) {
  if (mode == ScanMode::sequential) {
    linear_recurrence_seq(a, b, u, steps, lanes);
  } else {
    linear_recurrence_par(a, b, u, steps, lanes);
  }
}

namespace {

struct SsmDims {
  std::size_t batch = 1;
  std::size_t steps = 0;
  std::size_t channels = 0;
  std::size_t states = 0;
};

Shape leading(const Shape& s, std::size_t trailing) {
  return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(trailing));
}

void expect_shape(const char* op, const char* name, const Tensor& t, const Shape& want) {
  if (t.shape() != want) {
    throw DimensionError(std::string(op) + ": " + name + " has shape " + shape_str(t.shape()) +
                         ", expected " + shape_str(want));
  }
}

Shape with_tail(Shape lead, std::initializer_list<std::size_t> tail) {
  lead.insert(lead.end(), tail.begin(), tail.end());
  return lead;
}

void check_positive(const char* op, const Tensor& delta) {
  for (double v : delta.data()) {
    if (!(v > 0.0)) throw ContractError(std::string(op) + ": step sizes must be strictly positive");
  }
}

// Every element is written before it is read.
std::shared_ptr<double[]> scratch(std::size_t n) { return std::shared_ptr<double[]>(new double[n]); }

// Vectorized exp. Eigen evaluates unaligned head and tail elements with the
// scalar routine, whose last bit can differ from the packet routine, so every
// value goes through an aligned, padded block to keep results independent of
// the buffer address.
void exp_inplace(double* v, std::size_t n) {
  constexpr std::size_t kBlock = 256;
  alignas(64) double buf[kBlock];
  for (std::size_t i = 0; i < n; i += kBlock) {
    const std::size_t m = std::min(kBlock, n - i);
    std::copy(v + i, v + i + m, buf);
    std::fill(buf + m, buf + kBlock, 0.0);
    Eigen::Map<Eigen::Array<double, kBlock, 1>, Eigen::Aligned64> blk(buf);
    blk = blk.exp();
    std::copy(buf, buf + m, v + i);
  }
}

// Reverse recurrence gu[t] = g_direct[t] + a[t+1] * gu[t+1], in place on gu.

void reverse_recurrence(const double* a, double* gu, std::size_t steps, std::size_t lanes) {
  for (std::size_t t = steps - 1; t-- > 0;) {
    const double* an = a + (t + 1) * lanes;
    const double* gn = gu + (t + 1) * lanes;
    double* gt = gu + t * lanes;
    for (std::size_t l = 0; l < lanes; ++l) gt[l] += an[l] * gn[l];
  }
}

}  // namespace

std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& A, const Tensor& B) {
  if (delta.ndim() < 2 || A.ndim() != 2) throw DimensionError("discretize: bad ranks");
  const Shape lead = leading(delta.shape(), 2);
  SsmDims dm;
  dm.batch = shape_size(lead);
  dm.steps = delta.shape()[delta.ndim() - 2];
  dm.channels = delta.shape().back();
  dm.states = A.dim(1);
  expect_shape("discretize", "A", A, {dm.channels, dm.states});
  expect_shape("discretize", "B", B, with_tail(lead, {dm.steps, dm.states}));
  check_positive("discretize", delta);

  const Shape out_shape = with_tail(lead, {dm.steps, dm.channels, dm.states});
  Tensor a_bar(out_shape);
  Tensor b_bar(out_shape);
  {
    auto ad = a_bar.mutable_data();
    auto bd = b_bar.mutable_data();
    const auto dd = delta.data();
    const auto Ad = A.data();
    const auto Bd = B.data();
    for (std::size_t r = 0; r < dm.batch * dm.steps; ++r) {
      for (std::size_t c = 0; c < dm.channels; ++c) {
        const double dt = dd[r * dm.channels + c];
        const std::size_t base = (r * dm.channels + c) * dm.states;
        for (std::size_t k = 0; k < dm.states; ++k) {
          ad[base + k] = dt * Ad[c * dm.states + k];
          bd[base + k] = dt * Bd[r * dm.states + k];
        }
      }
    }
    exp_inplace(ad.data(), ad.size());
  }

  Tensor a_out = OpRecorder::finish(
      "discretize", a_bar, {&delta, &A}, [dm, delta, A, a_bar](BackwardContext& ctx) {
        const auto g = ctx.grad_out();
        const auto dd = delta.data();
        const auto Ad = A.data();
        const auto ad = a_bar.data();
        auto gd = ctx.grad_in(0);
        auto gA = ctx.grad_in(1);
        for (std::size_t r = 0; r < dm.batch * dm.steps; ++r) {
          for (std::size_t c = 0; c < dm.channels; ++c) {
            const std::size_t base = (r * dm.channels + c) * dm.states;
            const double dt = dd[r * dm.channels + c];
            double acc = 0.0;
            for (std::size_t k = 0; k < dm.states; ++k) {
              const double ga = g[base + k] * ad[base + k];
              acc += ga * Ad[c * dm.states + k];
              if (!gA.empty()) gA[c * dm.states + k] += ga * dt;
            }
            if (!gd.empty()) gd[r * dm.channels + c] += acc;
          }
        }
      });
  Tensor b_out = OpRecorder::finish(
      "discretize", b_bar, {&delta, &B}, [dm, delta, B](BackwardContext& ctx) {
        const auto g = ctx.grad_out();
        const auto dd = delta.data();
        const auto Bd = B.data();
        auto gd = ctx.grad_in(0);
        auto gB = ctx.grad_in(1);
        for (std::size_t r = 0; r < dm.batch * dm.steps; ++r) {
          for (std::size_t c = 0; c < dm.channels; ++c) {
            const std::size_t base = (r * dm.channels + c) * dm.states;
            const double dt = dd[r * dm.channels + c];
            double acc = 0.0;
            for (std::size_t k = 0; k < dm.states; ++k) {
              acc += g[base + k] * Bd[r * dm.states + k];
              if (!gB.empty()) gB[r * dm.states + k] += g[base + k] * dt;
            }
            if (!gd.empty()) gd[r * dm.channels + c] += acc;
          }
        }
      });
  return {a_out, b_out};
}

Tensor selective_scan(const Tensor& A_bar, const Tensor& B_bar, const Tensor& C, const Tensor& x,
                      ScanMode mode) {
  if (A_bar.ndim() < 3) throw DimensionError("selective_scan: A_bar must be [..., T, c, n]");
  const Shape lead = leading(A_bar.shape(), 3);
  SsmDims dm;
  dm.batch = shape_size(lead);
  dm.steps = A_bar.shape()[A_bar.ndim() - 3];
  dm.channels = A_bar.shape()[A_bar.ndim() - 2];
  dm.states = A_bar.shape().back();
  expect_shape("selective_scan", "B_bar", B_bar, A_bar.shape());
  expect_shape("selective_scan", "C", C, with_tail(lead, {dm.steps, dm.states}));
  expect_shape("selective_scan", "x", x, with_tail(lead, {dm.steps, dm.channels}));

  const std::size_t lanes = dm.channels * dm.states;
  const std::size_t per = dm.steps * lanes;
  auto states = scratch(dm.batch * per);
  Tensor y(with_tail(lead, {dm.steps, dm.channels}));
  {
    const auto ad = A_bar.data();
    const auto bd = B_bar.data();
    const auto cd = C.data();
    const auto xd = x.data();
    auto yd = y.mutable_data();
    for (std::size_t b = 0; b < dm.batch; ++b) {
      double* u = states.get() + b * per;
      for (std::size_t t = 0; t < dm.steps; ++t)
        for (std::size_t c = 0; c < dm.channels; ++c) {
          const double xv = xd[(b * dm.steps + t) * dm.channels + c];
          const std::size_t base = b * per + (t * dm.channels + c) * dm.states;
          for (std::size_t k = 0; k < dm.states; ++k) u[(t * dm.channels + c) * dm.states + k] = bd[base + k] * xv;
        }
      linear_recurrence(mode, ad.data() + b * per, u, u, dm.steps, lanes);
      for (std::size_t t = 0; t < dm.steps; ++t) {
        const double* ct = cd.data() + (b * dm.steps + t) * dm.states;
        for (std::size_t c = 0; c < dm.channels; ++c) {
          const double* ut = u + (t * dm.channels + c) * dm.states;
          double acc = 0.0;
          for (std::size_t k = 0; k < dm.states; ++k) acc += ct[k] * ut[k];
          yd[(b * dm.steps + t) * dm.channels + c] = acc;
        }
      }
    }
  }

  return OpRecorder::finish(
      "selective_scan", y, {&A_bar, &B_bar, &C, &x},
      [dm, states, A_bar, B_bar, C, x](BackwardContext& ctx) {
        const std::size_t lanes = dm.channels * dm.states;
        const std::size_t per = dm.steps * lanes;
        const auto gy = ctx.grad_out();
        const auto ad = A_bar.data();
        const auto bd = B_bar.data();
        const auto cd = C.data();
        const auto xd = x.data();
        auto gA = ctx.grad_in(0);
        auto gB = ctx.grad_in(1);
        auto gC = ctx.grad_in(2);
        auto gx = ctx.grad_in(3);
        const std::unique_ptr<double[]> gu(new double[per]);
        for (std::size_t b = 0; b < dm.batch; ++b) {
          const double* u = states.get() + b * per;
          for (std::size_t t = 0; t < dm.steps; ++t) {
            const std::size_t row = b * dm.steps + t;
            for (std::size_t c = 0; c < dm.channels; ++c) {
              const double g = gy[row * dm.channels + c];
              for (std::size_t k = 0; k < dm.states; ++k) {
                gu[(t * dm.channels + c) * dm.states + k] = g * cd[row * dm.states + k];
                if (!gC.empty()) gC[row * dm.states + k] += g * u[(t * dm.channels + c) * dm.states + k];
              }
            }
          }
          reverse_recurrence(ad.data() + b * per, gu.get(), dm.steps, lanes);
          for (std::size_t t = 0; t < dm.steps; ++t) {
            const std::size_t row = b * dm.steps + t;
            for (std::size_t c = 0; c < dm.channels; ++c) {
              const double xv = xd[row * dm.channels + c];
              double gxv = 0.0;
              for (std::size_t k = 0; k < dm.states; ++k) {
                const std::size_t li = (t * dm.channels + c) * dm.states + k;
                const double g = gu[li];
                if (!gA.empty() && t > 0) gA[b * per + li] += g * u[li - lanes];
                if (!gB.empty()) gB[b * per + li] += g * xv;
                gxv += g * bd[b * per + li];
              }
              if (!gx.empty()) gx[row * dm.channels + c] += gxv;
            }
          }
        }
      });
}

Tensor selective_ssm(const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C,
                     const Tensor& x, ScanMode mode) {
  if (delta.ndim() < 2 || A.ndim() != 2) throw DimensionError("selective_ssm: bad ranks");
  const Shape lead = leading(delta.shape(), 2);
  SsmDims dm;
  dm.batch = shape_size(lead);
  dm.steps = delta.shape()[delta.ndim() - 2];
  dm.channels = delta.shape().back();
  dm.states = A.dim(1);
  expect_shape("selective_ssm", "A", A, {dm.channels, dm.states});
  expect_shape("selective_ssm", "B", B, with_tail(lead, {dm.steps, dm.states}));
  expect_shape("selective_ssm", "C", C, with_tail(lead, {dm.steps, dm.states}));
  expect_shape("selective_ssm", "x", x, delta.shape());
  check_positive("selective_ssm", delta);

  const std::size_t lanes = dm.channels * dm.states;
  const std::size_t per = dm.steps * lanes;
  auto decay = scratch(dm.batch * per);
  auto states = scratch(dm.batch * per);
  Tensor y(delta.shape());
  {
    const auto dd = delta.data();
    const auto Ad = A.data();
    const auto Bd = B.data();
    const auto cd = C.data();
    const auto xd = x.data();
    auto yd = y.mutable_data();
    for (std::size_t b = 0; b < dm.batch; ++b) {
      double* a = decay.get() + b * per;
      double* u = states.get() + b * per;
      for (std::size_t t = 0; t < dm.steps; ++t) {
        const std::size_t row = b * dm.steps + t;
        for (std::size_t c = 0; c < dm.channels; ++c) {
          const double dt = dd[row * dm.channels + c];
          const double dx = dt * xd[row * dm.channels + c];
          const std::size_t base = (t * dm.channels + c) * dm.states;
          for (std::size_t k = 0; k < dm.states; ++k) {
            a[base + k] = dt * Ad[c * dm.states + k];
            u[base + k] = dx * Bd[row * dm.states + k];
          }
        }
      }
      exp_inplace(a, per);
      linear_recurrence(mode, a, u, u, dm.steps, lanes);
      for (std::size_t t = 0; t < dm.steps; ++t) {
        const std::size_t row = b * dm.steps + t;
        const double* ct = cd.data() + row * dm.states;
        for (std::size_t c = 0; c < dm.channels; ++c) {
          const double* ut = u + (t * dm.channels + c) * dm.states;
          double acc = 0.0;
          for (std::size_t k = 0; k < dm.states; ++k) acc += ct[k] * ut[k];
          yd[row * dm.channels + c] = acc;
        }
      }
    }
  }

  return OpRecorder::finish(
      "selective_ssm", y, {&delta, &A, &B, &C, &x},
      [dm, decay, states, delta, A, B, C, x](BackwardContext& ctx) {
        const std::size_t lanes = dm.channels * dm.states;
        const std::size_t per = dm.steps * lanes;
        const auto gy = ctx.grad_out();
        const auto dd = delta.data();
        const auto Ad = A.data();
        const auto Bd = B.data();
        const auto cd = C.data();
        const auto xd = x.data();
        auto gd = ctx.grad_in(0);
        auto gA = ctx.grad_in(1);
        auto gB = ctx.grad_in(2);
        auto gC = ctx.grad_in(3);
        auto gx = ctx.grad_in(4);
        const std::unique_ptr<double[]> gu(new double[per]);
        for (std::size_t b = 0; b < dm.batch; ++b) {
          const double* a = decay.get() + b * per;
          const double* u = states.get() + b * per;
          for (std::size_t t = 0; t < dm.steps; ++t) {
            const std::size_t row = b * dm.steps + t;
            for (std::size_t c = 0; c < dm.channels; ++c) {
              const double g = gy[row * dm.channels + c];
              const std::size_t base = (t * dm.channels + c) * dm.states;
              for (std::size_t k = 0; k < dm.states; ++k) {
                gu[base + k] = g * cd[row * dm.states + k];
                if (!gC.empty()) gC[row * dm.states + k] += g * u[base + k];
              }
            }
          }
          reverse_recurrence(a, gu.get(), dm.steps, lanes);
          for (std::size_t t = 0; t < dm.steps; ++t) {
            const std::size_t row = b * dm.steps + t;
            for (std::size_t c = 0; c < dm.channels; ++c) {
              const double dt = dd[row * dm.channels + c];
              const double xv = xd[row * dm.channels + c];
              const std::size_t base = (t * dm.channels + c) * dm.states;
              double g_dt = 0.0;
              double g_x = 0.0;
              for (std::size_t k = 0; k < dm.states; ++k) {
                const double g = gu[base + k];
                const double bk = Bd[row * dm.states + k];
                // Drive term dt * x * B.
                g_dt += g * xv * bk;
                g_x += g * dt * bk;
                if (!gB.empty()) gB[row * dm.states + k] += g * dt * xv;
                // Decay term exp(dt * A) multiplies the previous state.
                if (t > 0) {
                  const double ga = g * u[base + k - lanes] * a[base + k];
                  g_dt += ga * Ad[c * dm.states + k];
                  if (!gA.empty()) gA[c * dm.states + k] += ga * dt;
                }
              }
              if (!gd.empty()) gd[row * dm.channels + c] += g_dt;
              if (!gx.empty()) gx[row * dm.channels + c] += g_x;
            }
          }
        }
      });
}

}  // namespace stm3
