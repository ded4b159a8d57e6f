#include "stm3/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "stm3/error.hpp"

namespace stm3 {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
  NoGradScope no_grad;
  const Tensor y = f();
  if (y.size() != 1) throw ArgumentError("grad_check: function must return a scalar");
  const double v = y.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: function returned a non-finite value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           const GradCheckOptions& options) {
  if (options.eps <= 0) throw ArgumentError("grad_check: eps must be positive");
  for (const Tensor& p : params) {
    if (!p.requires_grad()) throw ArgumentError("grad_check: every parameter must require grad");
  }

  Gradients grads;
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: function returned a non-finite value");
    grads = tape.backward(loss);
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t i = 0; i < params[p].size(); ++i) coords.emplace_back(p, i);
  const bool sampling = options.sample_coordinates > 0 && options.sample_coordinates < coords.size();
  if (sampling) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
  }
  const std::size_t wanted = sampling ? options.sample_coordinates : coords.size();

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(grads.of(p));

  GradCheckReport report;
  std::size_t checked = 0;
  for (auto [p, i] : coords) {
    if (checked == wanted) break;
    Tensor param = params[p];
    auto data = param.mutable_data();
    const double orig = data[i];
    data[i] = orig + options.eps;
    const double up = eval_scalar(f);
    data[i] = orig - options.eps;
    const double down = eval_scalar(f);
    data[i] = orig;
    const double fd = (up - down) / (2.0 * options.eps);
    const double ga = analytic[p][i];
    if (options.resolution_floor > 0 && std::max(std::abs(ga), std::abs(fd)) < options.resolution_floor) {
      ++report.unresolved;
      report.unresolved_max_abs = std::max(report.unresolved_max_abs, std::abs(ga - fd));
      continue;
    }
    ++checked;
    const double rel = std::abs(ga - fd) / std::max(1e-8, std::abs(ga) + std::abs(fd));
    if (rel >= report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_param = p;
      report.worst_index = i;
      report.worst_analytic = ga;
      report.worst_numeric = fd;
    }
  }
  report.coordinates = checked;
  return report;
}

}  // namespace stm3
