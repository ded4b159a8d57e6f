#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "commands.hpp"
#include "stm3/agccn.hpp"
#include "stm3/grad_check.hpp"
#include "stm3/moe.hpp"
#include "stm3/ops.hpp"
#include "stm3/scan.hpp"

namespace stm3::cli {

namespace {

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.mutable_data()) v = u(rng);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

ModelConfig small_model() {
  ModelConfig c;
  c.T = 8;
  c.tau = 3;
  c.N = 3;
  c.d = 4;
  c.d_e = 3;
  c.d_low = 2;
  c.d_state = 3;
  c.Q = 2;
  c.K = 2;
  c.L = 1;
  c.contrastive.lambda = 0.5;
  return c;
}

struct Reporter {
  int failures = 0;
  void line(const std::string& suite, const std::string& check, bool ok, double value, double limit) {
    std::printf("%s %s/%s value=%.3e limit=%.3e\n", ok ? "PASS" : "FAIL", suite.c_str(), check.c_str(), value, limit);
    if (!ok) ++failures;
  }
};

void suite_scan(Reporter& rep) {
  constexpr double kTol = 1e-9;
  std::mt19937_64 rng(101);
  double raw = 0.0;
  for (std::size_t steps : {1, 2, 3, 7, 12, 33, 64, 100}) {
    const std::size_t lanes = 5;
    const Tensor a = uniform({steps, lanes}, rng, 0.0, 1.0);
    const Tensor b = uniform({steps, lanes}, rng);
    std::vector<double> loop(steps * lanes), seq(steps * lanes), par(steps * lanes);
    for (std::size_t l = 0; l < lanes; ++l) {
      double u = 0.0;
      for (std::size_t t = 0; t < steps; ++t) {
        u = a[t * lanes + l] * u + b[t * lanes + l];
        loop[t * lanes + l] = u;
      }
    }
    linear_recurrence_seq(a.data().data(), b.data().data(), seq.data(), steps, lanes);
    linear_recurrence_par(a.data().data(), b.data().data(), par.data(), steps, lanes);
    for (std::size_t i = 0; i < loop.size(); ++i) {
      const double s = std::max(1.0, std::fabs(loop[i]));
      raw = std::max({raw, std::fabs(seq[i] - loop[i]) / s, std::fabs(par[i] - loop[i]) / s});
    }
  }
  rep.line("scan", "recurrence_vs_loop", raw <= kTol, raw, kTol);

  double sel = 0.0, fused = 0.0;
  for (std::size_t T : {1, 5, 12, 31}) {
    const std::size_t Bt = 2, c = 3, n = 4;
    const Tensor delta = uniform({Bt, T, c}, rng, 0.01, 0.5);
    const Tensor A = uniform({c, n}, rng, -2.0, -0.1);
    const Tensor B = uniform({Bt, T, n}, rng);
    const Tensor C = uniform({Bt, T, n}, rng);
    const Tensor x = uniform({Bt, T, c}, rng);
    const auto [Ab, Bb] = discretize(delta, A, B);
    const Tensor ys = selective_scan_seq(Ab, Bb, C, x);
    const Tensor yp = selective_scan_par(Ab, Bb, C, x);
    sel = std::max(sel, max_abs_diff(ys, yp));
    fused = std::max({fused, max_abs_diff(ys, selective_ssm(delta, A, B, C, x, ScanMode::sequential)),
                      max_abs_diff(ys, selective_ssm(delta, A, B, C, x, ScanMode::parallel))});
  }
  rep.line("scan", "selective_seq_vs_par", sel <= kTol, sel, kTol);
  rep.line("scan", "fused_vs_discretized", fused <= kTol, fused, kTol);
}

void suite_grad(Reporter& rep) {
  constexpr double kTol = 1e-4;
  for (RoutingSource source : {RoutingSource::node_embedding, RoutingSource::input}) {
    for (Variant variant : {Variant::stm3, Variant::stm2}) {
      if (variant == Variant::stm2 && source == RoutingSource::input) continue;
      ModelConfig c = small_model();
      c.routing = source;
      c.variant = variant;
      const ModelParams p = init_params(c, 15);
      std::mt19937_64 rng(16);
      const Tensor X = uniform({c.T, c.N, c.C}, rng);
      const Tensor Y = uniform({c.tau, c.N, c.C}, rng);
      std::vector<Tensor> params;
      for (const auto& t : named_parameters(p)) params.push_back(t.tensor);
      GradCheckOptions opts;
      opts.sample_coordinates = 24;
      opts.seed = 17;
      opts.resolution_floor = 1e-6;
      const GradCheckReport r = grad_check(
          [&] {
            std::mt19937_64 noise(18);
            return window_loss(stm3_forward(X, p, c, true, &noise), Y, c).total;
          },
          params, opts);
      const std::string name = std::string(variant == Variant::stm3 ? "stm3" : "stm2") +
                               (source == RoutingSource::input ? "_input_routing" : "");
      rep.line("grad", name, r.max_relative_error < kTol, r.max_relative_error, kTol);
    }
  }
}

void suite_causal_mask(Reporter& rep) {
  const std::size_t Q = 4;
  const Tensor mask = causal_scale_mask(Q);
  bool oriented = true;
  for (std::size_t p = 0; p < Q; ++p)
    for (std::size_t j = 0; j < Q; ++j) {
      const double v = mask.at({p, j});
      oriented = oriented && (j >= p ? v == 0.0 : std::isinf(v) && v < 0.0);
    }
  rep.line("causal-mask", "orientation", oriented, oriented ? 0.0 : 1.0, 0.0);

  // Perturbing finer scales must leave every coarser-or-equal output untouched.
  ModelConfig c = small_model();
  c.Q = Q;
  c.d = 3;
  const ModelParams params = init_params(c, 3);
  ScaleAttentionParams attn = params.layers[0].agccn.attn;
  std::mt19937_64 rng(5);
  for (Tensor* w : {&attn.wq, &attn.wk, &attn.wv}) *w = uniform(w->shape(), rng);
  double leak = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 6;
    const Tensor x = uniform({rows, Q, c.d}, rng);
    const Tensor y = causal_scale_attention(x, attn);
    for (std::size_t ps = 1; ps < Q; ++ps) {
      Tensor pert = x.clone();
      auto pd = pert.mutable_data();
      std::uniform_real_distribution<double> u(-3, 3);
      for (std::size_t s = 0; s < rows; ++s)
        for (std::size_t q = 0; q < ps; ++q)
          for (std::size_t i = 0; i < c.d; ++i) pd[(s * Q + q) * c.d + i] += u(rng);
      const Tensor yp = causal_scale_attention(pert, attn);
      for (std::size_t s = 0; s < rows; ++s)
        for (std::size_t q = ps; q < Q; ++q)
          for (std::size_t i = 0; i < c.d; ++i) leak = std::max(leak, std::fabs(yp.at({s, q, i}) - y.at({s, q, i})));
    }
  }
  rep.line("causal-mask", "no_fine_to_coarse_flow", leak == 0.0, leak, 0.0);
}

void suite_routing(Reporter& rep) {
  std::mt19937_64 rng(9);
  const std::size_t M = 6, K = 3;
  const Tensor inputs = uniform({M, 4}, rng);
  const Tensor gate = uniform({4, K}, rng);

  const RoutingDecision e1 = route(inputs, gate, 0.1, false, nullptr);
  const RoutingDecision e2 = route(inputs, gate, 0.1, false, nullptr);
  bool argmax_ok = e1.selected == e2.selected;
  for (std::size_t m = 0; m < M; ++m) argmax_ok = argmax_ok && e1.selected[m] == argmax_first(&e1.logits.data()[m * K], K);
  rep.line("routing", "eval_is_deterministic_argmax", argmax_ok, argmax_ok ? 0.0 : 1.0, 0.0);

  double noise_max = 0.0, noise_min = 1.0;
  for (int trial = 0; trial < 200; ++trial) {
    const RoutingDecision d = route(inputs, gate, 0.1, true, &rng);
    for (double v : d.noise.data()) {
      noise_max = std::max(noise_max, v);
      noise_min = std::min(noise_min, v);
    }
  }
  rep.line("routing", "noise_within_bound", noise_min >= 0.0 && noise_max <= 0.1, noise_max, 0.1);

  // Near-identical rows disagree no more often than the bound allows.
  const double r = 0.05;
  double worst = 0.0;
  for (double spread : {1e-4, 1e-3, 3e-3}) {
    Tensor H = uniform({4, 2}, rng, -spread, spread);
    const DisagreementEstimate est = routing_disagreement_mc(H, r, 20000, rng);
    const double bound = routing_bound(H, r);
    worst = std::max(worst, est.probability - 3.0 * est.standard_error - bound);
  }
  rep.line("routing", "disagreement_below_bound", worst <= 0.0, worst, 0.0);
}

}  // namespace

int run_verify(const VerifyArgs& args) {
  Reporter rep;
  const bool all = args.suite == "all";
  if (all || args.suite == "scan") suite_scan(rep);
  if (all || args.suite == "grad") suite_grad(rep);
  if (all || args.suite == "causal-mask") suite_causal_mask(rep);
  if (all || args.suite == "routing") suite_routing(rep);
  std::printf("%s %d failure(s)\n", rep.failures == 0 ? "OK" : "FAILED", rep.failures);
  return rep.failures == 0 ? 0 : 1;
}

}  // namespace stm3::cli
