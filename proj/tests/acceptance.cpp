// Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any hard failure.
#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stm3/agccn.hpp"
#include "stm3/backbone.hpp"
#include "stm3/datakit.hpp"
#include "stm3/grad_check.hpp"
#include "stm3/mamba.hpp"
#include "stm3/moe.hpp"
#include "stm3/objectives.hpp"
#include "stm3/ops.hpp"
#include "stm3/scan.hpp"
#include "stm3/trainer.hpp"
#include "test_util.hpp"

using namespace stm3;
using stm3::testing::bit_equal;
using stm3::testing::max_abs_diff;
using stm3::testing::random_param;
using stm3::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kScanTol = 1e-9;
constexpr double kScanSeconds = 30.0;
constexpr double kPrimitiveGradTol = 1e-5;
constexpr double kModelGradTol = 1e-4;
constexpr double kGradSeconds = 120.0;
constexpr double kGradEps = 1e-5;
// Coordinates with |g| below the floor sit at finite-difference roundoff;
// they are held to an absolute bound instead of the relative one.
constexpr double kGradFloor = 1e-6;
constexpr double kGradFloorAbs = 1e-9;
constexpr double kRoutingSeconds = 60.0;
constexpr double kPersistenceRatio = 0.8;
constexpr double kStm2Slack = 1.05;
constexpr double kTrainSecondsOn4Cores = 600.0;
constexpr double kPurity = 0.8;
// Purity is a mean of node-count fractions; allow for the rounding of that mean.
constexpr double kPuritySlack = 1e-12;
constexpr double kOracleTol = 1e-10;

constexpr double kInf = std::numeric_limits<double>::infinity();

int hard_failures = 0;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void report(const char* id, bool ok, const std::string& detail, bool soft = false) {
  const char* tag = ok ? "PASS" : (soft ? "SOFT-FAIL" : "FAIL");
  std::printf("[%s] criterion %s: %s\n", tag, id, detail.c_str());
  std::fflush(stdout);
  if (!ok && !soft) ++hard_failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------- 1

void criterion_scan() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::size_t> len(1, 256);
  const std::size_t c = 8, n = 4;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = trial == 0 ? 256 : len(rng);
    const Tensor delta = random_tensor({T, c}, rng, 0.001, 1.0);
    const Tensor A = random_tensor({c, n}, rng, -3.0, -0.01);
    const Tensor B = random_tensor({T, n}, rng);
    const Tensor C = random_tensor({T, n}, rng);
    const Tensor x = random_tensor({T, c}, rng);
    const auto [Ab, Bb] = discretize(delta, A, B);
    worst = std::max(worst, max_abs_diff(selective_scan_par(Ab, Bb, C, x), selective_scan_seq(Ab, Bb, C, x)));
  }
  const double secs = seconds_since(t0);
  report("1 scan equivalence", worst < kScanTol && secs < kScanSeconds,
         fmt("max |par - seq| = %.3e", worst) + fmt(" (limit %.0e)", kScanTol) + fmt(", %.2f s", secs));
}

// ---------------------------------------------------------------- 2

Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

void criterion_grad() {
  const auto t0 = Clock::now();
  GradCheckOptions opt;
  opt.eps = kGradEps;
  std::mt19937_64 rng(2002);
  struct Case {
    std::string name;
    std::function<Tensor()> f;
    std::vector<Tensor> params;
  };
  std::vector<Case> cases;
  auto grad_case = [&](std::string name, std::function<Tensor()> f, std::vector<Tensor> params) {
    cases.push_back({std::move(name), [f] { return weighted_sum(f(), 77); }, std::move(params)});
  };

  Tensor a = random_param({2, 3, 4}, rng), b = random_param({4, 5}, rng), bias5 = random_param({5}, rng);
  grad_case("matmul", [=] { return matmul(a, b); }, {a, b});
  grad_case("linear", [=] { return linear(a, b, bias5); }, {a, b, bias5});
  Tensor p = random_param({3, 2, 4}, rng), q = random_param({3, 4, 2}, rng), r = random_param({3, 5, 4}, rng);
  grad_case("bmm", [=] { return bmm(p, q); }, {p, q});
  grad_case("bmm_t", [=] { return bmm(p, r, true); }, {p, r});

  Tensor x = random_param({3, 4}, rng), y = random_param({3, 4}, rng), bias4 = random_param({4}, rng);
  Tensor x3 = random_param({3, 2, 4}, rng), rows = random_param({3, 4}, rng);
  grad_case("add", [=] { return add(x, y); }, {x, y});
  grad_case("sub", [=] { return sub(x, y); }, {x, y});
  grad_case("mul", [=] { return mul(x, y); }, {x, y});
  grad_case("add_bias", [=] { return add_bias(x, bias4); }, {x, bias4});
  grad_case("add_rowwise", [=] { return add_rowwise(x3, rows); }, {x3, rows});
  grad_case("scale", [=] { return scale(x, -2.5); }, {x});
  grad_case("add_scalar", [=] { return add_scalar(x, 0.3); }, {x});
  grad_case("square", [=] { return square(x); }, {x});

  const char* act_names[] = {"relu", "tanh", "silu", "softplus", "exp", "sigmoid", "abs"};
  int ai = 0;
  for (Activation kind : {Activation::relu, Activation::tanh, Activation::silu, Activation::softplus,
                          Activation::exp, Activation::sigmoid, Activation::abs}) {
    Tensor v = random_param({3, 5}, rng, 0.1, 1.5);
    auto vd = v.mutable_data();
    for (std::size_t i = 0; i < vd.size(); i += 2) vd[i] = -vd[i];
    grad_case(act_names[ai++], [=] { return activation(kind, v); }, {v});
  }

  Tensor red = random_param({2, 3, 4}, rng);
  cases.push_back({"sum", [=] { return sum(square(red)); }, {red}});
  cases.push_back({"mean", [=] { return mean(tanh(red)); }, {red}});
  for (std::size_t axis = 0; axis < 3; ++axis) grad_case("mean_axis" + std::to_string(axis), [=] { return mean_axis(red, axis); }, {red});

  Tensor sm = random_param({3, 5}, rng, -2, 2), gain = random_param({5}, rng), lnb = random_param({5}, rng);
  grad_case("softmax", [=] { return softmax_lastdim(sm); }, {sm});
  grad_case("layer_norm", [=] { return layer_norm(sm, gain, lnb); }, {sm, gain, lnb});
  Tensor att = random_param({2, 3, 3}, rng);
  const Tensor mask = causal_scale_mask(3);
  grad_case("masked_softmax", [=] { return masked_softmax_lastdim(att, mask); }, {att});

  Tensor s1 = random_param({4, 3, 2}, rng), s2 = random_param({4, 3, 3}, rng);
  grad_case("reshape", [=] { return reshape(s1, {2, 12}); }, {s1});
  grad_case("permute", [=] { return permute(s1, {1, 2, 0}); }, {s1});
  grad_case("slice_last", [=] { return slice_last(s2, 1, 2); }, {s2});
  grad_case("concat_last", [=] { return concat_last({s1, s2}); }, {s1, s2});
  grad_case("concat_rows", [=] { return concat_rows({s1, s1}); }, {s1});
  grad_case("gather_rows", [=] { return gather_rows(s1, {3, 0, 3}); }, {s1});
  grad_case("scatter_rows", [=] { return scatter_rows(s1, {5, 1, 0, 2}, 6); }, {s1});

  Tensor cx = random_param({2, 6, 4}, rng), ck = random_param({3, 2, 4}, rng), dk = random_param({3, 1, 4}, rng);
  grad_case("conv1d_grouped", [=] { return conv1d_causal(cx, ck, 2); }, {cx, ck});
  grad_case("conv1d_depthwise", [=] { return conv1d_causal(cx, dk, 4); }, {cx, dk});
  Tensor ca = random_param({4, 3}, rng), cb = random_param({5, 3}, rng);
  grad_case("cosine", [=] { return cosine_similarity(ca, cb); }, {ca, cb});

  // State-space primitives.
  const std::size_t T = 7, c = 3, n = 2;
  Tensor delta = random_param({2, T, c}, rng, 0.05, 0.8), A = random_param({c, n}, rng, -2.0, -0.2);
  Tensor B = random_param({2, T, n}, rng), C = random_param({2, T, n}, rng), sx = random_param({2, T, c}, rng);
  Tensor Ab = random_param({2, T, c, n}, rng, 0.1, 0.95), Bb = random_param({2, T, c, n}, rng);
  grad_case("discretize", [=] {
    auto [ab, bb] = discretize(delta, A, B);
    return concat_last({ab, bb});
  }, {delta, A, B});
  for (ScanMode mode : {ScanMode::sequential, ScanMode::parallel}) {
    const std::string tag = mode == ScanMode::sequential ? "_seq" : "_par";
    grad_case("selective_scan" + tag, [=] { return selective_scan(Ab, Bb, C, sx, mode); }, {Ab, Bb, C, sx});
    grad_case("selective_ssm" + tag, [=] { return selective_ssm(delta, A, B, C, sx, mode); }, {delta, A, B, C, sx});
  }

  // Loss primitives.
  Tensor lp = random_param({3, 4}, rng), lt = random_tensor({3, 4}, rng);
  cases.push_back({"prediction_loss_sq", [=] { return prediction_loss(lp, lt, LossKind::squared); }, {lp}});
  cases.push_back({"prediction_loss_abs", [=] { return prediction_loss(lp, lt, LossKind::absolute); }, {lp}});
  std::vector<FeatureTag> tags;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t s = 1; s <= 3; ++s) tags.push_back({i, i % 2, s});
  Tensor feats = random_param({tags.size(), 4}, rng);
  ContrastiveConfig ccfg;
  cases.push_back({"causal_contrastive", [=] {
                     const auto l = causal_contrastive_losses(feats, tags, 2, ccfg);
                     return add(l[0], scale(l[1], 0.7));
                   },
                   {feats}});

  double worst_prim = 0.0;
  std::string worst_name;
  for (const Case& cs : cases) {
    const double e = grad_check(cs.f, cs.params, opt).max_relative_error;
    if (e > worst_prim) {
      worst_prim = e;
      worst_name = cs.name;
    }
  }

  // Tiny model, full training-mode loss.
  ModelConfig cfg;
  cfg.T = 8;
  cfg.tau = 3;
  cfg.N = 3;
  cfg.d = 4;
  cfg.d_e = 3;
  cfg.d_low = 2;
  cfg.d_state = 3;
  cfg.Q = 2;
  cfg.K = 2;
  cfg.L = 1;
  cfg.contrastive.lambda = 0.5;
  const ModelParams mp = init_params(cfg, 15);
  const Tensor X = random_tensor({cfg.T, cfg.N, cfg.C}, rng);
  const Tensor Y = random_tensor({cfg.tau, cfg.N, cfg.C}, rng);
  std::vector<Tensor> params;
  for (const auto& t : named_parameters(mp)) params.push_back(t.tensor);
  GradCheckOptions mopt = opt;
  mopt.sample_coordinates = 16;
  mopt.seed = 17;
  mopt.resolution_floor = kGradFloor;
  const GradCheckReport model = grad_check(
      [&] {
        std::mt19937_64 noise(18);
        return window_loss(stm3_forward(X, mp, cfg, true, &noise), Y, cfg).total;
      },
      params, mopt);

  const double secs = seconds_since(t0);
  const bool ok = worst_prim < kPrimitiveGradTol && model.max_relative_error < kModelGradTol &&
                  model.coordinates == 16 && model.unresolved_max_abs < kGradFloorAbs && secs < kGradSeconds;
  report("2 gradient integrity", ok,
         std::to_string(cases.size()) + " primitives, worst " + fmt("%.3e", worst_prim) + " (" + worst_name +
             fmt(", limit %.0e)", kPrimitiveGradTol) + "; STM3 loss " + fmt("%.3e", model.max_relative_error) +
             " on " + std::to_string(model.coordinates) + fmt(" coordinates (limit %.0e)", kModelGradTol) + ", " +
             std::to_string(model.unresolved) + fmt(" sub-floor coordinates within %.1e", model.unresolved_max_abs) +
             fmt(", %.1f s", secs));
}

// ---------------------------------------------------------------- 3

void criterion_causal() {
  std::mt19937_64 rng(3003);
  const std::size_t Q = 4;
  std::size_t violations = 0, checked = 0;
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t N = 2 + trial % 4, T = 1 + trial % 5, d = 2 + trial % 3, d_e = 2, d_low = 2;
    AgccnParams p;
    p.gcn.node_emb = random_tensor({N, d_e}, rng);
    p.gcn.gcn_emb = random_tensor({N, d_low}, rng);
    p.gcn.gcn_weight = random_tensor({d_low, d, d}, rng, -0.5, 0.5);
    p.gcn.gcn_bias = random_tensor({d_low, d}, rng);
    p.attn.wq = random_tensor({d, d}, rng);
    p.attn.wk = random_tensor({d, d}, rng);
    p.attn.wv = random_tensor({d, d}, rng);
    p.attn.wo = random_tensor({d, d}, rng);
    p.attn.ln_gain = random_tensor({d}, rng, 0.5, 1.5);
    p.attn.ln_bias = random_tensor({d}, rng);
    const Tensor H = random_tensor({N, T, Q, d}, rng);
    const Tensor out = agccn_forward(H, p);
    const std::size_t ps = 1 + trial % (Q - 1);
    Tensor pert = H.clone();
    auto pd = pert.mutable_data();
    for (std::size_t row = 0; row < N * T; ++row)
      for (std::size_t qq = 0; qq < ps; ++qq)
        for (std::size_t i = 0; i < d; ++i) pd[(row * Q + qq) * d + i] += u(rng);
    const Tensor po = agccn_forward(pert, p);
    for (std::size_t row = 0; row < N * T; ++row)
      for (std::size_t qq = ps; qq < Q; ++qq)
        for (std::size_t i = 0; i < d; ++i) {
          const std::size_t at = (row * Q + qq) * d + i;
          ++checked;
          if (po[at] != out[at]) ++violations;
        }
  }

  std::size_t t_violations = 0, t_checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2, Qm = 1 + trial % 3, T = 3 + trial % 14;
    const MambaDims m = resolve_mamba_dims(d, Qm, 0, 3);
    const MambaParams mp = init_mamba(m, ScaleConfig::defaults(Qm), rng);
    const Tensor x = random_tensor({2, T, Qm, d}, rng);
    const Tensor y = multiscale_mamba_forward(x, mp, m, trial % 2 ? ScanMode::parallel : ScanMode::sequential);
    const std::size_t cut = trial % T;
    const std::size_t W = Qm * d;
    Tensor pert = x.clone();
    auto pd = pert.mutable_data();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t s = cut + 1; s < T; ++s)
        for (std::size_t j = 0; j < W; ++j) pd[(b * T + s) * W + j] += u(rng);
    const Tensor yp = multiscale_mamba_forward(pert, mp, m, trial % 2 ? ScanMode::parallel : ScanMode::sequential);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t s = 0; s <= cut; ++s)
        for (std::size_t j = 0; j < W; ++j) {
          ++t_checked;
          if (yp[(b * T + s) * W + j] != y[(b * T + s) * W + j]) ++t_violations;
        }
  }
  report("3 causal hierarchy", violations == 0 && t_violations == 0,
         "AGCCN scale mask: " + std::to_string(violations) + " violations in " + std::to_string(checked) +
             " outputs over 200 trials; Mamba time causality: " + std::to_string(t_violations) + " violations in " +
             std::to_string(t_checked) + " outputs over 200 trials");
}

// ---------------------------------------------------------------- 4

void criterion_routing() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(4004);
  const double b = 0.1;

  // (a) Two different windows, same node, same noise draw: node-embedding
  // routing never disagrees, whatever the parameters.
  ModelConfig cfg;
  cfg.T = 8;
  cfg.tau = 3;
  cfg.N = 4;
  cfg.d = 4;
  cfg.d_e = 3;
  cfg.d_low = 2;
  cfg.d_state = 3;
  cfg.Q = 2;
  cfg.K = 3;
  cfg.L = 2;
  cfg.noise_bound = b;
  std::size_t disagreements = 0, draws = 0;
  double input_mc = 0.0;
  {
    NoGradScope no_grad;
    const std::size_t states = 5, per_state = 2000;
    for (std::size_t s = 0; s < states; ++s) {
      ModelParams p = init_params(cfg, 40 + s);
      // Arbitrary parameter state: scramble gates and embeddings.
      for (LayerParams& l : p.layers) {
        for (Tensor* t : {&l.gate_w, &l.agccn.gcn.node_emb}) {
          const double spread = std::pow(10.0, static_cast<double>(s) - 2.0);
          for (double& v : t->mutable_data()) v = std::uniform_real_distribution<double>(-spread, spread)(rng);
        }
      }
      const Tensor X1 = random_tensor({cfg.T, cfg.N, cfg.C}, rng, -3, 3);
      const Tensor X2 = random_tensor({cfg.T, cfg.N, cfg.C}, rng, -3, 3);
      for (std::size_t k = 0; k < per_state; ++k) {
        std::mt19937_64 r1(k), r2(k);
        const ForwardResult f1 = stm3_forward(X1, p, cfg, true, &r1);
        const ForwardResult f2 = stm3_forward(X2, p, cfg, true, &r2);
        for (std::size_t l = 0; l < cfg.L; ++l)
          for (std::size_t n = 0; n < cfg.N; ++n) {
            ++draws;
            if (f1.layers[l].routing.selected[n] != f2.layers[l].routing.selected[n]) ++disagreements;
          }
      }
      // Ablation for contrast: gating on the layer input.
      ModelConfig ic = cfg;
      ic.routing = RoutingSource::input;
      const ModelParams pi = init_params(ic, 40 + s);
      const ForwardResult g1 = stm3_forward(X1, pi, ic, false);
      const ForwardResult g2 = stm3_forward(X2, pi, ic, false);
      for (std::size_t n = 0; n < cfg.N; ++n) {
        Tensor H({2, cfg.K});
        auto hd = H.mutable_data();
        for (std::size_t k = 0; k < cfg.K; ++k) {
          hd[k] = g1.layers[0].routing.logits[n * cfg.K + k];
          hd[cfg.K + k] = g2.layers[0].routing.logits[n * cfg.K + k];
        }
        input_mc = std::max(input_mc, routing_disagreement_mc(H, b, 2000, rng).probability);
      }
    }
  }
  // Per-node logit rows from different windows are identical; the estimator
  // itself must then return exactly zero over 10^4 draws.
  ModelParams p = init_params(cfg, 41);
  double exact_mc = 0.0;
  {
    NoGradScope no_grad;
    const ForwardResult f1 = stm3_forward(random_tensor({cfg.T, cfg.N, cfg.C}, rng), p, cfg, false);
    const ForwardResult f2 = stm3_forward(random_tensor({cfg.T, cfg.N, cfg.C}, rng), p, cfg, false);
    for (std::size_t l = 0; l < cfg.L; ++l)
      for (std::size_t n = 0; n < cfg.N; ++n) {
        Tensor H({2, cfg.K});
        auto hd = H.mutable_data();
        for (std::size_t k = 0; k < cfg.K; ++k) {
          hd[k] = f1.layers[l].routing.logits[n * cfg.K + k];
          hd[cfg.K + k] = f2.layers[l].routing.logits[n * cfg.K + k];
        }
        exact_mc = std::max(exact_mc, routing_disagreement_mc(H, b, 10000, rng).probability);
      }
  }
  const bool ok_a = disagreements == 0 && draws >= 10000 && exact_mc == 0.0;

  // (b) M = 2, K = 2 with h_2 - h_1 = (b, 0): disagreement probability 1/2.
  const DisagreementEstimate e = routing_disagreement_mc(Tensor({2, 2}, {0, 0, b, 0}), b, 100000, rng);
  const bool ok_b = std::fabs(e.probability - 0.5) <= 3 * e.standard_error;

  // (c) Random gates over nearby inputs.
  std::size_t c_fail = 0;
  double tightest = kInf;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t M = 2 + trial % 5, K = 2 + trial % 3, d_in = 4;
    const Tensor gate = random_tensor({d_in, K}, rng);
    const Tensor base = random_tensor({1, d_in}, rng);
    const double spread = 0.002 * (1 + trial % 10);
    Tensor inputs({M, d_in});
    auto id = inputs.mutable_data();
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t i = 0; i < d_in; ++i)
        id[m * d_in + i] = base[i] + std::uniform_real_distribution<double>(-spread, spread)(rng);
    const Tensor H = matmul(inputs, gate);
    const DisagreementEstimate est = routing_disagreement_mc(H, b, 4000, rng);
    const double bound = routing_bound(H, b);
    tightest = std::min(tightest, bound + 3 * est.standard_error - est.probability);
    if (est.probability > bound + 3 * est.standard_error) ++c_fail;
  }
  const double secs = seconds_since(t0);
  report("4 routing disagreement", ok_a && ok_b && c_fail == 0 && secs < kRoutingSeconds,
         "(a) node-embedding routing: " + std::to_string(disagreements) + " disagreements in " +
             std::to_string(draws) + " shared-noise draws, estimator " + fmt("%.1f", exact_mc) +
             " over 10^4 draws (input routing for contrast: up to " + fmt("%.3f)", input_mc) + "; (b) estimate " +
             fmt("%.4f", e.probability) + fmt(" +- %.4f vs 0.5", e.standard_error) + "; (c) " +
             std::to_string(c_fail) + "/50 above bound + 3 SE (smallest margin " + fmt("%.4f)", tightest) +
             fmt(", %.1f s", secs));
}

// ---------------------------------------------------------------- 5-7

ModelConfig end_to_end_model() {
  ModelConfig m;
  m.d = 16;
  m.Q = 3;
  m.K = 2;
  m.L = 2;
  // Narrower SSM interior than the block default so seven 50-epoch runs fit
  // the single-machine budget.
  m.d_inner = 16;
  m.d_state = 8;
  return m;
}

struct RunOutcome {
  double test_mse = 0.0;
  std::size_t changes = 0;
  double purity = 0.0;
  bool purity_available = false;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  double seconds = 0.0;
};

RunOutcome run(const WindowedDataset& data, Variant variant, RoutingSource routing, std::uint64_t seed) {
  ModelConfig m = end_to_end_model();
  m.variant = variant;
  m.routing = routing;
  TrainConfig t;
  t.max_epochs = 50;
  t.seed = seed;
  const auto t0 = Clock::now();
  const TrainResult r = train(m, t, data);
  RunOutcome o;
  o.seconds = seconds_since(t0);
  o.test_mse = evaluate(r.best, m, data, Split::test).mse;
  o.changes = r.history.total_changes(10, 50);
  o.epochs = r.history.epochs.size();
  o.best_epoch = r.history.best_epoch;
  if (variant == Variant::stm3) {
    const SeparationReport sep = expert_separation(r.best, m, data);
    o.purity_available = sep.available;
    o.purity = sep.mean_purity;
  }
  const char* name = variant == Variant::stm2 ? "stm2" : (routing == RoutingSource::input ? "stm3/input" : "stm3/node");
  std::printf("  run %-10s seed %llu: %zu epochs (best %zu), test MSE %.5f, changes[10,50) %zu, purity %.3f, %.0f s\n",
              name, static_cast<unsigned long long>(seed), o.epochs, o.best_epoch, o.test_mse, o.changes, o.purity,
              o.seconds);
  std::fflush(stdout);
  return o;
}

void criteria_end_to_end() {
  const RawSeries raw = gen_synthetic(SyntheticSpec{}, 0);
  const WindowedDataset data = split_normalize(raw, 12, 12);
  const double persistence = evaluate_persistence(data, Split::test).mse;
  const unsigned cores = std::max(1u, std::thread::hardware_concurrency());
  // The time budget is stated for four cores; scale it when fewer are present.
  const double budget = kTrainSecondsOn4Cores * 4.0 / std::min(4u, cores);

  std::vector<RunOutcome> node, input;
  for (std::uint64_t s = 0; s < 3; ++s) node.push_back(run(data, Variant::stm3, RoutingSource::node_embedding, s));
  const RunOutcome stm2 = run(data, Variant::stm2, RoutingSource::node_embedding, 0);
  for (std::uint64_t s = 0; s < 3; ++s) input.push_back(run(data, Variant::stm3, RoutingSource::input, s));

  const RunOutcome& n0 = node[0];
  const bool beats_persistence = n0.test_mse <= kPersistenceRatio * persistence;
  const bool near_stm2 = n0.test_mse <= kStm2Slack * stm2.test_mse;
  const bool in_time = n0.seconds < budget;
  report("5 end-to-end learning", beats_persistence && near_stm2 && in_time,
         fmt("STM3 test MSE %.5f", n0.test_mse) + fmt(" vs persistence %.5f", persistence) +
             fmt(" (ratio %.3f, limit 0.8)", n0.test_mse / persistence) + fmt(" and STM2 %.5f", stm2.test_mse) +
             fmt(" (ratio %.3f, limit 1.05)", n0.test_mse / stm2.test_mse) + fmt("; %.0f s", n0.seconds) +
             fmt(" against a %.0f s budget", budget) + " (" + std::to_string(cores) + " cores)");

  int smoother = 0;
  std::string detail;
  for (std::size_t s = 0; s < 3; ++s) {
    if (node[s].changes < input[s].changes) ++smoother;
    detail += " seed " + std::to_string(s) + ": " + std::to_string(node[s].changes) + " vs " +
              std::to_string(input[s].changes) + ";";
  }
  report("6 routing smoothness", smoother >= 2,
         "assignment changes over epochs 10-50, node-embedding vs input routing:" + detail + " " +
             std::to_string(smoother) + "/3 seeds strictly smoother");

  int pure = 0;
  std::string pd;
  for (std::size_t s = 0; s < 3; ++s) {
    if (node[s].purity_available && node[s].purity >= kPurity - kPuritySlack) ++pure;
    pd += " " + fmt("%.17g", node[s].purity);
  }
  report("7 specialization (soft)", pure >= 2,
         "mean routing purity per seed:" + pd + "; " + std::to_string(pure) + "/3 seeds at or above 0.8", true);
}

// ---------------------------------------------------------------- 8

double cos_loop(const double* x, const double* y, std::size_t d) {
  double xy = 0, xx = 0, yy = 0;
  for (std::size_t i = 0; i < d; ++i) {
    xy += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  return xy / (std::sqrt(xx) * std::sqrt(yy) + 1e-12);
}

double prefactor_loop(int p, int q, double g1, double g2) {
  return p > q ? std::pow(p - q + 1, -g1) : std::pow(q - p + 1, g2);
}

// All positives and negatives enumerated directly, no cap.
double contrastive_loop(const Tensor& f, const std::vector<FeatureTag>& tags, std::size_t k,
                        const ContrastiveConfig& cfg) {
  const std::size_t d = f.dim(1);
  auto s = [&](std::size_t a, std::size_t b) {
    return cfg.theta * prefactor_loop(int(tags[a].scale), int(tags[b].scale), cfg.gamma1, cfg.gamma2) *
           cos_loop(f.data().data() + a * d, f.data().data() + b * d, d);
  };
  double total = 0.0;
  for (std::size_t a = 0; a < tags.size(); ++a) {
    if (tags[a].expert != k) continue;
    std::vector<std::size_t> pos, neg;
    for (std::size_t b = 0; b < tags.size(); ++b) {
      if (b == a) continue;
      const FeatureTag &t = tags[a], &u = tags[b];
      const bool same = u.sample == t.sample && u.expert == t.expert;
      if ((u.expert == t.expert && u.scale == t.scale && u.sample != t.sample) || (same && u.scale > t.scale))
        pos.push_back(b);
      if ((same && u.scale < t.scale) || (u.expert != t.expert && u.scale == t.scale)) neg.push_back(b);
    }
    if (pos.empty()) continue;
    double acc = 0.0;
    for (std::size_t p : pos) {
      double denom = std::exp(s(a, p));
      for (std::size_t n : neg) denom += std::exp(s(a, n));
      acc += std::log(denom) - s(a, p);
    }
    total += acc / static_cast<double>(pos.size());
  }
  return total;
}

void criterion_oracles() {
  std::mt19937_64 rng(8008);
  double worst = 0.0;
  auto track = [&](double got, double want) {
    worst = std::max(worst, std::fabs(got - want) / std::max(1.0, std::fabs(want)));
  };
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t T = 1 + trial % 5, N = 1 + trial % 4, C = 1 + trial % 2, n = T * N * C;
    const Tensor p = random_tensor({T, N, C}, rng, -5, 5);
    Tensor y = random_tensor({T, N, C}, rng, -5, 5);
    y.mutable_data()[trial % n] = 0.0;
    double ae = 0, se = 0, pe = 0;
    std::size_t pn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double e = p[i] - y[i];
      ae += std::fabs(e);
      se += e * e;
      if (std::fabs(y[i]) > 1e-6) {
        pe += std::fabs(e) / std::fabs(y[i]);
        ++pn;
      }
    }
    const Metrics m = metrics(p, y);
    track(m.mae, ae / n);
    track(m.rmse, std::sqrt(se / n));
    if (pn > 0) track(m.mape, 100.0 * pe / pn);
    track(prediction_loss(p, y, LossKind::squared).item(), se / n);
    track(prediction_loss(p, y, LossKind::absolute).item(), ae / n);

    ContrastiveConfig cfg;
    cfg.max_negatives = 1000;
    cfg.gamma1 = std::uniform_real_distribution<double>(0, 2)(rng);
    cfg.gamma2 = std::uniform_real_distribution<double>(0, 2)(rng);
    const std::size_t K = 1 + trial % 3, Q = 1 + trial % 4, samples = 2 + trial % 5;
    std::vector<FeatureTag> tags;
    for (std::size_t i = 0; i < samples; ++i) {
      const std::size_t k = std::uniform_int_distribution<std::size_t>(0, K - 1)(rng);
      for (std::size_t q = 1; q <= Q; ++q) tags.push_back({i, k, q});
    }
    const Tensor f = random_tensor({tags.size(), 3}, rng);
    const auto losses = causal_contrastive_losses(f, tags, K, cfg);
    double expert_mean = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double want = contrastive_loop(f, tags, k, cfg);
      track(losses[k].item(), want);
      expert_mean += want / static_cast<double>(K);
    }
    const double lambda = 0.3;
    const Tensor pl = prediction_loss(p, y);
    track(total_loss(pl, {losses, losses}, lambda).item(), se / n + lambda * 2 * expert_mean);
  }
  // Hand-derived prefactors, gamma1 = gamma2 = 1.
  const double table[4][4] = {{1, 2, 3, 4}, {0.5, 1, 2, 3}, {1.0 / 3, 0.5, 1, 2}, {0.25, 1.0 / 3, 0.5, 1}};
  std::size_t mismatches = 0;
  const ContrastiveConfig unit;
  for (std::size_t p = 1; p <= 4; ++p)
    for (std::size_t q = 1; q <= 4; ++q)
      if (causal_prefactor(p, q, unit) != table[p - 1][q - 1]) ++mismatches;
  report("8 metric and loss oracles", worst <= kOracleTol && mismatches == 0,
         fmt("worst relative deviation %.3e", worst) + fmt(" over 100 instances (limit %.0e)", kOracleTol) +
             "; prefactor table " + std::to_string(mismatches) + "/16 mismatches");
}

// ---------------------------------------------------------------- 9

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void criterion_determinism() {
  SyntheticSpec spec;
  spec.T_total = 400;
  const RawSeries raw = gen_synthetic(spec, 5);
  const WindowedDataset data = split_normalize(raw, 12, 12);
  ModelConfig m;
  m.d = 8;
  m.d_e = 4;
  m.d_low = 4;
  m.d_state = 4;
  TrainConfig t;
  t.max_epochs = 4;
  t.batch_size = 32;
  t.seed = 9;
  const fs::path root = fs::temp_directory_path() / "stm3_acceptance_determinism";
  fs::remove_all(root);
  for (int i = 0; i < 2; ++i) {
    const TrainResult r = train(m, t, data);
    const fs::path dir = root / std::to_string(i);
    fs::create_directories(dir);
    save_history_csv(dir / "history.csv", r.history);
    save_checkpoint(dir / "checkpoint", m, r.best, t.seed);
  }
  bool same = slurp(root / "0" / "history.csv") == slurp(root / "1" / "history.csv");
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(root / "0" / "checkpoint")) {
    ++files;
    const fs::path other = root / "1" / "checkpoint" / e.path().filename();
    same = same && fs::exists(other) && slurp(e.path()) == slurp(other);
  }
  std::size_t files_b = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(root / "1" / "checkpoint")) ++files_b;
  same = same && files == files_b && files > 0;
  const bool nonempty = !slurp(root / "0" / "history.csv").empty();
  report("9 determinism", same && nonempty,
         std::string(same ? "identical" : "different") + " history CSV and " + std::to_string(files) +
             " checkpoint files across two seeded runs");
  fs::remove_all(root);
}

}  // namespace

// Arguments select criteria by number (e.g. "acceptance 1 4 9"); none runs all.
int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 28);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::vector<std::string> only(argv + 1, argv + argc);
  auto want = [&](const char* id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  if (want("1")) criterion_scan();
  if (want("2")) criterion_grad();
  if (want("3")) criterion_causal();
  if (want("4")) criterion_routing();
  if (want("8")) criterion_oracles();
  if (want("9")) criterion_determinism();
  if (want("5") || want("6") || want("7")) criteria_end_to_end();
  std::printf("%s: %d hard failure(s)\n", hard_failures == 0 ? "ACCEPTED" : "REJECTED", hard_failures);
  return hard_failures == 0 ? 0 : 1;
}
