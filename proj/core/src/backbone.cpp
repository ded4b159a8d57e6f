#include "stm3/backbone.hpp"

#include <cmath>
#include <fstream>

#include "json_util.hpp"
#include "stm3/error.hpp"
#include "stm3/ops.hpp"
#include "stm3/tensor_io.hpp"

namespace stm3 {

using detail::json;

// --- configuration ----------------------------------------------------------

ScaleConfig ModelConfig::effective_scales() const {
  return scales.initial.empty() ? ScaleConfig::defaults(Q) : scales;
}

MambaDims ModelConfig::mamba_dims() const { return resolve_mamba_dims(d, Q, d_inner, d_state, dt_rank); }

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(T, "T");
  positive(tau, "tau");
  positive(N, "N");
  positive(C, "C");
  positive(d, "d");
  positive(d_e, "d_e");
  positive(d_low, "d_low");
  positive(d_state, "d_state");
  positive(Q, "Q");
  positive(L, "L");
  if (variant == Variant::stm3) positive(K, "K");
  if (d_low > N) throw ConfigError("model.d_low must not exceed N");
  const ScaleConfig s = effective_scales();
  s.validate();
  if (s.count() != Q) throw ConfigError("scale lists must have Q entries");
  if (T < s.max_scale()) throw ConfigError("model.T must be at least the largest scale");
  if (variant == Variant::stm3 && !(noise_bound > 0)) throw ConfigError("model.noise_bound must be positive");
  contrastive.validate();
}

namespace {

const char* variant_name(Variant v) { return v == Variant::stm2 ? "stm2" : "stm3"; }
const char* routing_name(RoutingSource r) { return r == RoutingSource::node_embedding ? "node" : "input"; }
const char* loss_name(LossKind k) { return k == LossKind::squared ? "squared" : "absolute"; }
const char* scan_name(ScanMode m) { return m == ScanMode::parallel ? "parallel" : "sequential"; }

template <typename E>
E parse_enum(const std::string& value, std::initializer_list<std::pair<const char*, E>> options, const char* key) {
  for (const auto& [name, e] : options)
    if (value == name) return e;
  throw ConfigError(std::string("invalid value '") + value + "' for model." + key);
}

json contrastive_json(const ContrastiveConfig& c) {
  return json{{"gamma1", c.gamma1}, {"gamma2", c.gamma2}, {"theta", c.theta},
              {"lambda", c.lambda}, {"max_negatives", c.max_negatives}};
}

ContrastiveConfig contrastive_from(const json& j) {
  detail::reject_unknown(j, {"gamma1", "gamma2", "theta", "lambda", "max_negatives"}, "contrastive");
  ContrastiveConfig c;
  detail::read(j, "gamma1", c.gamma1, "contrastive");
  detail::read(j, "gamma2", c.gamma2, "contrastive");
  detail::read(j, "theta", c.theta, "contrastive");
  detail::read(j, "lambda", c.lambda, "contrastive");
  detail::read(j, "max_negatives", c.max_negatives, "contrastive");
  return c;
}

json config_json(const ModelConfig& c) {
  return json{{"T", c.T},
              {"tau", c.tau},
              {"N", c.N},
              {"C", c.C},
              {"d", c.d},
              {"d_e", c.d_e},
              {"d_low", c.d_low},
              {"d_inner", c.d_inner},
              {"d_state", c.d_state},
              {"dt_rank", c.dt_rank},
              {"Q", c.Q},
              {"K", c.K},
              {"L", c.L},
              {"initial_scales", c.scales.initial},
              {"amplify_scales", c.scales.amplify},
              {"variant", variant_name(c.variant)},
              {"routing", routing_name(c.routing)},
              {"noise_bound", c.noise_bound},
              {"loss_kind", loss_name(c.loss_kind)},
              {"scan", scan_name(c.scan)},
              {"contrastive", contrastive_json(c.contrastive)}};
}

ModelConfig config_from(const json& j) {
  detail::reject_unknown(j,
                         {"T", "tau", "N", "C", "d", "d_e", "d_low", "d_inner", "d_state", "dt_rank", "Q", "K",
                          "L", "initial_scales", "amplify_scales", "variant", "routing", "noise_bound",
                          "loss_kind", "scan", "contrastive"},
                         "model");
  ModelConfig c;
  const char* s = "model";
  detail::read(j, "T", c.T, s);
  detail::read(j, "tau", c.tau, s);
  detail::read(j, "N", c.N, s);
  detail::read(j, "C", c.C, s);
  detail::read(j, "d", c.d, s);
  detail::read(j, "d_e", c.d_e, s);
  detail::read(j, "d_low", c.d_low, s);
  detail::read(j, "d_inner", c.d_inner, s);
  detail::read(j, "d_state", c.d_state, s);
  detail::read(j, "dt_rank", c.dt_rank, s);
  detail::read(j, "Q", c.Q, s);
  detail::read(j, "K", c.K, s);
  detail::read(j, "L", c.L, s);
  detail::read(j, "initial_scales", c.scales.initial, s);
  detail::read(j, "amplify_scales", c.scales.amplify, s);
  detail::read(j, "noise_bound", c.noise_bound, s);
  std::string text;
  if (j.contains("variant")) {
    detail::read(j, "variant", text, s);
    c.variant = parse_enum<Variant>(text, {{"stm2", Variant::stm2}, {"stm3", Variant::stm3}}, "variant");
  }
  if (j.contains("routing")) {
    detail::read(j, "routing", text, s);
    c.routing = parse_enum<RoutingSource>(
        text, {{"node", RoutingSource::node_embedding}, {"input", RoutingSource::input}}, "routing");
  }
  if (j.contains("loss_kind")) {
    detail::read(j, "loss_kind", text, s);
    c.loss_kind =
        parse_enum<LossKind>(text, {{"squared", LossKind::squared}, {"absolute", LossKind::absolute}}, "loss_kind");
  }
  if (j.contains("scan")) {
    detail::read(j, "scan", text, s);
    c.scan = parse_enum<ScanMode>(text, {{"parallel", ScanMode::parallel}, {"sequential", ScanMode::sequential}},
                                  "scan");
  }
  if (j.contains("contrastive")) {
    if (!j["contrastive"].is_object()) throw ConfigError("model.contrastive must be an object");
    c.contrastive = contrastive_from(j["contrastive"]);
  }
  return c;
}

}  // namespace

std::string to_json(const ModelConfig& cfg) { return config_json(cfg).dump(2); }

ModelConfig model_config_from_json(const std::string& text) { return config_from(detail::parse_object(text, "model")); }

// --- parameters -------------------------------------------------------------

namespace {

Tensor param(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

Tensor uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = u(rng);
  return t;
}

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = n(rng);
  return t;
}

void mark(MambaParams& p) {
  for (Tensor* t : {&p.in_w, &p.in_b, &p.mix, &p.proj_w, &p.dt_w, &p.dt_b, &p.omega, &p.log_a, &p.out_w, &p.out_b})
    t->set_requires_grad(true);
  for (Tensor& k : p.amplify) k.set_requires_grad(true);
}

void push_mamba(std::vector<NamedTensor>& out, const std::string& prefix, const MambaParams& p) {
  out.push_back({prefix + ".in_w", p.in_w});
  out.push_back({prefix + ".in_b", p.in_b});
  for (std::size_t q = 0; q < p.amplify.size(); ++q) out.push_back({prefix + ".amplify" + std::to_string(q), p.amplify[q]});
  out.push_back({prefix + ".mix", p.mix});
  out.push_back({prefix + ".proj_w", p.proj_w});
  out.push_back({prefix + ".dt_w", p.dt_w});
  out.push_back({prefix + ".dt_b", p.dt_b});
  out.push_back({prefix + ".omega", p.omega});
  out.push_back({prefix + ".log_a", p.log_a});
  out.push_back({prefix + ".out_w", p.out_w});
  out.push_back({prefix + ".out_b", p.out_b});
}

MambaParams clone_mamba(const MambaParams& p) {
  MambaParams c;
  c.in_w = p.in_w.clone();
  c.in_b = p.in_b.clone();
  for (const Tensor& k : p.amplify) c.amplify.push_back(k.clone());
  c.mix = p.mix.clone();
  c.proj_w = p.proj_w.clone();
  c.dt_w = p.dt_w.clone();
  c.dt_b = p.dt_b.clone();
  c.omega = p.omega.clone();
  c.log_a = p.log_a.clone();
  c.out_w = p.out_w.clone();
  c.out_b = p.out_b.clone();
  return c;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const ScaleConfig scales = cfg.effective_scales();
  const MambaDims dims = cfg.mamba_dims();
  const std::size_t d = cfg.d;
  const std::size_t Q = cfg.Q;

  ModelParams p;
  p.head_w = param(uniform({cfg.C, d}, cfg.C, rng));
  p.head_b = param(uniform({d}, cfg.C, rng));
  for (std::size_t s : scales.initial) p.decompose.push_back(param(averaging_kernel(s, d, 0.01, rng)));

  for (std::size_t l = 0; l < cfg.L; ++l) {
    LayerParams layer;
    GcnParams& g = layer.agccn.gcn;
    g.node_emb = param(normal({cfg.N, cfg.d_e}, 0.1, rng));
    g.gcn_emb = param(normal({cfg.N, cfg.d_low}, 0.1, rng));
    g.gcn_weight = param(uniform({cfg.d_low, d, d}, d, rng));
    g.gcn_bias = param(uniform({cfg.d_low, d}, d, rng));
    ScaleAttentionParams& a = layer.agccn.attn;
    a.wq = param(uniform({d, d}, d, rng));
    a.wk = param(uniform({d, d}, d, rng));
    a.wv = param(uniform({d, d}, d, rng));
    a.wo = param(uniform({d, d}, d, rng));
    a.ln_gain = param(Tensor::ones({d}));
    a.ln_bias = param(Tensor::zeros({d}));

    layer.shared = init_mamba(dims, scales, rng);
    mark(layer.shared);
    if (cfg.variant == Variant::stm3) {
      for (std::size_t k = 0; k < cfg.K; ++k) {
        layer.experts.push_back(init_mamba(dims, scales, rng));
        mark(layer.experts.back());
      }
      const std::size_t gate_in = cfg.routing == RoutingSource::node_embedding ? cfg.d_e : Q * d;
      layer.gate_w = param(uniform({gate_in, cfg.K}, gate_in, rng));
    } else {
      layer.gate_w = Tensor(Shape{0});
    }
    p.layers.push_back(std::move(layer));
  }

  const std::size_t td = cfg.T * d;
  p.out_w = param(uniform({Q, td, cfg.tau * cfg.C}, td, rng));
  p.out_b = param(uniform({Q, cfg.tau * cfg.C}, td, rng));
  p.gamma = param(Tensor::zeros({cfg.tau, Q}));
  return p;
}

std::vector<NamedTensor> named_parameters(const ModelParams& p) {
  std::vector<NamedTensor> out;
  out.push_back({"head_w", p.head_w});
  out.push_back({"head_b", p.head_b});
  for (std::size_t q = 0; q < p.decompose.size(); ++q) out.push_back({"decompose" + std::to_string(q), p.decompose[q]});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const LayerParams& layer = p.layers[l];
    const std::string pre = "layer" + std::to_string(l);
    const GcnParams& g = layer.agccn.gcn;
    out.push_back({pre + ".node_emb", g.node_emb});
    out.push_back({pre + ".gcn_emb", g.gcn_emb});
    out.push_back({pre + ".gcn_weight", g.gcn_weight});
    out.push_back({pre + ".gcn_bias", g.gcn_bias});
    const ScaleAttentionParams& a = layer.agccn.attn;
    out.push_back({pre + ".attn_q", a.wq});
    out.push_back({pre + ".attn_k", a.wk});
    out.push_back({pre + ".attn_v", a.wv});
    out.push_back({pre + ".attn_o", a.wo});
    out.push_back({pre + ".ln_gain", a.ln_gain});
    out.push_back({pre + ".ln_bias", a.ln_bias});
    push_mamba(out, pre + ".shared", layer.shared);
    for (std::size_t k = 0; k < layer.experts.size(); ++k) {
      push_mamba(out, pre + ".expert" + std::to_string(k), layer.experts[k]);
    }
    if (layer.gate_w.size() > 0) out.push_back({pre + ".gate_w", layer.gate_w});
  }
  out.push_back({"out_w", p.out_w});
  out.push_back({"out_b", p.out_b});
  out.push_back({"gamma", p.gamma});
  return out;
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  for (const NamedTensor& t : named_parameters(params)) n += t.tensor.size();
  return n;
}

ModelParams clone_params(const ModelParams& p) {
  ModelParams c;
  c.head_w = p.head_w.clone();
  c.head_b = p.head_b.clone();
  for (const Tensor& k : p.decompose) c.decompose.push_back(k.clone());
  for (const LayerParams& layer : p.layers) {
    LayerParams l;
    const GcnParams& g = layer.agccn.gcn;
    l.agccn.gcn = {g.node_emb.clone(), g.gcn_emb.clone(), g.gcn_weight.clone(), g.gcn_bias.clone()};
    const ScaleAttentionParams& a = layer.agccn.attn;
    l.agccn.attn = {a.wq.clone(), a.wk.clone(), a.wv.clone(), a.wo.clone(), a.ln_gain.clone(), a.ln_bias.clone()};
    l.shared = clone_mamba(layer.shared);
    for (const MambaParams& e : layer.experts) l.experts.push_back(clone_mamba(e));
    l.gate_w = layer.gate_w.clone();
    c.layers.push_back(std::move(l));
  }
  c.out_w = p.out_w.clone();
  c.out_b = p.out_b.clone();
  c.gamma = p.gamma.clone();
  return c;
}

// --- forward ----------------------------------------------------------------

Tensor scale_fusion_head(const Tensor& H, const Tensor& gamma, const Tensor& out_w, const Tensor& out_b,
                         std::size_t tau, std::size_t C) {
  if (H.ndim() != 4) throw DimensionError("scale_fusion_head: input must be [N, T, Q, d]");
  const std::size_t N = H.dim(0);
  const std::size_t T = H.dim(1);
  const std::size_t Q = H.dim(2);
  const std::size_t d = H.dim(3);
  if (gamma.shape() != Shape{tau, Q} || out_w.shape() != Shape{Q, T * d, tau * C} ||
      out_b.shape() != Shape{Q, tau * C}) {
    throw DimensionError("scale_fusion_head: parameter shapes do not match the input");
  }
  const Tensor per_scale_in = reshape(permute(H, {2, 0, 1, 3}), {Q, N, T * d});
  const Tensor per_scale = add_rowwise(bmm(per_scale_in, out_w), out_b);  // [Q, N, tau C]
  const Tensor by_horizon = reshape(permute(reshape(per_scale, {Q, N, tau, C}), {2, 1, 3, 0}), {tau, N * C, Q});
  const Tensor weights = reshape(softmax_lastdim(gamma), {tau, Q, 1});
  return reshape(bmm(by_horizon, weights), {tau, N, C});
}

ForwardResult stm3_forward(const Tensor& X, const ModelParams& params, const ModelConfig& cfg, bool training,
                           std::mt19937_64* rng) {
  if (X.shape() != Shape{cfg.T, cfg.N, cfg.C}) {
    throw DimensionError("stm3_forward: input " + shape_str(X.shape()) + ", expected " +
                         shape_str({cfg.T, cfg.N, cfg.C}));
  }
  if (params.layers.size() != cfg.L) throw ConfigError("stm3_forward: parameter set has a different layer count");
  const MambaDims dims = cfg.mamba_dims();

  const Tensor x = permute(X, {1, 0, 2});
  Tensor H = multiscale_decompose(input_head(x, params.head_w, params.head_b), params.decompose);

  ForwardResult result;
  result.layers.resize(cfg.L);
  for (std::size_t l = 0; l < cfg.L; ++l) {
    const LayerParams& layer = params.layers[l];
    const Tensor G = agccn_forward(H, layer.agccn);
    Tensor temporal;
    if (cfg.variant == Variant::stm2) {
      temporal = multiscale_mamba_forward(G, layer.shared, dims, cfg.scan);
    } else {
      Tensor gate_in;
      if (cfg.routing == RoutingSource::node_embedding) {
        gate_in = layer.agccn.gcn.node_emb.detach();
      } else {
        NoGradScope no_grad;
        gate_in = reshape(mean_axis(G.detach(), 1), {cfg.N, cfg.Q * cfg.d});
      }
      LayerAux& aux = result.layers[l];
      aux.routing = route(gate_in, layer.gate_w, cfg.noise_bound, training, rng);
      MmmOutput moe = mmm_forward(G, layer.shared, layer.experts, aux.routing, dims, cfg.scan);
      temporal = moe.z;

      std::vector<Tensor> pooled;
      for (std::size_t k = 0; k < layer.experts.size(); ++k) {
        const std::vector<std::size_t> rows = aux.routing.members(k);
        if (rows.empty()) continue;
        pooled.push_back(reshape(mean_axis(moe.specialized[k], 1), {rows.size() * cfg.Q, cfg.d}));
        for (std::size_t n : rows)
          for (std::size_t q = 0; q < cfg.Q; ++q) aux.tags.push_back({n, k, q + 1});
      }
      aux.pooled = concat_rows(pooled);
    }
    H = add(G, temporal);
  }
  result.prediction = scale_fusion_head(H, params.gamma, params.out_w, params.out_b, cfg.tau, cfg.C);
  return result;
}

WindowLoss window_loss(const ForwardResult& result, const Tensor& Y, const ModelConfig& cfg) {
  WindowLoss out;
  const Tensor pred = prediction_loss(result.prediction, Y, cfg.loss_kind);
  out.prediction = pred.item();
  out.total = pred;
  if (cfg.variant != Variant::stm3 || cfg.contrastive.lambda == 0.0) return out;
  std::vector<std::vector<Tensor>> per_layer;
  for (const LayerAux& aux : result.layers) {
    per_layer.push_back(causal_contrastive_losses(aux.pooled, aux.tags, cfg.K, cfg.contrastive));
    double layer_sum = 0.0;
    for (const Tensor& t : per_layer.back()) layer_sum += t.item();
    out.contrastive += layer_sum / static_cast<double>(cfg.K);
  }
  out.total = total_loss(pred, per_layer, cfg.contrastive.lambda);
  return out;
}

// --- checkpoints ------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const ModelParams& params,
                     std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  json tensors = json::array();
  for (const NamedTensor& t : named_parameters(params)) {
    save_tensor(dir / (t.name + ".bin"), t.tensor);
    tensors.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  }
  json manifest{{"format", "stm3-checkpoint"},
                {"version", 1},
                {"seed", seed},
                {"config", config_json(cfg)},
                {"tensors", tensors}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ParseError("no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  if (manifest.value("format", "") != "stm3-checkpoint") throw ParseError("manifest: not a checkpoint");
  Checkpoint ck;
  ck.config = config_from(manifest.at("config"));
  ck.seed = manifest.value("seed", std::uint64_t{0});
  ck.params = init_params(ck.config, ck.seed);
  for (NamedTensor& t : named_parameters(ck.params)) {
    const Tensor stored = load_tensor(dir / (t.name + ".bin"));
    if (stored.shape() != t.tensor.shape()) {
      throw ParseError("checkpoint tensor " + t.name + " has shape " + shape_str(stored.shape()) + ", expected " +
                       shape_str(t.tensor.shape()));
    }
    std::copy(stored.data().begin(), stored.data().end(), t.tensor.mutable_data().begin());
  }
  return ck;
}

}  // namespace stm3
