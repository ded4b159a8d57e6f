#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "stm3/agccn.hpp"
#include "stm3/mamba.hpp"
#include "stm3/moe.hpp"
#include "stm3/multiscale.hpp"
#include "stm3/objectives.hpp"
#include "stm3/tensor.hpp"

namespace stm3 {

enum class Variant { stm2, stm3 };

/// Gating input for the specialized experts: the layer's node embedding, or
/// the time-mean of the node's layer input (the ablation).
enum class RoutingSource { node_embedding, input };

struct ModelConfig {
  std::size_t T = 12;
  std::size_t tau = 12;
  std::size_t N = 20;
  std::size_t C = 1;
  std::size_t d = 16;
  std::size_t d_e = 16;
  std::size_t d_low = 8;
  std::size_t d_inner = 0;  // 0 selects 2 d
  std::size_t d_state = 16;
  std::size_t dt_rank = 0;  // 0 selects ceil(d_inner Q / 16)
  std::size_t Q = 3;
  std::size_t K = 2;
  std::size_t L = 2;
  ScaleConfig scales;  // empty selects the default list for Q
  Variant variant = Variant::stm3;
  RoutingSource routing = RoutingSource::node_embedding;
  double noise_bound = 0.01;
  ContrastiveConfig contrastive;
  LossKind loss_kind = LossKind::squared;
  ScanMode scan = ScanMode::parallel;

  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
  ScaleConfig effective_scales() const;
  MambaDims mamba_dims() const;
  /// Specialized experts per layer (0 for STM2).
  std::size_t experts() const { return variant == Variant::stm3 ? K : 0; }
};

std::string to_json(const ModelConfig& cfg);
/// Strict parse: unknown keys are rejected, missing keys keep defaults.
ModelConfig model_config_from_json(const std::string& text);

struct LayerParams {
  AgccnParams agccn;
  MambaParams shared;                // the single block for STM2
  std::vector<MambaParams> experts;  // empty for STM2
  Tensor gate_w;                     // [d_e, K] or [Q d, K] for input routing; empty for STM2
};

struct ModelParams {
  Tensor head_w;  // [C, d]
  Tensor head_b;  // [d]
  std::vector<Tensor> decompose;  // [s0_q, 1, d] per scale
  std::vector<LayerParams> layers;
  Tensor out_w;  // [Q, T d, tau C]
  Tensor out_b;  // [Q, tau C]
  Tensor gamma;  // [tau, Q]
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Every learnable tensor in a fixed order; the tensors share storage with
/// `params` and are flagged requires_grad.
std::vector<NamedTensor> named_parameters(const ModelParams& params);
std::size_t parameter_count(const ModelParams& params);

/// Deterministic in (cfg, seed).
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);
/// Deep copy (independent storage).
ModelParams clone_params(const ModelParams& params);

struct LayerAux {
  RoutingDecision routing;             // empty for STM2
  Tensor pooled;                       // [N Q, d] time-mean specialized outputs, empty for STM2
  std::vector<FeatureTag> tags;        // one per pooled row
};

struct ForwardResult {
  Tensor prediction;  // [tau, N, C]
  std::vector<LayerAux> layers;
};

/// Softmax(Gamma)-weighted fusion of per-scale linear forecasts from H[N, T, Q, d].
Tensor scale_fusion_head(const Tensor& H, const Tensor& gamma, const Tensor& out_w, const Tensor& out_b,
                         std::size_t tau, std::size_t C);

/// X[T, N, C] -> prediction[tau, N, C]. `rng` supplies routing noise and is
/// required in training mode.
ForwardResult stm3_forward(const Tensor& X, const ModelParams& params, const ModelConfig& cfg, bool training,
                           std::mt19937_64* rng = nullptr);

struct WindowLoss {
  Tensor total;
  double prediction = 0.0;
  double contrastive = 0.0;  // sum over layers of the mean per-expert loss
};

/// Prediction loss plus, for STM3 with lambda > 0, the causal contrastive term.
WindowLoss window_loss(const ForwardResult& result, const Tensor& Y, const ModelConfig& cfg);

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::uint64_t seed = 0;
};

/// Directory with one `<name>.bin` tensor file per parameter and manifest.json.
void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const ModelParams& params,
                     std::uint64_t seed);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace stm3
