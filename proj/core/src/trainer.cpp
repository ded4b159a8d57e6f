#include "stm3/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <thread>

#include "json_util.hpp"
#include "stm3/error.hpp"
#include "stm3/ops.hpp"

namespace stm3 {

using detail::json;

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train.lr must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (max_epochs == 0) throw ConfigError("train.max_epochs must be positive");
  if (halve_every == 0) throw ConfigError("train.halve_every must be positive");
  if (patience == 0) throw ConfigError("train.patience must be at least 1");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be nonnegative");
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw ConfigError("train.betas must lie in (0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be positive");
  if (!(clip_norm >= 0)) throw ConfigError("train.clip_norm must be nonnegative");
}

std::string to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"halve_every", c.halve_every},
              {"repeat_halving", c.repeat_halving},
              {"patience", c.patience},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"clip_norm", c.clip_norm},
              {"seed", c.seed},
              {"threads", c.threads}}
      .dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  const json j = detail::parse_object(text, "train");
  detail::reject_unknown(j,
                         {"lr", "batch_size", "max_epochs", "halve_every", "repeat_halving", "patience",
                          "weight_decay", "beta1", "beta2", "eps", "clip_norm", "seed", "threads"},
                         "train");
  TrainConfig c;
  const char* s = "train";
  detail::read(j, "lr", c.lr, s);
  detail::read(j, "batch_size", c.batch_size, s);
  detail::read(j, "max_epochs", c.max_epochs, s);
  detail::read(j, "halve_every", c.halve_every, s);
  detail::read(j, "repeat_halving", c.repeat_halving, s);
  detail::read(j, "patience", c.patience, s);
  detail::read(j, "weight_decay", c.weight_decay, s);
  detail::read(j, "beta1", c.beta1, s);
  detail::read(j, "beta2", c.beta2, s);
  detail::read(j, "eps", c.eps, s);
  detail::read(j, "clip_norm", c.clip_norm, s);
  detail::read(j, "seed", c.seed, s);
  detail::read(j, "threads", c.threads, s);
  return c;
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  const std::size_t halvings = cfg.repeat_halving ? epoch / cfg.halve_every : (epoch >= cfg.halve_every ? 1 : 0);
  return cfg.lr * std::pow(0.5, static_cast<double>(halvings));
}

void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
                const TrainConfig& cfg, double lr, std::size_t t) {
  if (t == 0) throw ArgumentError("adamw_step: step index is 1-based");
  if (params.size() != grads.size()) throw ArgumentError("adamw_step: one gradient per parameter expected");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != params[i].size()) throw DimensionError("adamw_step: gradient size mismatch");
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) throw NumericError("adamw_step: non-finite gradient for parameter " + std::to_string(i));
    }
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0);
      state.v[i].assign(params[i].size(), 0.0);
    }
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    const auto g = grads[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] *= decay;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (Tensor& g : grads)
      for (double& v : g.mutable_data()) v *= f;
  }
  return norm;
}

bool EarlyStopping::update(std::size_t epoch, double value) {
  last_epoch_ = epoch;
  if (!seen_ || value < best_) {
    seen_ = true;
    best_ = value;
    best_epoch_ = epoch;
    return true;
  }
  return false;
}

bool EarlyStopping::should_stop() const { return seen_ && last_epoch_ - best_epoch_ >= patience_; }

std::size_t TrainHistory::total_changes(std::size_t from, std::size_t to) const {
  std::size_t total = 0;
  for (const EpochRecord& r : epochs) {
    if (r.epoch < from || r.epoch >= to) continue;
    for (std::size_t c : r.assignment_changes) total += c;
  }
  return total;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (std::uint64_t p : parts) h = splitmix(h ^ p);
  return h;
}

std::size_t worker_count(std::size_t requested) {
  if (requested) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Runs fn(i) for i in [0, n). Each index writes only its own outputs, so the
// result does not depend on the worker count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  const std::size_t workers = std::min(worker_count(threads), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct WindowGrad {
  std::vector<Tensor> grads;
  double total = 0.0;
  double prediction = 0.0;
  double contrastive = 0.0;
};

}  // namespace

std::vector<std::vector<std::size_t>> probe_assignments(const ModelParams& params, const ModelConfig& cfg,
                                                        const Tensor& X) {
  if (cfg.variant != Variant::stm3) return {};
  NoGradScope no_grad;
  const ForwardResult r = stm3_forward(X, params, cfg, false);
  std::vector<std::vector<std::size_t>> out;
  for (const LayerAux& aux : r.layers) out.push_back(aux.routing.selected);
  return out;
}

EvalResult evaluate(const ModelParams& params, const ModelConfig& cfg, const WindowedDataset& data, Split split,
                    std::size_t threads) {
  const auto [begin, end] = data.range(split);
  if (begin == end) throw ArgumentError("evaluate: empty split");
  const std::size_t n = end - begin;
  std::vector<Tensor> preds(n);
  parallel_for(n, threads, [&](std::size_t i) {
    NoGradScope no_grad;
    preds[i] = stm3_forward(data.window(begin + i).X, params, cfg, false).prediction;
  });
  EvalResult r;
  MetricsAccumulator acc;
  double loss = 0.0;
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Window w = data.window(begin + i);
    {
      NoGradScope no_grad;
      loss += prediction_loss(preds[i], w.Y, cfg.loss_kind).item();
    }
    const Tensor p = data.denormalize(preds[i]);
    const Tensor y = data.denormalize(w.Y);
    acc.add(p, y);
    for (std::size_t j = 0; j < p.size(); ++j) sq += (p[j] - y[j]) * (p[j] - y[j]);
    count += p.size();
  }
  r.metrics = acc.result();
  r.loss = loss / static_cast<double>(n);
  r.mse = sq / static_cast<double>(count);
  r.windows = n;
  return r;
}

EvalResult evaluate_persistence(const WindowedDataset& data, Split split) {
  const auto [begin, end] = data.range(split);
  if (begin == end) throw ArgumentError("evaluate_persistence: empty split");
  EvalResult r;
  MetricsAccumulator acc;
  double loss = 0.0;
  double sq = 0.0;
  std::size_t count = 0;
  for (std::size_t s = begin; s < end; ++s) {
    const Window w = data.window(s);
    const Tensor pred = persistence_forecast(w.X, data.tau());
    double l = 0.0;
    for (std::size_t j = 0; j < pred.size(); ++j) l += (pred[j] - w.Y[j]) * (pred[j] - w.Y[j]);
    loss += l / static_cast<double>(pred.size());
    const Tensor p = data.denormalize(pred);
    const Tensor y = data.denormalize(w.Y);
    acc.add(p, y);
    for (std::size_t j = 0; j < p.size(); ++j) sq += (p[j] - y[j]) * (p[j] - y[j]);
    count += p.size();
  }
  r.metrics = acc.result();
  r.loss = loss / static_cast<double>(end - begin);
  r.mse = sq / static_cast<double>(count);
  r.windows = end - begin;
  return r;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const WindowedDataset& data,
                  const EpochCallback& on_epoch) {
  model_cfg.validate();
  train_cfg.validate();
  if (data.T() != model_cfg.T || data.tau() != model_cfg.tau || data.nodes() != model_cfg.N ||
      data.channels() != model_cfg.C) {
    throw ConfigError("train: dataset windows do not match the model configuration");
  }
  if (data.size(Split::train) == 0 || data.size(Split::val) == 0) throw ConfigError("train: empty split");

  ModelParams params = init_params(model_cfg, train_cfg.seed);
  std::vector<Tensor> plist;
  for (const NamedTensor& t : named_parameters(params)) plist.push_back(t.tensor);

  TrainResult result;
  TrainHistory& hist = result.history;
  result.best = clone_params(params);
  AdamState adam;
  EarlyStopping stopper(train_cfg.patience);
  std::size_t step = 0;

  const bool probing = model_cfg.variant == Variant::stm3 && data.size(Split::test) > 0;
  Tensor probe_window;
  if (probing) {
    probe_window = data.window(Split::test, 0).X;
    hist.initial_assignments = probe_assignments(params, model_cfg, probe_window);
  }
  std::vector<std::vector<std::size_t>> previous = hist.initial_assignments;

  const auto [train_begin, train_end] = data.range(Split::train);
  std::vector<std::size_t> order(train_end - train_begin);
  std::iota(order.begin(), order.end(), train_begin);
  const std::size_t B = train_cfg.batch_size;
  std::vector<WindowGrad> slots(B);
  hist.stop_reason = "max_epochs";

  for (std::size_t epoch = 0; epoch < train_cfg.max_epochs; ++epoch) {
    const double lr = lr_schedule(epoch, train_cfg);
    std::mt19937_64 shuffle_rng(mix_seed({train_cfg.seed, epoch, 0x5u}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    double sum_total = 0.0;
    double sum_pred = 0.0;
    double sum_con = 0.0;
    try {
      for (std::size_t b0 = 0, batch = 0; b0 < order.size(); b0 += B, ++batch) {
        const std::size_t nb = std::min(B, order.size() - b0);
        parallel_for(nb, train_cfg.threads, [&](std::size_t i) {
          const Window w = data.window(order[b0 + i]);
          std::mt19937_64 noise_rng(mix_seed({train_cfg.seed, epoch, batch, i}));
          Tape tape;
          TapeScope scope(tape);
          const ForwardResult fr = stm3_forward(w.X, params, model_cfg, true, &noise_rng);
          const WindowLoss wl = window_loss(fr, w.Y, model_cfg);
          const Gradients g = tape.backward(wl.total);
          WindowGrad& slot = slots[i];
          slot.grads.clear();
          for (const Tensor& p : plist) slot.grads.push_back(g.of(p));
          slot.total = wl.total.item();
          slot.prediction = wl.prediction;
          slot.contrastive = wl.contrastive;
        });
        // Fixed-order reduction keeps the sum independent of scheduling.
        std::vector<Tensor> grads;
        for (std::size_t j = 0; j < plist.size(); ++j) grads.push_back(Tensor::zeros(plist[j].shape()));
        for (std::size_t i = 0; i < nb; ++i) {
          for (std::size_t j = 0; j < plist.size(); ++j) {
            auto acc = grads[j].mutable_data();
            const auto src = slots[i].grads[j].data();
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += src[k];
          }
          sum_total += slots[i].total;
          sum_pred += slots[i].prediction;
          sum_con += slots[i].contrastive;
        }
        const double inv = 1.0 / static_cast<double>(nb);
        for (Tensor& g : grads)
          for (double& v : g.mutable_data()) v *= inv;
        clip_global_norm(grads, train_cfg.clip_norm);
        adamw_step(plist, grads, adam, train_cfg, lr, ++step);
      }
    } catch (const NumericError& e) {
      hist.diverged = true;
      hist.stop_reason = std::string("diverged: ") + e.what();
      break;
    }

    const double n_train = static_cast<double>(order.size());
    rec.train_loss = sum_total / n_train;
    rec.train_prediction = sum_pred / n_train;
    rec.train_contrastive = sum_con / n_train;
    const EvalResult val = evaluate(params, model_cfg, data, Split::val, train_cfg.threads);
    rec.val_loss = val.loss;
    rec.val_metrics = val.metrics;
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss)) {
      hist.diverged = true;
      hist.stop_reason = "diverged: non-finite loss";
      break;
    }
    if (probing) {
      rec.assignments = probe_assignments(params, model_cfg, probe_window);
      for (std::size_t l = 0; l < rec.assignments.size(); ++l) {
        std::size_t changes = 0;
        for (std::size_t n = 0; n < rec.assignments[l].size(); ++n)
          changes += rec.assignments[l][n] != previous[l][n] ? 1 : 0;
        rec.assignment_changes.push_back(changes);
      }
      previous = rec.assignments;
    }
    if (stopper.update(epoch, rec.val_loss)) result.best = clone_params(params);
    hist.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.should_stop()) {
      hist.stop_reason = "early_stopping";
      break;
    }
  }
  hist.best_epoch = stopper.best_epoch();
  hist.best_val = hist.epochs.empty() ? std::numeric_limits<double>::infinity() : stopper.best();
  return result;
}

void save_history_csv(const std::filesystem::path& path, const TrainHistory& history) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  const std::size_t layers = history.epochs.empty() ? 0 : history.epochs.front().assignments.size();
  out << "epoch,lr,train_loss,train_prediction,train_contrastive,val_loss,val_mae,val_rmse,val_mape";
  for (std::size_t l = 0; l < layers; ++l) out << ",changes_l" << l << ",assign_l" << l;
  out << '\n';
  for (const EpochRecord& r : history.epochs) {
    out << r.epoch << ',' << fmt_double(r.lr) << ',' << fmt_double(r.train_loss) << ','
        << fmt_double(r.train_prediction) << ',' << fmt_double(r.train_contrastive) << ',' << fmt_double(r.val_loss)
        << ',' << fmt_double(r.val_metrics.mae) << ',' << fmt_double(r.val_metrics.rmse) << ','
        << (r.val_metrics.mape_defined ? fmt_double(r.val_metrics.mape) : std::string("nan"));
    for (std::size_t l = 0; l < r.assignments.size(); ++l) {
      out << ',' << r.assignment_changes[l] << ',';
      for (std::size_t n = 0; n < r.assignments[l].size(); ++n) out << (n ? " " : "") << r.assignments[l][n];
    }
    out << '\n';
  }
}

std::vector<double> routing_purity(const std::vector<std::size_t>& assignment, const std::vector<std::size_t>& labels,
                                   std::size_t experts) {
  if (assignment.size() != labels.size()) throw ArgumentError("routing_purity: one label per node expected");
  std::size_t clusters = 0;
  for (std::size_t c : labels) clusters = std::max(clusters, c + 1);
  std::vector<std::vector<std::size_t>> counts(clusters, std::vector<std::size_t>(experts, 0));
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (assignment[n] >= experts) throw ArgumentError("routing_purity: expert index out of range");
    ++counts[labels[n]][assignment[n]];
  }
  std::vector<double> purity(clusters, 0.0);
  for (std::size_t c = 0; c < clusters; ++c) {
    const std::size_t total = std::accumulate(counts[c].begin(), counts[c].end(), std::size_t{0});
    if (total == 0) continue;
    purity[c] = static_cast<double>(*std::max_element(counts[c].begin(), counts[c].end())) / static_cast<double>(total);
  }
  return purity;
}

SeparationReport expert_separation(const ModelParams& params, const ModelConfig& cfg, const WindowedDataset& data,
                                   std::size_t windows) {
  SeparationReport rep;
  if (cfg.variant != Variant::stm3) {
    rep.notice = "model has no specialized experts";
    return rep;
  }
  if (data.labels().size() != cfg.N) {
    rep.notice = "dataset has no cluster labels; separation diagnostic skipped";
    return rep;
  }
  const auto [begin, end] = data.range(Split::test);
  const std::size_t n = std::min(windows, end - begin);
  if (n == 0) {
    rep.notice = "empty test split";
    return rep;
  }
  rep.available = true;
  std::vector<ForwardResult> runs(n);
  {
    NoGradScope no_grad;
    for (std::size_t i = 0; i < n; ++i) runs[i] = stm3_forward(data.window(begin + i).X, params, cfg, false);
  }
  const ForwardResult& first = runs.front();
  double purity_sum = 0.0;
  std::size_t purity_n = 0;
  for (const LayerAux& aux : first.layers) {
    rep.purity.push_back(routing_purity(aux.routing.selected, data.labels(), cfg.K));
    for (double p : rep.purity.back()) {
      purity_sum += p;
      ++purity_n;
    }
    std::vector<std::size_t> load(cfg.K, 0);
    for (std::size_t g : aux.routing.selected) ++load[g];
    rep.expert_load.push_back(load);
  }
  rep.mean_purity = purity_n ? purity_sum / static_cast<double>(purity_n) : 0.0;

  double intra = 0.0;
  double inter = 0.0;
  std::size_t n_intra = 0;
  std::size_t n_inter = 0;
  NoGradScope no_grad;
  for (const ForwardResult& r : runs) {
    for (const LayerAux& aux : r.layers) {
      const Tensor cos = cosine_similarity(aux.pooled, aux.pooled);
      const std::size_t F = aux.tags.size();
      for (std::size_t a = 0; a < F; ++a)
        for (std::size_t b = a + 1; b < F; ++b) {
          if (aux.tags[a].scale != aux.tags[b].scale) continue;
          if (aux.tags[a].expert == aux.tags[b].expert) {
            intra += cos[a * F + b];
            ++n_intra;
          } else {
            inter += cos[a * F + b];
            ++n_inter;
          }
        }
    }
  }
  rep.intra_cosine = n_intra ? intra / static_cast<double>(n_intra) : 0.0;
  rep.inter_cosine = n_inter ? inter / static_cast<double>(n_inter) : 0.0;
  return rep;
}

}  // namespace stm3
