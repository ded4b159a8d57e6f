#include "commands.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "stm3/error.hpp"
#include "stm3/ops.hpp"

namespace stm3::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open configuration file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("STM3_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw UsageError(std::string("STM3_SEED is not an unsigned integer: '") + s + "'");
  return v;
}

RawSeries load_data(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("dataset '" + path + "' does not exist");
  return load_series(path);
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw UsageError("unknown split '" + s + "'");
}

void fit_model_to_data(CliConfig& cfg, const RawSeries& raw) {
  if (!cfg.model_sets_N) cfg.model.N = raw.nodes();
  if (!cfg.model_sets_C) cfg.model.C = raw.channels();
  if (cfg.model.N != raw.nodes() || cfg.model.C != raw.channels()) {
    throw UsageError("model.N/model.C (" + std::to_string(cfg.model.N) + "/" + std::to_string(cfg.model.C) +
                     ") do not match the dataset (" + std::to_string(raw.nodes()) + "/" +
                     std::to_string(raw.channels()) + ")");
  }
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void print_metrics_header() {
  std::cout << std::left << std::setw(14) << "model" << std::setw(7) << "split" << std::right << std::setw(9)
            << "windows" << std::setw(13) << "MAE" << std::setw(13) << "RMSE" << std::setw(13) << "MAPE%"
            << std::setw(13) << "MSE" << '\n';
}

void print_metrics_row(const std::string& name, const std::string& split, const EvalResult& r) {
  std::cout << std::left << std::setw(14) << name << std::setw(7) << split << std::right << std::setw(9)
            << r.windows << std::fixed << std::setprecision(5) << std::setw(13) << r.metrics.mae << std::setw(13)
            << r.metrics.rmse << std::setw(13) << (r.metrics.mape_defined ? r.metrics.mape : NAN) << std::setw(13)
            << r.mse << std::defaultfloat << '\n';
}

void write_metrics_csv(const fs::path& path, const std::vector<std::pair<std::string, EvalResult>>& rows) {
  std::ofstream out(path);
  out << "model,split,windows,mae,rmse,mape,mse\n";
  for (const auto& [name, r] : rows) {
    out << name << ',' << r.windows << ',' << fmt(r.metrics.mae) << ',' << fmt(r.metrics.rmse) << ','
        << (r.metrics.mape_defined ? fmt(r.metrics.mape) : "nan") << ',' << fmt(r.mse) << '\n';
  }
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  return out;
}

}  // namespace

CliConfig load_config(const std::string& path) {
  CliConfig cfg;
  if (!path.empty()) {
    json j;
    try {
      j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
      throw UsageError("configuration file '" + path + "': " + e.what());
    }
    if (!j.is_object()) throw UsageError("configuration file must hold a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      if (k != "model" && k != "train" && k != "data" && k != "contrastive") {
        throw UsageError("unknown configuration section '" + k + "' (expected model, train, data, contrastive)");
      }
    }
    json model = j.value("model", json::object());
    if (!model.is_object()) throw UsageError("section 'model' must be an object");
    if (j.contains("contrastive")) {
      if (model.contains("contrastive")) throw UsageError("contrastive settings given twice");
      model["contrastive"] = j["contrastive"];
    }
    cfg.model_sets_N = model.contains("N");
    cfg.model_sets_C = model.contains("C");
    cfg.model = model_config_from_json(model.dump());
    if (j.contains("train")) cfg.train = train_config_from_json(j["train"].dump());
    if (j.contains("data")) cfg.data = synthetic_spec_from_json(j["data"].dump());
  }
  if (auto s = env_seed()) cfg.train.seed = *s;
  return cfg;
}

std::string default_config_text() {
  json j = json::parse(to_json(ModelConfig{}));
  json out;
  out["contrastive"] = j["contrastive"];
  j.erase("contrastive");
  out["model"] = j;
  out["train"] = json::parse(to_json(TrainConfig{}));
  out["data"] = json::parse(to_json(SyntheticSpec{}));
  return out.dump(2);
}

int run_gen_data(const GenDataArgs& args) {
  const CliConfig cfg = load_config(args.config);
  std::uint64_t seed = cfg.train.seed;
  if (args.seed) seed = *args.seed;
  const RawSeries raw = gen_synthetic(cfg.data, seed);
  const fs::path out(args.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_series(out, raw);
  std::cout << "wrote " << out.string() << ": " << raw.steps() << " steps x " << raw.nodes() << " nodes x "
            << raw.channels() << " channels, " << cfg.data.clusters << " clusters, seed " << seed << '\n';
  return 0;
}

int run_train(const TrainArgs& args) {
  CliConfig cfg = load_config(args.config);
  const RawSeries raw = load_data(args.data);
  fit_model_to_data(cfg, raw);
  cfg.model.validate();
  if (args.threads) cfg.train.threads = args.threads;
  cfg.train.validate();
  const WindowedDataset data = split_normalize(raw, cfg.model.T, cfg.model.tau);

  const fs::path root(args.out);
  fs::create_directories(root);
  {
    json eff;
    json model = json::parse(to_json(cfg.model));
    eff["contrastive"] = model["contrastive"];
    model.erase("contrastive");
    eff["model"] = model;
    eff["train"] = json::parse(to_json(cfg.train));
    std::ofstream(root / "config.json") << eff.dump(2) << '\n';
  }

  const EvalResult persistence = evaluate_persistence(data, Split::test);
  std::vector<EvalResult> tests;
  for (std::size_t r = 0; r < args.repeats; ++r) {
    TrainConfig tc = cfg.train;
    tc.seed = cfg.train.seed + r;
    const fs::path dir = args.repeats == 1 ? root : root / ("seed_" + std::to_string(tc.seed));
    fs::create_directories(dir);
    std::cerr << "training seed " << tc.seed << " (" << data.size(Split::train) << " train windows)\n";
    const TrainResult result = train(cfg.model, tc, data, [](const EpochRecord& e) {
      std::cerr << "epoch " << e.epoch << "  lr " << e.lr << "  train " << e.train_loss << "  val " << e.val_loss;
      for (std::size_t c : e.assignment_changes) std::cerr << "  changes " << c;
      std::cerr << '\n';
    });
    save_history_csv(dir / "history.csv", result.history);
    save_checkpoint(dir / "checkpoint", cfg.model, result.best, tc.seed);
    const EvalResult val = evaluate(result.best, cfg.model, data, Split::val, tc.threads);
    const EvalResult test = evaluate(result.best, cfg.model, data, Split::test, tc.threads);
    write_metrics_csv(dir / "metrics.csv", {{"model,val", val}, {"model,test", test}, {"persistence,test", persistence}});
    std::cout << "seed " << tc.seed << ": best epoch " << result.history.best_epoch << ", "
              << result.history.epochs.size() << " epochs, stop: " << result.history.stop_reason << '\n';
    print_metrics_header();
    print_metrics_row("model", "val", val);
    print_metrics_row("model", "test", test);
    print_metrics_row("persistence", "test", persistence);
    tests.push_back(test);
  }
  if (args.repeats > 1) {
    EvalResult avg;
    for (const EvalResult& t : tests) {
      avg.metrics.mae += t.metrics.mae / static_cast<double>(tests.size());
      avg.metrics.rmse += t.metrics.rmse / static_cast<double>(tests.size());
      avg.metrics.mape += t.metrics.mape / static_cast<double>(tests.size());
      avg.mse += t.mse / static_cast<double>(tests.size());
      avg.windows = t.windows;
    }
    std::cout << "mean over " << tests.size() << " runs:\n";
    print_metrics_header();
    print_metrics_row("model", "test", avg);
    write_metrics_csv(root / "metrics.csv", {{"mean,test", avg}, {"persistence,test", persistence}});
  }
  return 0;
}

int run_eval(const EvalArgs& args) {
  if (!fs::exists(fs::path(args.checkpoint) / "manifest.json")) {
    throw UsageError("'" + args.checkpoint + "' is not a checkpoint directory");
  }
  const Checkpoint ck = load_checkpoint(args.checkpoint);
  const RawSeries raw = load_data(args.data);
  if (raw.nodes() != ck.config.N || raw.channels() != ck.config.C) {
    throw UsageError("dataset shape does not match the checkpoint");
  }
  const WindowedDataset data = split_normalize(raw, ck.config.T, ck.config.tau);
  const Split split = parse_split(args.split);
  const EvalResult r = evaluate(ck.params, ck.config, data, split, args.threads);
  const EvalResult p = evaluate_persistence(data, split);
  print_metrics_header();
  print_metrics_row(ck.config.variant == Variant::stm3 ? "stm3" : "stm2", args.split, r);
  print_metrics_row("persistence", args.split, p);
  return 0;
}

int run_analyze(const AnalyzeArgs& args) {
  const fs::path run(args.run);
  if (!fs::exists(run / "checkpoint" / "manifest.json")) {
    throw UsageError("'" + args.run + "' has no checkpoint/ (pass a run directory written by train)");
  }
  const Checkpoint ck = load_checkpoint(run / "checkpoint");
  const ModelConfig& cfg = ck.config;
  const RawSeries raw = load_data(args.data);
  if (raw.nodes() != cfg.N || raw.channels() != cfg.C) throw UsageError("dataset shape does not match the checkpoint");
  const WindowedDataset data = split_normalize(raw, cfg.T, cfg.tau);
  const fs::path out = args.out.empty() ? run / "analysis" : fs::path(args.out);
  fs::create_directories(out);

  // Scale fusion weights per horizon step.
  {
    NoGradScope no_grad;
    const Tensor w = softmax_lastdim(ck.params.gamma);
    std::ofstream f(out / "scale_weights.csv");
    f << "horizon,scale,weight\n";
    for (std::size_t h = 0; h < cfg.tau; ++h)
      for (std::size_t q = 0; q < cfg.Q; ++q) f << h + 1 << ',' << q + 1 << ',' << fmt(w[h * cfg.Q + q]) << '\n';
  }

  // Per-epoch assignments from the training history.
  if (fs::exists(run / "history.csv")) {
    std::ifstream in(run / "history.csv");
    std::string line;
    std::getline(in, line);
    const auto header = split_csv(line);
    std::vector<std::pair<std::size_t, std::size_t>> layer_cols;  // (changes, assign) column indices
    for (std::size_t i = 0; i + 1 < header.size(); ++i)
      if (header[i].rfind("changes_l", 0) == 0) layer_cols.emplace_back(i, i + 1);
    std::ofstream f(out / "assignments.csv");
    std::ofstream c(out / "assignment_changes.csv");
    f << "epoch,layer,node,expert\n";
    c << "epoch,layer,changes\n";
    while (std::getline(in, line)) {
      const auto cells = split_csv(line);
      if (cells.empty()) continue;
      for (std::size_t l = 0; l < layer_cols.size(); ++l) {
        if (layer_cols[l].second >= cells.size()) continue;
        c << cells[0] << ',' << l << ',' << cells[layer_cols[l].first] << '\n';
        std::istringstream ss(cells[layer_cols[l].second]);
        std::size_t g = 0;
        for (std::size_t n = 0; ss >> g; ++n) f << cells[0] << ',' << l << ',' << n << ',' << g << '\n';
      }
    }
  } else {
    std::cerr << "note: no history.csv in " << run.string() << "; assignment export skipped\n";
  }

  // Pooled expert features and gate scores on test windows.
  if (cfg.variant == Variant::stm3) {
    std::ofstream feat(out / "expert_features.csv");
    std::ofstream gate(out / "gate_scores.csv");
    feat << "window,layer,node,expert,scale";
    for (std::size_t i = 0; i < cfg.d; ++i) feat << ",f" << i;
    feat << '\n';
    gate << "window,layer,node,expert,score,selected\n";
    const auto [begin, end] = data.range(Split::test);
    const std::size_t n = std::min(args.windows, end - begin);
    NoGradScope no_grad;
    for (std::size_t w = 0; w < n; ++w) {
      const ForwardResult r = stm3_forward(data.window(begin + w).X, ck.params, cfg, false);
      for (std::size_t l = 0; l < r.layers.size(); ++l) {
        const LayerAux& aux = r.layers[l];
        for (std::size_t row = 0; row < aux.tags.size(); ++row) {
          const FeatureTag& t = aux.tags[row];
          feat << w << ',' << l << ',' << t.sample << ',' << t.expert << ',' << t.scale;
          for (std::size_t i = 0; i < cfg.d; ++i) feat << ',' << fmt(aux.pooled[row * cfg.d + i]);
          feat << '\n';
        }
        const std::size_t K = aux.routing.experts();
        for (std::size_t node = 0; node < cfg.N; ++node)
          for (std::size_t k = 0; k < K; ++k)
            gate << w << ',' << l << ',' << node << ',' << k << ',' << fmt(aux.routing.logits[node * K + k]) << ','
                 << (aux.routing.selected[node] == k ? 1 : 0) << '\n';
      }
    }
    const SeparationReport sep = expert_separation(ck.params, cfg, data, args.windows);
    std::ofstream s(out / "separation.csv");
    s << "layer,cluster,purity\n";
    for (std::size_t l = 0; l < sep.purity.size(); ++l)
      for (std::size_t c = 0; c < sep.purity[l].size(); ++c) s << l << ',' << c << ',' << fmt(sep.purity[l][c]) << '\n';
    if (sep.available) {
      std::cout << "mean purity " << sep.mean_purity << ", intra-expert cosine " << sep.intra_cosine
                << ", inter-expert cosine " << sep.inter_cosine << '\n';
    } else {
      std::cout << "separation: " << sep.notice << '\n';
    }
  }
  std::cout << "wrote analysis CSVs to " << out.string() << '\n';
  return 0;
}

}  // namespace stm3::cli
