#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include "stm3/backbone.hpp"
#include "stm3/datakit.hpp"
#include "stm3/trainer.hpp"

namespace stm3::cli {

/// Bad invocation: missing files, malformed or inconsistent configuration.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sections of a configuration file. Absent sections keep the library defaults.
struct CliConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticSpec data;
  bool model_sets_N = false;
  bool model_sets_C = false;
};

/// Reads {"model", "train", "data", "contrastive"}; an empty path yields the
/// defaults. STM3_SEED, when set, overrides train.seed.
CliConfig load_config(const std::string& path);
std::string default_config_text();

struct GenDataArgs {
  std::string config;
  std::string out = "data.csv";
  std::optional<std::uint64_t> seed;
};

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out = "run";
  std::size_t repeats = 1;
  std::size_t threads = 0;
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::size_t threads = 0;
};

struct AnalyzeArgs {
  std::string run;
  std::string data;
  std::string out;
  std::size_t windows = 16;
};

struct VerifyArgs {
  std::string suite = "all";
};

int run_gen_data(const GenDataArgs& args);
int run_train(const TrainArgs& args);
int run_eval(const EvalArgs& args);
int run_analyze(const AnalyzeArgs& args);
int run_verify(const VerifyArgs& args);

}  // namespace stm3::cli
