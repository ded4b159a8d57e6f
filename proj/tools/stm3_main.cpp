#include <malloc.h>

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"
#include "stm3/error.hpp"

using namespace stm3::cli;

int main(int argc, char** argv) {
  // Autodiff buffers are allocated and freed at a high rate; keeping freed
  // pages in the heap avoids repeated page faults.
  mallopt(M_MMAP_THRESHOLD, 1 << 28);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"STM3 multiscale spatio-temporal forecasting"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer("Configuration file (JSON), showing every default:\n" + default_config_text() +
             "\nSTM3_SEED overrides train.seed.\nExit codes: 0 success, 1 failure, 2 usage error.");
  std::size_t threads = 0;
  app.add_option("--threads", threads, "Worker threads (0: machine parallelism)")->capture_default_str();

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic clustered dataset (.csv or .bin)");
  gen_cmd->add_option("--config", gen.config, "Configuration file; uses the data section");
  gen_cmd->add_option("--out", gen.out, "Output series file")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed (default: STM3_SEED, then train.seed)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint and history");
  train_cmd->add_option("--config", tr.config, "Configuration file");
  train_cmd->add_option("--data", tr.data, "Series file (.csv or .bin)")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->capture_default_str();
  train_cmd->add_option("--repeats", tr.repeats, "Independent runs with consecutive seeds; metrics are averaged")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Print metrics of a checkpoint on one split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", ev.data, "Series file")->required();
  eval_cmd->add_option("--split", ev.split, "train, val or test")
      ->capture_default_str()
      ->check(CLI::IsMember({"train", "val", "test"}));

  VerifyArgs ver;
  auto* verify_cmd = app.add_subcommand("verify", "Run a self-check suite");
  verify_cmd->add_option("--suite", ver.suite, "scan, grad, causal-mask, routing or all")
      ->capture_default_str()
      ->check(CLI::IsMember({"scan", "grad", "causal-mask", "routing", "all"}));

  AnalyzeArgs an;
  auto* analyze_cmd = app.add_subcommand("analyze", "Export diagnostic CSVs for a training run");
  analyze_cmd->add_option("--run", an.run, "Run directory written by train")->required();
  analyze_cmd->add_option("--data", an.data, "Series file")->required();
  analyze_cmd->add_option("--out", an.out, "Output directory (default: <run>/analysis)");
  analyze_cmd->add_option("--windows", an.windows, "Test windows used for feature and gate exports")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) {
      tr.threads = threads;
      return run_train(tr);
    }
    if (*eval_cmd) {
      ev.threads = threads;
      return run_eval(ev);
    }
    if (*verify_cmd) return run_verify(ver);
    if (*analyze_cmd) return run_analyze(an);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for usage.\n";
    return 2;
  } catch (const stm3::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const stm3::ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
