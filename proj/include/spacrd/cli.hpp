#pragma once

#include "spacrd/common.hpp"
#include "spacrd/pipeline.hpp"
#include "spacrd/synthgen.hpp"

namespace spacrd::cli {

struct SynthArgs {
  std::filesystem::path config;  // optional synth config file
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

struct TrainArgs {
  std::vector<std::filesystem::path> sources;  // dataset dirs or cohort dirs
  std::filesystem::path out_dir;
  std::filesystem::path config;  // optional run config file
  KvMap overrides;               // config keys set on the command line
  std::string stage = "all";
  std::vector<std::string> ablate;  // subset of {bca, rvae, cl}
  std::optional<std::uint64_t> seed;
  std::optional<bool> deterministic;
  bool dump_config = false;
};

struct InferArgs {
  std::filesystem::path model_dir;
  std::filesystem::path data_dir;
  std::filesystem::path out_tsv;
};

struct EvalArgs {
  std::filesystem::path scores_tsv;
  std::filesystem::path data_dir;
  std::filesystem::path out_report;
};

/// Expands paths that contain a manifest.txt into their listed dataset dirs.
std::vector<std::filesystem::path> expand_sources(
    const std::vector<std::filesystem::path>& paths);

pipeline::RunConfig resolve_run_config(const TrainArgs& args);

int cmd_synth(const SynthArgs& args);
int cmd_train(const TrainArgs& args);
int cmd_infer(const InferArgs& args);
int cmd_eval(const EvalArgs& args);

}  // namespace spacrd::cli
