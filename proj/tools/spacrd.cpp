#include "spacrd/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace spacrd;

int main(int argc, char** argv) {
  CLI::App app{"SpaCRD: multimodal spatial cancer-region detection"};
  app.require_subcommand(1);

  cli::SynthArgs synth;
  auto* synth_cmd =
      app.add_subcommand("synth", "generate a synthetic labeled cohort");
  synth_cmd->add_option("--config", synth.config, "synth config (key=value)");
  synth_cmd->add_option("--out", synth.out_dir, "output cohort directory")
      ->required();
  std::uint64_t synth_seed = 0;
  auto* synth_seed_opt = synth_cmd->add_option("--seed", synth_seed, "rng seed");
  synth_cmd->add_flag("--force", synth.force, "overwrite a non-empty out dir");

  cli::TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train the three-stage model");
  train_cmd
      ->add_option("--sources", train.sources,
                   "dataset dirs or cohort dirs with a manifest.txt")
      ->required();
  train_cmd->add_option("--out", train.out_dir, "model output directory")
      ->required();
  train_cmd->add_option("--config", train.config, "run config (key=value)");
  std::vector<std::string> set_pairs;
  train_cmd->add_option("--set", set_pairs,
                        "config override as key=value (repeatable)");
  train_cmd->add_option("--stage", train.stage, "all|align|fuse|cls")
      ->default_val("all");
  train_cmd->add_option("--ablate", train.ablate,
                        "drop a component: bca, rvae or cl (repeatable)");
  std::uint64_t train_seed = 0;
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "rng seed");
  bool train_det = false;
  auto* train_det_opt = train_cmd->add_flag(
      "--deterministic", train_det, "fix every rng stream to the seed");
  train_cmd->add_flag("--dump-config", train.dump_config,
                      "print the resolved config and exit");

  cli::InferArgs infer;
  auto* infer_cmd =
      app.add_subcommand("infer", "score a dataset with a trained model");
  infer_cmd->add_option("--model", infer.model_dir, "model directory")
      ->required();
  infer_cmd->add_option("--data", infer.data_dir, "target dataset directory")
      ->required();
  infer_cmd->add_option("--out", infer.out_tsv, "output scores TSV")
      ->required();

  cli::EvalArgs eval;
  auto* eval_cmd =
      app.add_subcommand("eval", "evaluate scores against labels");
  eval_cmd->add_option("--scores", eval.scores_tsv, "scores TSV from infer")
      ->required();
  eval_cmd->add_option("--data", eval.data_dir, "labeled dataset directory")
      ->required();
  eval_cmd->add_option("--out", eval.out_report, "output report file")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) {
      if (*synth_seed_opt) synth.seed = synth_seed;
      return cli::cmd_synth(synth);
    }
    if (*train_cmd) {
      if (*train_seed_opt) train.seed = train_seed;
      if (*train_det_opt) train.deterministic = train_det;
      for (const auto& pair : set_pairs) {
        const auto eq = pair.find('=');
        if (eq == std::string::npos)
          fail(ErrorKind::usage, "--set expects key=value, got: " + pair);
        train.overrides[pair.substr(0, eq)] = pair.substr(eq + 1);
      }
      return cli::cmd_train(train);
    }
    if (*infer_cmd) return cli::cmd_infer(infer);
    if (*eval_cmd) return cli::cmd_eval(eval);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
