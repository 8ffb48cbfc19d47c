#include "spacrd/cli.hpp"

#include "spacrd/discriminator.hpp"
#include "spacrd/metrics.hpp"

#include <iostream>
#include <sstream>

namespace spacrd::cli {

namespace fs = std::filesystem;

std::vector<fs::path> expand_sources(const std::vector<fs::path>& paths) {
  std::vector<fs::path> out;
  for (const auto& p : paths) {
    const fs::path manifest = p / "manifest.txt";
    if (fs::exists(manifest)) {
      std::istringstream in(read_text_file(manifest));
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(p / line);
      }
    } else {
      out.push_back(p);
    }
  }
  if (out.empty()) fail(ErrorKind::usage, "no source datasets given");
  return out;
}

pipeline::RunConfig resolve_run_config(const TrainArgs& args) {
  KvMap kv;
  if (!args.config.empty()) kv = read_kv_file(args.config);
  for (const auto& [k, v] : args.overrides) kv[k] = v;
  pipeline::RunConfig cfg = pipeline::RunConfig::from_kv(kv);
  if (args.seed) cfg.seed = *args.seed;
  if (args.deterministic) cfg.deterministic = *args.deterministic;
  for (const auto& a : args.ablate) {
    if (a == "bca") cfg.ablate_bca = true;
    else if (a == "rvae") cfg.ablate_rvae = true;
    else if (a == "cl") cfg.ablate_cl = true;
    else fail(ErrorKind::usage, "unknown ablation: " + a);
  }
  cfg.validate();
  return cfg;
}

int cmd_synth(const SynthArgs& args) {
  synthgen::SynthConfig cfg;
  if (!args.config.empty())
    cfg = synthgen::SynthConfig::from_kv(read_kv_file(args.config));
  if (args.seed) cfg.seed = *args.seed;

  if (fs::exists(args.out_dir) && !fs::is_empty(args.out_dir) && !args.force)
    fail(ErrorKind::validation,
         "output directory " + args.out_dir.string() +
             " is not empty; pass --force to overwrite");
  fs::create_directories(args.out_dir);

  auto cohort = synthgen::generate_cohort(cfg);
  std::string manifest;
  for (const auto& ds : cohort) {
    dataio::save_dataset(args.out_dir / ds.dataset_id, ds);
    manifest += ds.dataset_id + "\n";
  }
  write_text_file(args.out_dir / "manifest.txt", manifest);
  write_kv_file(args.out_dir / "synth_config.txt", cfg.to_kv());
  std::cout << "wrote " << cohort.size() << " datasets to " << args.out_dir
            << "\n";
  return 0;
}

int cmd_train(const TrainArgs& args) {
  pipeline::RunConfig cfg = resolve_run_config(args);
  if (args.dump_config) {
    std::cout << serialize_kv(cfg.to_kv());
    return 0;
  }
  const pipeline::Stage stage = pipeline::parse_stage(args.stage);

  std::vector<dataio::SpotDataset> sources;
  for (const auto& dir : expand_sources(args.sources))
    sources.push_back(dataio::load_dataset(dir));
  for (const auto& ds : sources)
    if (!ds.labels)
      fail(ErrorKind::validation,
           "training requires labeled sources; " + ds.dataset_id +
               " has no labels");

  fs::create_directories(args.out_dir);
  const fs::path ckpt = args.out_dir / "model.ckpt";

  pipeline::Pipeline pl;
  if (stage != pipeline::Stage::all && stage != pipeline::Stage::align) {
    if (!fs::exists(ckpt))
      fail(ErrorKind::validation,
           "stage " + args.stage + " needs an existing checkpoint at " +
               ckpt.string());
    pl = pipeline::load_pipeline(ckpt);
    pl.cfg = cfg;
  } else {
    pl.cfg = cfg;
  }

  pipeline::prepare_sources(sources, cfg, &pl.hvg, &pl.source_n_genes);
  pipeline::train_stages(pl, sources, stage);
  pipeline::save_pipeline(ckpt, pl);

  std::ostringstream log;
  log << "stage\tepoch\tloss\n";
  for (const auto& [st, epoch, loss] : pl.training_log)
    log << st << '\t' << epoch << '\t' << format_real(loss) << '\n';
  write_text_file(args.out_dir / "training_log.tsv", log.str());
  std::cout << "checkpoint written to " << ckpt << "\n";
  return 0;
}

int cmd_infer(const InferArgs& args) {
  pipeline::Pipeline pl =
      pipeline::load_pipeline(args.model_dir / "model.ckpt");
  diffcore::set_deterministic_mode(pl.cfg.deterministic);
  dataio::SpotDataset target = dataio::load_dataset(args.data_dir);
  const int missing =
      pipeline::prepare_target(target, pl.cfg, pl.hvg, pl.source_n_genes);
  if (missing > 0)
    std::cerr << "warning: " << missing
              << " trained genes missing from target; zero-filled\n";

  std::vector<double> scores = pipeline::predict_scores(pl, target);
  auto gmm = discriminator::fit_gmm_1d(scores);
  auto thr = discriminator::gmm_threshold(gmm);
  auto calls = discriminator::binarize(scores, thr.theta);
  const std::string method =
      thr.method == discriminator::ThresholdResult::Method::quadratic_root
          ? "quadratic-root"
          : "midpoint-fallback";
  discriminator::write_scores_tsv(args.out_tsv, target.coords, scores, calls,
                                  method);

  KvMap side;
  side["gmm_pi1"] = format_real(gmm.pi1);
  side["gmm_pi2"] = format_real(gmm.pi2);
  side["gmm_mu1"] = format_real(gmm.mu1);
  side["gmm_mu2"] = format_real(gmm.mu2);
  side["gmm_var1"] = format_real(gmm.var1);
  side["gmm_var2"] = format_real(gmm.var2);
  side["gmm_converged"] = gmm.converged ? "1" : "0";
  side["gmm_iterations"] = std::to_string(gmm.iterations);
  side["threshold"] = format_real(thr.theta);
  side["threshold_method"] = method;
  side["dataset_id"] = target.dataset_id;
  side["model_fingerprint"] = pl.cfg.fingerprint();
  side["missing_genes"] = std::to_string(missing);
  write_kv_file(fs::path(args.out_tsv.string() + ".gmm.txt"), side);
  std::cout << "scores for " << scores.size() << " spots written to "
            << args.out_tsv << " (threshold " << thr.theta << ", " << method
            << ")\n";
  return 0;
}

int cmd_eval(const EvalArgs& args) {
  discriminator::ScoresTable table =
      discriminator::read_scores_tsv(args.scores_tsv);
  dataio::SpotDataset labeled = dataio::load_dataset(args.data_dir);
  if (!labeled.labels)
    fail(ErrorKind::validation,
         "evaluation requires labels; " + labeled.dataset_id + " has none");
  if (labeled.n_spots() != static_cast<int>(table.scores.size()))
    fail(ErrorKind::dimension, "scores row count does not match dataset");

  std::vector<int> labels(labeled.n_spots());
  for (int i = 0; i < labeled.n_spots(); ++i) labels[i] = (*labeled.labels)(i);

  KvMap extras;
  extras["dataset_id"] = labeled.dataset_id;
  extras["scores_tsv"] = args.scores_tsv.string();
  const fs::path side = fs::path(args.scores_tsv.string() + ".gmm.txt");
  if (fs::exists(side))
    for (const auto& [k, v] : read_kv_file(side)) extras[k] = v;

  metrics::ScoreReport report = metrics::build_report(table.scores, labels,
                                                      std::move(extras));
  metrics::write_report(args.out_report, report);
  std::cout << serialize_kv(report.to_kv());
  if (!report.null_reasons.empty())
    fail(ErrorKind::validation, "one or more metrics were undefined");
  return 0;
}

}  // namespace spacrd::cli
