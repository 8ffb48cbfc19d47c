#include "spacrd/pipeline.hpp"

#include <doctest.h>

#include <random>

#include "spacrd/cli.hpp"
#include "test_util.hpp"

using namespace spacrd;
using namespace spacrd::pipeline;

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("spacrd_pipe_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig fast_cfg() {
  RunConfig cfg = testutil::small_run_config();
  cfg.epochs_align = 2;
  cfg.epochs_fuse = 2;
  cfg.epochs_cls = 2;
  return cfg;
}

}  // namespace

TEST_CASE("run config defaults match the reference training settings") {
  RunConfig cfg;
  CHECK(cfg.alpha == 0.5);
  CHECK(cfg.beta == 0.5);
  CHECK(cfg.gamma == 0.1);
  CHECK(cfg.tau == 0.07);
  CHECK(cfg.k_neighbors == 6);
  CHECK(cfg.lr == 1e-5);
  CHECK(cfg.epochs_align == 100);
  CHECK(cfg.epochs_fuse == 50);
  CHECK(cfg.epochs_cls == 50);
  CHECK(cfg.target_sum == 10000);
  CHECK(cfg.n_hvg == 3000);
  CHECK(cfg.dropout == 0.2);
  CHECK(cfg.align_hidden1 == 1024);
  CHECK(cfg.align_hidden2 == 512);
  CHECK(cfg.embed_dim == 512);
  CHECK(cfg.heads == 8);
  CHECK(cfg.rvae_hidden1 == 256);
  CHECK(cfg.rvae_hidden2 == 128);
  CHECK(cfg.latent_dim == 64);
  CHECK(cfg.cls_hidden == 64);
}

TEST_CASE("run config round trips and rejects unknown keys") {
  RunConfig cfg = fast_cfg();
  cfg.alpha = 0.25;
  RunConfig back = RunConfig::from_kv(cfg.to_kv());
  CHECK(back.to_kv() == cfg.to_kv());
  CHECK(back.fingerprint() == cfg.fingerprint());

  try {
    RunConfig::from_kv({{"alpa", "0.5"}});
    FAIL("expected usage error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::usage);
    CHECK(std::string(e.what()).find("alpa") != std::string::npos);
  }
}

TEST_CASE("source preparation and target projection") {
  auto synth = testutil::small_synth(2, 50, 91);
  auto cohort = synthgen::generate_cohort(synth);
  RunConfig cfg = fast_cfg();

  std::vector<int> hvg;
  int genes = 0;
  prepare_sources(cohort, cfg, &hvg, &genes);
  CHECK(genes == synth.n_genes);
  CHECK(static_cast<int>(hvg.size()) == cfg.n_hvg);
  for (const auto& ds : cohort) {
    CHECK(ds.gene_expr.rows() == ds.n_spots());
    CHECK(ds.gene_expr.cols() == cfg.n_hvg);
  }

  SUBCASE("target with the same panel projects losslessly") {
    auto target = synthgen::generate_cohort(synth)[1];
    const int missing = prepare_target(target, cfg, hvg, genes);
    CHECK(missing == 0);
    CHECK((target.gene_expr - cohort[1].gene_expr).norm() == 0);
  }

  SUBCASE("missing trailing genes are zero-filled and counted") {
    auto target = synthgen::generate_cohort(synth)[1];
    const int keep = synth.n_genes - 10;
    Mat truncated = target.gene_counts.leftCols(keep);
    target.gene_counts = truncated;
    const int missing = prepare_target(target, cfg, hvg, genes);
    int expected_missing = 0;
    for (int idx : hvg)
      if (idx >= keep) ++expected_missing;
    CHECK(missing == expected_missing);
    CHECK(target.gene_expr.cols() == cfg.n_hvg);
  }

  SUBCASE("per-dataset mode refits on the target") {
    RunConfig per = cfg;
    per.hvg_mode = "per-dataset";
    auto target = synthgen::generate_cohort(synth)[1];
    const int missing = prepare_target(target, per, {}, genes);
    CHECK(missing == 0);
    CHECK(target.gene_expr.cols() == per.n_hvg);
  }
}

TEST_CASE("stage sequencing is enforced") {
  auto synth = testutil::small_synth(1, 30, 92);
  RunConfig cfg = fast_cfg();
  auto cohort = testutil::prepared_cohort(synth, cfg);
  Pipeline pl;
  pl.cfg = cfg;
  CHECK_THROWS_AS(train_stages(pl, cohort, Stage::fuse), Error);
  CHECK_THROWS_AS(train_stages(pl, cohort, Stage::cls), Error);
}

TEST_CASE("pipeline trains, saves, and reloads with stable bytes") {
  TempDir tmp;
  auto synth = testutil::small_synth(2, 40, 93);
  RunConfig cfg = fast_cfg();
  Pipeline pl;
  pl.cfg = cfg;
  auto cohort =
      testutil::prepared_cohort(synth, cfg, &pl.hvg, &pl.source_n_genes);
  train_stages(pl, cohort, Stage::all);
  CHECK(pl.has_align);
  CHECK(pl.has_vrbca);
  CHECK(pl.has_cls);
  CHECK(!pl.training_log.empty());

  const fs::path ckpt = tmp.path / "model.ckpt";
  save_pipeline(ckpt, pl);
  Pipeline back = load_pipeline(ckpt);
  const fs::path ckpt2 = tmp.path / "model2.ckpt";
  save_pipeline(ckpt2, back);
  CHECK(read_text_file(ckpt) == read_text_file(ckpt2));

  // reloaded model scores close to the original (f32 checkpoint quantization)
  auto target = cohort[0];
  auto s1 = predict_scores(pl, target);
  auto s2 = predict_scores(back, target);
  REQUIRE(s1.size() == s2.size());
  for (size_t i = 0; i < s1.size(); ++i)
    CHECK(s1[i] == doctest::Approx(s2[i]).epsilon(1e-4));
}

TEST_CASE("cli round trip: synth, train, infer, eval") {
  TempDir tmp;
  const fs::path cohort_dir = tmp.path / "cohort";
  const fs::path model_dir = tmp.path / "model";
  const fs::path scores = tmp.path / "scores.tsv";
  const fs::path report = tmp.path / "report.txt";

  // synth
  KvMap synth_kv = testutil::small_synth(3, 40, 7).to_kv();
  write_kv_file(tmp.path / "synth.cfg", synth_kv);
  cli::SynthArgs sa;
  sa.config = tmp.path / "synth.cfg";
  sa.out_dir = cohort_dir;
  CHECK(cli::cmd_synth(sa) == 0);
  CHECK(fs::exists(cohort_dir / "manifest.txt"));
  CHECK_THROWS_AS(cli::cmd_synth(sa), Error);  // refuses non-empty dir
  sa.force = true;
  CHECK(cli::cmd_synth(sa) == 0);

  // byte-identical rerun under the same seed
  cli::SynthArgs sb = sa;
  sb.out_dir = tmp.path / "cohort_b";
  sb.force = false;
  CHECK(cli::cmd_synth(sb) == 0);
  CHECK(read_text_file(cohort_dir / "synth0" / "gene_counts.mat") ==
        read_text_file(sb.out_dir / "synth0" / "gene_counts.mat"));

  // train on two of the three datasets
  cli::TrainArgs ta;
  ta.sources = {cohort_dir / "synth0", cohort_dir / "synth1"};
  ta.out_dir = model_dir;
  for (const auto& [k, v] : fast_cfg().to_kv()) ta.overrides[k] = v;
  ta.seed = 5;
  ta.deterministic = true;
  CHECK(cli::cmd_train(ta) == 0);
  CHECK(fs::exists(model_dir / "model.ckpt"));
  CHECK(fs::exists(model_dir / "training_log.tsv"));

  // deterministic rerun reproduces the checkpoint bytes
  cli::TrainArgs tb = ta;
  tb.out_dir = tmp.path / "model_b";
  CHECK(cli::cmd_train(tb) == 0);
  CHECK(read_text_file(model_dir / "model.ckpt") ==
        read_text_file(tb.out_dir / "model.ckpt"));

  // staged training produces a complete model too (stage boundaries resume
  // from the f32 checkpoint, so bytes legitimately differ from stage=all)
  cli::TrainArgs tstage = ta;
  tstage.out_dir = tmp.path / "model_staged";
  tstage.stage = "align";
  CHECK(cli::cmd_train(tstage) == 0);
  tstage.stage = "fuse";
  CHECK(cli::cmd_train(tstage) == 0);
  tstage.stage = "cls";
  CHECK(cli::cmd_train(tstage) == 0);
  {
    Pipeline staged = load_pipeline(tstage.out_dir / "model.ckpt");
    CHECK(staged.has_align);
    CHECK(staged.has_vrbca);
    CHECK(staged.has_cls);
    // rerunning the identical staged sequence is byte-stable
    cli::TrainArgs tstage2 = ta;
    tstage2.out_dir = tmp.path / "model_staged2";
    for (const char* st : {"align", "fuse", "cls"}) {
      tstage2.stage = st;
      CHECK(cli::cmd_train(tstage2) == 0);
    }
    CHECK(read_text_file(tstage.out_dir / "model.ckpt") ==
          read_text_file(tstage2.out_dir / "model.ckpt"));
  }

  // infer on the held-out dataset
  cli::InferArgs ia;
  ia.model_dir = model_dir;
  ia.data_dir = cohort_dir / "synth2";
  ia.out_tsv = scores;
  CHECK(cli::cmd_infer(ia) == 0);
  auto table = discriminator::read_scores_tsv(scores);
  auto target = dataio::load_dataset(cohort_dir / "synth2");
  CHECK(static_cast<int>(table.scores.size()) == target.n_spots());

  // calls equal binarize(scores, theta)
  KvMap side = read_kv_file(fs::path(scores.string() + ".gmm.txt"));
  const double theta = parse_real(side.at("threshold"), "threshold");
  auto expect_calls = discriminator::binarize(table.scores, theta);
  CHECK(table.calls == expect_calls);

  // eval produces a full report
  cli::EvalArgs ea;
  ea.scores_tsv = scores;
  ea.data_dir = cohort_dir / "synth2";
  ea.out_report = report;
  CHECK(cli::cmd_eval(ea) == 0);
  auto rep = metrics::read_report(report);
  CHECK(rep.auc.has_value());
  CHECK(rep.n_spots == target.n_spots());
  CHECK(rep.extras.count("threshold") == 1);

  // unlabeled target still scores
  auto unlabeled_dir = tmp.path / "unlabeled";
  auto unlabeled = target;
  unlabeled.labels.reset();
  dataio::save_dataset(unlabeled_dir, unlabeled);
  cli::InferArgs iu = ia;
  iu.data_dir = unlabeled_dir;
  iu.out_tsv = tmp.path / "scores_unlabeled.tsv";
  CHECK(cli::cmd_infer(iu) == 0);

  // but eval on it fails cleanly
  cli::EvalArgs eu = ea;
  eu.data_dir = unlabeled_dir;
  eu.out_report = tmp.path / "report_unlabeled.txt";
  CHECK_THROWS_AS(cli::cmd_eval(eu), Error);
}

TEST_CASE("training-log losses end lower than they start for every stage") {
  auto synth = testutil::small_synth(2, 100, 95);
  synth.image_noise_sd = 0.1;
  synth.gene_noise_sd = 0.1;
  RunConfig cfg = testutil::small_run_config();
  // mechanism-scale lr so a short run shows clear descent
  cfg.lr = 1e-3;
  cfg.epochs_align = 8;
  cfg.epochs_fuse = 8;
  cfg.epochs_cls = 8;
  auto cohort = testutil::prepared_cohort(synth, cfg);
  Pipeline pl;
  pl.cfg = cfg;
  train_stages(pl, cohort, Stage::all);

  std::map<std::string, std::pair<double, double>> first_last;
  for (const auto& [stage, epoch, loss] : pl.training_log) {
    if (!first_last.count(stage)) first_last[stage] = {loss, loss};
    first_last[stage].second = loss;
  }
  REQUIRE(first_last.size() == 3);
  for (const auto& [stage, fl] : first_last) {
    INFO(stage, ": ", fl.first, " -> ", fl.second);
    CHECK(fl.second < fl.first);
  }
}

TEST_CASE("resolve_run_config layers file, overrides, and flags") {
  TempDir tmp;
  KvMap file_kv{{"alpha", "0.25"}, {"n_hvg", "20"}};
  write_kv_file(tmp.path / "run.cfg", file_kv);
  cli::TrainArgs args;
  args.config = tmp.path / "run.cfg";
  args.overrides["alpha"] = "0.75";  // command line wins over the file
  args.seed = 11;
  args.ablate = {"rvae"};
  RunConfig cfg = cli::resolve_run_config(args);
  CHECK(cfg.alpha == 0.75);
  CHECK(cfg.n_hvg == 20);
  CHECK(cfg.seed == 11);
  CHECK(cfg.ablate_rvae);
  CHECK(!cfg.ablate_bca);

  args.ablate = {"nonsense"};
  CHECK_THROWS_AS(cli::resolve_run_config(args), Error);
}

TEST_CASE("training stages append to the log and losses stay finite") {
  auto synth = testutil::small_synth(2, 40, 94);
  RunConfig cfg = fast_cfg();
  cfg.epochs_align = 3;
  auto cohort = testutil::prepared_cohort(synth, cfg);
  Pipeline pl;
  pl.cfg = cfg;
  train_stages(pl, cohort, Stage::all);
  int align_rows = 0, fuse_rows = 0, cls_rows = 0;
  for (const auto& [stage, epoch, loss] : pl.training_log) {
    CHECK(std::isfinite(loss));
    if (stage == "align") ++align_rows;
    if (stage == "fuse") ++fuse_rows;
    if (stage == "cls") ++cls_rows;
  }
  CHECK(align_rows == 3);
  CHECK(fuse_rows == 2);
  CHECK(cls_rows == 2);
}
