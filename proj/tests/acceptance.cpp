// Acceptance gate: runs every shipping criterion at its pinned tolerance and
// prints one pass/fail line per criterion. Nonzero exit on any failure.

#include "spacrd/align.hpp"
#include "spacrd/cli.hpp"
#include "spacrd/dataio.hpp"
#include "spacrd/diffcore.hpp"
#include "spacrd/discriminator.hpp"
#include "spacrd/fusion.hpp"
#include "spacrd/metrics.hpp"
#include "spacrd/pipeline.hpp"
#include "spacrd/synthgen.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <future>
#include <iostream>
#include <random>
#include <sstream>

#include "oracles.hpp"

using namespace spacrd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
  void note(const std::string& extra) {
    if (!detail.empty()) detail += "; ";
    detail += extra;
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

Mat random_mat(Eigen::Index r, Eigen::Index c, RngStream& rng, double sd = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      m(i, j) = static_cast<real>(rng.normal(0.0, sd));
  return m;
}

// ---------------------------------------------------------------------------
// The frozen synthetic transfer fixture: 5 datasets (4 source + 1 held-out
// target carrying an unseen batch transform), heavy feature noise so the
// neighborhood context carries real weight, optimizer settings at the
// reference defaults. Calibrated once; do not retune to make a run pass.

constexpr int kBenchSpots = 300;
constexpr double kBenchNoise = 0.9;
constexpr double kBenchShift = 1.5;
const std::vector<std::uint64_t> kBenchSeeds{1, 2, 3, 4, 5};

synthgen::SynthConfig bench_synth(std::uint64_t seed) {
  synthgen::SynthConfig s;
  s.n_datasets = 5;
  s.spots_per_dataset = kBenchSpots;
  s.grid_side = 18;
  s.latent_dim = 6;
  s.d_img = 32;
  s.n_genes = 96;
  s.cancer_fraction = 0.35;
  s.image_noise_sd = kBenchNoise;
  s.gene_noise_sd = kBenchNoise;
  s.batch_shift_sd = kBenchShift;
  s.seed = seed;
  return s;
}

pipeline::RunConfig bench_config(std::uint64_t seed) {
  pipeline::RunConfig cfg;  // alpha/beta/gamma/k/lr/epochs stay at defaults
  cfg.seed = seed;
  cfg.deterministic = true;
  cfg.n_hvg = 64;
  cfg.batch_size = 4;
  cfg.align_hidden1 = 48;
  cfg.align_hidden2 = 32;
  cfg.embed_dim = 32;
  cfg.heads = 8;
  cfg.rvae_hidden1 = 24;
  cfg.rvae_hidden2 = 16;
  cfg.latent_dim = 8;
  cfg.cls_hidden = 8;
  return cfg;
}

struct BenchResult {
  double auc = 0;
  double ks = 0;
};

BenchResult run_benchmark(pipeline::RunConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  auto cohort = synthgen::generate_cohort(bench_synth(seed));
  dataio::SpotDataset target = cohort.back();
  cohort.pop_back();

  pipeline::Pipeline pl;
  pl.cfg = cfg;
  pipeline::prepare_sources(cohort, cfg, &pl.hvg, &pl.source_n_genes);
  pipeline::train_stages(pl, cohort, pipeline::Stage::all);
  pipeline::prepare_target(target, cfg, pl.hvg, pl.source_n_genes);

  auto scores = pipeline::predict_scores(pl, target);
  std::vector<int> labels(target.n_spots());
  for (int i = 0; i < target.n_spots(); ++i) labels[i] = (*target.labels)(i);

  BenchResult r;
  r.auc = metrics::auc(scores, labels);
  std::vector<double> pos, neg;
  for (size_t i = 0; i < scores.size(); ++i)
    (labels[i] ? pos : neg).push_back(scores[i]);
  r.ks = metrics::ks_distance(pos, neg);
  return r;
}

// two-worker pool, each run independent and fully deterministic
std::vector<BenchResult> run_seeds(const pipeline::RunConfig& cfg) {
  std::vector<BenchResult> out(kBenchSeeds.size());
  size_t next = 0;
  while (next < kBenchSeeds.size()) {
    const size_t a = next++;
    std::future<BenchResult> fa =
        std::async(std::launch::async, run_benchmark, cfg, kBenchSeeds[a]);
    if (next < kBenchSeeds.size()) {
      const size_t b = next++;
      std::future<BenchResult> fb =
          std::async(std::launch::async, run_benchmark, cfg, kBenchSeeds[b]);
      out[b] = fb.get();
    }
    out[a] = fa.get();
  }
  return out;
}

double mean_auc(const std::vector<BenchResult>& rs) {
  double acc = 0;
  for (const auto& r : rs) acc += r.auc;
  return acc / static_cast<double>(rs.size());
}

double mean_ks(const std::vector<BenchResult>& rs) {
  double acc = 0;
  for (const auto& r : rs) acc += r.ks;
  return acc / static_cast<double>(rs.size());
}

// shared across criteria 6-8
std::vector<BenchResult> g_default_runs;

// ---------------------------------------------------------------------------

Outcome criterion_formula_oracles() {
  Outcome o;

  Mat s2 = Mat::Identity(2, 2);
  const double infonce = align::infonce_bidirectional(s2, 0.5);
  o.require(std::abs(infonce - 0.313262) <= 1e-6,
            "infonce on I2 = " + fmt(infonce));

  Mat mu = Mat::Constant(1, 1, real(1)), lv = Mat::Zero(1, 1),
      c = Mat::Zero(1, 1);
  const double kl_half = fusion::class_kl(mu, lv, c);
  o.require(std::abs(kl_half - 0.5) <= 1e-12, "class_kl(1,0,0) = " + fmt(kl_half));
  Mat same = Mat::Constant(1, 4, real(0.3));
  o.require(fusion::class_kl(same, Mat::Zero(1, 4), same) == 0.0,
            "class_kl at the prior-matching minimum is not exactly 0");

  const double bce = discriminator::bce_loss({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0});
  o.require(std::abs(bce - std::log(2.0)) <= 1e-9, "bce(0.5) = " + fmt(bce));

  discriminator::GmmParams fixture;
  fixture.pi1 = fixture.pi2 = 0.5;
  fixture.mu1 = 0;
  fixture.mu2 = 1;
  fixture.var1 = 0.01;
  fixture.var2 = 0.04;
  auto thr = discriminator::gmm_threshold(fixture);
  const double oracle = oracles::bisect_threshold(fixture);
  o.require(thr.method == discriminator::ThresholdResult::Method::quadratic_root,
            "fixture threshold not a quadratic root");
  o.require(std::abs(thr.theta - oracle) <= 1e-8,
            "threshold " + fmt(thr.theta) + " vs bisection " + fmt(oracle));

  std::mt19937_64 gen(2024);
  std::uniform_real_distribution<double> u(0, 1);
  int quadratic = 0;
  for (int trial = 0; trial < 50; ++trial) {
    discriminator::GmmParams p;
    p.pi1 = 0.2 + 0.6 * u(gen);
    p.pi2 = 1.0 - p.pi1;
    p.mu1 = 0.1 + 0.3 * u(gen);
    p.mu2 = p.mu1 + 0.2 + 0.4 * u(gen);
    p.var1 = std::pow(0.03 + 0.12 * u(gen), 2);
    p.var2 = std::pow(0.03 + 0.12 * u(gen), 2);
    auto r = discriminator::gmm_threshold(p);
    if (r.method != discriminator::ThresholdResult::Method::quadratic_root)
      continue;
    ++quadratic;
    const double d1 = oracles::weighted_density(r.theta, p.pi1, p.mu1, p.var1);
    const double d2 = oracles::weighted_density(r.theta, p.pi2, p.mu2, p.var2);
    o.require(std::abs(d1 - d2) <= 1e-9,
              "density equality violated at trial " + std::to_string(trial));
  }
  o.require(quadratic >= 40, "too few quadratic-root cases");
  return o;
}

Outcome criterion_gradient_integrity() {
  Outcome o;
  auto synth = bench_synth(77);
  synth.n_datasets = 1;
  synth.spots_per_dataset = 48;
  synth.grid_side = 7;
  auto cfg = bench_config(77);
  auto cohort = synthgen::generate_cohort(synth);
  std::vector<int> hvg;
  int genes = 0;
  pipeline::prepare_sources(cohort, cfg, &hvg, &genes);

  // stage I contrastive loss
  {
    RngStream rng(101);
    align::AlignConfig acfg = cfg.align_config();
    align::AlignmentModel model = align::init_alignment(
        static_cast<int>(cohort[0].image_features.cols()),
        static_cast<int>(cohort[0].gene_expr.cols()), acfg, rng);
    Mat x_img = cohort[0].image_features.topRows(6);
    Mat x_gene = cohort[0].gene_expr.topRows(6);
    auto loss = [&](diffcore::ParamStore&, diffcore::GradMap* g) -> real {
      return align::alignment_step_loss(model, x_img, x_gene, 5150,
                                        /*update_running=*/false, g);
    };
    auto rep = diffcore::finite_difference_check(loss, model.params, 20, 1e-5,
                                                 1e-4, 11);
    o.require(rep.pass, "contrastive loss max rel err " + fmt(rep.max_rel_err));
  }

  // stage II fused loss with fixed noise draws
  RngStream rng2(102);
  align::AlignConfig small_align = cfg.align_config();
  align::AlignmentModel am = align::init_alignment(
      static_cast<int>(cohort[0].image_features.cols()),
      static_cast<int>(cohort[0].gene_expr.cols()), small_align, rng2);
  fusion::VrbcaConfig vcfg = cfg.vrbca_config();
  fusion::VrbcaModel vm = fusion::init_vrbca(vcfg, rng2);
  fusion::ContextCache cache = fusion::build_context_cache(am, cohort[0], vcfg.k);
  std::vector<int> spots{0, 7, 19, 30};
  std::vector<int> labels;
  for (int s : spots) labels.push_back((*cohort[0].labels)(s));
  RngStream erng(103);
  Mat eps = random_mat(4, vcfg.latent, erng);
  {
    auto loss = [&](diffcore::ParamStore&, diffcore::GradMap* g) -> real {
      return fusion::fusion_step_loss(vm, cache, spots, labels, eps, g);
    };
    auto rep =
        diffcore::finite_difference_check(loss, vm.params, 20, 1e-5, 1e-4, 12);
    o.require(rep.pass, "fused loss max rel err " + fmt(rep.max_rel_err));
  }

  // stage III combined loss, both parameter groups
  {
    RngStream rng3(104);
    discriminator::DiscriminatorModel dm =
        discriminator::init_discriminator(vcfg.latent, cfg.disc_config(), rng3);
    auto loss_group = [&](bool cls_side) {
      return [&, cls_side](diffcore::ParamStore&,
                           diffcore::GradMap* g) -> real {
        diffcore::GradMap all;
        const real v = discriminator::discriminator_step_loss(
            vm, dm, cache, spots, labels, eps, cfg.gamma,
            g ? &all : nullptr);
        if (g)
          for (auto& [name, grad] : all)
            if ((name.rfind("cls/", 0) == 0) == cls_side)
              (*g)[name] = std::move(grad);
        return v;
      };
    };
    auto rep_v = diffcore::finite_difference_check(loss_group(false), vm.params,
                                                   20, 1e-5, 1e-4, 13);
    o.require(rep_v.pass,
              "combined loss (fusion params) max rel err " + fmt(rep_v.max_rel_err));
    auto rep_c = diffcore::finite_difference_check(loss_group(true), dm.params,
                                                   20, 1e-5, 1e-4, 14);
    o.require(rep_c.pass,
              "combined loss (classifier) max rel err " + fmt(rep_c.max_rel_err));
  }
  return o;
}

Outcome criterion_em_recovery() {
  Outcome o;
  std::mt19937_64 gen(99);
  std::normal_distribution<double> n1(0.0, 0.1), n2(1.0, 0.15);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> scores;
  scores.reserve(10000);
  for (int i = 0; i < 10000; ++i)
    scores.push_back(u(gen) < 0.4 ? n1(gen) : n2(gen));

  auto p = discriminator::fit_gmm_1d(scores);
  o.require(std::abs(p.mu1 - 0.0) < 0.02, "mu1 = " + fmt(p.mu1));
  o.require(std::abs(p.mu2 - 1.0) < 0.02, "mu2 = " + fmt(p.mu2));
  o.require(std::abs(p.pi1 - 0.4) < 0.03, "pi1 = " + fmt(p.pi1));
  for (size_t i = 1; i < p.loglik_trace.size(); ++i)
    o.require(p.loglik_trace[i] >= p.loglik_trace[i - 1] - 1e-9,
              "log-likelihood decreased at iteration " + std::to_string(i));
  o.note("mu=(" + fmt(p.mu1) + "," + fmt(p.mu2) + ") pi1=" + fmt(p.pi1) +
         " iters=" + std::to_string(p.iterations));
  return o;
}

Outcome criterion_metric_oracles() {
  Outcome o;
  std::mt19937_64 gen(4096);
  std::uniform_int_distribution<int> size_d(2, 30);
  std::uniform_int_distribution<int> lab_d(0, 1);
  std::uniform_int_distribution<int> score_d(0, 9);
  int done = 0;
  while (done < 100) {
    const int n = size_d(gen);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = score_d(gen) / 10.0;
      y[i] = lab_d(gen);
    }
    const long pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == n) continue;
    ++done;
    o.require(metrics::auc(s, y) == oracles::auc_brute(s, y),
              "auc mismatch on instance " + std::to_string(done));
    o.require(std::abs(metrics::average_precision(s, y) -
                       oracles::ap_brute(s, y)) < 1e-12,
              "ap mismatch on instance " + std::to_string(done));
  }

  o.require(metrics::ks_distance({0.1, 0.5, 0.9}, {0.1, 0.5, 0.9}) == 0.0,
            "ks of identical samples");
  o.require(metrics::ks_distance({0.1, 0.2}, {0.8, 0.9}) == 1.0,
            "ks of disjoint supports");
  o.require(std::abs(metrics::ks_distance({0.0, 1.0}, {0.5}) - 0.5) < 1e-15,
            "ks fixture value");
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> a(7), b(11);
    for (auto& v : a) v = u(gen);
    for (auto& v : b) v = u(gen);
    o.require(metrics::ks_distance(a, b) == metrics::ks_distance(b, a),
              "ks asymmetry");
  }
  return o;
}

Outcome criterion_structural_invariants() {
  Outcome o;
  RngStream rng(31337);

  // attention is set-symmetric over jointly permuted key/value rows
  {
    diffcore::AttentionParams p;
    p.heads = 4;
    p.d_model = 16;
    p.wq = random_mat(16, 16, rng);
    p.wk = random_mat(16, 16, rng);
    p.wv = random_mat(16, 16, rng);
    p.wo = random_mat(16, 16, rng);
    Mat q = random_mat(3, 16, rng);
    Mat k = random_mat(6, 16, rng);
    Mat v = random_mat(6, 16, rng);
    Mat base = diffcore::multihead_cross_attention(q, k, v, p);
    std::vector<int> perm{5, 2, 0, 4, 1, 3};
    Mat kp(6, 16), vp(6, 16);
    for (int i = 0; i < 6; ++i) {
      kp.row(i) = k.row(perm[i]);
      vp.row(i) = v.row(perm[i]);
    }
    Mat permuted = diffcore::multihead_cross_attention(q, kp, vp, p);
    o.require((base - permuted).cwiseAbs().maxCoeff() < 1e-10,
              "attention key-permutation invariance");
  }

  // encoder outputs are unit norm
  {
    align::AlignConfig acfg;
    acfg.hidden1 = 24;
    acfg.hidden2 = 16;
    acfg.proj_dim = 12;
    align::AlignmentModel model = align::init_alignment(10, 14, acfg, rng);
    Mat h = align::encode_image(model, random_mat(9, 10, rng));
    for (Eigen::Index i = 0; i < h.rows(); ++i)
      o.require(std::abs(h.row(i).norm() - 1.0) <= 1e-6,
                "encoder row norm " + fmt(h.row(i).norm()));
  }

  // reparameterize with zero noise returns the mean
  {
    Mat mu = random_mat(3, 5, rng), lv = random_mat(3, 5, rng);
    Mat z = fusion::reparameterize(mu, lv, Mat::Zero(3, 5));
    o.require((z - mu).norm() == 0, "reparameterize(eps=0) != mu");
  }

  // binarize boundary rule
  {
    auto calls = discriminator::binarize({0.5, 0.4999999, 0.6}, 0.5);
    o.require(calls == std::vector<int>{1, 0, 1}, "binarize >= rule");
  }

  // deterministic mode: the full CLI pipeline is bitwise reproducible when
  // rerun into the same paths
  {
    const fs::path root =
        fs::temp_directory_path() / "spacrd_acceptance_determinism";
    std::ostringstream muted;
    auto* saved = std::cout.rdbuf(muted.rdbuf());  // silence cmd_* chatter
    auto run_once = [&]() {
      fs::remove_all(root);
      fs::create_directories(root);
      synthgen::SynthConfig scfg = bench_synth(9);
      scfg.n_datasets = 3;
      scfg.spots_per_dataset = 64;
      scfg.grid_side = 8;
      write_kv_file(root / "synth.cfg", scfg.to_kv());
      cli::SynthArgs sa;
      sa.config = root / "synth.cfg";
      sa.out_dir = root / "cohort";
      cli::cmd_synth(sa);

      cli::TrainArgs ta;
      ta.sources = {root / "cohort" / "synth0", root / "cohort" / "synth1"};
      ta.out_dir = root / "model";
      pipeline::RunConfig rc = bench_config(9);
      rc.epochs_align = 4;
      rc.epochs_fuse = 2;
      rc.epochs_cls = 2;
      for (const auto& [k, v] : rc.to_kv()) ta.overrides[k] = v;
      ta.deterministic = true;
      cli::cmd_train(ta);

      cli::InferArgs ia;
      ia.model_dir = root / "model";
      ia.data_dir = root / "cohort" / "synth2";
      ia.out_tsv = root / "scores.tsv";
      cli::cmd_infer(ia);

      cli::EvalArgs ea;
      ea.scores_tsv = root / "scores.tsv";
      ea.data_dir = root / "cohort" / "synth2";
      ea.out_report = root / "report.txt";
      cli::cmd_eval(ea);

      return std::tuple<std::string, std::string, std::string>(
          read_text_file(root / "model" / "model.ckpt"),
          read_text_file(root / "scores.tsv"),
          read_text_file(root / "report.txt"));
    };
    auto first = run_once();
    auto second = run_once();
    std::cout.rdbuf(saved);
    o.require(std::get<0>(first) == std::get<0>(second),
              "checkpoint bytes differ between reruns");
    o.require(std::get<1>(first) == std::get<1>(second),
              "scores TSV bytes differ between reruns");
    o.require(std::get<2>(first) == std::get<2>(second),
              "report bytes differ between reruns");
    fs::remove_all(root);
  }
  return o;
}

Outcome criterion_transfer_benchmark() {
  Outcome o;
  g_default_runs = run_seeds(bench_config(0));
  const double auc = mean_auc(g_default_runs);
  const double ks = mean_ks(g_default_runs);
  std::string per_seed;
  for (const auto& r : g_default_runs) per_seed += " " + fmt(r.auc);
  o.require(auc >= 0.90, "mean target AUC " + fmt(auc) + " < 0.90");
  o.require(ks >= 0.60, "mean class-conditional KS " + fmt(ks) + " < 0.60");
  o.note("mean AUC " + fmt(auc) + " (per seed:" + per_seed + "), mean KS " +
         fmt(ks));
  return o;
}

Outcome criterion_ablation_ordering() {
  Outcome o;
  if (g_default_runs.empty()) g_default_runs = run_seeds(bench_config(0));
  const double full = mean_auc(g_default_runs);

  auto variant = [&](const char* name) {
    pipeline::RunConfig cfg = bench_config(0);
    if (std::string(name) == "bca") cfg.ablate_bca = true;
    if (std::string(name) == "rvae") cfg.ablate_rvae = true;
    if (std::string(name) == "cl") cfg.ablate_cl = true;
    return mean_auc(run_seeds(cfg));
  };
  const double without_bca = variant("bca");
  const double without_rvae = variant("rvae");
  const double without_cl = variant("cl");

  o.note("full " + fmt(full) + ", w/o bca " + fmt(without_bca) +
         ", w/o rvae " + fmt(without_rvae) + ", w/o cl " + fmt(without_cl));
  o.require(full >= without_bca - 0.01, "full trails the bca ablation");
  o.require(full >= without_rvae - 0.01, "full trails the rvae ablation");
  o.require(full >= without_cl - 0.01, "full trails the cl ablation");
  int strictly_better = 0;
  strictly_better += full > without_bca ? 1 : 0;
  strictly_better += full > without_rvae ? 1 : 0;
  strictly_better += full > without_cl ? 1 : 0;
  o.require(strictly_better >= 2,
            "full model strictly beats only " +
                std::to_string(strictly_better) + " of 3 ablations");
  return o;
}

Outcome criterion_sensitivity() {
  Outcome o;
  if (g_default_runs.empty()) g_default_runs = run_seeds(bench_config(0));
  const double base = mean_auc(g_default_runs);

  auto check_cell = [&](const std::string& label, pipeline::RunConfig cfg) {
    const double auc = mean_auc(run_seeds(cfg));
    o.require(std::abs(auc - base) <= 0.05,
              label + " AUC " + fmt(auc) + " departs from default " + fmt(base));
    o.note(label + "=" + fmt(auc));
  };
  for (double alpha : {0.0, 1.0}) {
    pipeline::RunConfig cfg = bench_config(0);
    cfg.alpha = alpha;
    check_cell("alpha=" + fmt(alpha).substr(0, 3), cfg);
  }
  for (int k : {4, 10}) {
    pipeline::RunConfig cfg = bench_config(0);
    cfg.k_neighbors = k;
    check_cell("k=" + std::to_string(k), cfg);
  }
  o.note("default=" + fmt(base) + " (the alpha=0.5, k=6 cell reuses it)");
  return o;
}

}  // namespace

int main() {
  diffcore::set_deterministic_mode(true);
  struct Criterion {
    const char* name;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {"formula oracles", criterion_formula_oracles},
      {"gradient integrity", criterion_gradient_integrity},
      {"EM recovery", criterion_em_recovery},
      {"metric oracles", criterion_metric_oracles},
      {"structural invariants", criterion_structural_invariants},
      {"synthetic transfer benchmark", criterion_transfer_benchmark},
      {"ablation ordering", criterion_ablation_ordering},
      {"hyperparameter sensitivity", criterion_sensitivity},
  };

  int failures = 0;
  int index = 0;
  for (const auto& c : criteria) {
    ++index;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    std::printf("criterion %d [%s]: %s (%.1fs)%s%s\n", index, c.name,
                o.pass ? "PASS" : "FAIL", secs, o.detail.empty() ? "" : " - ",
                o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  if (failures) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
