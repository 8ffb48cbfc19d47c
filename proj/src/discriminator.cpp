#include "spacrd/discriminator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace spacrd::discriminator {

using diffcore::GradMap;
using diffcore::ParamStore;
using diffcore::Tape;

DiscriminatorModel init_discriminator(int latent, const DiscConfig& cfg,
                                      RngStream& rng) {
  if (latent < 1) fail(ErrorKind::argument, "latent dim must be positive");
  DiscriminatorModel model;
  model.cfg = cfg;
  model.latent = latent;
  RngStream r = rng.fork("cls-init");
  model.params.add("cls/l1.w", diffcore::glorot_init(2 * latent, cfg.hidden, r));
  model.params.add("cls/l1.b", Mat::Zero(1, cfg.hidden));
  model.params.add("cls/out.w", diffcore::glorot_init(cfg.hidden, 1, r));
  model.params.add("cls/out.b", Mat::Zero(1, 1));
  return model;
}

double bce_loss(const std::vector<double>& probs,
                const std::vector<int>& labels) {
  if (probs.size() != labels.size())
    fail(ErrorKind::dimension, "probs and labels differ in length");
  if (probs.empty()) fail(ErrorKind::argument, "empty batch");
  double acc = 0;
  for (size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], 1e-12, 1.0 - 1e-12);
    if (labels[i] != 0 && labels[i] != 1)
      fail(ErrorKind::validation, "labels must be 0 or 1");
    acc += labels[i] ? -std::log(p) : -std::log1p(-p);
  }
  return acc / static_cast<double>(probs.size());
}

namespace {

// classifier logits for a (mu || log_var) feature node
int build_classifier_logits(Tape& t, DiscriminatorModel& disc, int features) {
  ParamStore& p = disc.params;
  int h = t.relu(t.add_rowvec(t.matmul(features, t.param(p, "cls/l1.w")),
                              t.param(p, "cls/l1.b")));
  return t.add_rowvec(t.matmul(h, t.param(p, "cls/out.w")),
                      t.param(p, "cls/out.b"));
}

}  // namespace

std::vector<double> predict_scores(const align::AlignmentModel& align_model,
                                   const fusion::VrbcaModel& vrbca,
                                   const DiscriminatorModel& disc,
                                   const dataio::SpotDataset& prepared) {
  if (prepared.gene_expr.size() == 0)
    fail(ErrorKind::validation,
         "dataset " + prepared.dataset_id + " is not preprocessed");
  if (prepared.gene_expr.cols() != align_model.d_gene)
    fail(ErrorKind::validation,
         "gene-set mismatch: model expects " +
             std::to_string(align_model.d_gene) + " genes, dataset " +
             prepared.dataset_id + " has " +
             std::to_string(prepared.gene_expr.cols()));

  auto& vm = const_cast<fusion::VrbcaModel&>(vrbca);
  auto& dm = const_cast<DiscriminatorModel&>(disc);
  fusion::ContextCache cache =
      fusion::build_context_cache(align_model, prepared, vrbca.cfg.k);
  const int n = prepared.n_spots();

  std::vector<double> scores;
  scores.reserve(n);
  // chunked so tape sizes stay modest on large sections
  const int chunk = 256;
  for (int start = 0; start < n; start += chunk) {
    const int b = std::min(chunk, n - start);
    std::vector<int> spots(b);
    for (int i = 0; i < b; ++i) spots[i] = start + i;
    Tape t;
    int hstar = fusion::build_hstar(t, vm, cache, spots);
    auto [mu, lv] = fusion::rvae_encode(vrbca, t.value(hstar));
    Mat features(mu.rows(), mu.cols() + lv.cols());
    features << mu, lv;
    int logits = build_classifier_logits(t, dm, t.constant(std::move(features)));
    int probs = t.sigmoid(logits);
    const Mat& v = t.value(probs);
    for (int i = 0; i < b; ++i) scores.push_back(static_cast<double>(v(i, 0)));
  }
  for (double s : scores)
    if (!(s > 0.0 && s < 1.0))
      fail(ErrorKind::numeric, "score outside (0,1)");
  return scores;
}

real discriminator_step_loss(fusion::VrbcaModel& vrbca, DiscriminatorModel& disc,
                             const fusion::ContextCache& cache,
                             const std::vector<int>& spots,
                             const std::vector<int>& labels, const Mat& eps,
                             double gamma, GradMap* grads) {
  Tape t;
  int hstar = fusion::build_hstar(t, vrbca, cache, spots);
  auto nodes =
      fusion::build_rvae_loss(t, vrbca, hstar, labels, eps, vrbca.cfg.beta);
  int features = t.concat_cols({nodes.mu, nodes.log_var});
  int logits = build_classifier_logits(t, disc, features);
  Mat targets(labels.size(), 1);
  for (size_t i = 0; i < labels.size(); ++i)
    targets(static_cast<Eigen::Index>(i), 0) = static_cast<real>(labels[i]);
  int bce = t.bce_with_logits_mean(logits, std::move(targets));
  int loss = t.add(bce, t.affine_scalar(nodes.fused_loss,
                                        static_cast<real>(gamma), real(0)));
  if (grads) {
    t.backward(loss);
    *grads = t.param_grads();
  }
  return t.value(loss)(0, 0);
}

void train_discriminator(fusion::VrbcaModel& vrbca, DiscriminatorModel& disc,
                         const align::AlignmentModel& align_model,
                         const std::vector<dataio::SpotDataset>& datasets,
                         double gamma, RngStream& rng) {
  if (datasets.empty()) fail(ErrorKind::argument, "no datasets given");
  for (const auto& ds : datasets)
    if (!ds.labels)
      fail(ErrorKind::validation,
           "stage III needs labels; dataset " + ds.dataset_id + " has none");

  std::vector<fusion::ContextCache> caches;
  caches.reserve(datasets.size());
  for (const auto& ds : datasets)
    caches.push_back(fusion::build_context_cache(align_model, ds, vrbca.cfg.k));

  diffcore::AdamConfig adam_vrbca{static_cast<real>(vrbca.cfg.lr)};
  diffcore::AdamConfig adam_cls{static_cast<real>(disc.cfg.lr)};
  RngStream shuffle_rng = rng.fork("shuffle");
  RngStream eps_rng = rng.fork("eps");

  for (int epoch = 0; epoch < disc.cfg.epochs; ++epoch) {
    double epoch_loss = 0;
    long n_batches = 0;
    for (size_t d = 0; d < datasets.size(); ++d) {
      const auto& ds = datasets[d];
      const int n = ds.n_spots();
      std::vector<int> order = shuffle_rng.permutation(n);
      for (int start = 0; start < n; start += disc.cfg.batch_size) {
        const int b = std::min(disc.cfg.batch_size, n - start);
        std::vector<int> spots(order.begin() + start,
                               order.begin() + start + b);
        std::vector<int> labels(b);
        for (int i = 0; i < b; ++i) labels[i] = (*ds.labels)(spots[i]);
        Mat eps(b, vrbca.cfg.latent);
        for (int i = 0; i < b; ++i)
          for (int j = 0; j < vrbca.cfg.latent; ++j)
            eps(i, j) = static_cast<real>(eps_rng.normal());
        GradMap grads;
        epoch_loss += discriminator_step_loss(vrbca, disc, caches[d], spots,
                                              labels, eps, gamma, &grads);
        GradMap g_vrbca, g_cls;
        for (auto& [name, g] : grads)
          (name.rfind("cls/", 0) == 0 ? g_cls : g_vrbca)[name] = std::move(g);
        diffcore::adam_step(vrbca.params, g_vrbca, adam_vrbca);
        diffcore::adam_step(disc.params, g_cls, adam_cls);
        ++n_batches;
      }
    }
    disc.loss_trace.push_back(epoch_loss / std::max<long>(1, n_batches));
  }
}

// ---------------------------------------------------------------------------
// GMM fit and threshold

namespace {

double log_normal_pdf(double x, double mu, double var) {
  static const double log_2pi = std::log(2.0 * M_PI);
  return -0.5 * (log_2pi + std::log(var) + (x - mu) * (x - mu) / var);
}

double weighted_log_density_diff(double y, const GmmParams& p) {
  return (std::log(p.pi1) + log_normal_pdf(y, p.mu1, p.var1)) -
         (std::log(p.pi2) + log_normal_pdf(y, p.mu2, p.var2));
}

}  // namespace

GmmParams fit_gmm_1d(const std::vector<double>& scores, int max_iter,
                     double tol) {
  if (scores.size() < 4)
    fail(ErrorKind::argument, "GMM fit needs at least 4 scores");
  for (double s : scores)
    if (!std::isfinite(s)) fail(ErrorKind::validation, "non-finite score");
  const auto n = scores.size();
  constexpr double kVarFloor = 1e-6;

  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());

  GmmParams p;
  if (sorted.front() == sorted.back()) {
    // degenerate: every score identical; caller must fall back to midpoint
    p.mu1 = p.mu2 = sorted.front();
    p.var1 = p.var2 = kVarFloor;
    p.converged = false;
    return p;
  }

  double mean = 0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(n);
  double var = 0;
  for (double s : scores) var += (s - mean) * (s - mean);
  var = std::max(var / static_cast<double>(n), kVarFloor);

  p.mu1 = sorted[n / 4];
  p.mu2 = sorted[(3 * n) / 4];
  p.var1 = p.var2 = var;
  p.pi1 = p.pi2 = 0.5;

  std::vector<double> r1(n);
  double prev_ll = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iter; ++it) {
    // E step in the log domain
    double ll = 0;
    for (size_t i = 0; i < n; ++i) {
      const double a = std::log(p.pi1) + log_normal_pdf(scores[i], p.mu1, p.var1);
      const double b = std::log(p.pi2) + log_normal_pdf(scores[i], p.mu2, p.var2);
      const double m = std::max(a, b);
      const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
      r1[i] = std::exp(a - lse);
      ll += lse;
    }
    p.loglik_trace.push_back(ll);
    p.log_likelihood = ll;
    p.iterations = it + 1;
    if (ll - prev_ll < tol && it > 0) {
      p.converged = true;
      break;
    }
    prev_ll = ll;

    // M step
    double w1 = 0;
    for (double r : r1) w1 += r;
    const double w2 = static_cast<double>(n) - w1;
    if (w1 <= 0 || w2 <= 0) break;  // one component vanished
    double m1 = 0, m2 = 0;
    for (size_t i = 0; i < n; ++i) {
      m1 += r1[i] * scores[i];
      m2 += (1.0 - r1[i]) * scores[i];
    }
    m1 /= w1;
    m2 /= w2;
    double v1 = 0, v2 = 0;
    for (size_t i = 0; i < n; ++i) {
      v1 += r1[i] * (scores[i] - m1) * (scores[i] - m1);
      v2 += (1.0 - r1[i]) * (scores[i] - m2) * (scores[i] - m2);
    }
    p.pi1 = w1 / static_cast<double>(n);
    p.pi2 = w2 / static_cast<double>(n);
    p.mu1 = m1;
    p.mu2 = m2;
    p.var1 = std::max(v1 / w1, kVarFloor);
    p.var2 = std::max(v2 / w2, kVarFloor);
  }

  if (p.mu1 > p.mu2) {
    std::swap(p.mu1, p.mu2);
    std::swap(p.var1, p.var2);
    std::swap(p.pi1, p.pi2);
  }
  return p;
}

ThresholdResult gmm_threshold(const GmmParams& p) {
  ThresholdResult res;
  const double lo = std::min(p.mu1, p.mu2);
  const double hi = std::max(p.mu1, p.mu2);
  res.theta = 0.5 * (p.mu1 + p.mu2);
  res.method = ThresholdResult::Method::midpoint_fallback;
  if (!(p.var1 > 0) || !(p.var2 > 0) || !(p.pi1 > 0) || !(p.pi2 > 0) ||
      lo == hi)
    return res;

  // log-density equality rearranged into a*y^2 + b*y + c = 0
  res.a = 1.0 / (2.0 * p.var2) - 1.0 / (2.0 * p.var1);
  res.b = p.mu1 / p.var1 - p.mu2 / p.var2;
  res.c = p.mu2 * p.mu2 / (2.0 * p.var2) - p.mu1 * p.mu1 / (2.0 * p.var1) +
          std::log((p.pi1 * std::sqrt(p.var2)) / (p.pi2 * std::sqrt(p.var1)));

  std::vector<double> roots;
  if (std::abs(res.a) < 1e-14) {
    if (std::abs(res.b) > 1e-14) roots.push_back(-res.c / res.b);
  } else {
    const double disc = res.b * res.b - 4.0 * res.a * res.c;
    if (disc >= 0) {
      const double sq = std::sqrt(disc);
      roots.push_back((-res.b + sq) / (2.0 * res.a));
      roots.push_back((-res.b - sq) / (2.0 * res.a));
    }
  }

  double best = std::numeric_limits<double>::quiet_NaN();
  double best_residual = std::numeric_limits<double>::infinity();
  for (double y : roots) {
    if (!(y > lo && y < hi)) continue;
    const double residual = std::abs(weighted_log_density_diff(y, p));
    if (residual < best_residual) {
      best = y;
      best_residual = residual;
    }
  }
  if (std::isfinite(best)) {
    res.theta = best;
    res.method = ThresholdResult::Method::quadratic_root;
  }
  return res;
}

std::vector<int> binarize(const std::vector<double>& scores, double theta) {
  std::vector<int> calls(scores.size());
  for (size_t i = 0; i < scores.size(); ++i)
    calls[i] = scores[i] >= theta ? 1 : 0;
  return calls;
}

// ---------------------------------------------------------------------------
// scores TSV

void write_scores_tsv(const std::filesystem::path& path, const Mat& coords,
                      const std::vector<double>& scores,
                      const std::vector<int>& calls,
                      const std::string& threshold_method) {
  if (coords.rows() != static_cast<Eigen::Index>(scores.size()) ||
      scores.size() != calls.size())
    fail(ErrorKind::dimension, "scores/calls/coords length mismatch");
  std::ostringstream out;
  out << "spot_index\tx\ty\tscore\tcall\tthreshold_method\n";
  for (size_t i = 0; i < scores.size(); ++i) {
    out << i << '\t' << format_real(static_cast<double>(coords(i, 0))) << '\t'
        << format_real(static_cast<double>(coords(i, 1))) << '\t'
        << format_real(scores[i]) << '\t' << calls[i] << '\t'
        << threshold_method << '\n';
  }
  write_text_file(path, out.str());
}

ScoresTable read_scores_tsv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line) ||
      line != "spot_index\tx\ty\tscore\tcall\tthreshold_method")
    fail(ErrorKind::format, "bad scores TSV header in " + path.string());
  ScoresTable table;
  std::vector<std::array<double, 2>> xy;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    long long idx, call;
    double x, y, score;
    std::string method;
    if (!(row >> idx >> x >> y >> score >> call >> method))
      fail(ErrorKind::format, "bad scores TSV row: " + line);
    if (idx != static_cast<long long>(table.scores.size()))
      fail(ErrorKind::format, "scores TSV rows out of order");
    table.scores.push_back(score);
    table.calls.push_back(static_cast<int>(call));
    xy.push_back({x, y});
    table.threshold_method = method;
  }
  table.coords.resize(static_cast<Eigen::Index>(xy.size()), 2);
  for (size_t i = 0; i < xy.size(); ++i) {
    table.coords(static_cast<Eigen::Index>(i), 0) = static_cast<real>(xy[i][0]);
    table.coords(static_cast<Eigen::Index>(i), 1) = static_cast<real>(xy[i][1]);
  }
  return table;
}

}  // namespace spacrd::discriminator
