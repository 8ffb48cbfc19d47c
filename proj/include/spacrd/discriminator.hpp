#pragma once

#include "spacrd/align.hpp"
#include "spacrd/common.hpp"
#include "spacrd/fusion.hpp"

namespace spacrd::discriminator {

struct DiscConfig {
  int hidden = 64;
  double gamma = 0.1;  // weight of the fused loss inside L_cls
  double lr = 1e-5;
  int epochs = 50;
  int batch_size = 128;
};

/// Two-layer MLP with sigmoid output over the concatenated latent mean and
/// log-variance.
struct DiscriminatorModel {
  DiscConfig cfg;
  int latent = 0;  // classifier input is 2*latent
  diffcore::ParamStore params;  // cls/*
  std::vector<double> loss_trace;
};

DiscriminatorModel init_discriminator(int latent, const DiscConfig& cfg,
                                      RngStream& rng);

/// Mean binary cross entropy over probabilities (clipped away from 0/1 so the
/// logs stay finite).
double bce_loss(const std::vector<double>& probs, const std::vector<int>& labels);

/// Cancer-likelihood score per spot, strictly inside (0,1). Deterministic:
/// frozen encoders, no sampling.
std::vector<double> predict_scores(const align::AlignmentModel& align_model,
                                   const fusion::VrbcaModel& vrbca,
                                   const DiscriminatorModel& disc,
                                   const dataio::SpotDataset& prepared);

/// One stage-III step: L_BCE + gamma * L_fused over the batch, exposed for
/// gradient checks. Gradients come back split by parameter prefix.
real discriminator_step_loss(fusion::VrbcaModel& vrbca, DiscriminatorModel& disc,
                             const fusion::ContextCache& cache,
                             const std::vector<int>& spots,
                             const std::vector<int>& labels, const Mat& eps,
                             double gamma, diffcore::GradMap* grads);

/// Stage III: jointly fine-tunes the VRBCA parameters with the classifier.
void train_discriminator(fusion::VrbcaModel& vrbca, DiscriminatorModel& disc,
                         const align::AlignmentModel& align_model,
                         const std::vector<dataio::SpotDataset>& datasets,
                         double gamma, RngStream& rng);

// --- GMM threshold selection -------------------------------------------

struct GmmParams {
  double pi1 = 0.5, pi2 = 0.5;
  double mu1 = 0, mu2 = 0;
  double var1 = 1, var2 = 1;
  double log_likelihood = 0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> loglik_trace;
};

/// EM fit of a two-component univariate mixture. Deterministic init (means at
/// the 25th/75th percentiles, equal weights, pooled variance); components are
/// returned with mu1 <= mu2. All-equal inputs come back converged=false with
/// both components at the common value.
GmmParams fit_gmm_1d(const std::vector<double>& scores, int max_iter = 200,
                     double tol = 1e-8);

struct ThresholdResult {
  double theta = 0.5;
  enum class Method { quadratic_root, midpoint_fallback } method =
      Method::midpoint_fallback;
  double a = 0, b = 0, c = 0;  // quadratic coefficients when applicable
};

/// Decision threshold where the two weighted component densities are equal,
/// restricted to the open interval between the means; midpoint of the means
/// when no usable root exists.
ThresholdResult gmm_threshold(const GmmParams& p);

/// 1 iff score >= theta.
std::vector<int> binarize(const std::vector<double>& scores, double theta);

// --- scores TSV ----------------------------------------------------------

void write_scores_tsv(const std::filesystem::path& path, const Mat& coords,
                      const std::vector<double>& scores,
                      const std::vector<int>& calls,
                      const std::string& threshold_method);

struct ScoresTable {
  std::vector<double> scores;
  std::vector<int> calls;
  Mat coords;
  std::string threshold_method;
};

ScoresTable read_scores_tsv(const std::filesystem::path& path);

}  // namespace spacrd::discriminator
