#pragma once

#include "spacrd/align.hpp"
#include "spacrd/common.hpp"
#include "spacrd/dataio.hpp"
#include "spacrd/diffcore.hpp"

namespace spacrd::fusion {

struct VrbcaConfig {
  int k = 6;        // neighbors in each context
  int heads = 8;
  int d_model = 512;
  int enc_h1 = 256;
  int enc_h2 = 128;
  int latent = 64;
  double beta = 0.5;
  double lr = 1e-5;
  int epochs = 50;
  int batch_size = 128;
  double center_init_sd = 0.01;
  double logvar_clamp = 10.0;  // log-variance clamped to +-this
};

/// Bidirectional cross-attention fusion plus the category-regularized
/// variational reconstruction head and the two learnable class centers.
struct VrbcaModel {
  VrbcaConfig cfg;
  diffcore::ParamStore params;  // vrbca/ca_img/*, ca_gene/*, fuse/*, enc/*, dec/*, centers/*
  bool ablate_bca = false;      // mean-pool + concat fusion instead of BCA
  bool ablate_rvae = false;     // deterministic bottleneck, no KL, no sampling
  std::vector<double> loss_trace;
};

VrbcaModel init_vrbca(const VrbcaConfig& cfg, RngStream& rng);

/// Context matrices for spot i: row 0 is the spot itself, rows 1..k its
/// neighbors in ascending distance order, per modality.
std::pair<Mat, Mat> build_context(const Mat& h_all_img, const Mat& h_all_gene,
                                  const dataio::NeighborIndex& nbrs, int i);

/// Fused multimodal representation of the context's center spot (1 x d_model).
Mat bca_fuse(const VrbcaModel& model, const Mat& h_img, const Mat& h_gene);

/// Deterministic encoder map h* -> (mu, log sigma^2), log-variance clamped.
std::pair<Mat, Mat> rvae_encode(const VrbcaModel& model, const Mat& hstar);

/// z = mu + exp(log_var / 2) .* eps
Mat reparameterize(const Mat& mu, const Mat& log_var, const Mat& eps);

/// KL(N(mu, diag(sigma^2)) || N(center, I)); always >= 0.
double class_kl(const Mat& mu, const Mat& log_var, const Mat& center);

/// Mean over the batch of reconstruction + beta * class KL, with the given
/// noise draws (one row per spot; ignored under ablate_rvae).
double fused_loss(const VrbcaModel& model, const Mat& hstars,
                  const std::vector<int>& labels, const Mat& eps, double beta);

// --- tape builders shared by stage II and stage III training ----------------

/// Aligned embeddings and neighbor index for one dataset, cached once per
/// stage (the alignment encoders are frozen from stage II on).
struct ContextCache {
  Mat h_img;   // n x d_model
  Mat h_gene;  // n x d_model
  dataio::NeighborIndex nbrs;
};

ContextCache build_context_cache(const align::AlignmentModel& align_model,
                                 const dataio::SpotDataset& prepared, int k);

/// h* rows for a batch of spots (b x d_model node).
int build_hstar(diffcore::Tape& t, VrbcaModel& model,
                const ContextCache& cache, const std::vector<int>& spots);

struct RvaeNodes {
  int mu = -1;
  int log_var = -1;
  int recon = -1;      // 1x1 mean squared-norm reconstruction error
  int kl = -1;         // 1x1 mean class KL (0 node under ablate_rvae)
  int fused_loss = -1; // recon + beta*kl
};

RvaeNodes build_rvae_loss(diffcore::Tape& t, VrbcaModel& model, int hstar_node,
                          const std::vector<int>& labels, const Mat& eps,
                          double beta);

/// One training-step loss over explicit contexts, exposed for gradient checks.
real fusion_step_loss(VrbcaModel& model, const ContextCache& cache,
                      const std::vector<int>& spots,
                      const std::vector<int>& labels, const Mat& eps,
                      diffcore::GradMap* grads);

/// 50-epoch (cfg) stage-II loop; alignment encoders stay frozen, neighbor
/// contexts are cached once per dataset. Requires labels on every dataset.
VrbcaModel train_fusion(const align::AlignmentModel& align_model,
                        const std::vector<dataio::SpotDataset>& datasets,
                        const VrbcaConfig& cfg, RngStream& rng,
                        bool ablate_bca = false, bool ablate_rvae = false);

}  // namespace spacrd::fusion
