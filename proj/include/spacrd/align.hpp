#pragma once

#include "spacrd/common.hpp"
#include "spacrd/dataio.hpp"
#include "spacrd/diffcore.hpp"

namespace spacrd::align {

struct AlignConfig {
  int hidden1 = 1024;
  int hidden2 = 512;
  int proj_dim = 512;
  double dropout = 0.2;
  double tau = 0.07;   // contrastive temperature
  double alpha = 0.5;  // balance between the two directional losses
  double lr = 1e-5;
  int epochs = 100;
  int batch_size = 128;
};

/// Two three-layer MLP encoders (batch-norm + ReLU + dropout on hidden
/// layers, L2-normalized projection outputs) trained contrastively so matched
/// image/gene pairs meet in a shared embedding space.
struct AlignmentModel {
  AlignConfig cfg;
  int d_img = 0;
  int d_gene = 0;
  diffcore::ParamStore params;        // align/img/*, align/gene/*
  std::map<std::string, Mat> buffers; // batch-norm running statistics
  std::vector<double> loss_trace;     // mean loss per epoch
};

AlignmentModel init_alignment(int d_img, int d_gene, const AlignConfig& cfg,
                              RngStream& rng);

// Inference is deterministic and batch-independent (frozen batch-norm
// statistics); training mode needs an rng for dropout. Output rows are
// unit-norm.
Mat encode_image(const AlignmentModel& model, const Mat& x_img,
                 bool training = false, RngStream* rng = nullptr);
Mat encode_gene(const AlignmentModel& model, const Mat& x_gene,
                bool training = false, RngStream* rng = nullptr);

/// S_ij = (h_i_img . h_j_gene) / tau; the diagonal holds matched pairs.
Mat similarity_matrix(const Mat& h_img, const Mat& h_gene, double tau);

/// alpha * L_img_to_gene + (1-alpha) * L_gene_to_img with the row-wise and
/// column-wise InfoNCE terms, computed with max subtraction.
double infonce_bidirectional(const Mat& s, double alpha);

// Per-row and per-column -log softmax summands (each >= 0 by construction).
std::pair<std::vector<double>, std::vector<double>> infonce_terms(const Mat& s);

/// Tape builder for one training step; exposed so gradient checks can drive
/// the exact training loss. Does not touch running statistics unless asked.
real alignment_step_loss(AlignmentModel& model, const Mat& x_img,
                         const Mat& x_gene, std::uint64_t step_seed,
                         bool update_running, diffcore::GradMap* grads);

/// Runs cfg.epochs of within-dataset shuffled batches over preprocessed
/// datasets (gene_expr must be filled). Deterministic given rng.
AlignmentModel train_alignment(const std::vector<dataio::SpotDataset>& datasets,
                               const AlignConfig& cfg, RngStream& rng);

}  // namespace spacrd::align
