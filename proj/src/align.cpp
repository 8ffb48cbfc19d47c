#include "spacrd/align.hpp"

#include <cmath>

namespace spacrd::align {

using diffcore::GradMap;
using diffcore::ParamStore;
using diffcore::Tape;

namespace {

void init_encoder(ParamStore& params, std::map<std::string, Mat>& buffers,
                  const std::string& prefix, int d_in, int h1, int h2,
                  int d_out, RngStream& rng) {
  params.add(prefix + "/l1.w", diffcore::glorot_init(d_in, h1, rng));
  params.add(prefix + "/l1.b", Mat::Zero(1, h1));
  params.add(prefix + "/bn1.g", Mat::Ones(1, h1));
  params.add(prefix + "/bn1.b", Mat::Zero(1, h1));
  params.add(prefix + "/l2.w", diffcore::glorot_init(h1, h2, rng));
  params.add(prefix + "/l2.b", Mat::Zero(1, h2));
  params.add(prefix + "/bn2.g", Mat::Ones(1, h2));
  params.add(prefix + "/bn2.b", Mat::Zero(1, h2));
  params.add(prefix + "/proj.w", diffcore::glorot_init(h2, d_out, rng));
  params.add(prefix + "/proj.b", Mat::Zero(1, d_out));
  buffers[prefix + "/bn1.rmean"] = Mat::Zero(1, h1);
  buffers[prefix + "/bn1.rvar"] = Mat::Ones(1, h1);
  buffers[prefix + "/bn2.rmean"] = Mat::Zero(1, h2);
  buffers[prefix + "/bn2.rvar"] = Mat::Ones(1, h2);
}

// linear -> BN -> relu -> dropout, twice, then projection + row normalization
int build_encoder(Tape& t, AlignmentModel& model, const std::string& prefix,
                  int x_node, bool training, bool update_running,
                  RngStream* rng) {
  ParamStore& p = model.params;
  auto lin = [&](int in, const std::string& layer) {
    return t.add_rowvec(t.matmul(in, t.param(p, prefix + "/" + layer + ".w")),
                        t.param(p, prefix + "/" + layer + ".b"));
  };
  auto bn = [&](int in, const std::string& layer) {
    return t.batch_norm(in, t.param(p, prefix + "/" + layer + ".g"),
                        t.param(p, prefix + "/" + layer + ".b"),
                        &model.buffers.at(prefix + "/" + layer + ".rmean"),
                        &model.buffers.at(prefix + "/" + layer + ".rvar"),
                        training, real(0.1), real(1e-5), update_running);
  };
  auto drop = [&](int in) {
    if (!training || model.cfg.dropout <= 0) return in;
    if (!rng) fail(ErrorKind::argument, "training-mode encoder needs an rng");
    return t.apply_mask(in, diffcore::dropout_mask(
                                t.value(in).rows(), t.value(in).cols(),
                                static_cast<real>(model.cfg.dropout), *rng));
  };
  int h = drop(t.relu(bn(lin(x_node, "l1"), "bn1")));
  h = drop(t.relu(bn(lin(h, "l2"), "bn2")));
  return t.l2_normalize_rows(lin(h, "proj"));
}

Mat encode(const AlignmentModel& model, const std::string& prefix, const Mat& x,
           int expected_dim, bool training, RngStream* rng) {
  if (x.cols() != expected_dim)
    fail(ErrorKind::dimension,
         "encoder input has " + std::to_string(x.cols()) +
             " columns, expected " + std::to_string(expected_dim));
  if (!x.allFinite()) fail(ErrorKind::validation, "encoder input has NaN/Inf");
  auto& m = const_cast<AlignmentModel&>(model);  // running stats untouched
  Tape t;
  int out = build_encoder(t, m, prefix, t.constant(x), training,
                          /*update_running=*/false, rng);
  Mat h = t.value(out);
  if (!h.allFinite()) fail(ErrorKind::numeric, "encoder produced NaN/Inf");
  return h;
}

}  // namespace

AlignmentModel init_alignment(int d_img, int d_gene, const AlignConfig& cfg,
                              RngStream& rng) {
  if (d_img < 1 || d_gene < 1)
    fail(ErrorKind::argument, "encoder input dims must be positive");
  if (!(cfg.tau > 0)) fail(ErrorKind::argument, "tau must be positive");
  if (cfg.alpha < 0 || cfg.alpha > 1)
    fail(ErrorKind::argument, "alpha must be in [0, 1]");
  AlignmentModel model;
  model.cfg = cfg;
  model.d_img = d_img;
  model.d_gene = d_gene;
  RngStream r_img = rng.fork("align-img");
  RngStream r_gene = rng.fork("align-gene");
  init_encoder(model.params, model.buffers, "align/img", d_img, cfg.hidden1,
               cfg.hidden2, cfg.proj_dim, r_img);
  init_encoder(model.params, model.buffers, "align/gene", d_gene, cfg.hidden1,
               cfg.hidden2, cfg.proj_dim, r_gene);
  return model;
}

Mat encode_image(const AlignmentModel& model, const Mat& x_img, bool training,
                 RngStream* rng) {
  return encode(model, "align/img", x_img, model.d_img, training, rng);
}

Mat encode_gene(const AlignmentModel& model, const Mat& x_gene, bool training,
                RngStream* rng) {
  return encode(model, "align/gene", x_gene, model.d_gene, training, rng);
}

Mat similarity_matrix(const Mat& h_img, const Mat& h_gene, double tau) {
  if (!(tau > 0)) fail(ErrorKind::argument, "tau must be positive");
  if (h_img.cols() != h_gene.cols() || h_img.rows() != h_gene.rows())
    fail(ErrorKind::dimension, "embedding shape mismatch");
  return h_img * h_gene.transpose() / static_cast<real>(tau);
}

std::pair<std::vector<double>, std::vector<double>> infonce_terms(const Mat& s) {
  if (s.rows() != s.cols())
    fail(ErrorKind::dimension, "similarity matrix must be square");
  const Eigen::Index b = s.rows();
  std::vector<double> row_terms(b), col_terms(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    double m = static_cast<double>(s.row(i).maxCoeff());
    double lse = 0;
    for (Eigen::Index j = 0; j < b; ++j)
      lse += std::exp(static_cast<double>(s(i, j)) - m);
    row_terms[i] = m + std::log(lse) - static_cast<double>(s(i, i));

    m = static_cast<double>(s.col(i).maxCoeff());
    lse = 0;
    for (Eigen::Index j = 0; j < b; ++j)
      lse += std::exp(static_cast<double>(s(j, i)) - m);
    col_terms[i] = m + std::log(lse) - static_cast<double>(s(i, i));
  }
  return {std::move(row_terms), std::move(col_terms)};
}

double infonce_bidirectional(const Mat& s, double alpha) {
  auto [row_terms, col_terms] = infonce_terms(s);
  double l_ig = 0, l_gi = 0;
  for (double v : row_terms) l_ig += v;
  for (double v : col_terms) l_gi += v;
  const auto b = static_cast<double>(row_terms.size());
  return alpha * (l_ig / b) + (1.0 - alpha) * (l_gi / b);
}

real alignment_step_loss(AlignmentModel& model, const Mat& x_img,
                         const Mat& x_gene, std::uint64_t step_seed,
                         bool update_running, GradMap* grads) {
  if (x_img.rows() != x_gene.rows())
    fail(ErrorKind::dimension, "image/gene batch row mismatch");
  RngStream drop_rng(step_seed);
  Tape t;
  int h_img = build_encoder(t, model, "align/img", t.constant(x_img),
                            /*training=*/true, update_running, &drop_rng);
  int h_gene = build_encoder(t, model, "align/gene", t.constant(x_gene),
                             /*training=*/true, update_running, &drop_rng);
  int s = t.affine_scalar(t.matmul_nt(h_img, h_gene),
                          real(1) / static_cast<real>(model.cfg.tau), real(0));
  int l_ig = t.mean_all(t.sub(t.row_logsumexp(s), t.diag_as_col(s)));
  int st = t.transpose(s);
  int l_gi = t.mean_all(t.sub(t.row_logsumexp(st), t.diag_as_col(st)));
  const auto alpha = static_cast<real>(model.cfg.alpha);
  int loss = t.add(t.affine_scalar(l_ig, alpha, real(0)),
                   t.affine_scalar(l_gi, real(1) - alpha, real(0)));
  if (grads) {
    t.backward(loss);
    *grads = t.param_grads();
  }
  return t.value(loss)(0, 0);
}

AlignmentModel train_alignment(const std::vector<dataio::SpotDataset>& datasets,
                               const AlignConfig& cfg, RngStream& rng) {
  if (datasets.empty()) fail(ErrorKind::argument, "no datasets given");
  for (const auto& ds : datasets) {
    if (ds.gene_expr.size() == 0)
      fail(ErrorKind::validation,
           "dataset " + ds.dataset_id + " is not preprocessed");
    if (ds.image_features.cols() != datasets[0].image_features.cols() ||
        ds.gene_expr.cols() != datasets[0].gene_expr.cols())
      fail(ErrorKind::dimension,
           "datasets disagree on feature dimensions: " + ds.dataset_id);
  }

  RngStream init_rng = rng.fork("init");
  AlignmentModel model =
      init_alignment(static_cast<int>(datasets[0].image_features.cols()),
                     static_cast<int>(datasets[0].gene_expr.cols()), cfg,
                     init_rng);
  diffcore::AdamConfig adam{static_cast<real>(cfg.lr)};
  RngStream shuffle_rng = rng.fork("shuffle");
  RngStream step_rng = rng.fork("dropout");

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0;
    long n_batches = 0;
    for (const auto& ds : datasets) {
      const int n = ds.n_spots();
      std::vector<int> order = shuffle_rng.permutation(n);
      for (int start = 0; start < n; start += cfg.batch_size) {
        const int b = std::min(cfg.batch_size, n - start);
        Mat x_img(b, model.d_img), x_gene(b, model.d_gene);
        for (int i = 0; i < b; ++i) {
          x_img.row(i) = ds.image_features.row(order[start + i]);
          x_gene.row(i) = ds.gene_expr.row(order[start + i]);
        }
        GradMap grads;
        epoch_loss += alignment_step_loss(model, x_img, x_gene,
                                          step_rng.next_u64(),
                                          /*update_running=*/true, &grads);
        diffcore::adam_step(model.params, grads, adam);
        ++n_batches;
      }
    }
    model.loss_trace.push_back(epoch_loss / std::max<long>(1, n_batches));
  }
  return model;
}

}  // namespace spacrd::align
