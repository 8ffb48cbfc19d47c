#include "spacrd/fusion.hpp"

#include <cmath>

namespace spacrd::fusion {

using diffcore::GradMap;
using diffcore::ParamStore;
using diffcore::Tape;

VrbcaModel init_vrbca(const VrbcaConfig& cfg, RngStream& rng) {
  if (cfg.d_model < 1 || cfg.heads < 1 || cfg.d_model % cfg.heads != 0)
    fail(ErrorKind::argument, "d_model must be divisible by heads");
  if (cfg.latent < 1) fail(ErrorKind::argument, "latent dim must be positive");
  VrbcaModel model;
  model.cfg = cfg;
  ParamStore& p = model.params;
  RngStream r = rng.fork("vrbca-init");
  const int d = cfg.d_model;

  for (const char* ca : {"vrbca/ca_img", "vrbca/ca_gene"}) {
    p.add(std::string(ca) + "/wq", diffcore::glorot_init(d, d, r));
    p.add(std::string(ca) + "/wk", diffcore::glorot_init(d, d, r));
    p.add(std::string(ca) + "/wv", diffcore::glorot_init(d, d, r));
    p.add(std::string(ca) + "/wo", diffcore::glorot_init(d, d, r));
  }
  p.add("vrbca/fuse/w", diffcore::glorot_init(2 * d, d, r));
  p.add("vrbca/fuse/b", Mat::Zero(1, d));
  p.add("vrbca/fuse/ln.g", Mat::Ones(1, d));
  p.add("vrbca/fuse/ln.b", Mat::Zero(1, d));

  p.add("vrbca/enc/l1.w", diffcore::glorot_init(d, cfg.enc_h1, r));
  p.add("vrbca/enc/l1.b", Mat::Zero(1, cfg.enc_h1));
  p.add("vrbca/enc/l2.w", diffcore::glorot_init(cfg.enc_h1, cfg.enc_h2, r));
  p.add("vrbca/enc/l2.b", Mat::Zero(1, cfg.enc_h2));
  p.add("vrbca/enc/mu.w", diffcore::glorot_init(cfg.enc_h2, cfg.latent, r));
  p.add("vrbca/enc/mu.b", Mat::Zero(1, cfg.latent));
  p.add("vrbca/enc/lv.w", diffcore::glorot_init(cfg.enc_h2, cfg.latent, r));
  p.add("vrbca/enc/lv.b", Mat::Zero(1, cfg.latent));

  p.add("vrbca/dec/l1.w", diffcore::glorot_init(cfg.latent, cfg.enc_h2, r));
  p.add("vrbca/dec/l1.b", Mat::Zero(1, cfg.enc_h2));
  p.add("vrbca/dec/l2.w", diffcore::glorot_init(cfg.enc_h2, cfg.enc_h1, r));
  p.add("vrbca/dec/l2.b", Mat::Zero(1, cfg.enc_h1));
  p.add("vrbca/dec/out.w", diffcore::glorot_init(cfg.enc_h1, d, r));
  p.add("vrbca/dec/out.b", Mat::Zero(1, d));

  // class centers: normal around -0.5, cancer around +0.5
  Mat c0(1, cfg.latent), c1(1, cfg.latent);
  for (int j = 0; j < cfg.latent; ++j) {
    c0(0, j) = static_cast<real>(r.normal(-0.5, cfg.center_init_sd));
    c1(0, j) = static_cast<real>(r.normal(+0.5, cfg.center_init_sd));
  }
  p.add("vrbca/centers/c0", std::move(c0));
  p.add("vrbca/centers/c1", std::move(c1));
  return model;
}

std::pair<Mat, Mat> build_context(const Mat& h_all_img, const Mat& h_all_gene,
                                  const dataio::NeighborIndex& nbrs, int i) {
  const int n = static_cast<int>(h_all_img.rows());
  if (h_all_gene.rows() != n)
    fail(ErrorKind::dimension, "embedding row mismatch");
  if (i < 0 || i >= n) fail(ErrorKind::argument, "spot index out of range");
  if (nbrs.neighbors.rows() != n)
    fail(ErrorKind::dimension, "neighbor index row mismatch");
  const int k = nbrs.k;
  Mat ctx_img(k + 1, h_all_img.cols());
  Mat ctx_gene(k + 1, h_all_gene.cols());
  ctx_img.row(0) = h_all_img.row(i);
  ctx_gene.row(0) = h_all_gene.row(i);
  for (int j = 0; j < k; ++j) {
    const int nb = nbrs.neighbors(i, j);
    if (nb < 0 || nb >= n) fail(ErrorKind::validation, "bad neighbor index");
    ctx_img.row(j + 1) = h_all_img.row(nb);
    ctx_gene.row(j + 1) = h_all_gene.row(nb);
  }
  return {std::move(ctx_img), std::move(ctx_gene)};
}

namespace {

// Fused center-spot representation for a batch of contexts. Only row 0 of
// each cross-attention output is consumed downstream, so the query is just
// the center row.
int build_hstar_from_contexts(Tape& t, VrbcaModel& model,
                              const std::vector<std::pair<Mat, Mat>>& contexts) {
  ParamStore& p = model.params;
  std::vector<int> rows;
  rows.reserve(contexts.size());
  for (const auto& [ctx_img, ctx_gene] : contexts) {
    int img = t.constant(ctx_img);
    int gene = t.constant(ctx_gene);
    int z_img0, z_gene0;
    if (model.ablate_bca) {
      z_img0 = t.col_mean(img);
      z_gene0 = t.col_mean(gene);
    } else {
      int q_img = t.row(img, 0);
      int q_gene = t.row(gene, 0);
      z_img0 = t.cross_attention(q_img, gene, gene,
                                 t.param(p, "vrbca/ca_img/wq"),
                                 t.param(p, "vrbca/ca_img/wk"),
                                 t.param(p, "vrbca/ca_img/wv"),
                                 t.param(p, "vrbca/ca_img/wo"),
                                 model.cfg.heads);
      z_gene0 = t.cross_attention(q_gene, img, img,
                                  t.param(p, "vrbca/ca_gene/wq"),
                                  t.param(p, "vrbca/ca_gene/wk"),
                                  t.param(p, "vrbca/ca_gene/wv"),
                                  t.param(p, "vrbca/ca_gene/wo"),
                                  model.cfg.heads);
    }
    rows.push_back(t.concat_cols({z_img0, z_gene0}));
  }
  int stacked = t.stack_rows(rows);  // b x 2d
  int fused = t.add_rowvec(t.matmul(stacked, t.param(p, "vrbca/fuse/w")),
                           t.param(p, "vrbca/fuse/b"));
  return t.layer_norm(fused, t.param(p, "vrbca/fuse/ln.g"),
                      t.param(p, "vrbca/fuse/ln.b"));
}

std::pair<int, int> build_encoder_nodes(Tape& t, VrbcaModel& model,
                                        int hstar) {
  ParamStore& p = model.params;
  auto lin = [&](int in, const std::string& name) {
    return t.add_rowvec(t.matmul(in, t.param(p, "vrbca/" + name + ".w")),
                        t.param(p, "vrbca/" + name + ".b"));
  };
  int h = t.relu(lin(hstar, "enc/l1"));
  h = t.relu(lin(h, "enc/l2"));
  int mu = lin(h, "enc/mu");
  const auto c = static_cast<real>(model.cfg.logvar_clamp);
  int lv = t.clamp(lin(h, "enc/lv"), -c, c);
  return {mu, lv};
}

int build_decoder_nodes(Tape& t, VrbcaModel& model, int z) {
  ParamStore& p = model.params;
  auto lin = [&](int in, const std::string& name) {
    return t.add_rowvec(t.matmul(in, t.param(p, "vrbca/" + name + ".w")),
                        t.param(p, "vrbca/" + name + ".b"));
  };
  int h = t.relu(lin(z, "dec/l1"));
  h = t.relu(lin(h, "dec/l2"));
  return lin(h, "dec/out");
}

}  // namespace

int build_hstar(Tape& t, VrbcaModel& model, const ContextCache& cache,
                const std::vector<int>& spots) {
  std::vector<std::pair<Mat, Mat>> contexts;
  contexts.reserve(spots.size());
  for (int i : spots)
    contexts.push_back(build_context(cache.h_img, cache.h_gene, cache.nbrs, i));
  return build_hstar_from_contexts(t, model, contexts);
}

RvaeNodes build_rvae_loss(Tape& t, VrbcaModel& model, int hstar_node,
                          const std::vector<int>& labels, const Mat& eps,
                          double beta) {
  const auto b = t.value(hstar_node).rows();
  if (static_cast<Eigen::Index>(labels.size()) != b)
    fail(ErrorKind::dimension, "label count does not match batch");
  for (int y : labels)
    if (y != 0 && y != 1)
      fail(ErrorKind::validation, "stage II requires 0/1 labels");

  RvaeNodes nodes;
  auto [mu, lv] = build_encoder_nodes(t, model, hstar_node);
  nodes.mu = mu;
  nodes.log_var = lv;

  int z;
  if (model.ablate_rvae) {
    z = mu;
  } else {
    if (eps.rows() != b || eps.cols() != model.cfg.latent)
      fail(ErrorKind::dimension, "eps must be batch x latent");
    int sigma = t.exp(t.affine_scalar(lv, real(0.5), real(0)));
    z = t.add(mu, t.mul_elem(sigma, t.constant(eps)));
  }
  int hstar_hat = build_decoder_nodes(t, model, z);
  nodes.recon = t.mean_all(t.row_sum(t.square(t.sub(hstar_hat, hstar_node))));

  if (model.ablate_rvae) {
    nodes.kl = t.constant(Mat::Zero(1, 1));
    nodes.fused_loss = nodes.recon;
    return nodes;
  }

  // stack each spot's class center so gradients flow into c0/c1
  int c0 = t.param(model.params, "vrbca/centers/c0");
  int c1 = t.param(model.params, "vrbca/centers/c1");
  std::vector<int> center_rows;
  center_rows.reserve(labels.size());
  for (int y : labels) center_rows.push_back(y == 1 ? c1 : c0);
  int centers = t.stack_rows(center_rows);

  // 0.5 * sum_j (sigma^2 + (mu - c)^2 - log sigma^2 - 1) per row
  int inner = t.sub(t.add(t.exp(lv), t.square(t.sub(mu, centers))), lv);
  int kl_rows = t.affine_scalar(
      t.row_sum(inner), real(0.5),
      real(-0.5) * static_cast<real>(model.cfg.latent));
  nodes.kl = t.mean_all(kl_rows);
  nodes.fused_loss = t.add(
      nodes.recon, t.affine_scalar(nodes.kl, static_cast<real>(beta), real(0)));
  return nodes;
}

Mat bca_fuse(const VrbcaModel& model, const Mat& h_img, const Mat& h_gene) {
  if (h_img.rows() != h_gene.rows() || h_img.cols() != model.cfg.d_model ||
      h_gene.cols() != model.cfg.d_model)
    fail(ErrorKind::dimension, "context shape does not match config");
  auto& m = const_cast<VrbcaModel&>(model);
  Tape t;
  int h = build_hstar_from_contexts(t, m, {{h_img, h_gene}});
  return t.value(h);
}

std::pair<Mat, Mat> rvae_encode(const VrbcaModel& model, const Mat& hstar) {
  if (hstar.cols() != model.cfg.d_model)
    fail(ErrorKind::dimension, "h* dimension does not match config");
  auto& m = const_cast<VrbcaModel&>(model);
  Tape t;
  auto [mu, lv] = build_encoder_nodes(t, m, t.constant(hstar));
  return {t.value(mu), t.value(lv)};
}

Mat reparameterize(const Mat& mu, const Mat& log_var, const Mat& eps) {
  if (mu.rows() != log_var.rows() || mu.cols() != log_var.cols() ||
      mu.rows() != eps.rows() || mu.cols() != eps.cols())
    fail(ErrorKind::dimension, "reparameterize: shape mismatch");
  return mu + ((log_var.array() / 2).exp() * eps.array()).matrix();
}

double class_kl(const Mat& mu, const Mat& log_var, const Mat& center) {
  if (mu.size() != log_var.size() || mu.size() != center.size())
    fail(ErrorKind::dimension, "class_kl: shape mismatch");
  double acc = 0;
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    const double lv = static_cast<double>(*(log_var.data() + i));
    const double d =
        static_cast<double>(*(mu.data() + i)) -
        static_cast<double>(*(center.data() + i));
    acc += std::exp(lv) + d * d - lv - 1.0;
  }
  return 0.5 * acc;
}

double fused_loss(const VrbcaModel& model, const Mat& hstars,
                  const std::vector<int>& labels, const Mat& eps, double beta) {
  auto& m = const_cast<VrbcaModel&>(model);
  Tape t;
  auto nodes = build_rvae_loss(t, m, t.constant(hstars), labels, eps, beta);
  return static_cast<double>(t.value(nodes.fused_loss)(0, 0));
}

ContextCache build_context_cache(const align::AlignmentModel& align_model,
                                 const dataio::SpotDataset& prepared, int k) {
  ContextCache cache;
  cache.h_img = align::encode_image(align_model, prepared.image_features);
  cache.h_gene = align::encode_gene(align_model, prepared.gene_expr);
  cache.nbrs = dataio::knn_neighbors(prepared.coords, k);
  return cache;
}

real fusion_step_loss(VrbcaModel& model, const ContextCache& cache,
                      const std::vector<int>& spots,
                      const std::vector<int>& labels, const Mat& eps,
                      GradMap* grads) {
  Tape t;
  int hstar = build_hstar(t, model, cache, spots);
  auto nodes = build_rvae_loss(t, model, hstar, labels, eps, model.cfg.beta);
  if (grads) {
    t.backward(nodes.fused_loss);
    *grads = t.param_grads();
  }
  return t.value(nodes.fused_loss)(0, 0);
}

VrbcaModel train_fusion(const align::AlignmentModel& align_model,
                        const std::vector<dataio::SpotDataset>& datasets,
                        const VrbcaConfig& cfg, RngStream& rng, bool ablate_bca,
                        bool ablate_rvae) {
  if (datasets.empty()) fail(ErrorKind::argument, "no datasets given");
  for (const auto& ds : datasets)
    if (!ds.labels)
      fail(ErrorKind::validation,
           "stage II needs labels; dataset " + ds.dataset_id + " has none");
  if (align_model.cfg.proj_dim != cfg.d_model)
    fail(ErrorKind::dimension,
         "alignment projection dim differs from fusion d_model");

  RngStream init_rng = rng.fork("init");
  VrbcaModel model = init_vrbca(cfg, init_rng);
  model.ablate_bca = ablate_bca;
  model.ablate_rvae = ablate_rvae;

  std::vector<ContextCache> caches;
  caches.reserve(datasets.size());
  for (const auto& ds : datasets)
    caches.push_back(build_context_cache(align_model, ds, cfg.k));

  diffcore::AdamConfig adam{static_cast<real>(cfg.lr)};
  RngStream shuffle_rng = rng.fork("shuffle");
  RngStream eps_rng = rng.fork("eps");

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0;
    long n_batches = 0;
    for (size_t d = 0; d < datasets.size(); ++d) {
      const auto& ds = datasets[d];
      const int n = ds.n_spots();
      std::vector<int> order = shuffle_rng.permutation(n);
      for (int start = 0; start < n; start += cfg.batch_size) {
        const int b = std::min(cfg.batch_size, n - start);
        std::vector<int> spots(order.begin() + start,
                               order.begin() + start + b);
        std::vector<int> labels(b);
        for (int i = 0; i < b; ++i) labels[i] = (*ds.labels)(spots[i]);
        Mat eps(b, cfg.latent);
        for (int i = 0; i < b; ++i)
          for (int j = 0; j < cfg.latent; ++j)
            eps(i, j) = static_cast<real>(eps_rng.normal());
        GradMap grads;
        epoch_loss +=
            fusion_step_loss(model, caches[d], spots, labels, eps, &grads);
        diffcore::adam_step(model.params, grads, adam);
        ++n_batches;
      }
    }
    model.loss_trace.push_back(epoch_loss / std::max<long>(1, n_batches));
  }
  return model;
}

}  // namespace spacrd::fusion
