#include "spacrd/pipeline.hpp"

#include <cmath>
#include <sstream>

namespace spacrd::pipeline {

KvMap RunConfig::to_kv() const {
  KvMap kv;
  kv["seed"] = std::to_string(seed);
  kv["deterministic"] = deterministic ? "1" : "0";
  kv["target_sum"] = format_real(target_sum);
  kv["n_hvg"] = std::to_string(n_hvg);
  kv["hvg_mode"] = hvg_mode;
  kv["alpha"] = format_real(alpha);
  kv["beta"] = format_real(beta);
  kv["gamma"] = format_real(gamma);
  kv["tau"] = format_real(tau);
  kv["k_neighbors"] = std::to_string(k_neighbors);
  kv["lr"] = format_real(lr);
  kv["epochs_align"] = std::to_string(epochs_align);
  kv["epochs_fuse"] = std::to_string(epochs_fuse);
  kv["epochs_cls"] = std::to_string(epochs_cls);
  kv["batch_size"] = std::to_string(batch_size);
  kv["dropout"] = format_real(dropout);
  kv["align_hidden1"] = std::to_string(align_hidden1);
  kv["align_hidden2"] = std::to_string(align_hidden2);
  kv["embed_dim"] = std::to_string(embed_dim);
  kv["heads"] = std::to_string(heads);
  kv["rvae_hidden1"] = std::to_string(rvae_hidden1);
  kv["rvae_hidden2"] = std::to_string(rvae_hidden2);
  kv["latent_dim"] = std::to_string(latent_dim);
  kv["cls_hidden"] = std::to_string(cls_hidden);
  kv["gmm_mode"] = gmm_mode;
  kv["ablate_bca"] = ablate_bca ? "1" : "0";
  kv["ablate_rvae"] = ablate_rvae ? "1" : "0";
  kv["ablate_cl"] = ablate_cl ? "1" : "0";
  return kv;
}

RunConfig RunConfig::from_kv(const KvMap& kv) {
  RunConfig c;
  for (const auto& [key, value] : kv) {
    if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(value, key));
    else if (key == "deterministic") c.deterministic = parse_int(value, key) != 0;
    else if (key == "target_sum") c.target_sum = parse_real(value, key);
    else if (key == "n_hvg") c.n_hvg = static_cast<int>(parse_int(value, key));
    else if (key == "hvg_mode") c.hvg_mode = value;
    else if (key == "alpha") c.alpha = parse_real(value, key);
    else if (key == "beta") c.beta = parse_real(value, key);
    else if (key == "gamma") c.gamma = parse_real(value, key);
    else if (key == "tau") c.tau = parse_real(value, key);
    else if (key == "k_neighbors") c.k_neighbors = static_cast<int>(parse_int(value, key));
    else if (key == "lr") c.lr = parse_real(value, key);
    else if (key == "epochs_align") c.epochs_align = static_cast<int>(parse_int(value, key));
    else if (key == "epochs_fuse") c.epochs_fuse = static_cast<int>(parse_int(value, key));
    else if (key == "epochs_cls") c.epochs_cls = static_cast<int>(parse_int(value, key));
    else if (key == "batch_size") c.batch_size = static_cast<int>(parse_int(value, key));
    else if (key == "dropout") c.dropout = parse_real(value, key);
    else if (key == "align_hidden1") c.align_hidden1 = static_cast<int>(parse_int(value, key));
    else if (key == "align_hidden2") c.align_hidden2 = static_cast<int>(parse_int(value, key));
    else if (key == "embed_dim") c.embed_dim = static_cast<int>(parse_int(value, key));
    else if (key == "heads") c.heads = static_cast<int>(parse_int(value, key));
    else if (key == "rvae_hidden1") c.rvae_hidden1 = static_cast<int>(parse_int(value, key));
    else if (key == "rvae_hidden2") c.rvae_hidden2 = static_cast<int>(parse_int(value, key));
    else if (key == "latent_dim") c.latent_dim = static_cast<int>(parse_int(value, key));
    else if (key == "cls_hidden") c.cls_hidden = static_cast<int>(parse_int(value, key));
    else if (key == "gmm_mode") c.gmm_mode = value;
    else if (key == "ablate_bca") c.ablate_bca = parse_int(value, key) != 0;
    else if (key == "ablate_rvae") c.ablate_rvae = parse_int(value, key) != 0;
    else if (key == "ablate_cl") c.ablate_cl = parse_int(value, key) != 0;
    else fail(ErrorKind::usage, "unknown config key: " + key);
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  if (alpha < 0 || alpha > 1) fail(ErrorKind::argument, "alpha must be in [0,1]");
  if (!(tau > 0)) fail(ErrorKind::argument, "tau must be positive");
  if (beta < 0 || gamma < 0) fail(ErrorKind::argument, "beta/gamma must be >= 0");
  if (k_neighbors < 0) fail(ErrorKind::argument, "k_neighbors must be >= 0");
  if (!(lr > 0)) fail(ErrorKind::argument, "lr must be positive");
  if (epochs_align < 0 || epochs_fuse < 0 || epochs_cls < 0)
    fail(ErrorKind::argument, "epochs must be >= 0");
  if (batch_size < 1) fail(ErrorKind::argument, "batch_size must be >= 1");
  if (dropout < 0 || dropout >= 1)
    fail(ErrorKind::argument, "dropout must be in [0,1)");
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
    fail(ErrorKind::argument, "embed_dim must be divisible by heads");
  if (hvg_mode != "source-fit" && hvg_mode != "per-dataset")
    fail(ErrorKind::usage, "hvg_mode must be source-fit or per-dataset");
  if (gmm_mode != "per-dataset" && gmm_mode != "global")
    fail(ErrorKind::usage, "gmm_mode must be per-dataset or global");
}

std::string RunConfig::fingerprint() const {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a(serialize_kv(to_kv()))));
  return buf;
}

align::AlignConfig RunConfig::align_config() const {
  align::AlignConfig a;
  a.hidden1 = align_hidden1;
  a.hidden2 = align_hidden2;
  a.proj_dim = embed_dim;
  a.dropout = dropout;
  a.tau = tau;
  a.alpha = alpha;
  a.lr = lr;
  a.epochs = epochs_align;
  a.batch_size = batch_size;
  return a;
}

fusion::VrbcaConfig RunConfig::vrbca_config() const {
  fusion::VrbcaConfig v;
  v.k = k_neighbors;
  v.heads = heads;
  v.d_model = embed_dim;
  v.enc_h1 = rvae_hidden1;
  v.enc_h2 = rvae_hidden2;
  v.latent = latent_dim;
  v.beta = beta;
  v.lr = lr;
  v.epochs = epochs_fuse;
  v.batch_size = batch_size;
  return v;
}

discriminator::DiscConfig RunConfig::disc_config() const {
  discriminator::DiscConfig d;
  d.hidden = cls_hidden;
  d.gamma = gamma;
  d.lr = lr;
  d.epochs = epochs_cls;
  d.batch_size = batch_size;
  return d;
}

Stage parse_stage(const std::string& s) {
  if (s == "align") return Stage::align;
  if (s == "fuse") return Stage::fuse;
  if (s == "cls") return Stage::cls;
  if (s == "all") return Stage::all;
  fail(ErrorKind::usage, "unknown stage: " + s);
}

void prepare_sources(std::vector<dataio::SpotDataset>& datasets,
                     const RunConfig& cfg, std::vector<int>* hvg_out,
                     int* source_n_genes) {
  if (datasets.empty()) fail(ErrorKind::argument, "no source datasets");
  for (const auto& ds : datasets)
    if (ds.gene_counts.cols() != datasets[0].gene_counts.cols())
      fail(ErrorKind::dimension,
           "source datasets disagree on gene count: " + ds.dataset_id);
  const int g = static_cast<int>(datasets[0].gene_counts.cols());
  if (cfg.n_hvg > g)
    fail(ErrorKind::argument, "n_hvg exceeds the shared gene count");
  if (source_n_genes) *source_n_genes = g;

  std::vector<Mat> normalized;
  normalized.reserve(datasets.size());
  long total_rows = 0;
  for (const auto& ds : datasets) {
    normalized.push_back(
        dataio::normalize_expression(ds.gene_counts, cfg.target_sum));
    total_rows += ds.n_spots();
  }

  if (cfg.hvg_mode == "source-fit") {
    Mat pooled(total_rows, g);
    long at = 0;
    for (const auto& m : normalized) {
      pooled.middleRows(at, m.rows()) = m;
      at += m.rows();
    }
    std::vector<int> hvg = dataio::select_hvg(pooled, cfg.n_hvg);
    for (size_t d = 0; d < datasets.size(); ++d) {
      Mat expr(normalized[d].rows(), cfg.n_hvg);
      for (int j = 0; j < cfg.n_hvg; ++j)
        expr.col(j) = normalized[d].col(hvg[j]);
      datasets[d].gene_expr = std::move(expr);
    }
    if (hvg_out) *hvg_out = std::move(hvg);
  } else {  // per-dataset
    for (size_t d = 0; d < datasets.size(); ++d) {
      std::vector<int> hvg = dataio::select_hvg(normalized[d], cfg.n_hvg);
      Mat expr(normalized[d].rows(), cfg.n_hvg);
      for (int j = 0; j < cfg.n_hvg; ++j)
        expr.col(j) = normalized[d].col(hvg[j]);
      datasets[d].gene_expr = std::move(expr);
    }
    if (hvg_out) hvg_out->clear();
  }
}

int prepare_target(dataio::SpotDataset& ds, const RunConfig& cfg,
                   const std::vector<int>& hvg, int source_n_genes) {
  Mat normalized = dataio::normalize_expression(ds.gene_counts, cfg.target_sum);
  if (cfg.hvg_mode == "per-dataset" || hvg.empty()) {
    if (cfg.n_hvg > normalized.cols())
      fail(ErrorKind::argument, "n_hvg exceeds the target gene count");
    std::vector<int> own = dataio::select_hvg(normalized, cfg.n_hvg);
    Mat expr(normalized.rows(), cfg.n_hvg);
    for (size_t j = 0; j < own.size(); ++j)
      expr.col(static_cast<Eigen::Index>(j)) = normalized.col(own[j]);
    ds.gene_expr = std::move(expr);
    return 0;
  }

  // source-fit: project onto the trained gene vocabulary by column index;
  // indices beyond the target panel are treated as missing genes
  (void)source_n_genes;
  int missing = 0;
  std::vector<int> missing_genes;
  Mat expr = Mat::Zero(normalized.rows(), static_cast<Eigen::Index>(hvg.size()));
  for (size_t j = 0; j < hvg.size(); ++j) {
    if (hvg[j] < normalized.cols()) {
      expr.col(static_cast<Eigen::Index>(j)) = normalized.col(hvg[j]);
    } else {
      ++missing;
      if (missing_genes.size() < 16) missing_genes.push_back(hvg[j]);
    }
  }
  if (missing == static_cast<int>(hvg.size())) {
    std::string list;
    for (int gidx : missing_genes) list += " " + std::to_string(gidx);
    fail(ErrorKind::validation,
         "gene-set mismatch: target " + ds.dataset_id +
             " lacks every trained gene; missing indices include" + list);
  }
  ds.gene_expr = std::move(expr);
  return missing;
}

void train_stages(Pipeline& pl,
                  const std::vector<dataio::SpotDataset>& prepared_sources,
                  Stage stage) {
  const RunConfig& cfg = pl.cfg;
  diffcore::set_deterministic_mode(cfg.deterministic);
  RngStream master(cfg.seed);

  auto log_stage = [&](const std::string& name,
                       const std::vector<double>& trace) {
    for (size_t e = 0; e < trace.size(); ++e)
      pl.training_log.emplace_back(name, static_cast<int>(e + 1), trace[e]);
  };

  const bool run_align = stage == Stage::all || stage == Stage::align;
  const bool run_fuse = stage == Stage::all || stage == Stage::fuse;
  const bool run_cls = stage == Stage::all || stage == Stage::cls;

  if (run_align) {
    RngStream rng = master.fork("stage1");
    if (cfg.ablate_cl) {
      // contrastive stage skipped: fresh untrained projections stand in
      if (prepared_sources.empty())
        fail(ErrorKind::argument, "no source datasets");
      RngStream init_rng = rng.fork("init");
      pl.align_model = align::init_alignment(
          static_cast<int>(prepared_sources[0].image_features.cols()),
          static_cast<int>(prepared_sources[0].gene_expr.cols()),
          cfg.align_config(), init_rng);
    } else {
      pl.align_model =
          align::train_alignment(prepared_sources, cfg.align_config(), rng);
      log_stage("align", pl.align_model.loss_trace);
    }
    pl.has_align = true;
  }

  if (run_fuse) {
    if (!pl.has_align)
      fail(ErrorKind::validation,
           "stage fuse requires a trained alignment checkpoint");
    RngStream rng = master.fork("stage2");
    pl.vrbca = fusion::train_fusion(pl.align_model, prepared_sources,
                                    cfg.vrbca_config(), rng, cfg.ablate_bca,
                                    cfg.ablate_rvae);
    log_stage("fuse", pl.vrbca.loss_trace);
    pl.has_vrbca = true;
  }

  if (run_cls) {
    if (!pl.has_vrbca)
      fail(ErrorKind::validation,
           "stage cls requires a trained fusion checkpoint");
    RngStream rng = master.fork("stage3");
    RngStream init_rng = rng.fork("init");
    pl.disc = discriminator::init_discriminator(cfg.latent_dim,
                                                cfg.disc_config(), init_rng);
    discriminator::train_discriminator(pl.vrbca, pl.disc, pl.align_model,
                                       prepared_sources, cfg.gamma, rng);
    log_stage("cls", pl.disc.loss_trace);
    pl.has_cls = true;
  }
}

std::vector<double> predict_scores(const Pipeline& pl,
                                   const dataio::SpotDataset& prepared_target) {
  if (!pl.has_cls)
    fail(ErrorKind::validation, "pipeline is not fully trained");
  return discriminator::predict_scores(pl.align_model, pl.vrbca, pl.disc,
                                       prepared_target);
}

namespace {

void dump_store(const diffcore::ParamStore& store,
                std::map<std::string, Mat>& tensors) {
  for (const auto& [name, e] : store.entries) tensors[name] = e.value;
}

void restore_store(diffcore::ParamStore& store,
                   const std::map<std::string, Mat>& tensors) {
  for (auto& [name, e] : store.entries) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      fail(ErrorKind::format, "checkpoint is missing parameter " + name);
    if (it->second.rows() != e.value.rows() ||
        it->second.cols() != e.value.cols())
      fail(ErrorKind::dimension, "checkpoint shape mismatch for " + name);
    e.value = it->second;
    e.m.setZero();
    e.v.setZero();
    e.step = 0;
  }
}

}  // namespace

void save_pipeline(const std::filesystem::path& path, const Pipeline& pl) {
  KvMap meta;
  for (const auto& [k, v] : pl.cfg.to_kv()) meta["cfg." + k] = v;
  meta["fingerprint"] = pl.cfg.fingerprint();
  meta["d_img"] = std::to_string(pl.align_model.d_img);
  meta["d_gene"] = std::to_string(pl.align_model.d_gene);
  meta["source_n_genes"] = std::to_string(pl.source_n_genes);
  meta["has_align"] = pl.has_align ? "1" : "0";
  meta["has_vrbca"] = pl.has_vrbca ? "1" : "0";
  meta["has_cls"] = pl.has_cls ? "1" : "0";
  std::string hvg;
  for (size_t i = 0; i < pl.hvg.size(); ++i) {
    if (i) hvg += ",";
    hvg += std::to_string(pl.hvg[i]);
  }
  meta["hvg"] = hvg;

  std::map<std::string, Mat> tensors;
  if (pl.has_align) {
    dump_store(pl.align_model.params, tensors);
    for (const auto& [name, m] : pl.align_model.buffers) tensors[name] = m;
  }
  if (pl.has_vrbca) dump_store(pl.vrbca.params, tensors);
  if (pl.has_cls) dump_store(pl.disc.params, tensors);
  diffcore::write_checkpoint(path, meta, tensors);
}

Pipeline load_pipeline(const std::filesystem::path& path) {
  auto [meta, tensors] = diffcore::read_checkpoint(path);
  KvMap cfg_kv;
  for (const auto& [k, v] : meta)
    if (k.rfind("cfg.", 0) == 0) cfg_kv[k.substr(4)] = v;

  Pipeline pl;
  pl.cfg = RunConfig::from_kv(cfg_kv);
  auto need = [&](const std::string& key) -> std::string {
    auto it = meta.find(key);
    if (it == meta.end())
      fail(ErrorKind::format, "checkpoint missing meta key " + key);
    return it->second;
  };
  const int d_img = static_cast<int>(parse_int(need("d_img"), "d_img"));
  const int d_gene = static_cast<int>(parse_int(need("d_gene"), "d_gene"));
  pl.source_n_genes =
      static_cast<int>(parse_int(need("source_n_genes"), "source_n_genes"));
  pl.has_align = need("has_align") == "1";
  pl.has_vrbca = need("has_vrbca") == "1";
  pl.has_cls = need("has_cls") == "1";
  const std::string hvg = need("hvg");
  std::istringstream hs(hvg);
  std::string tok;
  while (std::getline(hs, tok, ','))
    if (!tok.empty()) pl.hvg.push_back(static_cast<int>(parse_int(tok, "hvg")));

  RngStream dummy(0);
  if (pl.has_align) {
    pl.align_model =
        align::init_alignment(d_img, d_gene, pl.cfg.align_config(), dummy);
    restore_store(pl.align_model.params, tensors);
    for (auto& [name, m] : pl.align_model.buffers) {
      auto it = tensors.find(name);
      if (it == tensors.end())
        fail(ErrorKind::format, "checkpoint is missing buffer " + name);
      m = it->second;
    }
  }
  if (pl.has_vrbca) {
    pl.vrbca = fusion::init_vrbca(pl.cfg.vrbca_config(), dummy);
    pl.vrbca.ablate_bca = pl.cfg.ablate_bca;
    pl.vrbca.ablate_rvae = pl.cfg.ablate_rvae;
    restore_store(pl.vrbca.params, tensors);
  }
  if (pl.has_cls) {
    pl.disc = discriminator::init_discriminator(pl.cfg.latent_dim,
                                                pl.cfg.disc_config(), dummy);
    restore_store(pl.disc.params, tensors);
  }
  return pl;
}

}  // namespace spacrd::pipeline
