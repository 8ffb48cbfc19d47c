#pragma once

#include "spacrd/align.hpp"
#include "spacrd/common.hpp"
#include "spacrd/dataio.hpp"
#include "spacrd/discriminator.hpp"
#include "spacrd/fusion.hpp"
#include "spacrd/metrics.hpp"

namespace spacrd::pipeline {

/// Full-run configuration. Defaults are the reference training settings:
/// alpha=0.5, beta=0.5, gamma=0.1, k=6, lr=1e-5, epochs (100,50,50),
/// encoder 1024/512 hidden units with a 512-dim shared space, 8 heads,
/// RVAE 256/128/64, classifier hidden 64, dropout 0.2, 3000 HVGs at a
/// 10000 target sum.
struct RunConfig {
  std::uint64_t seed = 0;
  bool deterministic = true;
  double target_sum = 10000;
  int n_hvg = 3000;
  std::string hvg_mode = "source-fit";  // source-fit | per-dataset
  double alpha = 0.5;
  double beta = 0.5;
  double gamma = 0.1;
  double tau = 0.07;
  int k_neighbors = 6;
  double lr = 1e-5;
  int epochs_align = 100;
  int epochs_fuse = 50;
  int epochs_cls = 50;
  int batch_size = 128;
  double dropout = 0.2;
  int align_hidden1 = 1024;
  int align_hidden2 = 512;
  int embed_dim = 512;  // shared projection dim == attention d_model
  int heads = 8;
  int rvae_hidden1 = 256;
  int rvae_hidden2 = 128;
  int latent_dim = 64;
  int cls_hidden = 64;
  std::string gmm_mode = "per-dataset";  // per-dataset | global
  bool ablate_bca = false;
  bool ablate_rvae = false;
  bool ablate_cl = false;

  KvMap to_kv() const;
  static RunConfig from_kv(const KvMap& kv);  // unknown key -> usage error
  void validate() const;
  std::string fingerprint() const;

  align::AlignConfig align_config() const;
  fusion::VrbcaConfig vrbca_config() const;
  discriminator::DiscConfig disc_config() const;
};

enum class Stage { align, fuse, cls, all };
Stage parse_stage(const std::string& s);

struct Pipeline {
  RunConfig cfg;
  align::AlignmentModel align_model;
  fusion::VrbcaModel vrbca;
  discriminator::DiscriminatorModel disc;
  std::vector<int> hvg;      // source-fit gene indices (empty in per-dataset mode)
  int source_n_genes = 0;
  bool has_align = false;
  bool has_vrbca = false;
  bool has_cls = false;
  // (stage, epoch, loss) rows accumulated across training calls
  std::vector<std::tuple<std::string, int, double>> training_log;
};

/// Normalizes counts and fills gene_expr on every dataset. In source-fit mode
/// the HVG ranking is fit on the pooled sources and reused for targets; in
/// per-dataset mode each dataset is ranked on its own.
void prepare_sources(std::vector<dataio::SpotDataset>& datasets,
                     const RunConfig& cfg, std::vector<int>* hvg_out,
                     int* source_n_genes);

/// Projects a target dataset onto the trained gene set. Genes missing from
/// the target are zero-filled; the count of such genes is returned so callers
/// can warn. Errors when nothing overlaps.
int prepare_target(dataio::SpotDataset& ds, const RunConfig& cfg,
                   const std::vector<int>& hvg, int source_n_genes);

/// Runs the requested stage(s) in order on prepared sources. Later stages
/// require the earlier ones to be present in the pipeline.
void train_stages(Pipeline& pl,
                  const std::vector<dataio::SpotDataset>& prepared_sources,
                  Stage stage);

std::vector<double> predict_scores(const Pipeline& pl,
                                   const dataio::SpotDataset& prepared_target);

void save_pipeline(const std::filesystem::path& path, const Pipeline& pl);
Pipeline load_pipeline(const std::filesystem::path& path);

}  // namespace spacrd::pipeline
