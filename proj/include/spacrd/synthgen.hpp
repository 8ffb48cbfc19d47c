#pragma once

#include "spacrd/common.hpp"
#include "spacrd/dataio.hpp"

namespace spacrd::synthgen {

/// Controls the synthetic multi-dataset cohort generator. Each dataset shares
/// one latent-to-modality map; per-dataset affine batch transforms create the
/// cross-dataset shift the pipeline has to survive.
struct SynthConfig {
  int n_datasets = 5;
  int spots_per_dataset = 200;
  int grid_side = 15;
  int latent_dim = 6;
  int d_img = 32;
  int n_genes = 96;
  double cancer_fraction = 0.35;
  double image_noise_sd = 0.15;
  double gene_noise_sd = 0.15;
  double batch_shift_sd = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
  KvMap to_kv() const;
  static SynthConfig from_kv(const KvMap& kv);
};

/// Deterministic given cfg.seed. Spots sit on a regular grid; the cancerous
/// region is one 4-connected blob grown by BFS covering about cancer_fraction
/// of the spots, with its latent signature shifted along the first latent
/// coordinate. Each dataset gets its own affine batch transform on both
/// modalities (identity when batch_shift_sd = 0).
std::vector<dataio::SpotDataset> generate_cohort(const SynthConfig& cfg);

}  // namespace spacrd::synthgen
