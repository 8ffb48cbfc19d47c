#include "spacrd/synthgen.hpp"

#include <cmath>
#include <deque>

namespace spacrd::synthgen {

void SynthConfig::validate() const {
  if (n_datasets < 1 || spots_per_dataset < 1 || grid_side < 1 ||
      latent_dim < 1 || d_img < 1 || n_genes < 1)
    fail(ErrorKind::argument, "synth config: all dimensions must be >= 1");
  if (static_cast<long long>(grid_side) * grid_side < spots_per_dataset)
    fail(ErrorKind::argument, "synth config: grid_side^2 < spots_per_dataset");
  if (!(cancer_fraction > 0 && cancer_fraction < 1))
    fail(ErrorKind::argument, "synth config: cancer_fraction must be in (0,1)");
  if (image_noise_sd < 0 || gene_noise_sd < 0 || batch_shift_sd < 0)
    fail(ErrorKind::argument, "synth config: noise sds must be non-negative");
}

KvMap SynthConfig::to_kv() const {
  KvMap kv;
  kv["n_datasets"] = std::to_string(n_datasets);
  kv["spots_per_dataset"] = std::to_string(spots_per_dataset);
  kv["grid_side"] = std::to_string(grid_side);
  kv["latent_dim"] = std::to_string(latent_dim);
  kv["d_img"] = std::to_string(d_img);
  kv["n_genes"] = std::to_string(n_genes);
  kv["cancer_fraction"] = format_real(cancer_fraction);
  kv["image_noise_sd"] = format_real(image_noise_sd);
  kv["gene_noise_sd"] = format_real(gene_noise_sd);
  kv["batch_shift_sd"] = format_real(batch_shift_sd);
  kv["seed"] = std::to_string(seed);
  return kv;
}

SynthConfig SynthConfig::from_kv(const KvMap& kv) {
  SynthConfig cfg;
  for (const auto& [key, value] : kv) {
    if (key == "n_datasets")
      cfg.n_datasets = static_cast<int>(parse_int(value, key));
    else if (key == "spots_per_dataset")
      cfg.spots_per_dataset = static_cast<int>(parse_int(value, key));
    else if (key == "grid_side")
      cfg.grid_side = static_cast<int>(parse_int(value, key));
    else if (key == "latent_dim")
      cfg.latent_dim = static_cast<int>(parse_int(value, key));
    else if (key == "d_img")
      cfg.d_img = static_cast<int>(parse_int(value, key));
    else if (key == "n_genes")
      cfg.n_genes = static_cast<int>(parse_int(value, key));
    else if (key == "cancer_fraction")
      cfg.cancer_fraction = parse_real(value, key);
    else if (key == "image_noise_sd")
      cfg.image_noise_sd = parse_real(value, key);
    else if (key == "gene_noise_sd")
      cfg.gene_noise_sd = parse_real(value, key);
    else if (key == "batch_shift_sd")
      cfg.batch_shift_sd = parse_real(value, key);
    else if (key == "seed")
      cfg.seed = static_cast<std::uint64_t>(parse_int(value, key));
    else
      fail(ErrorKind::usage, "unknown synth config key: " + key);
  }
  cfg.validate();
  return cfg;
}

namespace {

Mat gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double sd,
                    RngStream& rng) {
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = static_cast<real>(rng.normal(0.0, sd));
  return m;
}

// Grows one 4-connected region of exactly `target` spots from a random seed.
// Spots occupy the first n cells of the grid in row-major order.
std::vector<int> grow_cancer_region(int n_spots, int grid_side, int target,
                                    RngStream& rng) {
  auto spot_at = [&](int row, int col) -> int {
    if (row < 0 || col < 0 || col >= grid_side) return -1;
    const int id = row * grid_side + col;
    return id < n_spots ? id : -1;
  };
  std::uniform_int_distribution<int> pick(0, n_spots - 1);
  const int start = pick(rng.gen());

  std::vector<int> labels(n_spots, 0);
  std::deque<int> frontier{start};
  labels[start] = 1;
  int grown = 1;
  while (grown < target && !frontier.empty()) {
    const int cur = frontier.front();
    frontier.pop_front();
    const int row = cur / grid_side, col = cur % grid_side;
    int nbrs[4] = {spot_at(row - 1, col), spot_at(row + 1, col),
                   spot_at(row, col - 1), spot_at(row, col + 1)};
    // shuffle neighbor visit order so region shapes vary between seeds
    for (int i = 3; i > 0; --i) {
      std::uniform_int_distribution<int> d(0, i);
      std::swap(nbrs[i], nbrs[d(rng.gen())]);
    }
    for (int nb : nbrs) {
      if (nb < 0 || labels[nb]) continue;
      labels[nb] = 1;
      frontier.push_back(nb);
      if (++grown == target) break;
    }
  }
  if (grown < target)
    fail(ErrorKind::argument, "cancer region could not reach target size");
  return labels;
}

}  // namespace

std::vector<dataio::SpotDataset> generate_cohort(const SynthConfig& cfg) {
  cfg.validate();
  const int target = static_cast<int>(
      round_half_even(cfg.cancer_fraction * cfg.spots_per_dataset));
  if (target < 1 || target >= cfg.spots_per_dataset)
    fail(ErrorKind::argument,
         "infeasible cancer_fraction: region of " + std::to_string(target) +
             " spots out of " + std::to_string(cfg.spots_per_dataset));

  RngStream master(cfg.seed);
  RngStream maps_rng = master.fork("latent-maps");
  // shared latent -> modality maps, fixed across the cohort
  const double map_sd = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
  const Mat map_img =
      gaussian_matrix(cfg.latent_dim, cfg.d_img, map_sd, maps_rng);
  const Mat map_gene =
      gaussian_matrix(cfg.latent_dim, cfg.n_genes, map_sd, maps_rng);

  std::vector<dataio::SpotDataset> cohort;
  cohort.reserve(cfg.n_datasets);
  for (int d = 0; d < cfg.n_datasets; ++d) {
    RngStream rng = master.fork(static_cast<std::uint64_t>(d) + 1);
    const int n = cfg.spots_per_dataset;

    dataio::SpotDataset ds;
    ds.dataset_id = "synth" + std::to_string(d);
    ds.platform_tag = "synthetic";
    ds.spot_diameter = 1.0;
    ds.pixel_resolution = 0.5;

    ds.coords.resize(n, 2);
    for (int i = 0; i < n; ++i) {
      ds.coords(i, 0) = static_cast<real>(i % cfg.grid_side);
      ds.coords(i, 1) = static_cast<real>(i / cfg.grid_side);
    }

    const std::vector<int> labels =
        grow_cancer_region(n, cfg.grid_side, target, rng);
    IVec lab(n);
    for (int i = 0; i < n; ++i) lab(i) = labels[i];
    ds.labels = std::move(lab);

    // latent state per spot; cancer shifts the first coordinate
    Mat z = gaussian_matrix(n, cfg.latent_dim, 1.0, rng);
    for (int i = 0; i < n; ++i)
      if (labels[i]) z(i, 0) += real(2);

    Mat img = z * map_img + gaussian_matrix(n, cfg.d_img, cfg.image_noise_sd, rng);
    Mat gene_lin =
        z * map_gene + gaussian_matrix(n, cfg.n_genes, cfg.gene_noise_sd, rng);
    // softplus keeps pre-count intensities positive; x20 gives count-like scale
    Mat gene = gene_lin.unaryExpr([](real v) {
      const double x = static_cast<double>(v);
      const double sp = x > 30 ? x : std::log1p(std::exp(x));
      return static_cast<real>(sp * 20.0);
    });

    if (cfg.batch_shift_sd > 0) {
      // per-feature affine batch effect, same recipe for both modalities
      auto batch_effect = [&](Mat& m) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          const real scale = static_cast<real>(rng.uniform(0.8, 1.2));
          const real shift = static_cast<real>(rng.normal(0.0, cfg.batch_shift_sd));
          m.col(c) = m.col(c) * scale + Mat::Constant(m.rows(), 1, shift);
        }
      };
      batch_effect(img);
      // gene batch effect applies on the count scale
      auto gene_batch = [&](Mat& m) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          const real scale = static_cast<real>(rng.uniform(0.8, 1.2));
          const real shift =
              static_cast<real>(rng.normal(0.0, cfg.batch_shift_sd * 20.0));
          m.col(c) = m.col(c) * scale + Mat::Constant(m.rows(), 1, shift);
        }
      };
      gene_batch(gene);
    }

    // integer-like non-negative counts
    gene = gene.unaryExpr([](real v) {
      return static_cast<real>(
          std::max(0.0, std::round(static_cast<double>(v))));
    });
    for (Eigen::Index r = 0; r < gene.rows(); ++r)
      if (gene.row(r).sum() == real(0)) gene(r, 0) = real(1);

    ds.image_features = std::move(img);
    ds.gene_counts = std::move(gene);
    ds.validate();
    cohort.push_back(std::move(ds));
  }
  return cohort;
}

}  // namespace spacrd::synthgen
