#pragma once

#include "spacrd/common.hpp"

#include <optional>

namespace spacrd::dataio {

/// One tissue section: paired image-embedding and gene matrices over the same
/// spots. Immutable after load/validation; safe to share across threads.
struct SpotDataset {
  std::string dataset_id;
  std::string platform_tag;
  double spot_diameter = 0;
  double pixel_resolution = 0;

  Mat image_features;  // n x d_img
  Mat gene_counts;     // n x g, raw non-negative counts
  Mat gene_expr;       // n x g', normalized; empty until preprocessing
  Mat coords;          // n x 2
  std::optional<IVec> labels;  // 0/1, 1 = cancerous

  int n_spots() const { return static_cast<int>(coords.rows()); }
  void validate() const;
};

struct NeighborIndex {
  int k = 0;
  IMat neighbors;  // n x k, row i sorted by ascending distance to spot i
};

// --- matrix files ------------------------------------------------------
// Binary: magic SPCD, u32 rows, u32 cols, f32 row-major little-endian.
// Text: single header line "rows<TAB>cols" then TSV rows.
// Readers auto-detect by magic bytes. Values are stored at f32 precision
// either way; in-memory computation stays at `real`.

Mat read_matrix(const std::filesystem::path& path);
void write_matrix_binary(const std::filesystem::path& path, const Mat& m);
void write_matrix_text(const std::filesystem::path& path, const Mat& m);

// --- dataset directories ------------------------------------------------

SpotDataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const std::filesystem::path& dir, const SpotDataset& ds,
                  bool binary = true);

// --- preprocessing -------------------------------------------------------

/// Scales each row to target_sum, then log(1+x). Rows must be non-negative
/// with at least one nonzero entry.
Mat normalize_expression(const Mat& counts, double target_sum = 10000.0);

/// Indices of the n_top genes with the highest per-gene sample variance,
/// descending, ties broken by lower gene index.
std::vector<int> select_hvg(const Mat& expr, int n_top = 3000);

/// Histology patch side length l = round(d / r), banker's rounding, min 1.
long long compute_patch_size(double d, double r);

/// Sums expression of all cells within spot_diameter/2 (closed disk) of each
/// spot center. Uncovered spots get zero rows; overlapping spots both count.
Mat aggregate_cells_to_spots(const Mat& cell_expr, const Mat& cell_coords,
                             const Mat& spot_centers, double spot_diameter);

/// k nearest other spots per row, ascending Euclidean distance, distance ties
/// broken by lower spot index. Requires k < n.
NeighborIndex knn_neighbors(const Mat& coords, int k);

}  // namespace spacrd::dataio
