#include "spacrd/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace spacrd::dataio {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'C', 'D'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    fail(ErrorKind::format, "truncated matrix file: " + what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

Mat read_matrix_binary(std::istream& in, const std::string& name) {
  const std::uint32_t rows = get_u32(in, name);
  const std::uint32_t cols = get_u32(in, name);
  Mat m(rows, cols);
  std::vector<unsigned char> buf(static_cast<size_t>(cols) * 4);
  for (std::uint32_t r = 0; r < rows; ++r) {
    if (!in.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size())))
      fail(ErrorKind::format, "truncated matrix payload: " + name);
    for (std::uint32_t c = 0; c < cols; ++c) {
      std::uint32_t bits = static_cast<std::uint32_t>(buf[c * 4]) |
                           (static_cast<std::uint32_t>(buf[c * 4 + 1]) << 8) |
                           (static_cast<std::uint32_t>(buf[c * 4 + 2]) << 16) |
                           (static_cast<std::uint32_t>(buf[c * 4 + 3]) << 24);
      float f;
      std::memcpy(&f, &bits, 4);
      m(r, c) = static_cast<real>(f);
    }
  }
  return m;
}

Mat read_matrix_text(const std::string& text, const std::string& name) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line))
    fail(ErrorKind::format, "empty matrix file: " + name);
  std::istringstream header(line);
  long long rows = -1, cols = -1;
  if (!(header >> rows >> cols) || rows < 0 || cols < 0)
    fail(ErrorKind::format, "bad matrix header in " + name);
  Mat m(rows, cols);
  for (long long r = 0; r < rows; ++r) {
    if (!std::getline(in, line))
      fail(ErrorKind::format, "missing row " + std::to_string(r) + " in " + name);
    std::istringstream row(line);
    for (long long c = 0; c < cols; ++c) {
      double v;
      if (!(row >> v))
        fail(ErrorKind::format, "bad value at (" + std::to_string(r) + "," +
                                    std::to_string(c) + ") in " + name);
      m(r, c) = static_cast<real>(static_cast<float>(v));
    }
  }
  return m;
}

}  // namespace

Mat read_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::format, "missing matrix file: " + path.string());
  char magic[4];
  if (in.read(magic, 4) && std::memcmp(magic, kMagic, 4) == 0)
    return read_matrix_binary(in, path.string());
  return read_matrix_text(read_text_file(path), path.string());
}

void write_matrix_binary(const std::filesystem::path& path, const Mat& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write matrix: " + path.string());
  out.write(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(m.rows()));
  put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      float f = static_cast<float>(m(r, c));
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  if (!out) fail(ErrorKind::io, "matrix write failed: " + path.string());
}

void write_matrix_text(const std::filesystem::path& path, const Mat& m) {
  std::ostringstream out;
  out << m.rows() << '\t' << m.cols() << '\n';
  char buf[48];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      // %.9g round-trips the stored f32 precision exactly
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(
                                                  static_cast<float>(m(r, c))));
      if (c) out << '\t';
      out << buf;
    }
    out << '\n';
  }
  write_text_file(path, out.str());
}

void SpotDataset::validate() const {
  const Eigen::Index n = coords.rows();
  if (n < 1) fail(ErrorKind::validation, "dataset has no spots");
  if (coords.cols() != 2)
    fail(ErrorKind::dimension, "coords must have 2 columns");
  auto check_rows = [&](const Mat& m, const char* name) {
    if (m.size() > 0 && m.rows() != n)
      fail(ErrorKind::dimension,
           std::string(name) + " row count " + std::to_string(m.rows()) +
               " does not match n_spots " + std::to_string(n));
  };
  check_rows(image_features, "image_features");
  check_rows(gene_counts, "gene_counts");
  check_rows(gene_expr, "gene_expr");
  if (image_features.rows() != n)
    fail(ErrorKind::dimension, "image_features missing rows");
  auto check_finite = [&](const Mat& m, const char* name) {
    if (!m.allFinite())
      fail(ErrorKind::validation, std::string(name) + " contains NaN/Inf");
  };
  check_finite(image_features, "image_features");
  check_finite(gene_counts, "gene_counts");
  check_finite(gene_expr, "gene_expr");
  check_finite(coords, "coords");
  if (gene_counts.size() > 0 && (gene_counts.array() < real(0)).any())
    fail(ErrorKind::validation, "gene_counts contains negative entries");
  if (labels) {
    if (labels->size() != n)
      fail(ErrorKind::dimension, "labels length does not match n_spots");
    for (Eigen::Index i = 0; i < labels->size(); ++i)
      if ((*labels)(i) != 0 && (*labels)(i) != 1)
        fail(ErrorKind::validation, "labels must be 0 or 1");
  }
  if (spot_diameter <= 0 || pixel_resolution <= 0)
    fail(ErrorKind::validation, "spot_diameter and pixel_resolution must be positive");
}

SpotDataset load_dataset(const std::filesystem::path& dir) {
  const auto meta_path = dir / "meta.txt";
  if (!std::filesystem::exists(meta_path))
    fail(ErrorKind::format, "missing file: " + meta_path.string());
  KvMap meta = read_kv_file(meta_path);
  auto need = [&](const std::string& key) -> std::string {
    auto it = meta.find(key);
    if (it == meta.end())
      fail(ErrorKind::format, "meta.txt missing required key: " + key);
    return it->second;
  };

  SpotDataset ds;
  ds.dataset_id = need("dataset_id");
  ds.platform_tag = need("platform_tag");
  ds.spot_diameter = parse_real(need("spot_diameter"), "spot_diameter");
  ds.pixel_resolution = parse_real(need("pixel_resolution"), "pixel_resolution");
  const long long n_spots = parse_int(need("n_spots"), "n_spots");
  const long long d_img = parse_int(need("d_img"), "d_img");
  const long long n_genes = parse_int(need("n_genes"), "n_genes");
  const long long has_labels = parse_int(need("has_labels"), "has_labels");

  auto load = [&](const char* name) {
    const auto p = dir / name;
    if (!std::filesystem::exists(p))
      fail(ErrorKind::format, "missing file: " + p.string());
    return read_matrix(p);
  };
  ds.image_features = load("image_features.mat");
  ds.gene_counts = load("gene_counts.mat");
  ds.coords = load("coords.mat");
  if (has_labels) {
    Mat lab = load("labels.mat");
    if (lab.cols() != 1)
      fail(ErrorKind::dimension, "labels.mat must have one column");
    IVec v(lab.rows());
    for (Eigen::Index i = 0; i < lab.rows(); ++i) {
      const real x = lab(i, 0);
      if (x != real(0) && x != real(1))
        fail(ErrorKind::validation, "labels must be 0 or 1");
      v(i) = static_cast<int>(x);
    }
    ds.labels = std::move(v);
  }

  auto expect = [&](Eigen::Index got, long long want, const char* what) {
    if (got != want)
      fail(ErrorKind::dimension, std::string(what) + ": meta says " +
                                     std::to_string(want) + ", file has " +
                                     std::to_string(got));
  };
  expect(ds.coords.rows(), n_spots, "coords rows");
  expect(ds.image_features.rows(), n_spots, "image_features rows");
  expect(ds.gene_counts.rows(), n_spots, "gene_counts rows");
  expect(ds.image_features.cols(), d_img, "image_features cols");
  expect(ds.gene_counts.cols(), n_genes, "gene_counts cols");

  ds.validate();
  return ds;
}

void save_dataset(const std::filesystem::path& dir, const SpotDataset& ds,
                  bool binary) {
  ds.validate();
  std::filesystem::create_directories(dir);
  KvMap meta;
  meta["n_spots"] = std::to_string(ds.n_spots());
  meta["d_img"] = std::to_string(ds.image_features.cols());
  meta["n_genes"] = std::to_string(ds.gene_counts.cols());
  meta["spot_diameter"] = format_real(ds.spot_diameter);
  meta["pixel_resolution"] = format_real(ds.pixel_resolution);
  meta["dataset_id"] = ds.dataset_id;
  meta["platform_tag"] = ds.platform_tag;
  meta["has_labels"] = ds.labels ? "1" : "0";
  write_kv_file(dir / "meta.txt", meta);

  auto write = [&](const char* name, const Mat& m) {
    if (binary)
      write_matrix_binary(dir / name, m);
    else
      write_matrix_text(dir / name, m);
  };
  write("image_features.mat", ds.image_features);
  write("gene_counts.mat", ds.gene_counts);
  write("coords.mat", ds.coords);
  if (ds.labels) {
    Mat lab(ds.labels->size(), 1);
    for (Eigen::Index i = 0; i < lab.rows(); ++i)
      lab(i, 0) = static_cast<real>((*ds.labels)(i));
    write("labels.mat", lab);
  }
}

Mat normalize_expression(const Mat& counts, double target_sum) {
  if (target_sum <= 0)
    fail(ErrorKind::argument, "target_sum must be positive");
  if ((counts.array() < real(0)).any())
    fail(ErrorKind::validation, "counts must be non-negative");
  Mat out(counts.rows(), counts.cols());
  for (Eigen::Index r = 0; r < counts.rows(); ++r) {
    double row_sum = 0;  // accumulate at 64-bit regardless of `real`
    for (Eigen::Index c = 0; c < counts.cols(); ++c)
      row_sum += static_cast<double>(counts(r, c));
    if (row_sum <= 0)
      fail(ErrorKind::validation,
           "row " + std::to_string(r) + " of counts is all zero");
    const double scale = target_sum / row_sum;
    for (Eigen::Index c = 0; c < counts.cols(); ++c)
      out(r, c) = static_cast<real>(
          std::log1p(static_cast<double>(counts(r, c)) * scale));
  }
  return out;
}

std::vector<int> select_hvg(const Mat& expr, int n_top) {
  if (n_top > expr.cols())
    fail(ErrorKind::argument, "n_top exceeds the number of genes");
  if (n_top < 0) fail(ErrorKind::argument, "n_top must be non-negative");
  if (expr.rows() < 2)
    fail(ErrorKind::argument, "variance ranking needs at least 2 spots");
  const auto n = static_cast<double>(expr.rows());
  std::vector<double> var(expr.cols());
  for (Eigen::Index c = 0; c < expr.cols(); ++c) {
    double mean = 0;
    for (Eigen::Index r = 0; r < expr.rows(); ++r)
      mean += static_cast<double>(expr(r, c));
    mean /= n;
    double ss = 0;
    for (Eigen::Index r = 0; r < expr.rows(); ++r) {
      const double d = static_cast<double>(expr(r, c)) - mean;
      ss += d * d;
    }
    var[c] = ss / (n - 1);  // sample variance
  }
  std::vector<int> idx(expr.cols());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return var[a] > var[b]; });
  idx.resize(n_top);
  return idx;
}

long long compute_patch_size(double d, double r) {
  if (!(d > 0) || !(r > 0))
    fail(ErrorKind::argument, "spot diameter and pixel resolution must be positive");
  return std::max<long long>(1, round_half_even(d / r));
}

Mat aggregate_cells_to_spots(const Mat& cell_expr, const Mat& cell_coords,
                             const Mat& spot_centers, double spot_diameter) {
  if (cell_expr.rows() != cell_coords.rows())
    fail(ErrorKind::dimension, "cell_expr and cell_coords row mismatch");
  if (cell_coords.cols() != 2 || spot_centers.cols() != 2)
    fail(ErrorKind::dimension, "coordinates must have 2 columns");
  if (!cell_coords.allFinite() || !spot_centers.allFinite())
    fail(ErrorKind::validation, "coordinates contain NaN/Inf");
  if (!(spot_diameter > 0))
    fail(ErrorKind::argument, "spot_diameter must be positive");

  const double radius2 =
      (spot_diameter / 2.0) * (spot_diameter / 2.0);
  Mat out = Mat::Zero(spot_centers.rows(), cell_expr.cols());
  for (Eigen::Index s = 0; s < spot_centers.rows(); ++s) {
    for (Eigen::Index c = 0; c < cell_coords.rows(); ++c) {
      const double dx = static_cast<double>(cell_coords(c, 0)) -
                        static_cast<double>(spot_centers(s, 0));
      const double dy = static_cast<double>(cell_coords(c, 1)) -
                        static_cast<double>(spot_centers(s, 1));
      if (dx * dx + dy * dy <= radius2) out.row(s) += cell_expr.row(c);
    }
  }
  return out;
}

NeighborIndex knn_neighbors(const Mat& coords, int k) {
  const auto n = static_cast<int>(coords.rows());
  if (k < 0 || k >= n)
    fail(ErrorKind::argument,
         "k must satisfy 0 <= k < n (k=" + std::to_string(k) +
             ", n=" + std::to_string(n) + ")");
  NeighborIndex ni;
  ni.k = k;
  ni.neighbors.resize(n, k);
  std::vector<std::pair<double, int>> dist(n);
  for (int i = 0; i < n; ++i) {
    dist.clear();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = static_cast<double>(coords(i, 0)) -
                        static_cast<double>(coords(j, 0));
      const double dy = static_cast<double>(coords(i, 1)) -
                        static_cast<double>(coords(j, 1));
      dist.emplace_back(dx * dx + dy * dy, j);
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int j = 0; j < k; ++j) ni.neighbors(i, j) = dist[j].second;
  }
  return ni;
}

}  // namespace spacrd::dataio
