#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace spacrd {

#ifdef SPACRD_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

// Row-major to mirror the on-disk matrix layout.
using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IMat = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IVec = Eigen::VectorXi;

enum class ErrorKind {
  usage,       // bad flags, unknown config keys
  argument,    // invalid parameter value passed to an operation
  format,      // unreadable/missing file, bad magic, bad layout
  dimension,   // shape mismatch
  validation,  // content violates an invariant (NaN, negative count, ...)
  io,          // filesystem failure
  numeric,     // non-finite value produced during computation
  training,    // optimizer/training failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

  int exit_code() const {
    switch (kind_) {
      case ErrorKind::usage:
      case ErrorKind::argument:
        return 2;
      case ErrorKind::format:
      case ErrorKind::dimension:
      case ErrorKind::validation:
      case ErrorKind::io:
        return 3;
      case ErrorKind::numeric:
      case ErrorKind::training:
        return 4;
    }
    return 1;
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

// Deterministic seedable stream with cheap named forks, so independent
// consumers (per-dataset generators, per-stage training loops) never share
// state.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), gen_(mix(seed)) {}

  RngStream fork(const std::string& name) const;
  RngStream fork(std::uint64_t salt) const;

  std::mt19937_64& gen() { return gen_; }

  double normal(double mean = 0.0, double sd = 1.0) {
    std::normal_distribution<double> d(mean, sd);
    return d(gen_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(gen_);
  }
  std::uint64_t next_u64() { return gen_(); }

  // Fisher-Yates over [0, n)
  std::vector<int> permutation(int n);

  static std::uint64_t mix(std::uint64_t x);

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 gen_;
};

// Banker's rounding, independent of the ambient FP rounding mode.
long long round_half_even(double x);

// key=value text files (meta.txt, run configs, reports). Lines starting
// with '#' and blank lines are ignored; values keep embedded spaces.
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv_text(const std::string& text);
KvMap read_kv_file(const std::filesystem::path& path);
std::string serialize_kv(const KvMap& kv);
void write_kv_file(const std::filesystem::path& path, const KvMap& kv);

std::string format_real(double v);  // shortest lossless decimal
double parse_real(const std::string& s, const std::string& what);
long long parse_int(const std::string& s, const std::string& what);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// FNV-1a, used for config fingerprints and rng forking.
std::uint64_t fnv1a(const std::string& s);

}  // namespace spacrd
