#pragma once

#include "spacrd/common.hpp"

#include <optional>

namespace spacrd::metrics {

/// Rank-statistic AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counted one half. Throws when only one class is present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Step-sum average precision over descending distinct-score thresholds;
/// tied scores are grouped at a single threshold.
double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& labels);

/// F1 after predicting positive for the top-ceil(prevalence*n) scores,
/// ties at the cut broken by lower index.
double f1_at_prevalence(const std::vector<double>& scores,
                        const std::vector<int>& labels);

/// Two-sample Kolmogorov-Smirnov distance, sup_x |F_a(x) - F_b(x)|.
double ks_distance(const std::vector<double>& a, const std::vector<double>& b);

// The score used as the prevalence cut in f1_at_prevalence (value of the
// lowest score still predicted positive).
double prevalence_cut_score(const std::vector<double>& scores,
                            const std::vector<int>& labels);

struct ScoreReport {
  std::optional<double> auc;
  std::optional<double> ap;
  std::optional<double> f1;
  std::optional<double> ks;
  // reason strings for metrics that could not be computed
  std::map<std::string, std::string> null_reasons;
  int n_spots = 0;
  double positive_fraction = 0;
  double f1_threshold = 0;  // prevalence cut score
  // anything extra the caller wants persisted (dataset_id, seed, gmm fit, ...)
  KvMap extras;

  KvMap to_kv() const;
  static ScoreReport from_kv(const KvMap& kv);
};

/// Assembles all metrics; metric failures become null entries with reasons,
/// never exceptions. ks compares class-conditional score sets.
ScoreReport build_report(const std::vector<double>& scores,
                         const std::vector<int>& labels, KvMap extras = {});

void write_report(const std::filesystem::path& path, const ScoreReport& r);
ScoreReport read_report(const std::filesystem::path& path);

}  // namespace spacrd::metrics
