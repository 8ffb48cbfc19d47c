#include "spacrd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace spacrd::metrics {

namespace {

void check_inputs(const std::vector<double>& scores,
                  const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    fail(ErrorKind::dimension, "scores and labels differ in length");
  if (scores.empty()) fail(ErrorKind::argument, "empty score vector");
  for (double s : scores)
    if (!std::isfinite(s)) fail(ErrorKind::validation, "non-finite score");
  for (int y : labels)
    if (y != 0 && y != 1) fail(ErrorKind::validation, "labels must be 0 or 1");
}

// indices sorted by descending score, ties by lower index
std::vector<size_t> order_desc(const std::vector<double>& scores) {
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
    return scores[a] > scores[b];
  });
  return idx;
}

}  // namespace

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_inputs(scores, labels);
  const long n_pos = std::count(labels.begin(), labels.end(), 1);
  const long n_neg = static_cast<long>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0)
    fail(ErrorKind::validation, "auc undefined: only one class present");

  // Sort ascending; walk tie groups, crediting each positive with the number
  // of negatives strictly below plus half the negatives tied with it.
  std::vector<size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  double credit = 0;
  double neg_below = 0;
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    long tie_pos = 0, tie_neg = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] == 1 ? tie_pos : tie_neg) += 1;
      ++j;
    }
    credit += tie_pos * (neg_below + 0.5 * tie_neg);
    neg_below += tie_neg;
    i = j;
  }
  return credit / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double average_precision(const std::vector<double>& scores,
                         const std::vector<int>& labels) {
  check_inputs(scores, labels);
  const long n_pos = std::count(labels.begin(), labels.end(), 1);
  if (n_pos == 0)
    fail(ErrorKind::validation, "average precision undefined: no positives");

  const auto idx = order_desc(scores);
  double ap = 0;
  long tp = 0, predicted = 0;
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    long tie_tp = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      tie_tp += labels[idx[j]];
      ++j;
    }
    const long prev_tp = tp;
    tp += tie_tp;
    predicted += static_cast<long>(j - i);
    const double precision = static_cast<double>(tp) / predicted;
    const double delta_recall =
        static_cast<double>(tp - prev_tp) / static_cast<double>(n_pos);
    ap += precision * delta_recall;
    i = j;
  }
  return ap;
}

namespace {

// top-ceil(prevalence*n) cut size; always equals the positive count
size_t prevalence_cut(const std::vector<int>& labels) {
  const long n_pos = std::count(labels.begin(), labels.end(), 1);
  if (n_pos == 0)
    fail(ErrorKind::validation, "f1 at prevalence undefined: no positives");
  const double prevalence =
      static_cast<double>(n_pos) / static_cast<double>(labels.size());
  const auto m = static_cast<size_t>(
      std::ceil(prevalence * static_cast<double>(labels.size()) -
                1e-9));  // guard float fuzz; equals n_pos exactly
  return std::max<size_t>(m, 1);
}

}  // namespace

double f1_at_prevalence(const std::vector<double>& scores,
                        const std::vector<int>& labels) {
  check_inputs(scores, labels);
  const size_t m = prevalence_cut(labels);
  const auto idx = order_desc(scores);

  long tp = 0;
  for (size_t i = 0; i < m; ++i) tp += labels[idx[i]];
  const long fp = static_cast<long>(m) - tp;
  const long fn = std::count(labels.begin(), labels.end(), 1) - tp;
  return 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
}

double prevalence_cut_score(const std::vector<double>& scores,
                            const std::vector<int>& labels) {
  check_inputs(scores, labels);
  const size_t m = prevalence_cut(labels);
  const auto idx = order_desc(scores);
  return scores[idx[m - 1]];
}

double ks_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty())
    fail(ErrorKind::argument, "ks distance needs nonempty samples");
  std::vector<double> sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const double na = static_cast<double>(sa.size());
  const double nb = static_cast<double>(sb.size());
  size_t i = 0, j = 0;
  double d = 0;
  while (i < sa.size() && j < sb.size()) {
    const double x = std::min(sa[i], sb[j]);
    while (i < sa.size() && sa[i] <= x) ++i;
    while (j < sb.size() && sb[j] <= x) ++j;
    d = std::max(d, std::abs(i / na - j / nb));
  }
  return d;
}

KvMap ScoreReport::to_kv() const {
  KvMap kv = extras;
  auto put = [&](const std::string& key, const std::optional<double>& v) {
    if (v)
      kv[key] = format_real(*v);
    else
      kv[key] = "null";
  };
  put("auc", auc);
  put("ap", ap);
  put("f1", f1);
  put("ks", ks);
  for (const auto& [metric, reason] : null_reasons)
    kv[metric + "_null_reason"] = reason;
  kv["n_spots"] = std::to_string(n_spots);
  kv["positive_fraction"] = format_real(positive_fraction);
  kv["f1_threshold"] = format_real(f1_threshold);
  return kv;
}

ScoreReport ScoreReport::from_kv(const KvMap& kv) {
  ScoreReport r;
  KvMap rest = kv;
  auto take = [&](const std::string& key) -> std::optional<double> {
    auto it = rest.find(key);
    if (it == rest.end()) fail(ErrorKind::format, "report missing key " + key);
    std::string v = it->second;
    rest.erase(it);
    if (v == "null") return std::nullopt;
    return parse_real(v, key);
  };
  r.auc = take("auc");
  r.ap = take("ap");
  r.f1 = take("f1");
  r.ks = take("ks");
  r.n_spots = static_cast<int>(parse_int(rest.at("n_spots"), "n_spots"));
  rest.erase("n_spots");
  r.positive_fraction =
      parse_real(rest.at("positive_fraction"), "positive_fraction");
  rest.erase("positive_fraction");
  r.f1_threshold = parse_real(rest.at("f1_threshold"), "f1_threshold");
  rest.erase("f1_threshold");
  for (auto it = rest.begin(); it != rest.end();) {
    const std::string suffix = "_null_reason";
    if (it->first.size() > suffix.size() &&
        it->first.compare(it->first.size() - suffix.size(), suffix.size(),
                          suffix) == 0) {
      r.null_reasons[it->first.substr(0, it->first.size() - suffix.size())] =
          it->second;
      it = rest.erase(it);
    } else {
      ++it;
    }
  }
  r.extras = std::move(rest);
  return r;
}

ScoreReport build_report(const std::vector<double>& scores,
                         const std::vector<int>& labels, KvMap extras) {
  ScoreReport r;
  r.extras = std::move(extras);
  r.n_spots = static_cast<int>(scores.size());
  const long n_pos = std::count(labels.begin(), labels.end(), 1);
  r.positive_fraction = labels.empty()
                            ? 0.0
                            : static_cast<double>(n_pos) /
                                  static_cast<double>(labels.size());

  auto attempt = [&](const std::string& name, std::optional<double>& slot,
                     auto&& fn) {
    try {
      slot = fn();
    } catch (const Error& e) {
      slot = std::nullopt;
      r.null_reasons[name] = e.what();
    }
  };
  attempt("auc", r.auc, [&] { return auc(scores, labels); });
  attempt("ap", r.ap, [&] { return average_precision(scores, labels); });
  attempt("f1", r.f1, [&] { return f1_at_prevalence(scores, labels); });
  attempt("ks", r.ks, [&] {
    std::vector<double> pos, neg;
    for (size_t i = 0; i < scores.size(); ++i)
      (labels[i] == 1 ? pos : neg).push_back(scores[i]);
    return ks_distance(pos, neg);
  });
  try {
    r.f1_threshold = prevalence_cut_score(scores, labels);
  } catch (const Error&) {
    r.f1_threshold = 0;
  }
  return r;
}

void write_report(const std::filesystem::path& path, const ScoreReport& r) {
  write_kv_file(path, r.to_kv());
}

ScoreReport read_report(const std::filesystem::path& path) {
  return ScoreReport::from_kv(read_kv_file(path));
}

}  // namespace spacrd::metrics
