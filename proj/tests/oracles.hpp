#pragma once

// Independent reference implementations used to check the production code.
// Everything here is deliberately written as straight-line brute force and
// must never call into the paths it verifies.

#include "spacrd/common.hpp"
#include "spacrd/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace spacrd::oracles {

// O(n^2) pairwise AUC with half-credit ties
inline double auc_brute(const std::vector<double>& s, const std::vector<int>& y) {
  double credit = 0;
  long pairs = 0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j])
        credit += 1;
      else if (s[i] == s[j])
        credit += 0.5;
    }
  return credit / static_cast<double>(pairs);
}

// threshold sweep over every distinct score
inline double ap_brute(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> thresholds = s;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());
  const double n_pos = std::count(y.begin(), y.end(), 1);
  double ap = 0, prev_recall = 0;
  for (double t : thresholds) {
    long tp = 0, predicted = 0;
    for (size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) {
        ++predicted;
        tp += y[i];
      }
    }
    const double recall = tp / n_pos;
    ap += (static_cast<double>(tp) / predicted) * (recall - prev_recall);
    prev_recall = recall;
  }
  return ap;
}

// straight-line per-head multi-head cross attention
inline Mat naive_attention(const Mat& q_in, const Mat& k_in, const Mat& v_in,
                           const diffcore::AttentionParams& p) {
  const int dh = p.d_model / p.heads;
  Mat concat(q_in.rows(), p.d_model);
  for (int h = 0; h < p.heads; ++h) {
    Mat wq = p.wq.middleCols(h * dh, dh);
    Mat wk = p.wk.middleCols(h * dh, dh);
    Mat wv = p.wv.middleCols(h * dh, dh);
    Mat q = q_in * wq, k = k_in * wk, v = v_in * wv;
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      std::vector<double> w(k.rows());
      double mx = -1e300;
      for (Eigen::Index j = 0; j < k.rows(); ++j) {
        double s = 0;
        for (int d = 0; d < dh; ++d)
          s += static_cast<double>(q(i, d)) * static_cast<double>(k(j, d));
        w[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[j]);
      }
      double z = 0;
      for (auto& x : w) {
        x = std::exp(x - mx);
        z += x;
      }
      for (int d = 0; d < dh; ++d) {
        double acc = 0;
        for (Eigen::Index j = 0; j < k.rows(); ++j)
          acc += (w[j] / z) * static_cast<double>(v(j, d));
        concat(i, h * dh + d) = static_cast<real>(acc);
      }
    }
  }
  return concat * p.wo;
}

inline double weighted_density(double y, double pi, double mu, double var) {
  return pi / std::sqrt(2.0 * M_PI * var) *
         std::exp(-(y - mu) * (y - mu) / (2.0 * var));
}

// bisection on the weighted log-density difference between the two means;
// NaN when no sign change exists on the interval
template <typename GmmLike>
double bisect_threshold(const GmmLike& p) {
  auto f = [&](double y) {
    auto logn = [](double x, double mu, double var) {
      return -0.5 * (std::log(2.0 * M_PI * var) + (x - mu) * (x - mu) / var);
    };
    return std::log(p.pi1) + logn(y, p.mu1, p.var1) -
           (std::log(p.pi2) + logn(y, p.mu2, p.var2));
  };
  double lo = std::min(p.mu1, p.mu2), hi = std::max(p.mu1, p.mu2);
  double flo = f(lo);
  if (f(hi) * flo > 0) return std::numeric_limits<double>::quiet_NaN();
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (f(mid) * flo >= 0) {
      lo = mid;
      flo = f(mid);
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace spacrd::oracles
