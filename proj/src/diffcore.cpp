#include "spacrd/diffcore.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>

namespace spacrd::diffcore {

namespace {

std::atomic<bool> g_deterministic{false};

void check_finite(const Mat& m, ErrorKind kind, const std::string& what) {
  if (!m.allFinite()) fail(kind, "non-finite values in " + what);
}

}  // namespace

void set_deterministic_mode(bool on) { g_deterministic = on; }
bool deterministic_mode() { return g_deterministic; }

// ---------------------------------------------------------------------------
// ParamStore / Adam

Mat& ParamStore::add(const std::string& name, Mat init) {
  if (has(name)) fail(ErrorKind::argument, "duplicate parameter: " + name);
  ParamStore::Entry e;
  e.m = Mat::Zero(init.rows(), init.cols());
  e.v = Mat::Zero(init.rows(), init.cols());
  e.value = std::move(init);
  return entries.emplace(name, std::move(e)).first->second.value;
}

Mat& ParamStore::value(const std::string& name) {
  auto it = entries.find(name);
  if (it == entries.end()) fail(ErrorKind::argument, "unknown parameter: " + name);
  return it->second.value;
}

const Mat& ParamStore::value(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) fail(ErrorKind::argument, "unknown parameter: " + name);
  return it->second.value;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries.size());
  for (const auto& [k, _] : entries) out.push_back(k);
  return out;
}

void adam_step(ParamStore& store, const GradMap& grads, const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    auto it = store.entries.find(name);
    if (it == store.entries.end())
      fail(ErrorKind::training, "gradient for unknown parameter: " + name);
    ParamStore::Entry& e = it->second;
    if (g.rows() != e.value.rows() || g.cols() != e.value.cols())
      fail(ErrorKind::dimension, "gradient shape mismatch for " + name);
    if (!g.allFinite())
      fail(ErrorKind::training, "non-finite gradient for parameter " + name);

    e.step += 1;
    const real t = static_cast<real>(e.step);
    e.m = cfg.beta1 * e.m + (real(1) - cfg.beta1) * g;
    e.v = (cfg.beta2 * e.v.array() +
           (real(1) - cfg.beta2) * g.array().square())
              .matrix();
    const real bc1 = real(1) - std::pow(cfg.beta1, t);
    const real bc2 = real(1) - std::pow(cfg.beta2, t);
    Mat m_hat = e.m / bc1;
    Mat v_hat = e.v / bc2;
    e.value.array() -= cfg.lr * m_hat.array() / (v_hat.array().sqrt() + cfg.eps);
    if (!e.value.allFinite())
      fail(ErrorKind::training, "non-finite value after update of " + name);
  }
}

// ---------------------------------------------------------------------------
// Plain forward ops

void AttentionParams::validate() const {
  if (heads < 1 || d_model < 1 || d_model % heads != 0)
    fail(ErrorKind::argument, "attention: d_model must be divisible by heads");
  auto chk = [&](const Mat& w, const char* n) {
    if (w.rows() != d_model || w.cols() != d_model)
      fail(ErrorKind::dimension, std::string("attention: bad shape for ") + n);
  };
  chk(wq, "wq");
  chk(wk, "wk");
  chk(wv, "wv");
  chk(wo, "wo");
}

Mat linear(const Mat& x, const Mat& w, const Mat& b) {
  if (x.cols() != w.rows())
    fail(ErrorKind::dimension, "linear: inner dimensions do not match");
  Mat y = x * w;
  if (b.size() > 0) {
    if (b.rows() != 1 || b.cols() != w.cols())
      fail(ErrorKind::dimension, "linear: bias must be 1 x out_dim");
    y.rowwise() += b.row(0);
  }
  return y;
}

Mat layer_normalize(const Mat& x, const Mat& scale, const Mat& shift, real eps) {
  Mat y(x.rows(), x.cols());
  const auto n = static_cast<real>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const real mean = x.row(r).mean();
    const real var = (x.row(r).array() - mean).square().sum() / n;
    y.row(r) = ((x.row(r).array() - mean) / std::sqrt(var + eps)).matrix();
  }
  if (scale.size() > 0)
    y = (y.array().rowwise() * scale.row(0).array()).matrix();
  if (shift.size() > 0) y.rowwise() += shift.row(0);
  return y;
}

Mat dropout(const Mat& x, real rate, bool training, RngStream& rng) {
  if (rate < real(0) || rate >= real(1))
    fail(ErrorKind::argument, "dropout: rate must be in [0, 1)");
  if (!training || rate == real(0)) return x;
  return (x.array() * dropout_mask(x.rows(), x.cols(), rate, rng).array())
      .matrix();
}

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, real rate,
                 RngStream& rng) {
  Mat mask(rows, cols);
  const real keep_scale = real(1) / (real(1) - rate);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      mask(i, j) = (u(rng.gen()) < static_cast<double>(rate)) ? real(0)
                                                              : keep_scale;
  return mask;
}

// ---------------------------------------------------------------------------
// Tape

int Tape::make(Mat v, bool needs_grad, std::function<void()> back) {
  Node n;
  n.value = std::move(v);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size() - 1);
}

bool Tape::any_grad(const std::vector<int>& ids) const {
  for (int id : ids)
    if (nodes_[id].needs_grad) return true;
  return false;
}

void Tape::accum(int id, const Mat& g) {
  if (nodes_[id].needs_grad) nodes_[id].grad += g;
}

int Tape::constant(Mat v) { return make(std::move(v), false); }

int Tape::leaf(Mat v) { return make(std::move(v), true); }

int Tape::param(ParamStore& store, const std::string& name) {
  for (const auto& [n, id] : param_nodes_)
    if (n == name) return id;
  int id = leaf(store.value(name));
  param_nodes_.emplace_back(name, id);
  return id;
}

GradMap Tape::param_grads() const {
  GradMap out;
  for (const auto& [name, id] : param_nodes_) out[name] = nodes_[id].grad;
  return out;
}

int Tape::matmul(int a, int b) {
  const Mat& A = value(a);
  const Mat& B = value(b);
  if (A.cols() != B.rows()) fail(ErrorKind::dimension, "matmul: shape mismatch");
  int out = make(A * B, any_grad({a, b}));
  nodes_[out].back = [this, a, b, out] {
    const Mat& g = grad(out);
    accum(a, g * value(b).transpose());
    accum(b, value(a).transpose() * g);
  };
  return out;
}

int Tape::matmul_nt(int a, int b) {
  const Mat& A = value(a);
  const Mat& B = value(b);
  if (A.cols() != B.cols())
    fail(ErrorKind::dimension, "matmul_nt: shape mismatch");
  int out = make(A * B.transpose(), any_grad({a, b}));
  nodes_[out].back = [this, a, b, out] {
    const Mat& g = grad(out);
    accum(a, g * value(b));
    accum(b, g.transpose() * value(a));
  };
  return out;
}

int Tape::add(int a, int b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
    fail(ErrorKind::dimension, "add: shape mismatch");
  int out = make(value(a) + value(b), any_grad({a, b}));
  nodes_[out].back = [this, a, b, out] {
    accum(a, grad(out));
    accum(b, grad(out));
  };
  return out;
}

int Tape::sub(int a, int b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
    fail(ErrorKind::dimension, "sub: shape mismatch");
  int out = make(value(a) - value(b), any_grad({a, b}));
  nodes_[out].back = [this, a, b, out] {
    accum(a, grad(out));
    accum(b, -grad(out));
  };
  return out;
}

int Tape::mul_elem(int a, int b) {
  if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
    fail(ErrorKind::dimension, "mul_elem: shape mismatch");
  int out = make((value(a).array() * value(b).array()).matrix(),
                 any_grad({a, b}));
  nodes_[out].back = [this, a, b, out] {
    const Mat& g = grad(out);
    accum(a, (g.array() * value(b).array()).matrix());
    accum(b, (g.array() * value(a).array()).matrix());
  };
  return out;
}

int Tape::add_rowvec(int a, int bias) {
  const Mat& A = value(a);
  const Mat& B = value(bias);
  if (B.rows() != 1 || B.cols() != A.cols())
    fail(ErrorKind::dimension, "add_rowvec: bias must be 1 x cols");
  Mat y = A;
  y.rowwise() += B.row(0);
  int out = make(std::move(y), any_grad({a, bias}));
  nodes_[out].back = [this, a, bias, out] {
    accum(a, grad(out));
    accum(bias, grad(out).colwise().sum());
  };
  return out;
}

int Tape::affine_scalar(int a, real s, real c) {
  int out = make((value(a).array() * s + c).matrix(), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, s, out] { accum(a, (grad(out).array() * s).matrix()); };
  return out;
}

int Tape::relu(int a) {
  int out = make(value(a).cwiseMax(real(0)), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] {
    Mat g = (value(a).array() > real(0))
                .select(grad(out), Mat::Zero(grad(out).rows(), grad(out).cols()));
    accum(a, g);
  };
  return out;
}

int Tape::sigmoid(int a) {
  Mat y = (real(1) / (real(1) + (-value(a).array()).exp())).matrix();
  int out = make(std::move(y), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] {
    const auto& y = value(out).array();
    accum(a, (grad(out).array() * y * (real(1) - y)).matrix());
  };
  return out;
}

int Tape::exp(int a) {
  int out = make(value(a).array().exp().matrix(), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] {
    accum(a, (grad(out).array() * value(out).array()).matrix());
  };
  return out;
}

int Tape::square(int a) {
  int out = make(value(a).array().square().matrix(), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] {
    accum(a, (grad(out).array() * real(2) * value(a).array()).matrix());
  };
  return out;
}

int Tape::clamp(int a, real lo, real hi) {
  int out = make(value(a).cwiseMax(lo).cwiseMin(hi), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, lo, hi, out] {
    const auto& x = value(a).array();
    Mat inside = ((x >= lo) && (x <= hi))
                     .select(grad(out),
                             Mat::Zero(grad(out).rows(), grad(out).cols()));
    accum(a, inside);
  };
  return out;
}

int Tape::transpose(int a) {
  int out = make(value(a).transpose(), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] { accum(a, grad(out).transpose()); };
  return out;
}

int Tape::block(int a, Eigen::Index r0, Eigen::Index rows, Eigen::Index c0,
                Eigen::Index cols) {
  if (r0 < 0 || c0 < 0 || r0 + rows > value(a).rows() ||
      c0 + cols > value(a).cols())
    fail(ErrorKind::dimension, "block: out of range");
  Mat y = value(a).block(r0, c0, rows, cols);
  int out = make(std::move(y), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, r0, rows, c0, cols, out] {
    if (!nodes_[a].needs_grad) return;
    nodes_[a].grad.block(r0, c0, rows, cols) += grad(out);
  };
  return out;
}

int Tape::concat_cols(const std::vector<int>& parts) {
  if (parts.empty()) fail(ErrorKind::argument, "concat_cols: empty");
  Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (int p : parts) {
    if (value(p).rows() != rows)
      fail(ErrorKind::dimension, "concat_cols: row mismatch");
    cols += value(p).cols();
  }
  Mat y(rows, cols);
  Eigen::Index at = 0;
  for (int p : parts) {
    y.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  int out = make(std::move(y), any_grad(parts));
  nodes_[out].back = [this, parts, out] {
    Eigen::Index at = 0;
    for (int p : parts) {
      const Eigen::Index c = value(p).cols();
      accum(p, grad(out).middleCols(at, c));
      at += c;
    }
  };
  return out;
}

int Tape::stack_rows(const std::vector<int>& parts) {
  if (parts.empty()) fail(ErrorKind::argument, "stack_rows: empty");
  Eigen::Index cols = value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (int p : parts) {
    if (value(p).cols() != cols)
      fail(ErrorKind::dimension, "stack_rows: column mismatch");
    rows += value(p).rows();
  }
  Mat y(rows, cols);
  Eigen::Index at = 0;
  for (int p : parts) {
    y.middleRows(at, value(p).rows()) = value(p);
    at += value(p).rows();
  }
  int out = make(std::move(y), any_grad(parts));
  nodes_[out].back = [this, parts, out] {
    Eigen::Index at = 0;
    for (int p : parts) {
      const Eigen::Index r = value(p).rows();
      accum(p, grad(out).middleRows(at, r));
      at += r;
    }
  };
  return out;
}

int Tape::row_sum(int a) {
  int out = make(value(a).rowwise().sum(), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] {
    accum(a, grad(out) * Mat::Ones(1, value(a).cols()));
  };
  return out;
}

int Tape::sum_all(int a) {
  Mat y(1, 1);
  y(0, 0) = value(a).sum();
  int out = make(std::move(y), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] {
    accum(a, Mat::Constant(value(a).rows(), value(a).cols(), grad(out)(0, 0)));
  };
  return out;
}

int Tape::mean_all(int a) {
  const real n = static_cast<real>(value(a).size());
  Mat y(1, 1);
  y(0, 0) = value(a).sum() / n;
  int out = make(std::move(y), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, n, out] {
    accum(a, Mat::Constant(value(a).rows(), value(a).cols(),
                           grad(out)(0, 0) / n));
  };
  return out;
}

int Tape::col_mean(int a) {
  const real n = static_cast<real>(value(a).rows());
  int out = make(value(a).colwise().sum() / n, nodes_[a].needs_grad);
  nodes_[out].back = [this, a, n, out] {
    accum(a, Mat::Ones(value(a).rows(), 1) * (grad(out) / n));
  };
  return out;
}

int Tape::row_softmax(int a) {
  const Mat& x = value(a);
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const real m = x.row(r).maxCoeff();
    Eigen::Array<real, 1, Eigen::Dynamic> e = (x.row(r).array() - m).exp();
    y.row(r) = (e / e.sum()).matrix();
  }
  int out = make(std::move(y), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] {
    const Mat& y = value(out);
    const Mat& g = grad(out);
    Mat gx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const real dot = (g.row(r).array() * y.row(r).array()).sum();
      gx.row(r) = (y.row(r).array() * (g.row(r).array() - dot)).matrix();
    }
    accum(a, gx);
  };
  return out;
}

int Tape::row_logsumexp(int a) {
  const Mat& x = value(a);
  Mat y(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const real m = x.row(r).maxCoeff();
    y(r, 0) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  int out = make(std::move(y), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] {
    const Mat& x = value(a);
    Mat gx(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const real m = x.row(r).maxCoeff();
      Eigen::Array<real, 1, Eigen::Dynamic> e = (x.row(r).array() - m).exp();
      gx.row(r) = (e / e.sum() * grad(out)(r, 0)).matrix();
    }
    accum(a, gx);
  };
  return out;
}

int Tape::diag_as_col(int a) {
  const Mat& x = value(a);
  if (x.rows() != x.cols())
    fail(ErrorKind::dimension, "diag_as_col: matrix must be square");
  Mat y(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) y(i, 0) = x(i, i);
  int out = make(std::move(y), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, out] {
    if (!nodes_[a].needs_grad) return;
    for (Eigen::Index i = 0; i < value(a).rows(); ++i)
      nodes_[a].grad(i, i) += grad(out)(i, 0);
  };
  return out;
}

int Tape::l2_normalize_rows(int a, real eps) {
  const Mat& x = value(a);
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const real n = std::max(x.row(r).norm(), eps);
    y.row(r) = x.row(r) / n;
  }
  int out = make(std::move(y), nodes_[a].needs_grad);
  nodes_[out].back = [this, a, eps, out] {
    const Mat& x = value(a);
    const Mat& y = value(out);
    const Mat& g = grad(out);
    Mat gx(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const real n = std::max(x.row(r).norm(), eps);
      const real dot = g.row(r).dot(y.row(r));
      gx.row(r) = (g.row(r) - dot * y.row(r)) / n;
    }
    accum(a, gx);
  };
  return out;
}

int Tape::layer_norm(int a, int gain, int bias, real eps) {
  const Mat& x = value(a);
  const Mat& g = value(gain);
  const Mat& b = value(bias);
  if (g.rows() != 1 || g.cols() != x.cols() || b.rows() != 1 ||
      b.cols() != x.cols())
    fail(ErrorKind::dimension, "layer_norm: gain/bias must be 1 x cols");
  const real n = static_cast<real>(x.cols());
  Mat xhat(x.rows(), x.cols());
  Mat inv_sd(x.rows(), 1);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const real mean = x.row(r).mean();
    const real var = (x.row(r).array() - mean).square().sum() / n;
    inv_sd(r, 0) = real(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean).matrix() * inv_sd(r, 0);
  }
  Mat y = (xhat.array().rowwise() * g.row(0).array()).matrix();
  y.rowwise() += b.row(0);
  auto cache = std::make_shared<std::pair<Mat, Mat>>(std::move(xhat),
                                                     std::move(inv_sd));
  int out = make(std::move(y), any_grad({a, gain, bias}));
  nodes_[out].back = [this, a, gain, bias, cache, out] {
    const Mat& xh = cache->first;
    const Mat& isd = cache->second;
    const Mat& gy = grad(out);
    accum(gain, (gy.array() * xh.array()).colwise().sum().matrix());
    accum(bias, gy.colwise().sum());
    if (!nodes_[a].needs_grad) return;
    Mat dxhat = (gy.array().rowwise() * value(gain).row(0).array()).matrix();
    Mat gx(xh.rows(), xh.cols());
    for (Eigen::Index r = 0; r < xh.rows(); ++r) {
      const real mu_g = dxhat.row(r).mean();
      const real mu_gx = (dxhat.row(r).array() * xh.row(r).array()).mean();
      gx.row(r) =
          ((dxhat.row(r).array() - mu_g - xh.row(r).array() * mu_gx) *
           isd(r, 0))
              .matrix();
    }
    accum(a, gx);
  };
  return out;
}

int Tape::batch_norm(int a, int gain, int bias, Mat* running_mean,
                     Mat* running_var, bool training, real momentum, real eps,
                     bool update_running) {
  const Mat& x = value(a);
  const Mat& g = value(gain);
  const Mat& b = value(bias);
  if (g.rows() != 1 || g.cols() != x.cols() || b.rows() != 1 ||
      b.cols() != x.cols())
    fail(ErrorKind::dimension, "batch_norm: gain/bias must be 1 x cols");
  if (running_mean->cols() != x.cols() || running_var->cols() != x.cols())
    fail(ErrorKind::dimension, "batch_norm: running stats shape mismatch");

  const real n = static_cast<real>(x.rows());
  Mat mu, var;
  if (training) {
    mu = x.colwise().sum() / n;
    var = ((x.rowwise() - mu.row(0)).array().square().colwise().sum() / n)
              .matrix();
    if (update_running) {
      *running_mean = (real(1) - momentum) * (*running_mean) + momentum * mu;
      *running_var = (real(1) - momentum) * (*running_var) + momentum * var;
    }
  } else {
    mu = *running_mean;
    var = *running_var;
  }
  Mat inv_sd = (var.array() + eps).rsqrt().matrix();  // 1 x c
  Mat centered = x.rowwise() - mu.row(0);
  Mat xhat = (centered.array().rowwise() * inv_sd.row(0).array()).matrix();
  Mat y = (xhat.array().rowwise() * g.row(0).array()).matrix();
  y.rowwise() += b.row(0);

  auto cache = std::make_shared<std::pair<Mat, Mat>>(std::move(xhat),
                                                     std::move(inv_sd));
  int out = make(std::move(y), any_grad({a, gain, bias}));
  nodes_[out].back = [this, a, gain, bias, cache, n, training, out] {
    const Mat& xh = cache->first;
    const Mat& isd = cache->second;
    const Mat& gy = grad(out);
    accum(gain, (gy.array() * xh.array()).colwise().sum().matrix());
    accum(bias, gy.colwise().sum());
    if (!nodes_[a].needs_grad) return;
    Mat dxhat = (gy.array().rowwise() * value(gain).row(0).array()).matrix();
    Mat gx;
    if (training) {
      Mat mu_g = dxhat.colwise().sum() / n;  // 1 x c
      Mat mu_gx =
          ((dxhat.array() * xh.array()).colwise().sum() / n).matrix();
      Mat centered_g = dxhat.rowwise() - mu_g.row(0);
      Mat proj = (xh.array().rowwise() * mu_gx.row(0).array()).matrix();
      gx = ((centered_g - proj).array().rowwise() * isd.row(0).array())
               .matrix();
    } else {
      gx = (dxhat.array().rowwise() * isd.row(0).array()).matrix();
    }
    accum(a, gx);
  };
  return out;
}

int Tape::apply_mask(int a, Mat mask) {
  if (mask.rows() != value(a).rows() || mask.cols() != value(a).cols())
    fail(ErrorKind::dimension, "apply_mask: shape mismatch");
  auto m = std::make_shared<Mat>(std::move(mask));
  int out = make((value(a).array() * m->array()).matrix(),
                 nodes_[a].needs_grad);
  nodes_[out].back = [this, a, m, out] {
    accum(a, (grad(out).array() * m->array()).matrix());
  };
  return out;
}

namespace {
struct AttnCache {
  Mat qp, kp, vp;       // full projections
  std::vector<Mat> A;   // per-head attention weights
  Mat concat_o;         // heads concatenated, pre output projection
};
}  // namespace

int Tape::cross_attention(int q_in, int k_in, int v_in, int wq, int wk, int wv,
                          int wo, int heads) {
  const Mat& Q = value(q_in);
  const Mat& K = value(k_in);
  const Mat& V = value(v_in);
  const Eigen::Index d = value(wq).rows();
  if (Q.cols() != d || K.cols() != d || V.cols() != d)
    fail(ErrorKind::dimension, "cross_attention: input dims must equal d_model");
  if (K.rows() != V.rows())
    fail(ErrorKind::dimension, "cross_attention: key/value row mismatch");
  if (heads < 1 || d % heads != 0)
    fail(ErrorKind::argument, "cross_attention: d_model not divisible by heads");
  const Eigen::Index dh = d / heads;
  const real scale = real(1) / std::sqrt(static_cast<real>(dh));

  auto cache = std::make_shared<AttnCache>();
  cache->qp = Q * value(wq);
  cache->kp = K * value(wk);
  cache->vp = V * value(wv);
  cache->A.resize(heads);
  cache->concat_o.resize(Q.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Mat s = cache->qp.middleCols(h * dh, dh) *
            cache->kp.middleCols(h * dh, dh).transpose() * scale;
    Mat& A = cache->A[h];
    A.resize(s.rows(), s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const real m = s.row(r).maxCoeff();
      Eigen::Array<real, 1, Eigen::Dynamic> e = (s.row(r).array() - m).exp();
      A.row(r) = (e / e.sum()).matrix();
    }
    cache->concat_o.middleCols(h * dh, dh) =
        A * cache->vp.middleCols(h * dh, dh);
  }
  Mat out_val = cache->concat_o * value(wo);

  int out = make(std::move(out_val),
                 any_grad({q_in, k_in, v_in, wq, wk, wv, wo}));
  nodes_[out].back = [this, q_in, k_in, v_in, wq, wk, wv, wo, heads, dh, scale,
                      cache, out] {
    const Mat& g = grad(out);
    accum(wo, cache->concat_o.transpose() * g);
    Mat d_concat = g * value(wo).transpose();

    Mat d_qp = Mat::Zero(cache->qp.rows(), cache->qp.cols());
    Mat d_kp = Mat::Zero(cache->kp.rows(), cache->kp.cols());
    Mat d_vp = Mat::Zero(cache->vp.rows(), cache->vp.cols());
    for (int h = 0; h < heads; ++h) {
      const auto Qh = cache->qp.middleCols(h * dh, dh);
      const auto Kh = cache->kp.middleCols(h * dh, dh);
      const auto Vh = cache->vp.middleCols(h * dh, dh);
      const Mat& A = cache->A[h];
      Mat d_o = d_concat.middleCols(h * dh, dh);
      Mat d_a = d_o * Vh.transpose();
      d_vp.middleCols(h * dh, dh) += A.transpose() * d_o;
      Mat d_s(A.rows(), A.cols());
      for (Eigen::Index r = 0; r < A.rows(); ++r) {
        const real dot = (d_a.row(r).array() * A.row(r).array()).sum();
        d_s.row(r) = (A.row(r).array() * (d_a.row(r).array() - dot)).matrix();
      }
      d_qp.middleCols(h * dh, dh) += d_s * Kh * scale;
      d_kp.middleCols(h * dh, dh) += d_s.transpose() * Qh * scale;
    }
    accum(q_in, d_qp * value(wq).transpose());
    accum(wq, value(q_in).transpose() * d_qp);
    accum(k_in, d_kp * value(wk).transpose());
    accum(wk, value(k_in).transpose() * d_kp);
    accum(v_in, d_vp * value(wv).transpose());
    accum(wv, value(v_in).transpose() * d_vp);
  };
  return out;
}

int Tape::bce_with_logits_mean(int logits, Mat targets) {
  const Mat& x = value(logits);
  if (targets.rows() != x.rows() || targets.cols() != x.cols())
    fail(ErrorKind::dimension, "bce_with_logits: target shape mismatch");
  const real n = static_cast<real>(x.size());
  auto t = std::make_shared<Mat>(std::move(targets));
  double acc = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double xv = static_cast<double>(x(i, j));
      const double yv = static_cast<double>((*t)(i, j));
      acc += std::max(xv, 0.0) - xv * yv + std::log1p(std::exp(-std::abs(xv)));
    }
  Mat loss(1, 1);
  loss(0, 0) = static_cast<real>(acc / n);
  int out = make(std::move(loss), nodes_[logits].needs_grad);
  nodes_[out].back = [this, logits, t, n, out] {
    const auto& x = value(logits).array();
    Mat sig = (real(1) / (real(1) + (-x).exp())).matrix();
    accum(logits, ((sig - *t) * (grad(out)(0, 0) / n)).matrix());
  };
  return out;
}

void Tape::backward(int loss_id) {
  if (loss_id < 0 || loss_id >= size())
    fail(ErrorKind::argument, "backward: bad node id");
  if (value(loss_id).rows() != 1 || value(loss_id).cols() != 1)
    fail(ErrorKind::argument, "backward: loss node must be 1x1");
  for (int i = 0; i <= loss_id; ++i) {
    Node& n = nodes_[i];
    if (n.needs_grad) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  }
  if (!nodes_[loss_id].needs_grad) return;  // loss independent of params
  nodes_[loss_id].grad(0, 0) = real(1);
  for (int i = loss_id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.back) n.back();
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

FdReport finite_difference_check(const LossWithGrad& loss_fn, ParamStore& store,
                                 int n_probes, double h, double tol,
                                 std::uint64_t seed) {
  FdReport report;
  report.tol = tol;

  std::vector<std::pair<std::string, Eigen::Index>> coords;
  for (const auto& [name, e] : store.entries)
    for (Eigen::Index i = 0; i < e.value.size(); ++i)
      coords.emplace_back(name, i);
  if (coords.empty()) fail(ErrorKind::argument, "fd check: empty store");

  GradMap grads;
  loss_fn(store, &grads);

  RngStream rng(seed);
  for (int p = 0; p < n_probes; ++p) {
    std::uniform_int_distribution<size_t> pick(0, coords.size() - 1);
    const auto& [name, idx] = coords[pick(rng.gen())];
    real* slot = store.value(name).data() + idx;
    const real saved = *slot;

    *slot = saved + static_cast<real>(h);
    const double f_plus = static_cast<double>(loss_fn(store, nullptr));
    *slot = saved - static_cast<real>(h);
    const double f_minus = static_cast<double>(loss_fn(store, nullptr));
    *slot = saved;

    const double numeric = (f_plus - f_minus) / (2.0 * h);
    auto git = grads.find(name);
    const double analytic =
        (git == grads.end() || git->second.size() == 0)
            ? 0.0
            : static_cast<double>(*(git->second.data() + idx));
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    FdProbe probe{name, idx, analytic, numeric,
                  std::abs(analytic - numeric) / denom};
    report.max_rel_err = std::max(report.max_rel_err, probe.rel_err);
    report.probes.push_back(std::move(probe));
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

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
    fail(ErrorKind::format, "checkpoint: truncated " + what);
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const std::string& what) {
  std::uint32_t n = get_u32(in, what);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n))
    fail(ErrorKind::format, "checkpoint: truncated " + what);
  return s;
}

void put_f32_payload(std::ostream& out, const Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      float f = static_cast<float>(m(r, c));
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const KvMap& meta,
                      const std::map<std::string, Mat>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write checkpoint: " + path.string());
  out.write("CKPT", 4);
  put_u32(out, 1);  // version
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    put_string(out, k);
    put_string(out, v);
  }
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    put_f32_payload(out, m);
  }
  if (!out) fail(ErrorKind::io, "checkpoint write failed: " + path.string());
}

std::pair<KvMap, std::map<std::string, Mat>> read_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::format, "cannot open checkpoint: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "CKPT", 4) != 0)
    fail(ErrorKind::format, "not a checkpoint file: " + path.string());
  std::uint32_t version = get_u32(in, "version");
  if (version != 1)
    fail(ErrorKind::format, "unsupported checkpoint version " +
                                std::to_string(version));
  KvMap meta;
  const std::uint32_t n_meta = get_u32(in, "meta count");
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = get_string(in, "meta key");
    meta[k] = get_string(in, "meta value");
  }
  std::map<std::string, Mat> tensors;
  const std::uint32_t n_tensors = get_u32(in, "tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = get_string(in, "tensor name");
    const std::uint32_t rows = get_u32(in, "rows");
    const std::uint32_t cols = get_u32(in, "cols");
    Mat m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) {
        std::uint32_t bits = get_u32(in, "payload");
        float f;
        std::memcpy(&f, &bits, 4);
        m(r, c) = static_cast<real>(f);
      }
    tensors[name] = std::move(m);
  }
  return {std::move(meta), std::move(tensors)};
}

Mat glorot_init(Eigen::Index rows, Eigen::Index cols, RngStream& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = static_cast<real>(rng.uniform(-limit, limit));
  return m;
}

Mat multihead_cross_attention(const Mat& q_in, const Mat& k_in, const Mat& v_in,
                              const AttentionParams& p) {
  p.validate();
  Tape t;
  int q = t.constant(q_in);
  int k = t.constant(k_in);
  int v = t.constant(v_in);
  int out = t.cross_attention(q, k, v, t.constant(p.wq), t.constant(p.wk),
                              t.constant(p.wv), t.constant(p.wo), p.heads);
  Mat y = t.value(out);
  check_finite(y, ErrorKind::numeric, "attention output");
  return y;
}

}  // namespace spacrd::diffcore
