#pragma once

#include "spacrd/common.hpp"

#include <functional>
#include <memory>
#include <optional>

namespace spacrd::diffcore {

/// Named parameter arrays plus their Adam state. Exclusively owned by one
/// training loop at a time; frozen read access is thread-safe.
struct ParamStore {
  struct Entry {
    Mat value;
    Mat m;  // first moment
    Mat v;  // second moment
    long step = 0;
  };

  std::map<std::string, Entry> entries;

  Mat& add(const std::string& name, Mat init);
  bool has(const std::string& name) const { return entries.count(name) > 0; }
  Mat& value(const std::string& name);
  const Mat& value(const std::string& name) const;
  std::vector<std::string> names() const;
};

using GradMap = std::map<std::string, Mat>;

struct AdamConfig {
  real lr = real(1e-5);
  real beta1 = real(0.9);
  real beta2 = real(0.999);
  real eps = real(1e-8);
};

/// Standard Adam update with bias correction. Parameters without an entry in
/// `grads` are left untouched. Throws a training error naming the parameter
/// on non-finite gradients.
void adam_step(ParamStore& store, const GradMap& grads, const AdamConfig& cfg);

struct AttentionParams {
  int heads = 1;
  int d_model = 0;
  // Per-head projections packed column-wise: head i occupies columns
  // [i*d_h, (i+1)*d_h) with d_h = d_model/heads.
  Mat wq, wk, wv;
  Mat wo;  // d_model x d_model output projection

  void validate() const;
};

// Plain forward ops (no gradients); the tape ops below must agree with these.
Mat linear(const Mat& x, const Mat& w, const Mat& b);
Mat layer_normalize(const Mat& x, const Mat& scale, const Mat& shift,
                    real eps = real(1e-5));
Mat multihead_cross_attention(const Mat& q_in, const Mat& k_in, const Mat& v_in,
                              const AttentionParams& p);
Mat dropout(const Mat& x, real rate, bool training, RngStream& rng);

// Scaled keep-mask for dropout: entries are 0 or 1/(1-rate).
Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, real rate, RngStream& rng);

/// Reverse-mode tape over dense matrices. Build a fresh tape per step; node
/// ids are indices into creation order, which is also a topological order.
class Tape {
 public:
  int constant(Mat v);
  int leaf(Mat v);
  // Leaf bound to a ParamStore entry; gradients retrievable via param_grads().
  int param(ParamStore& store, const std::string& name);

  int matmul(int a, int b);
  int matmul_nt(int a, int b);  // a * b^T
  int add(int a, int b);
  int sub(int a, int b);
  int mul_elem(int a, int b);
  int add_rowvec(int a, int bias);              // bias 1 x c broadcast over rows
  int affine_scalar(int a, real s, real c);     // s*x + c elementwise
  int relu(int a);
  int sigmoid(int a);
  int exp(int a);
  int square(int a);
  int clamp(int a, real lo, real hi);
  int transpose(int a);
  int block(int a, Eigen::Index r0, Eigen::Index rows, Eigen::Index c0,
            Eigen::Index cols);
  int row(int a, Eigen::Index r) { return block(a, r, 1, 0, value(a).cols()); }
  int concat_cols(const std::vector<int>& parts);
  int stack_rows(const std::vector<int>& parts);
  int row_sum(int a);        // n x 1
  int sum_all(int a);        // 1 x 1
  int mean_all(int a);       // 1 x 1
  int col_mean(int a);       // 1 x c
  int row_softmax(int a);
  int row_logsumexp(int a);  // n x 1, max-subtracted
  int diag_as_col(int a);    // n x 1 from square matrix
  int l2_normalize_rows(int a, real eps = real(1e-12));
  int layer_norm(int a, int gain, int bias, real eps = real(1e-5));
  // Column-wise batch normalization. In training mode uses batch statistics
  // and (optionally) updates the running buffers in place; in inference mode
  // uses the running buffers and is batch-independent.
  int batch_norm(int a, int gain, int bias, Mat* running_mean, Mat* running_var,
                 bool training, real momentum = real(0.1),
                 real eps = real(1e-5), bool update_running = true);
  int apply_mask(int a, Mat mask);  // elementwise product with a constant mask
  // Fused multi-head cross attention (softmax(QK^T/sqrt(d_h))V per head,
  // heads concatenated, output-projected). One node; hand-derived backward.
  int cross_attention(int q_in, int k_in, int v_in, int wq, int wk, int wv,
                      int wo, int heads);
  // Numerically stable mean binary cross entropy on logits; targets constant.
  int bce_with_logits_mean(int logits, Mat targets);

  void backward(int loss_id);

  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const { return nodes_[id].grad; }
  GradMap param_grads() const;
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void()> back;
    bool needs_grad = false;
  };

  int make(Mat v, bool needs_grad, std::function<void()> back = nullptr);
  bool any_grad(const std::vector<int>& ids) const;
  void accum(int id, const Mat& g);

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int>> param_nodes_;
};

struct FdProbe {
  std::string path;
  Eigen::Index index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct FdReport {
  double max_rel_err = 0;
  double tol = 0;
  bool pass = false;
  std::vector<FdProbe> probes;
};

/// loss_fn must be deterministic across calls (fix any rng seeds inside) and
/// fill `grads_out` when non-null.
using LossWithGrad = std::function<real(ParamStore&, GradMap*)>;

FdReport finite_difference_check(const LossWithGrad& loss_fn, ParamStore& store,
                                 int n_probes, double h, double tol,
                                 std::uint64_t seed);

// Checkpoint container: CKPT magic, key=value meta block, then named f32
// tensors in sorted order. Optimizer state is never written.
void write_checkpoint(const std::filesystem::path& path, const KvMap& meta,
                      const std::map<std::string, Mat>& tensors);
std::pair<KvMap, std::map<std::string, Mat>> read_checkpoint(
    const std::filesystem::path& path);

// Global deterministic mode: when set, training refuses entropy-based seeding
// and all reductions stay single-threaded and order-stable.
void set_deterministic_mode(bool on);
bool deterministic_mode();

// Glorot-uniform init, the default for all weight matrices in this project.
Mat glorot_init(Eigen::Index rows, Eigen::Index cols, RngStream& rng);

}  // namespace spacrd::diffcore
