#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "motok/errors.hpp"
#include "motok/rng.hpp"

namespace motok {

class Tensor;

// One node of the gradient tape. Values are 32-bit floats, row-major.
// Nodes are immutable once produced by an op; a tape (the graph hanging off a
// loss node) is confined to one thread. Leaves may be mutated between steps
// by the optimizer / EMA updates, which require exclusive access.
struct TensorNode {
    std::vector<int> shape;
    std::shared_ptr<std::vector<float>> values;
    std::vector<float> grad; // allocated lazily during backward
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(TensorNode&)> backward;

    int64_t numel() const {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    void ensure_grad() {
        if (grad.size() != static_cast<size_t>(numel())) grad.assign(numel(), 0.0f);
    }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<float> values,
                       bool requires_grad = false);
    static Tensor scalar(float value);
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                        bool requires_grad = false);
    static Tensor randu(std::vector<int> shape, Rng& rng, float lo, float hi,
                        bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[i]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }
    bool requires_grad() const { return n_->requires_grad; }

    std::span<const float> values() const { return {n_->values->data(), n_->values->size()}; }
    // Leaf mutation only (optimizer, EMA, test setup).
    std::span<float> mutable_values() { return {n_->values->data(), n_->values->size()}; }
    std::span<const float> grad() const { return {n_->grad.data(), n_->grad.size()}; }
    float grad_at(int64_t i) const {
        return n_->grad.empty() ? 0.0f : n_->grad[static_cast<size_t>(i)];
    }
    float item() const;
    void zero_grad() { n_->grad.clear(); }

    TensorNode* node() const { return n_.get(); }
    std::shared_ptr<TensorNode> handle() const { return n_; }

  private:
    std::shared_ptr<TensorNode> n_;
};

bool grad_enabled();
void set_grad_enabled(bool on);
struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Reverse-mode sweep from a scalar root. Each reachable node's backward runs
// exactly once, in reverse topological order. Leaves that do not participate
// keep zero (absent) gradients.
void backward(const Tensor& root);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor exp_elem(const Tensor& a);
Tensor log_elem(const Tensor& a);
Tensor abs_elem(const Tensor& a);
Tensor square(const Tensor& a);

// ---- broadcast over the last axis: x [.., d] (op) v [d] ----
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
Tensor div_rowvec(const Tensor& x, const Tensor& v);
// x [n,d] with per-row scale s [n]
Tensor scale_rows(const Tensor& x, const Tensor& s);

// ---- linear algebra ----
// a: [M,K] or [B,M,K]; b: [K,N]. Batched lhs is flattened row-blockwise.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// ---- reductions (accumulated in double, stored as f32 scalar) ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_abs(const Tensor& a); // L1
Tensor sum_sq(const Tensor& a);  // squared L2
Tensor mean_axis0(const Tensor& x); // [n,d] -> [d]
Tensor var_axis0(const Tensor& x);  // biased (divisor n)

// ---- shape ----
Tensor view(const Tensor& x, std::vector<int> shape); // shares storage
Tensor concat_rows(const std::vector<Tensor>& parts); // [ni,d] -> [sum ni, d]
Tensor slice_rows(const Tensor& x, int begin, int count);

// ---- indexing ----
Tensor gather_rows(const Tensor& table, std::vector<int> idx); // [V,d],[n] -> [n,d]
Tensor scatter_add_rows(const Tensor& base, std::vector<int> idx, const Tensor& rows);

// ---- nonlinear blocks ----
Tensor softmax_last(const Tensor& x);
// -log softmax(logits)[target]; logits [V], V >= 2.
Tensor softmax_cross_entropy(const Tensor& logits, int target);
// Mean CE over rows with mask[i] > 0; logits [N,V].
Tensor ce_mean(const Tensor& logits, const std::vector<int>& targets,
               const std::vector<float>& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
// Inverted dropout; identity when rate == 0. Caller supplies the stream.
Tensor dropout(const Tensor& x, float rate, Rng& rng);
// Identity forward, zero backward (sg[.]).
Tensor stop_gradient(const Tensor& x);

// x [B,T,Ci], w [Co,k,Ci] (k odd), bias [Co]; stride 1, zero-padded same length.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias);

// Relative-position causal attention over projected q/k/v.
//   score(i,j) = (q_i.k_j + q_i.r_off + u.k_j + v.r_off) / sqrt(d_head)
// with off = min(q_pos[i]-k_pos[j], R). Key j is visible to query i iff
// k_pos[j] <= q_pos[i] and, when window > 0, q_pos[i]-k_pos[j] < window;
// a key at global position 0 (the condition slot) is always visible.
struct RelAttentionArgs {
    int heads = 1;
    int window = 0; // 0 = unbounded
    std::vector<int> q_pos;
    std::vector<int> k_pos;
};
Tensor rel_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& rel,
                     const Tensor& u, const Tensor& vbias, const RelAttentionArgs& args);

// Max over params/coords of |analytic - central diff| / (|central diff| + 1e-8).
double check_gradients(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                       float eps);

namespace detail {

inline float gelu_scalar(float x) {
    constexpr float k0 = 0.7978845608028654f; // sqrt(2/pi)
    constexpr float k1 = 0.044715f;
    const float t = std::tanh(k0 * (x + k1 * x * x * x));
    return 0.5f * x * (1.0f + t);
}

// One layer-norm row; shared by the tape op and the incremental decoder so
// both paths round identically. Returns {mean(float), inv_std}.
inline std::pair<float, float> layer_norm_row(const float* x, int d, const float* g,
                                              const float* b, float eps, float* y) {
    double m = 0.0;
    for (int i = 0; i < d; ++i) m += x[i];
    m /= d;
    double v = 0.0;
    for (int i = 0; i < d; ++i) {
        const double dv = x[i] - m;
        v += dv * dv;
    }
    v /= d;
    const float istd = static_cast<float>(1.0 / std::sqrt(v + eps));
    const float mf = static_cast<float>(m);
    for (int i = 0; i < d; ++i) y[i] = (x[i] - mf) * istd * g[i] + b[i];
    return {mf, istd};
}

// Hand-reassociated dot: eight independent accumulators, fixed order.
inline float dot(const float* x, const float* y, int n) {
    float s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
        s4 += x[i + 4] * y[i + 4];
        s5 += x[i + 5] * y[i + 5];
        s6 += x[i + 6] * y[i + 6];
        s7 += x[i + 7] * y[i + 7];
    }
    float s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

inline void axpy(float a, const float* x, float* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

// c[M,N] = a[M,K] * b[K,N]
void sgemm_nn(const float* a, const float* b, float* c, int M, int K, int N);
// c[M,N] += a[M,K] * b[N,K]^T
void sgemm_nt_acc(const float* a, const float* b, float* c, int M, int K, int N);
// c[K,N] += a[M,K]^T * b[M,N]
void sgemm_tn_acc(const float* a, const float* b, float* c, int M, int K, int N);

} // namespace detail

} // namespace motok
