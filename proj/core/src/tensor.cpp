#include "motok/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace motok {

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
        if (e < 0) throw DimensionError("negative extent in shape");
        n *= e;
    }
    return n;
}

std::shared_ptr<TensorNode> make_leaf(std::vector<int> shape, std::vector<float> values,
                                      bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
        throw DimensionError("tensor data length does not match shape");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::make_shared<std::vector<float>>(std::move(values));
    n->requires_grad = requires_grad;
    return n;
}

bool any_requires_grad(const std::vector<Tensor>& parents) {
    for (const auto& p : parents)
        if (p.requires_grad()) return true;
    return false;
}

Tensor make_op(std::vector<int> shape, std::vector<float> values, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> bwd) {
    auto n = make_leaf(std::move(shape), std::move(values), false);
    if (g_grad_enabled && any_requires_grad(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(bwd);
    }
    return Tensor(std::move(n));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) throw DimensionError(std::string(op) + ": shape mismatch");
}

float* grad_of(const Tensor& t) {
    t.node()->ensure_grad();
    return t.node()->grad.data();
}

} // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<float>(n, 0.0f), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<float>(n, value), requires_grad));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(float value) { return from({1}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
    auto n = shape_numel(shape);
    std::vector<float> v(n);
    for (auto& x : v) x = rng.gauss() * stddev;
    return Tensor(make_leaf(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::randu(std::vector<int> shape, Rng& rng, float lo, float hi, bool requires_grad) {
    auto n = shape_numel(shape);
    std::vector<float> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(make_leaf(std::move(shape), std::move(v), requires_grad));
}

float Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() on non-scalar tensor");
    return (*n_->values)[0];
}

void backward(const Tensor& root) {
    if (root.numel() != 1) throw ContractError("backward: root must be scalar");
    if (!root.requires_grad()) return;

    // iterative post-order DFS
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* p = node->parents[next].node();
            ++next;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad();
    root.node()->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---------------- elementwise ----------------

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_factor, const char* /*name*/) {
    const auto& av = a.values();
    std::vector<float> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return make_op(a.shape(), std::move(out), {a}, [bwd_factor](TensorNode& o) {
        const Tensor& pa = o.parents[0];
        if (!pa.requires_grad()) return;
        float* ga = grad_of(pa);
        const float* x = pa.values().data();
        const float* y = o.values->data();
        for (size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * bwd_factor(x[i], y[i]);
    });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const auto va = a.values();
    const auto vb = b.values();
    std::vector<float> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& o) {
        for (int p = 0; p < 2; ++p) {
            const Tensor& t = o.parents[p];
            if (!t.requires_grad()) continue;
            float* g = grad_of(t);
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const auto va = a.values();
    const auto vb = b.values();
    std::vector<float> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] - vb[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& o) {
        if (o.parents[0].requires_grad()) {
            float* g = grad_of(o.parents[0]);
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (o.parents[1].requires_grad()) {
            float* g = grad_of(o.parents[1]);
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const auto va = a.values();
    const auto vb = b.values();
    std::vector<float> out(va.size());
    for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& o) {
        const Tensor& a2 = o.parents[0];
        const Tensor& b2 = o.parents[1];
        if (a2.requires_grad()) {
            float* g = grad_of(a2);
            const float* vb2 = b2.values().data();
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * vb2[i];
        }
        if (b2.requires_grad()) {
            float* g = grad_of(b2);
            const float* va2 = a2.values().data();
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * va2[i];
        }
    });
}

Tensor neg(const Tensor& a) {
    return unary_op(
        a, [](float x) { return -x; }, [](float, float) { return -1.0f; }, "neg");
}

Tensor add_scalar(const Tensor& a, float s) {
    return unary_op(
        a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; }, "add_scalar");
}

Tensor mul_scalar(const Tensor& a, float s) {
    return unary_op(
        a, [s](float x) { return x * s; }, [s](float, float) { return s; }, "mul_scalar");
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](float x) { return x > 0.0f ? x : 0.0f; },
        [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; }, "relu");
}

Tensor gelu(const Tensor& a) {
    // tanh approximation; forward shared with the incremental decoder path
    return unary_op(
        a, [](float x) { return detail::gelu_scalar(x); },
        [](float x, float) {
            constexpr float k0 = 0.7978845608028654f;
            constexpr float k1 = 0.044715f;
            float u = k0 * (x + k1 * x * x * x);
            float t = std::tanh(u);
            float du = k0 * (1.0f + 3.0f * k1 * x * x);
            return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
        },
        "gelu");
}

Tensor exp_elem(const Tensor& a) {
    return unary_op(
        a, [](float x) { return std::exp(x); }, [](float, float y) { return y; }, "exp");
}

Tensor log_elem(const Tensor& a) {
    return unary_op(
        a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; }, "log");
}

Tensor abs_elem(const Tensor& a) {
    return unary_op(
        a, [](float x) { return std::fabs(x); },
        [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); }, "abs");
}

Tensor square(const Tensor& a) {
    return unary_op(
        a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; }, "square");
}

// ---------------- last-axis broadcasts ----------------

namespace {

enum class RowVecOp { Add, Mul, Div };

Tensor rowvec_op(const Tensor& x, const Tensor& v, RowVecOp op) {
    if (v.rank() != 1) throw DimensionError("rowvec op: v must be rank 1");
    const int d = v.dim(0);
    if (x.rank() < 1 || x.shape().back() != d)
        throw DimensionError("rowvec op: last extent of x must match v");
    const auto xv = x.values();
    const auto vv = v.values();
    std::vector<float> out(xv.size());
    const size_t rows = xv.size() / d;
    for (size_t r = 0; r < rows; ++r) {
        const float* xr = xv.data() + r * d;
        float* yr = out.data() + r * d;
        switch (op) {
            case RowVecOp::Add:
                for (int i = 0; i < d; ++i) yr[i] = xr[i] + vv[i];
                break;
            case RowVecOp::Mul:
                for (int i = 0; i < d; ++i) yr[i] = xr[i] * vv[i];
                break;
            case RowVecOp::Div:
                for (int i = 0; i < d; ++i) yr[i] = xr[i] / vv[i];
                break;
        }
    }
    return make_op(x.shape(), std::move(out), {x, v}, [op, d, rows](TensorNode& o) {
        const Tensor& px = o.parents[0];
        const Tensor& pv = o.parents[1];
        const float* vv2 = pv.values().data();
        const float* xv2 = px.values().data();
        if (px.requires_grad()) {
            float* gx = grad_of(px);
            for (size_t r = 0; r < rows; ++r) {
                const float* go = o.grad.data() + r * d;
                float* gr = gx + r * d;
                switch (op) {
                    case RowVecOp::Add:
                        for (int i = 0; i < d; ++i) gr[i] += go[i];
                        break;
                    case RowVecOp::Mul:
                        for (int i = 0; i < d; ++i) gr[i] += go[i] * vv2[i];
                        break;
                    case RowVecOp::Div:
                        for (int i = 0; i < d; ++i) gr[i] += go[i] / vv2[i];
                        break;
                }
            }
        }
        if (pv.requires_grad()) {
            float* gv = grad_of(pv);
            for (size_t r = 0; r < rows; ++r) {
                const float* go = o.grad.data() + r * d;
                const float* xr = xv2 + r * d;
                switch (op) {
                    case RowVecOp::Add:
                        for (int i = 0; i < d; ++i) gv[i] += go[i];
                        break;
                    case RowVecOp::Mul:
                        for (int i = 0; i < d; ++i) gv[i] += go[i] * xr[i];
                        break;
                    case RowVecOp::Div:
                        for (int i = 0; i < d; ++i) gv[i] -= go[i] * xr[i] / (vv2[i] * vv2[i]);
                        break;
                }
            }
        }
    });
}

} // namespace

Tensor add_rowvec(const Tensor& x, const Tensor& v) { return rowvec_op(x, v, RowVecOp::Add); }
Tensor mul_rowvec(const Tensor& x, const Tensor& v) { return rowvec_op(x, v, RowVecOp::Mul); }
Tensor div_rowvec(const Tensor& x, const Tensor& v) { return rowvec_op(x, v, RowVecOp::Div); }

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0))
        throw DimensionError("scale_rows: x must be [n,d], s must be [n]");
    const int n = x.dim(0), d = x.dim(1);
    const auto xv = x.values();
    const auto sv = s.values();
    std::vector<float> out(xv.size());
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c)
            out[static_cast<size_t>(r) * d + c] = xv[static_cast<size_t>(r) * d + c] * sv[r];
    return make_op(x.shape(), std::move(out), {x, s}, [n, d](TensorNode& o) {
        const Tensor& px = o.parents[0];
        const Tensor& ps = o.parents[1];
        const float* sv2 = ps.values().data();
        const float* xv2 = px.values().data();
        if (px.requires_grad()) {
            float* g = grad_of(px);
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < d; ++c)
                    g[static_cast<size_t>(r) * d + c] +=
                        o.grad[static_cast<size_t>(r) * d + c] * sv2[r];
        }
        if (ps.requires_grad()) {
            float* g = grad_of(ps);
            for (int r = 0; r < n; ++r)
                g[r] += detail::dot(o.grad.data() + static_cast<size_t>(r) * d,
                                    xv2 + static_cast<size_t>(r) * d, d);
        }
    });
}

// ---------------- gemm kernels ----------------

namespace detail {

void sgemm_nn(const float* a, const float* b, float* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        float* ci = c + static_cast<size_t>(i) * N;
        std::fill(ci, ci + N, 0.0f);
        const float* ai = a + static_cast<size_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            axpy(ai[k], b + static_cast<size_t>(k) * N, ci, N);
        }
    }
}

void sgemm_nt_acc(const float* a, const float* b, float* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const float* ai = a + static_cast<size_t>(i) * K;
        float* ci = c + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) ci[j] += dot(ai, b + static_cast<size_t>(j) * K, K);
    }
}

void sgemm_tn_acc(const float* a, const float* b, float* c, int M, int K, int N) {
    for (int i = 0; i < M; ++i) {
        const float* ai = a + static_cast<size_t>(i) * K;
        const float* bi = b + static_cast<size_t>(i) * N;
        for (int k = 0; k < K; ++k) axpy(ai[k], bi, c + static_cast<size_t>(k) * N, N);
    }
}

} // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (b.rank() != 2) throw DimensionError("matmul: rhs must be rank 2");
    if (a.rank() != 2 && a.rank() != 3) throw DimensionError("matmul: lhs must be rank 2 or 3");
    const int K = a.shape().back();
    if (K != b.dim(0)) throw DimensionError("matmul: inner extents disagree");
    const int N = b.dim(1);
    const int M = static_cast<int>(a.numel() / K);

    std::vector<float> out(static_cast<size_t>(M) * N);
    detail::sgemm_nn(a.values().data(), b.values().data(), out.data(), M, K, N);

    std::vector<int> oshape = a.shape();
    oshape.back() = N;
    return make_op(std::move(oshape), std::move(out), {a, b}, [M, K, N](TensorNode& o) {
        const Tensor& pa = o.parents[0];
        const Tensor& pb = o.parents[1];
        if (pa.requires_grad()) {
            // dA = dC * B^T
            detail::sgemm_nt_acc(o.grad.data(), pb.values().data(), grad_of(pa), M, N, K);
        }
        if (pb.requires_grad()) {
            // dB = A^T * dC
            detail::sgemm_tn_acc(pa.values().data(), o.grad.data(), grad_of(pb), M, K, N);
        }
    });
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose2d: rank 2 required");
    const int R = a.dim(0), C = a.dim(1);
    std::vector<float> out(static_cast<size_t>(R) * C);
    const auto av = a.values();
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) out[static_cast<size_t>(c) * R + r] = av[r * C + c];
    return make_op({C, R}, std::move(out), {a}, [R, C](TensorNode& o) {
        const Tensor& pa = o.parents[0];
        if (!pa.requires_grad()) return;
        float* g = grad_of(pa);
        for (int c = 0; c < C; ++c)
            for (int r = 0; r < R; ++r) g[r * C + c] += o.grad[static_cast<size_t>(c) * R + r];
    });
}

// ---------------- reductions ----------------

namespace {

Tensor reduce_op(const Tensor& a, double init, const std::function<double(double, float)>& acc,
                 std::function<void(TensorNode&, float scale)> bwd, float bwd_scale) {
    double s = init;
    for (float x : a.values()) s = acc(s, x);
    return make_op({1}, {static_cast<float>(s)}, {a},
                   [bwd, bwd_scale](TensorNode& o) { bwd(o, bwd_scale); });
}

} // namespace

Tensor sum_all(const Tensor& a) {
    return reduce_op(
        a, 0.0, [](double s, float x) { return s + x; },
        [](TensorNode& o, float) {
            const Tensor& pa = o.parents[0];
            if (!pa.requires_grad()) return;
            float* g = grad_of(pa);
            const float go = o.grad[0];
            for (int64_t i = 0; i < pa.numel(); ++i) g[i] += go;
        },
        1.0f);
}

Tensor mean_all(const Tensor& a) {
    const float inv = 1.0f / static_cast<float>(a.numel());
    double s = 0.0;
    for (float x : a.values()) s += x;
    s /= static_cast<double>(a.numel());
    return make_op({1}, {static_cast<float>(s)}, {a}, [inv](TensorNode& o) {
        const Tensor& pa = o.parents[0];
        if (!pa.requires_grad()) return;
        float* g = grad_of(pa);
        const float go = o.grad[0] * inv;
        for (int64_t i = 0; i < pa.numel(); ++i) g[i] += go;
    });
}

Tensor sum_abs(const Tensor& a) {
    double s = 0.0;
    for (float x : a.values()) s += std::fabs(x);
    return make_op({1}, {static_cast<float>(s)}, {a}, [](TensorNode& o) {
        const Tensor& pa = o.parents[0];
        if (!pa.requires_grad()) return;
        float* g = grad_of(pa);
        const float* x = pa.values().data();
        const float go = o.grad[0];
        for (int64_t i = 0; i < pa.numel(); ++i)
            g[i] += go * (x[i] > 0.0f ? 1.0f : (x[i] < 0.0f ? -1.0f : 0.0f));
    });
}

Tensor sum_sq(const Tensor& a) {
    double s = 0.0;
    for (float x : a.values()) s += static_cast<double>(x) * x;
    return make_op({1}, {static_cast<float>(s)}, {a}, [](TensorNode& o) {
        const Tensor& pa = o.parents[0];
        if (!pa.requires_grad()) return;
        float* g = grad_of(pa);
        const float* x = pa.values().data();
        const float go = o.grad[0];
        for (int64_t i = 0; i < pa.numel(); ++i) g[i] += go * 2.0f * x[i];
    });
}

Tensor mean_axis0(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("mean_axis0: rank 2 required");
    const int n = x.dim(0), d = x.dim(1);
    if (n < 1) throw ValidationError("mean_axis0: empty axis");
    std::vector<double> acc(d, 0.0);
    const auto xv = x.values();
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) acc[c] += xv[static_cast<size_t>(r) * d + c];
    std::vector<float> out(d);
    for (int c = 0; c < d; ++c) out[c] = static_cast<float>(acc[c] / n);
    return make_op({d}, std::move(out), {x}, [n, d](TensorNode& o) {
        const Tensor& px = o.parents[0];
        if (!px.requires_grad()) return;
        float* g = grad_of(px);
        const float inv = 1.0f / static_cast<float>(n);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c) g[static_cast<size_t>(r) * d + c] += o.grad[c] * inv;
    });
}

Tensor var_axis0(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("var_axis0: rank 2 required");
    const int n = x.dim(0), d = x.dim(1);
    if (n < 1) throw ValidationError("var_axis0: empty axis");
    const auto xv = x.values();
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) mean[c] += xv[static_cast<size_t>(r) * d + c];
    for (int c = 0; c < d; ++c) mean[c] /= n;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) {
            double dv = xv[static_cast<size_t>(r) * d + c] - mean[c];
            var[c] += dv * dv;
        }
    std::vector<float> out(d), mf(d);
    for (int c = 0; c < d; ++c) {
        out[c] = static_cast<float>(var[c] / n);
        mf[c] = static_cast<float>(mean[c]);
    }
    return make_op({d}, std::move(out), {x}, [n, d, mf = std::move(mf)](TensorNode& o) {
        const Tensor& px = o.parents[0];
        if (!px.requires_grad()) return;
        float* g = grad_of(px);
        const float* xv2 = px.values().data();
        const float inv = 2.0f / static_cast<float>(n);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c)
                g[static_cast<size_t>(r) * d + c] +=
                    o.grad[c] * inv * (xv2[static_cast<size_t>(r) * d + c] - mf[c]);
    });
}

// ---------------- shape ----------------

Tensor view(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel()) throw DimensionError("view: numel mismatch");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = x.node()->values; // shared storage
    if (g_grad_enabled && x.requires_grad()) {
        n->requires_grad = true;
        n->parents = {x};
        n->backward = [](TensorNode& o) {
            const Tensor& px = o.parents[0];
            float* g = grad_of(px);
            for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        };
    }
    return Tensor(std::move(n));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValidationError("concat_rows: empty input");
    const int d = parts[0].shape().back();
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != d) throw DimensionError("concat_rows: shape mismatch");
        total += p.dim(0);
    }
    std::vector<float> out;
    out.reserve(static_cast<size_t>(total) * d);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    std::vector<Tensor> parents(parts.begin(), parts.end());
    return make_op({total, d}, std::move(out), std::move(parents), [d](TensorNode& o) {
        size_t off = 0;
        for (auto& p : o.parents) {
            const size_t n = static_cast<size_t>(p.numel());
            if (p.requires_grad()) {
                float* g = grad_of(p);
                for (size_t i = 0; i < n; ++i) g[i] += o.grad[off + i];
            }
            off += n;
        }
        (void)d;
    });
}

Tensor slice_rows(const Tensor& x, int begin, int count) {
    if (x.rank() != 2) throw DimensionError("slice_rows: rank 2 required");
    const int n = x.dim(0), d = x.dim(1);
    if (begin < 0 || count < 0 || begin + count > n) throw IndexError("slice_rows: out of range");
    const auto xv = x.values();
    std::vector<float> out(xv.begin() + static_cast<size_t>(begin) * d,
                           xv.begin() + static_cast<size_t>(begin + count) * d);
    return make_op({count, d}, std::move(out), {x}, [begin, d](TensorNode& o) {
        const Tensor& px = o.parents[0];
        if (!px.requires_grad()) return;
        float* g = grad_of(px) + static_cast<size_t>(begin) * d;
        for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

// ---------------- indexing ----------------

Tensor gather_rows(const Tensor& table, std::vector<int> idx) {
    if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
    const int V = table.dim(0), d = table.dim(1);
    for (int i : idx)
        if (i < 0 || i >= V) throw IndexError("gather_rows: index out of range");
    const int n = static_cast<int>(idx.size());
    std::vector<float> out(static_cast<size_t>(n) * d);
    const auto tv = table.values();
    for (int r = 0; r < n; ++r)
        std::copy_n(tv.data() + static_cast<size_t>(idx[r]) * d, d,
                    out.data() + static_cast<size_t>(r) * d);
    return make_op({n, d}, std::move(out), {table}, [idx = std::move(idx), d](TensorNode& o) {
        const Tensor& pt = o.parents[0];
        if (!pt.requires_grad()) return;
        float* g = grad_of(pt);
        for (size_t r = 0; r < idx.size(); ++r) {
            const float* go = o.grad.data() + r * d;
            float* gr = g + static_cast<size_t>(idx[r]) * d;
            for (int c = 0; c < d; ++c) gr[c] += go[c];
        }
    });
}

Tensor scatter_add_rows(const Tensor& base, std::vector<int> idx, const Tensor& rows) {
    if (base.rank() != 2 || rows.rank() != 2 || base.dim(1) != rows.dim(1))
        throw DimensionError("scatter_add_rows: shape mismatch");
    if (static_cast<int>(idx.size()) != rows.dim(0))
        throw DimensionError("scatter_add_rows: index count mismatch");
    const int V = base.dim(0), d = base.dim(1);
    for (int i : idx)
        if (i < 0 || i >= V) throw IndexError("scatter_add_rows: index out of range");
    std::vector<float> out(base.values().begin(), base.values().end());
    const auto rv = rows.values();
    for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < d; ++c)
            out[static_cast<size_t>(idx[r]) * d + c] += rv[r * d + c];
    return make_op(base.shape(), std::move(out), {base, rows},
                   [idx = std::move(idx), d](TensorNode& o) {
                       const Tensor& pb = o.parents[0];
                       const Tensor& pr = o.parents[1];
                       if (pb.requires_grad()) {
                           float* g = grad_of(pb);
                           for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                       }
                       if (pr.requires_grad()) {
                           float* g = grad_of(pr);
                           for (size_t r = 0; r < idx.size(); ++r)
                               for (int c = 0; c < d; ++c)
                                   g[r * d + c] += o.grad[static_cast<size_t>(idx[r]) * d + c];
                       }
                   });
}

// ---------------- nonlinear blocks ----------------

Tensor softmax_last(const Tensor& x) {
    const int d = x.shape().back();
    const auto xv = x.values();
    const size_t rows = xv.size() / d;
    std::vector<float> out(xv.size());
    for (size_t r = 0; r < rows; ++r) {
        const float* xr = xv.data() + r * d;
        float* yr = out.data() + r * d;
        float mx = xr[0];
        for (int i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
        double z = 0.0;
        for (int i = 0; i < d; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            z += yr[i];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (int i = 0; i < d; ++i) yr[i] *= inv;
    }
    return make_op(x.shape(), std::move(out), {x}, [d, rows](TensorNode& o) {
        const Tensor& px = o.parents[0];
        if (!px.requires_grad()) return;
        float* g = grad_of(px);
        const float* y = o.values->data();
        for (size_t r = 0; r < rows; ++r) {
            const float* yr = y + r * d;
            const float* go = o.grad.data() + r * d;
            float* gr = g + r * d;
            double dotv = 0.0;
            for (int i = 0; i < d; ++i) dotv += static_cast<double>(go[i]) * yr[i];
            for (int i = 0; i < d; ++i)
                gr[i] += yr[i] * (go[i] - static_cast<float>(dotv));
        }
    });
}

namespace {

// shared CE kernel; returns (loss_sum_double, per-row softmax stored flat)
double ce_forward(const float* logits, int N, int V, const int* targets, const float* mask,
                  std::vector<float>& probs) {
    probs.resize(static_cast<size_t>(N) * V);
    double loss = 0.0;
    for (int r = 0; r < N; ++r) {
        if (mask && mask[r] <= 0.0f) continue;
        const float* lr = logits + static_cast<size_t>(r) * V;
        float* pr = probs.data() + static_cast<size_t>(r) * V;
        float mx = lr[0];
        for (int i = 1; i < V; ++i) mx = std::max(mx, lr[i]);
        double z = 0.0;
        for (int i = 0; i < V; ++i) {
            pr[i] = std::exp(lr[i] - mx);
            z += pr[i];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (int i = 0; i < V; ++i) pr[i] *= inv;
        loss += -(static_cast<double>(lr[targets[r]]) - mx - std::log(z));
    }
    return loss;
}

} // namespace

Tensor softmax_cross_entropy(const Tensor& logits, int target) {
    if (logits.rank() != 1) throw DimensionError("softmax_cross_entropy: logits must be rank 1");
    const int V = logits.dim(0);
    if (V < 2) throw ValidationError("softmax_cross_entropy: need at least 2 classes");
    if (target < 0 || target >= V) throw IndexError("softmax_cross_entropy: target out of range");
    std::vector<float> probs;
    const int tgt[1] = {target};
    double loss = ce_forward(logits.values().data(), 1, V, tgt, nullptr, probs);
    return make_op({1}, {static_cast<float>(loss)}, {logits},
                   [probs = std::move(probs), target, V](TensorNode& o) {
                       const Tensor& pl = o.parents[0];
                       if (!pl.requires_grad()) return;
                       float* g = grad_of(pl);
                       const float go = o.grad[0];
                       for (int i = 0; i < V; ++i)
                           g[i] += go * (probs[i] - (i == target ? 1.0f : 0.0f));
                   });
}

Tensor ce_mean(const Tensor& logits, const std::vector<int>& targets,
               const std::vector<float>& mask) {
    if (logits.rank() != 2) throw DimensionError("ce_mean: logits must be rank 2");
    const int N = logits.dim(0), V = logits.dim(1);
    if (V < 2) throw ValidationError("ce_mean: need at least 2 classes");
    if (static_cast<int>(targets.size()) != N || static_cast<int>(mask.size()) != N)
        throw DimensionError("ce_mean: target/mask length mismatch");
    int count = 0;
    for (int r = 0; r < N; ++r) {
        if (mask[r] <= 0.0f) continue;
        if (targets[r] < 0 || targets[r] >= V) throw IndexError("ce_mean: target out of range");
        ++count;
    }
    if (count == 0) throw ValidationError("ce_mean: no unmasked positions");
    std::vector<float> probs;
    double loss =
        ce_forward(logits.values().data(), N, V, targets.data(), mask.data(), probs) / count;
    return make_op({1}, {static_cast<float>(loss)}, {logits},
                   [probs = std::move(probs), targets, mask, N, V, count](TensorNode& o) {
                       const Tensor& pl = o.parents[0];
                       if (!pl.requires_grad()) return;
                       float* g = grad_of(pl);
                       const float go = o.grad[0] / static_cast<float>(count);
                       for (int r = 0; r < N; ++r) {
                           if (mask[r] <= 0.0f) continue;
                           const float* pr = probs.data() + static_cast<size_t>(r) * V;
                           float* gr = g + static_cast<size_t>(r) * V;
                           for (int i = 0; i < V; ++i)
                               gr[i] += go * (pr[i] - (i == targets[r] ? 1.0f : 0.0f));
                       }
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const int d = x.shape().back();
    if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d)
        throw DimensionError("layer_norm: gamma/beta must be [d]");
    const auto xv = x.values();
    const size_t rows = xv.size() / d;
    std::vector<float> out(xv.size());
    std::vector<float> inv_std(rows), mean(rows);
    const float* gv = gamma.values().data();
    const float* bv = beta.values().data();
    for (size_t r = 0; r < rows; ++r) {
        const auto [mf, istd] =
            detail::layer_norm_row(xv.data() + r * d, d, gv, bv, eps, out.data() + r * d);
        mean[r] = mf;
        inv_std[r] = istd;
    }
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [d, rows, mean = std::move(mean), inv_std = std::move(inv_std)](TensorNode& o) {
                       const Tensor& px = o.parents[0];
                       const Tensor& pg = o.parents[1];
                       const Tensor& pb = o.parents[2];
                       const float* xv2 = px.values().data();
                       const float* gv2 = pg.values().data();
                       float* gx = px.requires_grad() ? grad_of(px) : nullptr;
                       float* gg = pg.requires_grad() ? grad_of(pg) : nullptr;
                       float* gb = pb.requires_grad() ? grad_of(pb) : nullptr;
                       for (size_t r = 0; r < rows; ++r) {
                           const float* xr = xv2 + r * d;
                           const float* go = o.grad.data() + r * d;
                           const float istd = inv_std[r];
                           const float mu = mean[r];
                           // xhat_i = (x_i - mu) * istd
                           double sum_gy = 0.0, sum_gy_xhat = 0.0;
                           for (int i = 0; i < d; ++i) {
                               const float xhat = (xr[i] - mu) * istd;
                               const float gy = go[i] * gv2[i];
                               sum_gy += gy;
                               sum_gy_xhat += static_cast<double>(gy) * xhat;
                               if (gg) gg[i] += go[i] * xhat;
                               if (gb) gb[i] += go[i];
                           }
                           if (gx) {
                               float* gxr = gx + r * d;
                               const float a = static_cast<float>(sum_gy / d);
                               const float b2 = static_cast<float>(sum_gy_xhat / d);
                               for (int i = 0; i < d; ++i) {
                                   const float xhat = (xr[i] - mu) * istd;
                                   const float gy = go[i] * gv2[i];
                                   gxr[i] += istd * (gy - a - xhat * b2);
                               }
                           }
                       }
                   });
}

Tensor dropout(const Tensor& x, float rate, Rng& rng) {
    if (rate < 0.0f || rate >= 1.0f) throw ValidationError("dropout: rate must be in [0,1)");
    if (rate == 0.0f) return x;
    const float keep = 1.0f - rate;
    const float scale = 1.0f / keep;
    const auto xv = x.values();
    std::vector<float> mask(xv.size());
    std::vector<float> out(xv.size());
    for (size_t i = 0; i < xv.size(); ++i) {
        mask[i] = rng.next_float() < rate ? 0.0f : scale;
        out[i] = xv[i] * mask[i];
    }
    return make_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](TensorNode& o) {
        const Tensor& px = o.parents[0];
        if (!px.requires_grad()) return;
        float* g = grad_of(px);
        for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * mask[i];
    });
}

Tensor stop_gradient(const Tensor& x) {
    auto n = std::make_shared<TensorNode>();
    n->shape = x.shape();
    n->values = x.node()->values; // identity forward, shared storage
    n->requires_grad = false;
    return Tensor(std::move(n));
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias) {
    if (x.rank() != 3) throw DimensionError("conv1d: x must be [B,T,Ci]");
    if (w.rank() != 3) throw DimensionError("conv1d: w must be [Co,k,Ci]");
    const int B = x.dim(0), T = x.dim(1), Ci = x.dim(2);
    const int Co = w.dim(0), K = w.dim(1);
    if (w.dim(2) != Ci) throw DimensionError("conv1d: channel mismatch");
    if (K % 2 == 0) throw DimensionError("conv1d: kernel must be odd");
    if (bias.rank() != 1 || bias.dim(0) != Co) throw DimensionError("conv1d: bias must be [Co]");
    const int R = K / 2;
    const auto xv = x.values();
    const auto wv = w.values();
    const auto bv = bias.values();
    std::vector<float> out(static_cast<size_t>(B) * T * Co);
    for (int b = 0; b < B; ++b) {
        const float* xb = xv.data() + static_cast<size_t>(b) * T * Ci;
        float* yb = out.data() + static_cast<size_t>(b) * T * Co;
        for (int t = 0; t < T; ++t) {
            float* yt = yb + static_cast<size_t>(t) * Co;
            for (int co = 0; co < Co; ++co) {
                const float* wc = wv.data() + static_cast<size_t>(co) * K * Ci;
                float acc = bv[co];
                for (int dk = 0; dk < K; ++dk) {
                    const int src = t + dk - R;
                    if (src < 0 || src >= T) continue;
                    acc += detail::dot(wc + static_cast<size_t>(dk) * Ci,
                                       xb + static_cast<size_t>(src) * Ci, Ci);
                }
                yt[co] = acc;
            }
        }
    }
    return make_op({B, T, Co}, std::move(out), {x, w, bias}, [B, T, Ci, Co, K, R](TensorNode& o) {
        const Tensor& px = o.parents[0];
        const Tensor& pw = o.parents[1];
        const Tensor& pb = o.parents[2];
        const float* xv2 = px.values().data();
        const float* wv2 = pw.values().data();
        float* gx = px.requires_grad() ? grad_of(px) : nullptr;
        float* gw = pw.requires_grad() ? grad_of(pw) : nullptr;
        float* gb = pb.requires_grad() ? grad_of(pb) : nullptr;
        for (int b = 0; b < B; ++b) {
            const float* xb = xv2 + static_cast<size_t>(b) * T * Ci;
            const float* gob = o.grad.data() + static_cast<size_t>(b) * T * Co;
            float* gxb = gx ? gx + static_cast<size_t>(b) * T * Ci : nullptr;
            for (int t = 0; t < T; ++t) {
                const float* got = gob + static_cast<size_t>(t) * Co;
                for (int co = 0; co < Co; ++co) {
                    const float g = got[co];
                    if (g == 0.0f) continue;
                    if (gb) gb[co] += g;
                    const float* wc = wv2 + static_cast<size_t>(co) * K * Ci;
                    float* gwc = gw ? gw + static_cast<size_t>(co) * K * Ci : nullptr;
                    for (int dk = 0; dk < K; ++dk) {
                        const int src = t + dk - R;
                        if (src < 0 || src >= T) continue;
                        if (gxb)
                            detail::axpy(g, wc + static_cast<size_t>(dk) * Ci,
                                         gxb + static_cast<size_t>(src) * Ci, Ci);
                        if (gwc)
                            detail::axpy(g, xb + static_cast<size_t>(src) * Ci,
                                         gwc + static_cast<size_t>(dk) * Ci, Ci);
                    }
                }
            }
        }
    });
}

Tensor rel_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& rel,
                     const Tensor& u, const Tensor& vbias, const RelAttentionArgs& args) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
        throw DimensionError("rel_attention: q/k/v must be [B,n,d]");
    const int B = q.dim(0), nq = q.dim(1), d = q.dim(2);
    const int nk = k.dim(1);
    if (k.dim(0) != B || v.dim(0) != B || k.dim(2) != d || v.dim(2) != d || v.dim(1) != nk)
        throw DimensionError("rel_attention: k/v shape mismatch");
    const int H = args.heads;
    if (H < 1 || d % H != 0) throw DimensionError("rel_attention: heads must divide d");
    if (static_cast<int>(args.q_pos.size()) != nq || static_cast<int>(args.k_pos.size()) != nk)
        throw DimensionError("rel_attention: position array mismatch");
    if (rel.rank() != 2 || rel.dim(1) != d) throw DimensionError("rel_attention: rel must be [R+1,d]");
    if (u.rank() != 1 || u.dim(0) != d || vbias.rank() != 1 || vbias.dim(0) != d)
        throw DimensionError("rel_attention: u/v must be [d]");
    const int Rmax = rel.dim(0) - 1;
    const int dh = d / H;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    const auto qv = q.values();
    const auto kv = k.values();
    const auto vv = v.values();
    const auto rv = rel.values();
    const auto uv = u.values();
    const auto bv = vbias.values();

    auto visible = [&](int i, int j) {
        const int qp = args.q_pos[i], kp = args.k_pos[j];
        if (kp > qp) return false;
        if (kp == 0) return true; // pinned condition slot
        if (args.window > 0 && qp - kp >= args.window) return false;
        return true;
    };
    auto offset_of = [&](int i, int j) { return std::min(args.q_pos[i] - args.k_pos[j], Rmax); };

    // probabilities kept for backward: [B][H][nq*nk]
    auto probs = std::make_shared<std::vector<float>>(
        static_cast<size_t>(B) * H * nq * nk, 0.0f);
    std::vector<float> out(static_cast<size_t>(B) * nq * d, 0.0f);

    for (int b = 0; b < B; ++b) {
        const float* qb = qv.data() + static_cast<size_t>(b) * nq * d;
        const float* kb = kv.data() + static_cast<size_t>(b) * nk * d;
        const float* vb = vv.data() + static_cast<size_t>(b) * nk * d;
        float* ob = out.data() + static_cast<size_t>(b) * nq * d;
        for (int h = 0; h < H; ++h) {
            const int ho = h * dh;
            float* pb = probs->data() + (static_cast<size_t>(b) * H + h) * nq * nk;
            std::vector<float> row(nk);
            for (int i = 0; i < nq; ++i) {
                const float* qi = qb + static_cast<size_t>(i) * d + ho;
                float mx = -std::numeric_limits<float>::infinity();
                int nvis = 0;
                for (int j = 0; j < nk; ++j) {
                    if (!visible(i, j)) continue;
                    const float* kj = kb + static_cast<size_t>(j) * d + ho;
                    const float* ro = rv.data() + static_cast<size_t>(offset_of(i, j)) * d + ho;
                    float s = detail::dot(qi, kj, dh) + detail::dot(qi, ro, dh) +
                              detail::dot(uv.data() + ho, kj, dh) +
                              detail::dot(bv.data() + ho, ro, dh);
                    s *= scale;
                    row[j] = s;
                    mx = std::max(mx, s);
                    ++nvis;
                }
                if (nvis == 0) continue; // row stays zero (no visible keys)
                double z = 0.0;
                for (int j = 0; j < nk; ++j) {
                    if (!visible(i, j)) continue;
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                const float inv = static_cast<float>(1.0 / z);
                float* oi = ob + static_cast<size_t>(i) * d + ho;
                float* pi = pb + static_cast<size_t>(i) * nk;
                for (int j = 0; j < nk; ++j) {
                    if (!visible(i, j)) continue;
                    const float p = row[j] * inv;
                    pi[j] = p;
                    detail::axpy(p, vb + static_cast<size_t>(j) * d + ho, oi, dh);
                }
            }
        }
    }

    RelAttentionArgs cap = args;
    return make_op(
        {B, nq, d}, std::move(out), {q, k, v, rel, u, vbias},
        [B, nq, nk, d, H, dh, Rmax, scale, cap = std::move(cap), probs](TensorNode& o) {
            const Tensor& pq = o.parents[0];
            const Tensor& pk = o.parents[1];
            const Tensor& pv = o.parents[2];
            const Tensor& prl = o.parents[3];
            const Tensor& pu = o.parents[4];
            const Tensor& pvb = o.parents[5];
            const float* qv2 = pq.values().data();
            const float* kv2 = pk.values().data();
            const float* vv2 = pv.values().data();
            const float* rv2 = prl.values().data();
            const float* uv2 = pu.values().data();
            const float* bv2 = pvb.values().data();
            float* gq = pq.requires_grad() ? grad_of(pq) : nullptr;
            float* gk = pk.requires_grad() ? grad_of(pk) : nullptr;
            float* gv = pv.requires_grad() ? grad_of(pv) : nullptr;
            float* gr = prl.requires_grad() ? grad_of(prl) : nullptr;
            float* gu = pu.requires_grad() ? grad_of(pu) : nullptr;
            float* gb = pvb.requires_grad() ? grad_of(pvb) : nullptr;

            auto visible = [&](int i, int j) {
                const int qp = cap.q_pos[i], kp = cap.k_pos[j];
                if (kp > qp) return false;
                if (kp == 0) return true;
                if (cap.window > 0 && qp - kp >= cap.window) return false;
                return true;
            };
            auto offset_of = [&](int i, int j) {
                return std::min(cap.q_pos[i] - cap.k_pos[j], Rmax);
            };

            std::vector<float> dp(nk);
            for (int b = 0; b < B; ++b) {
                const float* qb = qv2 + static_cast<size_t>(b) * nq * d;
                const float* kb = kv2 + static_cast<size_t>(b) * nk * d;
                const float* vb = vv2 + static_cast<size_t>(b) * nk * d;
                const float* gob = o.grad.data() + static_cast<size_t>(b) * nq * d;
                for (int h = 0; h < H; ++h) {
                    const int ho = h * dh;
                    const float* pb = probs->data() + (static_cast<size_t>(b) * H + h) * nq * nk;
                    for (int i = 0; i < nq; ++i) {
                        const float* goi = gob + static_cast<size_t>(i) * d + ho;
                        const float* pi = pb + static_cast<size_t>(i) * nk;
                        const float* qi = qb + static_cast<size_t>(i) * d + ho;
                        double dsum = 0.0;
                        for (int j = 0; j < nk; ++j) {
                            if (!visible(i, j) || pi[j] == 0.0f) {
                                dp[j] = 0.0f;
                                continue;
                            }
                            dp[j] = detail::dot(goi, vb + static_cast<size_t>(j) * d + ho, dh);
                            dsum += static_cast<double>(pi[j]) * dp[j];
                        }
                        for (int j = 0; j < nk; ++j) {
                            if (!visible(i, j) || pi[j] == 0.0f) continue;
                            const float p = pi[j];
                            if (gv) {
                                float* gvj = gv + static_cast<size_t>(b) * nk * d +
                                             static_cast<size_t>(j) * d + ho;
                                detail::axpy(p, goi, gvj, dh);
                            }
                            const float ds = p * (dp[j] - static_cast<float>(dsum)) * scale;
                            if (ds == 0.0f) continue;
                            const float* kj = kb + static_cast<size_t>(j) * d + ho;
                            const float* ro =
                                rv2 + static_cast<size_t>(offset_of(i, j)) * d + ho;
                            if (gq) {
                                float* gqi = gq + static_cast<size_t>(b) * nq * d +
                                             static_cast<size_t>(i) * d + ho;
                                detail::axpy(ds, kj, gqi, dh);
                                detail::axpy(ds, ro, gqi, dh);
                            }
                            if (gk) {
                                float* gkj = gk + static_cast<size_t>(b) * nk * d +
                                             static_cast<size_t>(j) * d + ho;
                                detail::axpy(ds, qi, gkj, dh);
                                detail::axpy(ds, uv2 + ho, gkj, dh);
                            }
                            if (gr) {
                                float* grj =
                                    gr + static_cast<size_t>(offset_of(i, j)) * d + ho;
                                detail::axpy(ds, qi, grj, dh);
                                detail::axpy(ds, bv2 + ho, grj, dh);
                            }
                            if (gu) detail::axpy(ds, kj, gu + ho, dh);
                            if (gb) detail::axpy(ds, ro, gb + ho, dh);
                        }
                    }
                }
            }
        });
}

double check_gradients(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                       float eps) {
    if (eps <= 0.0f) throw ValidationError("check_gradients: eps must be positive");
    for (const auto& p : params) p.node()->grad.clear();
    Tensor out = f();
    if (out.numel() != 1) throw ContractError("check_gradients: f must be scalar-valued");
    backward(out);

    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        std::vector<float> g(p.numel(), 0.0f);
        if (!p.node()->grad.empty()) g.assign(p.node()->grad.begin(), p.node()->grad.end());
        analytic.push_back(std::move(g));
    }

    double max_rel = 0.0;
    NoGradGuard ng;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        auto vals = p.mutable_values();
        for (int64_t c = 0; c < p.numel(); ++c) {
            const float orig = vals[c];
            vals[c] = orig + eps;
            const double fp = f().item();
            vals[c] = orig - eps;
            const double fm = f().item();
            vals[c] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("check_gradients: non-finite function value");
            const double num = (fp - fm) / (2.0 * static_cast<double>(eps));
            const double ana = analytic[pi][c];
            if (!std::isfinite(ana)) throw NumericError("check_gradients: non-finite gradient");
            const double rel = std::fabs(ana - num) / (std::fabs(num) + 1e-8);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace motok
