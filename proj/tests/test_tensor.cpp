#include <doctest.h>

#include <cmath>
#include <vector>

#include "motok/tensor.hpp"

using namespace motok;

namespace {

// coarse grid keeps float32 arithmetic exact for quadratic checks
float snap(float v) { return std::round(v * 4.0f) / 4.0f; }

Tensor grid_randn(std::vector<int> shape, Rng& rng, bool rq = true) {
    Tensor t = Tensor::randn(shape, rng, 1.0f, rq);
    for (auto& v : t.mutable_values()) v = snap(v);
    return t;
}

// Central-difference check tolerant of the f32 noise floor: coordinates whose
// difference quotient is resolvable must agree relatively; the rest must
// agree absolutely. A wrong backward term shows up as a large absolute error.
void check_grad_hybrid(const std::function<Tensor()>& f, std::vector<Tensor> params, float eps,
                       double rel_tol = 1e-3, double abs_floor = 2e-5) {
    for (auto& p : params) p.zero_grad();
    backward(f());
    std::vector<std::vector<float>> ana;
    for (auto& p : params) {
        std::vector<float> g(p.numel(), 0.0f);
        if (!p.node()->grad.empty()) g.assign(p.node()->grad.begin(), p.node()->grad.end());
        ana.push_back(std::move(g));
    }
    NoGradGuard ng;
    double worst_rel = 0, worst_abs = 0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto vals = params[pi].mutable_values();
        for (int64_t c = 0; c < params[pi].numel(); ++c) {
            const float orig = vals[c];
            vals[c] = orig + eps;
            const double fp = f().item();
            vals[c] = orig - eps;
            const double fm = f().item();
            vals[c] = orig;
            const double num = (fp - fm) / (2.0 * eps);
            const double ad = std::fabs(ana[pi][c] - num);
            const double rel = ad / (std::fabs(num) + 1e-8);
            if (rel >= rel_tol) worst_abs = std::max(worst_abs, ad);
            else worst_rel = std::max(worst_rel, rel);
        }
    }
    INFO("worst_abs=", worst_abs, " worst_rel=", worst_rel);
    CHECK(worst_abs < abs_floor);
    CHECK(worst_rel < rel_tol);
}

} // namespace

TEST_CASE("matmul identity and zero cases") {
    Tensor I = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor A = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor r = matmul(I, A);
    CHECK(r.values()[0] == 1.0f);
    CHECK(r.values()[1] == 2.0f);
    CHECK(r.values()[2] == 3.0f);
    CHECK(r.values()[3] == 4.0f);

    Tensor Z = Tensor::zeros({2, 2});
    Tensor rz = matmul(Z, A);
    for (float v : rz.values()) CHECK(v == 0.0f);
}

TEST_CASE("matmul matches triple-loop reference") {
    Rng rng(42);
    Tensor a = Tensor::randn({3, 4}, rng);
    Tensor b = Tensor::randn({4, 2}, rng);
    Tensor c = matmul(a, b);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k)
                acc += static_cast<double>(a.values()[i * 4 + k]) * b.values()[k * 2 + j];
            CHECK(std::fabs(c.values()[i * 2 + j] - acc) < 1e-5);
        }
}

TEST_CASE("matmul shape mismatch raises a dimension error") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("softmax cross entropy examples") {
    // uniform logits over 8192 classes
    Tensor uniform = Tensor::zeros({8192});
    CHECK(softmax_cross_entropy(uniform, 17).item() == doctest::Approx(std::log(8192.0)).epsilon(1e-4));

    // saturated case: +50 margin on the target
    Tensor sat = Tensor::zeros({16});
    sat.mutable_values()[3] = 50.0f;
    CHECK(softmax_cross_entropy(sat, 3).item() < 1e-6);

    // direct formula oracle
    Tensor l = Tensor::from({3}, {1.0f, 2.0f, 3.0f});
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    const double expect = -(2.0 - std::log(z));
    CHECK(softmax_cross_entropy(l, 1).item() == doctest::Approx(expect).epsilon(1e-6));

    CHECK_THROWS_AS(softmax_cross_entropy(l, 3), IndexError);
    CHECK_THROWS_AS(softmax_cross_entropy(l, -1), IndexError);
    CHECK_THROWS_AS(softmax_cross_entropy(Tensor::zeros({1}), 0), ValidationError);
}

TEST_CASE("check_gradients on sum of squares is exact on grid points") {
    Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
    double err = check_gradients([&] { return sum_sq(x); }, {x}, 0.5f);
    CHECK(err < 1e-6);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("check_gradients on a constant function returns ~0") {
    Tensor x = Tensor::from({3}, {1, 2, 3}, true);
    Tensor c = Tensor::scalar(5.0f);
    double err = check_gradients([&] { return add(mul_scalar(sum_all(x), 0.0f), sum_all(c)); },
                                 {x}, 0.5f);
    CHECK(err < 1e-6);
}

TEST_CASE("gradient check across the op inventory") {
    Rng rng(7);

    // loss shaping: mean-scale quadratic plus a positive linear probe keeps
    // f ~ O(1) and gradients away from zero
    auto probe_loss = [](const Tensor& y, const Tensor& probe) {
        return add(mean_all(square(y)), mul_scalar(mean_all(mul(y, probe)), 0.5f));
    };

    SUBCASE("elementwise and broadcast, quadratic paths exact") {
        Tensor a = grid_randn({3, 4}, rng);
        Tensor b = grid_randn({3, 4}, rng);
        Tensor v = grid_randn({4}, rng);
        auto f = [&] {
            Tensor t = add(mul(a, b), mul_rowvec(a, v));
            t = sub(t, add_rowvec(b, v));
            return sum_sq(t);
        };
        CHECK(check_gradients(f, {a, b, v}, 0.25f) < 1e-5);
    }

    SUBCASE("relu and abs away from their kinks are exact") {
        Tensor a = grid_randn({4, 4}, rng);
        for (auto& x : a.mutable_values()) x += 0.125f; // min distance 0.125 to the kink
        auto f = [&] { return add(sum_all(relu(a)), sum_abs(a)); };
        CHECK(check_gradients(f, {a}, 0.0625f) < 1e-6);
    }

    SUBCASE("reductions and axis stats (quadratic, exact)") {
        Tensor a = grid_randn({4, 4}, rng);
        Tensor w = grid_randn({4}, rng, false);
        auto f = [&] {
            Tensor t = add(sum_sq(a), mean_all(a));
            t = add(t, sum_all(mul(mean_axis0(a), w)));
            t = add(t, sum_all(mul(var_axis0(a), w)));
            return t;
        };
        CHECK(check_gradients(f, {a}, 0.25f) < 1e-5);
    }

    SUBCASE("matmul and transpose (exact)") {
        Tensor a = grid_randn({3, 4}, rng);
        Tensor b = grid_randn({4, 2}, rng);
        auto f = [&] { return sum_sq(matmul(a, b)); };
        CHECK(check_gradients(f, {a, b}, 0.25f) < 1e-4);
        auto g = [&] { return sum_sq(matmul(transpose2d(b), transpose2d(a))); };
        CHECK(check_gradients(g, {a, b}, 0.25f) < 1e-4);
    }

    SUBCASE("batched matmul lhs (exact)") {
        Tensor a = grid_randn({2, 3, 4}, rng);
        Tensor b = grid_randn({4, 3}, rng);
        auto f = [&] { return sum_sq(matmul(a, b)); };
        CHECK(check_gradients(f, {a, b}, 0.25f) < 1e-4);
    }

    SUBCASE("gather scatter concat slice view (linear, exact)") {
        Tensor table = grid_randn({6, 3}, rng);
        Tensor rows = grid_randn({4, 3}, rng);
        auto f = [&] {
            Tensor g = gather_rows(table, {0, 2, 2, 5});
            Tensor s = scatter_add_rows(table, {1, 1, 3, 4}, rows);
            Tensor c = concat_rows({g, slice_rows(s, 1, 3)});
            return sum_sq(view(c, {3, 7}));
        };
        CHECK(check_gradients(f, {table, rows}, 0.25f) < 1e-4);
    }

    SUBCASE("div_rowvec and scale_rows") {
        Tensor a = Tensor::randn({4, 3}, rng, 1.0f, true);
        Tensor w = Tensor::from({3}, {0.7f, 1.4f, -1.1f}, true);
        Tensor s = Tensor::randn({4}, rng, 1.0f, true);
        Tensor probe = Tensor::randu({4, 3}, rng, 0.5f, 1.5f);
        auto f = [&] { return probe_loss(scale_rows(div_rowvec(a, w), s), probe); };
        check_grad_hybrid(f, {a, w, s}, 1e-2f);
    }

    SUBCASE("smooth unaries: exp log gelu") {
        Tensor a = Tensor::randu({2, 5}, rng, 0.4f, 1.7f, true);
        Tensor probe = Tensor::randu({2, 5}, rng, 0.5f, 1.5f);
        auto f = [&] {
            Tensor t = exp_elem(mul_scalar(a, 0.5f));
            t = add(t, log_elem(a));
            t = add(t, gelu(a));
            return probe_loss(t, probe);
        };
        check_grad_hybrid(f, {a}, 1e-2f);
    }

    SUBCASE("softmax rows") {
        Tensor a = Tensor::randn({3, 5}, rng, 0.5f, true);
        Tensor probe = Tensor::randu({3, 5}, rng, 0.5f, 1.5f);
        auto f = [&] { return probe_loss(softmax_last(a), probe); };
        check_grad_hybrid(f, {a}, 1e-2f);
    }

    SUBCASE("layer_norm") {
        Tensor a = Tensor::randn({4, 6}, rng, 1.0f, true);
        Tensor g = Tensor::randu({6}, rng, 0.5f, 1.5f, true);
        Tensor b = Tensor::randn({6}, rng, 0.2f, true);
        Tensor probe = Tensor::randu({4, 6}, rng, 0.5f, 1.5f);
        auto f = [&] { return probe_loss(layer_norm(a, g, b), probe); };
        check_grad_hybrid(f, {a, g, b}, 1e-2f);
    }

    SUBCASE("conv1d") {
        Tensor x = Tensor::randn({2, 6, 3}, rng, 1.0f, true);
        Tensor w = Tensor::randn({4, 3, 3}, rng, 0.5f, true);
        Tensor b = Tensor::randn({4}, rng, 0.2f, true);
        Tensor probe = Tensor::randu({2, 6, 4}, rng, 0.5f, 1.5f);
        auto f = [&] { return probe_loss(conv1d(x, w, b), probe); };
        check_grad_hybrid(f, {x, w, b}, 2e-2f);
    }

    SUBCASE("ce_mean") {
        Tensor logits = Tensor::randn({4, 5}, rng, 1.0f, true);
        std::vector<int> targets = {1, 0, 4, 2};
        std::vector<float> mask = {1, 1, 0, 1};
        auto f = [&] { return ce_mean(logits, targets, mask); };
        check_grad_hybrid(f, {logits}, 1e-2f);
    }

    SUBCASE("rel_attention") {
        const int n = 4, d = 6;
        RelAttentionArgs args;
        args.heads = 2;
        args.window = 0;
        args.q_pos.resize(n);
        args.k_pos.resize(n);
        for (int i = 0; i < n; ++i) args.q_pos[i] = args.k_pos[i] = i;
        Tensor q = Tensor::randn({1, n, d}, rng, 0.3f, true);
        Tensor k = Tensor::randn({1, n, d}, rng, 0.3f, true);
        Tensor v = Tensor::randn({1, n, d}, rng, 1.0f, true);
        Tensor rel = Tensor::randn({4, d}, rng, 0.3f, true);
        Tensor u = Tensor::randn({d}, rng, 0.3f, true);
        Tensor vb = Tensor::randn({d}, rng, 0.3f, true);
        Tensor probe = Tensor::randu({1, n, d}, rng, 0.5f, 1.5f);
        auto f = [&] { return probe_loss(rel_attention(q, k, v, rel, u, vb, args), probe); };
        check_grad_hybrid(f, {q, k, v, rel, u, vb}, 2e-2f);
    }
}

TEST_CASE("backward is linear over summed paths") {
    Rng rng(11);
    Tensor x = Tensor::randn({4}, rng, 1.0f, true);

    auto path_a = [&] { return sum_sq(x); };
    auto path_b = [&] { return sum_abs(mul_scalar(x, 2.0f)); };

    x.zero_grad();
    backward(path_a());
    std::vector<float> ga(x.grad().begin(), x.grad().end());
    x.zero_grad();
    backward(path_b());
    std::vector<float> gb(x.grad().begin(), x.grad().end());
    x.zero_grad();
    backward(add(path_a(), path_b()));
    for (int i = 0; i < 4; ++i)
        CHECK(x.grad()[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-6));
}

TEST_CASE("stop_gradient blocks upstream gradients exactly") {
    Rng rng(3);
    Tensor x = Tensor::randn({5}, rng, 1.0f, true);
    Tensor y = Tensor::randn({5}, rng, 1.0f, true);
    Tensor loss = sum_sq(add(stop_gradient(x), y));
    backward(loss);
    CHECK(x.grad().empty()); // never touched by backward
    CHECK(y.grad().size() == 5);
    // forward value is the identity
    Tensor sg = stop_gradient(x);
    for (int i = 0; i < 5; ++i) CHECK(sg.values()[i] == x.values()[i]);
}

TEST_CASE("backward visits shared subgraphs once (no double counting)") {
    Tensor x = Tensor::from({2}, {3.0f, -2.0f}, true);
    Tensor shared = mul_scalar(x, 2.0f);
    Tensor loss = add(sum_all(shared), sum_all(shared));
    backward(loss);
    // d/dx of 2*(2x) summed = 4 per coordinate
    CHECK(x.grad()[0] == doctest::Approx(4.0f));
    CHECK(x.grad()[1] == doctest::Approx(4.0f));
}

TEST_CASE("no-grad mode builds no graph") {
    Tensor x = Tensor::from({2}, {1.0f, 2.0f}, true);
    NoGradGuard ng;
    Tensor y = sum_sq(x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("dropout scales kept entries and zeroes dropped ones") {
    Rng rng(5);
    Tensor x = Tensor::full({1000}, 1.0f);
    Tensor y = dropout(x, 0.25f, rng);
    int kept = 0;
    for (float v : y.values()) {
        CHECK((v == 0.0f || v == doctest::Approx(1.0f / 0.75f)));
        if (v != 0.0f) ++kept;
    }
    CHECK(kept > 650);
    CHECK(kept < 850);
    Rng rng2(9);
    CHECK(dropout(x, 0.0f, rng2).values()[0] == 1.0f);
}

TEST_CASE("non-finite detection in check_gradients") {
    Tensor x = Tensor::from({1}, {0.0f}, true);
    CHECK_THROWS_AS(check_gradients([&] { return log_elem(x); }, {x}, 1e-2f), NumericError);
}
