#include "motok/token_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace motok {

TokenModelConfig desk_model_config(int levels, int codebook_size) {
    TokenModelConfig cfg;
    cfg.levels = levels;
    cfg.codebook_size = codebook_size;
    cfg.d_model = 128;
    const std::vector<int> heads = {4, 4, 2, 2, 2, 2};
    const std::vector<int> layers = {3, 3, 2, 1, 1, 1};
    cfg.heads.clear();
    cfg.layers.clear();
    for (int l = 0; l < levels; ++l) {
        cfg.heads.push_back(l < static_cast<int>(heads.size()) ? heads[l] : 2);
        cfg.layers.push_back(l < static_cast<int>(layers.size()) ? layers[l] : 1);
    }
    cfg.dropout = 0.2f;
    return cfg;
}

TokenModelConfig paper_model_config() {
    TokenModelConfig cfg;
    cfg.levels = 6;
    cfg.codebook_size = 8192;
    cfg.d_model = 1024;
    cfg.heads = {16, 12, 6, 2, 2, 2};
    cfg.layers = {18, 16, 8, 4, 2, 2};
    cfg.dropout = 0.2f;
    return cfg;
}

TokenModel::TokenModel(TokenModelConfig cfg, Rng& init_rng) : cfg_(std::move(cfg)) {
    if (cfg_.levels < 1) throw ConfigError("token model: levels must be >= 1");
    if (static_cast<int>(cfg_.heads.size()) != cfg_.levels ||
        static_cast<int>(cfg_.layers.size()) != cfg_.levels)
        throw ConfigError("token model: heads/layers lists must have one entry per level");
    for (int h : cfg_.heads)
        if (h < 1 || cfg_.d_model % h != 0)
            throw ConfigError("token model: d_model must be divisible by every head count");
    for (int nl : cfg_.layers)
        if (nl < 1) throw ConfigError("token model: every level needs at least one layer");
    if (cfg_.rel_radius < 1) throw ConfigError("token model: rel_radius must be >= 1");
    if (cfg_.attn_window < 1) throw ConfigError("token model: attn_window must be >= 1");

    const int d = cfg_.d_model;
    const float s = 0.02f;
    auto lin = [&](int din, int dout) { return Tensor::randn({din, dout}, init_rng, s, true); };

    rel_ = Tensor::randn({cfg_.rel_radius + 1, d}, init_rng, s, true);
    u_ = Tensor::zeros({d}, true);
    vbias_ = Tensor::zeros({d}, true);

    subs_.resize(cfg_.levels);
    for (int l = 0; l < cfg_.levels; ++l) {
        SubModule& sm = subs_[l];
        sm.emb = Tensor::randn({cfg_.codebook_size + 2, d}, init_rng, s, true);
        sm.q_emb = Tensor::randn({d}, init_rng, s, true);
        sm.lnf_g = Tensor::full({d}, 1.0f, true);
        sm.lnf_b = Tensor::zeros({d}, true);
        sm.head_w = lin(d, vocab_out());
        sm.head_b = Tensor::zeros({vocab_out()}, true);
        sm.blocks.resize(cfg_.layers[l]);
        for (auto& b : sm.blocks) {
            b.ln1_g = Tensor::full({d}, 1.0f, true);
            b.ln1_b = Tensor::zeros({d}, true);
            b.wq = lin(d, d);
            b.bq = Tensor::zeros({d}, true);
            b.wk = lin(d, d);
            b.bk = Tensor::zeros({d}, true);
            b.wv = lin(d, d);
            b.bv = Tensor::zeros({d}, true);
            b.wo = lin(d, d);
            b.bo = Tensor::zeros({d}, true);
            b.ln2_g = Tensor::full({d}, 1.0f, true);
            b.ln2_b = Tensor::zeros({d}, true);
            b.w1 = lin(d, d * cfg_.ff_mult);
            b.b1 = Tensor::zeros({d * cfg_.ff_mult}, true);
            b.w2 = lin(d * cfg_.ff_mult, d);
            b.b2 = Tensor::zeros({d}, true);
        }
    }
}

Tensor TokenModel::condition(const std::vector<float>& prompt, int level) const {
    if (static_cast<int>(prompt.size()) != cfg_.d_model)
        throw DimensionError("condition: prompt embedding dim mismatch");
    Tensor p = Tensor::from({1, cfg_.d_model}, std::vector<float>(prompt.begin(), prompt.end()));
    return add(p, view(subs_[level].q_emb, {1, cfg_.d_model}));
}

Tensor TokenModel::build_level_input(const TokenGrid& grid, int level,
                                     const std::vector<float>& prompt,
                                     const Tensor* lower_hidden) const {
    if (grid.levels != cfg_.levels) throw ContractError("build_level_input: grid level mismatch");
    if (level < 0 || level >= cfg_.levels) throw IndexError("build_level_input: level out of range");
    const int n = grid.n;
    Tensor cond = condition(prompt, level);
    if (level == 0) {
        if (n == 0) return cond;
        std::vector<int> idx(n);
        idx[0] = bos_id();
        for (int i = 1; i < n; ++i) idx[i] = grid.at(0, i - 1);
        return concat_rows({cond, gather_rows(subs_[0].emb, idx)});
    }
    if (!lower_hidden) throw ContractError("build_level_input: lower_hidden required for level > 0");
    if (lower_hidden->rank() != 2 || lower_hidden->dim(0) != n + 1 ||
        lower_hidden->dim(1) != cfg_.d_model)
        throw ContractError("build_level_input: lower_hidden must be [n+1, d_model]");
    if (n == 0) return cond;
    Tensor acc;
    for (int j = 0; j < level; ++j) {
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = grid.at(j, i);
        Tensor e = gather_rows(subs_[j].emb, idx);
        acc = j == 0 ? e : add(acc, e);
    }
    acc = add(acc, slice_rows(*lower_hidden, 1, n));
    return concat_rows({cond, acc});
}

Tensor TokenModel::run_submodule(int level, const Tensor& x, int window, bool train,
                                 Rng* dropout_rng) const {
    const SubModule& sm = subs_[level];
    const int m = x.dim(1);
    std::vector<int> pos(m);
    std::iota(pos.begin(), pos.end(), 0);
    RelAttentionArgs args;
    args.heads = cfg_.heads[level];
    args.window = window;
    args.q_pos = pos;
    args.k_pos = pos;

    const bool drop = train && cfg_.dropout > 0.0f && dropout_rng;
    Tensor h = x;
    for (const auto& b : sm.blocks) {
        Tensor a = layer_norm(h, b.ln1_g, b.ln1_b);
        Tensor q = add_rowvec(matmul(a, b.wq), b.bq);
        Tensor k = add_rowvec(matmul(a, b.wk), b.bk);
        Tensor v = add_rowvec(matmul(a, b.wv), b.bv);
        Tensor att = rel_attention(q, k, v, rel_, u_, vbias_, args);
        Tensor o = add_rowvec(matmul(att, b.wo), b.bo);
        if (drop) o = dropout(o, cfg_.dropout, *dropout_rng);
        h = add(h, o);
        Tensor m2 = layer_norm(h, b.ln2_g, b.ln2_b);
        Tensor f = gelu(add_rowvec(matmul(m2, b.w1), b.b1));
        if (drop) f = dropout(f, cfg_.dropout, *dropout_rng);
        f = add_rowvec(matmul(f, b.w2), b.b2);
        h = add(h, f);
    }
    return layer_norm(h, sm.lnf_g, sm.lnf_b);
}

std::vector<Tensor> TokenModel::forward_train(const std::vector<TokenGrid>& grids,
                                              const std::vector<std::vector<float>>& prompts,
                                              bool train, Rng* dropout_rng, int window) const {
    const int B = static_cast<int>(grids.size());
    if (B == 0) throw ContractError("forward_train: empty batch");
    if (static_cast<int>(prompts.size()) != B)
        throw ContractError("forward_train: prompt count mismatch");
    const int n = grids[0].n;
    if (n < 1) throw ContractError("forward_train: empty grids");
    for (const auto& g : grids) {
        if (g.levels != cfg_.levels) throw ContractError("forward_train: grid level mismatch");
        if (g.n != n) throw ContractError("forward_train: grids must share length");
    }
    const int W = window > 0 ? window : cfg_.attn_window;
    const int d = cfg_.d_model;
    const int m = n + 1;

    std::vector<Tensor> logits(cfg_.levels);
    Tensor h_prev; // [B, m, d]
    for (int l = 0; l < cfg_.levels; ++l) {
        std::vector<Tensor> rows;
        rows.reserve(B);
        Tensor h_flat;
        if (l > 0) h_flat = view(h_prev, {B * m, d});
        for (int b = 0; b < B; ++b) {
            Tensor cond = condition(prompts[b], l);
            if (l == 0) {
                std::vector<int> idx(n);
                idx[0] = bos_id();
                for (int i = 1; i < n; ++i) idx[i] = grids[b].at(0, i - 1);
                rows.push_back(concat_rows({cond, gather_rows(subs_[0].emb, idx)}));
            } else {
                Tensor acc;
                for (int j = 0; j < l; ++j) {
                    std::vector<int> idx(n);
                    for (int i = 0; i < n; ++i) idx[i] = grids[b].at(j, i);
                    Tensor e = gather_rows(subs_[j].emb, idx);
                    acc = j == 0 ? e : add(acc, e);
                }
                acc = add(acc, slice_rows(h_flat, b * m + 1, n));
                rows.push_back(concat_rows({cond, acc}));
            }
        }
        Tensor x = view(concat_rows(rows), {B, m, d});
        Tensor h = run_submodule(l, x, W, train, dropout_rng);

        // logits at positions 1..n predict columns 0..n-1
        Tensor hf = view(h, {B * m, d});
        std::vector<int> sel;
        sel.reserve(static_cast<size_t>(B) * n);
        for (int b = 0; b < B; ++b)
            for (int i = 1; i <= n; ++i) sel.push_back(b * m + i);
        Tensor hsel = gather_rows(hf, sel);
        logits[l] = view(add_rowvec(matmul(hsel, subs_[l].head_w), subs_[l].head_b),
                         {B, n, vocab_out()});
        h_prev = h;
    }
    return logits;
}

Tensor TokenModel::ce_loss(const std::vector<Tensor>& logits, const std::vector<TokenGrid>& grids,
                           const std::vector<float>& mask) const {
    if (static_cast<int>(logits.size()) != cfg_.levels)
        throw ContractError("ce_loss: logits level count mismatch");
    const int B = static_cast<int>(grids.size());
    const int n = grids[0].n;
    if (static_cast<int>(mask.size()) != B * n) throw DimensionError("ce_loss: mask size mismatch");
    Tensor total;
    for (int l = 0; l < cfg_.levels; ++l) {
        Tensor flat = view(logits[l], {B * n, vocab_out()});
        std::vector<int> targets(static_cast<size_t>(B) * n);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < n; ++i)
                targets[static_cast<size_t>(b) * n + i] = grids[b].at(l, i);
        Tensor term = ce_mean(flat, targets, mask);
        total = l == 0 ? term : add(total, term);
    }
    return mul_scalar(total, 1.0f / static_cast<float>(cfg_.levels));
}

// ---------------- incremental decoding ----------------

namespace {

// zero-init accumulate in k order, bias added last: bitwise identical to the
// tape path's matmul followed by add_rowvec
void linear_row(const float* x, const Tensor& w, const Tensor& b, float* y) {
    const int din = w.dim(0), dout = w.dim(1);
    std::fill(y, y + dout, 0.0f);
    const float* wv = w.values().data();
    for (int k = 0; k < din; ++k) detail::axpy(x[k], wv + static_cast<size_t>(k) * dout, y, dout);
    const float* bv = b.values().data();
    for (int j = 0; j < dout; ++j) y[j] += bv[j];
}

} // namespace

TokenModel::StepCache TokenModel::start_cache(const std::vector<float>& prompt, int window) const {
    if (static_cast<int>(prompt.size()) != cfg_.d_model)
        throw DimensionError("start_cache: prompt embedding dim mismatch");
    StepCache cache;
    cache.window = window > 0 ? window : cfg_.attn_window;
    cache.prompt = prompt;
    cache.next_pos = 1;
    const int d = cfg_.d_model;
    cache.levels.resize(cfg_.levels);
    for (int l = 0; l < cfg_.levels; ++l) {
        cache.levels[l].layers.resize(cfg_.layers[l]);
        for (auto& kv : cache.levels[l].layers) {
            kv.k_cond.assign(d, 0.0f);
            kv.v_cond.assign(d, 0.0f);
            kv.k.assign(static_cast<size_t>(cache.window) * d, 0.0f);
            kv.v.assign(static_cast<size_t>(cache.window) * d, 0.0f);
        }
    }
    switch_condition(cache, prompt);
    return cache;
}

void TokenModel::switch_condition(StepCache& cache, const std::vector<float>& prompt) const {
    if (static_cast<int>(prompt.size()) != cfg_.d_model)
        throw DimensionError("switch_condition: prompt embedding dim mismatch");
    cache.prompt = prompt;
    const int d = cfg_.d_model;
    std::vector<float> x(d);
    for (int l = 0; l < cfg_.levels; ++l) {
        const auto qe = subs_[l].q_emb.values();
        for (int i = 0; i < d; ++i) x[i] = prompt[i] + qe[i];
        step_submodule(cache, l, 0, x);
    }
}

void TokenModel::step_submodule(StepCache& cache, int level, int pos, std::vector<float>& x) const {
    const SubModule& sm = subs_[level];
    const int d = cfg_.d_model;
    const int H = cfg_.heads[level];
    const int dh = d / H;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    const int W = cache.window;
    const int Rmax = cfg_.rel_radius;
    const auto rv = rel_.values();
    const auto uv = u_.values();
    const auto bv = vbias_.values();

    std::vector<float> xa(d), q(d), k(d), v(d), att(d), proj(d);
    std::vector<float> ff(static_cast<size_t>(d) * cfg_.ff_mult);
    // visible token positions, ascending (condition handled separately first)
    const int lo = std::max(1, pos - W + 1);

    for (size_t bi = 0; bi < sm.blocks.size(); ++bi) {
        const Block& blk = sm.blocks[bi];
        auto& kvc = cache.levels[level].layers[bi];
        detail::layer_norm_row(x.data(), d, blk.ln1_g.values().data(), blk.ln1_b.values().data(),
                               1e-5f, xa.data());
        linear_row(xa.data(), blk.wq, blk.bq, q.data());
        linear_row(xa.data(), blk.wk, blk.bk, k.data());
        linear_row(xa.data(), blk.wv, blk.bv, v.data());
        if (pos == 0) {
            std::copy(k.begin(), k.end(), kvc.k_cond.begin());
            std::copy(v.begin(), v.end(), kvc.v_cond.begin());
        } else {
            const size_t slot = static_cast<size_t>((pos - 1) % W) * d;
            std::copy(k.begin(), k.end(), kvc.k.begin() + slot);
            std::copy(v.begin(), v.end(), kvc.v.begin() + slot);
        }

        std::fill(att.begin(), att.end(), 0.0f);
        std::vector<float> scores(pos - lo + 2);
        for (int h = 0; h < H; ++h) {
            const int ho = h * dh;
            const float* qh = q.data() + ho;
            float mx = -std::numeric_limits<float>::infinity();
            int ns = 0;
            // condition key first (key index 0 in the teacher-forced layout)
            {
                const float* kc = kvc.k_cond.data() + ho;
                const int off = std::min(pos, Rmax);
                const float* ro = rv.data() + static_cast<size_t>(off) * d + ho;
                float s = detail::dot(qh, kc, dh) + detail::dot(qh, ro, dh) +
                          detail::dot(uv.data() + ho, kc, dh) +
                          detail::dot(bv.data() + ho, ro, dh);
                scores[ns++] = s * scale;
                mx = std::max(mx, scores[0]);
            }
            for (int j = lo; j <= pos && pos >= 1; ++j) {
                const float* kj = kvc.k.data() + static_cast<size_t>((j - 1) % W) * d + ho;
                const int off = std::min(pos - j, Rmax);
                const float* ro = rv.data() + static_cast<size_t>(off) * d + ho;
                float s = detail::dot(qh, kj, dh) + detail::dot(qh, ro, dh) +
                          detail::dot(uv.data() + ho, kj, dh) +
                          detail::dot(bv.data() + ho, ro, dh);
                scores[ns] = s * scale;
                mx = std::max(mx, scores[ns]);
                ++ns;
            }
            double z = 0.0;
            for (int i = 0; i < ns; ++i) {
                scores[i] = std::exp(scores[i] - mx);
                z += scores[i];
            }
            const float inv = static_cast<float>(1.0 / z);
            float* ah = att.data() + ho;
            detail::axpy(scores[0] * inv, kvc.v_cond.data() + ho, ah, dh);
            int si = 1;
            for (int j = lo; j <= pos && pos >= 1; ++j, ++si)
                detail::axpy(scores[si] * inv,
                             kvc.v.data() + static_cast<size_t>((j - 1) % W) * d + ho, ah, dh);
        }
        linear_row(att.data(), blk.wo, blk.bo, proj.data());
        for (int i = 0; i < d; ++i) x[i] += proj[i];

        detail::layer_norm_row(x.data(), d, blk.ln2_g.values().data(), blk.ln2_b.values().data(),
                               1e-5f, xa.data());
        linear_row(xa.data(), blk.w1, blk.b1, ff.data());
        for (auto& f : ff) f = detail::gelu_scalar(f);
        linear_row(ff.data(), blk.w2, blk.b2, proj.data());
        for (int i = 0; i < d; ++i) x[i] += proj[i];
    }
    detail::layer_norm_row(x.data(), d, sm.lnf_g.values().data(), sm.lnf_b.values().data(), 1e-5f,
                           xa.data());
    x = xa;
}

TokenModel::StepResult TokenModel::forward_step(
    StepCache& cache, int prev_level0_token,
    const std::function<int(int, std::span<const float>)>& token_source) const {
    const int P = cache.next_pos;
    if (P < 1) throw ContractError("forward_step: cache position desync");
    const int d = cfg_.d_model;
    StepResult res;
    res.logits.resize(cfg_.levels);
    res.tokens.assign(cfg_.levels, 0);

    std::vector<float> x(d), h_prev;
    for (int l = 0; l < cfg_.levels; ++l) {
        if (l == 0) {
            const int tok = P == 1 ? bos_id() : prev_level0_token;
            if (tok < 0 || tok > bos_id())
                throw ContractError("forward_step: previous token out of range");
            const auto ev = subs_[0].emb.values();
            std::copy_n(ev.data() + static_cast<size_t>(tok) * d, d, x.data());
        } else {
            const auto e0 = subs_[0].emb.values();
            std::copy_n(e0.data() + static_cast<size_t>(res.tokens[0]) * d, d, x.data());
            for (int j = 1; j < l; ++j) {
                const auto ej = subs_[j].emb.values();
                detail::axpy(1.0f, ej.data() + static_cast<size_t>(res.tokens[j]) * d, x.data(), d);
            }
            detail::axpy(1.0f, h_prev.data(), x.data(), d);
        }
        step_submodule(cache, l, P, x);
        res.logits[l].resize(vocab_out());
        linear_row(x.data(), subs_[l].head_w, subs_[l].head_b, res.logits[l].data());
        const int tok = token_source(l, std::span<const float>(res.logits[l]));
        if (tok < 0 || tok > eos_id())
            throw ContractError("forward_step: token source returned an invalid id");
        res.tokens[l] = tok;
        h_prev = x;
    }
    cache.next_pos = P + 1;
    return res;
}

std::vector<std::pair<std::string, Tensor>> TokenModel::parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("rel", rel_);
    out.emplace_back("u", u_);
    out.emplace_back("v", vbias_);
    for (int l = 0; l < cfg_.levels; ++l) {
        const std::string p = "l" + std::to_string(l);
        SubModule& sm = subs_[l];
        out.emplace_back(p + ".emb", sm.emb);
        out.emplace_back(p + ".q_emb", sm.q_emb);
        for (size_t i = 0; i < sm.blocks.size(); ++i) {
            const std::string bp = p + ".blk" + std::to_string(i);
            Block& b = sm.blocks[i];
            out.emplace_back(bp + ".ln1.g", b.ln1_g);
            out.emplace_back(bp + ".ln1.b", b.ln1_b);
            out.emplace_back(bp + ".wq", b.wq);
            out.emplace_back(bp + ".bq", b.bq);
            out.emplace_back(bp + ".wk", b.wk);
            out.emplace_back(bp + ".bk", b.bk);
            out.emplace_back(bp + ".wv", b.wv);
            out.emplace_back(bp + ".bv", b.bv);
            out.emplace_back(bp + ".wo", b.wo);
            out.emplace_back(bp + ".bo", b.bo);
            out.emplace_back(bp + ".ln2.g", b.ln2_g);
            out.emplace_back(bp + ".ln2.b", b.ln2_b);
            out.emplace_back(bp + ".w1", b.w1);
            out.emplace_back(bp + ".b1", b.b1);
            out.emplace_back(bp + ".w2", b.w2);
            out.emplace_back(bp + ".b2", b.b2);
        }
        out.emplace_back(p + ".lnf.g", sm.lnf_g);
        out.emplace_back(p + ".lnf.b", sm.lnf_b);
        out.emplace_back(p + ".head.w", sm.head_w);
        out.emplace_back(p + ".head.b", sm.head_b);
    }
    return out;
}

} // namespace motok
