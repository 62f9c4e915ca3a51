#include "motok/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace motok {

// ---------------- token grid / file ----------------

void TokenGrid::push_column(const std::vector<int>& column) {
    if (static_cast<int>(column.size()) != levels)
        throw DimensionError("push_column: wrong level count");
    std::vector<uint16_t> next(static_cast<size_t>(levels) * (n + 1));
    for (int l = 0; l < levels; ++l) {
        std::copy_n(idx.begin() + static_cast<size_t>(l) * n, n,
                    next.begin() + static_cast<size_t>(l) * (n + 1));
        next[static_cast<size_t>(l) * (n + 1) + n] = static_cast<uint16_t>(column[l]);
    }
    idx = std::move(next);
    ++n;
}

TokenGrid TokenGrid::prefix(int count) const {
    if (count < 0 || count > n) throw IndexError("prefix: count out of range");
    TokenGrid g(levels, count);
    for (int l = 0; l < levels; ++l)
        std::copy_n(idx.begin() + static_cast<size_t>(l) * n, count,
                    g.idx.begin() + static_cast<size_t>(l) * count);
    return g;
}

void write_token_file(const std::string& path, const TokenGrid& grid, int codebook_size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write token file: " + path);
    const uint32_t header[3] = {static_cast<uint32_t>(grid.levels), static_cast<uint32_t>(grid.n),
                                static_cast<uint32_t>(codebook_size)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    out.write(reinterpret_cast<const char*>(grid.idx.data()),
              static_cast<std::streamsize>(grid.idx.size() * sizeof(uint16_t)));
    if (!out) throw IoError("short write: " + path);
}

TokenGrid read_token_file(const std::string& path, int* codebook_size_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open token file: " + path);
    uint32_t header[3] = {0, 0, 0};
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!in || header[0] == 0) throw IoError("bad token file header: " + path);
    TokenGrid grid(static_cast<int>(header[0]), static_cast<int>(header[1]));
    in.read(reinterpret_cast<char*>(grid.idx.data()),
            static_cast<std::streamsize>(grid.idx.size() * sizeof(uint16_t)));
    if (!in) throw IoError("truncated token file: " + path);
    if (codebook_size_out) *codebook_size_out = static_cast<int>(header[2]);
    return grid;
}

// ---------------- decorrelation ----------------

Tensor decorrelation_loss(const Tensor& phi, const Tensor& r_next) {
    if (phi.rank() != 2 || r_next.rank() != 2 || phi.dim(0) != r_next.dim(0))
        throw DimensionError("decorrelation_loss: need matching [N,d] batches");
    const int n = phi.dim(0);
    if (n < 2) throw ValidationError("decorrelation_loss: need at least 2 samples");
    Tensor xc = add_rowvec(phi, neg(mean_axis0(phi)));
    Tensor yc = add_rowvec(r_next, neg(mean_axis0(r_next)));
    Tensor cov = mul_scalar(matmul(transpose2d(xc), yc), 1.0f / static_cast<float>(n));
    return sum_sq(cov);
}

// ---------------- quantizer ----------------

namespace {

Tensor conv_init(int co, int k, int ci, Rng& rng) {
    const float stddev = std::sqrt(2.0f / static_cast<float>(k * ci));
    return Tensor::randn({co, k, ci}, rng, stddev, true);
}

} // namespace

Quantizer::Quantizer(QuantizerConfig cfg, Rng& init_rng) : cfg_(cfg) {
    if (cfg_.levels < 1) throw ConfigError("quantizer: levels must be >= 1");
    if (cfg_.codebook_size < 2) throw ConfigError("quantizer: codebook_size must be >= 2");
    if (cfg_.kernel % 2 == 0) throw ConfigError("quantizer: kernel must be odd");

    auto build_coder = [&](int in_dim, int out_dim) {
        Coder c;
        c.in_w = conv_init(cfg_.hidden_dim, cfg_.kernel, in_dim, init_rng);
        c.in_b = Tensor::zeros({cfg_.hidden_dim}, true);
        for (int i = 0; i < cfg_.blocks; ++i) {
            Coder::Block b;
            b.c1_w = conv_init(cfg_.hidden_dim, cfg_.kernel, cfg_.hidden_dim, init_rng);
            b.c1_b = Tensor::zeros({cfg_.hidden_dim}, true);
            b.c2_w = conv_init(cfg_.hidden_dim, cfg_.kernel, cfg_.hidden_dim, init_rng);
            b.c2_b = Tensor::zeros({cfg_.hidden_dim}, true);
            c.blocks.push_back(std::move(b));
        }
        c.out_w = conv_init(out_dim, cfg_.kernel, cfg_.hidden_dim, init_rng);
        c.out_b = Tensor::zeros({out_dim}, true);
        return c;
    };
    enc_ = build_coder(cfg_.input_dim, cfg_.latent_dim);
    dec_ = build_coder(cfg_.latent_dim, cfg_.input_dim);

    affines_.resize(cfg_.levels);
    codebooks_.resize(cfg_.levels);
    for (int l = 0; l < cfg_.levels; ++l) {
        affines_[l].w = Tensor::full({cfg_.latent_dim}, 1.0f, cfg_.learn_affine);
        affines_[l].b = Tensor::zeros({cfg_.latent_dim}, cfg_.learn_affine);
        codebooks_[l].entries = Tensor::zeros({cfg_.codebook_size, cfg_.latent_dim});
        codebooks_[l].ema_counts.assign(cfg_.codebook_size, 0.0f);
        codebooks_[l].ema_sums.assign(static_cast<size_t>(cfg_.codebook_size) * cfg_.latent_dim,
                                      0.0f);
        codebooks_[l].stale_steps.assign(cfg_.codebook_size, 0);
    }
}

Tensor Quantizer::run_coder(const Coder& c, const Tensor& x, bool train, Rng* dropout_rng) const {
    Tensor h = conv1d(x, c.in_w, c.in_b);
    for (const auto& b : c.blocks) {
        Tensor t = relu(h);
        t = conv1d(t, b.c1_w, b.c1_b);
        t = relu(t);
        if (train && cfg_.dropout > 0.0f && dropout_rng) t = dropout(t, cfg_.dropout, *dropout_rng);
        t = conv1d(t, b.c2_w, b.c2_b);
        h = add(h, t);
    }
    return conv1d(relu(h), c.out_w, c.out_b);
}

Tensor Quantizer::encode(const Tensor& motion, bool train, Rng* dropout_rng) const {
    if (motion.rank() != 3 || motion.dim(2) != cfg_.input_dim)
        throw DimensionError("encode: expected [B,T,input_dim]");
    for (float v : motion.values())
        if (!std::isfinite(v)) throw NumericError("encode: non-finite input");
    return run_coder(enc_, motion, train, dropout_rng);
}

Tensor Quantizer::decode_latent(const Tensor& zhat, bool train, Rng* dropout_rng) const {
    if (zhat.rank() != 3 || zhat.dim(2) != cfg_.latent_dim)
        throw DimensionError("decode_latent: expected [B,T,latent_dim]");
    return run_coder(dec_, zhat, train, dropout_rng);
}

Tensor Quantizer::level_phi(const Tensor& q, int level) const {
    const LevelAffine& a = affines_[level];
    return div_rowvec(add_rowvec(q, neg(a.b)), a.w);
}

LevelOutput Quantizer::quantize_level(const Tensor& r, int level) const {
    if (level < 0 || level >= cfg_.levels) throw IndexError("quantize_level: level out of range");
    if (r.rank() != 2 || r.dim(1) != cfg_.latent_dim)
        throw DimensionError("quantize_level: expected [N,latent_dim]");
    const int n = r.dim(0);
    const int d = cfg_.latent_dim;
    const int K = cfg_.codebook_size;
    const LevelAffine& a = affines_[level];
    const auto wv = a.w.values();
    const auto bv = a.b.values();
    for (int i = 0; i < d; ++i)
        if (std::fabs(wv[i]) < cfg_.eps_inv)
            throw ContractError("quantize_level: diagonal scale below clamp threshold");

    LevelOutput out;
    out.scaled.resize(static_cast<size_t>(n) * d);
    const auto rv = r.values();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            out.scaled[static_cast<size_t>(i) * d + j] =
                rv[static_cast<size_t>(i) * d + j] * wv[j] + bv[j];

    const auto cv = codebooks_[level].entries.values();
    out.indices.resize(n);
    for (int i = 0; i < n; ++i) {
        const float* s = out.scaled.data() + static_cast<size_t>(i) * d;
        double best = std::numeric_limits<double>::infinity();
        int best_k = 0;
        for (int k = 0; k < K; ++k) {
            const float* c = cv.data() + static_cast<size_t>(k) * d;
            double dist = 0.0;
            for (int j = 0; j < d; ++j) {
                const double dv = static_cast<double>(s[j]) - c[j];
                dist += dv * dv;
            }
            if (dist < best) { // strict: ties keep the lowest index
                best = dist;
                best_k = k;
            }
        }
        out.indices[i] = best_k;
    }

    out.q = gather_rows(codebooks_[level].entries, out.indices);
    out.phi = level_phi(out.q, level);
    out.next_residual = sub(r, stop_gradient(out.phi));
    return out;
}

QuantizeTrace Quantizer::quantize_all(const Tensor& r0) const {
    QuantizeTrace trace;
    trace.residuals.push_back(r0);
    Tensor r = r0;
    for (int l = 0; l < cfg_.levels; ++l) {
        LevelOutput lo = quantize_level(r, l);
        r = lo.next_residual;
        trace.residuals.push_back(r);
        if (l == 0) trace.zhat = lo.phi;
        else trace.zhat = add(trace.zhat, lo.phi);
        trace.levels.push_back(std::move(lo));
    }
    trace.zhat_st = add(r0, stop_gradient(sub(trace.zhat, r0)));
    return trace;
}

Tensor Quantizer::tokens_to_latent(const TokenGrid& grid) const {
    if (grid.levels != cfg_.levels) throw DimensionError("tokens_to_latent: level count mismatch");
    Tensor zhat;
    for (int l = 0; l < cfg_.levels; ++l) {
        std::vector<int> idx(grid.n);
        for (int i = 0; i < grid.n; ++i) {
            idx[i] = grid.at(l, i);
            if (idx[i] < 0 || idx[i] >= cfg_.codebook_size)
                throw IndexError("tokens_to_latent: code index out of range");
        }
        Tensor phi = level_phi(gather_rows(codebooks_[l].entries, idx), l);
        zhat = l == 0 ? phi : add(zhat, phi);
    }
    return zhat;
}

Tensor Quantizer::decode_tokens(const TokenGrid& grid) const {
    Tensor zhat = tokens_to_latent(grid);
    return decode_latent(view(zhat, {1, grid.n, cfg_.latent_dim}));
}

TokenGrid Quantizer::grid_from_trace(const QuantizeTrace& trace) const {
    const int n = static_cast<int>(trace.levels[0].indices.size());
    TokenGrid grid(cfg_.levels, n);
    for (int l = 0; l < cfg_.levels; ++l)
        for (int i = 0; i < n; ++i) grid.set(l, i, trace.levels[l].indices[i]);
    return grid;
}

VqLossBreakdown Quantizer::vq_loss(const Tensor& motion, const Tensor& recon,
                                   const QuantizeTrace& trace, const std::vector<float>& mask,
                                   float beta, float lambda, float gamma) const {
    if (motion.shape() != recon.shape()) throw DimensionError("vq_loss: motion/recon mismatch");
    const int d_in = motion.shape().back();
    const int rows = static_cast<int>(motion.numel() / d_in);
    if (static_cast<int>(mask.size()) != rows) throw DimensionError("vq_loss: mask length mismatch");

    double count = 0;
    std::vector<int> live;
    for (int i = 0; i < rows; ++i)
        if (mask[i] > 0.0f) {
            count += 1;
            live.push_back(i);
        }
    if (count == 0) throw ValidationError("vq_loss: fully masked batch");
    Tensor mask_t = Tensor::from({rows}, std::vector<float>(mask.begin(), mask.end()));

    auto check_term = [](const Tensor& t, const char* name) {
        if (!std::isfinite(t.item()))
            throw NumericError(std::string("vq_loss: non-finite term: ") + name);
        return t;
    };

    // reconstruction: masked mean |m - m_hat|
    Tensor diff = view(sub(motion, recon), {rows, d_in});
    Tensor recon_loss = check_term(
        mul_scalar(sum_all(scale_rows(abs_elem(diff), mask_t)),
                   1.0f / static_cast<float>(count * d_in)),
        "reconstruction");

    // commitment: masked mean ||r^l - sg(phi^l)||^2, summed over levels
    const int d = cfg_.latent_dim;
    Tensor commit;
    for (int l = 0; l < cfg_.levels; ++l) {
        Tensor dr = sub(trace.residuals[l], stop_gradient(trace.levels[l].phi));
        Tensor term = mul_scalar(sum_all(scale_rows(square(dr), mask_t)),
                                 1.0f / static_cast<float>(count * d));
        commit = l == 0 ? term : add(commit, term);
    }
    check_term(commit, "commitment");

    // cross-level decorrelation over unmasked rows
    Tensor decor;
    bool have_decor = false;
    if (cfg_.levels > 1 && live.size() >= 2) {
        for (int l = 0; l + 1 < cfg_.levels; ++l) {
            Tensor phi_sel = gather_rows(trace.levels[l].phi, live);
            Tensor rn_sel = gather_rows(trace.residuals[l + 1], live);
            Tensor term = decorrelation_loss(phi_sel, rn_sel);
            decor = have_decor ? add(decor, term) : term;
            have_decor = true;
        }
        check_term(decor, "decorrelation");
    }

    // modulation regularizer: ||W - I||_F^2 + ||b||^2 per level
    Tensor modreg;
    for (int l = 0; l < cfg_.levels; ++l) {
        Tensor term = add(sum_sq(add_scalar(affines_[l].w, -1.0f)), sum_sq(affines_[l].b));
        modreg = l == 0 ? term : add(modreg, term);
    }
    check_term(modreg, "modulation");

    VqLossBreakdown out;
    out.recon = recon_loss.item();
    out.commit = commit.item();
    out.decor = have_decor ? decor.item() : 0.0f;
    out.modulation = modreg.item();

    Tensor loss = add(recon_loss, mul_scalar(commit, beta));
    if (have_decor && lambda != 0.0f) loss = add(loss, mul_scalar(decor, lambda));
    loss = add(loss, mul_scalar(modreg, gamma));
    out.loss = loss;
    out.total = loss.item();
    check_term(loss, "total");
    return out;
}

void Quantizer::maybe_init_codebooks(const Tensor& r0, const std::vector<float>& mask, Rng& rng) {
    bool all_init = true;
    for (const auto& cb : codebooks_) all_init = all_init && cb.initialized;
    if (all_init) return;

    if (r0.rank() != 2 || r0.dim(1) != cfg_.latent_dim)
        throw DimensionError("maybe_init_codebooks: expected [N,latent_dim]");
    const int n = r0.dim(0), d = cfg_.latent_dim, K = cfg_.codebook_size;
    std::vector<int> live;
    for (int i = 0; i < n; ++i)
        if (i >= static_cast<int>(mask.size()) || mask[i] > 0.0f) live.push_back(i);
    if (live.empty()) throw ValidationError("maybe_init_codebooks: fully masked batch");

    std::vector<float> r(r0.values().begin(), r0.values().end());
    std::vector<float> scaled(static_cast<size_t>(n) * d);
    for (int l = 0; l < cfg_.levels; ++l) {
        const auto wv = affines_[l].w.values();
        const auto bv = affines_[l].b.values();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                scaled[static_cast<size_t>(i) * d + j] =
                    r[static_cast<size_t>(i) * d + j] * wv[j] + bv[j];
        Codebook& cb = codebooks_[l];
        if (!cb.initialized) {
            auto entries = cb.entries.mutable_values();
            for (int k = 0; k < K; ++k) {
                const int pos = live[rng.next_int(static_cast<int>(live.size()))];
                std::copy_n(scaled.data() + static_cast<size_t>(pos) * d, d,
                            entries.data() + static_cast<size_t>(k) * d);
                cb.ema_counts[k] = 1.0f;
                std::copy_n(entries.data() + static_cast<size_t>(k) * d, d,
                            cb.ema_sums.data() + static_cast<size_t>(k) * d);
            }
            cb.initialized = true;
        }
        // advance residuals with the freshly initialized codebook
        const auto cv = cb.entries.values();
        for (int i = 0; i < n; ++i) {
            const float* s = scaled.data() + static_cast<size_t>(i) * d;
            double best = std::numeric_limits<double>::infinity();
            int best_k = 0;
            for (int k = 0; k < K; ++k) {
                const float* c = cv.data() + static_cast<size_t>(k) * d;
                double dist = 0.0;
                for (int j = 0; j < d; ++j) {
                    const double dv = static_cast<double>(s[j]) - c[j];
                    dist += dv * dv;
                }
                if (dist < best) {
                    best = dist;
                    best_k = k;
                }
            }
            const float* c = cv.data() + static_cast<size_t>(best_k) * d;
            for (int j = 0; j < d; ++j)
                r[static_cast<size_t>(i) * d + j] -= (c[j] - bv[j]) / wv[j];
        }
    }
}

void Quantizer::ema_update(const QuantizeTrace& trace, const std::vector<float>& mask, Rng& rng) {
    const int d = cfg_.latent_dim, K = cfg_.codebook_size;
    const float decay = cfg_.ema_decay;
    for (int l = 0; l < cfg_.levels; ++l) {
        const LevelOutput& lo = trace.levels[l];
        const int n = static_cast<int>(lo.indices.size());
        std::vector<float> counts(K, 0.0f);
        std::vector<float> sums(static_cast<size_t>(K) * d, 0.0f);
        std::vector<int> live;
        for (int i = 0; i < n; ++i) {
            if (i < static_cast<int>(mask.size()) && mask[i] <= 0.0f) continue;
            live.push_back(i);
            const int k = lo.indices[i];
            counts[k] += 1.0f;
            const float* s = lo.scaled.data() + static_cast<size_t>(i) * d;
            detail::axpy(1.0f, s, sums.data() + static_cast<size_t>(k) * d, d);
        }
        Codebook& cb = codebooks_[l];
        auto entries = cb.entries.mutable_values();
        for (int k = 0; k < K; ++k) {
            cb.ema_counts[k] = decay * cb.ema_counts[k] + (1.0f - decay) * counts[k];
            float* es = cb.ema_sums.data() + static_cast<size_t>(k) * d;
            const float* bs = sums.data() + static_cast<size_t>(k) * d;
            for (int j = 0; j < d; ++j) es[j] = decay * es[j] + (1.0f - decay) * bs[j];
            const float denom = std::max(cb.ema_counts[k], 1e-6f);
            float* e = entries.data() + static_cast<size_t>(k) * d;
            for (int j = 0; j < d; ++j) e[j] = es[j] / denom;

            cb.stale_steps[k] = counts[k] > 0.0f ? 0 : cb.stale_steps[k] + 1;
            if (!live.empty() && cb.stale_steps[k] >= cfg_.reset_patience &&
                cb.ema_counts[k] < cfg_.dead_threshold) {
                const int pos = live[rng.next_int(static_cast<int>(live.size()))];
                const float* s = lo.scaled.data() + static_cast<size_t>(pos) * d;
                std::copy_n(s, d, e);
                std::copy_n(s, d, es);
                cb.ema_counts[k] = 1.0f;
                cb.stale_steps[k] = 0;
            }
        }
    }
}

void Quantizer::clamp_affine() {
    for (auto& a : affines_) {
        auto w = a.w.mutable_values();
        for (auto& x : w) {
            if (std::fabs(x) < cfg_.eps_inv) x = x < 0.0f ? -cfg_.eps_inv : cfg_.eps_inv;
        }
    }
}

int Quantizer::receptive_field_radius() const {
    return (cfg_.kernel / 2) * (2 + 2 * cfg_.blocks);
}

std::vector<std::pair<std::string, Tensor>> Quantizer::parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add_coder = [&](const std::string& prefix, Coder& c) {
        out.emplace_back(prefix + ".in.w", c.in_w);
        out.emplace_back(prefix + ".in.b", c.in_b);
        for (size_t i = 0; i < c.blocks.size(); ++i) {
            const std::string bp = prefix + ".block" + std::to_string(i);
            out.emplace_back(bp + ".c1.w", c.blocks[i].c1_w);
            out.emplace_back(bp + ".c1.b", c.blocks[i].c1_b);
            out.emplace_back(bp + ".c2.w", c.blocks[i].c2_w);
            out.emplace_back(bp + ".c2.b", c.blocks[i].c2_b);
        }
        out.emplace_back(prefix + ".out.w", c.out_w);
        out.emplace_back(prefix + ".out.b", c.out_b);
    };
    add_coder("enc", enc_);
    add_coder("dec", dec_);
    if (cfg_.learn_affine) {
        for (int l = 0; l < cfg_.levels; ++l) {
            out.emplace_back("vq.l" + std::to_string(l) + ".w", affines_[l].w);
            out.emplace_back("vq.l" + std::to_string(l) + ".b", affines_[l].b);
        }
    }
    return out;
}

void Quantizer::dump_codebook_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write codebook csv: " + path);
    out << "level,code,usage,l2_norm\n";
    for (int l = 0; l < cfg_.levels; ++l) {
        const Codebook& cb = codebooks_[l];
        const auto cv = cb.entries.values();
        for (int k = 0; k < cfg_.codebook_size; ++k) {
            double norm = 0.0;
            const float* e = cv.data() + static_cast<size_t>(k) * cfg_.latent_dim;
            for (int j = 0; j < cfg_.latent_dim; ++j) norm += static_cast<double>(e[j]) * e[j];
            out << l << ',' << k << ',' << cb.ema_counts[k] << ',' << std::sqrt(norm) << "\n";
        }
    }
}

} // namespace motok
