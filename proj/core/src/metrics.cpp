#include "motok/metrics.hpp"

#include <cmath>
#include <fstream>

#include "motok/prompt.hpp"

namespace motok {

namespace {

int effective_count(size_t split_size, int max_sequences) {
    if (max_sequences <= 0) return static_cast<int>(split_size);
    return std::min(static_cast<int>(split_size), max_sequences);
}

} // namespace

ReconReport recon_report(const Quantizer& q, const std::vector<MotionSequence>& split,
                         const NormStats& stats, int max_sequences) {
    if (split.empty()) throw ValidationError("recon_report: empty split");
    NoGradGuard ng;
    const int count = effective_count(split.size(), max_sequences);
    const int L = q.config().levels;
    const int dl = q.config().latent_dim;

    ReconReport rep;
    rep.sequences = count;
    rep.residual_norms.assign(L + 1, 0.0);
    double l1_sum = 0, l1f_sum = 0, l2f_sum = 0;
    int64_t frames = 0, latent_rows = 0;

    // pooled samples for cross-level covariance
    std::vector<std::vector<float>> phi_pool(L), rn_pool(L);

    for (int s = 0; s < count; ++s) {
        const MotionSequence norm = normalize(split[s], stats);
        const int T = norm.frames, d = norm.dim;
        Tensor m = Tensor::from({1, T, d}, norm.data);
        Tensor r0 = q.encode(m);
        QuantizeTrace trace = q.quantize_all(view(r0, {T, dl}));
        Tensor recon = q.decode_latent(view(trace.zhat, {1, T, dl}));
        const auto mv = m.values();
        const auto rv = recon.values();
        for (int t = 0; t < T; ++t) {
            double frame_l1 = 0, frame_l2 = 0;
            for (int j = 0; j < d; ++j) {
                const double dv = static_cast<double>(mv[static_cast<size_t>(t) * d + j]) -
                                  rv[static_cast<size_t>(t) * d + j];
                frame_l1 += std::fabs(dv);
                frame_l2 += dv * dv;
            }
            l1_sum += frame_l1;
            l1f_sum += frame_l1;
            l2f_sum += std::sqrt(frame_l2);
        }
        frames += T;

        for (int l = 0; l <= L; ++l) {
            const auto rr = trace.residuals[l].values();
            double acc = 0;
            for (int t = 0; t < T; ++t) {
                double nn = 0;
                for (int j = 0; j < dl; ++j) {
                    const double v = rr[static_cast<size_t>(t) * dl + j];
                    nn += v * v;
                }
                acc += std::sqrt(nn);
            }
            rep.residual_norms[l] += acc;
        }
        latent_rows += T;
        // pairs (phi^l, r^{l+1}) for l+1 < L, matching the decorrelation sum
        for (int l = 0; l + 1 < L; ++l) {
            const auto pv = trace.levels[l].phi.values();
            const auto nv = trace.residuals[l + 1].values();
            phi_pool[l].insert(phi_pool[l].end(), pv.begin(), pv.end());
            rn_pool[l].insert(rn_pool[l].end(), nv.begin(), nv.end());
        }
    }

    rep.frames = frames;
    const int d_in = q.config().input_dim;
    rep.l1_per_element = l1_sum / (static_cast<double>(frames) * d_in);
    rep.l1_per_frame = l1f_sum / static_cast<double>(frames);
    rep.l2_per_frame = l2f_sum / static_cast<double>(frames);
    for (auto& v : rep.residual_norms) v /= static_cast<double>(latent_rows);

    for (int l = 0; l + 1 < L; ++l) {
        if (phi_pool[l].empty()) continue;
        const int n = static_cast<int>(phi_pool[l].size()) / dl;
        if (n < 2) continue;
        // biased cross-covariance, Frobenius norm
        std::vector<double> mean_p(dl, 0), mean_r(dl, 0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dl; ++j) {
                mean_p[j] += phi_pool[l][static_cast<size_t>(i) * dl + j];
                mean_r[j] += rn_pool[l][static_cast<size_t>(i) * dl + j];
            }
        for (int j = 0; j < dl; ++j) {
            mean_p[j] /= n;
            mean_r[j] /= n;
        }
        double fro = 0;
        for (int a = 0; a < dl; ++a)
            for (int b = 0; b < dl; ++b) {
                double c = 0;
                for (int i = 0; i < n; ++i)
                    c += (phi_pool[l][static_cast<size_t>(i) * dl + a] - mean_p[a]) *
                         (rn_pool[l][static_cast<size_t>(i) * dl + b] - mean_r[b]);
                c /= n;
                fro += c * c;
            }
        rep.cov_norms.push_back(std::sqrt(fro));
    }
    return rep;
}

CodebookStats codebook_stats(const Quantizer& q, const std::vector<MotionSequence>& split,
                             const NormStats& stats, int max_sequences) {
    NoGradGuard ng;
    const int count = effective_count(split.size(), max_sequences);
    const int L = q.config().levels;
    const int K = q.config().codebook_size;
    const int dl = q.config().latent_dim;

    CodebookStats cs;
    cs.usage.assign(L, std::vector<int64_t>(K, 0));
    for (int s = 0; s < count; ++s) {
        const MotionSequence norm = normalize(split[s], stats);
        Tensor m = Tensor::from({1, norm.frames, norm.dim}, norm.data);
        Tensor r0 = q.encode(m);
        QuantizeTrace trace = q.quantize_all(view(r0, {norm.frames, dl}));
        for (int l = 0; l < L; ++l)
            for (int idx : trace.levels[l].indices) cs.usage[l][idx] += 1;
    }
    for (int l = 0; l < L; ++l) {
        int64_t total = 0;
        for (int64_t u : cs.usage[l]) total += u;
        double h = 0.0;
        int dead = 0;
        for (int64_t u : cs.usage[l]) {
            if (u == 0) {
                ++dead;
                continue;
            }
            const double p = static_cast<double>(u) / static_cast<double>(total);
            h -= p * std::log(p);
        }
        cs.perplexity.push_back(total > 0 ? std::exp(h) : 1.0);
        cs.dead.push_back(dead);
    }
    return cs;
}

TokenEval token_eval(const TokenModel& m, const Quantizer& q,
                     const std::vector<MotionSequence>& split, const NormStats& stats,
                     int max_sequences) {
    NoGradGuard ng;
    const int count = effective_count(split.size(), max_sequences);
    const int L = m.config().levels;
    const int V = m.vocab_out();
    const int dl = q.config().latent_dim;

    TokenEval te;
    te.ce_per_level.assign(L, 0.0);
    te.acc_per_level.assign(L, 0.0);
    int64_t positions = 0;

    for (int s = 0; s < count; ++s) {
        const MotionSequence norm = normalize(split[s], stats);
        Tensor mt = Tensor::from({1, norm.frames, norm.dim}, norm.data);
        QuantizeTrace trace = q.quantize_all(view(q.encode(mt), {norm.frames, dl}));
        TokenGrid grid = q.grid_from_trace(trace);
        std::vector<int> eos(grid.levels, m.eos_id());
        grid.push_column(eos);

        const std::string caption = split[s].caption.empty() ? "motion" : split[s].caption;
        std::vector<std::vector<float>> prompts = {
            embed_prompt(caption, m.config().d_model).vec};
        auto logits = m.forward_train({grid}, prompts);
        const int n = grid.n;
        for (int l = 0; l < L; ++l) {
            const auto lv = logits[l].values();
            for (int i = 0; i < n; ++i) {
                const float* row = lv.data() + static_cast<size_t>(i) * V;
                const int target = grid.at(l, i);
                // log-softmax at the target
                float mx = row[0];
                int arg = 0;
                for (int c = 1; c < V; ++c)
                    if (row[c] > mx) {
                        mx = row[c];
                        arg = c;
                    }
                double z = 0;
                for (int c = 0; c < V; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
                te.ce_per_level[l] += -(static_cast<double>(row[target]) - mx - std::log(z));
                te.acc_per_level[l] += arg == target ? 1.0 : 0.0;
            }
        }
        positions += n;
    }
    if (positions == 0) throw ValidationError("token_eval: empty split");
    te.tokens = positions * L;
    for (int l = 0; l < L; ++l) {
        te.ce_per_level[l] /= static_cast<double>(positions);
        te.acc_per_level[l] /= static_cast<double>(positions);
        te.ce += te.ce_per_level[l];
        te.acc += te.acc_per_level[l];
    }
    te.ce /= L;
    te.acc /= L;
    return te;
}

void write_eval_report(const std::string& path, const ReconReport& recon, const CodebookStats& cb,
                       const TokenEval* tokens) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path);
    out << "# Evaluation report (desk metrics only).\n";
    out << "# FID, R-Precision, MM-Dist and MultiModality are NOT computed here: they\n";
    out << "# require pretrained text-motion evaluator networks. Values below are\n";
    out << "# reconstruction/token statistics in normalized feature space.\n";
    out << "metric,value\n";
    out << "recon_l1_per_element," << recon.l1_per_element << "\n";
    out << "recon_l1_per_frame," << recon.l1_per_frame << "\n";
    out << "recon_l2_per_frame," << recon.l2_per_frame << "\n";
    out << "frames," << recon.frames << "\n";
    out << "sequences," << recon.sequences << "\n";
    for (size_t l = 0; l < recon.residual_norms.size(); ++l)
        out << "residual_norm_l" << l << "," << recon.residual_norms[l] << "\n";
    for (size_t l = 0; l < recon.cov_norms.size(); ++l)
        out << "cov_fro_l" << l << "_l" << l + 1 << "," << recon.cov_norms[l] << "\n";
    for (size_t l = 0; l < cb.perplexity.size(); ++l) {
        out << "codebook_perplexity_l" << l << "," << cb.perplexity[l] << "\n";
        out << "codebook_dead_l" << l << "," << cb.dead[l] << "\n";
    }
    if (tokens) {
        out << "token_ce," << tokens->ce << "\n";
        out << "token_acc," << tokens->acc << "\n";
        for (size_t l = 0; l < tokens->ce_per_level.size(); ++l) {
            out << "token_ce_l" << l << "," << tokens->ce_per_level[l] << "\n";
            out << "token_acc_l" << l << "," << tokens->acc_per_level[l] << "\n";
        }
    }
}

} // namespace motok
