#include "motok/train.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "motok/metrics.hpp"
#include "motok/prompt.hpp"

namespace motok {

// ---------------- optimizer ----------------

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i].second.numel(), 0.0f);
        v_[i].assign(params_[i].second.numel(), 0.0f);
    }
}

bool AdamW::step(float lr) {
    for (auto& [name, p] : params_) {
        const auto& g = p.node()->grad;
        for (float x : g)
            if (!std::isfinite(x)) {
                ++skipped_;
                return false;
            }
    }
    ++t_;
    const float bc1 = 1.0f - static_cast<float>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const float bc2 = 1.0f - static_cast<float>(std::pow(cfg_.beta2, static_cast<double>(t_)));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        auto pv = p.mutable_values();
        const auto& g = p.node()->grad;
        const bool has_grad = !g.empty();
        float* m = m_[i].data();
        float* v = v_[i].data();
        for (size_t j = 0; j < pv.size(); ++j) {
            const float gj = has_grad ? g[j] : 0.0f;
            m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * gj;
            v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * gj * gj;
            const float mhat = m[j] / bc1;
            const float vhat = v[j] / bc2;
            if (cfg_.weight_decay != 0.0f) pv[j] -= lr * cfg_.weight_decay * pv[j];
            pv[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
    return true;
}

void AdamW::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

void AdamW::save_state(Checkpoint& ck, const std::string& prefix) const {
    ck.put_scalar_i64(prefix + ".t", t_);
    ck.put_scalar_i64(prefix + ".skipped", skipped_);
    for (size_t i = 0; i < params_.size(); ++i) {
        const auto n = static_cast<int>(params_[i].second.numel());
        ck.put_f32(prefix + ".m." + params_[i].first, {n}, m_[i]);
        ck.put_f32(prefix + ".v." + params_[i].first, {n}, v_[i]);
    }
}

void AdamW::load_state(const Checkpoint& ck, const std::string& prefix) {
    t_ = ck.get_scalar_i64(prefix + ".t");
    skipped_ = ck.get_scalar_i64(prefix + ".skipped");
    for (size_t i = 0; i < params_.size(); ++i) {
        const auto m = ck.get_f32(prefix + ".m." + params_[i].first);
        const auto v = ck.get_f32(prefix + ".v." + params_[i].first);
        if (m.size() != m_[i].size() || v.size() != v_[i].size())
            throw IoError("optimizer state size mismatch for " + params_[i].first);
        m_[i].assign(m.begin(), m.end());
        v_[i].assign(v.begin(), v.end());
    }
}

double clip_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params,
                      double max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : params)
        for (float g : p.node()->grad) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const float scale = static_cast<float>(max_norm / (norm + 1e-6));
        for (const auto& [name, p] : params)
            for (float& g : p.node()->grad) g *= scale;
    }
    return norm;
}

float cosine_lr(int64_t step, int64_t total, float lr_start, float lr_end) {
    if (total < 1) throw ValidationError("cosine_lr: total must be >= 1");
    if (step < 0) throw ValidationError("cosine_lr: negative step");
    if (step > total) return lr_end;
    const double x = 3.14159265358979323846 * static_cast<double>(step) / static_cast<double>(total);
    return static_cast<float>(lr_end + 0.5 * (static_cast<double>(lr_start) - lr_end) *
                                           (1.0 + std::cos(x)));
}

// ---------------- config plumbing ----------------

QuantizerConfig quantizer_config_from(const Config& cfg) {
    QuantizerConfig qc;
    const std::string preset = cfg.get_str("vq.preset", "desk");
    if (preset == "paper") {
        qc.latent_dim = 128;
        qc.hidden_dim = 128;
        qc.codebook_size = 8192;
    } else if (preset != "desk") {
        throw ConfigError("vq.preset must be desk or paper");
    }
    qc.input_dim = static_cast<int>(cfg.get_int("data.dim", qc.input_dim));
    qc.latent_dim = static_cast<int>(cfg.get_int("vq.latent_dim", qc.latent_dim));
    qc.hidden_dim = static_cast<int>(cfg.get_int("vq.hidden_dim", qc.hidden_dim));
    qc.levels = static_cast<int>(cfg.get_int("vq.levels", qc.levels));
    qc.codebook_size = static_cast<int>(cfg.get_int("vq.codebook_size", qc.codebook_size));
    qc.blocks = static_cast<int>(cfg.get_int("vq.blocks", qc.blocks));
    qc.kernel = static_cast<int>(cfg.get_int("vq.kernel", qc.kernel));
    qc.dropout = static_cast<float>(cfg.get_double("vq.dropout", qc.dropout));
    qc.ema_decay = static_cast<float>(cfg.get_double("vq.ema_decay", qc.ema_decay));
    qc.dead_threshold = static_cast<float>(cfg.get_double("vq.dead_threshold", qc.dead_threshold));
    qc.reset_patience = static_cast<int>(cfg.get_int("vq.reset_patience", qc.reset_patience));
    qc.eps_inv = static_cast<float>(cfg.get_double("vq.eps_inv", qc.eps_inv));
    qc.learn_affine = cfg.get_bool("vq.learn_affine", qc.learn_affine);
    qc.beta = static_cast<float>(cfg.get_double("vq.beta", qc.beta));
    qc.gamma = static_cast<float>(cfg.get_double("vq.gamma", qc.gamma));
    qc.lambda = static_cast<float>(cfg.get_double("vq.lambda", qc.lambda));
    return qc;
}

void quantizer_config_into(const QuantizerConfig& qc, Config& cfg) {
    cfg.set_int("data.dim", qc.input_dim);
    cfg.set_int("vq.latent_dim", qc.latent_dim);
    cfg.set_int("vq.hidden_dim", qc.hidden_dim);
    cfg.set_int("vq.levels", qc.levels);
    cfg.set_int("vq.codebook_size", qc.codebook_size);
    cfg.set_int("vq.blocks", qc.blocks);
    cfg.set_int("vq.kernel", qc.kernel);
    cfg.set_double("vq.dropout", qc.dropout);
    cfg.set_double("vq.ema_decay", qc.ema_decay);
    cfg.set_double("vq.dead_threshold", qc.dead_threshold);
    cfg.set_int("vq.reset_patience", qc.reset_patience);
    cfg.set_double("vq.eps_inv", qc.eps_inv);
    cfg.set("vq.learn_affine", qc.learn_affine ? "true" : "false");
    cfg.set_double("vq.beta", qc.beta);
    cfg.set_double("vq.gamma", qc.gamma);
    cfg.set_double("vq.lambda", qc.lambda);
}

TokenModelConfig model_config_from(const Config& cfg) {
    const std::string preset = cfg.get_str("rqhc.preset", "desk");
    TokenModelConfig mc;
    if (preset == "paper") {
        mc = paper_model_config();
    } else if (preset == "desk") {
        mc = desk_model_config(static_cast<int>(cfg.get_int("rqhc.levels", 6)),
                               static_cast<int>(cfg.get_int("rqhc.codebook_size", 64)));
    } else {
        throw ConfigError("rqhc.preset must be desk or paper");
    }
    mc.levels = static_cast<int>(cfg.get_int("rqhc.levels", mc.levels));
    mc.codebook_size = static_cast<int>(cfg.get_int("rqhc.codebook_size", mc.codebook_size));
    mc.d_model = static_cast<int>(cfg.get_int("rqhc.d_model", mc.d_model));
    mc.heads = cfg.get_int_list("rqhc.heads", mc.heads);
    mc.layers = cfg.get_int_list("rqhc.layers", mc.layers);
    mc.rel_radius = static_cast<int>(cfg.get_int("rqhc.rel_radius", mc.rel_radius));
    mc.attn_window = static_cast<int>(cfg.get_int("rqhc.attn_window", mc.attn_window));
    mc.ff_mult = static_cast<int>(cfg.get_int("rqhc.ff_mult", mc.ff_mult));
    mc.dropout = static_cast<float>(cfg.get_double("rqhc.dropout", mc.dropout));
    // lists may come from a preset sized for a different level count
    if (static_cast<int>(mc.heads.size()) != mc.levels ||
        static_cast<int>(mc.layers.size()) != mc.levels) {
        TokenModelConfig resized = desk_model_config(mc.levels, mc.codebook_size);
        if (!cfg.has("rqhc.heads")) mc.heads = resized.heads;
        if (!cfg.has("rqhc.layers")) mc.layers = resized.layers;
    }
    return mc;
}

void model_config_into(const TokenModelConfig& mc, Config& cfg) {
    cfg.set_int("rqhc.levels", mc.levels);
    cfg.set_int("rqhc.codebook_size", mc.codebook_size);
    cfg.set_int("rqhc.d_model", mc.d_model);
    auto list = [](const std::vector<int>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(v[i]);
        }
        return s;
    };
    cfg.set("rqhc.heads", list(mc.heads));
    cfg.set("rqhc.layers", list(mc.layers));
    cfg.set_int("rqhc.rel_radius", mc.rel_radius);
    cfg.set_int("rqhc.attn_window", mc.attn_window);
    cfg.set_int("rqhc.ff_mult", mc.ff_mult);
    cfg.set_double("rqhc.dropout", mc.dropout);
}

TrainConfig train_config_from(const Config& cfg, const std::string& stage) {
    if (stage != "vq" && stage != "rqhc") throw ConfigError("train stage must be vq or rqhc");
    TrainConfig tc;
    tc.stage = stage;
    const std::string s = "train " + stage;
    const std::string preset = cfg.get_str(s + ".preset", "desk");
    if (stage == "vq") {
        tc.lr_start = 2e-4f;
        tc.lr_end = 2e-5f;
        tc.steps = 2000;
        tc.batch = 64;
        tc.window = 64;
        tc.clip = 0.0f;
    } else {
        tc.lr_start = 3e-4f;
        tc.lr_end = 3e-5f;
        tc.steps = 5000;
        tc.batch = 32;
        tc.window = 64;
        tc.clip = 1.0f;
        tc.weight_decay = 0.01f;
    }
    if (preset == "paper") {
        if (stage == "vq") {
            tc.lr_start = 2e-4f; // flat AdamW rate in the reference setup
            tc.lr_end = 2e-4f;
            tc.batch = 512;
        } else {
            tc.lr_start = 2.5e-5f;
            tc.lr_end = 3e-6f;
            tc.batch = 32;
        }
    } else if (preset != "desk") {
        throw ConfigError(s + ".preset must be desk or paper");
    }
    tc.lr_start = static_cast<float>(cfg.get_double(s + ".lr_start", tc.lr_start));
    tc.lr_end = static_cast<float>(cfg.get_double(s + ".lr_end", tc.lr_end));
    tc.steps = cfg.get_int(s + ".steps", tc.steps);
    tc.batch = static_cast<int>(cfg.get_int(s + ".batch", tc.batch));
    tc.window = static_cast<int>(cfg.get_int(s + ".window", tc.window));
    tc.seed = static_cast<uint64_t>(cfg.get_int(s + ".seed", 1));
    tc.weight_decay = static_cast<float>(cfg.get_double(s + ".weight_decay", tc.weight_decay));
    tc.clip = static_cast<float>(cfg.get_double(s + ".clip", tc.clip));
    tc.eval_every = cfg.get_int(s + ".eval_every", tc.eval_every);
    tc.checkpoint_every = cfg.get_int(s + ".checkpoint_every", tc.checkpoint_every);
    tc.eval_sequences = static_cast<int>(cfg.get_int(s + ".eval_sequences", tc.eval_sequences));
    if (tc.lr_start < tc.lr_end || tc.lr_end <= 0.0f)
        throw ConfigError("train: need lr_start >= lr_end > 0");
    return tc;
}

void train_config_into(const TrainConfig& tc, Config& cfg) {
    const std::string s = "train " + tc.stage;
    cfg.set_double(s + ".lr_start", tc.lr_start);
    cfg.set_double(s + ".lr_end", tc.lr_end);
    cfg.set_int(s + ".steps", tc.steps);
    cfg.set_int(s + ".batch", tc.batch);
    cfg.set_int(s + ".window", tc.window);
    cfg.set_int(s + ".seed", static_cast<int64_t>(tc.seed));
    cfg.set_double(s + ".weight_decay", tc.weight_decay);
    cfg.set_double(s + ".clip", tc.clip);
    cfg.set_int(s + ".eval_every", tc.eval_every);
    cfg.set_int(s + ".checkpoint_every", tc.checkpoint_every);
    cfg.set_int(s + ".eval_sequences", tc.eval_sequences);
}

// ---------------- checkpoints ----------------

namespace {

void put_params(Checkpoint& ck, std::vector<std::pair<std::string, Tensor>> params) {
    for (auto& [name, t] : params) ck.put_f32("p." + name, t.shape(), t.values());
}

void load_params(const Checkpoint& ck, std::vector<std::pair<std::string, Tensor>> params) {
    for (auto& [name, t] : params) {
        const auto data = ck.get_f32("p." + name);
        auto dst = t.mutable_values();
        if (data.size() != dst.size()) throw IoError("checkpoint shape mismatch for " + name);
        std::copy(data.begin(), data.end(), dst.begin());
    }
}

} // namespace

void save_quantizer_checkpoint(const std::string& path, Quantizer& q, const AdamW* opt,
                               int64_t step, const Config& snapshot, BatchIter::State iter_state) {
    Checkpoint ck;
    ck.put_bytes("config", snapshot.canonical_text());
    ck.put_scalar_i64("step", step);
    ck.put_scalar_i64("iter.epoch", iter_state.epoch);
    ck.put_scalar_i64("iter.cursor", iter_state.cursor);
    ck.put_bytes("kind", "vq");
    put_params(ck, q.parameters());
    const auto& cfg = q.config();
    for (int l = 0; l < cfg.levels; ++l) {
        const Codebook& cb = q.codebook(l);
        const std::string p = "cb" + std::to_string(l);
        ck.put_f32(p + ".entries", cb.entries.shape(), cb.entries.values());
        ck.put_f32(p + ".ema_counts", {cfg.codebook_size}, cb.ema_counts);
        ck.put_f32(p + ".ema_sums", {cfg.codebook_size, cfg.latent_dim}, cb.ema_sums);
        std::vector<int64_t> stale(cb.stale_steps.begin(), cb.stale_steps.end());
        ck.put_i64(p + ".stale", stale);
        ck.put_scalar_i64(p + ".init", cb.initialized ? 1 : 0);
        // affine saved even when frozen (not in parameters())
        if (!cfg.learn_affine) {
            ck.put_f32(p + ".w", q.affine(l).w.shape(), q.affine(l).w.values());
            ck.put_f32(p + ".b", q.affine(l).b.shape(), q.affine(l).b.values());
        }
    }
    ck.put_f32("stats.mean", {q.stats.dim()}, q.stats.mean);
    ck.put_f32("stats.std", {q.stats.dim()}, q.stats.stdev);
    const float fps[1] = {q.sample_fps};
    ck.put_f32("fps", {1}, fps);
    if (opt) opt->save_state(ck, "adam");
    ck.save(path);
}

LoadedQuantizer load_quantizer_checkpoint(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    if (ck.get_bytes("kind") != "vq") throw IoError("not a quantizer checkpoint: " + path);
    LoadedQuantizer out;
    out.snapshot = Config::parse(ck.get_bytes("config"));
    out.qcfg = quantizer_config_from(out.snapshot);
    Rng tmp(0);
    out.quantizer = std::make_unique<Quantizer>(out.qcfg, tmp);
    load_params(ck, out.quantizer->parameters());
    for (int l = 0; l < out.qcfg.levels; ++l) {
        Codebook& cb = out.quantizer->codebook(l);
        const std::string p = "cb" + std::to_string(l);
        auto e = ck.get_f32(p + ".entries");
        std::copy(e.begin(), e.end(), cb.entries.mutable_values().begin());
        auto counts = ck.get_f32(p + ".ema_counts");
        cb.ema_counts.assign(counts.begin(), counts.end());
        auto sums = ck.get_f32(p + ".ema_sums");
        cb.ema_sums.assign(sums.begin(), sums.end());
        auto stale = ck.get_i64(p + ".stale");
        cb.stale_steps.assign(stale.begin(), stale.end());
        cb.initialized = ck.get_scalar_i64(p + ".init") != 0;
        if (!out.qcfg.learn_affine) {
            auto w = ck.get_f32(p + ".w");
            std::copy(w.begin(), w.end(), out.quantizer->affine(l).w.mutable_values().begin());
            auto b = ck.get_f32(p + ".b");
            std::copy(b.begin(), b.end(), out.quantizer->affine(l).b.mutable_values().begin());
        }
    }
    auto mean = ck.get_f32("stats.mean");
    auto stdv = ck.get_f32("stats.std");
    out.quantizer->stats.mean.assign(mean.begin(), mean.end());
    out.quantizer->stats.stdev.assign(stdv.begin(), stdv.end());
    if (ck.has("fps")) out.quantizer->sample_fps = ck.get_f32("fps")[0];
    out.step = ck.get_scalar_i64("step");
    out.iter_state = {ck.get_scalar_i64("iter.epoch"), ck.get_scalar_i64("iter.cursor")};
    out.raw = std::move(ck);
    return out;
}

void save_model_checkpoint(const std::string& path, TokenModel& m, const AdamW* opt, int64_t step,
                           const Config& snapshot, BatchIter::State iter_state) {
    Checkpoint ck;
    ck.put_bytes("config", snapshot.canonical_text());
    ck.put_bytes("kind", "rqhc");
    ck.put_scalar_i64("step", step);
    ck.put_scalar_i64("iter.epoch", iter_state.epoch);
    ck.put_scalar_i64("iter.cursor", iter_state.cursor);
    put_params(ck, m.parameters());
    if (opt) opt->save_state(ck, "adam");
    ck.save(path);
}

LoadedModel load_model_checkpoint(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    if (ck.get_bytes("kind") != "rqhc") throw IoError("not a token-model checkpoint: " + path);
    LoadedModel out;
    out.snapshot = Config::parse(ck.get_bytes("config"));
    out.mcfg = model_config_from(out.snapshot);
    Rng tmp(0);
    out.model = std::make_unique<TokenModel>(out.mcfg, tmp);
    load_params(ck, out.model->parameters());
    out.step = ck.get_scalar_i64("step");
    out.iter_state = {ck.get_scalar_i64("iter.epoch"), ck.get_scalar_i64("iter.cursor")};
    out.raw = std::move(ck);
    return out;
}

// ---------------- VQ training ----------------

VqTrainResult train_vq(Quantizer& q, const Dataset& ds, const TrainConfig& tc,
                       const std::string& out_ckpt, const std::string& metrics_csv,
                       const Config& snapshot, const std::string& resume_from) {
    if (tc.stage != "vq") throw ContractError("train_vq: wrong stage config");
    q.stats = ds.stats;
    q.sample_fps = ds.fps;

    BatchIter iter(&ds.train, &ds.stats, tc.batch, tc.window, mix_seed(tc.seed, "data"));
    AdamWConfig acfg;
    acfg.weight_decay = tc.weight_decay;
    AdamW opt(q.parameters(), acfg);

    int64_t start_step = 0;
    if (!resume_from.empty()) {
        LoadedQuantizer lq = load_quantizer_checkpoint(resume_from);
        // adopt loaded weights/state into q by re-reading arrays
        load_params(lq.raw, q.parameters());
        for (int l = 0; l < q.config().levels; ++l) {
            Codebook& dst = q.codebook(l);
            const Codebook& src = lq.quantizer->codebook(l);
            std::copy(src.entries.values().begin(), src.entries.values().end(),
                      dst.entries.mutable_values().begin());
            dst.ema_counts = src.ema_counts;
            dst.ema_sums = src.ema_sums;
            dst.stale_steps = src.stale_steps;
            dst.initialized = src.initialized;
        }
        opt.load_state(lq.raw, "adam");
        start_step = lq.step;
        iter.restore(lq.iter_state);
    }

    std::ofstream csv;
    if (!metrics_csv.empty()) {
        csv.open(metrics_csv, start_step > 0 ? std::ios::app : std::ios::trunc);
        if (!csv) throw IoError("cannot write metrics csv: " + metrics_csv);
        if (start_step == 0) {
            csv << "step,lr,loss,recon,commit,decor,modulation,eval_recon_l1";
            for (int l = 0; l < q.config().levels; ++l) csv << ",ppl_l" << l;
            for (int l = 0; l + 1 < q.config().levels; ++l) csv << ",cov_l" << l;
            csv << "\n";
        }
    }

    const int dl = q.config().latent_dim;
    VqTrainResult res;
    float last_loss = 0;
    for (int64_t step = start_step; step < tc.steps; ++step) {
        const float lr = cosine_lr(step, tc.steps, tc.lr_start, tc.lr_end);
        Batch b = *iter.next();
        const int B = b.frames.dim(0), W = b.frames.dim(1);
        Rng drop_rng(mix_seed(mix_seed(tc.seed, "dropout"), static_cast<uint64_t>(step)));
        Rng ema_rng(mix_seed(mix_seed(tc.seed, "ema"), static_cast<uint64_t>(step)));

        Tensor r0 = q.encode(b.frames, true, &drop_rng);
        Tensor r0f = view(r0, {B * W, dl});
        q.maybe_init_codebooks(r0f, b.mask, ema_rng);
        QuantizeTrace trace = q.quantize_all(r0f);
        Tensor recon = q.decode_latent(view(trace.zhat_st, {B, W, dl}), true, &drop_rng);
        VqLossBreakdown lb = q.vq_loss(b.frames, recon, trace, b.mask);

        opt.zero_grad();
        backward(lb.loss);
        if (opt.step(lr)) q.clamp_affine();
        q.ema_update(trace, b.mask, ema_rng);
        last_loss = lb.total;

        const bool do_eval = tc.eval_every > 0 && ((step + 1) % tc.eval_every == 0 ||
                                                   step + 1 == tc.steps);
        std::string eval_cols;
        if (do_eval && !ds.eval.empty()) {
            ReconReport rep = recon_report(q, ds.eval, ds.stats, tc.eval_sequences);
            CodebookStats cs = codebook_stats(q, ds.eval, ds.stats, tc.eval_sequences);
            std::ostringstream ss;
            ss << rep.l1_per_element;
            for (double p : cs.perplexity) ss << "," << p;
            for (double c : rep.cov_norms) ss << "," << c;
            eval_cols = ss.str();
            res.final_eval_recon_l1 = static_cast<float>(rep.l1_per_element);
        }
        if (csv.is_open()) {
            csv << step << ',' << lr << ',' << lb.total << ',' << lb.recon << ',' << lb.commit
                << ',' << lb.decor << ',' << lb.modulation << ',' << eval_cols << "\n";
        }
        if (!out_ckpt.empty() && tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 &&
            step + 1 < tc.steps)
            save_quantizer_checkpoint(out_ckpt, q, &opt, step + 1, snapshot, iter.state());
    }
    res.steps = tc.steps;
    res.final_train_loss = last_loss;
    if (!out_ckpt.empty())
        save_quantizer_checkpoint(out_ckpt, q, &opt, tc.steps, snapshot, iter.state());
    return res;
}

// ---------------- token-model training ----------------

std::vector<TokenGrid> precompute_grids(const Quantizer& q, const std::vector<MotionSequence>& seqs,
                                        const NormStats& stats, bool append_eos) {
    NoGradGuard ng;
    const int dl = q.config().latent_dim;
    std::vector<TokenGrid> grids;
    grids.reserve(seqs.size());
    for (const auto& s : seqs) {
        const MotionSequence norm = normalize(s, stats);
        Tensor m = Tensor::from({1, norm.frames, norm.dim}, norm.data);
        QuantizeTrace trace = q.quantize_all(view(q.encode(m), {norm.frames, dl}));
        TokenGrid grid = q.grid_from_trace(trace);
        if (append_eos) {
            std::vector<int> eos(grid.levels, q.config().codebook_size);
            grid.push_column(eos);
        }
        grids.push_back(std::move(grid));
    }
    return grids;
}

namespace {

struct GridBatch {
    std::vector<TokenGrid> grids;
    std::vector<std::vector<float>> prompts;
    std::vector<float> mask;
};

class GridBatcher {
  public:
    GridBatcher(const std::vector<TokenGrid>* grids, const std::vector<std::vector<float>>* prompts,
                int batch, int window, uint64_t seed)
        : grids_(grids), prompts_(prompts), batch_(batch), window_(window), seed_(seed) {
        if (grids_->empty()) throw ValidationError("grid batcher: no grids");
        if (batch_ > static_cast<int>(grids_->size()))
            throw StateError("grid batcher exhausted: batch exceeds dataset size");
        start_epoch(0);
    }

    GridBatch next() {
        const int n = static_cast<int>(grids_->size());
        if (cursor_ + batch_ > n) start_epoch(epoch_ + 1);
        GridBatch out;
        out.mask.assign(static_cast<size_t>(batch_) * window_, 0.0f);
        for (int r = 0; r < batch_; ++r) {
            const int gi = order_[cursor_ + r];
            const TokenGrid& g = (*grids_)[gi];
            Rng wrng(mix_seed(mix_seed(seed_, "window"),
                              mix_seed(static_cast<uint64_t>(epoch_),
                                       static_cast<uint64_t>(cursor_ + r))));
            const int span = std::min(window_, g.n);
            const int start = g.n > window_ ? wrng.next_int(g.n - window_ + 1) : 0;
            TokenGrid slice(g.levels, window_);
            for (int l = 0; l < g.levels; ++l)
                for (int i = 0; i < span; ++i) slice.set(l, i, g.at(l, start + i));
            for (int i = 0; i < span; ++i)
                out.mask[static_cast<size_t>(r) * window_ + i] = 1.0f;
            out.grids.push_back(std::move(slice));
            out.prompts.push_back((*prompts_)[gi]);
        }
        cursor_ += batch_;
        return out;
    }

    BatchIter::State state() const { return {epoch_, cursor_}; }
    void restore(BatchIter::State s) {
        start_epoch(s.epoch);
        cursor_ = s.cursor;
    }

  private:
    void start_epoch(int64_t epoch) {
        epoch_ = epoch;
        cursor_ = 0;
        order_.resize(grids_->size());
        for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
        Rng rng(mix_seed(mix_seed(seed_, "epoch"), static_cast<uint64_t>(epoch)));
        for (size_t i = order_.size(); i > 1; --i) {
            const int j = rng.next_int(static_cast<int>(i));
            std::swap(order_[i - 1], order_[j]);
        }
    }

    const std::vector<TokenGrid>* grids_;
    const std::vector<std::vector<float>>* prompts_;
    int batch_;
    int window_;
    uint64_t seed_;
    int64_t epoch_ = 0;
    int64_t cursor_ = 0;
    std::vector<int> order_;
};

} // namespace

RqhcTrainResult train_rqhc(TokenModel& m, const Quantizer& frozen_q, const Dataset& ds,
                           const TrainConfig& tc, const std::string& out_ckpt,
                           const std::string& metrics_csv, const Config& snapshot,
                           const std::string& resume_from, const RqhcTrainOptions& opts) {
    if (tc.stage != "rqhc") throw ContractError("train_rqhc: wrong stage config");
    if (m.config().levels != frozen_q.config().levels ||
        m.config().codebook_size != frozen_q.config().codebook_size)
        throw ConfigError("train_rqhc: model and quantizer level/codebook shapes disagree");

    std::vector<TokenGrid> grids = precompute_grids(frozen_q, ds.train, ds.stats);
    std::vector<std::vector<float>> prompts;
    prompts.reserve(ds.train.size());
    for (const auto& s : ds.train) {
        const std::string caption = s.caption.empty() ? "motion" : s.caption;
        prompts.push_back(embed_prompt(caption, m.config().d_model).vec);
    }
    GridBatcher batcher(&grids, &prompts, tc.batch, tc.window, mix_seed(tc.seed, "data"));

    AdamWConfig acfg;
    acfg.weight_decay = tc.weight_decay;
    AdamW opt(m.parameters(), acfg);

    int64_t start_step = 0;
    if (!resume_from.empty()) {
        LoadedModel lm = load_model_checkpoint(resume_from);
        load_params(lm.raw, m.parameters());
        opt.load_state(lm.raw, "adam");
        start_step = lm.step;
        batcher.restore(lm.iter_state);
    }

    std::ofstream csv;
    if (!metrics_csv.empty()) {
        csv.open(metrics_csv, start_step > 0 ? std::ios::app : std::ios::trunc);
        if (!csv) throw IoError("cannot write metrics csv: " + metrics_csv);
        if (start_step == 0) csv << "step,lr,ce,eval_ce,eval_acc\n";
    }

    RqhcTrainResult res;
    int64_t done = tc.steps;
    for (int64_t step = start_step; step < tc.steps; ++step) {
        const float lr = cosine_lr(step, tc.steps, tc.lr_start, tc.lr_end);
        GridBatch gb = batcher.next();
        Rng drop_rng(mix_seed(mix_seed(tc.seed, "dropout"), static_cast<uint64_t>(step)));
        auto logits = m.forward_train(gb.grids, gb.prompts, true, &drop_rng);
        Tensor ce = m.ce_loss(logits, gb.grids, gb.mask);
        opt.zero_grad();
        backward(ce);
        if (tc.clip > 0.0f) clip_grad_norm(opt.params(), tc.clip);
        opt.step(lr);
        res.final_ce = ce.item();

        const bool do_eval = tc.eval_every > 0 &&
                             ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps);
        std::string eval_cols = ",";
        if (do_eval && !ds.eval.empty()) {
            TokenEval te = token_eval(m, frozen_q, ds.eval, ds.stats, tc.eval_sequences);
            std::ostringstream ss;
            ss << te.ce << ',' << te.acc;
            eval_cols = ss.str();
            res.final_eval_acc = static_cast<float>(te.acc);
        }
        if (csv.is_open())
            csv << step << ',' << lr << ',' << res.final_ce << ',' << eval_cols << "\n";

        if (opts.stop_below_ce > 0.0f && res.final_ce < opts.stop_below_ce) {
            res.steps_to_target = step + 1;
            done = step + 1;
            break;
        }
        if (!out_ckpt.empty() && tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 &&
            step + 1 < tc.steps)
            save_model_checkpoint(out_ckpt, m, &opt, step + 1, snapshot, batcher.state());
    }
    res.steps = done;
    if (!out_ckpt.empty())
        save_model_checkpoint(out_ckpt, m, &opt, done, snapshot, batcher.state());
    return res;
}

} // namespace motok
