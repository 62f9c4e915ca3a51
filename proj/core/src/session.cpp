#include "motok/session.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "motok/prompt.hpp"
#include "motok/train.hpp"

using json = nlohmann::json;

namespace motok {

std::string session_config_hash(const TokenModel& model, const Quantizer& quantizer) {
    Config c;
    model_config_into(model.config(), c);
    quantizer_config_into(quantizer.config(), c);
    std::ostringstream ss;
    ss << std::hex << c.hash();
    return ss.str();
}

GenerationSession::GenerationSession(const TokenModel& model, const Quantizer& quantizer,
                                     const std::string& prompt, SamplerConfig sampler, int window,
                                     bool ignore_eos, bool recompute_condition)
    : model_(&model), quantizer_(&quantizer), sampler_(sampler),
      rng_(mix_seed(sampler.seed, "sampler")), ignore_eos_(ignore_eos),
      recompute_condition_(recompute_condition) {
    if (model.config().levels != quantizer.config().levels ||
        model.config().codebook_size != quantizer.config().codebook_size)
        throw ConfigError("session: model and quantizer level/codebook shapes disagree");
    if (prompt.empty()) throw ValidationError("session: empty prompt");
    if (sampler_.temperature < 0.0f || sampler_.temperature > 10.0f)
        throw ValidationError("session: temperature must be in [0, 10]");
    if (sampler_.top_k < 1 || sampler_.top_k > model.vocab_out())
        throw ValidationError("session: top_k must be in [1, K+1]");
    window_ = window > 0 ? window : model.config().attn_window;
    cache_ = model.start_cache(embed_prompt(prompt, model.config().d_model).vec, window_);
    prompts_.push_back(prompt);
}

int GenerationSession::sample_token(int level, std::span<const float> logits) {
    const int V = static_cast<int>(logits.size());
    const int eos = model_->eos_id();
    std::vector<float> l(logits.begin(), logits.end());
    // EOS terminates on level 0 only; deeper levels never emit it
    if (ignore_eos_ || level > 0) l[eos] = -std::numeric_limits<float>::infinity();

    if (sampler_.temperature == 0.0f) {
        int arg = 0;
        for (int i = 1; i < V; ++i)
            if (l[i] > l[arg]) arg = i;
        return arg;
    }
    const float invT = 1.0f / sampler_.temperature;
    std::vector<std::pair<float, int>> ranked(V);
    for (int i = 0; i < V; ++i) ranked[i] = {l[i] * invT, i};
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const int k = std::min(sampler_.top_k, V);
    double z = 0.0;
    std::vector<double> p(k);
    const float mx = ranked[0].first;
    for (int i = 0; i < k; ++i) {
        p[i] = std::exp(static_cast<double>(ranked[i].first) - mx);
        z += p[i];
    }
    const double u = rng_.next_double() * z;
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
        acc += p[i];
        if (u < acc) return ranked[i].second;
    }
    return ranked[k - 1].second;
}

std::optional<std::vector<int>> GenerationSession::step() {
    if (terminated_) throw StateError("session: step() on a terminated session");
    const int prev = columns_.empty() ? 0 : columns_.back()[0];
    auto res = model_->forward_step(
        cache_, prev, [this](int level, std::span<const float> lg) {
            return sample_token(level, lg);
        });
    last_logits_ = std::move(res.logits);
    if (!ignore_eos_ && res.tokens[0] == model_->eos_id()) {
        terminated_ = true;
        return std::nullopt;
    }
    columns_.push_back(res.tokens);
    return res.tokens;
}

void GenerationSession::switch_prompt(const std::string& new_prompt) {
    if (terminated_) throw StateError("session: switch_prompt() on a terminated session");
    if (new_prompt.empty()) throw ValidationError("session: empty prompt");
    if (recompute_condition_)
        model_->switch_condition(cache_, embed_prompt(new_prompt, model_->config().d_model).vec);
    const int pos = position();
    if (!switch_log_.empty() && switch_log_.back().first == pos) {
        switch_log_.back().second = new_prompt; // re-switch before stepping: replace
        prompts_.back() = new_prompt;
    } else {
        switch_log_.emplace_back(pos, new_prompt);
        prompts_.push_back(new_prompt);
    }
}

TokenGrid GenerationSession::emitted() const {
    const int levels = model_->config().levels;
    TokenGrid grid(levels, static_cast<int>(columns_.size()));
    for (int i = 0; i < grid.n; ++i)
        for (int l = 0; l < levels; ++l) grid.set(l, i, columns_[i][l]);
    return grid;
}

size_t GenerationSession::cache_bytes() const {
    size_t bytes = 0;
    for (const auto& lvl : cache_.levels)
        for (const auto& kv : lvl.layers)
            bytes += (kv.k_cond.size() + kv.v_cond.size() + kv.k.size() + kv.v.size()) *
                     sizeof(float);
    return bytes;
}

std::vector<std::vector<float>> GenerationSession::peek_logits() const {
    TokenModel::StepCache copy = cache_;
    const int prev = columns_.empty() ? 0 : columns_.back()[0];
    auto res = model_->forward_step(copy, prev, [](int, std::span<const float> lg) {
        int arg = 0;
        for (size_t i = 1; i < lg.size(); ++i)
            if (lg[i] > lg[arg]) arg = static_cast<int>(i);
        return arg;
    });
    return res.logits;
}

MotionSequence GenerationSession::finalize() const { return finalize_grid(*quantizer_, emitted()); }

SessionTranscript GenerationSession::transcript() const {
    SessionTranscript t;
    t.seed = sampler_.seed;
    t.temperature = sampler_.temperature;
    t.top_k = sampler_.top_k;
    t.window = window_;
    t.ignore_eos = ignore_eos_;
    t.recompute_condition = recompute_condition_;
    t.config_hash = session_config_hash(*model_, *quantizer_);
    // segments from the switch log; the final segment runs to the current end
    int seg_start = 0;
    for (size_t i = 0; i < prompts_.size(); ++i) {
        const int seg_end = i < switch_log_.size() ? switch_log_[i].first : position();
        t.segments.push_back({prompts_[i], seg_end - seg_start});
        seg_start = seg_end;
    }
    return t;
}

ScheduleRun run_schedule(const TokenModel& model, const Quantizer& quantizer,
                         const std::vector<ScheduleSegment>& segments, SamplerConfig sampler,
                         int window, bool ignore_eos, std::ostream* stream,
                         bool recompute_condition) {
    if (segments.empty()) throw ValidationError("run_schedule: empty schedule");
    for (const auto& s : segments)
        if (s.steps < 1) throw ValidationError("run_schedule: segment length must be >= 1");

    GenerationSession session(model, quantizer, segments[0].prompt, sampler, window, ignore_eos,
                              recompute_condition);
    ScheduleRun out;
    for (size_t si = 0; si < segments.size() && !session.terminated(); ++si) {
        if (si > 0) session.switch_prompt(segments[si].prompt);
        for (int i = 0; i < segments[si].steps; ++i) {
            auto col = session.step();
            if (!col) {
                out.terminated_early = true;
                break;
            }
            if (stream) {
                *stream << session.position() - 1 << '\t';
                for (size_t l = 0; l < col->size(); ++l) {
                    if (l) *stream << ' ';
                    *stream << (*col)[l];
                }
                *stream << '\t' << session.active_prompt_index() << '\n';
            }
        }
    }
    out.grid = session.emitted();
    out.transcript = session.transcript();
    return out;
}

MotionSequence finalize_grid(const Quantizer& quantizer, const TokenGrid& grid) {
    if (grid.n == 0) throw ValidationError("finalize: empty grid");
    const int eos = quantizer.config().codebook_size;
    std::vector<int> keep;
    for (int i = 0; i < grid.n; ++i)
        if (grid.at(0, i) != eos) keep.push_back(i);
    if (keep.empty()) throw ValidationError("finalize: grid contains only EOS columns");
    TokenGrid clean(grid.levels, static_cast<int>(keep.size()));
    for (int l = 0; l < grid.levels; ++l)
        for (size_t i = 0; i < keep.size(); ++i) clean.set(l, static_cast<int>(i), grid.at(l, keep[i]));

    NoGradGuard ng;
    Tensor motion = quantizer.decode_tokens(clean); // [1, n, d], normalized space
    MotionSequence seq;
    seq.frames = clean.n;
    seq.dim = quantizer.config().input_dim;
    seq.fps = quantizer.sample_fps;
    seq.data.assign(motion.values().begin(), motion.values().end());
    return denormalize(seq, quantizer.stats);
}

void write_transcript(const std::string& path, const SessionTranscript& t) {
    json j;
    j["seed"] = std::to_string(t.seed); // exact u64 as text
    j["temperature"] = t.temperature;
    j["top_k"] = t.top_k;
    j["window"] = t.window;
    j["ignore_eos"] = t.ignore_eos;
    j["recompute_condition"] = t.recompute_condition;
    j["config_hash"] = t.config_hash;
    j["segments"] = json::array();
    for (const auto& s : t.segments) j["segments"].push_back({{"prompt", s.prompt}, {"steps", s.steps}});
    std::ofstream out(path);
    if (!out) throw IoError("cannot write transcript: " + path);
    out << j.dump(2) << "\n";
}

SessionTranscript read_transcript(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open transcript: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError(std::string("bad transcript json: ") + e.what());
    }
    SessionTranscript t;
    t.seed = std::stoull(j.at("seed").get<std::string>());
    t.temperature = j.at("temperature").get<float>();
    t.top_k = j.at("top_k").get<int>();
    t.window = j.at("window").get<int>();
    t.ignore_eos = j.at("ignore_eos").get<bool>();
    t.recompute_condition = j.value("recompute_condition", true);
    t.config_hash = j.value("config_hash", "");
    for (const auto& s : j.at("segments"))
        t.segments.push_back({s.at("prompt").get<std::string>(), s.at("steps").get<int>()});
    return t;
}

} // namespace motok
