#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "motok/quantizer.hpp"
#include "motok/token_model.hpp"

namespace motok {

struct SamplerConfig {
    float temperature = 1.0f; // 0 selects the argmax (greedy limit)
    int top_k = 16;
    uint64_t seed = 0;
};

struct ScheduleSegment {
    std::string prompt;
    int steps = 0;
};

struct SessionTranscript {
    uint64_t seed = 0;
    float temperature = 1.0f;
    int top_k = 16;
    int window = 0;
    bool ignore_eos = false;
    bool recompute_condition = true;
    std::vector<ScheduleSegment> segments;
    std::string config_hash; // model + quantizer configuration fingerprint
};

// Live decoding state: emitted token prefix, per-level attention caches, the
// current condition, and the sampler stream. One session is driven by one
// thread; any number of sessions may share the read-only model weights.
class GenerationSession {
  public:
    // recompute_condition: on switch_prompt, recompute the condition slot's
    // k/v entries (default). When false the stale entries are kept and only
    // the log changes (exposed for comparison; the new prompt then has no
    // effect on decoding).
    GenerationSession(const TokenModel& model, const Quantizer& quantizer,
                      const std::string& prompt, SamplerConfig sampler, int window = 0,
                      bool ignore_eos = false, bool recompute_condition = true);

    // Sample the next column. Returns the per-level ids, or nullopt when
    // level 0 emitted EOS (the session is then terminated).
    std::optional<std::vector<int>> step();

    // Replace the condition; the emitted prefix and cached token entries are
    // preserved, only the condition slot's cache entries are recomputed.
    void switch_prompt(const std::string& new_prompt);

    bool terminated() const { return terminated_; }
    int position() const { return static_cast<int>(columns_.size()); }
    TokenGrid emitted() const;
    const std::vector<std::pair<int, std::string>>& switch_log() const { return switch_log_; }
    int active_prompt_index() const { return static_cast<int>(prompts_.size()) - 1; }

    int cache_length() const { return cache_.token_count(); }
    size_t cache_bytes() const;

    // Next-column logits under a greedy token source, without advancing the
    // session (runs on a copy of the cache).
    std::vector<std::vector<float>> peek_logits() const;
    const std::vector<std::vector<float>>& last_logits() const { return last_logits_; }

    MotionSequence finalize() const;
    SessionTranscript transcript() const;

  private:
    int sample_token(int level, std::span<const float> logits);

    const TokenModel* model_;
    const Quantizer* quantizer_;
    TokenModel::StepCache cache_;
    std::vector<std::vector<int>> columns_; // emitted columns, one vector per position
    SamplerConfig sampler_;
    Rng rng_;
    bool ignore_eos_;
    bool terminated_ = false;
    std::vector<std::string> prompts_;
    std::vector<std::pair<int, std::string>> switch_log_; // (position, prompt)
    std::vector<std::vector<float>> last_logits_;
    int window_;
    bool recompute_condition_;
};

// start + alternating step/switch per schedule. The optional stream receives
// one record per position: "<position>\t<id per level, space-separated>\t<prompt index>".
struct ScheduleRun {
    TokenGrid grid;
    SessionTranscript transcript;
    bool terminated_early = false;
};
ScheduleRun run_schedule(const TokenModel& model, const Quantizer& quantizer,
                         const std::vector<ScheduleSegment>& segments, SamplerConfig sampler,
                         int window = 0, bool ignore_eos = false, std::ostream* stream = nullptr,
                         bool recompute_condition = true);

// Strip EOS columns, decode through the token path, denormalize with the
// quantizer's embedded stats. Pure function of the grid.
MotionSequence finalize_grid(const Quantizer& quantizer, const TokenGrid& grid);

void write_transcript(const std::string& path, const SessionTranscript& t);
SessionTranscript read_transcript(const std::string& path);
std::string session_config_hash(const TokenModel& model, const Quantizer& quantizer);

} // namespace motok
