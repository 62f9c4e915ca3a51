#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "motok/checkpoint.hpp"
#include "motok/config.hpp"
#include "motok/motion.hpp"
#include "motok/quantizer.hpp"
#include "motok/token_model.hpp"

namespace motok {

// ---------------- optimizer / schedule ----------------

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
};

class AdamW {
  public:
    AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg);

    // Applies one decoupled-weight-decay update with bias-corrected moments.
    // Returns false (and leaves everything untouched) when any gradient is
    // non-finite; the skip counter records it.
    bool step(float lr);
    void zero_grad();

    int64_t steps_taken() const { return t_; }
    int64_t steps_skipped() const { return skipped_; }
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

    void save_state(Checkpoint& ck, const std::string& prefix) const;
    void load_state(const Checkpoint& ck, const std::string& prefix);

  private:
    std::vector<std::pair<std::string, Tensor>> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    int64_t t_ = 0;
    int64_t skipped_ = 0;
};

// Global-norm gradient clipping; returns the pre-clip norm.
double clip_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params, double max_norm);

// lr_end + 0.5*(lr_start-lr_end)*(1+cos(pi*step/total)); step past total
// clamps to lr_end.
float cosine_lr(int64_t step, int64_t total, float lr_start, float lr_end);

// ---------------- config plumbing ----------------

QuantizerConfig quantizer_config_from(const Config& cfg);
void quantizer_config_into(const QuantizerConfig& qc, Config& cfg);
TokenModelConfig model_config_from(const Config& cfg);
void model_config_into(const TokenModelConfig& mc, Config& cfg);

struct TrainConfig {
    std::string stage;       // "vq" | "rqhc"
    float lr_start = 2e-4f;
    float lr_end = 2e-5f;
    int64_t steps = 2000;
    int batch = 64;
    int window = 64;         // frames (vq) / token columns (rqhc)
    uint64_t seed = 1;
    float weight_decay = 0.0f;
    float clip = 0.0f;       // 0 = off; rqhc default 1.0
    int64_t eval_every = 200;
    int64_t checkpoint_every = 1000;
    int eval_sequences = 64; // cap for periodic eval
};

TrainConfig train_config_from(const Config& cfg, const std::string& stage);
void train_config_into(const TrainConfig& tc, Config& cfg);

// ---------------- checkpoints ----------------

void save_quantizer_checkpoint(const std::string& path, Quantizer& q, const AdamW* opt,
                               int64_t step, const Config& snapshot, BatchIter::State iter_state);

struct LoadedQuantizer {
    QuantizerConfig qcfg;
    std::unique_ptr<Quantizer> quantizer;
    Config snapshot;
    int64_t step = 0;
    BatchIter::State iter_state;
    Checkpoint raw; // for optimizer-state restore
};
LoadedQuantizer load_quantizer_checkpoint(const std::string& path);

void save_model_checkpoint(const std::string& path, TokenModel& m, const AdamW* opt, int64_t step,
                           const Config& snapshot, BatchIter::State iter_state);

struct LoadedModel {
    TokenModelConfig mcfg;
    std::unique_ptr<TokenModel> model;
    Config snapshot;
    int64_t step = 0;
    BatchIter::State iter_state;
    Checkpoint raw;
};
LoadedModel load_model_checkpoint(const std::string& path);

// ---------------- training loops ----------------

struct StepLogRow {
    int64_t step = 0;
    float lr = 0;
    VqLossBreakdown vq;
    float ce = 0;
};

struct VqTrainResult {
    int64_t steps = 0;
    float final_eval_recon_l1 = 0; // per-element, eval split
    float final_train_loss = 0;
};

// Full MoSA-VQ stage: batch -> encode -> quantize -> decode -> loss ->
// backward -> AdamW -> EMA. Deterministic given config.seed; resumable
// bitwise from a checkpoint written by itself.
VqTrainResult train_vq(Quantizer& q, const Dataset& ds, const TrainConfig& tc,
                       const std::string& out_ckpt, const std::string& metrics_csv,
                       const Config& snapshot, const std::string& resume_from = "");

struct RqhcTrainResult {
    int64_t steps = 0;
    float final_ce = 0;
    float final_eval_acc = 0;
    int64_t steps_to_target = -1; // first step with train CE below target (if set)
};

struct RqhcTrainOptions {
    float stop_below_ce = 0.0f; // early stop once train CE < this (0 = never)
};

// Token-model stage over a frozen quantizer: grids are precomputed once in
// eval mode, then windows are batched deterministically.
RqhcTrainResult train_rqhc(TokenModel& m, const Quantizer& frozen_q, const Dataset& ds,
                           const TrainConfig& tc, const std::string& out_ckpt,
                           const std::string& metrics_csv, const Config& snapshot,
                           const std::string& resume_from = "",
                           const RqhcTrainOptions& opts = {});

// Precompute per-sequence token grids (eval mode, EOS column appended).
std::vector<TokenGrid> precompute_grids(const Quantizer& q, const std::vector<MotionSequence>& seqs,
                                        const NormStats& stats, bool append_eos = true);

} // namespace motok
