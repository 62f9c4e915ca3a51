#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "motok/rng.hpp"
#include "motok/tensor.hpp"
#include "motok/tokens.hpp"

namespace motok {

struct TokenModelConfig {
    int levels = 6;         // L+1, one causal sub-module per quantization level
    int codebook_size = 64; // K; EOS class = K, BOS sentinel = K+1 (input only)
    int d_model = 128;
    std::vector<int> heads = {4, 4, 2, 2, 2, 2};
    std::vector<int> layers = {3, 3, 2, 1, 1, 1};
    int rel_radius = 512;  // offsets beyond R reuse the boundary embedding
    int attn_window = 512; // sliding attention window in tokens; condition slot pinned
    int ff_mult = 4;
    float dropout = 0.1f;
};

// named presets for the architecture
TokenModelConfig desk_model_config(int levels, int codebook_size);
TokenModelConfig paper_model_config();

// Level-aligned hierarchical causal decoder. Sub-module l consumes, per
// position, the sum of the token embeddings of all coarser levels at the same
// position plus sub-module l-1's hidden state, prefixed by a per-level
// condition token (prompt embedding + level embedding). Level 0 instead sees
// its own token stream shifted right with a BOS sentinel. Every level's
// logits for position i are produced in one forward pass.
class TokenModel {
  public:
    TokenModel(TokenModelConfig cfg, Rng& init_rng);

    const TokenModelConfig& config() const { return cfg_; }
    int eos_id() const { return cfg_.codebook_size; }
    int bos_id() const { return cfg_.codebook_size + 1; }
    int vocab_out() const { return cfg_.codebook_size + 1; } // codes + EOS

    // prompt + q_emb[level], as a [1, d_model] tensor
    Tensor condition(const std::vector<float>& prompt, int level) const;

    // Spec'd construction for one grid: [n+1, d_model]. lower_hidden must be
    // the previous sub-module's hidden states ([n+1, d_model]) for level > 0.
    Tensor build_level_input(const TokenGrid& grid, int level, const std::vector<float>& prompt,
                             const Tensor* lower_hidden) const;

    // Teacher-forced pass over B same-length grids: per level [B, n, K+1]
    // logits where row i predicts the level's token at column i.
    // window <= 0 uses cfg.attn_window.
    std::vector<Tensor> forward_train(const std::vector<TokenGrid>& grids,
                                      const std::vector<std::vector<float>>& prompts,
                                      bool train = false, Rng* dropout_rng = nullptr,
                                      int window = 0) const;

    // Mean CE over levels and unmasked positions (EOS positions included).
    Tensor ce_loss(const std::vector<Tensor>& logits, const std::vector<TokenGrid>& grids,
                   const std::vector<float>& mask) const;

    // ---- incremental decoding ----
    struct StepCache {
        struct LayerKV {
            std::vector<float> k_cond, v_cond; // pinned condition entry
            std::vector<float> k, v;           // ring of the last `window` positions
        };
        struct Level {
            std::vector<LayerKV> layers;
        };
        std::vector<Level> levels;
        std::vector<float> prompt; // current condition embedding
        int window = 0;
        int next_pos = 1; // input position of the next column (condition = 0)
        int token_count() const { return std::min(next_pos - 1, window); }
    };

    StepCache start_cache(const std::vector<float>& prompt, int window = 0) const;

    // Recompute the condition entries only; cached token entries are kept.
    void switch_condition(StepCache& cache, const std::vector<float>& prompt) const;

    struct StepResult {
        std::vector<std::vector<float>> logits; // per level, K+1
        std::vector<int> tokens;                // per level, chosen by the source
    };
    // Advance one column. prev_level0_token is the level-0 token of the last
    // emitted column (ignored for the first column, which starts from BOS).
    // token_source(level, logits) supplies the token consumed by deeper
    // levels at the same column: the sampler during generation, the
    // ground-truth token when replaying teacher-forced.
    StepResult forward_step(StepCache& cache, int prev_level0_token,
                            const std::function<int(int, std::span<const float>)>& token_source) const;

    std::vector<std::pair<std::string, Tensor>> parameters();

  private:
    struct Block {
        Tensor ln1_g, ln1_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
    };
    struct SubModule {
        Tensor emb;   // [K+2, d_model]
        Tensor q_emb; // [d_model]
        std::vector<Block> blocks;
        Tensor lnf_g, lnf_b;
        Tensor head_w, head_b; // [d_model, K+1], [K+1]
    };

    // tape path: x [B, m, d] -> hidden [B, m, d] (post final LN)
    Tensor run_submodule(int level, const Tensor& x, int window, bool train,
                         Rng* dropout_rng) const;
    // incremental path: one position through sub-module `level`
    void step_submodule(StepCache& cache, int level, int pos, std::vector<float>& x) const;

    TokenModelConfig cfg_;
    std::vector<SubModule> subs_;
    Tensor rel_;   // [R+1, d_model]
    Tensor u_;     // [d_model]
    Tensor vbias_; // [d_model]
};

} // namespace motok
