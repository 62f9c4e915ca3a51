#pragma once

#include <string>
#include <vector>

#include "motok/motion.hpp"
#include "motok/rng.hpp"
#include "motok/tensor.hpp"
#include "motok/tokens.hpp"

namespace motok {

struct QuantizerConfig {
    int input_dim = 16;
    int latent_dim = 32;
    int hidden_dim = 32;
    int levels = 6;         // L+1 quantization levels
    int codebook_size = 64; // K
    int blocks = 3;         // residual conv blocks per coder
    int kernel = 3;         // stride-1, odd
    float dropout = 0.2f;
    float ema_decay = 0.99f;
    float dead_threshold = 1.0f;
    int reset_patience = 256;
    float eps_inv = 1e-4f; // |w_i| clamp keeping the diagonal scale invertible
    bool learn_affine = true;
    float beta = 0.02f;   // commitment
    float gamma = 1e-4f;  // modulation regularizer
    float lambda = 0.1f;  // cross-level decorrelation
};

// Per-level learnable diagonal scale and bias applied before lookup and
// inverted after it.
struct LevelAffine {
    Tensor w; // [d_latent] diagonal
    Tensor b; // [d_latent]
};

struct Codebook {
    Tensor entries;                // [K, d_latent], not gradient-trained
    std::vector<float> ema_counts; // K
    std::vector<float> ema_sums;   // K * d_latent
    std::vector<int> stale_steps;  // consecutive steps with zero assignments
    bool initialized = false;
};

struct LevelOutput {
    std::vector<int> indices;  // per position
    Tensor q;                  // [N,d] selected codebook rows (scaled space)
    Tensor phi;                // [N,d] decoded contribution, carries affine grads
    Tensor next_residual;      // value r - phi exactly; gradient passes to r only
    std::vector<float> scaled; // N*d scaled inputs, for EMA accumulation
};

struct QuantizeTrace {
    std::vector<LevelOutput> levels;
    std::vector<Tensor> residuals; // r^0 .. r^{L+1}
    Tensor zhat;    // sum of phi^l; used for eval/decoding
    Tensor zhat_st; // r^0 + sg(zhat - r^0); straight-through path used in training
};

struct VqLossBreakdown {
    Tensor loss;
    float total = 0, recon = 0, commit = 0, decor = 0, modulation = 0;
};

// Squared Frobenius norm of the biased (divisor N) sample cross-covariance
// between two [N,d] batches; differentiable w.r.t. both.
Tensor decorrelation_loss(const Tensor& phi, const Tensor& r_next);

class Quantizer {
  public:
    Quantizer(QuantizerConfig cfg, Rng& init_rng);

    const QuantizerConfig& config() const { return cfg_; }

    // Stride-1 conv stack, [B,T,input_dim] -> [B,T,latent_dim]; n == T.
    Tensor encode(const Tensor& motion, bool train = false, Rng* dropout_rng = nullptr) const;
    // [B,T,latent_dim] -> [B,T,input_dim]
    Tensor decode_latent(const Tensor& zhat, bool train = false, Rng* dropout_rng = nullptr) const;

    // r: [N, latent_dim] residual rows.
    LevelOutput quantize_level(const Tensor& r, int level) const;
    QuantizeTrace quantize_all(const Tensor& r0) const;

    // Token paths. tokens_to_latent rebuilds zhat with the same arithmetic as
    // quantize_all so both routes agree bitwise for the same indices.
    Tensor tokens_to_latent(const TokenGrid& grid) const;
    // grid -> zhat -> decoder; returns [1,n,input_dim] (normalized space)
    Tensor decode_tokens(const TokenGrid& grid) const;

    TokenGrid grid_from_trace(const QuantizeTrace& trace) const;

    VqLossBreakdown vq_loss(const Tensor& motion, const Tensor& recon, const QuantizeTrace& trace,
                            const std::vector<float>& mask, float beta, float lambda,
                            float gamma) const;
    VqLossBreakdown vq_loss(const Tensor& motion, const Tensor& recon, const QuantizeTrace& trace,
                            const std::vector<float>& mask) const {
        return vq_loss(motion, recon, trace, mask, cfg_.beta, cfg_.lambda, cfg_.gamma);
    }

    // Training-side codebook maintenance.
    void maybe_init_codebooks(const Tensor& r0, const std::vector<float>& mask, Rng& rng);
    void ema_update(const QuantizeTrace& trace, const std::vector<float>& mask, Rng& rng);
    void clamp_affine();

    int receptive_field_radius() const;

    std::vector<std::pair<std::string, Tensor>> parameters(); // gradient-trained
    Codebook& codebook(int level) { return codebooks_[level]; }
    const Codebook& codebook(int level) const { return codebooks_[level]; }
    LevelAffine& affine(int level) { return affines_[level]; }
    const LevelAffine& affine(int level) const { return affines_[level]; }

    void dump_codebook_csv(const std::string& path) const;

    // Normalization snapshot embedded so decoding works without the corpus.
    NormStats stats;
    float sample_fps = 30.0f;

    // Conv stacks exposed for tests (zero-initialized-final-layer probes).
    struct Coder {
        Tensor in_w, in_b;
        struct Block {
            Tensor c1_w, c1_b, c2_w, c2_b;
        };
        std::vector<Block> blocks;
        Tensor out_w, out_b;
    };
    Coder& encoder_coder() { return enc_; }
    Coder& decoder_coder() { return dec_; }

  private:
    Tensor run_coder(const Coder& c, const Tensor& x, bool train, Rng* dropout_rng) const;
    Tensor level_phi(const Tensor& q, int level) const;

    QuantizerConfig cfg_;
    Coder enc_, dec_;
    std::vector<LevelAffine> affines_;
    std::vector<Codebook> codebooks_;
};

} // namespace motok
