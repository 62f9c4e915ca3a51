#pragma once

#include <string>
#include <vector>

#include "motok/motion.hpp"
#include "motok/quantizer.hpp"
#include "motok/token_model.hpp"

namespace motok {

// Reconstruction quality of the quantizer over a split, in normalized feature
// space. No learned evaluator metrics here (FID / R-Precision / MM-Dist /
// MultiModality need pretrained text-motion evaluators and are out of scope);
// reports state this explicitly so recon L1 is not misread.
struct ReconReport {
    double l1_per_element = 0; // mean |m - m_hat| per feature entry
    double l1_per_frame = 0;   // mean over frames of sum_j |diff|
    double l2_per_frame = 0;   // mean over frames of ||diff||_2
    std::vector<double> residual_norms; // mean ||r^l||_2 per level, l = 0..L+1
    std::vector<double> cov_norms;      // ||Cov(phi^l, r^{l+1})||_F per adjacent pair
    int64_t frames = 0;
    int sequences = 0;
};

ReconReport recon_report(const Quantizer& q, const std::vector<MotionSequence>& split,
                         const NormStats& stats, int max_sequences = 0);

struct CodebookStats {
    // per level
    std::vector<std::vector<int64_t>> usage; // histogram over codes
    std::vector<double> perplexity;          // exp(entropy of usage), in [1, K]
    std::vector<int> dead;                   // codes with zero usage on the split
};

CodebookStats codebook_stats(const Quantizer& q, const std::vector<MotionSequence>& split,
                             const NormStats& stats, int max_sequences = 0);

struct TokenEval {
    std::vector<double> ce_per_level;
    std::vector<double> acc_per_level; // teacher-forced top-1
    double ce = 0;
    double acc = 0;
    int64_t tokens = 0;
};

TokenEval token_eval(const TokenModel& m, const Quantizer& q,
                     const std::vector<MotionSequence>& split, const NormStats& stats,
                     int max_sequences = 0);

// CSV + human-readable summary. The summary header names the metrics that are
// intentionally absent.
void write_eval_report(const std::string& path, const ReconReport& recon,
                       const CodebookStats& cb, const TokenEval* tokens);

} // namespace motok
