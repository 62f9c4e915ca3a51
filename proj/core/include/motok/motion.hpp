#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "motok/config.hpp"
#include "motok/rng.hpp"
#include "motok/tensor.hpp"

namespace motok {

struct MotionSequence {
    int frames = 0;              // T
    int dim = 0;                 // d
    float fps = 30.0f;
    std::vector<float> data;     // T x d row-major
    std::string caption;

    float at(int t, int j) const { return data[static_cast<size_t>(t) * dim + j]; }
    float& at(int t, int j) { return data[static_cast<size_t>(t) * dim + j]; }
};

struct NormStats {
    std::vector<float> mean;
    std::vector<float> stdev; // clamped to >= 1e-6
    int dim() const { return static_cast<int>(mean.size()); }
};

struct Dataset {
    std::vector<MotionSequence> train;
    std::vector<MotionSequence> eval;
    NormStats stats; // computed over the training split only
    int dim = 0;
    float fps = 30.0f;
};

// ---- synthetic corpus ----

// Generates one sequence of a named archetype with explicit parameters.
// Known archetypes: walk-circle (radius, cycles, cadence, amplitude),
// jump (height, count, amplitude), wave (freq, amplitude).
MotionSequence synthesize_one(const std::string& archetype,
                              const std::map<std::string, double>& params, int frames, int dim,
                              float fps);

// Reads the [corpus] section and one "[archetype NAME]" section per archetype
// (parameter ranges as "lo..hi"). Deterministic given seed.
Dataset synthesize_corpus(const Config& spec, uint64_t seed);

// ---- normalization ----

NormStats compute_stats(const std::vector<MotionSequence>& seqs);
MotionSequence normalize(const MotionSequence& seq, const NormStats& stats);
MotionSequence denormalize(const MotionSequence& seq, const NormStats& stats);

// ---- batching ----

struct Batch {
    Tensor frames;                  // [B, W, d], normalized; padded frames are zero
    std::vector<float> mask;        // B*W, 1 = real frame, 0 = pad
    std::vector<std::string> captions;
    std::vector<int> seq_index;     // source sequence per batch row
    std::vector<int> window_start;
};

struct BatchIterOptions {
    bool pad = true;          // allow sequences shorter than the window
    bool drop_last = true;    // only whole batches
    bool single_epoch = false;
};

// Deterministic batch stream: sequence order is reshuffled per epoch from
// mix(seed, epoch); window starts are drawn per item. Iterator state is
// (epoch, cursor) and can be saved/restored for bitwise resume.
class BatchIter {
  public:
    BatchIter(const std::vector<MotionSequence>* seqs, const NormStats* stats, int batch,
              int window, uint64_t seed, BatchIterOptions opts = {});

    std::optional<Batch> next();

    struct State {
        int64_t epoch = 0;
        int64_t cursor = 0;
    };
    State state() const { return {epoch_, cursor_}; }
    void restore(State s);

  private:
    void start_epoch(int64_t epoch);

    const std::vector<MotionSequence>* seqs_;
    const NormStats* stats_;
    int batch_;
    int window_;
    uint64_t seed_;
    BatchIterOptions opts_;
    int64_t epoch_ = 0;
    int64_t cursor_ = 0;
    std::vector<int> order_;
};

// ---- file formats ----
// Sequence file: u32 T, u32 d, f32 fps, then T*d f32 values, little-endian.
// Caption lives in a sidecar text file. Corpus directory layout:
//   <dir>/train/NNNNN.mseq  <dir>/eval/NNNNN.mseq  <dir>/captions/<split>-NNNNN.txt

void write_sequence_file(const std::string& path, const MotionSequence& seq);
MotionSequence read_sequence_file(const std::string& path);

void write_corpus(const std::string& dir, const Dataset& ds);
Dataset load_corpus(const std::string& dir);

} // namespace motok
