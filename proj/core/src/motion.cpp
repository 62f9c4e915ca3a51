#include "motok/motion.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace motok {

static_assert(std::endian::native == std::endian::little,
              "sequence/token/checkpoint formats assume a little-endian host");

namespace {

constexpr double kTwoPi = 6.283185307179586;

double get_param(const std::map<std::string, double>& p, const std::string& k, double dflt) {
    auto it = p.find(k);
    return it == p.end() ? dflt : it->second;
}

// Per-feature phase/amplitude fingerprint so every feature column moves.
float feat_amp(int j) { return 0.2f + 0.15f * static_cast<float>((j * 2654435761u) % 5u); }
float feat_phase(int j) { return 0.7853982f * static_cast<float>((j * 40503u) % 8u); }

std::string format_num(double v) {
    std::ostringstream ss;
    ss.precision(2);
    ss << std::fixed << v;
    return ss.str();
}

} // namespace

MotionSequence synthesize_one(const std::string& archetype,
                              const std::map<std::string, double>& params, int frames, int dim,
                              float fps) {
    if (frames < 1) throw ValidationError("synthesize_one: frames must be >= 1");
    if (dim < 4) throw ValidationError("synthesize_one: dim must be >= 4");
    MotionSequence seq;
    seq.frames = frames;
    seq.dim = dim;
    seq.fps = fps;
    seq.data.assign(static_cast<size_t>(frames) * dim, 0.0f);

    const double amp = get_param(params, "amplitude", 1.0);
    // progress in [0,1], hitting 1 exactly at the last frame
    const double dprog = frames > 1 ? 1.0 / (frames - 1) : 0.0;

    if (archetype == "walk-circle") {
        const double radius = get_param(params, "radius", 1.0);
        const int cycles = std::max(1, static_cast<int>(std::lround(get_param(params, "cycles", 1.0))));
        const double cadence = get_param(params, "cadence", 1.5);
        for (int t = 0; t < frames; ++t) {
            const double prog = t * dprog;
            const double theta = kTwoPi * cycles * prog;
            const double time = t / static_cast<double>(fps);
            seq.at(t, 0) = static_cast<float>(amp * radius * (std::cos(theta) - 1.0));
            seq.at(t, 1) = static_cast<float>(amp * radius * std::sin(theta));
            seq.at(t, 2) = static_cast<float>(amp * 0.04 * std::fabs(std::sin(kTwoPi * cadence * time)));
            seq.at(t, 3) = static_cast<float>(theta); // heading
            for (int j = 4; j < dim; ++j)
                seq.at(t, j) = static_cast<float>(
                    amp * feat_amp(j) * std::sin(kTwoPi * cadence * time + feat_phase(j)));
        }
        seq.caption = "walk in a circle of radius " + format_num(radius) + " meters" +
                      (cycles > 1 ? " for " + std::to_string(cycles) + " loops" : "");
    } else if (archetype == "jump") {
        const double height = get_param(params, "height", 0.4);
        const int count = std::max(1, static_cast<int>(std::lround(get_param(params, "count", 1.0))));
        for (int t = 0; t < frames; ++t) {
            const double prog = t * dprog;
            const double phase = prog * count;
            const double local = phase - std::floor(phase);
            const double arc = std::sin(3.141592653589793 * local);
            seq.at(t, 2) = static_cast<float>(amp * height * arc * arc);
            // crouch anticipation in the leg channels
            for (int j = 4; j < dim; ++j)
                seq.at(t, j) =
                    static_cast<float>(amp * feat_amp(j) * (arc * arc - 0.5 * local) *
                                       std::cos(feat_phase(j)));
        }
        seq.caption = "jump " + std::to_string(count) + (count == 1 ? " time" : " times") +
                      " in place";
    } else if (archetype == "wave") {
        const double freq = get_param(params, "freq", 1.0);
        for (int t = 0; t < frames; ++t) {
            const double time = t / static_cast<double>(fps);
            for (int j = 4; j < dim; ++j) {
                const bool arm = (j >= dim - 4); // top channels act as the waving arm
                const double a = arm ? 1.0 : 0.1;
                seq.at(t, j) = static_cast<float>(
                    amp * a * feat_amp(j) * std::sin(kTwoPi * freq * time + feat_phase(j)));
            }
        }
        seq.caption = std::string("wave the right arm ") + (freq > 1.0 ? "quickly" : "slowly");
    } else {
        throw ConfigError("unknown motion archetype: " + archetype);
    }
    return seq;
}

Dataset synthesize_corpus(const Config& spec, uint64_t seed) {
    const int dim = static_cast<int>(spec.get_int("corpus.dim", 16));
    const float fps = static_cast<float>(spec.get_double("corpus.fps", 30.0));
    const int n_train = static_cast<int>(spec.get_int("corpus.train", 1000));
    const int n_eval = static_cast<int>(spec.get_int("corpus.eval", 100));
    const int min_frames = static_cast<int>(spec.get_int("corpus.min_frames", 64));
    const int max_frames = static_cast<int>(spec.get_int("corpus.max_frames", 240));
    if (min_frames < 1 || max_frames < min_frames)
        throw ConfigError("corpus frame bounds invalid");

    // collect archetype sections
    struct Arch {
        std::string name;
        std::map<std::string, std::pair<double, double>> ranges;
    };
    std::vector<Arch> archetypes;
    // scan for "archetype NAME.param" keys via the known names plus any declared
    for (const std::string name : {"walk-circle", "jump", "wave"}) {
        const std::string section = "archetype " + name;
        auto keys = spec.keys_in(section);
        if (keys.empty()) continue;
        Arch a;
        a.name = name;
        for (const auto& k : keys) a.ranges[k] = spec.get_range(section + "." + k, {0.0, 0.0});
        archetypes.push_back(std::move(a));
    }
    if (archetypes.empty()) throw ConfigError("generator config names no archetypes");
    if (archetypes.size() < 2)
        throw ConfigError("generator config must name at least 2 archetypes");

    auto make_split = [&](int count, uint64_t split_tag) {
        std::vector<MotionSequence> out;
        out.reserve(count);
        for (int i = 0; i < count; ++i) {
            Rng rng(mix_seed(mix_seed(seed, split_tag), static_cast<uint64_t>(i)));
            const Arch& a = archetypes[rng.next_int(static_cast<int>(archetypes.size()))];
            const int T = min_frames + rng.next_int(max_frames - min_frames + 1);
            std::map<std::string, double> params;
            for (const auto& [k, r] : a.ranges)
                params[k] = r.first + (r.second - r.first) * rng.next_double();
            out.push_back(synthesize_one(a.name, params, T, dim, fps));
        }
        return out;
    };

    Dataset ds;
    ds.dim = dim;
    ds.fps = fps;
    ds.train = make_split(n_train, hash_string("train"));
    ds.eval = make_split(n_eval, hash_string("eval"));
    ds.stats = compute_stats(ds.train);
    return ds;
}

NormStats compute_stats(const std::vector<MotionSequence>& seqs) {
    if (seqs.empty()) throw ValidationError("compute_stats: empty split");
    const int d = seqs[0].dim;
    std::vector<double> sum(d, 0.0), sq(d, 0.0);
    int64_t n = 0;
    for (const auto& s : seqs) {
        if (s.dim != d) throw DimensionError("compute_stats: inconsistent feature dims");
        for (int t = 0; t < s.frames; ++t)
            for (int j = 0; j < d; ++j) {
                const double v = s.at(t, j);
                sum[j] += v;
                sq[j] += v * v;
            }
        n += s.frames;
    }
    NormStats st;
    st.mean.resize(d);
    st.stdev.resize(d);
    for (int j = 0; j < d; ++j) {
        const double m = sum[j] / static_cast<double>(n);
        double var = sq[j] / static_cast<double>(n) - m * m;
        var = std::max(var, 0.0);
        st.mean[j] = static_cast<float>(m);
        st.stdev[j] = std::max(static_cast<float>(std::sqrt(var)), 1e-6f);
    }
    return st;
}

MotionSequence normalize(const MotionSequence& seq, const NormStats& stats) {
    if (stats.dim() != seq.dim) throw DimensionError("normalize: stats dim mismatch");
    MotionSequence out = seq;
    for (int t = 0; t < seq.frames; ++t)
        for (int j = 0; j < seq.dim; ++j)
            out.at(t, j) = (seq.at(t, j) - stats.mean[j]) / stats.stdev[j];
    return out;
}

MotionSequence denormalize(const MotionSequence& seq, const NormStats& stats) {
    if (stats.dim() != seq.dim) throw DimensionError("denormalize: stats dim mismatch");
    MotionSequence out = seq;
    for (int t = 0; t < seq.frames; ++t)
        for (int j = 0; j < seq.dim; ++j)
            out.at(t, j) = seq.at(t, j) * stats.stdev[j] + stats.mean[j];
    return out;
}

BatchIter::BatchIter(const std::vector<MotionSequence>* seqs, const NormStats* stats, int batch,
                     int window, uint64_t seed, BatchIterOptions opts)
    : seqs_(seqs), stats_(stats), batch_(batch), window_(window), seed_(seed), opts_(opts) {
    if (batch < 1 || window < 1) throw ValidationError("batch_iter: batch and window must be >= 1");
    if (seqs_->empty()) throw ValidationError("batch_iter: empty dataset");
    if (opts_.drop_last && batch_ > static_cast<int>(seqs_->size()))
        throw StateError("batch_iter exhausted: batch size exceeds dataset size with drop-last");
    if (!opts_.pad) {
        for (const auto& s : *seqs_)
            if (s.frames < window_)
                throw ValidationError("batch_iter: window exceeds a sequence length and padding is off");
    }
    start_epoch(0);
}

void BatchIter::start_epoch(int64_t epoch) {
    epoch_ = epoch;
    cursor_ = 0;
    order_.resize(seqs_->size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    Rng rng(mix_seed(mix_seed(seed_, hash_string("epoch")), static_cast<uint64_t>(epoch)));
    for (size_t i = order_.size(); i > 1; --i) {
        const int j = rng.next_int(static_cast<int>(i));
        std::swap(order_[i - 1], order_[j]);
    }
}

void BatchIter::restore(State s) {
    start_epoch(s.epoch);
    cursor_ = s.cursor;
}

std::optional<Batch> BatchIter::next() {
    const int n = static_cast<int>(seqs_->size());
    if (cursor_ + (opts_.drop_last ? batch_ : 1) > n) {
        if (opts_.single_epoch) return std::nullopt;
        start_epoch(epoch_ + 1);
    }
    const int take = std::min<int64_t>(batch_, n - cursor_);
    const int d = stats_->dim();

    Batch b;
    b.frames = Tensor::zeros({take, window_, d});
    b.mask.assign(static_cast<size_t>(take) * window_, 0.0f);
    auto out = b.frames.mutable_values();
    for (int r = 0; r < take; ++r) {
        const int si = order_[cursor_ + r];
        const MotionSequence& s = (*seqs_)[si];
        Rng wrng(mix_seed(mix_seed(seed_, hash_string("window")),
                          mix_seed(static_cast<uint64_t>(epoch_),
                                   static_cast<uint64_t>(cursor_ + r))));
        const int span = std::min(window_, s.frames);
        const int start = s.frames > window_ ? wrng.next_int(s.frames - window_ + 1) : 0;
        for (int t = 0; t < span; ++t)
            for (int j = 0; j < d; ++j) {
                out[(static_cast<size_t>(r) * window_ + t) * d + j] =
                    (s.at(start + t, j) - stats_->mean[j]) / stats_->stdev[j];
                b.mask[static_cast<size_t>(r) * window_ + t] = 1.0f;
            }
        b.captions.push_back(s.caption);
        b.seq_index.push_back(si);
        b.window_start.push_back(start);
    }
    cursor_ += take;
    return b;
}

// ---------------- file formats ----------------

namespace {

template <class T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

} // namespace

void write_sequence_file(const std::string& path, const MotionSequence& seq) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write sequence file: " + path);
    write_pod<uint32_t>(out, static_cast<uint32_t>(seq.frames));
    write_pod<uint32_t>(out, static_cast<uint32_t>(seq.dim));
    write_pod<float>(out, seq.fps);
    out.write(reinterpret_cast<const char*>(seq.data.data()),
              static_cast<std::streamsize>(seq.data.size() * sizeof(float)));
    if (!out) throw IoError("short write: " + path);
}

MotionSequence read_sequence_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open sequence file: " + path);
    MotionSequence seq;
    seq.frames = static_cast<int>(read_pod<uint32_t>(in));
    seq.dim = static_cast<int>(read_pod<uint32_t>(in));
    seq.fps = read_pod<float>(in);
    if (!in || seq.frames < 1 || seq.dim < 1)
        throw IoError("bad sequence header: " + path);
    seq.data.resize(static_cast<size_t>(seq.frames) * seq.dim);
    in.read(reinterpret_cast<char*>(seq.data.data()),
            static_cast<std::streamsize>(seq.data.size() * sizeof(float)));
    if (!in) throw IoError("truncated sequence file: " + path);
    for (float v : seq.data)
        if (!std::isfinite(v)) throw NumericError("non-finite value in sequence file: " + path);
    return seq;
}

namespace {

std::string seq_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05d", i);
    return buf;
}

void write_split(const fs::path& dir, const fs::path& capdir, const std::string& split,
                 const std::vector<MotionSequence>& seqs) {
    fs::create_directories(dir);
    for (size_t i = 0; i < seqs.size(); ++i) {
        const std::string stem = seq_name(static_cast<int>(i));
        write_sequence_file((dir / (stem + ".mseq")).string(), seqs[i]);
        std::ofstream cap(capdir / (split + "-" + stem + ".txt"));
        if (!cap) throw IoError("cannot write caption file");
        cap << seqs[i].caption << "\n";
    }
}

std::vector<MotionSequence> read_split(const fs::path& dir, const fs::path& capdir,
                                       const std::string& split) {
    std::vector<fs::path> files;
    if (fs::exists(dir))
        for (const auto& e : fs::directory_iterator(dir))
            if (e.path().extension() == ".mseq") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::vector<MotionSequence> out;
    out.reserve(files.size());
    for (const auto& f : files) {
        MotionSequence s = read_sequence_file(f.string());
        const fs::path cap = capdir / (split + "-" + f.stem().string() + ".txt");
        if (fs::exists(cap)) {
            std::ifstream in(cap);
            std::getline(in, s.caption);
        }
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace

void write_corpus(const std::string& dir, const Dataset& ds) {
    const fs::path root(dir);
    const fs::path capdir = root / "captions";
    fs::create_directories(capdir);
    write_split(root / "train", capdir, "train", ds.train);
    write_split(root / "eval", capdir, "eval", ds.eval);
}

Dataset load_corpus(const std::string& dir) {
    const fs::path root(dir);
    Dataset ds;
    ds.train = read_split(root / "train", root / "captions", "train");
    ds.eval = read_split(root / "eval", root / "captions", "eval");
    if (ds.train.empty()) throw ValidationError("load_corpus: empty training split in " + dir);
    ds.dim = ds.train[0].dim;
    ds.fps = ds.train[0].fps;
    for (const auto& s : ds.train)
        if (s.dim != ds.dim) throw DimensionError("load_corpus: inconsistent dims in train split");
    for (const auto& s : ds.eval)
        if (s.dim != ds.dim) throw DimensionError("load_corpus: inconsistent dims in eval split");
    ds.stats = compute_stats(ds.train);
    return ds;
}

} // namespace motok
