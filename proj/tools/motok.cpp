// motok: synthetic corpus generation, two-stage training, encode/decode,
// evaluation, codebook inspection, scripted generation, and an interactive
// prompt-switching REPL.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "motok/metrics.hpp"
#include "motok/motion.hpp"
#include "motok/prompt.hpp"
#include "motok/quantizer.hpp"
#include "motok/session.hpp"
#include "motok/tokens.hpp"
#include "motok/train.hpp"

namespace fs = std::filesystem;
using namespace motok;

namespace {

std::string default_corpus_spec_text() {
    return "[corpus]\n"
           "dim = 16\n"
           "fps = 30\n"
           "train = 1000\n"
           "eval = 100\n"
           "min_frames = 64\n"
           "max_frames = 240\n"
           "\n"
           "[archetype walk-circle]\n"
           "radius = 0.5..2.0\n"
           "cycles = 1..2\n"
           "cadence = 1.0..2.0\n"
           "amplitude = 0.8..1.2\n"
           "\n"
           "[archetype jump]\n"
           "height = 0.2..0.6\n"
           "count = 1..3\n"
           "amplitude = 0.8..1.2\n"
           "\n"
           "[archetype wave]\n"
           "freq = 0.5..1.5\n"
           "amplitude = 0.5..1.5\n";
}

void print_seed_hierarchy(uint64_t master) {
    std::cout << "seeds: master=" << master << " init=" << mix_seed(master, "init")
              << " data=" << mix_seed(master, "data") << " dropout=" << mix_seed(master, "dropout")
              << " ema=" << mix_seed(master, "ema") << " sampler=" << mix_seed(master, "sampler")
              << "\n";
}

std::unique_ptr<TextCompletionClient> text_client_from_env() {
    const char* url = std::getenv("MOTOK_LLM_URL");
    if (!url || !*url) return nullptr;
    const char* token = std::getenv("MOTOK_LLM_TOKEN");
    return make_http_text_client(url, token ? token : "");
}

PromptTemplates templates_from(const std::string& dir) {
    if (dir.empty()) return PromptTemplates::defaults();
    return PromptTemplates::load_dir(dir);
}

struct GenerateArgs {
    std::string model_path, vq_path, prompt, schedule_file, out, transcript_out, templates_dir;
    bool tca = false, tca_joint = false, ignore_eos = false, stale_condition = false;
    uint64_t seed = 0;
    int max_len = 120, window = 0, top_k = 16, segment_len = 40;
    float temperature = 1.0f;
};

int cmd_generate(const GenerateArgs& a, bool seed_given, bool temp_given, bool topk_given,
                 bool window_given, bool ignore_given) {
    LoadedModel lm = load_model_checkpoint(a.model_path);
    LoadedQuantizer lq = load_quantizer_checkpoint(a.vq_path);

    SamplerConfig sampler;
    sampler.seed = a.seed;
    sampler.temperature = a.temperature;
    sampler.top_k = a.top_k;
    int window = a.window;
    bool ignore_eos = a.ignore_eos;
    bool recompute_condition = !a.stale_condition;

    std::vector<ScheduleSegment> segments;
    if (!a.schedule_file.empty()) {
        SessionTranscript t = read_transcript(a.schedule_file);
        segments = t.segments;
        if (!seed_given) sampler.seed = t.seed;
        if (!temp_given) sampler.temperature = t.temperature;
        if (!topk_given) sampler.top_k = t.top_k;
        if (!window_given) window = t.window;
        if (!ignore_given) ignore_eos = t.ignore_eos;
        recompute_condition = t.recompute_condition && !a.stale_condition;
        const std::string expect = session_config_hash(*lm.model, *lq.quantizer);
        if (!t.config_hash.empty() && t.config_hash != expect)
            std::cerr << "warning: transcript config hash " << t.config_hash
                      << " differs from loaded checkpoints (" << expect << ")\n";
    } else if (a.tca) {
        PromptTemplates templates = templates_from(a.templates_dir);
        auto client = text_client_from_env();
        TcaResult tca = tca_run(a.prompt, templates, client.get());
        if (tca.used_fallback) std::cerr << "warning: " << tca.warning << "\n";
        std::cerr << "tca: normalized=\"" << tca.normalized << "\" steps=" << tca.steps.size()
                  << " rewritten=\"" << tca.rewritten << "\"\n";
        if (a.tca_joint) {
            segments.push_back({tca.rewritten, a.max_len});
            std::cerr << "tca: scheduled 1 joint segment of " << a.max_len << "\n";
        } else {
            for (const auto& s : tca.steps) segments.push_back({s, a.segment_len});
            std::cerr << "tca: scheduled " << segments.size() << " segments of " << a.segment_len
                      << "\n";
        }
    } else {
        if (a.prompt.empty()) throw ValidationError("generate: need --prompt or --schedule");
        segments.push_back({a.prompt, a.max_len});
    }

    print_seed_hierarchy(sampler.seed);
    ScheduleRun run = run_schedule(*lm.model, *lq.quantizer, segments, sampler, window, ignore_eos,
                                   &std::cout, recompute_condition);
    if (run.terminated_early) std::cerr << "generation terminated by EOS\n";
    MotionSequence seq = finalize_grid(*lq.quantizer, run.grid);
    write_sequence_file(a.out, seq);
    std::cerr << "wrote " << seq.frames << " frames x " << seq.dim << " features to " << a.out
              << "\n";
    if (!a.transcript_out.empty()) {
        write_transcript(a.transcript_out, run.transcript);
        std::cerr << "wrote transcript to " << a.transcript_out << "\n";
    }
    return 0;
}

int cmd_session(const std::string& model_path, const std::string& vq_path, SamplerConfig sampler,
                int window, bool ignore_eos, bool stale_condition) {
    LoadedModel lm = load_model_checkpoint(model_path);
    LoadedQuantizer lq = load_quantizer_checkpoint(vq_path);
    print_seed_hierarchy(sampler.seed);
    std::cout << "config_hash: " << session_config_hash(*lm.model, *lq.quantizer) << "\n";
    std::cout << "commands: :prompt <text> | :steps N | :save FILE | :quit\n";

    std::unique_ptr<GenerationSession> session;
    std::string line;
    while (std::getline(std::cin, line)) {
        try {
            std::istringstream in(line);
            std::string cmd;
            in >> cmd;
            if (cmd.empty()) continue;
            if (cmd == ":quit" || cmd == ":q") break;
            if (cmd == ":prompt") {
                std::string text;
                std::getline(in, text);
                const size_t b = text.find_first_not_of(' ');
                text = b == std::string::npos ? "" : text.substr(b);
                if (text.empty()) {
                    std::cout << "usage: :prompt <text>\n";
                    continue;
                }
                if (!session) {
                    session = std::make_unique<GenerationSession>(*lm.model, *lq.quantizer, text,
                                                                  sampler, window, ignore_eos,
                                                                  !stale_condition);
                    std::cout << "session started\n";
                } else {
                    session->switch_prompt(text);
                    std::cout << "switched prompt at position " << session->position() << "\n";
                }
            } else if (cmd == ":steps") {
                int n = 0;
                in >> n;
                if (!session) {
                    std::cout << "no session; use :prompt first\n";
                    continue;
                }
                if (n < 1) {
                    std::cout << "usage: :steps N (N >= 1)\n";
                    continue;
                }
                for (int i = 0; i < n; ++i) {
                    auto col = session->step();
                    if (!col) {
                        std::cout << "[eos] session terminated\n";
                        break;
                    }
                    std::cout << session->position() - 1 << '\t';
                    for (size_t l = 0; l < col->size(); ++l) {
                        if (l) std::cout << ' ';
                        std::cout << (*col)[l];
                    }
                    std::cout << '\t' << session->active_prompt_index() << '\n';
                }
            } else if (cmd == ":save") {
                std::string path;
                in >> path;
                if (!session || session->position() == 0) {
                    std::cout << "nothing to save\n";
                    continue;
                }
                if (path.empty()) {
                    std::cout << "usage: :save FILE\n";
                    continue;
                }
                MotionSequence seq = session->finalize();
                write_sequence_file(path, seq);
                write_transcript(path + ".transcript.json", session->transcript());
                std::cout << "saved " << seq.frames << " frames to " << path << " (+ transcript)\n";
            } else {
                std::cout << "unknown command; use :prompt/:steps/:save/:quit\n";
            }
        } catch (const Error& e) {
            std::cout << "error (" << e.kind() << "): " << e.what() << "\n";
        }
    }
    return 0;
}

} // namespace

int run(int argc, char** argv) {
    CLI::App app{"desk-scale text-to-motion toolkit: residual-quantized tokens, "
                 "hierarchical causal decoding, streaming prompt-switching generation"};
    app.require_subcommand(1);

    // ---- corpus make ----
    auto* corpus = app.add_subcommand("corpus", "synthetic corpus tools");
    corpus->require_subcommand(1);
    auto* cmake_ = corpus->add_subcommand("make", "generate a synthetic motion corpus");
    std::string corpus_spec, corpus_out;
    uint64_t corpus_seed = 7;
    bool corpus_print = false;
    cmake_->add_option("--spec", corpus_spec, "generator config file (built-in default if omitted)");
    cmake_->add_option("--out", corpus_out, "output corpus directory")->required();
    cmake_->add_option("--seed", corpus_seed, "corpus seed");
    cmake_->add_flag("--print-config", corpus_print, "dump the effective generator config");

    // ---- train ----
    auto* train = app.add_subcommand("train", "training stages");
    train->require_subcommand(1);
    std::string t_config, t_data, t_out, t_metrics, t_resume, t_vq;
    bool t_print = false;
    auto* tvq = train->add_subcommand("vq", "train the residual quantizer");
    tvq->add_option("--config", t_config, "config file");
    tvq->add_option("--data", t_data, "corpus directory")->required();
    tvq->add_option("--out", t_out, "output checkpoint")->required();
    tvq->add_option("--metrics", t_metrics, "metrics csv (default <out>.metrics.csv)");
    tvq->add_option("--resume", t_resume, "resume from checkpoint");
    tvq->add_flag("--print-config", t_print, "dump effective config");
    auto* trq = train->add_subcommand("rqhc", "train the token model over a frozen quantizer");
    trq->add_option("--config", t_config, "config file");
    trq->add_option("--data", t_data, "corpus directory")->required();
    trq->add_option("--vq", t_vq, "trained quantizer checkpoint")->required();
    trq->add_option("--out", t_out, "output checkpoint")->required();
    trq->add_option("--metrics", t_metrics, "metrics csv (default <out>.metrics.csv)");
    trq->add_option("--resume", t_resume, "resume from checkpoint");
    trq->add_flag("--print-config", t_print, "dump effective config");

    // ---- encode / decode ----
    auto* enc = app.add_subcommand("encode", "motion sequence file -> token file");
    std::string e_vq, e_in, e_out;
    enc->add_option("--vq", e_vq, "quantizer checkpoint")->required();
    enc->add_option("--in", e_in, "input sequence file")->required();
    enc->add_option("--out", e_out, "output token file")->required();
    auto* dec = app.add_subcommand("decode", "token file -> motion sequence file");
    std::string d_vq, d_in, d_out;
    dec->add_option("--vq", d_vq, "quantizer checkpoint")->required();
    dec->add_option("--in", d_in, "input token file")->required();
    dec->add_option("--out", d_out, "output sequence file")->required();

    // ---- generate ----
    GenerateArgs g;
    auto* gen = app.add_subcommand("generate", "scripted generation");
    gen->add_option("--model", g.model_path, "token model checkpoint")->required();
    gen->add_option("--vq", g.vq_path, "quantizer checkpoint")->required();
    gen->add_option("--prompt", g.prompt, "text prompt");
    gen->add_flag("--tca", g.tca, "normalize/decompose the prompt into scheduled steps");
    gen->add_flag("--tca-joint", g.tca_joint, "with --tca: one joint segment from the rewritten sentence");
    gen->add_option("--templates", g.templates_dir, "prompt template directory");
    gen->add_option("--schedule", g.schedule_file, "replay a transcript / schedule file");
    auto* g_seed = gen->add_option("--seed", g.seed, "sampler seed");
    auto* g_temp = gen->add_option("--temperature", g.temperature, "sampling temperature (0 = greedy)");
    auto* g_topk = gen->add_option("--top-k", g.top_k, "top-k truncation");
    gen->add_option("--max-len", g.max_len, "columns for a single-prompt run");
    gen->add_option("--segment-len", g.segment_len, "columns per scheduled step with --tca");
    auto* g_win = gen->add_option("--window", g.window, "attention/cache window");
    auto* g_ign = gen->add_flag("--ignore-eos", g.ignore_eos, "suppress the EOS class");
    gen->add_flag("--stale-cond-cache", g.stale_condition,
                  "keep stale condition cache entries on prompt switches");
    gen->add_option("--transcript", g.transcript_out, "write the run transcript here");
    gen->add_option("--out", g.out, "output sequence file")->required();

    // ---- session ----
    auto* ses = app.add_subcommand("session", "interactive prompt-switching REPL");
    std::string s_model, s_vq;
    SamplerConfig s_sampler;
    int s_window = 0;
    bool s_ignore = false, s_stale = false;
    ses->add_option("--model", s_model, "token model checkpoint")->required();
    ses->add_option("--vq", s_vq, "quantizer checkpoint")->required();
    ses->add_option("--seed", s_sampler.seed, "sampler seed");
    ses->add_option("--temperature", s_sampler.temperature, "sampling temperature");
    ses->add_option("--top-k", s_sampler.top_k, "top-k truncation");
    ses->add_option("--window", s_window, "attention/cache window");
    ses->add_flag("--ignore-eos", s_ignore, "suppress the EOS class");
    ses->add_flag("--stale-cond-cache", s_stale, "keep stale condition cache on switches");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "reconstruction/token metrics over a corpus");
    std::string v_model, v_vq, v_data, v_report;
    int v_max = 0;
    ev->add_option("--model", v_model, "token model checkpoint (optional)");
    ev->add_option("--vq", v_vq, "quantizer checkpoint")->required();
    ev->add_option("--data", v_data, "corpus directory")->required();
    ev->add_option("--report", v_report, "report output file")->required();
    ev->add_option("--max-sequences", v_max, "cap on eval sequences (0 = all)");

    // ---- inspect codebook ----
    auto* insp = app.add_subcommand("inspect", "checkpoint inspection");
    insp->require_subcommand(1);
    auto* icb = insp->add_subcommand("codebook", "dump per-level codebook usage as CSV");
    std::string i_vq, i_out;
    icb->add_option("--vq", i_vq, "quantizer checkpoint")->required();
    icb->add_option("--out", i_out, "output CSV")->required();

    CLI11_PARSE(app, argc, argv);

    if (cmake_->parsed()) {
        Config spec = corpus_spec.empty() ? Config::parse(default_corpus_spec_text())
                                          : Config::load_file(corpus_spec);
        if (corpus_print) std::cout << spec.canonical_text();
        print_seed_hierarchy(corpus_seed);
        Dataset ds = synthesize_corpus(spec, corpus_seed);
        write_corpus(corpus_out, ds);
        std::cout << "wrote " << ds.train.size() << " train / " << ds.eval.size()
                  << " eval sequences (dim " << ds.dim << ") to " << corpus_out << "\n";
        return 0;
    }

    if (tvq->parsed() || trq->parsed()) {
        Config cfg = t_config.empty() ? Config() : Config::load_file(t_config);
        Dataset ds = load_corpus(t_data);
        cfg.set_int("data.dim", ds.dim);
        cfg.set_double("data.fps", ds.fps);
        const std::string stage = tvq->parsed() ? "vq" : "rqhc";
        TrainConfig tc = train_config_from(cfg, stage);
        if (t_metrics.empty()) t_metrics = t_out + ".metrics.csv";
        print_seed_hierarchy(tc.seed);

        if (stage == "vq") {
            QuantizerConfig qc = quantizer_config_from(cfg);
            Config snapshot = cfg;
            quantizer_config_into(qc, snapshot);
            train_config_into(tc, snapshot);
            if (t_print) std::cout << snapshot.canonical_text();
            Rng init(mix_seed(tc.seed, "init"));
            Quantizer q(qc, init);
            VqTrainResult r = train_vq(q, ds, tc, t_out, t_metrics, snapshot, t_resume);
            std::cout << "vq training done: steps=" << r.steps
                      << " final_loss=" << r.final_train_loss
                      << " eval_recon_l1=" << r.final_eval_recon_l1 << "\n";
        } else {
            LoadedQuantizer lq = load_quantizer_checkpoint(t_vq);
            if (!cfg.has("rqhc.levels")) cfg.set_int("rqhc.levels", lq.qcfg.levels);
            if (!cfg.has("rqhc.codebook_size"))
                cfg.set_int("rqhc.codebook_size", lq.qcfg.codebook_size);
            TokenModelConfig mc = model_config_from(cfg);
            Config snapshot = cfg;
            model_config_into(mc, snapshot);
            train_config_into(tc, snapshot);
            if (t_print) std::cout << snapshot.canonical_text();
            Rng init(mix_seed(tc.seed, "init"));
            TokenModel m(mc, init);
            RqhcTrainResult r =
                train_rqhc(m, *lq.quantizer, ds, tc, t_out, t_metrics, snapshot, t_resume);
            std::cout << "rqhc training done: steps=" << r.steps << " final_ce=" << r.final_ce
                      << " eval_acc=" << r.final_eval_acc << "\n";
        }
        return 0;
    }

    if (enc->parsed()) {
        LoadedQuantizer lq = load_quantizer_checkpoint(e_vq);
        MotionSequence seq = read_sequence_file(e_in);
        const MotionSequence norm = normalize(seq, lq.quantizer->stats);
        NoGradGuard ng;
        Tensor m = Tensor::from({1, norm.frames, norm.dim}, norm.data);
        QuantizeTrace trace = lq.quantizer->quantize_all(
            view(lq.quantizer->encode(m), {norm.frames, lq.qcfg.latent_dim}));
        TokenGrid grid = lq.quantizer->grid_from_trace(trace);
        write_token_file(e_out, grid, lq.qcfg.codebook_size);
        std::cout << "encoded " << grid.n << " columns x " << grid.levels << " levels to " << e_out
                  << "\n";
        return 0;
    }

    if (dec->parsed()) {
        LoadedQuantizer lq = load_quantizer_checkpoint(d_vq);
        TokenGrid grid = read_token_file(d_in);
        MotionSequence seq = finalize_grid(*lq.quantizer, grid);
        write_sequence_file(d_out, seq);
        std::cout << "decoded " << seq.frames << " frames x " << seq.dim << " features to "
                  << d_out << "\n";
        return 0;
    }

    if (gen->parsed())
        return cmd_generate(g, g_seed->count() > 0, g_temp->count() > 0, g_topk->count() > 0,
                            g_win->count() > 0, g_ign->count() > 0);

    if (ses->parsed()) return cmd_session(s_model, s_vq, s_sampler, s_window, s_ignore, s_stale);

    if (ev->parsed()) {
        LoadedQuantizer lq = load_quantizer_checkpoint(v_vq);
        Dataset ds = load_corpus(v_data);
        ReconReport rep = recon_report(*lq.quantizer, ds.eval.empty() ? ds.train : ds.eval,
                                       lq.quantizer->stats, v_max);
        CodebookStats cs = codebook_stats(*lq.quantizer, ds.eval.empty() ? ds.train : ds.eval,
                                          lq.quantizer->stats, v_max);
        std::unique_ptr<TokenEval> te;
        if (!v_model.empty()) {
            LoadedModel lm = load_model_checkpoint(v_model);
            te = std::make_unique<TokenEval>(token_eval(*lm.model, *lq.quantizer,
                                                        ds.eval.empty() ? ds.train : ds.eval,
                                                        lq.quantizer->stats, v_max));
        }
        write_eval_report(v_report, rep, cs, te.get());
        std::cout << "recon_l1_per_element=" << rep.l1_per_element;
        if (te) std::cout << " token_ce=" << te->ce << " token_acc=" << te->acc;
        std::cout << "\nreport written to " << v_report << "\n";
        return 0;
    }

    if (icb->parsed()) {
        LoadedQuantizer lq = load_quantizer_checkpoint(i_vq);
        lq.quantizer->dump_codebook_csv(i_out);
        std::cout << "codebook dump written to " << i_out << "\n";
        return 0;
    }

    return 1;
}

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        std::cerr << "error: kind=" << e.kind() << " msg=\"" << e.what() << "\"\n";
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: kind=internal msg=\"" << e.what() << "\"\n";
        return 3;
    }
}
