#include "motok/prompt.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "motok/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace motok {

namespace {

std::string to_lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::string collapse_ws(const std::string& s) {
    std::string out;
    bool in_ws = true;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!in_ws) out.push_back(' ');
            in_ws = true;
        } else {
            out.push_back(c);
            in_ws = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

std::string join_words(const std::vector<std::string>& ws, size_t from = 0) {
    std::string out;
    for (size_t i = from; i < ws.size(); ++i) {
        if (!out.empty()) out.push_back(' ');
        out += ws[i];
    }
    return out;
}

// gerund -> imperative for verbs whose base is not recoverable by rule
const std::map<std::string, std::string>& gerund_table() {
    static const std::map<std::string, std::string> t = {
        {"imitating", "imitate"}, {"practicing", "practice"}, {"rehearsing", "rehearse"},
        {"waving", "wave"},       {"dancing", "dance"},       {"raising", "raise"},
        {"pausing", "pause"},     {"moving", "move"},         {"balancing", "balance"},
        {"circling", "circle"},   {"shaking", "shake"},       {"bouncing", "bounce"},
        {"leaning", "lean"},      {"riding", "ride"},         {"taking", "take"},
        {"making", "make"},       {"striding", "stride"},     {"lunging", "lunge"},
    };
    return t;
}

const std::set<std::string>& verb_lexicon() {
    static const std::set<std::string> v = {
        "walk",  "run",    "jump",  "spin",   "wave",  "turn",    "crouch", "roll",
        "stand", "sit",    "pause", "raise",  "lift",  "swing",   "step",   "kick",
        "punch", "bend",   "stretch", "dance", "jog",  "hold",    "drop",   "move",
        "imitate", "practice", "rehearse", "lean", "reach", "clap", "nod",  "squat",
        "hop",   "skip",   "march", "sway",   "point", "push",    "pull",   "throw",
        "catch", "balance", "stomp", "shake", "bow",   "climb",   "duck",   "slide",
        "stop",  "circle", "bounce", "twist", "lower", "land",    "steady", "stride",
        "lunge", "ride",
    };
    return v;
}

bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

// one word -> imperative present, best effort; trailing punctuation is kept
std::string imperativize_word(const std::string& word) {
    size_t core_end = word.size();
    while (core_end > 0 && !std::isalnum(static_cast<unsigned char>(word[core_end - 1])))
        --core_end;
    const std::string w = word.substr(0, core_end);
    const std::string tail = word.substr(core_end);
    auto reattach = [&](std::string base) { return base + tail; };
    auto it = gerund_table().find(w);
    if (it != gerund_table().end()) return reattach(it->second);
    if (w.size() > 4 && w.compare(w.size() - 3, 3, "ing") == 0) {
        std::string base = w.substr(0, w.size() - 3);
        const size_t n = base.size();
        if (n >= 2 && base[n - 1] == base[n - 2] && base[n - 1] != 'l' && base[n - 1] != 's')
            base.pop_back(); // spinning -> spin, jogging -> jog (rolling keeps "roll")
        return reattach(base);
    }
    if (w.size() > 2 && w.back() == 's') {
        std::string base = w.substr(0, w.size() - 1);
        if (verb_lexicon().count(base)) return reattach(base); // walks -> walk
        if (w.size() > 3 && w.compare(w.size() - 2, 2, "es") == 0) {
            base = w.substr(0, w.size() - 2);
            if (verb_lexicon().count(base)) return reattach(base); // crouches -> crouch
        }
    }
    return word;
}

// imperative base -> third person singular
std::string third_person(const std::string& w) {
    if (w.empty()) return w;
    const size_t n = w.size();
    auto ends = [&](const char* suf) {
        const size_t m = std::strlen(suf);
        return n >= m && w.compare(n - m, m, suf) == 0;
    };
    if (ends("s") || ends("x") || ends("z") || ends("ch") || ends("sh") || ends("o"))
        return w + "es";
    if (n >= 2 && w.back() == 'y' && !is_vowel(w[n - 2])) return w.substr(0, n - 1) + "ies";
    return w + "s";
}

std::string imperativize_fragment(const std::string& frag) {
    auto words = split_words(frag);
    if (words.empty()) return frag;
    words[0] = imperativize_word(words[0]);
    return join_words(words);
}

const std::vector<std::string>& framing_phrases() {
    // longest first so prefixes strip greedily
    static const std::vector<std::string> p = {
        "someone is",  "somebody is", "a human is",  "the human is", "a person is",
        "the person is", "a man is",  "the man is",  "a woman is",   "the woman is",
        "someone",     "somebody",    "a human",     "the human",    "a person",
        "the person",  "a man",       "the man",     "a woman",      "the woman",
    };
    return p;
}

} // namespace

PromptEmbedding embed_prompt(const std::string& text, int dim) {
    if (dim < 1) throw ValidationError("embed_prompt: dim must be >= 1");
    // tokenize: lowercase alphanumeric runs
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);
    if (tokens.empty()) throw ValidationError("embed_prompt: empty text");

    std::vector<float> sum(dim, 0.0f);
    for (const auto& tok : tokens) {
        Rng rng(mix_seed(hash_string(tok), hash_string("prompt-embed")));
        std::vector<float> v(dim);
        double norm = 0.0;
        for (int i = 0; i < dim; ++i) {
            v[i] = rng.gauss();
            norm += static_cast<double>(v[i]) * v[i];
        }
        const float inv = static_cast<float>(1.0 / std::sqrt(norm));
        for (int i = 0; i < dim; ++i) sum[i] += v[i] * inv;
    }
    const float invn = 1.0f / static_cast<float>(tokens.size());
    double norm = 0.0;
    for (int i = 0; i < dim; ++i) {
        sum[i] *= invn;
        norm += static_cast<double>(sum[i]) * sum[i];
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(norm));
    for (int i = 0; i < dim; ++i) sum[i] *= inv;
    return {std::move(sum), "hash-embedder"};
}

std::string tca_normalize(const std::string& raw) {
    std::string s = collapse_ws(to_lower(raw));
    while (!s.empty() && (s.back() == '.' || s.back() == '!' || s.back() == '?')) s.pop_back();
    s = collapse_ws(s);
    if (s.empty()) return s;
    for (const auto& phrase : framing_phrases()) {
        if (s.size() > phrase.size() && s.compare(0, phrase.size(), phrase) == 0 &&
            s[phrase.size()] == ' ') {
            s = s.substr(phrase.size() + 1);
            break;
        }
    }
    return imperativize_fragment(s);
}

// ---------------- templates ----------------

PromptTemplates PromptTemplates::defaults() {
    PromptTemplates t;
    t.role =
        "You are an instruction rewriter for a humanoid motion synthesis system.\n"
        "Turn the user request into: a concise imperative command (Normalized), a numbered\n"
        "list of minimal executable actions (Steps), and one fluent sentence beginning with\n"
        "'A person' that combines every action (Final).\n";
    t.decompose =
        "Think step by step, but do not reveal your reasoning. First rewrite the request\n"
        "as one concise imperative sentence. Then list the minimal executable actions, one\n"
        "per line, numbered from 1. Use between 1 and 5 steps; insert an explicit hold\n"
        "action where the request implies a pause. Finish with a single sentence beginning\n"
        "'A person' that merges all of the actions.\n";
    t.verify =
        "Before answering, check every step: it must be executable in isolation by a\n"
        "humanoid motion agent. If any step is composite or ambiguous, split it and\n"
        "rewrite the whole list and the final sentence before responding.\n";
    t.exemplars = {
        "Request: a person is walking in a circle of radius 1.00 meters\n"
        "Normalized: walk in a circle\n"
        "Steps:\n"
        "1. walk forward along a circular path\n"
        "2. keep turning until back at the start\n"
        "Final: A person walks in a circle and returns to the start.",
        "Request: someone jumping 2 times in place\n"
        "Normalized: jump 2 times in place\n"
        "Steps:\n"
        "1. jump in place\n"
        "2. land and steady\n"
        "3. jump in place again\n"
        "Final: A person jumps in place, steadies, and jumps again.",
        "Request: the person is waving the right arm slowly\n"
        "Normalized: wave the right arm slowly\n"
        "Steps:\n"
        "1. raise the right arm\n"
        "2. wave the right arm slowly\n"
        "3. lower the right arm\n"
        "Final: A person raises the right arm, waves it slowly, and lowers it.",
    };
    return t;
}

namespace {

std::string read_text_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open template file: " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

PromptTemplates PromptTemplates::load_dir(const std::string& dir) {
    const fs::path root(dir);
    PromptTemplates t;
    t.role = read_text_file(root / "role.txt");
    t.decompose = read_text_file(root / "decompose.txt");
    t.verify = read_text_file(root / "verify.txt");
    const std::string ex = read_text_file(root / "exemplars.txt");
    std::istringstream in(ex);
    std::string line, block;
    auto flush = [&] {
        while (!block.empty() && block.back() == '\n') block.pop_back();
        if (!block.empty()) t.exemplars.push_back(block);
        block.clear();
    };
    while (std::getline(in, line)) {
        if (line == "---") {
            flush();
        } else {
            block += line;
            block += '\n';
        }
    }
    flush();
    if (t.exemplars.empty()) throw ValidationError("exemplars.txt contains no blocks");
    return t;
}

void PromptTemplates::save_dir(const std::string& dir) const {
    fs::create_directories(dir);
    auto put = [&](const char* name, const std::string& text) {
        std::ofstream out(fs::path(dir) / name);
        if (!out) throw IoError(std::string("cannot write template file: ") + name);
        out << text;
    };
    put("role.txt", role);
    put("decompose.txt", decompose);
    put("verify.txt", verify);
    std::string ex;
    for (size_t i = 0; i < exemplars.size(); ++i) {
        if (i) ex += "---\n";
        ex += exemplars[i];
        ex += '\n';
    }
    put("exemplars.txt", ex);
}

std::string PromptTemplates::render_request(const std::string& normalized) const {
    std::ostringstream out;
    out << role << "\n" << decompose << "\n" << verify << "\n";
    for (const auto& ex : exemplars) out << ex << "\n---\n";
    out << "Request: " << normalized << "\n";
    out << "Respond with exactly three sections labelled Normalized:, Steps:, Final:\n";
    return out.str();
}

// ---------------- deterministic decomposition ----------------

namespace {

std::vector<std::string> split_connectives(const std::string& text, int max_fragments) {
    // word-level scan; ','/';' act as boundaries, as do standalone "then"/"and"
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : text) {
        if (c == ',' || c == ';') {
            if (!cur.empty()) tokens.push_back(cur);
            cur.clear();
            tokens.push_back(std::string(1, c));
        } else if (c == ' ') {
            if (!cur.empty()) tokens.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) tokens.push_back(cur);

    std::vector<std::string> fragments;
    std::vector<std::string> frag_words;
    auto flush = [&] {
        if (!frag_words.empty()) {
            fragments.push_back(join_words(frag_words));
            frag_words.clear();
        }
    };
    for (size_t i = 0; i < tokens.size(); ++i) {
        const std::string& tok = tokens[i];
        const bool boundary = tok == "," || tok == ";" || tok == "then" || tok == "and";
        // stop splitting once the cap is reached: the remainder stays one fragment
        if (boundary && static_cast<int>(fragments.size()) < max_fragments - 1) {
            flush();
        } else if (boundary && static_cast<int>(fragments.size()) >= max_fragments - 1) {
            if (!frag_words.empty() && (tok == "then" || tok == "and")) frag_words.push_back(tok);
            // bare punctuation inside the merged tail is dropped
        } else {
            frag_words.push_back(tok);
        }
    }
    flush();
    return fragments;
}

std::string rewrite_sentence(const std::vector<std::string>& steps) {
    std::vector<std::string> parts;
    for (const auto& s : steps) {
        auto words = split_words(s);
        if (words.empty()) continue;
        words[0] = third_person(words[0]);
        parts.push_back(join_words(words));
    }
    std::string body;
    if (parts.size() == 1) {
        body = parts[0];
    } else if (parts.size() == 2) {
        body = parts[0] + " and " + parts[1];
    } else {
        for (size_t i = 0; i + 1 < parts.size(); ++i) body += parts[i] + ", ";
        body += "and " + parts.back();
    }
    return "A person " + body + ".";
}

TcaResult mock_decompose(const std::string& normalized) {
    TcaResult r;
    r.normalized = normalized;
    auto fragments = split_connectives(normalized, kTcaMaxSteps);
    for (auto& f : fragments) {
        std::string step = imperativize_fragment(f);
        if (!step.empty()) r.steps.push_back(step);
    }
    if (r.steps.empty()) r.steps.push_back(normalized);
    r.rewritten = rewrite_sentence(r.steps);
    return r;
}

bool parse_client_response(const std::string& text, TcaResult& r) {
    std::istringstream in(text);
    std::string line;
    enum { None, Steps } mode = None;
    std::string normalized, final;
    std::vector<std::string> steps;
    while (std::getline(in, line)) {
        std::string t = collapse_ws(line);
        if (t.rfind("Normalized:", 0) == 0) {
            normalized = collapse_ws(t.substr(11));
            mode = None;
        } else if (t.rfind("Steps:", 0) == 0) {
            mode = Steps;
        } else if (t.rfind("Final:", 0) == 0) {
            final = collapse_ws(t.substr(6));
            mode = None;
        } else if (mode == Steps && !t.empty()) {
            // strip "N." / "N)" / "-" prefixes
            size_t p = 0;
            while (p < t.size() && std::isdigit(static_cast<unsigned char>(t[p]))) ++p;
            if (p < t.size() && (t[p] == '.' || t[p] == ')')) ++p;
            if (p == 0 && t[0] == '-') p = 1;
            std::string step = collapse_ws(t.substr(p));
            if (!step.empty()) steps.push_back(step);
        }
    }
    if (steps.empty() || static_cast<int>(steps.size()) > kTcaMaxSteps) return false;
    if (final.empty()) return false;
    r.normalized = normalized.empty() ? r.normalized : normalized;
    r.steps = std::move(steps);
    r.rewritten = final;
    return true;
}

} // namespace

TcaResult tca_decompose(const std::string& normalized, const PromptTemplates& templates,
                        TextCompletionClient* client) {
    if (normalized.empty()) throw ValidationError("tca_decompose: empty instruction");
    if (!client) return mock_decompose(normalized);
    TcaResult r;
    r.normalized = normalized;
    try {
        const std::string request = templates.render_request(normalized);
        const std::string response = client->complete(request);
        if (parse_client_response(response, r)) return r;
        r = mock_decompose(normalized);
        r.used_fallback = true;
        r.warning = "client response failed validation; used deterministic decomposition";
        return r;
    } catch (const std::exception& e) {
        r = mock_decompose(normalized);
        r.used_fallback = true;
        r.warning = std::string("client call failed (") + e.what() +
                    "); used deterministic decomposition";
        return r;
    }
}

TcaResult tca_run(const std::string& raw, const PromptTemplates& templates,
                  TextCompletionClient* client) {
    const std::string norm = tca_normalize(raw);
    if (norm.empty()) throw ValidationError("tca: prompt is empty after normalization");
    return tca_decompose(norm, templates, client);
}

// ---------------- HTTP clients ----------------

namespace {

struct ParsedUrl {
    std::string host_port; // "host:port"
    std::string path;
};

ParsedUrl parse_url(const std::string& url) {
    std::string rest = url;
    const std::string scheme = "http://";
    if (rest.rfind(scheme, 0) == 0) rest = rest.substr(scheme.size());
    else if (rest.rfind("https://", 0) == 0)
        throw ConfigError("https endpoints are not supported; use http");
    const size_t slash = rest.find('/');
    ParsedUrl p;
    p.host_port = slash == std::string::npos ? rest : rest.substr(0, slash);
    p.path = slash == std::string::npos ? "/" : rest.substr(slash);
    if (p.host_port.empty()) throw ConfigError("bad endpoint url: " + url);
    return p;
}

class HttpTextClient final : public TextCompletionClient {
  public:
    HttpTextClient(std::string url, std::string token, int timeout_seconds)
        : url_(std::move(url)), token_(std::move(token)), timeout_(timeout_seconds) {}

    std::string complete(const std::string& prompt) override {
        const ParsedUrl p = parse_url(url_);
        httplib::Client cli(p.host_port);
        cli.set_connection_timeout(timeout_, 0);
        cli.set_read_timeout(timeout_, 0);
        httplib::Headers headers;
        if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
        json body = {{"prompt", prompt}};
        auto res = cli.Post(p.path, headers, body.dump(), "application/json");
        if (!res) throw IoError("text endpoint unreachable: " + url_);
        if (res->status != 200)
            throw IoError("text endpoint returned status " + std::to_string(res->status));
        // JSON {"text":...}/{"completion":...} or raw text
        try {
            json j = json::parse(res->body);
            if (j.contains("text")) return j["text"].get<std::string>();
            if (j.contains("completion")) return j["completion"].get<std::string>();
        } catch (const json::exception&) {
        }
        return res->body;
    }

  private:
    std::string url_;
    std::string token_;
    int timeout_;
};

class HttpEmbeddingClient final : public TextEmbeddingClient {
  public:
    HttpEmbeddingClient(std::string url, std::string token, int timeout_seconds)
        : url_(std::move(url)), token_(std::move(token)), timeout_(timeout_seconds) {}

    std::vector<float> embed(const std::string& text, int dim) override {
        const ParsedUrl p = parse_url(url_);
        httplib::Client cli(p.host_port);
        cli.set_connection_timeout(timeout_, 0);
        cli.set_read_timeout(timeout_, 0);
        httplib::Headers headers;
        if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
        json body = {{"text", text}, {"dim", dim}};
        auto res = cli.Post(p.path, headers, body.dump(), "application/json");
        if (!res) throw IoError("embedding endpoint unreachable: " + url_);
        if (res->status != 200)
            throw IoError("embedding endpoint returned status " + std::to_string(res->status));
        json j = json::parse(res->body);
        if (!j.contains("vector") || !j["vector"].is_array())
            throw IoError("embedding endpoint response lacks a vector field");
        std::vector<float> v = j["vector"].get<std::vector<float>>();
        if (static_cast<int>(v.size()) != dim)
            throw DimensionError("embedding endpoint returned wrong dimension");
        return v;
    }

  private:
    std::string url_;
    std::string token_;
    int timeout_;
};

} // namespace

std::unique_ptr<TextCompletionClient> make_http_text_client(const std::string& url,
                                                            const std::string& token,
                                                            int timeout_seconds) {
    return std::make_unique<HttpTextClient>(url, token, timeout_seconds);
}

std::unique_ptr<TextEmbeddingClient> make_http_embedding_client(const std::string& url,
                                                                const std::string& token,
                                                                int timeout_seconds) {
    return std::make_unique<HttpEmbeddingClient>(url, token, timeout_seconds);
}

PromptEmbedding embed_prompt_external(const std::string& text, int dim,
                                      TextEmbeddingClient& client) {
    std::vector<float> v = client.embed(text, dim);
    double norm = 0.0;
    for (float x : v) norm += static_cast<double>(x) * x;
    if (norm <= 0.0) throw NumericError("external embedding has zero norm");
    const float inv = static_cast<float>(1.0 / std::sqrt(norm));
    for (float& x : v) x *= inv;
    return {std::move(v), "external"};
}

} // namespace motok
