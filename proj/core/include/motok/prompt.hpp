#pragma once

#include <memory>
#include <string>
#include <vector>

#include "motok/errors.hpp"

namespace motok {

struct PromptEmbedding {
    std::vector<float> vec; // unit L2 norm
    std::string source;     // "hash-embedder" or "external"
};

// Deterministic stand-in for a learned text encoder: lowercase, split on
// non-alphanumerics, hash each token to a seeded pseudorandom unit vector,
// average, re-normalize.
PromptEmbedding embed_prompt(const std::string& text, int dim);

// Style normalization: trim, collapse whitespace, lowercase, strip leading
// framing phrases, rewrite the leading verb into imperative present tense.
std::string tca_normalize(const std::string& raw);

struct TcaResult {
    std::string normalized;
    std::vector<std::string> steps; // 1..kTcaMaxSteps, each non-empty
    std::string rewritten;          // starts with a subject phrase
    bool used_fallback = false;     // external client failed or response was rejected
    std::string warning;
};

inline constexpr int kTcaMaxSteps = 5;

struct PromptTemplates {
    std::string role;       // role & goal priming
    std::string decompose;  // stepwise decomposition instructions
    std::string verify;     // self-verification instructions
    std::vector<std::string> exemplars; // exactly 3 by default

    static PromptTemplates defaults();
    // Reads role.txt, decompose.txt, verify.txt, exemplars.txt (blocks split
    // by lines containing only "---").
    static PromptTemplates load_dir(const std::string& dir);
    void save_dir(const std::string& dir) const;

    std::string render_request(const std::string& normalized) const;
};

// Single text-in/text-out completion call. Implementations may throw.
struct TextCompletionClient {
    virtual ~TextCompletionClient() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

// Vector-out embedding call for plugging in a real text encoder.
struct TextEmbeddingClient {
    virtual ~TextEmbeddingClient() = default;
    virtual std::vector<float> embed(const std::string& text, int dim) = 0;
};

// POST {"prompt": ...} to url, Authorization: Bearer <token> when non-empty;
// accepts {"text": ...} / {"completion": ...} JSON or a raw text body.
std::unique_ptr<TextCompletionClient> make_http_text_client(const std::string& url,
                                                            const std::string& token,
                                                            int timeout_seconds = 30);
// POST {"text": ..., "dim": N}; expects {"vector": [..]}.
std::unique_ptr<TextEmbeddingClient> make_http_embedding_client(const std::string& url,
                                                                const std::string& token,
                                                                int timeout_seconds = 30);

// Normalized instruction -> atomic steps. With no client this is a
// deterministic connective splitter capped at kTcaMaxSteps (extra fragments
// stay merged in the last step). With a client, renders the templates into
// one request and parses the Normalized:/Steps:/Final: sections, falling back
// to the deterministic path on any failure.
TcaResult tca_decompose(const std::string& normalized, const PromptTemplates& templates,
                        TextCompletionClient* client = nullptr);

// Full pipeline: normalize then decompose.
TcaResult tca_run(const std::string& raw, const PromptTemplates& templates,
                  TextCompletionClient* client = nullptr);

PromptEmbedding embed_prompt_external(const std::string& text, int dim,
                                      TextEmbeddingClient& client);

} // namespace motok
