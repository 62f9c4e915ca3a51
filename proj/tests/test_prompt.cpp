#include <doctest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "motok/prompt.hpp"
#include "motok/rng.hpp"

using namespace motok;
namespace fs = std::filesystem;
using json = nlohmann::json;

TEST_CASE("embed_prompt is a pure function with unit norm") {
    PromptEmbedding a = embed_prompt("walk in a circle", 64);
    PromptEmbedding b = embed_prompt("walk in a circle", 64);
    CHECK(a.vec == b.vec); // bitwise
    CHECK(a.source == "hash-embedder");

    double norm = 0;
    for (float v : a.vec) norm += static_cast<double>(v) * v;
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));

    CHECK_THROWS_AS(embed_prompt("", 64), ValidationError);
    CHECK_THROWS_AS(embed_prompt("  ,.;  ", 64), ValidationError);
}

TEST_CASE("embed_prompt normalizes tokenization") {
    CHECK(embed_prompt("walk", 32).vec == embed_prompt("WALK  ,", 32).vec);
    CHECK(embed_prompt("Walk! Run?", 32).vec == embed_prompt("walk run", 32).vec);
}

TEST_CASE("embed_prompt of two words equals the renormalized token mean") {
    const int d = 48;
    PromptEmbedding w = embed_prompt("walk", d);
    PromptEmbedding r = embed_prompt("run", d);
    PromptEmbedding both = embed_prompt("walk run", d);
    std::vector<double> mean(d);
    double norm = 0;
    for (int i = 0; i < d; ++i) {
        mean[i] = 0.5 * (static_cast<double>(w.vec[i]) + r.vec[i]);
        norm += mean[i] * mean[i];
    }
    norm = std::sqrt(norm);
    for (int i = 0; i < d; ++i)
        CHECK(both.vec[i] == doctest::Approx(mean[i] / norm).epsilon(1e-5));
}

TEST_CASE("tca_normalize") {
    CHECK(tca_normalize("Someone imitating a golf swing.") == "imitate a golf swing");
    CHECK(tca_normalize("walk forward then crouch") == "walk forward then crouch");
    CHECK(tca_normalize("   run   ") == "run");
    CHECK(tca_normalize("A human is practicing expressive spinning gestures.") ==
          "practice expressive spinning gestures");
    CHECK(tca_normalize("the person is waving both arms") == "wave both arms");
    CHECK(tca_normalize("walks forward slowly") == "walk forward slowly");
}

TEST_CASE("tca_decompose splits on connectives") {
    PromptTemplates t = PromptTemplates::defaults();

    SUBCASE("comma-separated atomic actions") {
        TcaResult r = tca_decompose("spin, pause, raise arms", t);
        REQUIRE(r.steps.size() == 3);
        CHECK(r.steps[0] == "spin");
        CHECK(r.steps[1] == "pause");
        CHECK(r.steps[2] == "raise arms");
        CHECK(r.rewritten == "A person spins, pauses, and raises arms.");
        CHECK_FALSE(r.used_fallback);
    }

    SUBCASE("single atomic verb") {
        TcaResult r = tca_decompose("jump", t);
        REQUIRE(r.steps.size() == 1);
        CHECK(r.steps[0] == "jump");
        CHECK(r.rewritten == "A person jumps.");
    }

    SUBCASE("then-chains") {
        TcaResult r = tca_decompose("walk forward then crouch then roll forward then stand", t);
        REQUIRE(r.steps.size() == 4);
        CHECK(r.steps[0] == "walk forward");
        CHECK(r.steps[1] == "crouch");
        CHECK(r.steps[2] == "roll forward");
        CHECK(r.steps[3] == "stand");
    }

    SUBCASE("step count is capped; the tail keeps its connectives") {
        TcaResult r = tca_decompose("walk, run, jump, spin, crouch, roll and stand", t);
        CHECK(static_cast<int>(r.steps.size()) == kTcaMaxSteps);
        // re-decomposing the joined steps is stable
        std::string joined;
        for (size_t i = 0; i < r.steps.size(); ++i) {
            if (i) joined += ", ";
            joined += r.steps[i];
        }
        TcaResult again = tca_decompose(joined, t);
        CHECK(again.steps.size() == r.steps.size());
    }

    SUBCASE("decomposition is idempotent on joined steps (property)") {
        Rng rng(17);
        const std::vector<std::string> verbs = {"walk",  "run",   "jump", "spin",
                                                "crouch", "wave",  "turn", "stand"};
        for (int trial = 0; trial < 50; ++trial) {
            const int k = 1 + rng.next_int(kTcaMaxSteps);
            std::vector<std::string> steps;
            for (int i = 0; i < k; ++i) steps.push_back(verbs[rng.next_int(8)]);
            std::string joined;
            for (int i = 0; i < k; ++i) {
                if (i) joined += ", ";
                joined += steps[i];
            }
            TcaResult r1 = tca_decompose(joined, t);
            CHECK(static_cast<int>(r1.steps.size()) == k);
            std::string rejoined;
            for (size_t i = 0; i < r1.steps.size(); ++i) {
                if (i) rejoined += ", ";
                rejoined += r1.steps[i];
            }
            TcaResult r2 = tca_decompose(rejoined, t);
            CHECK(r2.steps.size() == r1.steps.size());
        }
    }

    SUBCASE("empty instruction is rejected") {
        CHECK_THROWS_AS(tca_decompose("", t), ValidationError);
    }
}

TEST_CASE("templates: defaults carry three exemplars and survive a disk round trip") {
    PromptTemplates t = PromptTemplates::defaults();
    CHECK(t.exemplars.size() == 3);
    const fs::path dir = fs::temp_directory_path() / "motok_templates";
    fs::remove_all(dir);
    t.save_dir(dir.string());
    PromptTemplates back = PromptTemplates::load_dir(dir.string());
    CHECK(back.role == t.role);
    CHECK(back.decompose == t.decompose);
    CHECK(back.verify == t.verify);
    REQUIRE(back.exemplars.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(back.exemplars[i] == t.exemplars[i]);

    const std::string req = t.render_request("spin once");
    CHECK(req.find("Request: spin once") != std::string::npos);
    CHECK(req.find("Normalized:") != std::string::npos);
    fs::remove_all(dir);
}

namespace {

struct LocalServer {
    httplib::Server svr;
    std::thread thread;
    int port = 0;

    explicit LocalServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        svr.Post("/complete", std::move(handler));
        port = svr.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { svr.listen_after_bind(); });
        svr.wait_until_ready();
    }
    ~LocalServer() {
        svr.stop();
        thread.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port) + "/complete"; }
};

} // namespace

TEST_CASE("external text client: parsed response, fallback, and auth header") {
    PromptTemplates t = PromptTemplates::defaults();

    SUBCASE("well-formed response is adopted") {
        std::string seen_auth;
        LocalServer srv([&](const httplib::Request& req, httplib::Response& res) {
            seen_auth = req.get_header_value("Authorization");
            json body = json::parse(req.body);
            CHECK(body.contains("prompt"));
            json out = {{"text", "Normalized: spin and hold\n"
                                 "Steps:\n1. spin once\n2. hold still\n"
                                 "Final: A person spins once and holds still."}};
            res.set_content(out.dump(), "application/json");
        });
        auto client = make_http_text_client(srv.url(), "sekrit", 5);
        TcaResult r = tca_decompose("spin and hold", t, client.get());
        CHECK_FALSE(r.used_fallback);
        REQUIRE(r.steps.size() == 2);
        CHECK(r.steps[0] == "spin once");
        CHECK(r.steps[1] == "hold still");
        CHECK(r.rewritten == "A person spins once and holds still.");
        CHECK(seen_auth == "Bearer sekrit");
    }

    SUBCASE("overlong step lists are rejected and fall back") {
        LocalServer srv([&](const httplib::Request&, httplib::Response& res) {
            std::string steps;
            for (int i = 1; i <= 9; ++i) steps += std::to_string(i) + ". step\n";
            res.set_content("Normalized: x\nSteps:\n" + steps + "Final: A person moves.", "text/plain");
        });
        auto client = make_http_text_client(srv.url(), "", 5);
        TcaResult r = tca_decompose("spin, pause", t, client.get());
        CHECK(r.used_fallback);
        CHECK(r.steps.size() == 2); // deterministic path result
    }

    SUBCASE("transport failure falls back with a warning") {
        auto client = make_http_text_client("http://127.0.0.1:9/complete", "", 1);
        TcaResult r = tca_decompose("spin, pause", t, client.get());
        CHECK(r.used_fallback);
        CHECK_FALSE(r.warning.empty());
        REQUIRE(r.steps.size() == 2);
        CHECK(r.steps[0] == "spin");
    }
}

TEST_CASE("external embedding client") {
    SUBCASE("vector responses are normalized to unit length") {
        LocalServer srv([&](const httplib::Request& req, httplib::Response& res) {
            json body = json::parse(req.body);
            const int dim = body["dim"].get<int>();
            std::vector<float> v(dim, 2.0f);
            res.set_content(json{{"vector", v}}.dump(), "application/json");
        });
        auto client = make_http_embedding_client(srv.url(), "", 5);
        PromptEmbedding e = embed_prompt_external("hi", 8, *client);
        CHECK(e.source == "external");
        for (float x : e.vec) CHECK(x == doctest::Approx(1.0 / std::sqrt(8.0)));
    }

    SUBCASE("wrong dimension raises") {
        LocalServer srv([&](const httplib::Request&, httplib::Response& res) {
            res.set_content(json{{"vector", std::vector<float>(3, 1.0f)}}.dump(),
                            "application/json");
        });
        auto client = make_http_embedding_client(srv.url(), "", 5);
        CHECK_THROWS_AS(embed_prompt_external("hi", 8, *client), DimensionError);
    }
}

TEST_CASE("tca_run chains normalization and decomposition") {
    PromptTemplates t = PromptTemplates::defaults();
    TcaResult r = tca_run("Someone spinning, pausing, then raising arms.", t);
    CHECK(r.normalized == "spin, pausing, then raising arms");
    REQUIRE(r.steps.size() == 3);
    CHECK(r.steps[0] == "spin");
    CHECK(r.steps[1] == "pause"); // fragment verbs are re-imperativized
    CHECK(r.steps[2] == "raise arms");
}
