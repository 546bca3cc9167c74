#include "doctest.h"

#include <cmath>

#include "cptlab/model.hpp"
#include "toys.hpp"

using namespace cptlab;
using namespace cptlab::testing;

TEST_CASE("forward rejects empty and out-of-range input") {
    const ModelConfig c = tiny_config();
    const Checkpoint ck = make_checkpoint(c, Weights::initialize(c));
    CHECK_THROWS_AS(forward(ck, Tokens{}), ConfigError);
    CHECK_THROWS_AS(forward(ck, Tokens{1, 16}), ConfigError);
    CHECK_THROWS_AS(forward(ck, Tokens{-1}), ConfigError);
}

TEST_CASE("capture enumerates n_layers*(n_heads+1)+1 nodes") {
    ModelConfig c = tiny_config();
    c.n_layers = 3;
    c.n_heads = 2;
    const Checkpoint ck = make_checkpoint(c, Weights::initialize(c));
    const ForwardResult r = forward(ck, Tokens{1, 2, 3}, true);
    REQUIRE(r.record);
    CHECK(r.record->outputs.size() == 3u * 3u + 1u);
    CHECK(NodeLayout(c).count() == 10);
    for (const Matrix& m : r.record->outputs) {
        CHECK(m.rows() == 3);
        CHECK(m.cols() == c.d_model);
    }
}

TEST_CASE("forward is deterministic") {
    const ModelConfig c = tiny_config();
    const Checkpoint ck = make_checkpoint(c, Weights::initialize(c));
    const Tokens t{3, 1, 4, 1, 5};
    const Matrix a = forward(ck, t).logits;
    const Matrix b = forward(ck, t).logits;
    CHECK(a == b);
}

TEST_CASE("uniform logits give ln V cross-entropy and perplexity V") {
    const ModelConfig c = tiny_config();
    Weights w = Weights::initialize(c);
    w.w_out.setZero();
    const Checkpoint ck = make_checkpoint(c, std::move(w));
    const auto batch = sample_batch();
    CHECK(evaluate_loss(ck, batch).mean_ce() == doctest::Approx(std::log(16.0)).epsilon(1e-6));
    CHECK(perplexity(ck, batch) == doctest::Approx(16.0).epsilon(1e-5));
}

TEST_CASE("perplexity equals exp of a per-token brute-force loop") {
    const ModelConfig c = tiny_config();
    const Checkpoint ck = make_checkpoint(c, spread_weights(c));
    const auto batch = sample_batch();
    double sum = 0.0;
    std::size_t n = 0;
    for (const Sequence& s : batch) {
        const Matrix logits = forward(ck, s.tokens).logits;
        for (int p = s.loss_from; p < static_cast<int>(s.tokens.size()); ++p) {
            double z = 0.0;
            for (int j = 0; j < logits.cols(); ++j) {
                z += std::exp(static_cast<double>(logits(p - 1, j)));
            }
            sum += std::log(z) - logits(p - 1, s.tokens[p]);
            ++n;
        }
    }
    CHECK(perplexity(ck, batch) == doctest::Approx(std::exp(sum / n)).epsilon(1e-5));
}

TEST_CASE("analytic gradients match central finite differences for every parameter class") {
    const ModelConfig c = tiny_config();
    const Checkpoint ck = make_checkpoint(c, spread_weights(c));
    const auto batch = sample_batch();
    Gradients g = Gradients::for_checkpoint(ck);
    loss_and_grad(ck, batch, g);

    Weights probe = *ck.base;
    std::vector<std::pair<std::string, Matrix*>> params;
    probe.visit([&](const std::string& name, Matrix& m) { params.emplace_back(name, &m); });
    std::vector<std::pair<std::string, const Matrix*>> grads;
    g.base->visit([&](const std::string& name, const Matrix& m) { grads.emplace_back(name, &m); });

    const float h = 1e-3f;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Matrix& m = *params[k].second;
        const Matrix& gm = *grads[k].second;
        std::vector<double> analytic, numeric;
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            // token/position tables: only rows touched by the batch carry gradient
            if (gm.data()[i] == 0.0f) {
                continue;
            }
            const float orig = m.data()[i];
            m.data()[i] = orig + h;
            const double up = loss_of(make_checkpoint(c, probe), batch);
            m.data()[i] = orig - h;
            const double down = loss_of(make_checkpoint(c, probe), batch);
            m.data()[i] = orig;
            analytic.push_back(gm.data()[i]);
            numeric.push_back((up - down) / (2.0 * h));
        }
        CAPTURE(params[k].first);
        REQUIRE(!analytic.empty());
        MESSAGE(params[k].first << " rel err " << class_rel_error(analytic, numeric));
        CHECK(class_rel_error(analytic, numeric) < 1e-3);
    }
}

TEST_CASE("attached adapters leave outputs unchanged and count parameters") {
    ModelConfig c = tiny_config();
    const Checkpoint base = make_checkpoint(c, spread_weights(c));
    const Checkpoint ad = attach_adapters(base, AdapterConfig{4, 8.0f}, 3);
    const Tokens t{2, 7, 1, 8, 2, 8};
    CHECK(forward(ad, t).logits == forward(base, t).logits);

    ModelConfig wide = c;
    wide.n_layers = 2;
    wide.d_model = 64;
    wide.d_mlp = 128;
    wide.n_heads = 4;
    const Checkpoint wb = make_checkpoint(wide, Weights::initialize(wide));
    CHECK(attach_adapters(wb, AdapterConfig{4, 8.0f}, 1).adapters->parameter_count() == 2048u);

    CHECK_THROWS_AS(attach_adapters(ad, AdapterConfig{}, 1), ConfigError);
    CHECK_THROWS_AS(attach_adapters(base, AdapterConfig{0, 8.0f}, 1), ConfigError);
}

TEST_CASE("adapter gradients match finite differences; base gradients absent") {
    const ModelConfig c = tiny_config();
    Checkpoint ck = attach_adapters(make_checkpoint(c, spread_weights(c)), AdapterConfig{2, 4.0f}, 9);
    Rng rng(77);
    ck.adapters->visit([&](const std::string&, Matrix& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = 0.3f * static_cast<float>(rng.normal());
        }
    });
    const auto batch = sample_batch();
    Gradients g = Gradients::for_checkpoint(ck);
    CHECK_FALSE(g.base.has_value());
    REQUIRE(g.adapters.has_value());
    loss_and_grad(ck, batch, g);

    std::vector<std::pair<std::string, const Matrix*>> grads;
    g.adapters->visit([&](const std::string& n, const Matrix& m) { grads.emplace_back(n, &m); });
    Adapters probe = *ck.adapters;
    std::vector<std::pair<std::string, Matrix*>> params;
    probe.visit([&](const std::string& n, Matrix& m) { params.emplace_back(n, &m); });

    const float h = 1e-3f;
    for (std::size_t k = 0; k < params.size(); ++k) {
        std::vector<double> analytic, numeric;
        Matrix& m = *params[k].second;
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const float orig = m.data()[i];
            Checkpoint pert = ck;
            m.data()[i] = orig + h;
            pert.adapters = probe;
            const double up = loss_of(pert, batch);
            m.data()[i] = orig - h;
            pert.adapters = probe;
            const double down = loss_of(pert, batch);
            m.data()[i] = orig;
            analytic.push_back(grads[k].second->data()[i]);
            numeric.push_back((up - down) / (2.0 * h));
        }
        CAPTURE(params[k].first);
        CHECK(class_rel_error(analytic, numeric) < 1e-3);
    }
}

TEST_CASE("greedy generation: empty at max_new 0, deterministic, lowest id on ties") {
    const ModelConfig c = tiny_config();
    const Checkpoint ck = make_checkpoint(c, spread_weights(c));
    const Tokens prompt{1, 2, 3};
    CHECK(generate_greedy(ck, prompt, 0, 0).empty());
    CHECK(generate_greedy(ck, prompt, 15, 8) == generate_greedy(ck, prompt, 15, 8));
    CHECK_THROWS_AS(generate_greedy(ck, Tokens(10, 1), 0, 8), ConfigError);

    const std::vector<float> tied{0.5f, 2.0f, 2.0f, 1.0f};
    CHECK(argmax_lowest(tied) == 1);

    Weights flat = Weights::initialize(c);
    flat.w_out.setZero();
    const Checkpoint uniform = make_checkpoint(c, std::move(flat));
    const Tokens out = generate_greedy(uniform, prompt, 15, 4);
    CHECK(out == Tokens{0, 0, 0, 0});
}

TEST_CASE("kv-cached generation agrees with full recomputation") {
    const ModelConfig c = tiny_config();
    const Checkpoint ck = make_checkpoint(c, spread_weights(c));
    const Tokens prompt{4, 9, 2};
    const Tokens fast = generate_greedy(ck, prompt, 15, 10);
    Tokens seq = prompt;
    Tokens slow;
    for (int i = 0; i < 10; ++i) {
        const Matrix logits = forward(ck, seq).logits;
        const int next = argmax_lowest(std::span<const float>(logits.row(logits.rows() - 1).data(),
                                                              static_cast<std::size_t>(logits.cols())));
        if (next == 15) {
            break;
        }
        slow.push_back(next);
        seq.push_back(next);
    }
    CHECK(fast == slow);
}
