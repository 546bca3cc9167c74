#pragma once
// Small hand-checkable models shared by unit tests and the acceptance run.

#include <algorithm>
#include <cmath>

#include "cptlab/circuits.hpp"

namespace cptlab::testing {

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 8;
    c.d_mlp = 16;
    c.vocab_size = 16;
    c.max_seq_len = 16;
    c.seed = 11;
    return c;
}

// Larger-than-default init so every gradient entry is well above float noise.
inline Weights spread_weights(const ModelConfig& c) {
    Weights w = Weights::initialize(c);
    Rng rng(5);
    w.visit([&](const std::string& name, Matrix& m) {
        const bool gain = name.find("_g") != std::string::npos;
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = gain ? 1.0f + 0.3f * static_cast<float>(rng.normal())
                               : 0.4f * static_cast<float>(rng.normal());
        }
    });
    return w;
}

inline std::vector<Sequence> sample_batch() {
    std::vector<Sequence> batch{Sequence{{1, 5, 9, 3, 7, 2}, 1}, Sequence{{4, 4, 12, 15, 0}, 2}};
    Rng rng(23);
    for (int s = 0; s < 6; ++s) {
        Sequence seq;
        for (int t = 0; t < 14; ++t) {
            seq.tokens.push_back(static_cast<TokenId>(rng.below(16)));
        }
        batch.push_back(std::move(seq));
    }
    return batch;
}

inline double loss_of(const Checkpoint& ck, const std::vector<Sequence>& batch) {
    return evaluate_loss(ck, batch).mean_ce();
}

// Relative error ||a - n|| / max(||a||, ||n||) over the checked entries.
inline double class_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

inline Matrix random_matrix(Rng& rng, int r, int c) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<float>(rng.normal());
    }
    return m;
}

// Linear toy: emb -> A, emb + A -> B, logits read emb + A + B; the metric is
// a fixed linear readout of the logit node's input.
class LinearToy : public AttributionTarget {
public:
    LinearToy() {
        Rng rng(31);
        wa_ = random_matrix(rng, d, d);
        wb_ = random_matrix(rng, d, d);
        c_ = random_matrix(rng, d, 1);
        clean_ = random_matrix(rng, 3, d);
        corrupt_ = random_matrix(rng, 3, d);
        graph_ = AttributionGraph(4, {{0, 1}, {0, 2}, {1, 2}, {0, 3}, {1, 3}, {2, 3}}, {"emb", "A", "B", "logits"});
    }
    const AttributionGraph& graph() const override { return graph_; }
    int prompt_count() const override { return 1; }
    std::vector<Matrix> outputs(int, bool corrupted) const override {
        const Matrix& x = corrupted ? corrupt_ : clean_;
        Matrix a = x * wa_;
        Matrix b = (x + a) * wb_;
        return {x, a, b};
    }
    std::vector<Matrix> input_grads(int, double) const override {
        const Matrix ones = Matrix::Ones(clean_.rows(), 1);
        Matrix g3 = ones * c_.transpose();
        Matrix g2 = g3 * wb_.transpose();
        Matrix g1 = (g2 + g3) * wa_.transpose();
        return {Matrix(), g1, g2, g3};
    }
    // Metric with edge (src, dst) reading the corrupted activation.
    double patched(int src, int dst) const {
        const auto corr = outputs(0, true);
        auto pick = [&](int u, int v, const Matrix& clean) { return (u == src && v == dst) ? corr[u] : clean; };
        const Matrix x = clean_;
        const Matrix a = pick(0, 1, x) * wa_;
        const Matrix b = (pick(0, 2, x) + pick(1, 2, a)) * wb_;
        const Matrix in3 = pick(0, 3, x) + pick(1, 3, a) + pick(2, 3, b);
        return (in3 * c_).sum();
    }
    double metric() const { return patched(-1, -1); }

    static constexpr int d = 4;

private:
    Matrix wa_, wb_, c_, clean_, corrupt_;
    AttributionGraph graph_;
};

}  // namespace cptlab::testing
