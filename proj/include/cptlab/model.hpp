#pragma once

// Small decoder-only transformer with hand-written reverse mode, low-rank
// query/value adapters and node-level activation access for circuit analysis.

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/common.hpp"

namespace cptlab {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 128;
    int d_mlp = 512;
    int vocab_size = 0;
    int max_seq_len = 256;
    std::uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerWeights {
    Matrix ln1_g, ln1_b;
    Matrix wq, wk, wv, wo;
    Matrix ln2_g, ln2_b;
    Matrix w1, b1, w2, b2;
};

/// Base parameters. Row vectors (gains, biases) are stored as 1 x n matrices.
struct Weights {
    Matrix tok_emb, pos_emb;
    std::vector<LayerWeights> layers;
    Matrix lnf_g, lnf_b;
    Matrix w_out;

    static Weights initialize(const ModelConfig& config);
    static Weights zeros(const ModelConfig& config);

    /// Visits every tensor in manifest order with its stable name.
    void visit(const std::function<void(const std::string&, Matrix&)>& fn);
    void visit(const std::function<void(const std::string&, const Matrix&)>& fn) const;
    std::size_t parameter_count() const;
};

struct AdapterConfig {
    int rank = 4;
    float alpha = 8.0f;

    float scale() const { return alpha / static_cast<float>(rank); }
    bool operator==(const AdapterConfig&) const = default;
};

void to_json(nlohmann::json& j, const AdapterConfig& c);
void from_json(const nlohmann::json& j, AdapterConfig& c);

/// Low-rank update W_eff = W + scale * down * up for the query and value maps.
struct LayerAdapters {
    Matrix q_down, q_up;  // d x r, r x d
    Matrix v_down, v_up;
};

struct Adapters {
    AdapterConfig config;
    std::vector<LayerAdapters> layers;

    Adapters zeros_like() const;
    void visit(const std::function<void(const std::string&, Matrix&)>& fn);
    void visit(const std::function<void(const std::string&, const Matrix&)>& fn) const;
    std::size_t parameter_count() const;
};

struct TrainStats {
    double ce_loss = 0.0;
    double kl_term = 0.0;
    double perplexity = 0.0;
};

/// Immutable model snapshot. Checkpoints produced by adapter training share
/// one frozen base.
struct Checkpoint {
    ModelConfig config;
    int epoch = 0;
    std::shared_ptr<const Weights> base;
    std::optional<Adapters> adapters;
    TrainStats stats;
};

Checkpoint make_checkpoint(const ModelConfig& config, Weights weights, int epoch = 0);

/// Adds zero-initialized-up adapters to query and value; outputs are unchanged
/// until the first update.
Checkpoint attach_adapters(const Checkpoint& ckpt, const AdapterConfig& config,
                           std::uint64_t seed);

/// Node enumeration shared by every checkpoint of one config:
/// 0 = embedding, then per layer the heads followed by the MLP.
struct NodeLayout {
    int n_layers = 0;
    int n_heads = 0;

    explicit NodeLayout(const ModelConfig& c) : n_layers(c.n_layers), n_heads(c.n_heads) {}
    int count() const { return n_layers * (n_heads + 1) + 1; }
    int head(int layer, int h) const { return 1 + layer * (n_heads + 1) + h; }
    int mlp(int layer) const { return 1 + layer * (n_heads + 1) + n_heads; }
    std::string name(int node) const;
};

/// Per-node outputs (positions x d_model) and, after a backward pass with node
/// gradients requested, the metric gradient with respect to each node's own
/// input read. Index `count()` of `input_grads` is the logit node.
struct ActivationRecord {
    std::vector<Matrix> outputs;
    std::vector<Matrix> input_grads;
};

struct ForwardOptions {
    bool keep_cache = false;    // needed for backward
    bool capture = false;       // fill ActivationRecord::outputs
    bool last_row_only = false; // logits only for the final position of each sequence
    const Matrix* embed_override = nullptr;  // replaces token+position embedding (single sequence)
};

struct ForwardTrace;

struct ForwardResult {
    Matrix logits;                        // rows x vocab (or sequences x vocab when last_row_only)
    std::vector<int> offsets;             // row offset of each sequence; offsets.back() == rows
    std::optional<ActivationRecord> record;
    std::shared_ptr<ForwardTrace> trace;  // set when keep_cache
};

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens);

ForwardResult forward_batch(const Checkpoint& ckpt, std::span<const Tokens> sequences,
                            const ForwardOptions& opts = {});

/// Logits for one sequence; capture fills the activation record.
ForwardResult forward(const Checkpoint& ckpt, const Tokens& tokens, bool capture = false);

/// Gradient sinks. Exactly one of base/adapters is the trainable set.
struct Gradients {
    std::optional<Weights> base;
    std::optional<Adapters> adapters;

    static Gradients for_checkpoint(const Checkpoint& ckpt);
    void zero();
};

/// Reverse pass for a cached forward. `grads` may be null when only node input
/// gradients are wanted.
void backward(const Checkpoint& ckpt, const ForwardResult& fwd, const Matrix& dlogits,
              Gradients* grads, ActivationRecord* node_grads = nullptr);

/// A training sequence whose targets are the tokens at positions >= loss_from.
struct Sequence {
    Tokens tokens;
    int loss_from = 1;
};

struct LossResult {
    double ce_sum = 0.0;
    std::size_t targets = 0;
    double mean_ce() const { return targets ? ce_sum / static_cast<double>(targets) : 0.0; }
};

/// Mean next-token cross-entropy over all targets of the batch and its
/// gradient for the trainable set.
LossResult loss_and_grad(const Checkpoint& ckpt, std::span<const Sequence> batch, Gradients& grads);

/// Sum of next-token cross-entropy without gradients.
LossResult evaluate_loss(const Checkpoint& ckpt, std::span<const Sequence> samples,
                         std::size_t batch_size = 16);

/// exp of the mean per-token cross-entropy.
double perplexity(const Checkpoint& ckpt, std::span<const Sequence> samples);

/// Greedy continuation; ties resolve to the lowest token id, stops after `eos`.
Tokens generate_greedy(const Checkpoint& ckpt, const Tokens& prompt, TokenId eos, int max_new = 25);

/// Index of the largest value; the lowest index wins ties.
int argmax_lowest(std::span<const float> values);

/// Reads node u's contribution to node v's input during a patched forward.
/// Returning false substitutes the replacement activation for that edge.
using EdgeFilter = std::function<bool(int src, int dst)>;

/// Forward pass in which every node reads its own input assembled edge by edge:
/// kept edges carry the patched run's activation, the others `replacement`'s.
/// Returns final-position logits.
Matrix forward_patched(const Checkpoint& ckpt, const Tokens& tokens,
                       const ActivationRecord& replacement, const EdgeFilter& keep);

}  // namespace cptlab
