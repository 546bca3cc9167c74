#pragma once
// Edge attribution with integrated gradients, circuit extraction and
// faithfulness under ablation.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/corpus.hpp"
#include "cptlab/model.hpp"
#include "cptlab/train.hpp"

namespace cptlab {

struct Edge {
    int src = 0;
    int dst = 0;
    bool operator==(const Edge&) const = default;
};

/// Nodes: embedding, every head, every MLP, then the logit node. An edge joins
/// each node to every later node that reads the residual stream: heads read
/// earlier layers, an MLP also reads its own layer's heads, logits read all.
class AttributionGraph {
public:
    AttributionGraph() = default;
    AttributionGraph(int nodes, std::vector<Edge> edges, std::vector<std::string> names);
    static AttributionGraph for_model(const ModelConfig& config);

    int node_count() const { return nodes_; }  // logit node included
    int logit_node() const { return nodes_ - 1; }
    const std::vector<Edge>& edges() const { return edges_; }
    std::size_t edge_count() const { return edges_.size(); }
    const std::string& name(int node) const { return names_.at(static_cast<std::size_t>(node)); }
    /// Edge id or -1.
    int find(int src, int dst) const;
    std::string signature() const;
    bool operator==(const AttributionGraph& o) const { return signature() == o.signature(); }

private:
    int nodes_ = 0;
    std::vector<Edge> edges_;
    std::vector<std::string> names_;
    std::vector<int> lookup_;  // src * nodes + dst -> edge id
};

struct TripletPrompt {
    int subject = 0;
    int corrupt_subject = 0;
    Tokens clean;
    Tokens corrupted;
    TokenId gold = 0;            // first token of the clean answer
    TokenId corrupted_answer = 0;
    std::string clean_text;
    std::string gold_text;
};

/// Head-of-state prompts over the High GPE entities; each corrupted prompt
/// swaps in another subject whose answer starts with a different token.
std::vector<TripletPrompt> make_circuit_prompts(const Entities& entities, const FactTable& facts, const Vocab& vocab,
                                                std::uint64_t seed);

double metric_logit_diff(std::span<const float> logits, TokenId gold, TokenId corrupted);

/// What attribution needs from a network: node outputs on the clean and
/// corrupted inputs, and metric gradients with respect to every node's input
/// read at an input interpolated a fraction `alpha` from clean toward corrupt.
class AttributionTarget {
public:
    virtual ~AttributionTarget() = default;
    virtual const AttributionGraph& graph() const = 0;
    virtual int prompt_count() const = 0;
    /// Outputs per node (index < logit node); rows are positions.
    virtual std::vector<Matrix> outputs(int prompt, bool corrupted) const = 0;
    /// Gradient of the metric with respect to each reading node's input
    /// (index = node; the embedding entry is unused).
    virtual std::vector<Matrix> input_grads(int prompt, double alpha) const = 0;
};

class ModelTarget : public AttributionTarget {
public:
    ModelTarget(const Checkpoint& ckpt, std::span<const TripletPrompt> prompts);
    const AttributionGraph& graph() const override { return graph_; }
    int prompt_count() const override { return static_cast<int>(prompts_.size()); }
    std::vector<Matrix> outputs(int prompt, bool corrupted) const override;
    std::vector<Matrix> input_grads(int prompt, double alpha) const override;

private:
    const Checkpoint& ckpt_;
    std::span<const TripletPrompt> prompts_;
    AttributionGraph graph_;
    std::vector<std::pair<Matrix, Matrix>> embeds_;  // clean, corrupted
};

/// score(u->v) = sum over positions of (out_u corrupt - out_u clean) . mean_j
/// grad_v(j/m), averaged over prompts.
std::vector<double> eap_ig_scores(const AttributionTarget& target, int m = 30);

struct Circuit {
    std::vector<int> edges;  // edge ids, sorted
    std::vector<double> scores;  // score per kept edge, same order
    int k = 0;
    int m = 0;
    int epoch = 0;
    std::string prompt_set;
    std::string graph;  // graph signature
};

/// Top-k edges by |score|; ties keep the smaller edge id. k above the edge
/// count is clamped and reported through `warn`.
Circuit extract_circuit(const AttributionGraph& graph, std::span<const double> scores, int k,
                        const std::function<void(const std::string&)>& warn = nullptr);

double jaccard(const Circuit& a, const Circuit& b);

enum class Ablation { Corrupted, Mean };

/// Rank of `gold` among final logits, ties to the smaller id; hit when rank < k.
bool top_k_hit(std::span<const float> logits, TokenId gold, int k);

/// Hit rate of the unablated model.
double model_hit_at_k(const Checkpoint& ckpt, std::span<const TripletPrompt> prompts, int k = 10);

/// Hit rate with every non-circuit edge reading the replacement activation:
/// the corrupted run's, or the mean over prompts of the clean runs.
double circuit_hit_at_k(const Checkpoint& ckpt, const Circuit& circuit, std::span<const TripletPrompt> prompts,
                        int k = 10, Ablation ablation = Ablation::Corrupted);

struct SweepConfig {
    double k_fraction = 0.10;
    int m = 30;
    int runs = 5;
    int hit_k = 10;
    Ablation ablation = Ablation::Corrupted;
};

struct CircuitSweep {
    std::vector<Circuit> circuits;   // index t
    std::vector<double> jaccard;     // J(C_0, C_t)
    std::vector<double> own_hit;     // Hit@k of C_t on M_t
    std::vector<double> run_hit_std; // spread of Hit@k across the seeded runs, per epoch
    std::vector<double> metric_std;  // spread of clean-vs-corrupt logit difference across prompts, per epoch
    int best_epoch = 0;              // peak mean recall
    // rows Before (C_0), After (C_T), Best (C_best); columns checkpoints 0..T
    std::vector<std::string> hit_rows;
    std::vector<std::vector<double>> hit_table;
    std::vector<double> model_hit;   // unablated Hit@k per checkpoint
};

CircuitSweep circuit_sweep(const RunRecord& run, const Entities& entities, const FactTable& facts, const Vocab& vocab,
                           const SweepConfig& config, std::uint64_t seed,
                           const std::function<void(const std::string&)>& log = nullptr);

nlohmann::json circuit_json(const Circuit& c, const AttributionGraph& graph);
std::string jaccard_csv(const CircuitSweep& s);
std::string hit_table_csv(const CircuitSweep& s);

/// Hit@k of circuits at several edge fractions on one checkpoint, next to the
/// unablated model's.
struct KSweepRow {
    double fraction = 0.0;
    int k = 0;
    double hit = 0.0;
};
std::vector<KSweepRow> k_sweep(const Checkpoint& ckpt, std::span<const TripletPrompt> prompts,
                               std::span<const double> fractions, int m, int hit_k);

}  // namespace cptlab
