#pragma once

// Epoch-level evaluation cycle: recall trajectories, transition labels,
// distortion and run summaries.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/corpus.hpp"
#include "cptlab/probes.hpp"

namespace cptlab {

inline constexpr double kDefaultTheta = 0.60;

enum class TransitionLabel { Acquired, Retained, Forgotten, NotLearned };

std::string_view to_string(TransitionLabel l);
TransitionLabel parse_transition(std::string_view s);

TransitionLabel classify_transition(double r_prev, double r_cur, double theta = kDefaultTheta);

/// Strict decrease.
bool detect_distortion(double ood_cur, double ood_prev);

struct TransitionCounts {
    int acquired = 0;
    int retained = 0;
    int forgotten = 0;
    int not_learned = 0;
    bool operator==(const TransitionCounts&) const = default;
};

struct EntityEpoch {
    int entity = 0;
    FreqClass freq_class = FreqClass::High;
    double recall = 0.0;
    std::optional<TransitionLabel> label;  // absent at t = 0
};

struct EpochReport {
    int epoch = 0;
    double perplexity = 0.0;
    double ce = 0.0;
    double kl = 0.0;
    std::vector<EntityEpoch> entities;
    double recall_all = 0.0;
    double recall_high = 0.0;
    double recall_low = 0.0;
    std::map<std::string, double> ood;  // per task
    double ood_mean = 0.0;
    std::optional<TransitionCounts> counts;
    bool distortion = false;
    std::map<std::string, bool> distortion_by_task;
    std::vector<ProbeResult> knowledge_results;
    std::vector<ProbeResult> ood_results;

    const EntityEpoch& entity(int id) const;
};

void to_json(nlohmann::json& j, const EpochReport& r);
void from_json(const nlohmann::json& j, EpochReport& r);

struct Suites {
    std::vector<KnowledgeProbe> knowledge;
    std::vector<OODProbe> ood;
};

/// Builds the report from probe results. `prev` is null for the baseline.
EpochReport build_report(int epoch, const Entities& entities, const Suites& suites,
                         std::vector<ProbeResult> knowledge, std::vector<ProbeResult> ood,
                         const EpochReport* prev, double theta = kDefaultTheta);

/// Answers both suites with `ckpt` and builds the report.
EpochReport epoch_cycle(const Checkpoint& ckpt, const Vocab& vocab, const Entities& entities,
                        const Suites& suites, const EpochReport* prev, double theta = kDefaultTheta);

TransitionCounts count_labels(std::span<const EntityEpoch> entities);

struct SummaryRow {
    int epoch = 0;
    double perplexity = 0.0;
    double recall_all = 0.0, recall_high = 0.0, recall_low = 0.0;
    double d_all = 0.0, d_high = 0.0, d_low = 0.0;  // minus the t = 0 value
    std::optional<TransitionCounts> counts;
    std::map<std::string, double> ood;
    double ood_mean = 0.0;
    double d_ood = 0.0;
    bool distortion = false;
};

struct RunSummary {
    std::vector<SummaryRow> rows;
    std::vector<int> entity_order;          // High entities above Low
    std::vector<std::vector<double>> heat;  // entity x epoch recall
};

/// `reports` are in epoch order, starting with the baseline.
RunSummary summarize_run(std::span<const EpochReport> reports, const Entities& entities);

std::string summary_csv(const RunSummary& s);
std::string heatmap_csv(const RunSummary& s, const Entities& entities);

/// Fixed-precision decimal used in every emitted table.
std::string fmt_num(double v, int digits = 4);

}  // namespace cptlab
