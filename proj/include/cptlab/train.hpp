#pragma once

// Continual pre-training strategies and the per-epoch run loop.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/dynamics.hpp"
#include "cptlab/model.hpp"
#include "cptlab/optim.hpp"

namespace cptlab {

enum class StrategyKind { LoRA, StructuredAnnotation, Curriculum, KLPretrain, KLStepwise };

std::string_view to_string(StrategyKind k);
StrategyKind parse_strategy(std::string_view s);
bool uses_kl(StrategyKind k);

struct StrategyConfig {
    StrategyKind kind = StrategyKind::LoRA;
    double lambda = 0.0;
    double theta = kDefaultTheta;
    double lr = 1e-3;
    int batch_size = 8;
    int epochs = 10;
    double weight_decay = 0.01;
    AdapterConfig adapter;
    bool main_only = false;  // extended mode: main documents only

    /// Defaults for `kind`: lambda 10 for KL-Pretrain, 1 for KL-Stepwise.
    static StrategyConfig defaults(StrategyKind kind);
    void validate() const;
    std::string run_name() const;
};

void to_json(nlohmann::json& j, const StrategyConfig& c);
void from_json(const nlohmann::json& j, StrategyConfig& c);

/// One training sequence and the entity whose document it came from.
struct CptSample {
    Sequence seq;
    int owner = 0;
    int document_id = 0;
};

/// Segments the revised corpus into training samples. Tagged variants keep the
/// entity tags; `main_only` drops supporting documents.
std::vector<CptSample> build_cpt_samples(const Corpus& corpus, const Entities& entities, const Vocab& vocab,
                                         int max_seq_len, Variant variant, bool main_only);

struct CurriculumSlice {
    int epoch = 0;
    std::vector<int> included;
    std::vector<int> excluded;
    std::vector<std::size_t> samples;  // indices into the full sample list
    bool exhausted() const { return included.empty(); }
};

/// Keeps entities whose previous-epoch recall is below theta and the samples
/// of their documents.
CurriculumSlice select_curriculum(const EpochReport& prev, std::span<const CptSample> samples, double theta,
                                  int epoch);

struct StepLog {
    int epoch = 0;
    int step = 0;
    double ce = 0.0;
    double kl = 0.0;
    double lambda = 0.0;
    double total = 0.0;
};

struct EpochStats {
    int epoch = 0;
    double ce = 0.0;     // mean over steps
    double kl = 0.0;
    double total = 0.0;
    double perplexity = 0.0;
    int steps = 0;
    int samples = 0;
    double wall_seconds = 0.0;
};

struct EpochOutcome {
    Checkpoint ckpt;
    EpochStats stats;
    std::vector<StepLog> steps;
};

/// One shuffled pass over `samples` updating the adapters of `ckpt`. `ref` is
/// the frozen reference for KL kinds.
EpochOutcome cpt_epoch(const Checkpoint& ckpt, std::span<const CptSample> samples, const StrategyConfig& config,
                       AdamW& opt, const Checkpoint* ref, int epoch, std::uint64_t seed);

struct CptInputs {
    const Vocab* vocab = nullptr;
    const Entities* entities = nullptr;
    std::vector<CptSample> samples;  // full training set in the strategy's variant
    const Suites* suites = nullptr;
};

struct RunRecord {
    StrategyConfig config;
    std::uint64_t seed = 0;
    std::vector<Checkpoint> checkpoints;  // index t; 0 is the base with fresh adapters
    std::vector<EpochReport> reports;     // index t
    std::vector<EpochStats> stats;        // epochs 1..T
    std::vector<StepLog> steps;
    std::vector<CurriculumSlice> slices;  // curriculum runs only
    bool exhausted = false;
};

/// Persistence of a run directory: config.json, checkpoints/epoch_t.bin,
/// reports/epoch_t.json, stats.csv, steps.csv and (curriculum) curriculum.csv.
struct RunStore {
    std::filesystem::path dir;
    std::string base_ref;  // path of the base checkpoint, recorded in adapter files
    std::function<void(const std::string&)> log;
};

/// Runs T epochs of `config` from `base`, evaluating after each. With a store,
/// every epoch is written and an interrupted run resumes from its last
/// complete epoch.
RunRecord run_cpt(const Checkpoint& base, const CptInputs& inputs, const StrategyConfig& config, std::uint64_t seed,
                  const RunStore* store = nullptr);

/// Perplexity of `ckpt` over the samples' sequences.
double sample_perplexity(const Checkpoint& ckpt, std::span<const CptSample> samples);

std::string stats_csv(const RunRecord& run);
std::string steps_csv(const RunRecord& run);
std::string curriculum_csv(const RunRecord& run);

/// Loads a complete run directory written by run_cpt.
RunRecord load_run(const std::filesystem::path& dir, const Checkpoint* base);

}  // namespace cptlab
