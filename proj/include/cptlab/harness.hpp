#pragma once
// Experiment manifest and the staged pipeline behind the command line.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/circuits.hpp"
#include "cptlab/pretrain.hpp"
#include "cptlab/rag.hpp"
#include "cptlab/train.hpp"

namespace cptlab {

struct ExperimentManifest {
    CorpusConfig corpus;
    ModelConfig model;  // vocab_size, max_seq_len and seed are filled in from the world
    PretrainConfig pretrain;
    std::vector<StrategyConfig> runs;  // default: the five strategies
    int ood_per_task = 50;
    bool rag = true;
    bool circuits = true;
    bool extended = true;
    int extended_epochs = 100;
    std::string circuit_run = "lora";  // strategy whose checkpoints are analysed
    SweepConfig sweep;
    std::vector<double> k_fractions{0.02, 0.05, 0.10, 0.20, 0.50, 1.0};
    // external suites in the probe JSONL schema; generated when empty
    std::string knowledge_suite;
    std::string ood_suite;
    std::uint64_t seed = 7;

    static ExperimentManifest defaults();
    /// Throws ConfigError on bad values or missing suite files.
    void validate() const;
    StrategyConfig extended_config() const;
    /// Sets the length of every strategy run (not the extended one).
    void set_epochs(int epochs);
};

void to_json(nlohmann::json& j, const ExperimentManifest& m);
void from_json(const nlohmann::json& j, ExperimentManifest& m);

ExperimentManifest load_manifest(const std::filesystem::path& path);

/// Everything regenerated from (manifest, seed): the world, both fact
/// versions, the corpora, the vocabulary and the probe suites.
struct WorldData {
    World world;
    FactTable v1, v2, background_facts;
    Corpus roster_v1, revised, background;
    Vocab vocab;
    Suites suites;
    std::vector<KnowledgeProbe> stop_probes;  // V1 probes of High roster entities
    ModelConfig model;
};

WorldData build_world_data(const ExperimentManifest& m);

/// Stages write under one run directory and skip work whose outputs already
/// exist, so reruns are cheap and an interrupted stage resumes.
///
///   manifest.json
///   corpus/    facts_v1.json facts_v2.json roster_v1.jsonl roster_v2.jsonl background.jsonl
///   probes/    knowledge.jsonl ood.jsonl base_report.json
///   base/      base.bin pretrain.csv
///   runs/NAME/ (train run directory) summary.csv heatmap.csv figures/
///   rag/       rag_results.jsonl rag_summary.csv
///   circuits/  epoch_t.json jaccard.csv hit_at_10.csv k_sweep.csv figures/
///   report/    strategies.csv figures/
class Pipeline {
public:
    using Log = std::function<void(const std::string&)>;

    Pipeline(ExperimentManifest manifest, std::filesystem::path out, Log log = {});

    const ExperimentManifest& manifest() const { return manifest_; }
    const std::filesystem::path& out() const { return out_; }
    const WorldData& data();

    void gen_corpus();
    const Checkpoint& pretrain();
    /// All manifest runs, or only `strategy`.
    void cpt(const std::optional<std::string>& strategy = {});
    void cpt_extended();
    void probe();
    void rag();
    void circuits();
    void report();
    void all();

    std::filesystem::path run_dir(const StrategyConfig& c) const;
    RunRecord load(const StrategyConfig& c);

private:
    void note(const std::string& s) const;
    RunRecord run(const StrategyConfig& c);
    void run_tables(const RunRecord& run) const;

    ExperimentManifest manifest_;
    std::filesystem::path out_;
    Log log_;
    std::optional<WorldData> data_;
    std::optional<Checkpoint> base_;
};

/// Writes `text` atomically.
void write_file(const std::filesystem::path& path, const std::string& text);
std::string read_file(const std::filesystem::path& path);

}  // namespace cptlab
