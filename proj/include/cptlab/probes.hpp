#pragma once

// Knowledge and multiple-choice probe suites, answering and scoring.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/corpus.hpp"
#include "cptlab/model.hpp"
#include "cptlab/vocab.hpp"

namespace cptlab {

struct KnowledgeProbe {
    std::string id;
    int entity = 0;
    Facet facet = Facet::FactualRecall;
    Relation relation = Relation::Capital;
    std::string question;
    std::string gold;
    int consistency_group = -1;  // shared by paraphrases; -1 when not part of a group
};

struct OODProbe {
    std::string id;
    std::string task;
    std::string question;
    std::array<std::string, 4> choices;
    char gold = 'A';
};

struct ProbeResult {
    std::string probe_id;
    int epoch = 0;
    std::string generated;
    double score = 0.0;
};

void to_json(nlohmann::json& j, const KnowledgeProbe& p);
void from_json(const nlohmann::json& j, KnowledgeProbe& p);
void to_json(nlohmann::json& j, const OODProbe& p);
void from_json(const nlohmann::json& j, OODProbe& p);
void to_json(nlohmann::json& j, const ProbeResult& r);
void from_json(const nlohmann::json& j, ProbeResult& r);

/// Ten probes, two per facet, answered from `facts`.
std::vector<KnowledgeProbe> build_knowledge_probes(const Entity& entity, const FactTable& facts);
std::vector<KnowledgeProbe> build_knowledge_suite(const Entities& entities, const FactTable& facts);

/// Lowercased unigrams with punctuation removed.
std::vector<std::string> rouge_tokens(std::string_view text);

/// Clipped unigram recall of gold in candidate.
double rouge1_recall(std::string_view candidate, std::string_view gold);

/// Leftmost standalone capital A-D.
std::optional<char> extract_choice(std::string_view response);

std::string knowledge_prompt(std::string_view question);
std::string rag_prompt(std::string_view document, std::string_view question);
/// Reading prompt whose encoding fits in `budget` tokens; the document tail is
/// cut when needed. Throws when the question alone does not fit.
std::string fit_rag_prompt(const Vocab& vocab, std::vector<std::string> document, std::string_view question,
                           int budget, bool* truncated = nullptr);
std::string choice_prompt(const OODProbe& probe);

inline constexpr int kMaxNewTokens = 25;

/// Greedy answer to a knowledge probe, scored against its gold.
ProbeResult answer_probe(const Checkpoint& ckpt, const Vocab& vocab, const KnowledgeProbe& probe,
                         int epoch = 0);
ProbeResult answer_ood(const Checkpoint& ckpt, const Vocab& vocab, const OODProbe& probe, int epoch = 0);

/// Fraction of probes whose extracted letter equals the gold letter.
double ood_accuracy(const Checkpoint& ckpt, const Vocab& vocab, std::span<const OODProbe> probes);
double ood_accuracy(std::span<const OODProbe> probes, std::span<const ProbeResult> results);

/// Mean ROUGE-1 recall over the entity's ten results.
double entity_recall(std::span<const ProbeResult> results);

// Synthetic multiple-choice skill tasks: "sequence" continues a run of number
// words, "lookup" asks for the colour of an everyday object.
std::vector<OODProbe> build_ood_suite(std::uint64_t seed, int per_task);
/// Training items of the same tasks that never coincide with a suite item.
std::vector<OODProbe> sample_ood_training(std::uint64_t seed, int count, std::span<const OODProbe> held_out);
/// Plain statements that state the lookup facts.
std::vector<std::string> ood_statements();

/// Hash over probe ids, texts and golds; used to check the suite stays frozen.
std::string suite_hash(std::span<const KnowledgeProbe> probes);
std::string suite_hash(std::span<const OODProbe> probes);

template <class T>
void write_jsonl(const std::string& path, std::span<const T> items);
template <class T>
std::vector<T> read_jsonl(const std::string& path);

}  // namespace cptlab
