#pragma once

// Pre-training of the base model on the V1 corpus plus the skill mix that
// teaches question answering, reading and multiple-choice answering.

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/corpus.hpp"
#include "cptlab/model.hpp"
#include "cptlab/optim.hpp"
#include "cptlab/probes.hpp"

namespace cptlab {

struct PretrainConfig {
    int max_epochs = 40;
    int batch_size = 16;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    int reading_examples = 1500;  // fresh per epoch
    int choice_examples = 300;   // fresh per epoch
    double recall_target = 0.6;
    double ood_target = 0.7;

    void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

/// Everything the pre-training mix is drawn from.
struct PretrainData {
    const World* world = nullptr;
    const Vocab* vocab = nullptr;
    const Corpus* roster_corpus = nullptr;      // V1 roster documents
    const Corpus* background_corpus = nullptr;  // V1 background documents
    const FactTable* background_facts = nullptr;
    const std::vector<OODProbe>* ood_suite = nullptr;  // held out of training
};

/// Prompt followed by answer and end of sequence; loss on the answer part only.
Sequence answer_sequence(const Vocab& vocab, const std::string& prompt, const std::string& answer);
Sequence document_sequence(const Vocab& vocab, const std::vector<std::string>& words);

/// One epoch of the mix, shuffled. Pure function of (data, config, epoch, seed).
std::vector<Sequence> pretraining_epoch(const PretrainData& data, const PretrainConfig& config, int epoch,
                                        std::uint64_t seed);

struct PretrainEpochLog {
    int epoch = 0;
    double ce = 0.0;
    double high_recall = 0.0;  // V1 knowledge probes, High roster entities
    double ood = 0.0;
};

struct PretrainResult {
    Checkpoint base;
    std::vector<PretrainEpochLog> log;
    bool reached = false;  // stop rule met before the budget ran out
};

/// Trains from scratch until the stop rule holds on `stop_probes` and the OOD
/// suite, or until max_epochs.
PretrainResult pretrain_base(const PretrainData& data, const ModelConfig& model, const PretrainConfig& config,
                             const std::vector<KnowledgeProbe>& stop_probes, std::uint64_t seed,
                             const std::function<void(const PretrainEpochLog&)>& on_epoch = {});

double mean_probe_recall(const Checkpoint& ckpt, const Vocab& vocab, const std::vector<KnowledgeProbe>& probes);

}  // namespace cptlab
