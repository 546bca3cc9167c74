#include "cptlab/pretrain.hpp"

#include <cmath>

#include "cptlab/templates.hpp"

namespace cptlab {

using nlohmann::json;

void PretrainConfig::validate() const {
    if (max_epochs < 1 || batch_size < 1) {
        throw ConfigError("pretrain: max_epochs and batch_size must be >= 1");
    }
    if (!(lr >= 0.0) || !(weight_decay >= 0.0)) {
        throw ConfigError("pretrain: lr and weight_decay must be >= 0");
    }
    if (reading_examples < 0 || choice_examples < 0) {
        throw ConfigError("pretrain: example counts must be >= 0");
    }
}

void to_json(json& j, const PretrainConfig& c) {
    j = json{{"max_epochs", c.max_epochs},           {"batch_size", c.batch_size},
             {"lr", c.lr},                           {"weight_decay", c.weight_decay},
             {"clip_norm", c.clip_norm},             {"reading_examples", c.reading_examples},
             {"choice_examples", c.choice_examples}, {"recall_target", c.recall_target},
             {"ood_target", c.ood_target}};
}

void from_json(const json& j, PretrainConfig& c) {
    PretrainConfig d;
    c.max_epochs = j.value("max_epochs", d.max_epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.clip_norm = j.value("clip_norm", d.clip_norm);
    c.reading_examples = j.value("reading_examples", d.reading_examples);
    c.choice_examples = j.value("choice_examples", d.choice_examples);
    c.recall_target = j.value("recall_target", d.recall_target);
    c.ood_target = j.value("ood_target", d.ood_target);
}

Sequence answer_sequence(const Vocab& vocab, const std::string& prompt, const std::string& answer) {
    Sequence s;
    s.tokens = vocab.encode_text(prompt);
    s.loss_from = static_cast<int>(s.tokens.size());
    for (TokenId t : vocab.encode_text(answer)) {
        s.tokens.push_back(t);
    }
    s.tokens.push_back(vocab.eos());
    return s;
}

Sequence document_sequence(const Vocab& vocab, const std::vector<std::string>& words) {
    return Sequence{vocab.encode(words), 1};
}

namespace {

void add_documents(const Vocab& vocab, const Corpus& corpus, int max_len, std::vector<Sequence>& out) {
    for (const Document& d : corpus.documents) {
        for (const TrainingSample& s : segment_document(d, max_len, Variant::Plain)) {
            out.push_back(document_sequence(vocab, s.words));
        }
    }
}

}  // namespace

std::vector<Sequence> pretraining_epoch(const PretrainData& data, const PretrainConfig& config, int epoch,
                                        std::uint64_t seed) {
    const World& world = *data.world;
    const Vocab& vocab = *data.vocab;
    const int max_len = world.config.max_seq_len;
    std::vector<Sequence> out;
    add_documents(vocab, *data.roster_corpus, max_len, out);
    add_documents(vocab, *data.background_corpus, max_len, out);

    // closed-book questions about background entities only
    for (const Entity& e : world.background) {
        for (const KnowledgeProbe& p : build_knowledge_probes(e, *data.background_facts)) {
            out.push_back(answer_sequence(vocab, knowledge_prompt(p.question), p.gold));
        }
    }

    const std::string tag = "pretrain-epoch-" + std::to_string(epoch);
    Rng rng(derive_seed(seed, tag));

    // reading: a freshly valued main document in context. Every other example
    // is about a background entity, so the context contradicts what was
    // memorised and the answer has to come from the document.
    if (!world.reading.empty()) {
        for (int i = 0; i < config.reading_examples; ++i) {
            const Entities& pool = (i % 2 == 1 && !world.background.empty()) ? world.background : world.reading;
            const FactTable facts = generate_facts(pool, world.pools, FactsVersion::V1, rng.next());
            const Entity& e = rng.pick(pool);
            FactLookup lookup = [&](int id, Relation r) -> const std::string& { return facts.at(id, r); };
            Document doc = render_document(main_plan(e, world.config.main_fillers, rng), e, pool, lookup);
            const auto& qs = templates::questions(e.category);
            const auto& q = qs[rng.below(qs.size())];
            const std::string question = templates::fill(q.text, "e", e.name);
            const std::string& answer = facts.at(e.id, q.relation);
            const int budget = max_len - static_cast<int>(vocab.encode_text(answer).size()) - 1;
            out.push_back(answer_sequence(vocab, fit_rag_prompt(vocab, doc.tokens, question, budget), answer));
        }
    }

    for (const std::string& s : ood_statements()) {
        out.push_back(Sequence{vocab.encode_text(s), 1});
    }
    if (config.choice_examples > 0) {
        const auto items = sample_ood_training(derive_seed(seed, tag + "-choice"), config.choice_examples,
                                               *data.ood_suite);
        for (const OODProbe& p : items) {
            out.push_back(answer_sequence(vocab, choice_prompt(p), std::string(1, p.gold)));
        }
    }
    rng.shuffle(out);
    return out;
}

double mean_probe_recall(const Checkpoint& ckpt, const Vocab& vocab, const std::vector<KnowledgeProbe>& probes) {
    if (probes.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (const KnowledgeProbe& p : probes) {
        sum += answer_probe(ckpt, vocab, p).score;
    }
    return sum / static_cast<double>(probes.size());
}

PretrainResult pretrain_base(const PretrainData& data, const ModelConfig& model, const PretrainConfig& config,
                             const std::vector<KnowledgeProbe>& stop_probes, std::uint64_t seed,
                             const std::function<void(const PretrainEpochLog&)>& on_epoch) {
    config.validate();
    ModelConfig mc = model;
    mc.vocab_size = static_cast<int>(data.vocab->size());
    mc.seed = seed;
    mc.validate();

    auto weights = std::make_shared<Weights>(Weights::initialize(mc));
    Checkpoint ckpt;
    ckpt.config = mc;
    ckpt.base = weights;
    Gradients grads = Gradients::for_checkpoint(ckpt);
    AdamW opt(AdamWConfig{config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
    const std::vector<Matrix*> params = trainable_tensors(*weights);
    const std::vector<const Matrix*> gparams = gradient_tensors(grads);

    PretrainResult result;
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const std::vector<Sequence> data_epoch = pretraining_epoch(data, config, epoch, seed);
        double ce_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < data_epoch.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(data_epoch.size(), start + static_cast<std::size_t>(config.batch_size));
            grads.zero();
            const StepLoss loss = objective_and_grad(
                ckpt, nullptr, 0.0, std::span<const Sequence>(data_epoch.data() + start, end - start), grads);
            if (!std::isfinite(loss.total)) {
                throw RunError("pretraining diverged at epoch " + std::to_string(epoch) + " step " +
                               std::to_string(steps) + " (loss " + std::to_string(loss.total) + ")");
            }
            if (config.clip_norm > 0.0) {
                clip_gradients(grads, config.clip_norm);
            }
            opt.step(params, gparams);
            ce_sum += loss.ce;
            ++steps;
        }
        PretrainEpochLog entry;
        entry.epoch = epoch;
        entry.ce = steps ? ce_sum / static_cast<double>(steps) : 0.0;
        entry.high_recall = mean_probe_recall(ckpt, *data.vocab, stop_probes);
        entry.ood = ood_accuracy(ckpt, *data.vocab, *data.ood_suite);
        result.log.push_back(entry);
        if (on_epoch) {
            on_epoch(entry);
        }
        if (entry.high_recall >= config.recall_target && entry.ood >= config.ood_target) {
            result.reached = true;
            break;
        }
    }
    result.base = make_checkpoint(mc, *weights, 0);
    return result;
}

}  // namespace cptlab
