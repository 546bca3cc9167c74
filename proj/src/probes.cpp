#include "cptlab/probes.hpp"

#include <cctype>
#include <fstream>
#include <map>
#include <set>

#include "cptlab/templates.hpp"

namespace cptlab {

using nlohmann::json;

void to_json(json& j, const KnowledgeProbe& p) {
    j = json{{"id", p.id},
             {"entity", p.entity},
             {"facet", to_string(p.facet)},
             {"relation", to_string(p.relation)},
             {"question", p.question},
             {"gold", p.gold},
             {"consistency_group", p.consistency_group}};
}

void from_json(const json& j, KnowledgeProbe& p) {
    p.id = j.at("id").get<std::string>();
    p.entity = j.at("entity").get<int>();
    p.facet = parse_facet(j.at("facet").get<std::string>());
    p.relation = parse_relation(j.value("relation", std::string("capital")));
    p.question = j.at("question").get<std::string>();
    p.gold = j.at("gold").get<std::string>();
    p.consistency_group = j.value("consistency_group", -1);
}

void to_json(json& j, const OODProbe& p) {
    j = json{{"id", p.id},
             {"task", p.task},
             {"question", p.question},
             {"choices", p.choices},
             {"gold", std::string(1, p.gold)}};
}

void from_json(const json& j, OODProbe& p) {
    p.id = j.at("id").get<std::string>();
    p.task = j.value("task", std::string("external"));
    p.question = j.at("question").get<std::string>();
    const auto choices = j.at("choices").get<std::vector<std::string>>();
    if (choices.size() != 4) {
        throw ConfigError("OOD probe " + p.id + " must have exactly four choices");
    }
    std::set<std::string> distinct(choices.begin(), choices.end());
    if (distinct.size() != 4) {
        throw ConfigError("OOD probe " + p.id + " has repeated choices");
    }
    std::copy(choices.begin(), choices.end(), p.choices.begin());
    const std::string gold = j.at("gold").get<std::string>();
    if (gold.size() != 1 || gold[0] < 'A' || gold[0] > 'D') {
        throw ConfigError("OOD probe " + p.id + " gold must be one of A, B, C, D");
    }
    p.gold = gold[0];
}

void to_json(json& j, const ProbeResult& r) {
    j = json{{"probe", r.probe_id}, {"epoch", r.epoch}, {"generated", r.generated}, {"score", r.score}};
}

void from_json(const json& j, ProbeResult& r) {
    r.probe_id = j.at("probe").get<std::string>();
    r.epoch = j.at("epoch").get<int>();
    r.generated = j.at("generated").get<std::string>();
    r.score = j.at("score").get<double>();
}

// ---------------------------------------------------------------------------

namespace {

std::string pad(int v, int width) {
    std::string s = std::to_string(v);
    return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

}  // namespace

std::vector<KnowledgeProbe> build_knowledge_probes(const Entity& entity, const FactTable& facts) {
    const auto& qs = templates::questions(entity.category);
    // the second FactualRecall question is the one the Consistency pair paraphrases
    Relation paraphrased = Relation::Capital;
    int fr_seen = 0;
    for (const auto& q : qs) {
        if (q.facet == Facet::FactualRecall && ++fr_seen == 2) {
            paraphrased = q.relation;
        }
    }
    std::vector<KnowledgeProbe> out;
    fr_seen = 0;
    for (std::size_t i = 0; i < qs.size(); ++i) {
        const auto& q = qs[i];
        if (!facts.has(entity.id, q.relation)) {
            throw ConfigError("cannot build probe: entity " + entity.name + " lacks relation " +
                              std::string(to_string(q.relation)));
        }
        KnowledgeProbe p;
        p.id = "e" + pad(entity.id, 4) + "-p" + pad(static_cast<int>(i), 2);
        p.entity = entity.id;
        p.facet = q.facet;
        p.relation = q.relation;
        p.question = templates::fill(q.text, "e", entity.name);
        p.gold = facts.at(entity.id, q.relation);
        const bool grouped = q.facet == Facet::Consistency ||
                             (q.facet == Facet::FactualRecall && ++fr_seen == 2 && q.relation == paraphrased);
        p.consistency_group = grouped ? entity.id : -1;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<KnowledgeProbe> build_knowledge_suite(const Entities& entities, const FactTable& facts) {
    std::vector<KnowledgeProbe> out;
    for (const Entity& e : entities) {
        auto part = build_knowledge_probes(e, facts);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

std::vector<std::string> rouge_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

double rouge1_recall(std::string_view candidate, std::string_view gold) {
    const auto g = rouge_tokens(gold);
    if (g.empty()) {
        throw ConfigError("rouge1_recall: empty gold");
    }
    std::map<std::string, int> available;
    for (auto& t : rouge_tokens(candidate)) {
        ++available[t];
    }
    int matched = 0;
    for (const auto& t : g) {
        auto it = available.find(t);
        if (it != available.end() && it->second > 0) {
            --it->second;
            ++matched;
        }
    }
    return static_cast<double>(matched) / static_cast<double>(g.size());
}

std::optional<char> extract_choice(std::string_view s) {
    auto is_letter = [](char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; };
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        if (c < 'A' || c > 'D') {
            continue;
        }
        const bool left_ok = i == 0 || !is_letter(s[i - 1]);
        const bool right_ok = i + 1 == s.size() || !is_letter(s[i + 1]);
        if (left_ok && right_ok) {
            return c;
        }
    }
    return std::nullopt;
}

std::string knowledge_prompt(std::string_view question) {
    return templates::fill(std::string(templates::kKnowledgePrompt), "question", question);
}

std::string rag_prompt(std::string_view document, std::string_view question) {
    std::string s = templates::fill(std::string(templates::kRagPrompt), "document", document);
    return templates::fill(std::move(s), "question", question);
}

std::string fit_rag_prompt(const Vocab& vocab, std::vector<std::string> document, std::string_view question,
                           int budget, bool* truncated) {
    const int overhead = static_cast<int>(vocab.encode_text(rag_prompt("", question)).size());
    if (overhead > budget) {
        throw ConfigError("question does not fit the context window: " + std::string(question));
    }
    const bool cut = overhead + static_cast<int>(document.size()) > budget;
    if (cut) {
        document.resize(static_cast<std::size_t>(budget - overhead));
    }
    if (truncated) {
        *truncated = cut;
    }
    std::string text;
    for (const auto& w : document) {
        text += (text.empty() ? "" : " ") + w;
    }
    return rag_prompt(text, question);
}

std::string choice_prompt(const OODProbe& probe) {
    std::string s = templates::fill(std::string(templates::kChoicePrompt), "question", probe.question);
    s = templates::fill(std::move(s), "choice_A", probe.choices[0]);
    s = templates::fill(std::move(s), "choice_B", probe.choices[1]);
    s = templates::fill(std::move(s), "choice_C", probe.choices[2]);
    return templates::fill(std::move(s), "choice_D", probe.choices[3]);
}

ProbeResult answer_probe(const Checkpoint& ckpt, const Vocab& vocab, const KnowledgeProbe& probe, int epoch) {
    const Tokens prompt = vocab.encode_text(knowledge_prompt(probe.question));
    ProbeResult r;
    r.probe_id = probe.id;
    r.epoch = epoch;
    r.generated = vocab.decode(generate_greedy(ckpt, prompt, vocab.eos(), kMaxNewTokens));
    r.score = rouge1_recall(r.generated, probe.gold);
    return r;
}

ProbeResult answer_ood(const Checkpoint& ckpt, const Vocab& vocab, const OODProbe& probe, int epoch) {
    const Tokens prompt = vocab.encode_text(choice_prompt(probe));
    ProbeResult r;
    r.probe_id = probe.id;
    r.epoch = epoch;
    r.generated = vocab.decode(generate_greedy(ckpt, prompt, vocab.eos(), kMaxNewTokens));
    const auto letter = extract_choice(r.generated);
    r.score = letter && *letter == probe.gold ? 1.0 : 0.0;
    return r;
}

double ood_accuracy(std::span<const OODProbe> probes, std::span<const ProbeResult> results) {
    if (probes.empty() || probes.size() != results.size()) {
        throw ConfigError("ood_accuracy: need one result per probe");
    }
    int correct = 0;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        const auto letter = extract_choice(results[i].generated);
        correct += letter && *letter == probes[i].gold;
    }
    return static_cast<double>(correct) / static_cast<double>(probes.size());
}

double ood_accuracy(const Checkpoint& ckpt, const Vocab& vocab, std::span<const OODProbe> probes) {
    if (probes.empty()) {
        throw ConfigError("ood_accuracy: no probes");
    }
    std::vector<ProbeResult> results;
    for (const OODProbe& p : probes) {
        results.push_back(answer_ood(ckpt, vocab, p));
    }
    return ood_accuracy(probes, results);
}

double entity_recall(std::span<const ProbeResult> results) {
    if (results.size() != 10) {
        throw ConfigError("entity_recall: expected 10 results, got " + std::to_string(results.size()));
    }
    double sum = 0.0;
    for (const ProbeResult& r : results) {
        sum += r.score;
    }
    return sum / 10.0;
}

// ---------------------------------------------------------------------------
// multiple-choice skill tasks

namespace {

OODProbe draw_item(Rng& rng, bool sequence) {
    OODProbe p;
    std::string correct;
    std::vector<std::string> pool;
    if (sequence) {
        const auto& nums = templates::number_words();
        const int step = 1 + static_cast<int>(rng.below(2));
        const int n = static_cast<int>(nums.size());
        const int start = static_cast<int>(rng.below(static_cast<std::size_t>(n - 3 * step)));
        std::string q(templates::kSequenceQuestion);
        q = templates::fill(q, "a", nums[static_cast<std::size_t>(start)]);
        q = templates::fill(q, "b", nums[static_cast<std::size_t>(start + step)]);
        q = templates::fill(q, "c", nums[static_cast<std::size_t>(start + 2 * step)]);
        p.task = "sequence";
        p.question = q;
        correct = nums[static_cast<std::size_t>(start + 3 * step)];
        pool = nums;
    } else {
        const auto& objects = templates::object_colours();
        const auto& [object, colour] = rng.pick(objects);
        p.task = "lookup";
        p.question = templates::fill(std::string(templates::kColourQuestion), "object", object);
        correct = colour;
        pool = templates::colours();
    }
    pool.erase(std::remove(pool.begin(), pool.end(), correct), pool.end());
    rng.shuffle(pool);
    std::vector<std::string> choices{correct, pool[0], pool[1], pool[2]};
    rng.shuffle(choices);
    for (int i = 0; i < 4; ++i) {
        p.choices[static_cast<std::size_t>(i)] = choices[static_cast<std::size_t>(i)];
        if (choices[static_cast<std::size_t>(i)] == correct) {
            p.gold = static_cast<char>('A' + i);
        }
    }
    return p;
}

std::string item_key(const OODProbe& p) {
    std::string k = p.question;
    for (const auto& c : p.choices) {
        k += "|" + c;
    }
    return k;
}

}  // namespace

std::vector<OODProbe> build_ood_suite(std::uint64_t seed, int per_task) {
    Rng rng(derive_seed(seed, "ood-suite"));
    std::vector<OODProbe> out;
    std::set<std::string> seen;
    for (bool sequence : {true, false}) {
        int made = 0;
        while (made < per_task) {
            OODProbe p = draw_item(rng, sequence);
            if (!seen.insert(item_key(p)).second) {
                continue;
            }
            p.id = p.task + "-" + pad(made, 3);
            out.push_back(std::move(p));
            ++made;
        }
    }
    return out;
}

std::vector<OODProbe> sample_ood_training(std::uint64_t seed, int count, std::span<const OODProbe> held_out) {
    std::set<std::string> blocked;
    for (const OODProbe& p : held_out) {
        blocked.insert(item_key(p));
    }
    Rng rng(derive_seed(seed, "ood-train"));
    std::vector<OODProbe> out;
    while (static_cast<int>(out.size()) < count) {
        OODProbe p = draw_item(rng, rng.below(2) == 0);
        if (blocked.count(item_key(p))) {
            continue;
        }
        p.id = "train-" + pad(static_cast<int>(out.size()), 5);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<std::string> ood_statements() {
    std::vector<std::string> out;
    for (const auto& [object, colour] : templates::object_colours()) {
        std::string s = templates::fill(std::string(templates::kColourStatement), "object", object);
        out.push_back(templates::fill(std::move(s), "colour", colour));
    }
    const auto& nums = templates::number_words();
    for (int step : {1, 2}) {
        for (int start = 0; start < step; ++start) {
            std::string line;
            for (std::size_t i = static_cast<std::size_t>(start); i < nums.size(); i += static_cast<std::size_t>(step)) {
                line += nums[i] + " ";
            }
            out.push_back(line + ".");
        }
    }
    return out;
}

std::string suite_hash(std::span<const KnowledgeProbe> probes) {
    std::uint64_t h = fnv1a("knowledge");
    for (const auto& p : probes) {
        h = fnv1a(p.id + "\x1f" + p.question + "\x1f" + p.gold + "\x1e", h);
    }
    return hex64(h);
}

std::string suite_hash(std::span<const OODProbe> probes) {
    std::uint64_t h = fnv1a("ood");
    for (const auto& p : probes) {
        h = fnv1a(item_key(p) + "\x1f" + p.id + "\x1f" + p.gold + "\x1e", h);
    }
    return hex64(h);
}

template <class T>
void write_jsonl(const std::string& path, std::span<const T> items) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot write " + path);
    }
    for (const T& item : items) {
        out << json(item).dump() << '\n';
    }
}

template <class T>
std::vector<T> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path);
    }
    std::vector<T> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            out.push_back(json::parse(line).get<T>());
        }
    }
    return out;
}

template void write_jsonl<KnowledgeProbe>(const std::string&, std::span<const KnowledgeProbe>);
template void write_jsonl<OODProbe>(const std::string&, std::span<const OODProbe>);
template void write_jsonl<ProbeResult>(const std::string&, std::span<const ProbeResult>);
template std::vector<KnowledgeProbe> read_jsonl<KnowledgeProbe>(const std::string&);
template std::vector<OODProbe> read_jsonl<OODProbe>(const std::string&);
template std::vector<ProbeResult> read_jsonl<ProbeResult>(const std::string&);

}  // namespace cptlab
