#include "cptlab/rag.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cptlab {

using nlohmann::json;

std::string_view to_string(PoolMode m) {
    switch (m) {
        case PoolMode::All:
            return "All";
        case PoolMode::Main:
            return "Main";
        case PoolMode::Gold:
            return "Gold";
    }
    return "?";
}

PoolMode parse_pool_mode(std::string_view s) {
    if (s == "All") {
        return PoolMode::All;
    }
    if (s == "Main") {
        return PoolMode::Main;
    }
    if (s == "Gold") {
        return PoolMode::Gold;
    }
    throw ConfigError("unknown pool mode: " + std::string(s));
}

RetrievalPool RetrievalPool::build(const Corpus& corpus, PoolMode mode, Bm25Params params) {
    if (corpus.documents.empty()) {
        throw ConfigError("build_index: empty pool");
    }
    RetrievalPool p;
    p.mode_ = mode;
    p.params_ = params;
    double total = 0.0;
    for (const Document& d : corpus.documents) {
        const std::size_t idx = p.docs_.size();
        p.docs_.push_back(&d);
        std::map<std::string, int> tf;
        int len = 0;
        for (const std::string& w : d.tokens) {
            for (auto& t : rouge_tokens(w)) {
                ++tf[t];
                ++len;
            }
        }
        for (const auto& [term, n] : tf) {
            ++p.df_[term];
        }
        p.tf_.push_back(std::move(tf));
        p.length_.push_back(len);
        total += len;
        if (mode != PoolMode::Main || d.is_main) {
            p.candidates_.push_back(idx);
        }
    }
    p.avg_length_ = total / static_cast<double>(p.docs_.size());
    if (p.candidates_.empty()) {
        throw ConfigError("build_index: pool has no candidate documents");
    }
    return p;
}

RetrievalPool build_index(const Corpus& corpus, PoolMode mode) { return RetrievalPool::build(corpus, mode); }

const Document& RetrievalPool::document(int id) const {
    for (const Document* d : docs_) {
        if (d->id == id) {
            return *d;
        }
    }
    throw ConfigError("document " + std::to_string(id) + " is not in the pool");
}

double RetrievalPool::score(const std::vector<std::string>& query_terms, std::size_t doc_index) const {
    const double n = static_cast<double>(docs_.size());
    const auto& tf = tf_[doc_index];
    const double norm = params_.k1 * (1.0 - params_.b + params_.b * length_[doc_index] / avg_length_);
    double s = 0.0;
    for (const std::string& t : query_terms) {
        auto it = tf.find(t);
        if (it == tf.end()) {
            continue;
        }
        const double df = static_cast<double>(df_.at(t));
        const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
        const double f = static_cast<double>(it->second);
        s += idf * f * (params_.k1 + 1.0) / (f + norm);
    }
    return s;
}

std::vector<int> RetrievalPool::rank(std::string_view query) const {
    const auto terms = rouge_tokens(query);
    std::vector<std::pair<double, int>> scored;
    scored.reserve(candidates_.size());
    for (std::size_t idx : candidates_) {
        scored.emplace_back(score(terms, idx), docs_[idx]->id);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) {
            return a.first > b.first;
        }
        return a.second < b.second;
    });
    std::vector<int> ids;
    ids.reserve(scored.size());
    for (const auto& [s, id] : scored) {
        ids.push_back(id);
    }
    return ids;
}

Retrieval retrieve(std::string_view question, const RetrievalPool& pool, int gold_doc, int k) {
    if (k < 1) {
        throw ConfigError("retrieve: k must be >= 1");
    }
    Retrieval r;
    if (pool.mode() == PoolMode::Gold) {
        r.top = {gold_doc};
        r.gold_rank = 1;
        return r;
    }
    const std::vector<int> ranked = pool.rank(question);
    r.top.assign(ranked.begin(), ranked.begin() + std::min<std::ptrdiff_t>(k, static_cast<std::ptrdiff_t>(ranked.size())));
    auto it = std::find(ranked.begin(), ranked.end(), gold_doc);
    r.gold_rank = it == ranked.end() ? 0 : static_cast<int>(it - ranked.begin()) + 1;
    return r;
}

RagResult rag_answer(const Checkpoint& ckpt, const Vocab& vocab, const KnowledgeProbe& probe,
                     const RetrievalPool& pool, int gold_doc) {
    const Retrieval ret = retrieve(probe.question, pool, gold_doc, 1);
    RagResult out;
    out.probe_id = probe.id;
    out.mode = pool.mode();
    out.retrieved = ret.top.front();
    out.gold_rank = ret.gold_rank;

    const Tokens prompt = vocab.encode_text(fit_rag_prompt(vocab, pool.document(out.retrieved).tokens, probe.question,
                                                           ckpt.config.max_seq_len - kMaxNewTokens, &out.truncated));
    out.result.probe_id = probe.id;
    out.result.generated = vocab.decode(generate_greedy(ckpt, prompt, vocab.eos(), kMaxNewTokens));
    out.result.score = rouge1_recall(out.result.generated, probe.gold);
    return out;
}

namespace {

RagRow row_from_recalls(const std::string& label, const std::map<int, double>& recall, const Entities& entities,
                        double theta) {
    RagRow row;
    row.label = label;
    double sh = 0.0, sl = 0.0;
    int nh = 0, nl = 0;
    for (const Entity& e : entities) {
        const double r = recall.at(e.id);
        row.covered += r >= theta;
        if (e.freq_class == FreqClass::High) {
            sh += r;
            ++nh;
        } else {
            sl += r;
            ++nl;
        }
    }
    row.high = nh ? sh / nh : 0.0;
    row.low = nl ? sl / nl : 0.0;
    row.all = (nh + nl) ? (sh + sl) / (nh + nl) : 0.0;
    return row;
}

}  // namespace

RagRow rag_row(const std::string& label, std::span<const RagResult> results, std::span<const KnowledgeProbe> suite,
               const Entities& entities, double theta) {
    if (results.size() != suite.size()) {
        throw ConfigError("rag_row: need one result per probe");
    }
    std::map<int, std::vector<ProbeResult>> by_entity;
    for (std::size_t i = 0; i < suite.size(); ++i) {
        by_entity[suite[i].entity].push_back(results[i].result);
    }
    std::map<int, double> recall;
    for (const Entity& e : entities) {
        recall[e.id] = entity_recall(by_entity[e.id]);
    }
    return row_from_recalls(label, recall, entities, theta);
}

RagRow report_row(const std::string& label, const EpochReport& report, double theta) {
    RagRow row;
    row.label = label;
    row.all = report.recall_all;
    row.high = report.recall_high;
    row.low = report.recall_low;
    for (const EntityEpoch& e : report.entities) {
        row.covered += e.recall >= theta;
    }
    return row;
}

std::string rag_summary_csv(std::span<const RagRow> rows) {
    std::ostringstream os;
    os << "setting,recall_all,recall_high,recall_low,covered_entities\n";
    for (const RagRow& r : rows) {
        os << r.label << ',' << fmt_num(r.all) << ',' << fmt_num(r.high) << ',' << fmt_num(r.low) << ',' << r.covered
           << '\n';
    }
    return os.str();
}

json rag_result_json(const RagResult& r) {
    return json{{"probe", r.probe_id},   {"mode", to_string(r.mode)}, {"retrieved", r.retrieved},
                {"gold_rank", r.gold_rank}, {"score", r.result.score}, {"generated", r.result.generated},
                {"truncated", r.truncated}};
}

}  // namespace cptlab
