#pragma once

// Retrieval-augmented answering over the revised corpus.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/corpus.hpp"
#include "cptlab/dynamics.hpp"
#include "cptlab/probes.hpp"

namespace cptlab {

enum class PoolMode { All, Main, Gold };

std::string_view to_string(PoolMode m);
PoolMode parse_pool_mode(std::string_view s);

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

/// Okapi BM25 over lowercased word unigrams. The Main pool is the All index
/// restricted to main documents, so both share term statistics.
class RetrievalPool {
public:
    /// Indexes every document of `corpus`; Main keeps only main documents as
    /// candidates. Gold needs no index.
    static RetrievalPool build(const Corpus& corpus, PoolMode mode, Bm25Params params = {});

    PoolMode mode() const { return mode_; }
    std::size_t size() const { return candidates_.size(); }
    const Document& document(int id) const;

    /// BM25 score of one candidate.
    double score(const std::vector<std::string>& query_terms, std::size_t doc_index) const;

    /// Candidate document ids ordered by score, ties broken by smaller id.
    std::vector<int> rank(std::string_view query) const;

private:
    PoolMode mode_ = PoolMode::All;
    Bm25Params params_;
    std::vector<const Document*> docs_;           // all indexed documents
    std::vector<std::size_t> candidates_;         // indices into docs_
    std::vector<std::map<std::string, int>> tf_;  // per document
    std::vector<int> length_;
    std::map<std::string, int> df_;
    double avg_length_ = 0.0;
};

/// BM25 index entry point; throws on an empty corpus.
RetrievalPool build_index(const Corpus& corpus, PoolMode mode);

struct Retrieval {
    std::vector<int> top;  // k ids
    int gold_rank = 0;     // 1-based; 0 when the gold document is not a candidate
};

Retrieval retrieve(std::string_view question, const RetrievalPool& pool, int gold_doc, int k = 1);

struct RagResult {
    std::string probe_id;
    PoolMode mode = PoolMode::All;
    int retrieved = 0;
    int gold_rank = 0;
    bool truncated = false;
    ProbeResult result;
};

/// Retrieves one document, places it before the question and answers greedily.
/// When the prompt would not leave room for the answer the document tail is cut.
RagResult rag_answer(const Checkpoint& ckpt, const Vocab& vocab, const KnowledgeProbe& probe,
                     const RetrievalPool& pool, int gold_doc);

struct RagRow {
    std::string label;
    double all = 0.0, high = 0.0, low = 0.0;
    int covered = 0;  // entities with recall >= theta
};

/// Per-entity mean recall of a mode's results and the summary row.
RagRow rag_row(const std::string& label, std::span<const RagResult> results, std::span<const KnowledgeProbe> suite,
               const Entities& entities, double theta = kDefaultTheta);
RagRow report_row(const std::string& label, const EpochReport& report, double theta = kDefaultTheta);

std::string rag_summary_csv(std::span<const RagRow> rows);
nlohmann::json rag_result_json(const RagResult& r);

}  // namespace cptlab
