#pragma once

// Controlled, frequency-stratified, revisable factual corpus.

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/common.hpp"
#include "cptlab/domain.hpp"
#include "cptlab/vocab.hpp"

namespace cptlab {

inline constexpr int kSchemaVersion = 1;

struct CorpusConfig {
    int per_cell = 5;             // entities per (category x freq_class) cell
    int high_supporting = 40;
    int low_supporting = 8;
    int background_per_cell = 10; // non-roster entities seen only in pre-training
    int background_high_supporting = 16;
    int background_low_supporting = 4;
    int reading_per_cell = 5;     // subjects of synthetic reading-comprehension examples
    int main_fillers = 2;
    int max_seq_len = 256;

    void validate() const;
    bool operator==(const CorpusConfig&) const = default;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct Entity {
    int id = 0;
    std::string name;
    Category category = Category::Gpe;
    FreqClass freq_class = FreqClass::High;
    int supporting_docs = 0;
    int doc_frequency = 0;
};

using Entities = std::vector<Entity>;

/// Draws unique single-word and two-word names from syllable tables.
class NameFactory {
public:
    explicit NameFactory(std::uint64_t seed) : rng_(seed) {}

    std::string country();
    std::string city();
    std::string given();
    std::string family();
    std::string person();      // "Given Family"
    /// Reserves an externally produced string so it is never produced again.
    bool reserve(const std::string& s) { return used_.insert(s).second; }

private:
    std::string word(int syllables, const std::vector<std::string>& endings);
    std::string fresh(const std::function<std::string()>& make);

    Rng rng_;
    std::set<std::string> used_;
};

/// Value pools shared by fact generation and synthetic reading examples.
struct ValuePools {
    std::vector<std::string> people;       // two-word names
    std::vector<std::string> cities;
    std::vector<std::string> parties;
    std::vector<std::string> populations;
    std::vector<std::string> roles;
    std::vector<std::string> employers;    // two words
    std::vector<std::string> awards;       // two words

    static ValuePools create(NameFactory& names, std::uint64_t seed);
    /// Draws a value for a non-entity relation.
    std::string draw(Relation r, Rng& rng, bool revised) const;
    std::vector<std::string> all_words() const;
};

/// Roster plus the background entities used only to teach the base model
/// question answering and reading.
struct World {
    CorpusConfig config;
    std::uint64_t seed = 0;
    Entities roster;
    Entities background;
    ValuePools pools;
    Entities reading;
};

/// Roster only, cells ordered (GPE,High) (GPE,Low) (PERSON,High) (PERSON,Low).
Entities build_entity_roster(const CorpusConfig& config, std::uint64_t seed);
World build_world(const CorpusConfig& config, std::uint64_t seed);

struct FactTable {
    FactsVersion version = FactsVersion::V1;
    std::map<std::pair<int, Relation>, std::string> entries;

    const std::string& at(int entity, Relation r) const;
    bool has(int entity, Relation r) const { return entries.count({entity, r}) != 0; }
};

void to_json(nlohmann::json& j, const FactTable& t);
void from_json(const nlohmann::json& j, FactTable& t);

/// V1 is sampled from the seed; V2 resamples every time-sensitive slot of V1
/// to a value sharing no word with the old one. Entity-valued slots point to
/// High GPE entities of the same list.
FactTable generate_facts(const Entities& entities, const ValuePools& pools, FactsVersion version,
                         std::uint64_t seed);

struct EntityRef {
    int entity = 0;
    int start = 0;  // token offsets, [start, end)
    int end = 0;
    bool operator==(const EntityRef&) const = default;
};

struct Document {
    int id = 0;
    int owner = 0;  // entity the document is about
    std::vector<EntityRef> entity_refs;
    std::vector<std::string> tokens;
    bool is_main = false;
    FactsVersion facts_version = FactsVersion::V1;
    /// Token positions filled from the fact table.
    std::vector<int> value_positions;

    std::string text() const;
};

struct Corpus {
    FactsVersion version = FactsVersion::V1;
    std::vector<Document> documents;

    const Document& main_document(int entity) const;
};

/// Sentence plan of one document, independent of the fact values.
struct SentencePlan {
    enum class Kind { Opening, Fact, Filler, Comention } kind = Kind::Filler;
    Relation relation = Relation::Capital;
    int variant = 0;  // template index
    int other = -1;   // co-mentioned entity
    bool operator==(const SentencePlan&) const = default;
};

using FactLookup = std::function<const std::string&(int entity, Relation r)>;

/// Renders a plan for `owner`. Entity mentions (owner, co-mentions and
/// entity-valued facts) are recorded in entity_refs.
Document render_document(const std::vector<SentencePlan>& plan, const Entity& owner,
                         const Entities& entities, const FactLookup& facts);

/// Main document plan: opening, one sentence per relation, fillers.
std::vector<SentencePlan> main_plan(const Entity& e, int fillers, Rng& rng);

/// One main plus `supporting_docs` supporting documents per entity. Document
/// plans depend only on the seed, so V1 and V2 corpora differ only at value
/// positions. Supporting documents co-mention High entities.
Corpus generate_documents(const Entities& entities, const FactTable& facts, std::uint64_t seed,
                          const CorpusConfig& config, int first_id = 0);

/// Removes later duplicates (identical token sequences).
std::size_t dedup_documents(Corpus& corpus);

/// Document-level counts: a document mentioning an entity any number of times
/// contributes one.
std::map<int, int> entity_frequency(const Corpus& corpus);

/// Stores entity_frequency into the roster.
void assign_frequencies(Entities& entities, const Corpus& corpus);

inline constexpr std::string_view kTagOpen[2] = {"<PERSON>", "<GPE>"};
inline constexpr std::string_view kTagClose[2] = {"</PERSON>", "</GPE>"};

bool is_tag(std::string_view word);

/// Wraps every entity span in its category markers; spans are shifted.
Document annotate_entities(const Document& doc, const Entities& entities);
/// Drops tag tokens and restores the plain spans.
Document strip_tags(const Document& doc);

struct TrainingSample {
    std::vector<std::string> words;
    int document_id = 0;
    Variant variant = Variant::Plain;
};

/// Contiguous segmentation that never splits an entity span.
std::vector<TrainingSample> segment_document(const Document& doc, int max_seq_len,
                                             Variant variant);
std::vector<TrainingSample> segment_corpus(const Corpus& corpus, const Entities& entities,
                                           int max_seq_len, Variant variant);

/// Closed vocabulary of the grammar, tags, names and every pool value.
Vocab build_vocab(const World& world);

const Entity& find_entity(const Entities& entities, int id);

struct FileHeader {
    int schema_version = kSchemaVersion;
    std::uint64_t seed = 0;
    std::string config_hash;
};

nlohmann::json header_json(const FileHeader& h);
std::string config_hash(const nlohmann::json& config);

nlohmann::json document_json(const Document& d);
Document document_from_json(const nlohmann::json& j);

void write_corpus(const std::string& path, const Corpus& corpus, const FileHeader& header);
Corpus read_corpus(const std::string& path, FileHeader* header = nullptr);
void write_facts(const std::string& path, const FactTable& facts, const FileHeader& header);
FactTable read_facts(const std::string& path, FileHeader* header = nullptr);

}  // namespace cptlab
