#include "cptlab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "cptlab/templates.hpp"

namespace cptlab {

using nlohmann::json;

void CorpusConfig::validate() const {
    if (per_cell < 1) {
        throw ConfigError("per_cell must be >= 1");
    }
    if (low_supporting < 0 || background_low_supporting < 0) {
        throw ConfigError("supporting document counts must be >= 0");
    }
    if (high_supporting <= low_supporting) {
        throw ConfigError("infeasible frequency separation: high_supporting (" +
                          std::to_string(high_supporting) + ") must exceed low_supporting (" +
                          std::to_string(low_supporting) + ")");
    }
    if (background_per_cell < 0 || reading_per_cell < 0) {
        throw ConfigError("background_per_cell and reading_per_cell must be >= 0");
    }
    if (background_per_cell > 0 && background_high_supporting <= background_low_supporting) {
        throw ConfigError("background frequency classes must be separated");
    }
    if (reading_per_cell == 1) {
        throw ConfigError("reading_per_cell must be 0 or >= 2");
    }
    if (main_fillers < 0 || main_fillers > static_cast<int>(templates::filler_sentences().size())) {
        throw ConfigError("main_fillers out of range");
    }
    if (max_seq_len < 8) {
        throw ConfigError("max_seq_len too small");
    }
}

void to_json(json& j, const CorpusConfig& c) {
    j = json{{"per_cell", c.per_cell},
             {"high_supporting", c.high_supporting},
             {"low_supporting", c.low_supporting},
             {"background_per_cell", c.background_per_cell},
             {"background_high_supporting", c.background_high_supporting},
             {"background_low_supporting", c.background_low_supporting},
             {"reading_per_cell", c.reading_per_cell},
             {"main_fillers", c.main_fillers},
             {"max_seq_len", c.max_seq_len}};
}

void from_json(const json& j, CorpusConfig& c) {
    CorpusConfig d;
    c.per_cell = j.value("per_cell", d.per_cell);
    c.high_supporting = j.value("high_supporting", d.high_supporting);
    c.low_supporting = j.value("low_supporting", d.low_supporting);
    c.background_per_cell = j.value("background_per_cell", d.background_per_cell);
    c.background_high_supporting = j.value("background_high_supporting", d.background_high_supporting);
    c.background_low_supporting = j.value("background_low_supporting", d.background_low_supporting);
    c.reading_per_cell = j.value("reading_per_cell", d.reading_per_cell);
    c.main_fillers = j.value("main_fillers", d.main_fillers);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
}

// ---------------------------------------------------------------------------
// names

namespace {

const std::vector<std::string> kOnsets{"b", "d",  "f", "g", "k",  "l",  "m",  "n", "p",
                                       "r", "s",  "t", "v", "z",  "br", "dr", "kr", "tr",
                                       "st", "th", "sh", "h", "gr", "pl"};
const std::vector<std::string> kVowels{"a", "e", "i", "o", "u", "ae", "ei", "ou"};

std::string capitalize(std::string s) {
    if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') {
        s[0] = static_cast<char>(s[0] - 'a' + 'A');
    }
    return s;
}

}  // namespace

std::string NameFactory::word(int syllables, const std::vector<std::string>& endings) {
    std::string w;
    for (int i = 0; i < syllables; ++i) {
        w += rng_.pick(kOnsets);
        w += rng_.pick(kVowels);
    }
    w += rng_.pick(endings);
    return capitalize(w);
}

std::string NameFactory::fresh(const std::function<std::string()>& make) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        std::string s = make();
        if (used_.insert(s).second) {
            return s;
        }
    }
    throw ConfigError("name space exhausted");
}

std::string NameFactory::country() {
    static const std::vector<std::string> endings{"ria", "land", "stan", "nia", "dor", "via"};
    return fresh([&] { return word(2, endings); });
}

std::string NameFactory::city() {
    static const std::vector<std::string> endings{"burg", "ton", "ville", "port", "ford", "haven"};
    return fresh([&] { return word(2, endings); });
}

std::string NameFactory::given() {
    static const std::vector<std::string> endings{"a", "o", "el", "in", "us", "ine", "an"};
    return fresh([&] { return word(1 + static_cast<int>(rng_.below(2)), endings); });
}

std::string NameFactory::family() {
    static const std::vector<std::string> endings{"ov", "sen", "ez", "mann", "ski", "ard", "ott"};
    return fresh([&] { return word(2, endings); });
}

std::string NameFactory::person() { return given() + " " + family(); }

// ---------------------------------------------------------------------------
// pools

namespace {

constexpr int kLeaderV1Lo = 1990, kLeaderV1Hi = 2012, kLeaderV2Lo = 2014, kLeaderV2Hi = 2024;
constexpr int kFoundedLo = 1600, kFoundedHi = 1950;
constexpr int kBirthLo = 1940, kBirthHi = 1995;

int year_in(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::size_t>(hi - lo + 1))); }

bool share_word(const std::string& a, const std::string& b) {
    auto wa = split_words(a);
    auto wb = split_words(b);
    for (const auto& x : wa) {
        if (std::find(wb.begin(), wb.end(), x) != wb.end()) {
            return true;
        }
    }
    return false;
}

}  // namespace

ValuePools ValuePools::create(NameFactory& names, std::uint64_t seed) {
    ValuePools p;
    Rng rng(derive_seed(seed, "pools"));
    for (int i = 0; i < 120; ++i) {
        p.people.push_back(names.person());
    }
    for (int i = 0; i < 80; ++i) {
        p.cities.push_back(names.city());
    }
    p.parties = {"Greens",      "Liberals",  "Reformists",    "Nationalists", "Socialists",
                 "Federalists", "Unionists", "Progressives",  "Conservatives", "Democrats",
                 "Centrists",   "Agrarians", "Republicans",   "Labourites"};
    std::set<int> pops;
    while (pops.size() < 300) {
        pops.insert(10 + static_cast<int>(rng.below(9000)));
    }
    for (int k : pops) {
        p.populations.push_back(std::to_string(k * 1000));
    }
    // shuffled so the pool order carries no size information
    rng.shuffle(p.populations);
    p.roles = {"economist", "editor",    "architect", "coach",     "surgeon",   "diplomat",
               "engineer",  "conductor", "novelist",  "physicist", "banker",    "ambassador",
               "senator",   "governor",  "mayor",     "chancellor", "professor", "director",
               "curator",   "composer"};
    static const std::vector<std::string> org_kinds{"Bank", "Institute", "Group", "Media",
                                                    "Labs", "Motors", "Foundation", "Press"};
    static const std::vector<std::string> award_kinds{"Prize", "Medal", "Trophy", "Laurel"};
    for (int i = 0; i < 60; ++i) {
        // organisation and award stems are place-like or family-like words
        std::string stem = names.city();
        p.employers.push_back(stem + " " + org_kinds[static_cast<std::size_t>(i) % org_kinds.size()]);
    }
    for (int i = 0; i < 60; ++i) {
        std::string stem = names.family();
        p.awards.push_back(stem + " " + award_kinds[static_cast<std::size_t>(i) % award_kinds.size()]);
    }
    return p;
}

std::string ValuePools::draw(Relation r, Rng& rng, bool revised) const {
    switch (r) {
        case Relation::HeadOfState:
        case Relation::Spouse:
            return rng.pick(people);
        case Relation::RulingParty:
            return rng.pick(parties);
        case Relation::Population:
            return rng.pick(populations);
        case Relation::LeaderSince:
        case Relation::RoleSince:
            return revised ? std::to_string(year_in(rng, kLeaderV2Lo, kLeaderV2Hi))
                           : std::to_string(year_in(rng, kLeaderV1Lo, kLeaderV1Hi));
        case Relation::Capital:
        case Relation::Birthplace:
            return rng.pick(cities);
        case Relation::Founded:
            return std::to_string(year_in(rng, kFoundedLo, kFoundedHi));
        case Relation::BirthYear:
            return std::to_string(year_in(rng, kBirthLo, kBirthHi));
        case Relation::Role:
            return rng.pick(roles);
        case Relation::Employer:
            return rng.pick(employers);
        case Relation::Award:
            return rng.pick(awards);
        case Relation::Neighbor:
        case Relation::TradePartner:
        case Relation::Citizenship:
            break;
    }
    throw ConfigError("relation " + std::string(to_string(r)) + " is entity-valued");
}

std::vector<std::string> ValuePools::all_words() const {
    std::set<std::string> out;
    for (const auto* pool : {&people, &cities, &parties, &populations, &roles, &employers, &awards}) {
        for (const auto& v : *pool) {
            for (auto& w : split_words(v)) {
                out.insert(std::move(w));
            }
        }
    }
    for (int y = kFoundedLo; y <= kLeaderV2Hi; ++y) {
        out.insert(std::to_string(y));
    }
    return {out.begin(), out.end()};
}

// ---------------------------------------------------------------------------
// roster

namespace {

Entities make_entities(NameFactory& names, int per_cell, int high_supporting, int low_supporting,
                       int first_id) {
    Entities out;
    int id = first_id;
    for (Category c : {Category::Gpe, Category::Person}) {
        for (FreqClass f : {FreqClass::High, FreqClass::Low}) {
            for (int i = 0; i < per_cell; ++i) {
                Entity e;
                e.id = id++;
                e.name = c == Category::Gpe ? names.country() : names.person();
                e.category = c;
                e.freq_class = f;
                e.supporting_docs = f == FreqClass::High ? high_supporting : low_supporting;
                e.doc_frequency = 1 + e.supporting_docs;
                out.push_back(std::move(e));
            }
        }
    }
    return out;
}

}  // namespace

Entities build_entity_roster(const CorpusConfig& config, std::uint64_t seed) {
    return build_world(config, seed).roster;
}

World build_world(const CorpusConfig& config, std::uint64_t seed) {
    config.validate();
    World w;
    w.config = config;
    w.seed = seed;
    NameFactory names(derive_seed(seed, "names"));
    w.roster = make_entities(names, config.per_cell, config.high_supporting, config.low_supporting, 0);
    w.background = make_entities(names, config.background_per_cell, config.background_high_supporting,
                                 config.background_low_supporting, 1000);
    w.pools = ValuePools::create(names, seed);
    w.reading = make_entities(names, config.reading_per_cell, 0, 0, 2000);
    return w;
}

const Entity& find_entity(const Entities& entities, int id) {
    for (const Entity& e : entities) {
        if (e.id == id) {
            return e;
        }
    }
    throw ConfigError("unknown entity id " + std::to_string(id));
}

// ---------------------------------------------------------------------------
// facts

const std::string& FactTable::at(int entity, Relation r) const {
    auto it = entries.find({entity, r});
    if (it == entries.end()) {
        throw ConfigError("missing fact " + std::string(to_string(r)) + " for entity " +
                          std::to_string(entity));
    }
    return it->second;
}

void to_json(json& j, const FactTable& t) {
    json entries = json::object();
    for (const auto& [key, value] : t.entries) {
        entries[std::to_string(key.first)][std::string(to_string(key.second))] = value;
    }
    j = json{{"version", to_string(t.version)}, {"entries", entries}};
}

void from_json(const json& j, FactTable& t) {
    t.version = parse_facts_version(j.at("version").get<std::string>());
    t.entries.clear();
    for (const auto& [entity, rels] : j.at("entries").items()) {
        for (const auto& [rel, value] : rels.items()) {
            t.entries[{std::stoi(entity), parse_relation(rel)}] = value.get<std::string>();
        }
    }
}

FactTable generate_facts(const Entities& entities, const ValuePools& pools, FactsVersion version,
                         std::uint64_t seed) {
    if (entities.empty()) {
        throw ConfigError("generate_facts: empty roster");
    }
    std::vector<const Entity*> high_gpe;
    for (const Entity& e : entities) {
        if (e.category == Category::Gpe && e.freq_class == FreqClass::High) {
            high_gpe.push_back(&e);
        }
    }

    FactTable v1;
    v1.version = FactsVersion::V1;
    Rng rng(derive_seed(seed, "facts-v1"));
    for (const Entity& e : entities) {
        for (Relation r : relations_for(e.category)) {
            std::string value;
            if (is_entity_valued(r)) {
                std::vector<const Entity*> options;
                for (const Entity* g : high_gpe) {
                    if (g->id != e.id) {
                        options.push_back(g);
                    }
                }
                if (options.empty()) {
                    throw ConfigError("entity-valued relation needs a High GPE entity other than " + e.name);
                }
                value = rng.pick(options)->name;
            } else {
                value = pools.draw(r, rng, false);
            }
            v1.entries[{e.id, r}] = std::move(value);
        }
    }
    if (version == FactsVersion::V1) {
        return v1;
    }

    FactTable v2 = v1;
    v2.version = FactsVersion::V2;
    Rng rev(derive_seed(seed, "facts-v2"));
    for (auto& [key, value] : v2.entries) {
        if (!is_time_sensitive(key.second)) {
            continue;
        }
        const std::string old = value;
        for (int attempt = 0;; ++attempt) {
            if (attempt > 1000) {
                throw ConfigError("cannot revise " + std::string(to_string(key.second)));
            }
            std::string candidate = pools.draw(key.second, rev, true);
            if (!share_word(candidate, old)) {
                value = std::move(candidate);
                break;
            }
        }
    }
    return v2;
}

// ---------------------------------------------------------------------------
// documents

std::string Document::text() const {
    std::string out;
    for (const auto& w : tokens) {
        if (!out.empty()) {
            out.push_back(' ');
        }
        out += w;
    }
    return out;
}

const Document& Corpus::main_document(int entity) const {
    for (const Document& d : documents) {
        if (d.is_main && d.owner == entity) {
            return d;
        }
    }
    throw ConfigError("no main document for entity " + std::to_string(entity));
}

namespace {

std::string sentence_template(const SentencePlan& s, Category c) {
    switch (s.kind) {
        case SentencePlan::Kind::Opening:
            return std::string(templates::main_opening(c));
        case SentencePlan::Kind::Fact:
            return templates::fact_sentences(s.relation).at(static_cast<std::size_t>(s.variant));
        case SentencePlan::Kind::Filler:
            return templates::filler_sentences().at(static_cast<std::size_t>(s.variant));
        case SentencePlan::Kind::Comention:
            return templates::comention_sentences().at(static_cast<std::size_t>(s.variant));
    }
    throw ConfigError("bad sentence kind");
}

int entity_by_name(const Entities& entities, const std::string& name) {
    for (const Entity& e : entities) {
        if (e.name == name) {
            return e.id;
        }
    }
    return -1;
}

}  // namespace

Document render_document(const std::vector<SentencePlan>& plan, const Entity& owner,
                         const Entities& entities, const FactLookup& facts) {
    Document doc;
    doc.owner = owner.id;
    auto append_entity = [&](const std::string& name, int id) {
        auto words = split_words(name);
        int start = static_cast<int>(doc.tokens.size());
        doc.tokens.insert(doc.tokens.end(), words.begin(), words.end());
        doc.entity_refs.push_back({id, start, static_cast<int>(doc.tokens.size())});
    };
    for (const SentencePlan& s : plan) {
        for (const std::string& w : split_words(sentence_template(s, owner.category))) {
            if (w == "{e}") {
                append_entity(owner.name, owner.id);
            } else if (w == "{h}") {
                const Entity& other = find_entity(entities, s.other);
                append_entity(other.name, other.id);
            } else if (w == "{v}") {
                const std::string& value = facts(owner.id, s.relation);
                int start = static_cast<int>(doc.tokens.size());
                if (is_entity_valued(s.relation)) {
                    int id = entity_by_name(entities, value);
                    if (id < 0) {
                        throw ConfigError("entity-valued fact names unknown entity " + value);
                    }
                    append_entity(value, id);
                } else {
                    for (auto& v : split_words(value)) {
                        doc.tokens.push_back(std::move(v));
                    }
                }
                for (int i = start; i < static_cast<int>(doc.tokens.size()); ++i) {
                    doc.value_positions.push_back(i);
                }
            } else {
                doc.tokens.push_back(w);
            }
        }
    }
    return doc;
}

std::vector<SentencePlan> main_plan(const Entity& e, int fillers, Rng& rng) {
    std::vector<SentencePlan> plan;
    plan.push_back({SentencePlan::Kind::Opening, Relation::Capital, 0, -1});
    for (Relation r : relations_for(e.category)) {
        plan.push_back({SentencePlan::Kind::Fact, r, 0, -1});
    }
    std::vector<int> idx(templates::filler_sentences().size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = static_cast<int>(i);
    }
    rng.shuffle(idx);
    for (int i = 0; i < fillers; ++i) {
        plan.push_back({SentencePlan::Kind::Filler, Relation::Capital, idx[static_cast<std::size_t>(i)], -1});
    }
    return plan;
}

namespace {

std::vector<SentencePlan> supporting_plan(const Entity& e, const std::vector<int>& high_ids, Rng& rng) {
    auto rels = relations_for(e.category);
    std::vector<Relation> pool(rels.begin(), rels.end());
    rng.shuffle(pool);
    std::vector<SentencePlan> plan;
    for (int i = 0; i < 2; ++i) {
        Relation r = pool[static_cast<std::size_t>(i)];
        int n = static_cast<int>(templates::fact_sentences(r).size());
        plan.push_back({SentencePlan::Kind::Fact, r, static_cast<int>(rng.below(static_cast<std::size_t>(n))), -1});
    }
    std::vector<int> others;
    for (int id : high_ids) {
        if (id != e.id) {
            others.push_back(id);
        }
    }
    if (!others.empty()) {
        int n = static_cast<int>(templates::comention_sentences().size());
        plan.push_back({SentencePlan::Kind::Comention, Relation::Capital,
                        static_cast<int>(rng.below(static_cast<std::size_t>(n))), rng.pick(others)});
    }
    int nf = static_cast<int>(templates::filler_sentences().size());
    plan.push_back({SentencePlan::Kind::Filler, Relation::Capital,
                    static_cast<int>(rng.below(static_cast<std::size_t>(nf))), -1});
    rng.shuffle(plan);
    return plan;
}

std::string plan_key(const std::vector<SentencePlan>& plan) {
    std::ostringstream os;
    for (const auto& s : plan) {
        os << static_cast<int>(s.kind) << ':' << static_cast<int>(s.relation) << ':' << s.variant << ':'
           << s.other << ';';
    }
    return os.str();
}

}  // namespace

Corpus generate_documents(const Entities& entities, const FactTable& facts, std::uint64_t seed,
                          const CorpusConfig& config, int first_id) {
    for (const Entity& e : entities) {
        for (Relation r : relations_for(e.category)) {
            facts.at(e.id, r);  // throws when a fact is missing
        }
    }
    std::vector<int> high_ids;
    for (const Entity& e : entities) {
        if (e.freq_class == FreqClass::High) {
            high_ids.push_back(e.id);
        }
    }
    FactLookup lookup = [&](int id, Relation r) -> const std::string& { return facts.at(id, r); };

    Corpus corpus;
    corpus.version = facts.version;
    int next_id = first_id;
    for (const Entity& e : entities) {
        Rng rng(derive_seed(seed, "doc-plan-" + std::to_string(e.id)));
        Document main = render_document(main_plan(e, config.main_fillers, rng), e, entities, lookup);
        main.id = next_id++;
        main.is_main = true;
        main.facts_version = facts.version;
        corpus.documents.push_back(std::move(main));

        std::set<std::string> seen;
        for (int j = 0; j < e.supporting_docs; ++j) {
            std::vector<SentencePlan> plan;
            for (int attempt = 0;; ++attempt) {
                if (attempt > 1000) {
                    throw ConfigError("cannot draw distinct supporting documents for " + e.name);
                }
                plan = supporting_plan(e, high_ids, rng);
                if (seen.insert(plan_key(plan)).second) {
                    break;
                }
            }
            Document d = render_document(plan, e, entities, lookup);
            d.id = next_id++;
            d.facts_version = facts.version;
            corpus.documents.push_back(std::move(d));
        }
    }
    dedup_documents(corpus);
    return corpus;
}

std::size_t dedup_documents(Corpus& corpus) {
    std::set<std::vector<std::string>> seen;
    std::size_t before = corpus.documents.size();
    std::vector<Document> kept;
    kept.reserve(before);
    for (Document& d : corpus.documents) {
        if (seen.insert(d.tokens).second) {
            kept.push_back(std::move(d));
        }
    }
    corpus.documents = std::move(kept);
    return before - corpus.documents.size();
}

std::map<int, int> entity_frequency(const Corpus& corpus) {
    std::map<int, int> counts;
    for (const Document& d : corpus.documents) {
        std::set<int> mentioned;
        for (const EntityRef& r : d.entity_refs) {
            mentioned.insert(r.entity);
        }
        for (int id : mentioned) {
            ++counts[id];
        }
    }
    return counts;
}

void assign_frequencies(Entities& entities, const Corpus& corpus) {
    auto counts = entity_frequency(corpus);
    for (Entity& e : entities) {
        auto it = counts.find(e.id);
        e.doc_frequency = it == counts.end() ? 0 : it->second;
    }
}

// ---------------------------------------------------------------------------
// annotation and segmentation

bool is_tag(std::string_view w) {
    for (int c = 0; c < 2; ++c) {
        if (w == kTagOpen[c] || w == kTagClose[c]) {
            return true;
        }
    }
    return false;
}

Document annotate_entities(const Document& doc, const Entities& entities) {
    std::vector<EntityRef> refs = doc.entity_refs;
    std::sort(refs.begin(), refs.end(), [](const EntityRef& a, const EntityRef& b) { return a.start < b.start; });
    int n = static_cast<int>(doc.tokens.size());
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (refs[i].start < 0 || refs[i].end > n || refs[i].start >= refs[i].end) {
            throw ConfigError("invalid entity span in document " + std::to_string(doc.id));
        }
        if (i > 0 && refs[i].start < refs[i - 1].end) {
            throw ConfigError("overlapping entity spans in document " + std::to_string(doc.id));
        }
    }
    Document out = doc;
    out.tokens.clear();
    out.entity_refs.clear();
    std::vector<int> new_pos(static_cast<std::size_t>(n));
    std::size_t next = 0;
    for (int i = 0; i < n; ++i) {
        if (next < refs.size() && refs[next].start == i) {
            const int c = static_cast<int>(find_entity(entities, refs[next].entity).category);
            out.entity_refs.push_back({refs[next].entity, static_cast<int>(out.tokens.size()), 0});
            out.tokens.emplace_back(kTagOpen[c]);
        }
        new_pos[static_cast<std::size_t>(i)] = static_cast<int>(out.tokens.size());
        out.tokens.push_back(doc.tokens[static_cast<std::size_t>(i)]);
        if (next < refs.size() && refs[next].end == i + 1) {
            const int c = static_cast<int>(find_entity(entities, refs[next].entity).category);
            out.tokens.emplace_back(kTagClose[c]);
            out.entity_refs.back().end = static_cast<int>(out.tokens.size());
            ++next;
        }
    }
    for (int& p : out.value_positions) {
        p = new_pos[static_cast<std::size_t>(p)];
    }
    return out;
}

Document strip_tags(const Document& doc) {
    Document out = doc;
    out.tokens.clear();
    std::vector<int> new_pos(doc.tokens.size() + 1);
    for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
        new_pos[i] = static_cast<int>(out.tokens.size());
        if (!is_tag(doc.tokens[i])) {
            out.tokens.push_back(doc.tokens[i]);
        }
    }
    new_pos[doc.tokens.size()] = static_cast<int>(out.tokens.size());
    for (EntityRef& r : out.entity_refs) {
        r.start = new_pos[static_cast<std::size_t>(r.start)];
        r.end = new_pos[static_cast<std::size_t>(r.end)];
    }
    for (int& p : out.value_positions) {
        p = new_pos[static_cast<std::size_t>(p)];
    }
    return out;
}

std::vector<TrainingSample> segment_document(const Document& doc, int max_seq_len, Variant variant) {
    if (max_seq_len < 1) {
        throw ConfigError("max_seq_len must be positive");
    }
    const int n = static_cast<int>(doc.tokens.size());
    std::vector<TrainingSample> out;
    int start = 0;
    while (start < n) {
        int end = std::min(start + max_seq_len, n);
        for (const EntityRef& r : doc.entity_refs) {
            if (r.end - r.start > max_seq_len) {
                throw ConfigError("entity span longer than max_seq_len in document " + std::to_string(doc.id));
            }
            if (r.start < end && r.end > end) {
                end = std::min(end, r.start);
            }
        }
        if (end <= start) {
            throw ConfigError("cannot segment document " + std::to_string(doc.id));
        }
        TrainingSample s;
        s.words.assign(doc.tokens.begin() + start, doc.tokens.begin() + end);
        s.document_id = doc.id;
        s.variant = variant;
        out.push_back(std::move(s));
        start = end;
    }
    return out;
}

std::vector<TrainingSample> segment_corpus(const Corpus& corpus, const Entities& entities,
                                           int max_seq_len, Variant variant) {
    std::vector<TrainingSample> out;
    for (const Document& d : corpus.documents) {
        auto part = variant == Variant::Tagged
                        ? segment_document(annotate_entities(d, entities), max_seq_len, variant)
                        : segment_document(d, max_seq_len, variant);
        out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return out;
}

Vocab build_vocab(const World& world) {
    std::set<std::string> words;
    for (auto& w : templates::fixed_words()) {
        words.insert(std::move(w));
    }
    for (int c = 0; c < 2; ++c) {
        words.emplace(kTagOpen[c]);
        words.emplace(kTagClose[c]);
    }
    for (const Entities* list : {&world.roster, &world.background, &world.reading}) {
        for (const Entity& e : *list) {
            for (auto& w : split_words(e.name)) {
                words.insert(std::move(w));
            }
        }
    }
    for (auto& w : world.pools.all_words()) {
        words.insert(std::move(w));
    }
    words.erase(std::string(Vocab::kEos));
    std::vector<std::string> list{std::string(Vocab::kEos)};
    list.insert(list.end(), words.begin(), words.end());
    return Vocab(std::move(list));
}

// ---------------------------------------------------------------------------
// files

json header_json(const FileHeader& h) {
    return json{{"schema_version", h.schema_version}, {"seed", h.seed}, {"config_hash", h.config_hash}};
}

namespace {

FileHeader parse_header(const std::string& line, const std::string& path) {
    json j = json::parse(line);
    FileHeader h;
    h.schema_version = j.at("schema_version").get<int>();
    h.seed = j.at("seed").get<std::uint64_t>();
    h.config_hash = j.at("config_hash").get<std::string>();
    if (h.schema_version != kSchemaVersion) {
        throw ConfigError(path + ": unsupported schema_version " + std::to_string(h.schema_version));
    }
    return h;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot write " + path);
    }
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path);
    }
    return in;
}

}  // namespace

std::string config_hash(const json& config) { return hex64(fnv1a(config.dump())); }

json document_json(const Document& d) {
    json refs = json::array();
    for (const EntityRef& r : d.entity_refs) {
        refs.push_back({r.entity, r.start, r.end});
    }
    return json{{"id", d.id},
                {"owner", d.owner},
                {"entity_refs", refs},
                {"tokens", d.tokens},
                {"is_main", d.is_main},
                {"facts_version", to_string(d.facts_version)},
                {"value_positions", d.value_positions}};
}

Document document_from_json(const json& j) {
    Document d;
    d.id = j.at("id").get<int>();
    d.owner = j.value("owner", 0);
    for (const auto& r : j.at("entity_refs")) {
        d.entity_refs.push_back({r.at(0).get<int>(), r.at(1).get<int>(), r.at(2).get<int>()});
    }
    d.tokens = j.at("tokens").get<std::vector<std::string>>();
    d.is_main = j.at("is_main").get<bool>();
    d.facts_version = parse_facts_version(j.at("facts_version").get<std::string>());
    d.value_positions = j.value("value_positions", std::vector<int>{});
    return d;
}

void write_corpus(const std::string& path, const Corpus& corpus, const FileHeader& header) {
    auto out = open_out(path);
    out << header_json(header).dump() << '\n';
    for (const Document& d : corpus.documents) {
        out << document_json(d).dump() << '\n';
    }
}

Corpus read_corpus(const std::string& path, FileHeader* header) {
    auto in = open_in(path);
    std::string line;
    if (!std::getline(in, line)) {
        throw ConfigError(path + ": empty corpus file");
    }
    FileHeader h = parse_header(line, path);
    if (header) {
        *header = h;
    }
    Corpus c;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        c.documents.push_back(document_from_json(json::parse(line)));
        if (first) {
            c.version = c.documents.back().facts_version;
            first = false;
        }
    }
    return c;
}

void write_facts(const std::string& path, const FactTable& facts, const FileHeader& header) {
    auto out = open_out(path);
    out << header_json(header).dump() << '\n' << json(facts).dump() << '\n';
}

FactTable read_facts(const std::string& path, FileHeader* header) {
    auto in = open_in(path);
    std::string line;
    if (!std::getline(in, line)) {
        throw ConfigError(path + ": empty fact file");
    }
    FileHeader h = parse_header(line, path);
    if (header) {
        *header = h;
    }
    if (!std::getline(in, line)) {
        throw ConfigError(path + ": missing fact table");
    }
    return json::parse(line).get<FactTable>();
}

}  // namespace cptlab
