#include <doctest.h>

#include <filesystem>
#include <set>

#include "cptlab/corpus.hpp"
#include "cptlab/templates.hpp"

using namespace cptlab;

namespace {

CorpusConfig small_config() {
    CorpusConfig c;
    c.background_per_cell = 2;
    return c;
}

struct Fixture {
    World world = build_world(small_config(), 7);
    FactTable v1 = generate_facts(world.roster, world.pools, FactsVersion::V1, 7);
    FactTable v2 = generate_facts(world.roster, world.pools, FactsVersion::V2, 7);
    Corpus c1 = generate_documents(world.roster, v1, 7, world.config);
    Corpus c2 = generate_documents(world.roster, v2, 7, world.config);
};

}  // namespace

TEST_CASE("roster counts and determinism") {
    auto r = build_entity_roster(small_config(), 7);
    CHECK(r.size() == 20);
    int high = 0;
    std::set<std::string> names;
    for (const auto& e : r) {
        high += e.freq_class == FreqClass::High;
        names.insert(e.name);
    }
    CHECK(high == 10);
    CHECK(names.size() == 20);

    auto again = build_entity_roster(small_config(), 7);
    for (std::size_t i = 0; i < r.size(); ++i) {
        CHECK(r[i].name == again[i].name);
        CHECK(r[i].id == again[i].id);
    }

    CorpusConfig full_scale = small_config();
    full_scale.per_cell = 25;
    CHECK(build_entity_roster(full_scale, 1).size() == 100);
}

TEST_CASE("roster configuration errors") {
    CorpusConfig c;
    c.high_supporting = 8;
    c.low_supporting = 8;
    CHECK_THROWS_AS(build_entity_roster(c, 1), ConfigError);
    c = CorpusConfig{};
    c.per_cell = 0;
    CHECK_THROWS_AS(build_entity_roster(c, 1), ConfigError);
}

TEST_CASE("fact revision is local to time-sensitive slots") {
    Fixture f;
    for (const Entity& e : f.world.roster) {
        int changed = 0;
        CHECK(relations_for(e.category).size() >= 5);
        for (Relation r : relations_for(e.category)) {
            const auto& a = f.v1.at(e.id, r);
            const auto& b = f.v2.at(e.id, r);
            if (is_time_sensitive(r)) {
                changed += a != b;
            } else {
                CHECK(a == b);
            }
        }
        CHECK(changed >= 1);
    }
    const Entity& country = f.world.roster.front();
    REQUIRE(country.category == Category::Gpe);
    CHECK(f.v1.at(country.id, Relation::HeadOfState) != f.v2.at(country.id, Relation::HeadOfState));
}

TEST_CASE("document counts and dedup") {
    Fixture f;
    std::map<int, int> main, supporting;
    std::set<std::vector<std::string>> texts;
    for (const Document& d : f.c1.documents) {
        (d.is_main ? main : supporting)[d.owner]++;
        CHECK(texts.insert(d.tokens).second);
    }
    for (const Entity& e : f.world.roster) {
        CHECK(main[e.id] == 1);
        CHECK(supporting[e.id] == (e.freq_class == FreqClass::High ? 40 : 8));
    }
}

TEST_CASE("V1 and V2 corpora share structure and differ only at values") {
    Fixture f;
    REQUIRE(f.c1.documents.size() == f.c2.documents.size());
    for (std::size_t i = 0; i < f.c1.documents.size(); ++i) {
        const Document& a = f.c1.documents[i];
        const Document& b = f.c2.documents[i];
        CHECK(a.id == b.id);
        REQUIRE(a.tokens.size() == b.tokens.size());
        CHECK(a.value_positions == b.value_positions);
        std::set<int> values(a.value_positions.begin(), a.value_positions.end());
        for (std::size_t k = 0; k < a.tokens.size(); ++k) {
            if (a.tokens[k] != b.tokens[k]) {
                CHECK(values.count(static_cast<int>(k)) == 1);
            }
        }
    }
}

TEST_CASE("entity_frequency matches a brute-force scan and separates classes") {
    Fixture f;
    auto counts = entity_frequency(f.c2);
    for (const Entity& e : f.world.roster) {
        int brute = 0;
        for (const Document& d : f.c2.documents) {
            bool hit = false;
            for (const EntityRef& r : d.entity_refs) {
                hit = hit || r.entity == e.id;
            }
            brute += hit;
        }
        CHECK(counts[e.id] == brute);
    }
    CHECK(counts.count(999999) == 0);

    int min_high = 1 << 30, max_low = 0;
    for (const Entity& e : f.world.roster) {
        if (e.freq_class == FreqClass::High) {
            min_high = std::min(min_high, counts[e.id]);
        } else {
            max_low = std::max(max_low, counts[e.id]);
        }
        CHECK(counts[e.id] >= 1 + f.world.config.low_supporting);
    }
    CHECK(min_high > max_low);

    // a document repeating its subject still counts once
    Corpus one;
    Document d;
    d.tokens = {"X", "and", "X", "and", "X"};
    d.entity_refs = {{3, 0, 1}, {3, 2, 3}, {3, 4, 5}};
    one.documents.push_back(d);
    CHECK(entity_frequency(one)[3] == 1);
}

TEST_CASE("annotation wraps spans and strips back") {
    Fixture f;
    for (const Document& d : f.c2.documents) {
        Document t = annotate_entities(d, f.world.roster);
        CHECK(t.tokens.size() == d.tokens.size() + 2 * d.entity_refs.size());
        for (const EntityRef& r : t.entity_refs) {
            CHECK(is_tag(t.tokens[static_cast<std::size_t>(r.start)]));
            CHECK(is_tag(t.tokens[static_cast<std::size_t>(r.end - 1)]));
        }
        Document back = strip_tags(t);
        CHECK(back.tokens == d.tokens);
        CHECK(back.entity_refs == d.entity_refs);
        CHECK(back.value_positions == d.value_positions);
    }

    Entities gpe{{1, "Parisville", Category::Gpe, FreqClass::High, 0, 0}};
    Document d;
    d.tokens = {"we", "visited", "Parisville", "."};
    d.entity_refs = {{1, 2, 3}};
    Document t = annotate_entities(d, gpe);
    CHECK(t.text() == "we visited <GPE> Parisville </GPE> .");

    Document none;
    none.tokens = {"nothing", "here"};
    CHECK(annotate_entities(none, gpe).tokens == none.tokens);

    Document bad = d;
    bad.tokens = {"a", "b", "c"};
    bad.entity_refs = {{1, 0, 2}, {1, 1, 3}};
    CHECK_THROWS_AS(annotate_entities(bad, gpe), ConfigError);
}

TEST_CASE("segmentation never splits spans") {
    Document d;
    for (int i = 0; i < 20; ++i) {
        d.tokens.push_back("w" + std::to_string(i));
    }
    d.entity_refs = {{0, 7, 10}};
    auto s = segment_document(d, 8, Variant::Plain);
    REQUIRE(s.size() == 3);
    CHECK(s[0].words.size() == 7);
    std::vector<std::string> joined;
    for (const auto& part : s) {
        CHECK(part.words.size() <= 8);
        joined.insert(joined.end(), part.words.begin(), part.words.end());
    }
    CHECK(joined == d.tokens);

    Document small;
    for (int i = 0; i < 100; ++i) {
        small.tokens.push_back("x");
    }
    CHECK(segment_document(small, 256, Variant::Plain).size() == 1);

    Document huge = d;
    huge.entity_refs = {{0, 2, 15}};
    CHECK_THROWS_AS(segment_document(huge, 8, Variant::Plain), ConfigError);
}

TEST_CASE("plain and tagged samples carry the same content") {
    Fixture f;
    for (int len : {256, 12}) {
        auto plain = segment_corpus(f.c2, f.world.roster, len, Variant::Plain);
        auto tagged = segment_corpus(f.c2, f.world.roster, len, Variant::Tagged);
        std::map<int, std::vector<std::string>> a, b;
        for (const auto& s : plain) {
            a[s.document_id].insert(a[s.document_id].end(), s.words.begin(), s.words.end());
        }
        for (const auto& s : tagged) {
            CHECK(static_cast<int>(s.words.size()) <= len);
            for (const auto& w : s.words) {
                if (!is_tag(w)) {
                    b[s.document_id].push_back(w);
                }
            }
        }
        CHECK(a == b);
        for (const Document& d : f.c2.documents) {
            CHECK(a[d.id] == d.tokens);
        }
    }
}

TEST_CASE("vocabulary covers the corpus") {
    Fixture f;
    Vocab v = build_vocab(f.world);
    CHECK(v.word(0) == "<eos>");
    for (const Document& d : f.c2.documents) {
        CHECK_NOTHROW(v.encode(annotate_entities(d, f.world.roster).tokens));
    }
    CHECK(v.size() < 4000);
    CHECK(build_vocab(f.world).words() == v.words());
}

TEST_CASE("corpus and facts round-trip through files") {
    Fixture f;
    auto dir = std::filesystem::temp_directory_path() / "cptlab_test_corpus";
    std::filesystem::create_directories(dir);
    FileHeader h{kSchemaVersion, 7, "abc"};
    write_corpus((dir / "c.jsonl").string(), f.c2, h);
    FileHeader h2;
    Corpus back = read_corpus((dir / "c.jsonl").string(), &h2);
    CHECK(h2.seed == 7);
    CHECK(h2.config_hash == "abc");
    REQUIRE(back.documents.size() == f.c2.documents.size());
    CHECK(back.documents[5].tokens == f.c2.documents[5].tokens);
    CHECK(back.documents[5].entity_refs == f.c2.documents[5].entity_refs);

    write_facts((dir / "f.json").string(), f.v2, h);
    FactTable t = read_facts((dir / "f.json").string());
    CHECK(t.entries == f.v2.entries);
    CHECK(t.version == FactsVersion::V2);
    std::filesystem::remove_all(dir);
}

TEST_CASE("templates") {
    CHECK(templates::fill("a {x} b {x}", "x", "y") == "a y b y");
    CHECK(templates::fact_sentences(Relation::HeadOfState)[0] ==
          "The name of the current head of state of {e} is {v} .");
    for (Category c : {Category::Gpe, Category::Person}) {
        std::map<Facet, int> hist;
        for (const auto& q : templates::questions(c)) {
            hist[q.facet]++;
        }
        CHECK(hist.size() == 5);
        for (auto [facet, n] : hist) {
            CHECK(n == 2);
        }
    }
}
