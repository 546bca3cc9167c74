#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <map>
#include <regex>
#include <set>

#include "cptlab/probes.hpp"

using namespace cptlab;

namespace {

// Independent clipped-unigram counter: regex tokens, min of counts per type.
double brute_rouge(const std::string& cand, const std::string& gold) {
    auto count = [](const std::string& s) {
        std::map<std::string, int> m;
        static const std::regex word("[A-Za-z0-9]+");
        for (auto it = std::sregex_iterator(s.begin(), s.end(), word); it != std::sregex_iterator(); ++it) {
            std::string w = it->str();
            std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
            ++m[w];
        }
        return m;
    };
    const auto g = count(gold), c = count(cand);
    int total = 0, hit = 0;
    for (const auto& [w, n] : g) {
        total += n;
        auto it = c.find(w);
        hit += it == c.end() ? 0 : std::min(n, it->second);
    }
    return static_cast<double>(hit) / total;
}

std::string random_text(Rng& rng, int max_words) {
    static const std::vector<std::string> words{"macron", "Emmanuel", "the", "THE", "is", "a", "b", "party",
                                                "1990",   "x",        "Y",   "leader", "of", "7"};
    static const std::vector<std::string> seps{" ", "  ", ", ", ". ", "-", "!", " ("};
    std::string s;
    const int n = static_cast<int>(rng.below(static_cast<std::size_t>(max_words + 1)));
    for (int i = 0; i < n; ++i) {
        if (i) {
            s += rng.pick(seps);
        }
        s += rng.pick(words);
    }
    return s;
}

}  // namespace

TEST_CASE("rouge1 recall examples") {
    CHECK(rouge1_recall("personB", "personB") == 1.0);
    CHECK(rouge1_recall("the leader is macron", "emmanuel macron") == 0.5);
    CHECK(rouge1_recall("", "x") == 0.0);
    CHECK(rouge1_recall("Macron!", "macron") == 1.0);
    // clipping: one candidate copy matches only one gold copy
    CHECK(rouge1_recall("a", "a a") == 0.5);
    CHECK_THROWS_AS(rouge1_recall("x", ""), ConfigError);
    CHECK_THROWS_AS(rouge1_recall("x", " .,"), ConfigError);
}

TEST_CASE("rouge1 recall matches a brute-force counter") {
    Rng rng(99);
    int checked = 0;
    while (checked < 500) {
        const std::string gold = random_text(rng, 5);
        if (rouge_tokens(gold).empty()) {
            continue;
        }
        const std::string cand = random_text(rng, 12);
        REQUIRE(rouge1_recall(cand, gold) == brute_rouge(cand, gold));
        ++checked;
    }
}

TEST_CASE("rouge1 recall: padding never hurts, removing gold tokens does") {
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        std::string gold = random_text(rng, 4);
        if (rouge_tokens(gold).empty()) {
            continue;
        }
        const std::string cand = random_text(rng, 8);
        const double base = rouge1_recall(cand, gold);
        CHECK(rouge1_recall(cand + " zzz qqq", gold) >= base);
        CHECK(rouge1_recall(gold, gold) == 1.0);
        // drop one gold token from a perfect answer
        auto toks = rouge_tokens(gold);
        toks.pop_back();
        std::string partial;
        for (auto& t : toks) {
            partial += t + " ";
        }
        CHECK(rouge1_recall(partial, gold) < 1.0);
    }
}

TEST_CASE("extract_choice") {
    CHECK(extract_choice("B) because") == 'B');
    CHECK(extract_choice("The answer is (C") == 'C');
    CHECK_FALSE(extract_choice("no idea").has_value());
    CHECK(extract_choice("A") == 'A');
    CHECK(extract_choice("Dog D") == 'D');  // D inside a word is skipped
    CHECK(extract_choice("C or A") == 'C');
    CHECK_FALSE(extract_choice("E F").has_value());
    CHECK_FALSE(extract_choice("abcd").has_value());
}

TEST_CASE("ood accuracy from results") {
    std::vector<OODProbe> probes(4);
    std::vector<ProbeResult> results(4);
    const char gold[] = {'A', 'B', 'C', 'D'};
    for (int i = 0; i < 4; ++i) {
        probes[i].gold = gold[i];
        results[i].generated = std::string(1, gold[i]);
    }
    CHECK(ood_accuracy(probes, results) == 1.0);
    results[1].generated = "no idea";
    results[2].generated = "A";
    CHECK(ood_accuracy(probes, results) == 0.5);
    // unanswered items bound accuracy by the answered fraction
    int answered = 0;
    for (auto& r : results) {
        answered += extract_choice(r.generated).has_value();
    }
    CHECK(ood_accuracy(probes, results) <= answered / 4.0);
    CHECK_THROWS_AS(ood_accuracy(std::span<const OODProbe>(), std::span<const ProbeResult>()), ConfigError);
}

TEST_CASE("random guessing sits near chance") {
    const auto suite = build_ood_suite(3, 100);
    REQUIRE(suite.size() == 200);
    Rng rng(17);
    std::vector<ProbeResult> results;
    for (std::size_t i = 0; i < suite.size(); ++i) {
        results.push_back(ProbeResult{suite[i].id, 0, std::string(1, static_cast<char>('A' + rng.below(4))), 0.0});
    }
    CHECK(std::abs(ood_accuracy(suite, results) - 0.25) <= 0.08);
}

TEST_CASE("entity recall") {
    std::vector<ProbeResult> r(10);
    for (auto& x : r) {
        x.score = 1.0;
    }
    CHECK(entity_recall(r) == 1.0);
    for (int i = 6; i < 10; ++i) {
        r[static_cast<std::size_t>(i)].score = 0.0;
    }
    CHECK(entity_recall(r) == doctest::Approx(0.6).epsilon(1e-12));
    Rng rng(8);
    for (int k = 0; k < 50; ++k) {
        double sum = 0.0;
        for (auto& x : r) {
            x.score = rng.uniform();
            sum += x.score;
        }
        CHECK(entity_recall(r) == doctest::Approx(sum / 10).epsilon(1e-12));
    }
    r.pop_back();
    CHECK_THROWS_AS(entity_recall(r), ConfigError);
}

TEST_CASE("knowledge probes per entity") {
    CorpusConfig cc;
    const World w = build_world(cc, 5);
    const FactTable v2 = generate_facts(w.roster, w.pools, FactsVersion::V2, 5);
    const auto suite = build_knowledge_suite(w.roster, v2);
    CHECK(suite.size() == w.roster.size() * 10);
    std::set<std::string> ids;
    for (const Entity& e : w.roster) {
        const auto probes = build_knowledge_probes(e, v2);
        REQUIRE(probes.size() == 10);
        std::map<Facet, int> hist;
        std::map<int, std::set<std::string>> groups;
        for (const auto& p : probes) {
            ++hist[p.facet];
            CHECK(p.question.find(e.name) != std::string::npos);
            CHECK(rouge_tokens(p.gold).size() <= 5);
            CHECK(ids.insert(p.id).second);
            if (p.consistency_group >= 0) {
                groups[p.consistency_group].insert(p.gold);
            }
        }
        CHECK(hist.size() == 5);
        for (auto& [f, n] : hist) {
            CHECK(n == 2);
        }
        REQUIRE(groups.size() == 1);
        CHECK(groups.begin()->second.size() == 1);
    }
    // head-of-state question instantiation
    const Entity& g = w.roster.front();
    REQUIRE(g.category == Category::Gpe);
    const auto probes = build_knowledge_probes(g, v2);
    const auto hos = std::find_if(probes.begin(), probes.end(),
                                  [](const KnowledgeProbe& p) { return p.relation == Relation::HeadOfState; });
    REQUIRE(hos != probes.end());
    CHECK(hos->gold == v2.at(g.id, Relation::HeadOfState));

    FactTable empty;
    CHECK_THROWS_AS(build_knowledge_probes(g, empty), ConfigError);
}

TEST_CASE("ood suite invariants and held-out training items") {
    const auto suite = build_ood_suite(11, 50);
    CHECK(suite.size() == 100);
    std::set<std::string> keys;
    for (const auto& p : suite) {
        std::set<std::string> distinct(p.choices.begin(), p.choices.end());
        CHECK(distinct.size() == 4);
        CHECK((p.gold >= 'A' && p.gold <= 'D'));
        keys.insert(p.question + p.choices[0] + p.choices[1] + p.choices[2] + p.choices[3]);
    }
    CHECK(suite_hash(suite) == suite_hash(build_ood_suite(11, 50)));
    const auto train = sample_ood_training(12, 300, suite);
    for (const auto& p : train) {
        CHECK(keys.count(p.question + p.choices[0] + p.choices[1] + p.choices[2] + p.choices[3]) == 0);
    }
}

TEST_CASE("probe files round-trip and are validated") {
    CorpusConfig cc;
    const World w = build_world(cc, 5);
    const FactTable v2 = generate_facts(w.roster, w.pools, FactsVersion::V2, 5);
    const auto suite = build_knowledge_suite(w.roster, v2);
    const auto ood = build_ood_suite(1, 5);
    const auto dir = std::filesystem::temp_directory_path() / "cptlab_test_probes";
    std::filesystem::create_directories(dir);
    write_jsonl<KnowledgeProbe>((dir / "k.jsonl").string(), suite);
    write_jsonl<OODProbe>((dir / "o.jsonl").string(), ood);
    const auto k2 = read_jsonl<KnowledgeProbe>((dir / "k.jsonl").string());
    const auto o2 = read_jsonl<OODProbe>((dir / "o.jsonl").string());
    CHECK(suite_hash(k2) == suite_hash(suite));
    CHECK(suite_hash(o2) == suite_hash(ood));

    nlohmann::json bad = ood.front();
    bad["choices"] = {"a", "a", "b", "c"};
    CHECK_THROWS_AS(bad.get<OODProbe>(), ConfigError);
    bad = ood.front();
    bad["gold"] = "E";
    CHECK_THROWS_AS(bad.get<OODProbe>(), ConfigError);
    std::filesystem::remove_all(dir);
}
