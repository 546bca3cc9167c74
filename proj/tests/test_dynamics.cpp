#include "doctest.h"

#include <sstream>

#include "cptlab/dynamics.hpp"

using namespace cptlab;

namespace {

struct Fixture {
    Entities entities;
    Suites suites;

    Fixture() {
        CorpusConfig cc;
        const World w = build_world(cc, 21);
        entities = w.roster;
        const FactTable v2 = generate_facts(entities, w.pools, FactsVersion::V2, 21);
        suites.knowledge = build_knowledge_suite(entities, v2);
        suites.ood = build_ood_suite(21, 10);
    }

    // Per-probe scores drawn so entity means land on a coarse grid around theta.
    EpochReport report(int epoch, Rng& rng, const EpochReport* prev) const {
        std::vector<ProbeResult> k;
        for (const auto& p : suites.knowledge) {
            k.push_back(ProbeResult{p.id, epoch, "", rng.below(10) < 6 ? 1.0 : 0.0});
        }
        std::vector<ProbeResult> o;
        for (const auto& p : suites.ood) {
            const bool right = rng.below(2) == 0;
            o.push_back(ProbeResult{p.id, epoch, std::string(1, right ? p.gold : 'x'), right ? 1.0 : 0.0});
        }
        return build_report(epoch, entities, suites, k, o, prev);
    }
};

}  // namespace

TEST_CASE("transition truth table around theta") {
    const double th = 0.6;
    const double below = 0.59, at = 0.60, above = 0.61;
    for (double p : {below, at, above}) {
        for (double c : {below, at, above}) {
            TransitionLabel want;
            if (p < th && c >= th) {
                want = TransitionLabel::Acquired;
            } else if (p >= th && c >= th) {
                want = TransitionLabel::Retained;
            } else if (p >= th && c < th) {
                want = TransitionLabel::Forgotten;
            } else {
                want = TransitionLabel::NotLearned;
            }
            CHECK(classify_transition(p, c) == want);
        }
    }
    CHECK(classify_transition(0.55, 0.62) == TransitionLabel::Acquired);
    CHECK(classify_transition(0.60, 0.59) == TransitionLabel::Forgotten);
    CHECK(classify_transition(0.30, 0.40) == TransitionLabel::NotLearned);
    for (auto l : {TransitionLabel::Acquired, TransitionLabel::Retained, TransitionLabel::Forgotten,
                   TransitionLabel::NotLearned}) {
        CHECK(parse_transition(to_string(l)) == l);
    }
}

TEST_CASE("distortion is a strict decrease") {
    CHECK(detect_distortion(0.63, 0.64));
    CHECK_FALSE(detect_distortion(0.64, 0.64));
    CHECK_FALSE(detect_distortion(0.70, 0.64));
}

TEST_CASE("report aggregates recompute from probe results") {
    Fixture f;
    Rng rng(3);
    const EpochReport r0 = f.report(0, rng, nullptr);
    CHECK_FALSE(r0.counts.has_value());
    for (const auto& e : r0.entities) {
        CHECK_FALSE(e.label.has_value());
    }
    const EpochReport r1 = f.report(1, rng, &r0);
    REQUIRE(r1.counts.has_value());

    // brute force
    double all = 0, hi = 0, lo = 0;
    int nh = 0, nl = 0;
    for (std::size_t i = 0; i < f.entities.size(); ++i) {
        double s = 0;
        for (int j = 0; j < 10; ++j) {
            s += r1.knowledge_results[i * 10 + static_cast<std::size_t>(j)].score;
        }
        s /= 10;
        CHECK(r1.entities[i].recall == doctest::Approx(s).epsilon(1e-12));
        all += s;
        (f.entities[i].freq_class == FreqClass::High ? hi : lo) += s;
        (f.entities[i].freq_class == FreqClass::High ? nh : nl) += 1;
    }
    CHECK(r1.recall_all == doctest::Approx(all / f.entities.size()).epsilon(1e-12));
    CHECK(r1.recall_high == doctest::Approx(hi / nh).epsilon(1e-12));
    CHECK(r1.recall_low == doctest::Approx(lo / nl).epsilon(1e-12));

    std::map<std::string, std::pair<int, int>> tasks;
    for (std::size_t i = 0; i < f.suites.ood.size(); ++i) {
        auto& t = tasks[f.suites.ood[i].task];
        t.first += r1.ood_results[i].score > 0.5;
        ++t.second;
    }
    double mean = 0;
    for (auto& [name, t] : tasks) {
        CHECK(r1.ood.at(name) == doctest::Approx(double(t.first) / t.second));
        mean += double(t.first) / t.second;
    }
    CHECK(r1.ood_mean == doctest::Approx(mean / tasks.size()));
    CHECK(r1.distortion == (r1.ood_mean < r0.ood_mean));

    // partition and set identity
    const auto& c = *r1.counts;
    CHECK(c.acquired + c.retained + c.forgotten + c.not_learned == static_cast<int>(f.entities.size()));
    int above = 0;
    for (const auto& e : r1.entities) {
        above += e.recall >= kDefaultTheta;
    }
    CHECK(c.acquired + c.retained == above);
    CHECK(count_labels(r1.entities) == c);
}

TEST_CASE("raising theta never adds learned entities") {
    Fixture f;
    Rng rng(9);
    const EpochReport r0 = f.report(0, rng, nullptr);
    const EpochReport r1 = f.report(1, rng, &r0);
    int last = 1 << 30;
    for (double th : {0.0, 0.2, 0.4, 0.5, 0.6, 0.7, 0.9, 1.0}) {
        const EpochReport r = build_report(1, f.entities, f.suites, r1.knowledge_results, r1.ood_results, &r0, th);
        const int learned = r.counts->acquired + r.counts->retained;
        CHECK(learned <= last);
        last = learned;
    }
}

TEST_CASE("report json round-trip and result order checks") {
    Fixture f;
    Rng rng(5);
    const EpochReport r0 = f.report(0, rng, nullptr);
    const EpochReport r1 = f.report(1, rng, &r0);
    const EpochReport back = nlohmann::json(r1).get<EpochReport>();
    CHECK(nlohmann::json(back).dump() == nlohmann::json(r1).dump());
    CHECK(nlohmann::json(nlohmann::json(r0).get<EpochReport>()).dump() == nlohmann::json(r0).dump());

    auto k = r1.knowledge_results;
    std::swap(k[0], k[1]);
    CHECK_THROWS_AS(build_report(1, f.entities, f.suites, k, r1.ood_results, &r0), ConfigError);
    k.pop_back();
    CHECK_THROWS_AS(build_report(1, f.entities, f.suites, k, r1.ood_results, &r0), ConfigError);
}

TEST_CASE("run summary: deltas, trajectories and heatmap") {
    Fixture f;
    Rng rng(12);
    std::vector<EpochReport> reports{f.report(0, rng, nullptr)};
    for (int t = 1; t <= 5; ++t) {
        reports.push_back(f.report(t, rng, &reports.back()));
        reports.back().perplexity = 10.0 - t;
    }
    const RunSummary s = summarize_run(reports, f.entities);
    REQUIRE(s.rows.size() == 6);
    for (std::size_t t = 0; t < s.rows.size(); ++t) {
        CHECK(s.rows[t].d_all == doctest::Approx(reports[t].recall_all - reports[0].recall_all));
        CHECK(s.rows[t].d_ood == doctest::Approx(reports[t].ood_mean - reports[0].ood_mean));
    }
    CHECK(s.rows[0].d_all == 0.0);
    // High rows first
    bool seen_low = false;
    for (int id : s.entity_order) {
        const auto& e = *std::find_if(f.entities.begin(), f.entities.end(), [&](const Entity& x) { return x.id == id; });
        if (e.freq_class == FreqClass::Low) {
            seen_low = true;
        } else {
            CHECK_FALSE(seen_low);
        }
    }
    CHECK(s.heat.size() == f.entities.size());
    // Retained at t implies learned at t-1
    for (std::size_t t = 2; t < reports.size(); ++t) {
        for (std::size_t i = 0; i < f.entities.size(); ++i) {
            if (reports[t].entities[i].label == TransitionLabel::Retained) {
                const auto prev = *reports[t - 1].entities[i].label;
                CHECK((prev == TransitionLabel::Acquired || prev == TransitionLabel::Retained));
            }
        }
    }
    const std::string csv = summary_csv(s);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
    CHECK(heatmap_csv(s, f.entities) == heatmap_csv(summarize_run(reports, f.entities), f.entities));
}

TEST_CASE("unchanged run has zero deltas") {
    Fixture f;
    Rng rng(2);
    std::vector<EpochReport> reports{f.report(0, rng, nullptr)};
    for (int t = 1; t <= 3; ++t) {
        EpochReport r = build_report(t, f.entities, f.suites, reports[0].knowledge_results, reports[0].ood_results,
                                     &reports.back());
        for (const auto& e : r.entities) {
            CHECK((e.label == TransitionLabel::Retained || e.label == TransitionLabel::NotLearned));
        }
        CHECK_FALSE(r.distortion);
        reports.push_back(std::move(r));
    }
    for (const auto& row : summarize_run(reports, f.entities).rows) {
        CHECK(row.d_all == 0.0);
        CHECK(row.d_high == 0.0);
        CHECK(row.d_low == 0.0);
        CHECK(row.d_ood == 0.0);
    }
}

TEST_CASE("fmt_num") {
    CHECK(fmt_num(0.5) == "0.5000");
    CHECK(fmt_num(-0.0) == "0.0000");
    CHECK(fmt_num(-1e-9) == "0.0000");
    CHECK(fmt_num(1.23456, 2) == "1.23");
}
