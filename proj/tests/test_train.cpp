#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cptlab/checkpoint_io.hpp"
#include "fixture.hpp"

using namespace cptlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cptlab_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

StrategyConfig quick(StrategyKind kind, int epochs) {
    StrategyConfig c = StrategyConfig::defaults(kind);
    c.epochs = epochs;
    c.lr = 1e-2;
    return c;
}

const testing::MiniWorld& mini() {
    static const testing::MiniWorld w;
    return w;
}

}  // namespace

TEST_CASE("strategy names and defaults") {
    for (auto k : {StrategyKind::LoRA, StrategyKind::StructuredAnnotation, StrategyKind::Curriculum,
                   StrategyKind::KLPretrain, StrategyKind::KLStepwise}) {
        CHECK(parse_strategy(to_string(k)) == k);
        const StrategyConfig c = StrategyConfig::defaults(k);
        CHECK(nlohmann::json(c).get<StrategyConfig>().run_name() == c.run_name());
    }
    CHECK(StrategyConfig::defaults(StrategyKind::KLPretrain).lambda == 10.0);
    CHECK(StrategyConfig::defaults(StrategyKind::KLStepwise).lambda == 1.0);
    CHECK(StrategyConfig::defaults(StrategyKind::LoRA).adapter.rank == 4);
    CHECK(StrategyConfig::defaults(StrategyKind::LoRA).adapter.alpha == 8.0f);
    CHECK_THROWS_AS(parse_strategy("sgd"), ConfigError);
    StrategyConfig bad = StrategyConfig::defaults(StrategyKind::LoRA);
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = StrategyConfig::defaults(StrategyKind::KLPretrain);
    bad.lambda = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training samples carry their owners") {
    const auto& w = mini();
    const CptInputs plain = w.inputs();
    const CptInputs tagged = w.inputs(Variant::Tagged);
    const CptInputs mains = w.inputs(Variant::Plain, true);
    std::map<int, int> owner_of;
    for (const Document& d : w.revised.documents) {
        owner_of[d.id] = d.owner;
    }
    for (const CptSample& s : plain.samples) {
        CHECK(s.owner == owner_of.at(s.document_id));
        CHECK(static_cast<int>(s.seq.tokens.size()) <= w.cc.max_seq_len);
    }
    std::set<int> main_owners;
    for (const CptSample& s : mains.samples) {
        CHECK(w.revised.documents[static_cast<std::size_t>(s.document_id)].is_main);
        main_owners.insert(s.owner);
    }
    CHECK(main_owners.size() == w.world.roster.size());
    std::size_t plain_tokens = 0, tagged_tokens = 0;
    for (auto& s : plain.samples) {
        plain_tokens += s.seq.tokens.size();
    }
    for (auto& s : tagged.samples) {
        tagged_tokens += s.seq.tokens.size();
    }
    CHECK(tagged_tokens > plain_tokens);
}

TEST_CASE("curriculum selection keeps entities below theta") {
    const auto& w = mini();
    const CptInputs in = w.inputs();
    EpochReport prev;
    Rng rng(6);
    for (const Entity& e : w.world.roster) {
        prev.entities.push_back(EntityEpoch{e.id, e.freq_class, rng.below(3) * 0.3, std::nullopt});
    }
    const CurriculumSlice s = select_curriculum(prev, in.samples, 0.6, 4);
    CHECK(s.epoch == 4);
    std::set<int> inc(s.included.begin(), s.included.end());
    for (const auto& e : prev.entities) {
        CHECK(inc.count(e.entity) == (e.recall < 0.6 ? 1u : 0u));
    }
    CHECK(s.included.size() + s.excluded.size() == w.world.roster.size());
    std::size_t expected = 0;
    for (std::size_t i = 0; i < in.samples.size(); ++i) {
        expected += inc.count(in.samples[i].owner);
    }
    CHECK(s.samples.size() == expected);
    for (std::size_t i : s.samples) {
        CHECK(inc.count(in.samples[i].owner) == 1);
    }
    const CurriculumSlice none = select_curriculum(prev, in.samples, 0.0, 1);
    CHECK(none.exhausted());
}

TEST_CASE("checkpoint files round-trip") {
    const auto& w = mini();
    const fs::path dir = scratch("ckpt");
    const Tokens probe{1, 5, 9, 3};
    save_checkpoint((dir / "base.bin").string(), w.base);
    const Checkpoint base2 = load_checkpoint((dir / "base.bin").string());
    CHECK(base2.config == w.base.config);
    CHECK(forward(base2, probe).logits == forward(w.base, probe).logits);

    Checkpoint lora = attach_adapters(w.base, AdapterConfig{}, 4);
    Rng rng(4);
    lora.adapters->visit([&](const std::string&, Matrix& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = static_cast<float>(rng.normal());
        }
    });
    lora.epoch = 3;
    save_checkpoint((dir / "a.bin").string(), lora, "base.bin");
    CHECK(checkpoint_base_ref((dir / "a.bin").string()) == "base.bin");
    CHECK(fs::file_size(dir / "a.bin") < fs::file_size(dir / "base.bin"));
    const Checkpoint back = load_checkpoint((dir / "a.bin").string(), w.base.base);
    CHECK(back.epoch == 3);
    CHECK(forward(back, probe).logits == forward(lora, probe).logits);
    CHECK_THROWS(load_checkpoint((dir / "a.bin").string()));
    CHECK_THROWS(load_checkpoint((dir / "missing.bin").string()));
    fs::remove_all(dir);
}

TEST_CASE("LoRA run persists, reloads, resumes byte-identically") {
    const auto& w = mini();
    const CptInputs in = w.inputs();
    const StrategyConfig cfg = quick(StrategyKind::LoRA, 3);
    const fs::path a = scratch("run_a"), b = scratch("run_b");

    RunStore sa{a, "base.bin", nullptr};
    const RunRecord full = run_cpt(w.base, in, cfg, 77, &sa);
    REQUIRE(full.reports.size() == 4);
    REQUIRE(full.stats.size() == 3);
    CHECK_FALSE(full.reports[0].counts.has_value());
    // adapters start as the identity
    CHECK(full.reports[0].perplexity == doctest::Approx(sample_perplexity(w.base, in.samples)));
    CHECK(full.reports[3].perplexity < full.reports[0].perplexity);
    for (std::size_t t = 1; t < full.reports.size(); ++t) {
        CHECK(full.reports[t].epoch == static_cast<int>(t));
        CHECK(full.reports[t].counts.has_value());
    }

    // rerunning a complete run changes nothing
    const std::string report3 = slurp(a / "reports" / "epoch_3.json");
    const std::string stats = slurp(a / "stats.csv");
    run_cpt(w.base, in, cfg, 77, &sa);
    CHECK(slurp(a / "reports" / "epoch_3.json") == report3);

    // interrupted copy: the last epoch never finished writing its report
    fs::copy(a, b, fs::copy_options::recursive);
    fs::remove(b / "reports" / "epoch_3.json");
    fs::remove(b / "status.json");
    RunStore sb{b, "base.bin", nullptr};
    const RunRecord resumed = run_cpt(w.base, in, cfg, 77, &sb);
    CHECK(slurp(b / "reports" / "epoch_3.json") == report3);
    CHECK(slurp(b / "stats.csv") == stats);
    CHECK(slurp(b / "steps.csv") == slurp(a / "steps.csv"));
    CHECK(resumed.reports.size() == 4);

    // resume from epoch 1 as well
    fs::remove_all(b);
    fs::copy(a, b, fs::copy_options::recursive);
    for (int t : {2, 3}) {
        fs::remove(b / "reports" / ("epoch_" + std::to_string(t) + ".json"));
    }
    fs::remove(b / "status.json");
    run_cpt(w.base, in, cfg, 77, &sb);
    CHECK(slurp(b / "reports" / "epoch_3.json") == report3);

    const RunRecord loaded = load_run(a, &w.base);
    REQUIRE(loaded.reports.size() == 4);
    REQUIRE(loaded.checkpoints.size() == 4);
    CHECK(nlohmann::json(loaded.reports[2]).dump() == nlohmann::json(full.reports[2]).dump());
    CHECK(stats_csv(loaded) == stats);
    CHECK(forward(loaded.checkpoints[3], Tokens{1, 2, 3}).logits == forward(full.checkpoints[3], Tokens{1, 2, 3}).logits);

    StrategyConfig other = cfg;
    other.lr = 5e-3;
    CHECK_THROWS_AS(run_cpt(w.base, in, other, 77, &sa), ConfigError);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("curriculum run follows the previous report and stops when exhausted") {
    const auto& w = mini();
    const CptInputs in = w.inputs();
    StrategyConfig cfg = quick(StrategyKind::Curriculum, 3);
    const RunRecord run = run_cpt(w.base, in, cfg, 5);
    REQUIRE(run.slices.size() == run.stats.size());
    for (const CurriculumSlice& s : run.slices) {
        const EpochReport& prev = run.reports[static_cast<std::size_t>(s.epoch - 1)];
        std::set<int> want;
        for (const auto& e : prev.entities) {
            if (e.recall < cfg.theta) {
                want.insert(e.entity);
            }
        }
        CHECK(std::set<int>(s.included.begin(), s.included.end()) == want);
        CHECK(run.stats[static_cast<std::size_t>(s.epoch - 1)].samples == static_cast<int>(s.samples.size()));
    }

    // every entity already at or above theta = 0: nothing to train on
    cfg.theta = 0.0;
    const fs::path dir = scratch("run_cur");
    RunStore store{dir, "", nullptr};
    const RunRecord done = run_cpt(w.base, in, cfg, 5, &store);
    CHECK(done.exhausted);
    CHECK(done.reports.size() == 1);
    CHECK(done.stats.empty());
    const auto status = nlohmann::json::parse(slurp(dir / "status.json"));
    CHECK(status.at("exhausted").get<bool>());
    CHECK(status.at("epochs").get<int>() == 0);
    CHECK(load_run(dir, &w.base).reports.size() == 1);
    fs::remove_all(dir);
}

TEST_CASE("KL runs log total = CE + lambda * KL") {
    const auto& w = mini();
    const CptInputs in = w.inputs();
    for (auto kind : {StrategyKind::KLPretrain, StrategyKind::KLStepwise}) {
        const RunRecord run = run_cpt(w.base, in, quick(kind, 2), 8);
        REQUIRE_FALSE(run.steps.empty());
        bool saw_kl = false;
        for (const StepLog& s : run.steps) {
            CHECK(std::abs(s.total - (s.ce + s.lambda * s.kl)) <= 1e-6);
            CHECK(s.kl >= 0.0);
            saw_kl = saw_kl || s.kl > 0.0;
        }
        CHECK(saw_kl);
        CHECK(run.steps.front().lambda == StrategyConfig::defaults(kind).lambda);
    }
    // LoRA logs lambda 0
    const RunRecord lora = run_cpt(w.base, in, quick(StrategyKind::LoRA, 1), 8);
    for (const StepLog& s : lora.steps) {
        CHECK(s.lambda == 0.0);
        CHECK(s.kl == 0.0);
    }
}

TEST_CASE("runs are deterministic without a store") {
    const auto& w = mini();
    const CptInputs in = w.inputs(Variant::Tagged);
    const StrategyConfig cfg = quick(StrategyKind::StructuredAnnotation, 2);
    const RunRecord a = run_cpt(w.base, in, cfg, 3);
    const RunRecord b = run_cpt(w.base, in, cfg, 3);
    CHECK(stats_csv(a) == stats_csv(b));
    CHECK(nlohmann::json(a.reports.back()).dump() == nlohmann::json(b.reports.back()).dump());
    CHECK_THROWS_AS(run_cpt(a.checkpoints.back(), in, cfg, 3), ConfigError);
}
