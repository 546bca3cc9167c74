#include "doctest.h"

#include <fstream>
#include <set>
#include <sstream>

#include "cptlab/harness.hpp"
#include "cptlab/plot.hpp"

using namespace cptlab;
namespace fs = std::filesystem;

namespace {

// Tiny world and model so the whole pipeline runs in about a second.
ExperimentManifest tiny_manifest() {
    ExperimentManifest m = ExperimentManifest::defaults();
    m.corpus.per_cell = 2;
    m.corpus.high_supporting = 3;
    m.corpus.low_supporting = 1;
    m.corpus.background_per_cell = 2;
    m.corpus.reading_per_cell = 2;
    m.corpus.max_seq_len = 96;
    m.model.n_layers = 1;
    m.model.n_heads = 2;
    m.model.d_model = 16;
    m.model.d_mlp = 32;
    m.pretrain.max_epochs = 1;
    m.pretrain.reading_examples = 10;
    m.pretrain.choice_examples = 10;
    m.ood_per_task = 3;
    m.extended_epochs = 3;
    m.k_fractions = {0.1, 1.0};
    m.sweep.runs = 2;
    m.sweep.m = 5;
    m.set_epochs(2);
    return m;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("cptlab_test_harness_" + name);
    fs::remove_all(p);
    return p;
}

// Relative path -> bytes of every CSV/JSONL file under `dir`.
std::map<std::string, std::string> tables(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        const std::string ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".csv" || ext == ".jsonl" || ext == ".svg")) {
            out[fs::relative(e.path(), dir).string()] = read_file(e.path());
        }
    }
    return out;
}

std::string first_column(const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    std::getline(in, line);
    while (std::getline(in, line)) {
        out += line.substr(0, line.find(',')) + ";";
    }
    return out;
}

}  // namespace

TEST_CASE("default manifest") {
    const ExperimentManifest m = ExperimentManifest::defaults();
    REQUIRE(m.runs.size() == 5);
    std::set<std::string> names;
    for (const StrategyConfig& r : m.runs) {
        names.insert(r.run_name());
        CHECK(r.epochs == 10);
        if (r.kind == StrategyKind::KLPretrain) {
            CHECK(r.lambda == 10.0);
        }
        if (r.kind == StrategyKind::KLStepwise) {
            CHECK(r.lambda == 1.0);
        }
    }
    CHECK(names.size() == 5);
    CHECK(m.model.n_layers == 4);
    CHECK(m.corpus.per_cell * 4 == 20);
    const StrategyConfig ext = m.extended_config();
    CHECK(ext.epochs == 100);
    CHECK(ext.main_only);
    CHECK(ext.kind == StrategyKind::LoRA);
    CHECK_NOTHROW(m.validate());
}

TEST_CASE("manifest json round-trip and validation") {
    ExperimentManifest m = tiny_manifest();
    m.sweep.ablation = Ablation::Mean;
    m.seed = 99;
    const nlohmann::json j = m;
    const ExperimentManifest back = j.get<ExperimentManifest>();
    CHECK(nlohmann::json(back) == j);
    CHECK(back.sweep.ablation == Ablation::Mean);

    // a partial manifest fills in defaults; kl-pretrain lambda defaults to 10
    const auto partial = nlohmann::json::parse(R"({"runs":[{"kind":"kl-pretrain"}],"seed":3})").get<ExperimentManifest>();
    REQUIRE(partial.runs.size() == 1);
    CHECK(partial.runs[0].lambda == 10.0);
    CHECK(partial.seed == 3);
    CHECK(partial.corpus == CorpusConfig{});

    ExperimentManifest bad = tiny_manifest();
    bad.ood_suite = "/nonexistent/ood.jsonl";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_manifest();
    bad.runs.push_back(bad.runs.front());
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_manifest();
    bad.k_fractions = {0.0};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(nlohmann::json::parse(R"({"sweep":{"ablation":"zero"}})").get<ExperimentManifest>(), ConfigError);

    const fs::path dir = scratch("manifest");
    fs::create_directories(dir);
    write_file(dir / "broken.json", "{ not json");
    CHECK_THROWS_AS(load_manifest(dir / "broken.json"), ConfigError);
}

TEST_CASE("svg charts are deterministic and carry no timestamps") {
    Panel a{"ppl", "epoch", {0, 1, 2}, {{"x", {3.0, 2.0, 1.5}}}, {}, {}};
    Panel b{"recall", "epoch", {0, 1, 2}, {{"all", {0.1, std::nan(""), 0.3}}, {"high", {0.2, 0.4, 0.5}}}, 0.0, 1.0};
    const std::vector<Panel> panels{a, b, a};
    const std::string svg = line_chart_svg("t & <u>", panels);
    CHECK(svg == line_chart_svg("t & <u>", panels));
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("t &amp; &lt;u&gt;") != std::string::npos);
    // one frame per panel
    std::size_t frames = 0;
    for (std::size_t p = svg.find("fill=\"none\" stroke=\"#333\""); p != std::string::npos;
         p = svg.find("fill=\"none\" stroke=\"#333\"", p + 1)) {
        ++frames;
    }
    CHECK(frames == 3);
    CHECK(svg.find("date") == std::string::npos);
    CHECK_THROWS_AS(line_chart_svg("x", std::span<const Panel>{}), ConfigError);

    Heatmap h{"h", {"r1", "r2"}, {"0", "1"}, {{0.0, 1.0}, {0.5, std::nan("")}}, 0.0, 1.0, 0};
    const std::string hs = heatmap_svg(h);
    CHECK(hs.find("#ffffff") != std::string::npos);  // lo
    CHECK(hs.find("#08306b") != std::string::npos);  // hi
    CHECK(hs.find("#eeeeee") != std::string::npos);  // missing
    h.values[1].pop_back();
    CHECK_THROWS_AS(heatmap_svg(h), ConfigError);
}

TEST_CASE("pipeline: layout, reproducibility, idempotent report, resume") {
    const ExperimentManifest m = tiny_manifest();
    const fs::path a = scratch("a"), b = scratch("b");
    Pipeline(m, a).all();
    Pipeline(m, b).all();

    for (const char* f : {"manifest.json", "base/base.bin", "corpus/roster_v1.jsonl", "corpus/roster_v2.jsonl",
                          "probes/knowledge.jsonl", "probes/ood.jsonl", "rag/rag_results.jsonl",
                          "rag/rag_summary.csv", "circuits/epoch_0.json", "circuits/jaccard.csv",
                          "circuits/hit_at_10.csv", "circuits/k_sweep.csv", "report/strategies.csv",
                          "report/figures/strategies.svg"}) {
        CAPTURE(f);
        CHECK(fs::exists(a / f));
    }
    for (const StrategyConfig& c : m.runs) {
        CAPTURE(c.run_name());
        CHECK(fs::exists(a / "runs" / c.run_name() / "summary.csv"));
        CHECK(fs::exists(a / "runs" / c.run_name() / "figures" / "curves.svg"));
        CHECK(fs::exists(a / "runs" / c.run_name() / "figures" / "heatmap.svg"));
    }
    CHECK(fs::exists(a / "runs" / "lora-extended" / "status.json"));
    CHECK(first_column(read_file(a / "rag" / "rag_summary.csv")) == "Best;RAG-All;RAG-Main;RAG-Gold;");

    const auto ta = tables(a);
    CHECK(ta == tables(b));
    CHECK(read_file(a / "base" / "base.bin") == read_file(b / "base" / "base.bin"));

    // report is a pure function of the finished runs
    Pipeline(m, a).report();
    CHECK(tables(a) == ta);

    // drop the last epoch of one run and resume
    const fs::path lora = a / "runs" / "lora";
    fs::remove(lora / "status.json");
    for (const char* f : {"checkpoints/epoch_2.bin", "checkpoints/epoch_2.opt", "reports/epoch_2.json",
                          "train/epoch_2.json"}) {
        fs::remove(lora / f);
    }
    Pipeline(m, a).cpt("lora");
    CHECK(read_file(lora / "checkpoints" / "epoch_2.bin") == read_file(b / "runs" / "lora" / "checkpoints" / "epoch_2.bin"));
    CHECK(tables(a) == ta);

    // a directory is bound to its manifest
    ExperimentManifest other = m;
    other.seed = m.seed + 1;
    CHECK_THROWS_AS(Pipeline(other, a), ConfigError);
    CHECK_THROWS_AS(Pipeline(m, a).cpt("no-such-strategy"), ConfigError);
}

TEST_CASE("optional sections are omitted, not rendered empty") {
    ExperimentManifest m = tiny_manifest();
    m.rag = false;
    m.circuits = false;
    m.extended = false;
    const fs::path dir = scratch("optional");
    Pipeline(m, dir).all();
    CHECK(!fs::exists(dir / "rag"));
    CHECK(!fs::exists(dir / "circuits"));
    CHECK(!fs::exists(dir / "runs" / "lora-extended"));
    CHECK(read_file(dir / "report" / "strategies.csv").find("extended") == std::string::npos);
    CHECK_THROWS_AS(Pipeline(m, scratch("empty")).report(), ConfigError);
}

TEST_CASE("external suites replace the generated ones") {
    ExperimentManifest m = tiny_manifest();
    const WorldData generated = build_world_data(m);
    const fs::path dir = scratch("suites");
    fs::create_directories(dir);
    std::vector<OODProbe> ood(generated.suites.ood.begin(), generated.suites.ood.begin() + 2);
    write_jsonl<OODProbe>((dir / "ood.jsonl").string(), ood);
    m.ood_suite = (dir / "ood.jsonl").string();
    const WorldData d = build_world_data(m);
    REQUIRE(d.suites.ood.size() == 2);
    CHECK(suite_hash(std::span<const OODProbe>(d.suites.ood)) == suite_hash(std::span<const OODProbe>(ood)));
    CHECK(d.suites.knowledge.size() == generated.suites.knowledge.size());
}
