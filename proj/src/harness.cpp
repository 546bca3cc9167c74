#include "cptlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cptlab/checkpoint_io.hpp"
#include "cptlab/plot.hpp"

namespace cptlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw ConfigError("cannot write " + path.string());
        }
        out << text;
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path.string());
    }
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// manifest

ExperimentManifest ExperimentManifest::defaults() {
    ExperimentManifest m;
    m.pretrain.max_epochs = 12;
    for (StrategyKind k : {StrategyKind::LoRA, StrategyKind::StructuredAnnotation, StrategyKind::Curriculum,
                           StrategyKind::KLPretrain, StrategyKind::KLStepwise}) {
        m.runs.push_back(StrategyConfig::defaults(k));
    }
    return m;
}

StrategyConfig ExperimentManifest::extended_config() const {
    StrategyConfig c = StrategyConfig::defaults(StrategyKind::LoRA);
    for (const StrategyConfig& r : runs) {
        if (r.kind == StrategyKind::LoRA) {
            c = r;
        }
    }
    c.epochs = extended_epochs;
    c.main_only = true;
    return c;
}

void ExperimentManifest::set_epochs(int epochs) {
    for (StrategyConfig& r : runs) {
        r.epochs = epochs;
    }
}

void ExperimentManifest::validate() const {
    corpus.validate();
    pretrain.validate();
    if (runs.empty()) {
        throw ConfigError("manifest: no runs");
    }
    std::vector<std::string> names;
    for (const StrategyConfig& r : runs) {
        r.validate();
        if (std::find(names.begin(), names.end(), r.run_name()) != names.end()) {
            throw ConfigError("manifest: duplicate run " + r.run_name());
        }
        names.push_back(r.run_name());
    }
    if (ood_per_task < 1) {
        throw ConfigError("manifest: ood_per_task must be >= 1");
    }
    if (extended && extended_epochs < 1) {
        throw ConfigError("manifest: extended_epochs must be >= 1");
    }
    if (circuits) {
        parse_strategy(circuit_run);
        if (sweep.k_fraction <= 0.0 || sweep.k_fraction > 1.0 || sweep.m < 1 || sweep.runs < 1 || sweep.hit_k < 1) {
            throw ConfigError("manifest: bad circuit sweep settings");
        }
    }
    for (double f : k_fractions) {
        if (f <= 0.0 || f > 1.0) {
            throw ConfigError("manifest: k fractions must lie in (0, 1]");
        }
    }
    for (const std::string& p : {knowledge_suite, ood_suite}) {
        if (!p.empty() && !fs::exists(p)) {
            throw ConfigError("manifest: missing suite file " + p);
        }
    }
}

void to_json(json& j, const ExperimentManifest& m) {
    j = json{{"corpus", m.corpus},
             {"model", {{"n_layers", m.model.n_layers},
                        {"n_heads", m.model.n_heads},
                        {"d_model", m.model.d_model},
                        {"d_mlp", m.model.d_mlp}}},
             {"pretrain", m.pretrain},
             {"runs", m.runs},
             {"ood_per_task", m.ood_per_task},
             {"rag", m.rag},
             {"circuits", m.circuits},
             {"extended", m.extended},
             {"extended_epochs", m.extended_epochs},
             {"circuit_run", m.circuit_run},
             {"sweep", {{"k_fraction", m.sweep.k_fraction},
                        {"m", m.sweep.m},
                        {"runs", m.sweep.runs},
                        {"hit_k", m.sweep.hit_k},
                        {"ablation", m.sweep.ablation == Ablation::Mean ? "mean" : "corrupted"}}},
             {"k_fractions", m.k_fractions},
             {"knowledge_suite", m.knowledge_suite},
             {"ood_suite", m.ood_suite},
             {"seed", m.seed}};
}

void from_json(const json& j, ExperimentManifest& m) {
    m = ExperimentManifest::defaults();
    if (j.contains("corpus")) {
        m.corpus = j.at("corpus").get<CorpusConfig>();
    }
    if (j.contains("model")) {
        const json& mj = j.at("model");
        m.model.n_layers = mj.value("n_layers", m.model.n_layers);
        m.model.n_heads = mj.value("n_heads", m.model.n_heads);
        m.model.d_model = mj.value("d_model", m.model.d_model);
        m.model.d_mlp = mj.value("d_mlp", m.model.d_mlp);
    }
    if (j.contains("pretrain")) {
        m.pretrain = j.at("pretrain").get<PretrainConfig>();
    }
    if (j.contains("runs")) {
        m.runs = j.at("runs").get<std::vector<StrategyConfig>>();
    }
    m.ood_per_task = j.value("ood_per_task", m.ood_per_task);
    m.rag = j.value("rag", m.rag);
    m.circuits = j.value("circuits", m.circuits);
    m.extended = j.value("extended", m.extended);
    m.extended_epochs = j.value("extended_epochs", m.extended_epochs);
    m.circuit_run = j.value("circuit_run", m.circuit_run);
    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        m.sweep.k_fraction = s.value("k_fraction", m.sweep.k_fraction);
        m.sweep.m = s.value("m", m.sweep.m);
        m.sweep.runs = s.value("runs", m.sweep.runs);
        m.sweep.hit_k = s.value("hit_k", m.sweep.hit_k);
        const std::string ab = s.value("ablation", std::string("corrupted"));
        if (ab != "corrupted" && ab != "mean") {
            throw ConfigError("manifest: ablation must be corrupted or mean");
        }
        m.sweep.ablation = ab == "mean" ? Ablation::Mean : Ablation::Corrupted;
    }
    m.k_fractions = j.value("k_fractions", m.k_fractions);
    m.knowledge_suite = j.value("knowledge_suite", m.knowledge_suite);
    m.ood_suite = j.value("ood_suite", m.ood_suite);
    m.seed = j.value("seed", m.seed);
}

ExperimentManifest load_manifest(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("manifest " + path.string() + ": " + e.what());
    }
    return j.get<ExperimentManifest>();
}

// ---------------------------------------------------------------------------
// world

WorldData build_world_data(const ExperimentManifest& m) {
    WorldData d;
    d.world = build_world(m.corpus, m.seed);
    const std::uint64_t bg_seed = derive_seed(m.seed, "background");
    d.v1 = generate_facts(d.world.roster, d.world.pools, FactsVersion::V1, m.seed);
    d.v2 = generate_facts(d.world.roster, d.world.pools, FactsVersion::V2, m.seed);
    d.roster_v1 = generate_documents(d.world.roster, d.v1, m.seed, m.corpus);
    d.revised = generate_documents(d.world.roster, d.v2, m.seed, m.corpus);
    assign_frequencies(d.world.roster, d.roster_v1);
    if (!d.world.background.empty()) {
        d.background_facts = generate_facts(d.world.background, d.world.pools, FactsVersion::V1, bg_seed);
        d.background = generate_documents(d.world.background, d.background_facts, bg_seed, m.corpus, 100000);
    }
    d.vocab = build_vocab(d.world);

    d.suites.knowledge = m.knowledge_suite.empty() ? build_knowledge_suite(d.world.roster, d.v2)
                                                   : read_jsonl<KnowledgeProbe>(m.knowledge_suite);
    d.suites.ood = m.ood_suite.empty() ? build_ood_suite(derive_seed(m.seed, "ood"), m.ood_per_task)
                                       : read_jsonl<OODProbe>(m.ood_suite);
    for (const Entity& e : d.world.roster) {
        if (e.freq_class == FreqClass::High) {
            const auto p = build_knowledge_probes(e, d.v1);
            d.stop_probes.insert(d.stop_probes.end(), p.begin(), p.end());
        }
    }

    d.model = m.model;
    d.model.vocab_size = static_cast<int>(d.vocab.size());
    d.model.max_seq_len = m.corpus.max_seq_len;
    d.model.seed = derive_seed(m.seed, "model");
    d.model.validate();
    return d;
}

// ---------------------------------------------------------------------------
// pipeline

namespace {

std::string num(double v) { return fmt_num(v); }

FileHeader file_header(const ExperimentManifest& m) {
    return FileHeader{kSchemaVersion, m.seed, config_hash(json(m.corpus))};
}

RagResult rag_result_from_json(const json& j) {
    RagResult r;
    r.probe_id = j.at("probe").get<std::string>();
    r.mode = parse_pool_mode(j.at("mode").get<std::string>());
    r.retrieved = j.at("retrieved").get<int>();
    r.gold_rank = j.at("gold_rank").get<int>();
    r.truncated = j.value("truncated", false);
    r.result.probe_id = r.probe_id;
    r.result.score = j.at("score").get<double>();
    r.result.generated = j.value("generated", std::string());
    return r;
}

std::vector<double> epochs_of(const RunSummary& s) {
    std::vector<double> x;
    for (const SummaryRow& r : s.rows) {
        x.push_back(r.epoch);
    }
    return x;
}

std::string entity_label(const Entity& e) {
    return e.name + (e.freq_class == FreqClass::High ? " (H)" : " (L)");
}

// Acquired / Retained / Forgotten events per frequency class over t >= 1.
struct ClassEvents {
    TransitionCounts high, low;
};

ClassEvents class_events(const RunRecord& run) {
    ClassEvents ev;
    for (std::size_t t = 1; t < run.reports.size(); ++t) {
        for (const EntityEpoch& e : run.reports[t].entities) {
            if (!e.label) {
                continue;
            }
            TransitionCounts& c = e.freq_class == FreqClass::High ? ev.high : ev.low;
            switch (*e.label) {
                case TransitionLabel::Acquired: ++c.acquired; break;
                case TransitionLabel::Retained: ++c.retained; break;
                case TransitionLabel::Forgotten: ++c.forgotten; break;
                case TransitionLabel::NotLearned: ++c.not_learned; break;
            }
        }
    }
    return ev;
}

}  // namespace

Pipeline::Pipeline(ExperimentManifest manifest, fs::path out, Log log)
    : manifest_(std::move(manifest)), out_(std::move(out)), log_(std::move(log)) {
    manifest_.validate();
    fs::create_directories(out_);
    const fs::path mpath = out_ / "manifest.json";
    const json mj = manifest_;
    if (fs::exists(mpath)) {
        json prior;
        try {
            prior = json::parse(read_file(mpath));
        } catch (const json::exception&) {
            throw ConfigError(mpath.string() + " is not valid JSON");
        }
        if (prior != mj) {
            throw ConfigError(out_.string() + " belongs to a different manifest or seed");
        }
    } else {
        write_file(mpath, mj.dump(2) + "\n");
    }
}

void Pipeline::note(const std::string& s) const {
    if (log_) {
        log_(s);
    }
}

const WorldData& Pipeline::data() {
    if (!data_) {
        data_ = build_world_data(manifest_);
    }
    return *data_;
}

void Pipeline::gen_corpus() {
    const WorldData& d = data();
    const FileHeader h = file_header(manifest_);
    const fs::path dir = out_ / "corpus";
    fs::create_directories(dir);
    write_facts((dir / "facts_v1.json").string(), d.v1, h);
    write_facts((dir / "facts_v2.json").string(), d.v2, h);
    write_corpus((dir / "roster_v1.jsonl").string(), d.roster_v1, h);
    write_corpus((dir / "roster_v2.jsonl").string(), d.revised, h);
    if (!d.background.documents.empty()) {
        write_corpus((dir / "background.jsonl").string(), d.background, h);
    }
    std::ostringstream roster;
    roster << "id,name,category,freq_class,supporting_docs,doc_frequency\n";
    for (const Entity& e : d.world.roster) {
        roster << e.id << ',' << e.name << ',' << to_string(e.category) << ',' << to_string(e.freq_class) << ','
               << e.supporting_docs << ',' << e.doc_frequency << '\n';
    }
    write_file(dir / "roster.csv", roster.str());
    fs::create_directories(out_ / "probes");
    write_jsonl<KnowledgeProbe>((out_ / "probes" / "knowledge.jsonl").string(), d.suites.knowledge);
    write_jsonl<OODProbe>((out_ / "probes" / "ood.jsonl").string(), d.suites.ood);
    note("corpus: " + std::to_string(d.revised.documents.size()) + " roster documents, " +
         std::to_string(d.background.documents.size()) + " background documents, vocabulary " +
         std::to_string(d.vocab.size()));
}

const Checkpoint& Pipeline::pretrain() {
    if (base_) {
        return *base_;
    }
    const WorldData& d = data();
    const fs::path path = out_ / "base" / "base.bin";
    if (fs::exists(path)) {
        base_ = load_checkpoint(path.string());
        if (!(base_->config == d.model)) {
            throw ConfigError(path.string() + " does not match the manifest's model");
        }
        return *base_;
    }
    fs::create_directories(path.parent_path());
    PretrainData pd{&d.world, &d.vocab, &d.roster_v1, &d.background, &d.background_facts, &d.suites.ood};
    std::ostringstream csv;
    csv << "epoch,ce,high_recall,ood\n";
    PretrainResult res = pretrain_base(pd, d.model, manifest_.pretrain, d.stop_probes, d.model.seed,
                                       [&](const PretrainEpochLog& l) {
                                           csv << l.epoch << ',' << num(l.ce) << ',' << num(l.high_recall) << ','
                                               << num(l.ood) << '\n';
                                           note("pretrain epoch " + std::to_string(l.epoch) + " ce " + num(l.ce) +
                                                " high recall " + num(l.high_recall) + " ood " + num(l.ood));
                                       });
    if (!res.reached) {
        note("warning: pre-training stop rule not met within " + std::to_string(manifest_.pretrain.max_epochs) +
             " epochs; continuing with the last checkpoint");
    }
    write_file(out_ / "base" / "pretrain.csv", csv.str());
    save_checkpoint(path.string(), res.base);
    base_ = std::move(res.base);
    return *base_;
}

fs::path Pipeline::run_dir(const StrategyConfig& c) const { return out_ / "runs" / c.run_name(); }

RunRecord Pipeline::run(const StrategyConfig& c) {
    const WorldData& d = data();
    const Checkpoint& base = pretrain();
    CptInputs in;
    in.vocab = &d.vocab;
    in.entities = &d.world.roster;
    in.suites = &d.suites;
    const Variant variant = c.kind == StrategyKind::StructuredAnnotation ? Variant::Tagged : Variant::Plain;
    in.samples = build_cpt_samples(d.revised, d.world.roster, d.vocab, manifest_.corpus.max_seq_len, variant,
                                   c.main_only);
    RunStore store{run_dir(c), "base/base.bin", log_};
    note("cpt " + c.run_name() + ": " + std::to_string(in.samples.size()) + " samples, " + std::to_string(c.epochs) +
         " epochs");
    RunRecord r = run_cpt(base, in, c, derive_seed(manifest_.seed, "cpt-" + c.run_name()), &store);
    run_tables(r);
    return r;
}

void Pipeline::cpt(const std::optional<std::string>& strategy) {
    bool matched = false;
    for (const StrategyConfig& c : manifest_.runs) {
        if (strategy && c.run_name() != *strategy && std::string(to_string(c.kind)) != *strategy) {
            continue;
        }
        matched = true;
        run(c);
    }
    if (!matched) {
        throw ConfigError("no run named " + strategy.value_or(""));
    }
}

void Pipeline::cpt_extended() { run(manifest_.extended_config()); }

RunRecord Pipeline::load(const StrategyConfig& c) {
    const Checkpoint& base = pretrain();
    return load_run(run_dir(c), &base);
}

void Pipeline::run_tables(const RunRecord& run) const {
    const Entities& roster = data_->world.roster;
    const fs::path dir = run_dir(run.config);
    const RunSummary s = summarize_run(run.reports, roster);
    write_file(dir / "summary.csv", summary_csv(s));
    write_file(dir / "heatmap.csv", heatmap_csv(s, roster));

    const std::vector<double> x = epochs_of(s);
    Panel ppl{"Perplexity", "epoch", x, {{"ppl", {}}}, {}, {}};
    Panel recall{"Factual recall", "epoch", x, {{"all", {}}, {"high", {}}, {"low", {}}}, 0.0, 1.0};
    Panel ood{"OOD accuracy", "epoch", x, {{"mean", {}}}, 0.0, 1.0};
    std::vector<std::string> tasks;
    for (const auto& [task, acc] : s.rows.front().ood) {
        tasks.push_back(task);
        ood.series.push_back({task, {}});
    }
    for (const SummaryRow& r : s.rows) {
        ppl.series[0].y.push_back(r.perplexity);
        recall.series[0].y.push_back(r.recall_all);
        recall.series[1].y.push_back(r.recall_high);
        recall.series[2].y.push_back(r.recall_low);
        ood.series[0].y.push_back(r.ood_mean);
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            const auto it = r.ood.find(tasks[i]);
            ood.series[i + 1].y.push_back(it == r.ood.end() ? std::nan("") : it->second);
        }
    }
    const std::vector<Panel> panels{ppl, recall, ood};
    write_file(dir / "figures" / "curves.svg", line_chart_svg(run.config.run_name(), panels));

    Heatmap h;
    h.title = run.config.run_name() + " recall per entity";
    int high = 0;
    for (std::size_t i = 0; i < s.entity_order.size(); ++i) {
        const Entity& e = find_entity(roster, s.entity_order[i]);
        h.rows.push_back(entity_label(e));
        high += e.freq_class == FreqClass::High;
    }
    for (double t : x) {
        h.cols.push_back(std::to_string(static_cast<int>(t)));
    }
    h.values = s.heat;
    h.split_after = high - 1;
    write_file(dir / "figures" / "heatmap.svg", heatmap_svg(h));
}

void Pipeline::probe() {
    const WorldData& d = data();
    const fs::path dir = out_ / "probes";
    write_jsonl<KnowledgeProbe>((dir / "knowledge.jsonl").string(), d.suites.knowledge);
    write_jsonl<OODProbe>((dir / "ood.jsonl").string(), d.suites.ood);
    const fs::path rpath = dir / "base_report.json";
    if (fs::exists(rpath)) {
        return;
    }
    const EpochReport r = epoch_cycle(pretrain(), d.vocab, d.world.roster, d.suites, nullptr);
    write_jsonl<ProbeResult>((dir / "base_knowledge_results.jsonl").string(), r.knowledge_results);
    write_jsonl<ProbeResult>((dir / "base_ood_results.jsonl").string(), r.ood_results);
    write_file(rpath, json(r).dump() + "\n");
    note("base model: recall " + num(r.recall_all) + " (high " + num(r.recall_high) + ", low " + num(r.recall_low) +
         "), OOD " + num(r.ood_mean));
}

void Pipeline::rag() {
    const WorldData& d = data();
    const Checkpoint& base = pretrain();
    const fs::path dir = out_ / "rag";
    const fs::path rpath = dir / "rag_results.jsonl";
    std::vector<RagResult> results;
    if (fs::exists(rpath)) {
        std::istringstream in(read_file(rpath));
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) {
                results.push_back(rag_result_from_json(json::parse(line)));
            }
        }
    } else {
        std::string lines;
        for (PoolMode mode : {PoolMode::All, PoolMode::Main, PoolMode::Gold}) {
            const RetrievalPool pool = build_index(d.revised, mode);
            for (const KnowledgeProbe& p : d.suites.knowledge) {
                RagResult r = rag_answer(base, d.vocab, p, pool, d.revised.main_document(p.entity).id);
                lines += rag_result_json(r).dump() + "\n";
                results.push_back(std::move(r));
            }
            note("rag " + std::string(to_string(mode)) + " done");
        }
        write_file(rpath, lines);
    }

    std::vector<RagRow> rows;
    // best CPT checkpoint over the strategy runs that exist
    std::optional<EpochReport> best;
    std::string best_from;
    for (const StrategyConfig& c : manifest_.runs) {
        const StrategyConfig& rc = c;
        if (!fs::exists(run_dir(rc) / "status.json")) {
            continue;
        }
        const RunRecord run = load(rc);
        for (std::size_t t = 1; t < run.reports.size(); ++t) {
            if (!best || run.reports[t].recall_all > best->recall_all) {
                best = run.reports[t];
                best_from = rc.run_name() + " epoch " + std::to_string(t);
            }
        }
    }
    if (best) {
        rows.push_back(report_row("Best", *best));
        note("best CPT checkpoint: " + best_from);
    }
    for (PoolMode mode : {PoolMode::All, PoolMode::Main, PoolMode::Gold}) {
        std::vector<RagResult> subset;
        for (const RagResult& r : results) {
            if (r.mode == mode) {
                subset.push_back(r);
            }
        }
        rows.push_back(rag_row("RAG-" + std::string(to_string(mode)), subset, d.suites.knowledge, d.world.roster));
    }
    write_file(dir / "rag_summary.csv", rag_summary_csv(rows));
}

void Pipeline::circuits() {
    const WorldData& d = data();
    const fs::path dir = out_ / "circuits";
    const StrategyKind kind = parse_strategy(manifest_.circuit_run);
    std::optional<StrategyConfig> cfg;
    for (const StrategyConfig& c : manifest_.runs) {
        if (c.kind == kind && !c.main_only) {
            cfg = c;
        }
    }
    if (!cfg) {
        throw ConfigError("circuit run " + manifest_.circuit_run + " is not in the manifest");
    }
    if (fs::exists(dir / "jaccard.csv") && fs::exists(dir / "hit_at_10.csv") && fs::exists(dir / "k_sweep.csv")) {
        return;
    }
    const RunRecord r = fs::exists(run_dir(*cfg) / "status.json") ? load(*cfg) : run(*cfg);
    const CircuitSweep s = circuit_sweep(r, d.world.roster, d.v2, d.vocab, manifest_.sweep, manifest_.seed, log_);
    const AttributionGraph graph = AttributionGraph::for_model(r.checkpoints.front().config);
    for (const Circuit& c : s.circuits) {
        write_file(dir / ("epoch_" + std::to_string(c.epoch) + ".json"), circuit_json(c, graph).dump() + "\n");
    }

    const auto prompts = make_circuit_prompts(d.world.roster, d.v2, d.vocab, derive_seed(manifest_.seed, "circuit-run-0"));
    std::ostringstream ks;
    ks << "checkpoint,fraction,k,hit,model_hit\n";
    for (std::size_t t : {std::size_t{0}, r.checkpoints.size() - 1}) {
        const double model = model_hit_at_k(r.checkpoints[t], prompts, manifest_.sweep.hit_k);
        for (const KSweepRow& row : k_sweep(r.checkpoints[t], prompts, manifest_.k_fractions, manifest_.sweep.m,
                                            manifest_.sweep.hit_k)) {
            ks << t << ',' << num(row.fraction) << ',' << row.k << ',' << num(row.hit) << ',' << num(model) << '\n';
        }
        if (r.checkpoints.size() == 1) {
            break;
        }
    }
    write_file(dir / "k_sweep.csv", ks.str());

    std::vector<double> x;
    for (std::size_t t = 0; t < s.jaccard.size(); ++t) {
        x.push_back(static_cast<double>(t));
    }
    const std::vector<Panel> jp{Panel{"Jaccard(C_0, C_t)", "epoch", x, {{"jaccard", s.jaccard}}, 0.0, 1.0},
                                Panel{"Hit@" + std::to_string(manifest_.sweep.hit_k), "epoch", x,
                                      {{"circuit C_t on M_t", s.own_hit}, {"model M_t", s.model_hit}}, 0.0, 1.0}};
    write_file(dir / "figures" / "jaccard.svg", line_chart_svg("circuit stability", jp));
    Heatmap h;
    h.title = "Hit@" + std::to_string(manifest_.sweep.hit_k) + " of circuits across checkpoints";
    h.rows = s.hit_rows;
    h.rows.push_back("Model");
    h.values = s.hit_table;
    h.values.push_back(s.model_hit);
    for (std::size_t t = 0; t < s.model_hit.size(); ++t) {
        h.cols.push_back("M" + std::to_string(t));
    }
    write_file(dir / "figures" / "hit_at_k.svg", heatmap_svg(h));
    write_file(dir / "hit_at_10.csv", hit_table_csv(s));
    write_file(dir / "jaccard.csv", jaccard_csv(s));
    note("circuits: best epoch " + std::to_string(s.best_epoch) + ", J(C0,C1) " +
         (s.jaccard.size() > 1 ? num(s.jaccard[1]) : std::string("n/a")));
}

void Pipeline::report() {
    data();
    std::vector<RunRecord> runs;
    for (const StrategyConfig& c : manifest_.runs) {
        const StrategyConfig& rc = c;
        if (fs::exists(run_dir(rc) / "status.json")) {
            runs.push_back(load(rc));
        }
    }
    std::optional<RunRecord> extended;
    const StrategyConfig ec = manifest_.extended_config();
    if (fs::exists(run_dir(ec) / "status.json")) {
        extended = load(ec);
    }
    if (runs.empty() && !extended) {
        throw ConfigError("report: no complete runs under " + (out_ / "runs").string());
    }
    std::vector<const RunRecord*> all;
    for (const RunRecord& r : runs) {
        all.push_back(&r);
    }
    if (extended) {
        all.push_back(&*extended);
    }
    for (const RunRecord* r : all) {
        run_tables(*r);
    }

    std::ostringstream os;
    os << "strategy,lambda,epochs,ppl_0,ppl_T,recall_0,peak_recall,peak_epoch,peak_gain,final_recall,ood_0,ood_T,"
          "d_ood,acquired_high,retained_high,forgotten_high,acquired_low,retained_low,forgotten_low,"
          "distortion_epochs,exhausted\n";
    for (const RunRecord* r : all) {
        const auto& rep = r->reports;
        std::size_t peak = 0;
        for (std::size_t t = 1; t < rep.size(); ++t) {
            if (peak == 0 || rep[t].recall_all > rep[peak].recall_all) {
                peak = t;
            }
        }
        int distortions = 0;
        for (const EpochReport& e : rep) {
            distortions += e.distortion;
        }
        const ClassEvents ev = class_events(*r);
        os << r->config.run_name() << ',' << num(uses_kl(r->config.kind) ? r->config.lambda : 0.0) << ','
           << rep.size() - 1 << ',' << num(rep.front().perplexity) << ',' << num(rep.back().perplexity) << ','
           << num(rep.front().recall_all) << ',' << num(rep[peak].recall_all) << ',' << peak << ','
           << num(rep[peak].recall_all - rep.front().recall_all) << ',' << num(rep.back().recall_all) << ','
           << num(rep.front().ood_mean) << ',' << num(rep.back().ood_mean) << ','
           << num(rep.back().ood_mean - rep.front().ood_mean) << ',' << ev.high.acquired << ',' << ev.high.retained
           << ',' << ev.high.forgotten << ',' << ev.low.acquired << ',' << ev.low.retained << ',' << ev.low.forgotten
           << ',' << distortions << ',' << (r->exhausted ? 1 : 0) << '\n';
    }
    write_file(out_ / "report" / "strategies.csv", os.str());

    if (!runs.empty()) {
        std::vector<double> x;
        std::size_t longest = 0;
        for (const RunRecord& r : runs) {
            longest = std::max(longest, r.reports.size());
        }
        for (std::size_t t = 0; t < longest; ++t) {
            x.push_back(static_cast<double>(t));
        }
        Panel ppl{"Perplexity", "epoch", x, {}, {}, {}};
        Panel recall{"Factual recall", "epoch", x, {}, 0.0, 1.0};
        Panel ood{"OOD accuracy", "epoch", x, {}, 0.0, 1.0};
        for (const RunRecord& r : runs) {
            Series sp{r.config.run_name(), {}}, sr{r.config.run_name(), {}}, so{r.config.run_name(), {}};
            for (std::size_t t = 0; t < longest; ++t) {
                const bool have = t < r.reports.size();
                sp.y.push_back(have ? r.reports[t].perplexity : std::nan(""));
                sr.y.push_back(have ? r.reports[t].recall_all : std::nan(""));
                so.y.push_back(have ? r.reports[t].ood_mean : std::nan(""));
            }
            ppl.series.push_back(sp);
            recall.series.push_back(sr);
            ood.series.push_back(so);
        }
        const std::vector<Panel> panels{ppl, recall, ood};
        write_file(out_ / "report" / "figures" / "strategies.svg", line_chart_svg("strategies", panels));
    }
    note("report written to " + (out_ / "report").string());
}

void Pipeline::all() {
    gen_corpus();
    pretrain();
    probe();
    cpt();
    if (manifest_.extended) {
        cpt_extended();
    }
    if (manifest_.rag) {
        rag();
    }
    if (manifest_.circuits) {
        circuits();
    }
    report();
}

}  // namespace cptlab
