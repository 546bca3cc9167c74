#include "cptlab/train.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cptlab/checkpoint_io.hpp"

namespace cptlab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::array<std::string_view, 5> kStrategyNames{"lora", "structured-annotation", "curriculum",
                                                         "kl-pretrain", "kl-stepwise"};

}  // namespace

std::string_view to_string(StrategyKind k) { return kStrategyNames[static_cast<std::size_t>(k)]; }

StrategyKind parse_strategy(std::string_view s) {
    for (std::size_t i = 0; i < kStrategyNames.size(); ++i) {
        if (kStrategyNames[i] == s) {
            return static_cast<StrategyKind>(i);
        }
    }
    throw ConfigError("unknown strategy '" + std::string(s) +
                      "' (expected lora, structured-annotation, curriculum, kl-pretrain or kl-stepwise)");
}

bool uses_kl(StrategyKind k) { return k == StrategyKind::KLPretrain || k == StrategyKind::KLStepwise; }

StrategyConfig StrategyConfig::defaults(StrategyKind kind) {
    StrategyConfig c;
    c.kind = kind;
    if (kind == StrategyKind::KLPretrain) {
        c.lambda = 10.0;
    } else if (kind == StrategyKind::KLStepwise) {
        c.lambda = 1.0;
    }
    return c;
}

void StrategyConfig::validate() const {
    if (!(lambda >= 0.0)) {
        throw ConfigError("lambda must be >= 0");
    }
    if (!uses_kl(kind) && lambda != 0.0) {
        throw ConfigError("lambda is only meaningful for the KL strategies");
    }
    if (!(theta >= 0.0 && theta <= 1.0)) {
        throw ConfigError("theta must lie in [0, 1]");
    }
    if (!(lr >= 0.0) || batch_size < 1 || epochs < 1) {
        throw ConfigError("invalid lr, batch_size or epochs");
    }
    if (adapter.rank < 1) {
        throw ConfigError("adapter rank must be >= 1");
    }
}

std::string StrategyConfig::run_name() const {
    return std::string(to_string(kind)) + (main_only ? "-extended" : "");
}

void to_json(json& j, const StrategyConfig& c) {
    j = json{{"kind", to_string(c.kind)}, {"lambda", c.lambda},   {"theta", c.theta},
             {"lr", c.lr},                {"batch_size", c.batch_size}, {"epochs", c.epochs},
             {"weight_decay", c.weight_decay}, {"adapter", c.adapter}, {"main_only", c.main_only}};
}

void from_json(const json& j, StrategyConfig& c) {
    c = StrategyConfig::defaults(parse_strategy(j.at("kind").get<std::string>()));
    c.lambda = j.value("lambda", c.lambda);
    c.theta = j.value("theta", c.theta);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    if (j.contains("adapter")) {
        c.adapter = j.at("adapter").get<AdapterConfig>();
    }
    c.main_only = j.value("main_only", c.main_only);
}

// ---------------------------------------------------------------------------

std::vector<CptSample> build_cpt_samples(const Corpus& corpus, const Entities& entities, const Vocab& vocab,
                                         int max_seq_len, Variant variant, bool main_only) {
    Corpus picked;
    picked.version = corpus.version;
    for (const Document& d : corpus.documents) {
        if (!main_only || d.is_main) {
            picked.documents.push_back(d);
        }
    }
    std::map<int, const Document*> by_id;
    for (const Document& d : picked.documents) {
        by_id[d.id] = &d;
    }
    std::vector<CptSample> out;
    for (const TrainingSample& s : segment_corpus(picked, entities, max_seq_len, variant)) {
        out.push_back(CptSample{Sequence{vocab.encode(s.words), 1}, by_id.at(s.document_id)->owner, s.document_id});
    }
    return out;
}

CurriculumSlice select_curriculum(const EpochReport& prev, std::span<const CptSample> samples, double theta,
                                  int epoch) {
    CurriculumSlice s;
    s.epoch = epoch;
    std::set<int> keep;
    for (const EntityEpoch& e : prev.entities) {
        if (e.recall < theta) {
            s.included.push_back(e.entity);
            keep.insert(e.entity);
        } else {
            s.excluded.push_back(e.entity);
        }
    }
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (keep.count(samples[i].owner)) {
            s.samples.push_back(i);
        }
    }
    return s;
}

EpochOutcome cpt_epoch(const Checkpoint& ckpt, std::span<const CptSample> samples, const StrategyConfig& config,
                       AdamW& opt, const Checkpoint* ref, int epoch, std::uint64_t seed) {
    if (!ckpt.adapters) {
        throw ConfigError("cpt_epoch: adapters must be attached");
    }
    if (uses_kl(config.kind) && ref == nullptr) {
        throw ConfigError("cpt_epoch: KL strategy without a reference checkpoint");
    }
    const auto t0 = std::chrono::steady_clock::now();
    EpochOutcome out;
    out.ckpt = ckpt;
    out.ckpt.epoch = epoch;
    Gradients grads = Gradients::for_checkpoint(out.ckpt);
    const std::vector<Matrix*> params = trainable_tensors(*out.ckpt.adapters);
    const std::vector<const Matrix*> gparams = gradient_tensors(grads);

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng(derive_seed(seed, "cpt-epoch-" + std::to_string(epoch)));
    rng.shuffle(order);

    const double lambda = uses_kl(config.kind) ? config.lambda : 0.0;
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);
    double ce_sum = 0.0, kl_sum = 0.0, total_sum = 0.0;
    int step = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
        std::vector<Sequence> batch;
        for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
            batch.push_back(samples[order[i]].seq);
        }
        grads.zero();
        const StepLoss loss = objective_and_grad(out.ckpt, uses_kl(config.kind) ? ref : nullptr, lambda, batch, grads);
        if (!std::isfinite(loss.total)) {
            throw RunError("CPT diverged: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + " (ce " + std::to_string(loss.ce) + ", kl " +
                           std::to_string(loss.kl) + ")");
        }
        opt.step(params, gparams);
        out.steps.push_back(StepLog{epoch, step, loss.ce, loss.kl, lambda, loss.total});
        ce_sum += loss.ce;
        kl_sum += loss.kl;
        total_sum += loss.total;
        ++step;
    }
    out.stats.epoch = epoch;
    out.stats.steps = step;
    out.stats.samples = static_cast<int>(samples.size());
    if (step > 0) {
        out.stats.ce = ce_sum / step;
        out.stats.kl = kl_sum / step;
        out.stats.total = total_sum / step;
    }
    out.stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.ckpt.stats.ce_loss = out.stats.ce;
    out.ckpt.stats.kl_term = out.stats.kl;
    return out;
}

double sample_perplexity(const Checkpoint& ckpt, std::span<const CptSample> samples) {
    std::vector<Sequence> seqs;
    seqs.reserve(samples.size());
    for (const CptSample& s : samples) {
        seqs.push_back(s.seq);
    }
    return perplexity(ckpt, seqs);
}

// ---------------------------------------------------------------------------
// persistence

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10f", v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
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

json read_json(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path.string());
    }
    return json::parse(in);
}

json slice_json(const CurriculumSlice& s) {
    return json{{"epoch", s.epoch}, {"included", s.included}, {"excluded", s.excluded},
                {"samples", s.samples.size()}};
}

json epoch_json(const EpochStats& s, const std::vector<StepLog>& steps, const CurriculumSlice* slice) {
    json st = json::array();
    for (const StepLog& l : steps) {
        st.push_back({l.step, l.ce, l.kl, l.lambda, l.total});
    }
    json j{{"epoch", s.epoch}, {"ce", s.ce},       {"kl", s.kl},           {"total", s.total},
           {"perplexity", s.perplexity}, {"steps", s.steps}, {"samples", s.samples}, {"step_log", st}};
    j["slice"] = slice ? slice_json(*slice) : json(nullptr);
    return j;
}

void read_epoch_json(const json& j, RunRecord& run, std::vector<CptSample> const* samples, const EpochReport* prev) {
    EpochStats s;
    s.epoch = j.at("epoch").get<int>();
    s.ce = j.at("ce").get<double>();
    s.kl = j.at("kl").get<double>();
    s.total = j.at("total").get<double>();
    s.perplexity = j.at("perplexity").get<double>();
    s.steps = j.at("steps").get<int>();
    s.samples = j.at("samples").get<int>();
    run.stats.push_back(s);
    for (const auto& l : j.at("step_log")) {
        run.steps.push_back(StepLog{s.epoch, l.at(0).get<int>(), l.at(1).get<double>(), l.at(2).get<double>(),
                                    l.at(3).get<double>(), l.at(4).get<double>()});
    }
    if (!j.at("slice").is_null()) {
        const auto& sl = j.at("slice");
        CurriculumSlice c;
        if (samples != nullptr && prev != nullptr) {
            c = select_curriculum(*prev, *samples, run.config.theta, s.epoch);
        } else {
            c.epoch = s.epoch;
            c.included = sl.at("included").get<std::vector<int>>();
            c.excluded = sl.at("excluded").get<std::vector<int>>();
        }
        run.slices.push_back(std::move(c));
    }
}

fs::path ckpt_path(const fs::path& dir, int t) { return dir / "checkpoints" / ("epoch_" + std::to_string(t) + ".bin"); }
fs::path opt_path(const fs::path& dir, int t) { return dir / "checkpoints" / ("epoch_" + std::to_string(t) + ".opt"); }
fs::path report_path(const fs::path& dir, int t) { return dir / "reports" / ("epoch_" + std::to_string(t) + ".json"); }
fs::path train_path(const fs::path& dir, int t) { return dir / "train" / ("epoch_" + std::to_string(t) + ".json"); }

bool epoch_complete(const fs::path& dir, int t) {
    if (t == 0) {
        return fs::exists(report_path(dir, 0));
    }
    return fs::exists(ckpt_path(dir, t)) && fs::exists(opt_path(dir, t)) && fs::exists(train_path(dir, t)) &&
           fs::exists(report_path(dir, t));
}

json run_config_json(const StrategyConfig& config, std::uint64_t seed, const std::string& base_ref) {
    return json{{"strategy", config}, {"seed", seed}, {"base_ref", base_ref}};
}

void write_tables(const RunStore& store, const RunRecord& run) {
    write_text(store.dir / "stats.csv", stats_csv(run));
    write_text(store.dir / "steps.csv", steps_csv(run));
    if (run.config.kind == StrategyKind::Curriculum) {
        write_text(store.dir / "curriculum.csv", curriculum_csv(run));
    }
}

}  // namespace

std::string stats_csv(const RunRecord& run) {
    std::ostringstream os;
    os << "epoch,ce,kl,lambda,total,ppl,steps,samples\n";
    const double lambda = uses_kl(run.config.kind) ? run.config.lambda : 0.0;
    if (!run.reports.empty()) {
        os << 0 << ",,,," << "," << num(run.reports[0].perplexity) << ",0,0\n";
    }
    for (const EpochStats& s : run.stats) {
        os << s.epoch << ',' << num(s.ce) << ',' << num(s.kl) << ',' << num(lambda) << ',' << num(s.total) << ','
           << num(s.perplexity) << ',' << s.steps << ',' << s.samples << '\n';
    }
    return os.str();
}

std::string steps_csv(const RunRecord& run) {
    std::ostringstream os;
    os << "epoch,step,ce,kl,lambda,total\n";
    for (const StepLog& l : run.steps) {
        os << l.epoch << ',' << l.step << ',' << num(l.ce) << ',' << num(l.kl) << ',' << num(l.lambda) << ','
           << num(l.total) << '\n';
    }
    return os.str();
}

std::string curriculum_csv(const RunRecord& run) {
    std::ostringstream os;
    os << "epoch,included,excluded,samples\n";
    auto join = [](const std::vector<int>& v) {
        std::string s;
        for (int x : v) {
            s += (s.empty() ? "" : " ") + std::to_string(x);
        }
        return s;
    };
    for (const CurriculumSlice& s : run.slices) {
        os << s.epoch << ',' << join(s.included) << ',' << join(s.excluded) << ',' << s.samples.size() << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------

RunRecord run_cpt(const Checkpoint& base, const CptInputs& inputs, const StrategyConfig& config, std::uint64_t seed,
                  const RunStore* store) {
    config.validate();
    if (base.adapters) {
        throw ConfigError("run_cpt: base must not carry adapters");
    }
    if (inputs.samples.empty()) {
        throw ConfigError("run_cpt: no training samples");
    }
    auto note = [&](const std::string& msg) {
        if (store && store->log) {
            store->log(msg);
        }
    };

    RunRecord run;
    run.config = config;
    run.seed = seed;

    const json cfg = run_config_json(config, seed, store ? store->base_ref : "");
    if (store) {
        fs::create_directories(store->dir / "checkpoints");
        fs::create_directories(store->dir / "reports");
        fs::create_directories(store->dir / "train");
        const fs::path cfg_path = store->dir / "config.json";
        if (fs::exists(cfg_path)) {
            if (read_json(cfg_path) != cfg) {
                throw ConfigError(store->dir.string() + " holds a run with a different configuration");
            }
        } else {
            write_text(cfg_path, cfg.dump(2) + "\n");
        }
    }

    // t = 0: base with freshly attached (identity) adapters
    Checkpoint current = attach_adapters(base, config.adapter, derive_seed(seed, "lora"));
    current.epoch = 0;
    AdamW opt(AdamWConfig{config.lr, 0.9, 0.999, 1e-8, config.weight_decay});

    int resumed_to = 0;
    if (store && epoch_complete(store->dir, 0)) {
        run.reports.push_back(read_json(report_path(store->dir, 0)).get<EpochReport>());
        current.stats.perplexity = run.reports[0].perplexity;
        while (resumed_to < config.epochs && epoch_complete(store->dir, resumed_to + 1)) {
            ++resumed_to;
        }
        run.checkpoints.push_back(current);
        for (int t = 1; t <= resumed_to; ++t) {
            const EpochReport* prev = &run.reports.back();
            read_epoch_json(read_json(train_path(store->dir, t)), run, &inputs.samples, prev);
            run.reports.push_back(read_json(report_path(store->dir, t)).get<EpochReport>());
            run.checkpoints.push_back(load_checkpoint(ckpt_path(store->dir, t).string(), base.base));
        }
        if (resumed_to > 0) {
            current = run.checkpoints.back();
            opt.load(opt_path(store->dir, resumed_to).string());
            note("resumed " + config.run_name() + " after epoch " + std::to_string(resumed_to));
        }
    } else {
        current.stats.perplexity = sample_perplexity(current, inputs.samples);
        run.reports.push_back(epoch_cycle(current, *inputs.vocab, *inputs.entities, *inputs.suites, nullptr,
                                          config.theta));
        run.checkpoints.push_back(current);
        if (store) {
            write_text(report_path(store->dir, 0), json(run.reports[0]).dump() + "\n");
        }
    }

    const fs::path status_path = store ? store->dir / "status.json" : fs::path();
    if (store && fs::exists(status_path)) {
        const json st = read_json(status_path);
        run.exhausted = st.value("exhausted", false);
        if (st.value("complete", false)) {
            write_tables(*store, run);
            return run;
        }
    }

    for (int t = resumed_to + 1; t <= config.epochs; ++t) {
        std::vector<CptSample> slice_samples;
        const CurriculumSlice* slice = nullptr;
        if (config.kind == StrategyKind::Curriculum) {
            run.slices.push_back(select_curriculum(run.reports.back(), inputs.samples, config.theta, t));
            slice = &run.slices.back();
            if (slice->exhausted()) {
                note(config.run_name() + ": curriculum exhausted before epoch " + std::to_string(t));
                run.slices.pop_back();
                run.exhausted = true;
                break;
            }
            for (std::size_t i : slice->samples) {
                slice_samples.push_back(inputs.samples[i]);
            }
        }
        const std::span<const CptSample> train_set =
            slice ? std::span<const CptSample>(slice_samples) : std::span<const CptSample>(inputs.samples);

        // KL-Pretrain compares against M_0, KL-Stepwise against M_{t-1}
        Checkpoint reference;
        const Checkpoint* ref = nullptr;
        if (config.kind == StrategyKind::KLPretrain) {
            ref = &base;
        } else if (config.kind == StrategyKind::KLStepwise) {
            reference = current;
            ref = &reference;
        }

        EpochOutcome outcome = cpt_epoch(current, train_set, config, opt, ref, t, seed);
        current = std::move(outcome.ckpt);
        current.stats.perplexity = sample_perplexity(current, inputs.samples);
        outcome.stats.perplexity = current.stats.perplexity;

        EpochReport report = epoch_cycle(current, *inputs.vocab, *inputs.entities, *inputs.suites, &run.reports.back(),
                                         config.theta);
        run.stats.push_back(outcome.stats);
        run.steps.insert(run.steps.end(), outcome.steps.begin(), outcome.steps.end());
        run.reports.push_back(std::move(report));
        run.checkpoints.push_back(current);

        if (store) {
            save_checkpoint(ckpt_path(store->dir, t).string(), current, store->base_ref);
            opt.save(opt_path(store->dir, t).string());
            write_text(train_path(store->dir, t), epoch_json(outcome.stats, outcome.steps, slice).dump() + "\n");
            write_text(report_path(store->dir, t), json(run.reports.back()).dump() + "\n");
            std::ofstream timing(store->dir / "timing.log", std::ios::app);
            timing << "epoch " << t << " train_seconds " << outcome.stats.wall_seconds << '\n';
            write_tables(*store, run);
        }
        note(config.run_name() + " epoch " + std::to_string(t) + ": ppl " + fmt_num(current.stats.perplexity, 3) +
             " recall " + fmt_num(run.reports.back().recall_all, 3) + " ood " +
             fmt_num(run.reports.back().ood_mean, 3));
    }

    if (store) {
        write_tables(*store, run);
        write_text(status_path, json{{"complete", true}, {"exhausted", run.exhausted},
                                     {"epochs", static_cast<int>(run.reports.size()) - 1}}
                                        .dump(2) +
                                    "\n");
    }
    return run;
}

RunRecord load_run(const fs::path& dir, const Checkpoint* base) {
    const json cfg = read_json(dir / "config.json");
    const json status = read_json(dir / "status.json");
    RunRecord run;
    run.config = cfg.at("strategy").get<StrategyConfig>();
    run.seed = cfg.at("seed").get<std::uint64_t>();
    run.exhausted = status.value("exhausted", false);
    const int epochs = status.at("epochs").get<int>();
    run.reports.push_back(read_json(report_path(dir, 0)).get<EpochReport>());
    if (base) {
        run.checkpoints.push_back(attach_adapters(*base, run.config.adapter, derive_seed(run.seed, "lora")));
        run.checkpoints.back().epoch = 0;
        run.checkpoints.back().stats.perplexity = run.reports[0].perplexity;
    }
    for (int t = 1; t <= epochs; ++t) {
        read_epoch_json(read_json(train_path(dir, t)), run, nullptr, nullptr);
        run.reports.push_back(read_json(report_path(dir, t)).get<EpochReport>());
        if (base) {
            run.checkpoints.push_back(load_checkpoint(ckpt_path(dir, t).string(), base->base));
        }
    }
    return run;
}

}  // namespace cptlab
