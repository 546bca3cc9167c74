#include "cptlab/circuits.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cptlab/dynamics.hpp"
#include "cptlab/templates.hpp"

namespace cptlab {

using nlohmann::json;

AttributionGraph::AttributionGraph(int nodes, std::vector<Edge> edges, std::vector<std::string> names)
    : nodes_(nodes), edges_(std::move(edges)), names_(std::move(names)) {
    if (static_cast<int>(names_.size()) != nodes_) {
        throw ConfigError("AttributionGraph: one name per node required");
    }
    lookup_.assign(static_cast<std::size_t>(nodes_) * static_cast<std::size_t>(nodes_), -1);
    for (std::size_t i = 0; i < edges_.size(); ++i) {
        const Edge& e = edges_[i];
        if (e.src < 0 || e.dst < 0 || e.src >= nodes_ || e.dst >= nodes_ || e.src >= e.dst) {
            throw ConfigError("AttributionGraph: edges must point forward");
        }
        lookup_[static_cast<std::size_t>(e.src * nodes_ + e.dst)] = static_cast<int>(i);
    }
}

AttributionGraph AttributionGraph::for_model(const ModelConfig& config) {
    const NodeLayout layout(config);
    const int logits = layout.count();
    std::vector<std::string> names;
    for (int n = 0; n < layout.count(); ++n) {
        names.push_back(layout.name(n));
    }
    names.push_back("logits");
    std::vector<Edge> edges;
    for (int l = 0; l < config.n_layers; ++l) {
        const int first = layout.head(l, 0);
        for (int h = 0; h < config.n_heads; ++h) {
            for (int u = 0; u < first; ++u) {
                edges.push_back(Edge{u, layout.head(l, h)});
            }
        }
        const int mlp = layout.mlp(l);
        for (int u = 0; u < mlp; ++u) {
            edges.push_back(Edge{u, mlp});
        }
    }
    for (int u = 0; u < logits; ++u) {
        edges.push_back(Edge{u, logits});
    }
    return AttributionGraph(logits + 1, std::move(edges), std::move(names));
}

int AttributionGraph::find(int src, int dst) const {
    if (src < 0 || dst < 0 || src >= nodes_ || dst >= nodes_) {
        return -1;
    }
    return lookup_[static_cast<std::size_t>(src * nodes_ + dst)];
}

std::string AttributionGraph::signature() const {
    std::uint64_t h = fnv1a("graph" + std::to_string(nodes_));
    for (const Edge& e : edges_) {
        h = fnv1a(std::to_string(e.src) + ">" + std::to_string(e.dst) + ";", h);
    }
    return hex64(h);
}

// ---------------------------------------------------------------------------

namespace {

std::string prompt_text(const std::string& subject) {
    std::string s = templates::fact_sentences(Relation::HeadOfState).front();
    // drop the value slot and the closing period
    const auto cut = s.find(" {v}");
    s = s.substr(0, cut);
    return templates::fill(std::move(s), "e", subject);
}

}  // namespace

std::vector<TripletPrompt> make_circuit_prompts(const Entities& entities, const FactTable& facts, const Vocab& vocab,
                                                std::uint64_t seed) {
    std::vector<const Entity*> subjects;
    for (const Entity& e : entities) {
        if (e.category == Category::Gpe && e.freq_class == FreqClass::High) {
            if (!facts.has(e.id, Relation::HeadOfState)) {
                throw ConfigError("circuit prompts: " + e.name + " has no head of state");
            }
            subjects.push_back(&e);
        }
    }
    if (subjects.size() < 2) {
        throw ConfigError("circuit prompts need at least two subjects");
    }
    auto first_token = [&](const Entity& e) { return vocab.encode_text(facts.at(e.id, Relation::HeadOfState)).front(); };
    Rng rng(derive_seed(seed, "circuit-prompts"));
    std::vector<TripletPrompt> out;
    for (const Entity* s : subjects) {
        std::vector<const Entity*> others;
        for (const Entity* o : subjects) {
            if (o != s && first_token(*o) != first_token(*s)) {
                others.push_back(o);
            }
        }
        if (others.empty()) {
            throw ConfigError("circuit prompts: no corrupting subject with a distinct answer for " + s->name);
        }
        const Entity* c = others[rng.below(others.size())];
        TripletPrompt p;
        p.subject = s->id;
        p.corrupt_subject = c->id;
        p.clean_text = prompt_text(s->name);
        p.clean = vocab.encode_text(p.clean_text);
        p.corrupted = vocab.encode_text(prompt_text(c->name));
        if (p.clean.size() != p.corrupted.size()) {
            throw ConfigError("circuit prompts: subjects " + s->name + " and " + c->name +
                              " differ in token length");
        }
        p.gold_text = facts.at(s->id, Relation::HeadOfState);
        p.gold = first_token(*s);
        p.corrupted_answer = first_token(*c);
        out.push_back(std::move(p));
    }
    return out;
}

double metric_logit_diff(std::span<const float> logits, TokenId gold, TokenId corrupted) {
    return static_cast<double>(logits[static_cast<std::size_t>(gold)]) -
           static_cast<double>(logits[static_cast<std::size_t>(corrupted)]);
}

// ---------------------------------------------------------------------------

ModelTarget::ModelTarget(const Checkpoint& ckpt, std::span<const TripletPrompt> prompts)
    : ckpt_(ckpt), prompts_(prompts), graph_(AttributionGraph::for_model(ckpt.config)) {
    for (const TripletPrompt& p : prompts_) {
        embeds_.emplace_back(forward(ckpt_, p.clean, true).record->outputs[0],
                             forward(ckpt_, p.corrupted, true).record->outputs[0]);
    }
}

std::vector<Matrix> ModelTarget::outputs(int prompt, bool corrupted) const {
    const TripletPrompt& p = prompts_[static_cast<std::size_t>(prompt)];
    return forward(ckpt_, corrupted ? p.corrupted : p.clean, true).record->outputs;
}

std::vector<Matrix> ModelTarget::input_grads(int prompt, double alpha) const {
    const TripletPrompt& p = prompts_[static_cast<std::size_t>(prompt)];
    const auto& [clean, corrupt] = embeds_[static_cast<std::size_t>(prompt)];
    const Matrix mixed = clean + static_cast<float>(alpha) * (corrupt - clean);
    ForwardOptions opts;
    opts.keep_cache = true;
    opts.embed_override = &mixed;
    const ForwardResult fwd = forward_batch(ckpt_, std::span<const Tokens>(&p.clean, 1), opts);
    Matrix dlogits = Matrix::Zero(fwd.logits.rows(), fwd.logits.cols());
    const Eigen::Index last = fwd.logits.rows() - 1;
    dlogits(last, p.gold) += 1.0f;
    dlogits(last, p.corrupted_answer) -= 1.0f;
    ActivationRecord rec;
    backward(ckpt_, fwd, dlogits, nullptr, &rec);
    return std::move(rec.input_grads);
}

std::vector<double> eap_ig_scores(const AttributionTarget& target, int m) {
    if (m < 1) {
        throw ConfigError("eap_ig_scores: m must be >= 1");
    }
    const AttributionGraph& g = target.graph();
    const int prompts = target.prompt_count();
    if (prompts < 1) {
        throw ConfigError("eap_ig_scores: no prompts");
    }
    std::vector<double> scores(g.edge_count(), 0.0);
    for (int p = 0; p < prompts; ++p) {
        const std::vector<Matrix> clean = target.outputs(p, false);
        const std::vector<Matrix> corrupt = target.outputs(p, true);
        std::vector<Matrix> delta(clean.size());
        for (std::size_t u = 0; u < clean.size(); ++u) {
            delta[u] = corrupt[u] - clean[u];
        }
        std::vector<Matrix> mean_grad;
        for (int j = 1; j <= m; ++j) {
            std::vector<Matrix> gr = target.input_grads(p, static_cast<double>(j) / m);
            if (mean_grad.empty()) {
                mean_grad = std::move(gr);
            } else {
                for (std::size_t v = 0; v < gr.size(); ++v) {
                    if (gr[v].size() > 0) {
                        mean_grad[v] += gr[v];
                    }
                }
            }
        }
        for (auto& mg : mean_grad) {
            mg /= static_cast<float>(m);
        }
        for (std::size_t e = 0; e < g.edge_count(); ++e) {
            const Edge& edge = g.edges()[e];
            const Matrix& d = delta[static_cast<std::size_t>(edge.src)];
            const Matrix& gv = mean_grad[static_cast<std::size_t>(edge.dst)];
            double s = 0.0;
            for (Eigen::Index i = 0; i < d.size(); ++i) {
                s += static_cast<double>(d.data()[i]) * static_cast<double>(gv.data()[i]);
            }
            scores[e] += s;
        }
    }
    for (double& s : scores) {
        s /= prompts;
    }
    return scores;
}

// ---------------------------------------------------------------------------

Circuit extract_circuit(const AttributionGraph& graph, std::span<const double> scores, int k,
                        const std::function<void(const std::string&)>& warn) {
    if (scores.size() != graph.edge_count()) {
        throw ConfigError("extract_circuit: one score per edge required");
    }
    if (k < 1) {
        throw ConfigError("extract_circuit: k must be >= 1");
    }
    const int total = static_cast<int>(graph.edge_count());
    if (k > total) {
        if (warn) {
            warn("extract_circuit: k = " + std::to_string(k) + " exceeds " + std::to_string(total) +
                 " edges, keeping all");
        }
        k = total;
    }
    std::vector<int> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return std::abs(scores[static_cast<std::size_t>(a)]) > std::abs(scores[static_cast<std::size_t>(b)]);
    });
    order.resize(static_cast<std::size_t>(k));
    std::sort(order.begin(), order.end());
    Circuit c;
    c.edges = order;
    for (int e : order) {
        c.scores.push_back(scores[static_cast<std::size_t>(e)]);
    }
    c.k = k;
    c.graph = graph.signature();
    return c;
}

double jaccard(const Circuit& a, const Circuit& b) {
    if (a.graph != b.graph) {
        throw ConfigError("jaccard: circuits come from different graphs");
    }
    std::vector<int> inter, uni;
    std::set_intersection(a.edges.begin(), a.edges.end(), b.edges.begin(), b.edges.end(), std::back_inserter(inter));
    std::set_union(a.edges.begin(), a.edges.end(), b.edges.begin(), b.edges.end(), std::back_inserter(uni));
    if (uni.empty()) {
        return 1.0;
    }
    return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

bool top_k_hit(std::span<const float> logits, TokenId gold, int k) {
    const float g = logits[static_cast<std::size_t>(gold)];
    int rank = 0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        if (logits[j] > g || (logits[j] == g && static_cast<TokenId>(j) < gold)) {
            ++rank;
        }
    }
    return rank < k;
}

double model_hit_at_k(const Checkpoint& ckpt, std::span<const TripletPrompt> prompts, int k) {
    if (prompts.empty()) {
        throw ConfigError("hit@k: no prompts");
    }
    int hits = 0;
    for (const TripletPrompt& p : prompts) {
        const Matrix logits = forward(ckpt, p.clean).logits;
        const Eigen::Index last = logits.rows() - 1;
        hits += top_k_hit(std::span<const float>(logits.row(last).data(), static_cast<std::size_t>(logits.cols())),
                          p.gold, k);
    }
    return static_cast<double>(hits) / static_cast<double>(prompts.size());
}

double circuit_hit_at_k(const Checkpoint& ckpt, const Circuit& circuit, std::span<const TripletPrompt> prompts, int k,
                        Ablation ablation) {
    if (prompts.empty()) {
        throw ConfigError("hit@k: no prompts");
    }
    const AttributionGraph graph = AttributionGraph::for_model(ckpt.config);
    if (circuit.graph != graph.signature()) {
        throw ConfigError("circuit_hit_at_k: circuit was extracted on a different graph");
    }
    std::vector<char> in_circuit(graph.edge_count(), 0);
    for (int e : circuit.edges) {
        in_circuit[static_cast<std::size_t>(e)] = 1;
    }
    const EdgeFilter keep = [&](int src, int dst) {
        const int e = graph.find(src, dst);
        return e >= 0 && in_circuit[static_cast<std::size_t>(e)] != 0;
    };

    ActivationRecord mean;
    if (ablation == Ablation::Mean) {
        for (const TripletPrompt& p : prompts) {
            const auto outs = forward(ckpt, p.clean, true).record->outputs;
            if (mean.outputs.empty()) {
                mean.outputs = outs;
            } else {
                for (std::size_t u = 0; u < outs.size(); ++u) {
                    if (outs[u].rows() != mean.outputs[u].rows()) {
                        throw ConfigError("mean ablation needs prompts of equal length");
                    }
                    mean.outputs[u] += outs[u];
                }
            }
        }
        for (auto& o : mean.outputs) {
            o /= static_cast<float>(prompts.size());
        }
    }

    int hits = 0;
    for (const TripletPrompt& p : prompts) {
        const ActivationRecord replacement =
            ablation == Ablation::Corrupted ? *forward(ckpt, p.corrupted, true).record : mean;
        const Matrix logits = forward_patched(ckpt, p.clean, replacement, keep);
        hits += top_k_hit(std::span<const float>(logits.row(0).data(), static_cast<std::size_t>(logits.cols())),
                          p.gold, k);
    }
    return static_cast<double>(hits) / static_cast<double>(prompts.size());
}

// ---------------------------------------------------------------------------

namespace {

double stddev(const std::vector<double>& v) {
    if (v.size() < 2) {
        return 0.0;
    }
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) {
        s += (x - mean) * (x - mean);
    }
    return std::sqrt(s / static_cast<double>(v.size()));
}

int edge_budget(const AttributionGraph& g, double fraction) {
    return std::max(1, static_cast<int>(std::lround(fraction * static_cast<double>(g.edge_count()))));
}

}  // namespace

CircuitSweep circuit_sweep(const RunRecord& run, const Entities& entities, const FactTable& facts, const Vocab& vocab,
                           const SweepConfig& config, std::uint64_t seed,
                           const std::function<void(const std::string&)>& log) {
    if (run.checkpoints.empty() || run.checkpoints.size() != run.reports.size()) {
        throw ConfigError("circuit_sweep: run has no checkpoints to analyse");
    }
    if (config.runs < 1) {
        throw ConfigError("circuit_sweep: runs must be >= 1");
    }
    std::vector<std::vector<TripletPrompt>> prompt_sets;
    for (int r = 0; r < config.runs; ++r) {
        prompt_sets.push_back(make_circuit_prompts(entities, facts, vocab, derive_seed(seed, "circuit-run-" + std::to_string(r))));
    }
    const std::vector<TripletPrompt>& eval_prompts = prompt_sets.front();
    const AttributionGraph graph = AttributionGraph::for_model(run.checkpoints.front().config);
    const int k = edge_budget(graph, config.k_fraction);

    CircuitSweep out;
    for (std::size_t t = 0; t < run.checkpoints.size(); ++t) {
        const Checkpoint& ckpt = run.checkpoints[t];
        std::optional<Circuit> best;
        double best_hit = -1.0;
        std::vector<double> hits;
        for (int r = 0; r < config.runs; ++r) {
            const ModelTarget target(ckpt, prompt_sets[static_cast<std::size_t>(r)]);
            const std::vector<double> scores = eap_ig_scores(target, config.m);
            Circuit c = extract_circuit(graph, scores, k, log);
            c.m = config.m;
            c.epoch = static_cast<int>(t);
            c.prompt_set = "run-" + std::to_string(r);
            const double h = circuit_hit_at_k(ckpt, c, prompt_sets[static_cast<std::size_t>(r)], config.hit_k,
                                              config.ablation);
            hits.push_back(h);
            if (h > best_hit) {
                best_hit = h;
                best = std::move(c);
            }
        }
        std::vector<double> diffs;
        for (const TripletPrompt& p : eval_prompts) {
            const Matrix lc = forward(ckpt, p.clean).logits;
            const Matrix lr = forward(ckpt, p.corrupted).logits;
            const auto row = [](const Matrix& m) {
                return std::span<const float>(m.row(m.rows() - 1).data(), static_cast<std::size_t>(m.cols()));
            };
            diffs.push_back(metric_logit_diff(row(lc), p.gold, p.corrupted_answer) -
                            metric_logit_diff(row(lr), p.gold, p.corrupted_answer));
        }
        out.own_hit.push_back(best_hit);
        out.run_hit_std.push_back(stddev(hits));
        out.metric_std.push_back(stddev(diffs));
        out.circuits.push_back(std::move(*best));
        if (log) {
            log("circuit epoch " + std::to_string(t) + ": hit@" + std::to_string(config.hit_k) + " " +
                fmt_num(best_hit) + " (run spread " + fmt_num(out.run_hit_std.back()) + ")");
        }
    }
    for (const Circuit& c : out.circuits) {
        out.jaccard.push_back(jaccard(out.circuits.front(), c));
    }

    // peak recall over trained epochs; the baseline only when nothing was trained
    out.best_epoch = 0;
    double peak = -1.0;
    for (std::size_t t = run.reports.size() > 1 ? 1 : 0; t < run.reports.size(); ++t) {
        if (run.reports[t].recall_all > peak) {
            peak = run.reports[t].recall_all;
            out.best_epoch = static_cast<int>(t);
        }
    }
    const std::size_t last = out.circuits.size() - 1;
    const std::vector<std::pair<std::string, std::size_t>> rows{
        {"Before", 0}, {"After", last}, {"Best", static_cast<std::size_t>(out.best_epoch)}};
    for (const auto& [name, idx] : rows) {
        out.hit_rows.push_back(name + "(C_" + std::to_string(idx) + ")");
        std::vector<double> row;
        for (const Checkpoint& ckpt : run.checkpoints) {
            row.push_back(circuit_hit_at_k(ckpt, out.circuits[idx], eval_prompts, config.hit_k, config.ablation));
        }
        out.hit_table.push_back(std::move(row));
    }
    for (const Checkpoint& ckpt : run.checkpoints) {
        out.model_hit.push_back(model_hit_at_k(ckpt, eval_prompts, config.hit_k));
    }
    return out;
}

json circuit_json(const Circuit& c, const AttributionGraph& graph) {
    json edges = json::array();
    for (std::size_t i = 0; i < c.edges.size(); ++i) {
        const Edge& e = graph.edges()[static_cast<std::size_t>(c.edges[i])];
        edges.push_back(json::array({graph.name(e.src), graph.name(e.dst), c.scores[i]}));
    }
    return json{{"params", {{"k", c.k}, {"m", c.m}, {"epoch", c.epoch}, {"prompt_set", c.prompt_set},
                            {"graph", c.graph}, {"total_edges", graph.edge_count()}}},
                {"edges", edges}};
}

std::string jaccard_csv(const CircuitSweep& s) {
    std::ostringstream os;
    os << "epoch,jaccard,own_hit,run_hit_std,metric_std\n";
    for (std::size_t t = 0; t < s.jaccard.size(); ++t) {
        os << t << ',' << fmt_num(s.jaccard[t]) << ',' << fmt_num(s.own_hit[t]) << ',' << fmt_num(s.run_hit_std[t])
           << ',' << fmt_num(s.metric_std[t], 8) << '\n';
    }
    return os.str();
}

std::string hit_table_csv(const CircuitSweep& s) {
    std::ostringstream os;
    os << "circuit";
    for (std::size_t t = 0; t < s.model_hit.size(); ++t) {
        os << ",M_" << t;
    }
    os << '\n';
    for (std::size_t r = 0; r < s.hit_rows.size(); ++r) {
        os << s.hit_rows[r];
        for (double v : s.hit_table[r]) {
            os << ',' << fmt_num(v);
        }
        os << '\n';
    }
    os << "Model";
    for (double v : s.model_hit) {
        os << ',' << fmt_num(v);
    }
    os << '\n';
    return os.str();
}

std::vector<KSweepRow> k_sweep(const Checkpoint& ckpt, std::span<const TripletPrompt> prompts,
                               std::span<const double> fractions, int m, int hit_k) {
    const ModelTarget target(ckpt, prompts);
    const std::vector<double> scores = eap_ig_scores(target, m);
    std::vector<KSweepRow> out;
    for (double f : fractions) {
        const int k = edge_budget(target.graph(), f);
        const Circuit c = extract_circuit(target.graph(), scores, k);
        out.push_back(KSweepRow{f, k, circuit_hit_at_k(ckpt, c, prompts, hit_k)});
    }
    return out;
}

}  // namespace cptlab
