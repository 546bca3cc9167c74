#include "cptlab/dynamics.hpp"

#include <array>
#include <cstdio>
#include <sstream>

namespace cptlab {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 4> kLabelNames{"Acquired", "Retained", "Forgotten", "NotLearned"};

}  // namespace

std::string_view to_string(TransitionLabel l) { return kLabelNames[static_cast<std::size_t>(l)]; }

TransitionLabel parse_transition(std::string_view s) {
    for (std::size_t i = 0; i < kLabelNames.size(); ++i) {
        if (kLabelNames[i] == s) {
            return static_cast<TransitionLabel>(i);
        }
    }
    throw ConfigError("unknown transition label: " + std::string(s));
}

TransitionLabel classify_transition(double r_prev, double r_cur, double theta) {
    const bool was = r_prev >= theta;
    const bool is = r_cur >= theta;
    if (!was && is) {
        return TransitionLabel::Acquired;
    }
    if (was && is) {
        return TransitionLabel::Retained;
    }
    if (was && !is) {
        return TransitionLabel::Forgotten;
    }
    return TransitionLabel::NotLearned;
}

bool detect_distortion(double ood_cur, double ood_prev) { return ood_cur < ood_prev; }

const EntityEpoch& EpochReport::entity(int id) const {
    for (const EntityEpoch& e : entities) {
        if (e.entity == id) {
            return e;
        }
    }
    throw ConfigError("report for epoch " + std::to_string(epoch) + " lacks entity " + std::to_string(id));
}

TransitionCounts count_labels(std::span<const EntityEpoch> entities) {
    TransitionCounts c;
    for (const EntityEpoch& e : entities) {
        if (!e.label) {
            continue;
        }
        switch (*e.label) {
            case TransitionLabel::Acquired:
                ++c.acquired;
                break;
            case TransitionLabel::Retained:
                ++c.retained;
                break;
            case TransitionLabel::Forgotten:
                ++c.forgotten;
                break;
            case TransitionLabel::NotLearned:
                ++c.not_learned;
                break;
        }
    }
    return c;
}

EpochReport build_report(int epoch, const Entities& entities, const Suites& suites,
                         std::vector<ProbeResult> knowledge, std::vector<ProbeResult> ood,
                         const EpochReport* prev, double theta) {
    if (knowledge.size() != suites.knowledge.size() || ood.size() != suites.ood.size()) {
        throw ConfigError("build_report: result count does not match the suites");
    }
    EpochReport r;
    r.epoch = epoch;

    std::map<int, std::vector<ProbeResult>> by_entity;
    for (std::size_t i = 0; i < knowledge.size(); ++i) {
        if (knowledge[i].probe_id != suites.knowledge[i].id) {
            throw ConfigError("build_report: results out of suite order");
        }
        by_entity[suites.knowledge[i].entity].push_back(knowledge[i]);
    }
    double sum_all = 0.0, sum_high = 0.0, sum_low = 0.0;
    int n_high = 0, n_low = 0;
    for (const Entity& e : entities) {
        EntityEpoch ee;
        ee.entity = e.id;
        ee.freq_class = e.freq_class;
        ee.recall = entity_recall(by_entity[e.id]);
        if (prev != nullptr) {
            ee.label = classify_transition(prev->entity(e.id).recall, ee.recall, theta);
        }
        sum_all += ee.recall;
        if (e.freq_class == FreqClass::High) {
            sum_high += ee.recall;
            ++n_high;
        } else {
            sum_low += ee.recall;
            ++n_low;
        }
        r.entities.push_back(ee);
    }
    r.recall_all = entities.empty() ? 0.0 : sum_all / static_cast<double>(entities.size());
    r.recall_high = n_high ? sum_high / n_high : 0.0;
    r.recall_low = n_low ? sum_low / n_low : 0.0;

    std::map<std::string, std::pair<int, int>> tasks;  // correct, total
    for (std::size_t i = 0; i < ood.size(); ++i) {
        if (ood[i].probe_id != suites.ood[i].id) {
            throw ConfigError("build_report: OOD results out of suite order");
        }
        auto& [correct, total] = tasks[suites.ood[i].task];
        correct += ood[i].score > 0.5;
        ++total;
    }
    double task_sum = 0.0;
    for (const auto& [task, ct] : tasks) {
        const double acc = static_cast<double>(ct.first) / static_cast<double>(ct.second);
        r.ood[task] = acc;
        task_sum += acc;
    }
    r.ood_mean = tasks.empty() ? 0.0 : task_sum / static_cast<double>(tasks.size());

    if (prev != nullptr) {
        r.counts = count_labels(r.entities);
        r.distortion = detect_distortion(r.ood_mean, prev->ood_mean);
        for (const auto& [task, acc] : r.ood) {
            auto it = prev->ood.find(task);
            r.distortion_by_task[task] = it != prev->ood.end() && detect_distortion(acc, it->second);
        }
    }
    r.knowledge_results = std::move(knowledge);
    r.ood_results = std::move(ood);
    return r;
}

EpochReport epoch_cycle(const Checkpoint& ckpt, const Vocab& vocab, const Entities& entities,
                        const Suites& suites, const EpochReport* prev, double theta) {
    std::vector<ProbeResult> knowledge;
    knowledge.reserve(suites.knowledge.size());
    for (const KnowledgeProbe& p : suites.knowledge) {
        knowledge.push_back(answer_probe(ckpt, vocab, p, ckpt.epoch));
    }
    std::vector<ProbeResult> ood;
    ood.reserve(suites.ood.size());
    for (const OODProbe& p : suites.ood) {
        ood.push_back(answer_ood(ckpt, vocab, p, ckpt.epoch));
    }
    EpochReport r = build_report(ckpt.epoch, entities, suites, std::move(knowledge), std::move(ood), prev, theta);
    r.ce = ckpt.stats.ce_loss;
    r.kl = ckpt.stats.kl_term;
    r.perplexity = ckpt.stats.perplexity;
    return r;
}

// ---------------------------------------------------------------------------

void to_json(json& j, const EpochReport& r) {
    json ents = json::array();
    for (const EntityEpoch& e : r.entities) {
        json x{{"entity", e.entity}, {"freq_class", to_string(e.freq_class)}, {"recall", e.recall}};
        x["label"] = e.label ? json(to_string(*e.label)) : json(nullptr);
        ents.push_back(std::move(x));
    }
    j = json{{"epoch", r.epoch},
             {"perplexity", r.perplexity},
             {"ce", r.ce},
             {"kl", r.kl},
             {"entities", ents},
             {"recall", {{"all", r.recall_all}, {"high", r.recall_high}, {"low", r.recall_low}}},
             {"ood", r.ood},
             {"ood_mean", r.ood_mean},
             {"distortion", r.distortion},
             {"distortion_by_task", r.distortion_by_task},
             {"knowledge_results", r.knowledge_results},
             {"ood_results", r.ood_results}};
    if (r.counts) {
        j["counts"] = {{"acquired", r.counts->acquired},
                       {"retained", r.counts->retained},
                       {"forgotten", r.counts->forgotten},
                       {"not_learned", r.counts->not_learned}};
    } else {
        j["counts"] = nullptr;
    }
}

void from_json(const json& j, EpochReport& r) {
    r.epoch = j.at("epoch").get<int>();
    r.perplexity = j.at("perplexity").get<double>();
    r.ce = j.value("ce", 0.0);
    r.kl = j.value("kl", 0.0);
    r.entities.clear();
    for (const auto& x : j.at("entities")) {
        EntityEpoch e;
        e.entity = x.at("entity").get<int>();
        e.freq_class = parse_freq_class(x.at("freq_class").get<std::string>());
        e.recall = x.at("recall").get<double>();
        if (!x.at("label").is_null()) {
            e.label = parse_transition(x.at("label").get<std::string>());
        }
        r.entities.push_back(e);
    }
    r.recall_all = j.at("recall").at("all").get<double>();
    r.recall_high = j.at("recall").at("high").get<double>();
    r.recall_low = j.at("recall").at("low").get<double>();
    r.ood = j.at("ood").get<std::map<std::string, double>>();
    r.ood_mean = j.at("ood_mean").get<double>();
    r.distortion = j.at("distortion").get<bool>();
    r.distortion_by_task = j.value("distortion_by_task", std::map<std::string, bool>{});
    r.knowledge_results = j.value("knowledge_results", std::vector<ProbeResult>{});
    r.ood_results = j.value("ood_results", std::vector<ProbeResult>{});
    if (j.contains("counts") && !j.at("counts").is_null()) {
        const auto& c = j.at("counts");
        r.counts = TransitionCounts{c.at("acquired").get<int>(), c.at("retained").get<int>(),
                                    c.at("forgotten").get<int>(), c.at("not_learned").get<int>()};
    } else {
        r.counts.reset();
    }
}

// ---------------------------------------------------------------------------

std::string fmt_num(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    std::string s = buf;
    if (s.size() > 1 && s[0] == '-') {
        // avoid "-0.0000"
        bool zero = true;
        for (char c : s.substr(1)) {
            zero = zero && (c == '0' || c == '.');
        }
        if (zero) {
            s.erase(0, 1);
        }
    }
    return s;
}

RunSummary summarize_run(std::span<const EpochReport> reports, const Entities& entities) {
    if (reports.empty()) {
        throw ConfigError("summarize_run: no reports");
    }
    RunSummary s;
    const EpochReport& base = reports.front();
    for (const EpochReport& r : reports) {
        SummaryRow row;
        row.epoch = r.epoch;
        row.perplexity = r.perplexity;
        row.recall_all = r.recall_all;
        row.recall_high = r.recall_high;
        row.recall_low = r.recall_low;
        row.d_all = r.recall_all - base.recall_all;
        row.d_high = r.recall_high - base.recall_high;
        row.d_low = r.recall_low - base.recall_low;
        row.counts = r.counts;
        row.ood = r.ood;
        row.ood_mean = r.ood_mean;
        row.d_ood = r.ood_mean - base.ood_mean;
        row.distortion = r.distortion;
        s.rows.push_back(std::move(row));
    }
    for (FreqClass f : {FreqClass::High, FreqClass::Low}) {
        for (const Entity& e : entities) {
            if (e.freq_class == f) {
                s.entity_order.push_back(e.id);
            }
        }
    }
    for (int id : s.entity_order) {
        std::vector<double> line;
        for (const EpochReport& r : reports) {
            line.push_back(r.entity(id).recall);
        }
        s.heat.push_back(std::move(line));
    }
    return s;
}

std::string summary_csv(const RunSummary& s) {
    std::ostringstream os;
    std::vector<std::string> tasks;
    if (!s.rows.empty()) {
        for (const auto& [task, acc] : s.rows.front().ood) {
            tasks.push_back(task);
        }
    }
    os << "epoch,ppl,recall_all,d_all,recall_high,d_high,recall_low,d_low,acquired,retained,forgotten,"
          "not_learned";
    for (const auto& t : tasks) {
        os << ",ood_" << t;
    }
    os << ",ood_avg,d_ood,distortion\n";
    for (const SummaryRow& r : s.rows) {
        os << r.epoch << ',' << fmt_num(r.perplexity) << ',' << fmt_num(r.recall_all) << ',' << fmt_num(r.d_all)
           << ',' << fmt_num(r.recall_high) << ',' << fmt_num(r.d_high) << ',' << fmt_num(r.recall_low) << ','
           << fmt_num(r.d_low);
        if (r.counts) {
            os << ',' << r.counts->acquired << ',' << r.counts->retained << ',' << r.counts->forgotten << ','
               << r.counts->not_learned;
        } else {
            os << ",,,,";
        }
        for (const auto& t : tasks) {
            auto it = r.ood.find(t);
            os << ',' << (it == r.ood.end() ? std::string() : fmt_num(it->second));
        }
        os << ',' << fmt_num(r.ood_mean) << ',' << fmt_num(r.d_ood) << ',' << (r.distortion ? 1 : 0) << '\n';
    }
    return os.str();
}

std::string heatmap_csv(const RunSummary& s, const Entities& entities) {
    std::ostringstream os;
    os << "entity,name,freq_class";
    if (!s.heat.empty()) {
        for (std::size_t t = 0; t < s.heat.front().size(); ++t) {
            os << ",t" << s.rows[t].epoch;
        }
    }
    os << '\n';
    for (std::size_t i = 0; i < s.entity_order.size(); ++i) {
        const Entity& e = find_entity(entities, s.entity_order[i]);
        os << e.id << ',' << e.name << ',' << to_string(e.freq_class);
        for (double v : s.heat[i]) {
            os << ',' << fmt_num(v);
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace cptlab
