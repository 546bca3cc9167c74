// Command-line entry point: cptlab <stage> [--manifest PATH] [--seed N] [--out DIR] ...

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "cptlab/harness.hpp"

using namespace cptlab;

int main(int argc, char** argv) {
    CLI::App app{"Continual pre-training knowledge-dynamics lab"};
    app.require_subcommand(1);

    std::string manifest_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::string> strategy;
    std::optional<int> epochs;
    bool extended = false;

    const auto common = [&](CLI::App* sub) {
        sub->add_option("--manifest", manifest_path, "experiment manifest (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "global seed, overrides the manifest");
        sub->add_option("--out", out, "run directory");
    };
    struct Stage {
        const char* name;
        const char* help;
    };
    const Stage stages[] = {
        {"gen-corpus", "generate facts, corpora and probe suites"},
        {"pretrain", "pre-train the base model on the V1 corpus"},
        {"cpt", "continual pre-training runs"},
        {"probe", "evaluate the base model on both suites"},
        {"rag", "retrieval-augmented upper bound"},
        {"circuits", "circuit sweep over the CPT checkpoints"},
        {"report", "summary tables and figures from finished runs"},
        {"all", "every stage in order"},
        {"print-manifest", "print the effective manifest"},
    };
    std::map<std::string, CLI::App*> subs;
    for (const Stage& s : stages) {
        subs[s.name] = app.add_subcommand(s.name, s.help);
        common(subs[s.name]);
    }
    subs["cpt"]->add_option("--strategy", strategy, "run only this strategy");
    for (const char* name : {"cpt", "all"}) {
        subs[name]->add_option("--epochs", epochs, "override the number of CPT epochs")->check(CLI::PositiveNumber);
        subs[name]->add_flag("--extended", extended, "also run the long main-documents-only LoRA run");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        if (out.empty()) {
            const char* env = std::getenv("CPTLAB_OUT");
            out = env ? env : "cptlab_out";
        }
        // a run directory remembers its manifest
        if (manifest_path.empty() && std::filesystem::exists(std::filesystem::path(out) / "manifest.json")) {
            manifest_path = (std::filesystem::path(out) / "manifest.json").string();
        }
        ExperimentManifest m = manifest_path.empty() ? ExperimentManifest::defaults() : load_manifest(manifest_path);
        if (const char* env = std::getenv("CPTLAB_SEED"); env && !seed) {
            seed = std::stoull(env);
        }
        if (seed) {
            m.seed = *seed;
        }
        if (subs["print-manifest"]->parsed()) {
            std::cout << nlohmann::json(m).dump(2) << '\n';
            return 0;
        }
        if (epochs) {
            m.set_epochs(*epochs);
        }
        if (extended && subs["all"]->parsed()) {
            m.extended = true;
        }
        Pipeline p(m, out, [](const std::string& s) { std::cerr << s << std::endl; });

        if (subs["gen-corpus"]->parsed()) {
            p.gen_corpus();
        } else if (subs["pretrain"]->parsed()) {
            p.pretrain();
        } else if (subs["cpt"]->parsed()) {
            if (!extended || strategy) {
                p.cpt(strategy);
            }
            if (extended) {
                p.cpt_extended();
            }
        } else if (subs["probe"]->parsed()) {
            p.probe();
        } else if (subs["rag"]->parsed()) {
            p.rag();
        } else if (subs["circuits"]->parsed()) {
            p.circuits();
        } else if (subs["report"]->parsed()) {
            p.report();
        } else if (subs["all"]->parsed()) {
            p.all();
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
