#pragma once
// Small seeded world shared by the pipeline tests: default roster, few
// supporting documents, a tiny untrained model.

#include "cptlab/train.hpp"

namespace cptlab::testing {

struct MiniWorld {
    CorpusConfig cc;
    World world;
    FactTable v1, v2;
    Corpus revised;
    Vocab vocab;
    Suites suites;
    ModelConfig mc;
    Checkpoint base;

    explicit MiniWorld(std::uint64_t seed = 13) {
        cc.high_supporting = 3;
        cc.low_supporting = 1;
        cc.background_per_cell = 0;
        cc.reading_per_cell = 0;
        cc.max_seq_len = 96;
        world = build_world(cc, seed);
        v1 = generate_facts(world.roster, world.pools, FactsVersion::V1, seed);
        v2 = generate_facts(world.roster, world.pools, FactsVersion::V2, seed);
        revised = generate_documents(world.roster, v2, seed, cc);
        vocab = build_vocab(world);
        suites.knowledge = build_knowledge_suite(world.roster, v2);
        suites.ood = build_ood_suite(seed, 3);
        mc.n_layers = 1;
        mc.n_heads = 2;
        mc.d_model = 16;
        mc.d_mlp = 32;
        mc.max_seq_len = cc.max_seq_len;
        mc.vocab_size = static_cast<int>(vocab.size());
        mc.seed = seed;
        base = make_checkpoint(mc, Weights::initialize(mc));
    }

    CptInputs inputs(Variant variant = Variant::Plain, bool main_only = false) const {
        CptInputs in;
        in.vocab = &vocab;
        in.entities = &world.roster;
        in.suites = &suites;
        in.samples = build_cpt_samples(revised, world.roster, vocab, cc.max_seq_len, variant, main_only);
        return in;
    }
};

}  // namespace cptlab::testing
