#include "cptlab/model.hpp"
#include <chrono>
#include <iostream>
using namespace cptlab;
int main(int argc, char** argv) {
    ModelConfig c; c.vocab_size = 1000; c.d_model = argc > 1 ? std::atoi(argv[1]) : 128; c.d_mlp = 4 * c.d_model;
    auto ck = make_checkpoint(c, Weights::initialize(c));
    Rng rng(1);
    std::vector<Sequence> batch;
    for (int i = 0; i < 8; ++i) { Sequence s; for (int t = 0; t < 60; ++t) s.tokens.push_back(rng.below(1000)); batch.push_back(s); }
    auto g = Gradients::for_checkpoint(ck);
    auto t0 = std::chrono::steady_clock::now();
    int iters = 20;
    for (int i = 0; i < iters; ++i) loss_and_grad(ck, batch, g);
    auto t1 = std::chrono::steady_clock::now();
    double sec = std::chrono::duration<double>(t1 - t0).count();
    std::cout << "full: " << sec / iters * 1000 << " ms/batch, " << iters * 480 / sec << " tok/s\n";
    auto ad = attach_adapters(ck, AdapterConfig{}, 3);
    auto ga = Gradients::for_checkpoint(ad);
    t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < iters; ++i) loss_and_grad(ad, batch, ga);
    t1 = std::chrono::steady_clock::now();
    sec = std::chrono::duration<double>(t1 - t0).count();
    std::cout << "lora: " << sec / iters * 1000 << " ms/batch, " << iters * 480 / sec << " tok/s\n";
    Tokens p(15, 5);
    t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 20; ++i) generate_greedy(ck, p, 0, 25);
    t1 = std::chrono::steady_clock::now();
    std::cout << "gen25: " << std::chrono::duration<double>(t1 - t0).count() / 20 * 1000 << " ms\n";
}
