#include <benchmark/benchmark.h>

#include <vector>

#include "masklm/model.hpp"
#include "masklm/pretrain.hpp"
#include "masklm/rng.hpp"
#include "masklm/tensor.hpp"

using namespace masklm;

namespace {

ModelConfig bench_config(int n) {
    ModelConfig c;
    c.layers = 2;
    c.hidden = 64;
    c.heads = 4;
    c.head_dim = 16;
    c.ffn = 256;
    c.vocab = 200;
    c.max_len = n;
    c.dropout = 0.0;
    return c;
}

PackedInput bench_input(int n, int vocab, Rng& rng) {
    std::vector<int> tokens(static_cast<std::size_t>(n - 2));
    for (int& t : tokens) {
        t = Vocab::kReservedCount +
            static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - Vocab::kReservedCount)));
    }
    return pack_single(tokens, ObjectiveKind::LeftToRight);
}

void bm_matmul(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Rng rng(1);
    Tensor a = Tensor::randn({n, n}, rng, 1.0, false);
    Tensor b = Tensor::randn({n, n}, rng, 1.0, false);
    for (auto _ : state) {
        Tensor c = matmul(nullptr, a, b);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(bm_matmul)->Arg(32)->Arg(64)->Arg(128);

void bm_forward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const ModelConfig config = bench_config(n);
    Rng rng(2);
    ModelParams params = ModelParams::init(config, rng);
    const PackedInput input = bench_input(n, config.vocab, rng);
    for (auto _ : state) {
        HiddenStates hs = forward(nullptr, params, input, false, 0);
        benchmark::DoNotOptimize(hs.h.back().data());
    }
}
BENCHMARK(bm_forward)->Arg(16)->Arg(64);

void bm_forward_backward(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const ModelConfig config = bench_config(n);
    Rng rng(3);
    ModelParams params = ModelParams::init(config, rng);
    const PackedInput input = bench_input(n, config.vocab, rng);
    const std::vector<int> positions = {1, n / 2, n - 2};
    const std::vector<int> targets = {9, 10, 11};
    for (auto _ : state) {
        for (const NamedParam& p : params.parameters()) p.tensor.zero_grad();
        Tape tape;
        HiddenStates hs = forward(&tape, params, input, true, 0);
        Tensor logits = lm_logits(&tape, params, hs.h.back(), positions);
        Tensor loss = cross_entropy(&tape, logits, targets, 0.1);
        tape.backward(loss);
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(bm_forward_backward)->Arg(16)->Arg(64);

void bm_corrupt(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    const int vocab = 200;
    Rng rng(4);
    const PackedInput clean = bench_input(n, vocab, rng);
    const CorruptionPolicy policy;
    for (auto _ : state) {
        ClozeExample ex = corrupt(clean, policy, vocab, rng);
        benchmark::DoNotOptimize(ex.targets.data());
    }
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(bm_corrupt)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
