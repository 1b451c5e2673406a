#include "cellpilot/mask.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace cellpilot;

namespace {

// Blobby mask: a few discs, so runs and components look like real cells.
BinaryMask discs(int side, int count, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<int> pos(0, side - 1), rad(side / 40 + 1, side / 10 + 2);
    BinaryMask m(side, side);
    for (int k = 0; k < count; ++k) {
        const int cr = pos(rng), cc = pos(rng), r = rad(rng);
        for (int y = std::max(0, cr - r); y < std::min(side, cr + r + 1); ++y)
            for (int x = std::max(0, cc - r); x < std::min(side, cc + r + 1); ++x)
                if ((y - cr) * (y - cr) + (x - cc) * (x - cc) <= r * r) m.set(y, x);
    }
    return m;
}

void BM_ConnectedComponents(benchmark::State& state) {
    const auto m = discs(static_cast<int>(state.range(0)), 40, 1);
    for (auto _ : state) benchmark::DoNotOptimize(label_components(m, Connectivity::four));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m.size()));
}
BENCHMARK(BM_ConnectedComponents)->Arg(128)->Arg(1024);

void BM_CorrectionClick(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    const auto gt = discs(side, 1, 2), pred = discs(side, 1, 3);
    Rng rng(0);
    for (auto _ : state) benchmark::DoNotOptimize(sample_correction_click(pred, gt, rng));
}
BENCHMARK(BM_CorrectionClick)->Arg(128)->Arg(1024);

void BM_RleEncode(benchmark::State& state) {
    const auto m = discs(static_cast<int>(state.range(0)), 40, 4);
    for (auto _ : state) benchmark::DoNotOptimize(rle_encode(m));
    state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(m.size()));
}
BENCHMARK(BM_RleEncode)->Arg(128)->Arg(1024)->Arg(4096);

void BM_RleDecode(benchmark::State& state) {
    const auto rle = rle_encode(discs(static_cast<int>(state.range(0)), 40, 4));
    for (auto _ : state) benchmark::DoNotOptimize(rle_decode(rle));
}
BENCHMARK(BM_RleDecode)->Arg(128)->Arg(1024)->Arg(4096);

void BM_Iou(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    const auto a = discs(side, 40, 5), b = discs(side, 40, 6);
    for (auto _ : state) benchmark::DoNotOptimize(iou(a, b));
}
BENCHMARK(BM_Iou)->Arg(1024);

} // namespace
