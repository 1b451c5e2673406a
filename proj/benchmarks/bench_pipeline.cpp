#include "cellpilot/pipeline.hpp"

#include <benchmark/benchmark.h>

using namespace cellpilot;

namespace {

Image gradient(int h, int w) {
    Image img(h, w, 3);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = static_cast<float>((r + c + ch) % 256) / 255.0f;
    return img;
}

void BM_Preprocess(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    const auto img = gradient(side, side * 3 / 4);
    for (auto _ : state) benchmark::DoNotOptimize(preprocess(img, 1024));
}
BENCHMARK(BM_Preprocess)->Arg(512)->Arg(2048)->Arg(4096)->Unit(benchmark::kMillisecond);

void BM_Postprocess(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    const auto rec = make_preprocess_record(side, side * 3 / 4, 128);
    LogitGrid logits{Matrix::Constant(128, 128, -1.0)};
    logits.values.block(30, 30, 40, 40).setConstant(2.0);
    for (auto _ : state) benchmark::DoNotOptimize(postprocess_mask(logits, rec));
}
BENCHMARK(BM_Postprocess)->Arg(512)->Arg(2048)->Arg(4096)->Unit(benchmark::kMillisecond);

} // namespace
