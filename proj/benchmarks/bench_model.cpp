#include "cellpilot/dataset.hpp"
#include "cellpilot/toy_model.hpp"

#include <benchmark/benchmark.h>

using namespace cellpilot;

namespace {

AnnotatedImage sample() {
    BlobConfig bc;
    bc.count = 1;
    bc.seed = 3;
    return make_blob_dataset(bc).at(0);
}

void BM_EncodeImage(benchmark::State& state) {
    ToyModel model;
    const auto item = sample();
    for (auto _ : state) benchmark::DoNotOptimize(model.encode_image(item.image));
}
BENCHMARK(BM_EncodeImage)->Unit(benchmark::kMillisecond);

void BM_DecodeMask(benchmark::State& state) {
    ToyModel model;
    const auto item = sample();
    const auto emb = model.encode_image(item.image);
    PromptGroup g;
    g.add(box_from_mask(item.instances.at(0), 3));
    for (int k = 0; k < state.range(0); ++k) g.add(PointPrompt{10 + k, 10 + k, Polarity::negative});
    for (auto _ : state) benchmark::DoNotOptimize(model.decode_mask(emb, g));
}
BENCHMARK(BM_DecodeMask)->Arg(0)->Arg(5)->Unit(benchmark::kMillisecond);

// One embedding, one decode per detector box.
void BM_DecodeBatch(benchmark::State& state) {
    ToyModel model;
    const auto item = sample();
    const auto emb = model.encode_image(item.image);
    std::vector<PromptGroup> groups(static_cast<std::size_t>(state.range(0)));
    for (std::size_t i = 0; i < groups.size(); ++i)
        groups[i].add(box_from_mask(item.instances[i % item.instances.size()], static_cast<int>(i % 5)));
    for (auto _ : state) benchmark::DoNotOptimize(model.decode_masks(emb, groups));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DecodeBatch)->Arg(50)->Unit(benchmark::kMillisecond);

} // namespace
