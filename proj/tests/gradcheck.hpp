#pragma once

// Central finite differences against the autograd gradient of the training
// loss, shared by the unit tests and the acceptance run.

#include "cellpilot/dataset.hpp"
#include "cellpilot/toy_model.hpp"
#include "cellpilot/training.hpp"

#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace gradcheck {

struct Entry {
    std::string name;
    int index = 0;
    double numeric = 0.0;
    double analytic = 0.0;
    double rel_error = 0.0;
};

struct Result {
    std::vector<Entry> checked;
    std::size_t vanishing = 0; // sampled entries whose gradient is ~0 on both sides
    double max_rel_error = 0.0;
};

inline double rel_error(double a, double b) { return std::abs(a - b) / std::max(1e-12, std::abs(a) + std::abs(b)); }

// Samples trainable entries until `want` entries with a non-vanishing
// gradient have been compared. Entries whose gradient magnitude stays below
// `floor` on both sides carry no relative-error information (for example key
// biases, to which softmax attention is invariant) and are only counted.
inline Result run(cellpilot::ToyModel& model, const cellpilot::AnnotatedImage& item, const cellpilot::PromptGroup& prompts,
                  const cellpilot::BinaryMask& gt, std::size_t want, std::uint64_t seed, double h = 1e-5,
                  double floor = 1e-6) {
    using namespace cellpilot;
    auto loss = [&] {
        ag::Tape tape(false);
        auto emb = model.encode_graph(tape, item.image);
        return training::segmentation_loss(model.decode_graph(tape, emb, prompts).value(), gt);
    };
    for (auto* p : model.parameters()) p->zero_grad();
    {
        ag::Tape tape;
        auto emb = model.encode_graph(tape, item.image);
        tape.backward(training::segmentation_loss(model.decode_graph(tape, emb, prompts), gt));
    }

    std::vector<ag::Parameter*> trainable;
    for (auto* p : model.parameters())
        if (p->trainable) trainable.push_back(p);

    Result res;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick_param(0, trainable.size() - 1);
    for (std::size_t attempts = 0; res.checked.size() < want && attempts < want * 50; ++attempts) {
        auto* p = trainable[pick_param(rng)];
        std::uniform_int_distribution<int> pick_entry(0, static_cast<int>(p->value.size()) - 1);
        const int i = pick_entry(rng);
        double& v = p->value.data()[i];
        const double saved = v;
        v = saved + h;
        const double up = loss();
        v = saved - h;
        const double down = loss();
        v = saved;
        const double numeric = (up - down) / (2 * h);
        const double analytic = p->grad.data()[i];
        if (std::abs(numeric) < floor && std::abs(analytic) < floor) {
            ++res.vanishing;
            continue;
        }
        Entry e{p->name, i, numeric, analytic, rel_error(numeric, analytic)};
        res.max_rel_error = std::max(res.max_rel_error, e.rel_error);
        res.checked.push_back(e);
    }
    return res;
}

// Standard setup: one blob image, LoRA injected with a random B so adapter
// gradients flow, a box plus a negative click as the prompt.
struct Setup {
    cellpilot::AnnotatedImage item;
    cellpilot::PromptGroup prompts;
    cellpilot::BinaryMask gt;
};

inline Setup prepare(cellpilot::ToyModel& model, std::uint64_t seed) {
    using namespace cellpilot;
    BlobConfig bc;
    bc.count = 1;
    bc.seed = seed;
    auto item = make_blob_dataset(bc).at(0);
    model.inject_lora();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 0.05);
    for (auto* p : model.parameters())
        if (ToyModel::is_adapter(*p) && p->name.find("lora_B") != std::string::npos)
            for (int i = 0; i < p->value.size(); ++i) p->value.data()[i] = noise(rng);
    const auto gt = item.instances.at(0);
    const auto box = box_from_mask(gt);
    PromptGroup g;
    g.add(box_from_mask(gt, 3));
    g.add(PointPrompt{box.row_min, box.col_min, Polarity::negative});
    return {std::move(item), g, gt};
}

} // namespace gradcheck
