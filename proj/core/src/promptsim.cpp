#include "cellpilot/promptsim.hpp"

#include "cellpilot/errors.hpp"

namespace cellpilot::promptsim {

void SimulationConfig::validate() const {
    if (max_corrections < 0) throw ConfigError("max_corrections must be >= 0");
    if (!(initial_point_probability >= 0.0 && initial_point_probability <= 1.0))
        throw ConfigError("initial_point_probability must lie in [0, 1]");
    if (min_box_margin < 0 || max_box_margin < min_box_margin) throw ConfigError("invalid box margin range");
    if (mask_feedback) throw ConfigError("dense mask feedback is not supported");
}

PromptGroup PromptSet::group(int k) const {
    PromptGroup g;
    g.add(initial);
    const std::size_t n = k < 0 ? corrections.size() : std::min<std::size_t>(k, corrections.size());
    g.points.insert(g.points.end(), corrections.begin(), corrections.begin() + static_cast<std::ptrdiff_t>(n));
    return g;
}

Prompt sample_initial_prompt(const BinaryMask& gt, StartMode mode, const SimulationConfig& cfg, Rng& rng) {
    if (!gt.any()) throw EmptyMaskError();
    if (mode == StartMode::point) return sample_point_in_mask(gt, rng);
    std::uniform_int_distribution<int> margin(cfg.min_box_margin, cfg.max_box_margin);
    return box_from_mask(gt, margin(rng));
}

Prompt sample_initial_prompt(const BinaryMask& gt, const SimulationConfig& cfg, Rng& rng) {
    cfg.validate();
    if (!gt.any()) throw EmptyMaskError();
    std::bernoulli_distribution use_point(cfg.initial_point_probability);
    return sample_initial_prompt(gt, use_point(rng) ? StartMode::point : StartMode::box, cfg, rng);
}

int draw_n(const SimulationConfig& cfg, Rng& rng) {
    if (cfg.max_corrections <= 0) return 0;
    std::uniform_int_distribution<int> d(0, cfg.max_corrections);
    return d(rng);
}

SimulationResult simulate_interaction(const Predictor& predict, const Prompt& initial, const BinaryMask& gt,
                                      int n, const SimulationConfig& cfg, Rng& rng) {
    cfg.validate();
    if (n < 0) throw RangeError("number of corrections must be >= 0");
    if (!gt.any()) throw EmptyMaskError();

    SimulationResult res;
    res.prompts.initial = initial;
    res.logits = predict(res.prompts.group());
    res.predictions.push_back(res.logits.binarize());
    for (int i = 0; i < n; ++i) {
        const auto click = sample_correction_click(res.predictions.back(), gt, rng, cfg.placement);
        if (!click) {
            res.converged = true;
            break;
        }
        res.prompts.corrections.push_back(*click);
        res.logits = predict(res.prompts.group());
        res.predictions.push_back(res.logits.binarize());
    }
    if (!res.converged && res.predictions.back() == gt) res.converged = true;
    return res;
}

SimulationResult simulate_interaction(const PromptableModel& model, const Image& image, const BinaryMask& gt,
                                      int n, const SimulationConfig& cfg, Rng& rng) {
    if (gt.height() != model.input_size() || gt.width() != model.input_size())
        throw ShapeError("ground truth must be at model input resolution");
    const ImageEmbedding emb = model.encode_image(image);
    const Prompt initial = sample_initial_prompt(gt, cfg, rng);
    return simulate_interaction([&](const PromptGroup& g) { return model.decode_mask(emb, g); }, initial, gt, n,
                                cfg, rng);
}

} // namespace cellpilot::promptsim
