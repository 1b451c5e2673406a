#pragma once

#include "cellpilot/mask.hpp"
#include "cellpilot/model.hpp"

#include <functional>
#include <vector>

namespace cellpilot::promptsim {

struct SimulationConfig {
    int max_corrections = 5;
    double initial_point_probability = 0.5;
    int min_box_margin = 0;
    int max_box_margin = 10;
    ClickPlacement placement = ClickPlacement::random;
    // Re-feed previous logits as a dense prompt. Unsupported; must stay false.
    bool mask_feedback = false;

    void validate() const;
};

enum class StartMode { point, box };

struct PromptSet {
    Prompt initial;
    std::vector<PointPrompt> corrections;

    // Initial prompt plus the first `k` corrections (all when k < 0).
    PromptGroup group(int k = -1) const;
};

Prompt sample_initial_prompt(const BinaryMask& gt, const SimulationConfig& cfg, Rng& rng);
Prompt sample_initial_prompt(const BinaryMask& gt, StartMode mode, const SimulationConfig& cfg, Rng& rng);

// Uniform over {0, ..., max_corrections}.
int draw_n(const SimulationConfig& cfg, Rng& rng);

struct SimulationResult {
    PromptSet prompts;
    LogitGrid logits;                    // final prediction
    std::vector<BinaryMask> predictions; // binarised prediction after each step
    bool converged = false;
};

// Maps a prompt group to logits; lets callers run the loop without a full
// PromptableModel (training runs it on a detached embedding).
using Predictor = std::function<LogitGrid(const PromptGroup&)>;

SimulationResult simulate_interaction(const Predictor& predict, const Prompt& initial, const BinaryMask& gt,
                                      int n, const SimulationConfig& cfg, Rng& rng);

// Encodes `image` once and runs the loop against `model`.
SimulationResult simulate_interaction(const PromptableModel& model, const Image& image, const BinaryMask& gt,
                                      int n, const SimulationConfig& cfg, Rng& rng);

} // namespace cellpilot::promptsim
