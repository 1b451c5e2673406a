#pragma once

#include "cellpilot/augment.hpp"
#include "cellpilot/dataset.hpp"
#include "cellpilot/promptsim.hpp"
#include "cellpilot/toy_model.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cellpilot::training {

// How the point/box quotas are read: per image (sample that many instances
// without replacement, capped at the instance count) or per instance (every
// instance simulated that many times).
enum class QuotaMode { per_image, per_instance };
enum class OptimizerKind { schedule_free_adamw, sgd };

struct TrainConfig {
    int epochs = 20;
    int batch_size = 4;
    int grad_accumulation_steps = 4;
    double learning_rate = 1e-5;
    int points_per_image = 10;
    int boxes_per_image = 10;
    int max_corrections = 5;
    QuotaMode quota_mode = QuotaMode::per_image;
    std::uint64_t seed = 0;

    OptimizerKind optimizer = OptimizerKind::schedule_free_adamw;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int warmup_steps = 0;

    bool augment = true;
    augment::AugmentationConfig augmentation;
    double validation_fraction = 0.1;
    int val_instances_per_image = 10;

    ModelConfig model;

    int effective_batch() const { return batch_size * grad_accumulation_steps; }
    void validate() const;
};

// Human-readable key = value format; '#' starts a comment. Keys mirror the
// field names; augmentation keys are prefixed "augment.", model keys "model.".
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);
std::string format_train_config(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);

// Soft dice (eps-smoothed) plus mean binary cross-entropy, both weight 1.
struct LossTerms {
    double dice = 0.0;
    double bce = 0.0;
    double total() const { return dice + bce; }
};
LossTerms segmentation_loss_terms(const Matrix& logits, const BinaryMask& gt, double eps = 1.0);
double segmentation_loss(const Matrix& logits, const BinaryMask& gt, double eps = 1.0);
ag::Var segmentation_loss(const ag::Var& logits, const BinaryMask& gt, double eps = 1.0);

class Optimizer {
  public:
    virtual ~Optimizer() = default;
    // Apply the accumulated gradients of the trainable parameters.
    virtual void step(const std::vector<ag::Parameter*>& params) = 0;
    // Schedule-free methods evaluate at a different point than they train at.
    virtual void eval_mode(const std::vector<ag::Parameter*>&) {}
    virtual void train_mode(const std::vector<ag::Parameter*>&) {}
    virtual std::size_t steps() const = 0;
    virtual double current_lr() const = 0;

    // Serialisable state for resuming.
    virtual nlohmann::json state_meta() const = 0;
    virtual std::vector<std::pair<std::string, Matrix>> state_arrays() const = 0;
    virtual void load_state(const nlohmann::json& meta, const std::vector<std::pair<std::string, Matrix>>& arrays) = 0;
};

class Sgd final : public Optimizer {
  public:
    explicit Sgd(double lr) : lr_(lr) {}
    void step(const std::vector<ag::Parameter*>& params) override;
    std::size_t steps() const override { return steps_; }
    double current_lr() const override { return lr_; }
    nlohmann::json state_meta() const override;
    std::vector<std::pair<std::string, Matrix>> state_arrays() const override { return {}; }
    void load_state(const nlohmann::json& meta, const std::vector<std::pair<std::string, Matrix>>&) override;

  private:
    double lr_;
    std::size_t steps_ = 0;
};

// AdamW in the schedule-free formulation: the parameters hold the gradient
// evaluation point y; z is the base sequence and the evaluation point is
// x = y + (1 - 1/beta1)(z - y).
class ScheduleFreeAdamW final : public Optimizer {
  public:
    struct Options {
        double lr = 1e-5;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
        int warmup_steps = 0;
    };
    explicit ScheduleFreeAdamW(Options o) : o_(o) {}

    void step(const std::vector<ag::Parameter*>& params) override;
    void eval_mode(const std::vector<ag::Parameter*>& params) override;
    void train_mode(const std::vector<ag::Parameter*>& params) override;
    std::size_t steps() const override { return k_; }
    double current_lr() const override;
    nlohmann::json state_meta() const override;
    std::vector<std::pair<std::string, Matrix>> state_arrays() const override;
    void load_state(const nlohmann::json& meta, const std::vector<std::pair<std::string, Matrix>>& arrays) override;

  private:
    struct Slot {
        Matrix z;
        Matrix v;
    };
    Slot& slot(ag::Parameter& p);

    Options o_;
    std::size_t k_ = 0;
    double weight_sum_ = 0.0;
    double lr_max_ = -1.0;
    bool eval_ = false;
    std::map<std::string, Slot> slots_;
};

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg);

struct StepResult {
    double loss = 0.0;          // mean over simulations of the batch
    std::size_t simulations = 0;
    std::size_t images_used = 0;
    bool optimizer_stepped = false;
};

// One micro-batch: simulate interactions per image, back-propagate the mean
// loss and step the optimizer every grad_accumulation_steps calls.
class Trainer {
  public:
    Trainer(ToyModel& model, TrainConfig cfg);

    ToyModel& model() noexcept { return model_; }
    Optimizer& optimizer() noexcept { return *optimizer_; }
    const TrainConfig& config() const noexcept { return cfg_; }
    std::size_t micro_steps() const noexcept { return micro_; }

    // Images must already be at the model input size. `seeds` drives
    // augmentation and simulation for the matching image.
    StepResult train_step(std::span<const AnnotatedImage* const> batch, std::span<const std::uint64_t> seeds);
    StepResult train_step(std::span<const AnnotatedImage* const> batch, Rng& rng);

    // Per-image simulation plan, exposed for tests.
    struct Plan {
        std::vector<std::size_t> point_instances;
        std::vector<std::size_t> box_instances;
    };
    Plan plan_simulations(std::size_t instance_count, Rng& rng) const;

    std::vector<ag::Parameter*> trainable() const;

    // Gradients accumulated since the last optimizer step survive a resume.
    void set_micro_steps(std::size_t m) { micro_ = m; }

  private:
    double image_loss(const AnnotatedImage& item, std::uint64_t seed, double weight, std::size_t& sims);

    ToyModel& model_;
    TrainConfig cfg_;
    std::unique_ptr<Optimizer> optimizer_;
    std::size_t micro_ = 0;
};

struct StepRecord {
    int epoch = 0;
    std::size_t step = 0; // micro-batch index from the start of training
    double loss = 0.0;
    double loss_avg = 0.0; // exponential moving average
    double lr = 0.0;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_box_iou = 0.0;
    double val_point_iou = 0.0;
    double seconds = 0.0;
};

struct TrainHistory {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    double best_val_iou = -1.0;
    int best_epoch = -1;
};

struct TrainOptions {
    std::string out_dir;             // checkpoints, metrics.jsonl, train_state; empty = no files
    std::string resume_state;        // path to a train_state file
    std::optional<std::size_t> stop_after_steps; // stop (and save state) after this many micro-batches
    bool log_progress = false;
    std::function<void(const StepRecord&)> on_step;
};

// Splits `data` (already in the model frame) into train/validation, trains
// for cfg.epochs and evaluates single-box and single-point IoU on the
// validation images after each epoch. Best (by box IoU) and last weights are
// written as best.ckpt / last.ckpt when an output directory is given.
TrainHistory train(ToyModel& model, const std::vector<AnnotatedImage>& data, const TrainConfig& cfg,
                   const TrainOptions& options = {});

// Mean single-prompt IoU with the deterministic evaluation protocol.
double single_prompt_iou(const PromptableModel& model, const std::vector<AnnotatedImage>& images,
                         promptsim::StartMode start, int instances_per_image, std::uint64_t seed);

void save_train_state(const std::string& path, Trainer& trainer, const nlohmann::json& progress);

} // namespace cellpilot::training
