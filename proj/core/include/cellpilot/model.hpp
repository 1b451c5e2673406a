#pragma once

#include "cellpilot/autograd.hpp"
#include "cellpilot/image.hpp"
#include "cellpilot/mask.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cellpilot {

using ag::Matrix;

struct ModelConfig {
    std::string variant = "toy";
    int input_size = 128;
    int patch_size = 8;
    int embed_dim = 64;
    int encoder_depth = 4;
    int encoder_heads = 4;
    int mlp_ratio = 4;
    int decoder_depth = 2;
    int decoder_heads = 4;
    int decoder_mlp_dim = 128;
    int upscale_channels = 8;
    double pe_scale = 1.0;
    int lora_rank = 4;
    double lora_alpha = 4.0;
    std::vector<std::string> lora_targets = {"q", "v"};
    // Dense mask-logit feedback on refinement steps. Not supported by the toy
    // backbone; kept so configurations can state it explicitly.
    bool mask_feedback = false;
    std::uint64_t seed = 0;

    int grid_size() const { return input_size / patch_size; }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Points and boxes conditioning a single mask, in model input coordinates.
struct PromptGroup {
    std::vector<PointPrompt> points;
    std::vector<BoxPrompt> boxes;

    bool empty() const noexcept { return points.empty() && boxes.empty(); }
    void add(const Prompt& p);
};

struct ImageEmbedding {
    int grid_h = 0;
    int grid_w = 0;
    int channels = 0;
    Matrix features; // (grid_h * grid_w) x channels
    std::uint64_t model_id = 0;
    std::uint64_t image_key = 0;
};

// Mask logits at model input resolution.
struct LogitGrid {
    Matrix values;

    int height() const { return static_cast<int>(values.rows()); }
    int width() const { return static_cast<int>(values.cols()); }
    BinaryMask binarize(double threshold = 0.0) const;
};

// Image encoder + prompt encoder + mask decoder contract. Forward passes are
// const and re-entrant; call counters are instrumentation for tests.
class PromptableModel {
  public:
    PromptableModel();
    virtual ~PromptableModel() = default;
    PromptableModel(const PromptableModel&) = delete;
    PromptableModel& operator=(const PromptableModel&) = delete;

    virtual int input_size() const = 0;

    ImageEmbedding encode_image(const Image& image) const;
    LogitGrid decode_mask(const ImageEmbedding& embedding, const PromptGroup& prompts) const;
    std::vector<LogitGrid> decode_masks(const ImageEmbedding& embedding,
                                        std::span<const PromptGroup> groups) const;

    std::uint64_t instance_id() const noexcept { return id_; }
    std::size_t encoder_calls() const noexcept { return encoder_calls_.load(); }
    std::size_t decoder_calls() const noexcept { return decoder_calls_.load(); }
    void reset_counters() noexcept {
        encoder_calls_ = 0;
        decoder_calls_ = 0;
    }

  protected:
    virtual ImageEmbedding do_encode(const Image& image) const = 0;
    virtual LogitGrid do_decode(const ImageEmbedding& embedding, const PromptGroup& prompts) const = 0;

    void count_encode() const noexcept { ++encoder_calls_; }

  private:
    std::uint64_t id_;
    mutable std::atomic<std::size_t> encoder_calls_{0};
    mutable std::atomic<std::size_t> decoder_calls_{0};
};

// Throws RangeError unless every coordinate lies in [0, size).
void check_prompt_bounds(const PromptGroup& prompts, int height, int width);

// ---- LoRA -----------------------------------------------------------------

struct LoraAdapter {
    Matrix a; // rank x d_in
    Matrix b; // d_out x rank
    double alpha = 1.0;

    int rank() const { return static_cast<int>(a.rows()); }
    double scale() const { return alpha / static_cast<double>(rank()); }
};

// y = W x + bias + (alpha / r) B (A x); x holds one input per column.
Matrix lora_linear_forward(const LoraAdapter& adapter, const Matrix& weight, const Matrix& bias,
                           const Matrix& x);

} // namespace cellpilot
