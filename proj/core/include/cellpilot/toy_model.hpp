#pragma once

#include "cellpilot/model.hpp"

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cellpilot {

// Token sequence produced by the prompt encoder: one row per point, two per box.
struct PromptEmbedding {
    Matrix tokens; // count x embed_dim
};

// Desk-scale promptable segmentation backbone: ViT-style image encoder,
// Fourier-feature prompt encoder and a two-way transformer mask decoder with
// a sub-pixel upsampling head.
class ToyModel final : public PromptableModel {
  public:
    explicit ToyModel(ModelConfig config = {});
    ~ToyModel() override;

    const ModelConfig& config() const noexcept { return config_; }
    int input_size() const override { return config_.input_size; }

    // Adds LoRA adapters to the configured encoder projections, freezes the
    // base encoder and leaves adapters, prompt encoder and decoder trainable.
    // The zero-initialised B factor keeps every output unchanged.
    void inject_lora();
    void inject_lora(const ModelConfig& lora_config);
    bool lora_injected() const noexcept { return lora_injected_; }

    PromptEmbedding encode_prompts(const PromptGroup& prompts) const;

    // Differentiable forward passes.
    ag::Var encode_graph(ag::Tape& tape, const Image& image) const;
    ag::Var decode_graph(ag::Tape& tape, const ag::Var& embedding, const PromptGroup& prompts) const;

    std::vector<ag::Parameter*> parameters();
    std::vector<const ag::Parameter*> parameters() const;
    ag::Parameter* find_parameter(const std::string& name);

    std::size_t parameter_count(const std::function<bool(const ag::Parameter&)>& pred = {}) const;
    std::size_t trainable_parameter_count() const;

    // Parameters grouped by role, for census checks.
    static bool is_adapter(const ag::Parameter& p);
    static bool is_prompt_encoder(const ag::Parameter& p);
    static bool is_decoder(const ag::Parameter& p);
    static bool is_encoder_base(const ag::Parameter& p);

  protected:
    ImageEmbedding do_encode(const Image& image) const override;
    LogitGrid do_decode(const ImageEmbedding& embedding, const PromptGroup& prompts) const override;

  private:
    struct Impl;
    ModelConfig config_;
    bool lora_injected_ = false;
    std::unique_ptr<Impl> impl_;
};

// Row-major (pixel, [r,g,b] per pixel of the patch) patch matrix of a
// normalised image.
Matrix patchify(const Image& image, int patch);

} // namespace cellpilot
