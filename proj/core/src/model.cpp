#include "cellpilot/model.hpp"

#include "cellpilot/errors.hpp"

namespace cellpilot {

void ModelConfig::validate() const {
    if (variant != "toy") throw ConfigError("unknown model variant '" + variant + "'");
    if (input_size <= 0 || patch_size <= 0 || input_size % patch_size != 0)
        throw ConfigError("input_size must be a positive multiple of patch_size");
    if (embed_dim <= 0 || embed_dim % 2 != 0) throw ConfigError("embed_dim must be positive and even");
    if (encoder_heads <= 0 || embed_dim % encoder_heads != 0)
        throw ConfigError("embed_dim must be divisible by encoder_heads");
    if (decoder_heads <= 0 || embed_dim % decoder_heads != 0)
        throw ConfigError("embed_dim must be divisible by decoder_heads");
    if (encoder_depth < 0 || decoder_depth < 0) throw ConfigError("depths must be non-negative");
    if (mlp_ratio <= 0 || decoder_mlp_dim <= 0 || upscale_channels <= 0)
        throw ConfigError("layer widths must be positive");
    if (lora_rank < 0) throw ConfigError("lora_rank must be non-negative");
    if (lora_rank > 0 && lora_alpha <= 0) throw ConfigError("lora_alpha must be positive");
    if (mask_feedback) throw ConfigError("mask_feedback is not supported by the toy backbone");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"variant", c.variant},
                       {"input_size", c.input_size},
                       {"patch_size", c.patch_size},
                       {"embed_dim", c.embed_dim},
                       {"encoder_depth", c.encoder_depth},
                       {"encoder_heads", c.encoder_heads},
                       {"mlp_ratio", c.mlp_ratio},
                       {"decoder_depth", c.decoder_depth},
                       {"decoder_heads", c.decoder_heads},
                       {"decoder_mlp_dim", c.decoder_mlp_dim},
                       {"upscale_channels", c.upscale_channels},
                       {"pe_scale", c.pe_scale},
                       {"lora_rank", c.lora_rank},
                       {"lora_alpha", c.lora_alpha},
                       {"lora_targets", c.lora_targets},
                       {"mask_feedback", c.mask_feedback},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.variant = j.value("variant", d.variant);
    c.input_size = j.value("input_size", d.input_size);
    c.patch_size = j.value("patch_size", d.patch_size);
    c.embed_dim = j.value("embed_dim", d.embed_dim);
    c.encoder_depth = j.value("encoder_depth", d.encoder_depth);
    c.encoder_heads = j.value("encoder_heads", d.encoder_heads);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.decoder_depth = j.value("decoder_depth", d.decoder_depth);
    c.decoder_heads = j.value("decoder_heads", d.decoder_heads);
    c.decoder_mlp_dim = j.value("decoder_mlp_dim", d.decoder_mlp_dim);
    c.upscale_channels = j.value("upscale_channels", d.upscale_channels);
    c.pe_scale = j.value("pe_scale", d.pe_scale);
    c.lora_rank = j.value("lora_rank", d.lora_rank);
    c.lora_alpha = j.value("lora_alpha", d.lora_alpha);
    c.lora_targets = j.value("lora_targets", d.lora_targets);
    c.mask_feedback = j.value("mask_feedback", d.mask_feedback);
    c.seed = j.value("seed", d.seed);
}

void PromptGroup::add(const Prompt& p) {
    if (const auto* pt = std::get_if<PointPrompt>(&p)) {
        points.push_back(*pt);
    } else {
        boxes.push_back(std::get<BoxPrompt>(p));
    }
}

BinaryMask LogitGrid::binarize(double threshold) const {
    BinaryMask m(height(), width());
    auto d = m.data();
    const double* v = values.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = v[i] > threshold ? 1 : 0;
    return m;
}

namespace {
std::atomic<std::uint64_t> next_model_id{1};
}

PromptableModel::PromptableModel() : id_(next_model_id++) {}

ImageEmbedding PromptableModel::encode_image(const Image& image) const {
    const int s = input_size();
    if (image.height() != s || image.width() != s || image.channels() != 3) {
        throw ShapeError("model expects a " + std::to_string(s) + "x" + std::to_string(s) +
                         "x3 image, got " + std::to_string(image.height()) + "x" +
                         std::to_string(image.width()) + "x" + std::to_string(image.channels()));
    }
    count_encode();
    ImageEmbedding emb = do_encode(image);
    emb.model_id = id_;
    emb.image_key = image.content_hash();
    return emb;
}

LogitGrid PromptableModel::decode_mask(const ImageEmbedding& embedding, const PromptGroup& prompts) const {
    if (embedding.model_id != id_) throw ModelError("embedding was produced by a different model instance");
    check_prompt_bounds(prompts, input_size(), input_size());
    ++decoder_calls_;
    return do_decode(embedding, prompts);
}

std::vector<LogitGrid> PromptableModel::decode_masks(const ImageEmbedding& embedding,
                                                     std::span<const PromptGroup> groups) const {
    std::vector<LogitGrid> out;
    out.reserve(groups.size());
    for (const auto& g : groups) out.push_back(decode_mask(embedding, g));
    return out;
}

void check_prompt_bounds(const PromptGroup& prompts, int height, int width) {
    auto bad = [&](int r, int c) { return r < 0 || c < 0 || r >= height || c >= width; };
    for (const auto& p : prompts.points) {
        if (bad(p.row, p.col))
            throw RangeError("point (" + std::to_string(p.row) + "," + std::to_string(p.col) +
                             ") outside " + std::to_string(height) + "x" + std::to_string(width));
    }
    for (const auto& b : prompts.boxes) {
        if (bad(b.row_min, b.col_min) || bad(b.row_max, b.col_max) || b.row_min > b.row_max ||
            b.col_min > b.col_max)
            throw RangeError("box outside image bounds or inverted");
    }
}

Matrix lora_linear_forward(const LoraAdapter& adapter, const Matrix& weight, const Matrix& bias,
                           const Matrix& x) {
    if (weight.cols() != x.rows()) throw ShapeError("lora: input width does not match weight");
    if (adapter.a.cols() != weight.cols() || adapter.b.rows() != weight.rows() ||
        adapter.b.cols() != adapter.a.rows())
        throw ShapeError("lora: adapter shape does not match weight");
    if (bias.size() != weight.rows()) throw ShapeError("lora: bias length does not match weight");
    Matrix y = weight * x;
    y.noalias() += adapter.scale() * (adapter.b * (adapter.a * x));
    const Eigen::Map<const Eigen::VectorXd> bv(bias.data(), bias.size());
    y.colwise() += bv;
    return y;
}

} // namespace cellpilot
