#include "cellpilot/toy_model.hpp"

#include "cellpilot/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace cellpilot {

using ag::Parameter;
using ag::Tape;
using ag::Var;

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
    std::normal_distribution<double> dist(0.0, std);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

struct ParamStore {
    std::deque<Parameter> params;

    Parameter* make(std::string name, Matrix value, bool trainable = true) {
        params.emplace_back(std::move(name), std::move(value), trainable);
        return &params.back();
    }
};

struct Lora {
    Parameter* a = nullptr;
    Parameter* b = nullptr;
    double scale = 1.0;
};

struct Linear {
    Parameter* weight = nullptr; // out x in
    Parameter* bias = nullptr;   // 1 x out
    std::optional<Lora> lora;

    Var forward(Tape& t, const Var& x) const {
        Var y = ag::add_row(ag::matmul_nt(x, t.param(*weight)), t.param(*bias));
        if (lora) {
            Var delta = ag::matmul_nt(ag::matmul_nt(x, t.param(*lora->a)), t.param(*lora->b));
            y = ag::add(y, ag::scale(delta, lora->scale));
        }
        return y;
    }
};

Linear make_linear(ParamStore& s, const std::string& name, int in, int out, double std, Rng& rng) {
    return Linear{s.make(name + ".weight", gaussian(out, in, std, rng)),
                  s.make(name + ".bias", Matrix::Zero(1, out)), std::nullopt};
}

struct Norm {
    Parameter* gamma = nullptr;
    Parameter* beta = nullptr;

    Var forward(Tape& t, const Var& x) const { return ag::layer_norm(x, t.param(*gamma), t.param(*beta)); }
};

Norm make_norm(ParamStore& s, const std::string& name, int dim) {
    return Norm{s.make(name + ".gamma", Matrix::Ones(1, dim)), s.make(name + ".beta", Matrix::Zero(1, dim))};
}

struct Attention {
    Linear q, k, v, out;
    int heads = 1;

    Var forward(Tape& t, const Var& qi, const Var& ki, const Var& vi) const {
        return out.forward(t, ag::attention(q.forward(t, qi), k.forward(t, ki), v.forward(t, vi), heads));
    }
};

Attention make_attention(ParamStore& s, const std::string& name, int dim, int heads, double std, Rng& rng) {
    Attention a;
    a.q = make_linear(s, name + ".q", dim, dim, std, rng);
    a.k = make_linear(s, name + ".k", dim, dim, std, rng);
    a.v = make_linear(s, name + ".v", dim, dim, std, rng);
    a.out = make_linear(s, name + ".proj", dim, dim, std, rng);
    a.heads = heads;
    return a;
}

struct EncoderBlock {
    Norm norm1;
    Attention attn;
    Norm norm2;
    Linear fc1, fc2;
};

struct DecoderBlock {
    Attention self_attn;
    Norm norm1;
    Attention cross_token_to_image;
    Norm norm2;
    Linear mlp1, mlp2;
    Norm norm3;
    Attention cross_image_to_token;
    Norm norm4;
};

} // namespace

struct ToyModel::Impl {
    ParamStore store;

    // image encoder
    Linear patch_embed;
    Parameter* pos_embed = nullptr;
    std::vector<EncoderBlock> blocks;
    Norm neck;

    // prompt encoder
    Parameter* pe_gaussian = nullptr; // 2 x dim/2, frozen
    Parameter* point_embed = nullptr; // rows: positive, negative, box corner tl, box corner br
    Parameter* no_mask = nullptr;

    // mask decoder
    Parameter* mask_token = nullptr;
    std::vector<DecoderBlock> dblocks;
    Attention final_attn;
    Norm final_norm;
    Linear upscale;
    Linear hyper1, hyper2;

    // Fourier features of normalised (x, y) positions in [0, 1].
    Matrix positional(const Matrix& xy, double pe_scale) const {
        Matrix proj = ((xy.array() * 2.0 - 1.0).matrix() * pe_gaussian->value) *
                      (2.0 * std::numbers::pi * pe_scale);
        const Eigen::Index h = proj.cols();
        Matrix out(xy.rows(), 2 * h);
        out.leftCols(h) = proj.array().sin().matrix();
        out.rightCols(h) = proj.array().cos().matrix();
        return out;
    }
};

ToyModel::ToyModel(ModelConfig config) : config_(std::move(config)), impl_(std::make_unique<Impl>()) {
    ModelConfig base = config_;
    base.lora_rank = std::max(base.lora_rank, 0);
    base.validate();

    Rng rng(config_.seed * 0x9E3779B97F4A7C15ULL + 17);
    auto& s = impl_->store;
    const int d = config_.embed_dim;
    const int p = config_.patch_size;
    const int tokens = config_.grid_size() * config_.grid_size();
    const int patch_dim = p * p * 3;
    const double enc_std = 0.02;

    impl_->patch_embed = make_linear(s, "encoder.patch_embed", patch_dim, d, 1.0 / std::sqrt(patch_dim), rng);
    impl_->pos_embed = s.make("encoder.pos_embed", gaussian(tokens, d, enc_std, rng));
    for (int b = 0; b < config_.encoder_depth; ++b) {
        const std::string n = "encoder.blocks." + std::to_string(b);
        EncoderBlock blk;
        blk.norm1 = make_norm(s, n + ".norm1", d);
        blk.attn = make_attention(s, n + ".attn", d, config_.encoder_heads, enc_std, rng);
        blk.norm2 = make_norm(s, n + ".norm2", d);
        blk.fc1 = make_linear(s, n + ".fc1", d, d * config_.mlp_ratio, enc_std, rng);
        blk.fc2 = make_linear(s, n + ".fc2", d * config_.mlp_ratio, d, enc_std, rng);
        impl_->blocks.push_back(blk);
    }
    impl_->neck = make_norm(s, "encoder.neck_norm", d);

    impl_->pe_gaussian = s.make("prompt.pe_gaussian", gaussian(2, d / 2, 1.0, rng), false);
    impl_->point_embed = s.make("prompt.point_embed", gaussian(4, d, 1.0, rng));
    impl_->no_mask = s.make("prompt.no_mask_embed", gaussian(1, d, 1.0, rng));

    const double dec_std = 1.0 / std::sqrt(static_cast<double>(d));
    impl_->mask_token = s.make("decoder.mask_token", gaussian(1, d, 1.0, rng));
    for (int b = 0; b < config_.decoder_depth; ++b) {
        const std::string n = "decoder.blocks." + std::to_string(b);
        DecoderBlock blk;
        blk.self_attn = make_attention(s, n + ".self_attn", d, config_.decoder_heads, dec_std, rng);
        blk.norm1 = make_norm(s, n + ".norm1", d);
        blk.cross_token_to_image = make_attention(s, n + ".cross_t2i", d, config_.decoder_heads, dec_std, rng);
        blk.norm2 = make_norm(s, n + ".norm2", d);
        blk.mlp1 = make_linear(s, n + ".mlp1", d, config_.decoder_mlp_dim, dec_std, rng);
        blk.mlp2 = make_linear(s, n + ".mlp2", config_.decoder_mlp_dim, d,
                               1.0 / std::sqrt(static_cast<double>(config_.decoder_mlp_dim)), rng);
        blk.norm3 = make_norm(s, n + ".norm3", d);
        blk.cross_image_to_token = make_attention(s, n + ".cross_i2t", d, config_.decoder_heads, dec_std, rng);
        blk.norm4 = make_norm(s, n + ".norm4", d);
        impl_->dblocks.push_back(blk);
    }
    impl_->final_attn = make_attention(s, "decoder.final_attn", d, config_.decoder_heads, dec_std, rng);
    impl_->final_norm = make_norm(s, "decoder.final_norm", d);
    impl_->upscale = make_linear(s, "decoder.upscale", d, p * p * config_.upscale_channels, dec_std, rng);
    impl_->hyper1 = make_linear(s, "decoder.hyper.fc1", d, d, dec_std, rng);
    impl_->hyper2 = make_linear(s, "decoder.hyper.fc2", d, config_.upscale_channels, dec_std, rng);
}

ToyModel::~ToyModel() = default;

void ToyModel::inject_lora() { inject_lora(config_); }

void ToyModel::inject_lora(const ModelConfig& lora_config) {
    if (lora_injected_) throw ConfigError("LoRA adapters already injected");
    if (lora_config.lora_rank <= 0) throw ConfigError("lora_rank must be >= 1 to inject adapters");
    static const std::vector<std::string> known = {"q", "k", "v", "proj", "fc1", "fc2"};
    for (const auto& t : lora_config.lora_targets) {
        if (std::find(known.begin(), known.end(), t) == known.end())
            throw ConfigError("unknown LoRA target '" + t + "'");
    }
    if (lora_config.lora_targets.empty()) throw ConfigError("no LoRA targets given");

    auto targets_of = [](EncoderBlock& b) {
        return std::vector<std::pair<std::string, Linear*>>{{"q", &b.attn.q},    {"k", &b.attn.k},
                                                            {"v", &b.attn.v},    {"proj", &b.attn.out},
                                                            {"fc1", &b.fc1},     {"fc2", &b.fc2}};
    };
    // Rank check before mutating anything.
    for (auto& blk : impl_->blocks) {
        for (auto& [name, lin] : targets_of(blk)) {
            if (std::find(lora_config.lora_targets.begin(), lora_config.lora_targets.end(), name) ==
                lora_config.lora_targets.end())
                continue;
            const auto in = lin->weight->value.cols(), out = lin->weight->value.rows();
            if (lora_config.lora_rank > std::min(in, out))
                throw ConfigError("lora_rank exceeds projection dimensions");
        }
    }

    Rng rng(lora_config.seed * 0xD1B54A32D192ED03ULL + 101);
    auto& s = impl_->store;
    const int r = lora_config.lora_rank;
    for (auto& blk : impl_->blocks) {
        for (auto& [name, lin] : targets_of(blk)) {
            if (std::find(lora_config.lora_targets.begin(), lora_config.lora_targets.end(), name) ==
                lora_config.lora_targets.end())
                continue;
            const auto in = lin->weight->value.cols(), out = lin->weight->value.rows();
            const std::string base = lin->weight->name.substr(0, lin->weight->name.size() - 7);
            Lora l;
            l.a = s.make(base + ".lora_A", uniform(r, in, 1.0 / std::sqrt(static_cast<double>(in)), rng));
            l.b = s.make(base + ".lora_B", Matrix::Zero(out, r));
            l.scale = lora_config.lora_alpha / r;
            lin->lora = l;
        }
    }
    for (auto& p : impl_->store.params) {
        if (is_encoder_base(p)) p.trainable = false;
    }
    config_.lora_rank = lora_config.lora_rank;
    config_.lora_alpha = lora_config.lora_alpha;
    config_.lora_targets = lora_config.lora_targets;
    lora_injected_ = true;
}

bool ToyModel::is_adapter(const ag::Parameter& p) {
    return p.name.find(".lora_A") != std::string::npos || p.name.find(".lora_B") != std::string::npos;
}
bool ToyModel::is_prompt_encoder(const ag::Parameter& p) { return p.name.rfind("prompt.", 0) == 0; }
bool ToyModel::is_decoder(const ag::Parameter& p) { return p.name.rfind("decoder.", 0) == 0; }
bool ToyModel::is_encoder_base(const ag::Parameter& p) {
    return p.name.rfind("encoder.", 0) == 0 && !is_adapter(p);
}

std::vector<ag::Parameter*> ToyModel::parameters() {
    std::vector<ag::Parameter*> out;
    for (auto& p : impl_->store.params) out.push_back(&p);
    return out;
}

std::vector<const ag::Parameter*> ToyModel::parameters() const {
    std::vector<const ag::Parameter*> out;
    for (const auto& p : impl_->store.params) out.push_back(&p);
    return out;
}

ag::Parameter* ToyModel::find_parameter(const std::string& name) {
    for (auto& p : impl_->store.params)
        if (p.name == name) return &p;
    return nullptr;
}

std::size_t ToyModel::parameter_count(const std::function<bool(const ag::Parameter&)>& pred) const {
    std::size_t n = 0;
    for (const auto& p : impl_->store.params)
        if (!pred || pred(p)) n += p.size();
    return n;
}

std::size_t ToyModel::trainable_parameter_count() const {
    return parameter_count([](const ag::Parameter& p) { return p.trainable; });
}

Matrix patchify(const Image& image, int patch) {
    const int gh = image.height() / patch, gw = image.width() / patch;
    Matrix out(gh * gw, patch * patch * 3);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
            auto row = out.row(gy * gw + gx);
            int k = 0;
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int c = 0; c < 3; ++c)
                        row(k++) = (image.at(gy * patch + py, gx * patch + px, c) - 0.5) / 0.25;
        }
    return out;
}

Var ToyModel::encode_graph(Tape& t, const Image& image) const {
    if (image.height() != config_.input_size || image.width() != config_.input_size || image.channels() != 3)
        throw ShapeError("toy encoder expects a square input of size " + std::to_string(config_.input_size));
    Var x = impl_->patch_embed.forward(t, t.constant(patchify(image, config_.patch_size)));
    x = ag::add(x, t.param(*impl_->pos_embed));
    for (const auto& blk : impl_->blocks) {
        Var h = blk.norm1.forward(t, x);
        x = ag::add(x, blk.attn.forward(t, h, h, h));
        h = blk.norm2.forward(t, x);
        x = ag::add(x, blk.fc2.forward(t, ag::gelu(blk.fc1.forward(t, h))));
    }
    return impl_->neck.forward(t, x);
}

namespace {

Matrix prompt_positions(const PromptGroup& prompts, int size) {
    const Eigen::Index n = static_cast<Eigen::Index>(prompts.points.size() + 2 * prompts.boxes.size());
    Matrix xy(n, 2);
    Eigen::Index i = 0;
    auto put = [&](int row, int col) {
        xy(i, 0) = (col + 0.5) / size;
        xy(i, 1) = (row + 0.5) / size;
        ++i;
    };
    for (const auto& p : prompts.points) put(p.row, p.col);
    for (const auto& b : prompts.boxes) {
        put(b.row_min, b.col_min);
        put(b.row_max, b.col_max);
    }
    return xy;
}

} // namespace

Var ToyModel::decode_graph(Tape& t, const Var& embedding, const PromptGroup& prompts) const {
    const int gs = config_.grid_size();
    const int d = config_.embed_dim;
    if (embedding.rows() != gs * gs || embedding.cols() != d)
        throw ModelError("embedding shape does not match this model");
    check_prompt_bounds(prompts, config_.input_size, config_.input_size);

    const Impl& m = *impl_;
    // Sparse prompt tokens
    std::vector<Var> token_rows{t.param(*m.mask_token)};
    if (!prompts.empty()) {
        const Matrix pe = m.positional(prompt_positions(prompts, config_.input_size), config_.pe_scale);
        Var table = t.param(*m.point_embed);
        Eigen::Index i = 0;
        auto token = [&](int type) {
            token_rows.push_back(ag::add(t.constant(pe.row(i)), ag::rows(table, type, 1)));
            ++i;
        };
        for (const auto& p : prompts.points) token(p.polarity == Polarity::positive ? 0 : 1);
        for (std::size_t b = 0; b < prompts.boxes.size(); ++b) {
            token(2);
            token(3);
        }
    }
    Var tokens = ag::concat_rows(token_rows);

    Matrix grid_xy(gs * gs, 2);
    for (int gy = 0; gy < gs; ++gy)
        for (int gx = 0; gx < gs; ++gx) {
            grid_xy(gy * gs + gx, 0) = (gx + 0.5) / gs;
            grid_xy(gy * gs + gx, 1) = (gy + 0.5) / gs;
        }
    Var key_pe = t.constant(m.positional(grid_xy, config_.pe_scale));

    Var queries = tokens;
    const Var query_pe = tokens;
    Var keys = ag::add_row(embedding, t.param(*m.no_mask));
    for (const auto& blk : m.dblocks) {
        Var q = ag::add(queries, query_pe);
        queries = blk.norm1.forward(t, ag::add(queries, blk.self_attn.forward(t, q, q, queries)));
        q = ag::add(queries, query_pe);
        Var k = ag::add(keys, key_pe);
        queries = blk.norm2.forward(t, ag::add(queries, blk.cross_token_to_image.forward(t, q, k, keys)));
        queries = blk.norm3.forward(t, ag::add(queries, blk.mlp2.forward(t, ag::gelu(blk.mlp1.forward(t, queries)))));
        q = ag::add(queries, query_pe);
        k = ag::add(keys, key_pe);
        keys = blk.norm4.forward(t, ag::add(keys, blk.cross_image_to_token.forward(t, k, q, queries)));
    }
    {
        Var q = ag::add(queries, query_pe);
        Var k = ag::add(keys, key_pe);
        queries = m.final_norm.forward(t, ag::add(queries, m.final_attn.forward(t, q, k, keys)));
    }

    const int p = config_.patch_size;
    const int c = config_.upscale_channels;
    Var mask_out = ag::rows(queries, 0, 1);
    Var hyper = m.hyper2.forward(t, ag::gelu(m.hyper1.forward(t, mask_out))); // 1 x c
    Var up = ag::gelu(m.upscale.forward(t, keys));                            // T x p*p*c
    Var per_pixel = ag::reshape(up, static_cast<Eigen::Index>(gs) * gs * p * p, c);
    Var logits = ag::matmul_nt(per_pixel, hyper);
    logits = ag::reshape(logits, static_cast<Eigen::Index>(gs) * gs, p * p);
    return ag::pixel_shuffle(logits, gs, gs, p);
}

PromptEmbedding ToyModel::encode_prompts(const PromptGroup& prompts) const {
    check_prompt_bounds(prompts, config_.input_size, config_.input_size);
    PromptEmbedding out;
    const Eigen::Index n = static_cast<Eigen::Index>(prompts.points.size() + 2 * prompts.boxes.size());
    out.tokens = Matrix(n, config_.embed_dim);
    if (n == 0) return out;
    const Matrix pe = impl_->positional(prompt_positions(prompts, config_.input_size), config_.pe_scale);
    const Matrix& table = impl_->point_embed->value;
    Eigen::Index i = 0;
    for (const auto& p : prompts.points) {
        out.tokens.row(i) = pe.row(i) + table.row(p.polarity == Polarity::positive ? 0 : 1);
        ++i;
    }
    for (std::size_t b = 0; b < prompts.boxes.size(); ++b) {
        out.tokens.row(i) = pe.row(i) + table.row(2);
        ++i;
        out.tokens.row(i) = pe.row(i) + table.row(3);
        ++i;
    }
    return out;
}

ImageEmbedding ToyModel::do_encode(const Image& image) const {
    Tape t(false);
    Var e = encode_graph(t, image);
    ImageEmbedding emb;
    emb.grid_h = emb.grid_w = config_.grid_size();
    emb.channels = config_.embed_dim;
    emb.features = e.value();
    return emb;
}

LogitGrid ToyModel::do_decode(const ImageEmbedding& embedding, const PromptGroup& prompts) const {
    Tape t(false);
    Var e = t.constant(embedding.features);
    return LogitGrid{decode_graph(t, e, prompts).value()};
}

} // namespace cellpilot
