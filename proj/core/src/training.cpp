#include "cellpilot/training.hpp"

#include "cellpilot/checkpoint.hpp"
#include "cellpilot/errors.hpp"
#include "cellpilot/evalharness.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace cellpilot::training {

namespace fs = std::filesystem;

// ---- configuration ----------------------------------------------------------

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (grad_accumulation_steps < 1) throw ConfigError("grad_accumulation_steps must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (points_per_image < 0 || boxes_per_image < 0 || points_per_image + boxes_per_image == 0)
        throw ConfigError("prompt quotas must be >= 0 and not both zero");
    if (max_corrections < 0) throw ConfigError("max_corrections must be >= 0");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("eps must be > 0");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (!(validation_fraction >= 0 && validation_fraction < 1)) throw ConfigError("validation_fraction must lie in [0, 1)");
    if (val_instances_per_image < 1) throw ConfigError("val_instances_per_image must be >= 1");
    augmentation.validate();
    model.validate();
}

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw ConfigError("bad value for '" + key + "': '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("bad boolean for '" + key + "': '" + v + "'");
}

std::vector<std::string> parse_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void set_key(TrainConfig& c, const std::string& key, const std::string& v) {
    auto i = [&](int& f) { f = parse_number<int>(key, v); };
    auto d = [&](double& f) { f = parse_number<double>(key, v); };
    auto& a = c.augmentation;
    auto& m = c.model;
    if (key == "epochs") i(c.epochs);
    else if (key == "batch_size") i(c.batch_size);
    else if (key == "grad_accumulation_steps") i(c.grad_accumulation_steps);
    else if (key == "learning_rate") d(c.learning_rate);
    else if (key == "points_per_image") i(c.points_per_image);
    else if (key == "boxes_per_image") i(c.boxes_per_image);
    else if (key == "max_corrections") i(c.max_corrections);
    else if (key == "quota_mode") {
        if (v == "per_image") c.quota_mode = QuotaMode::per_image;
        else if (v == "per_instance") c.quota_mode = QuotaMode::per_instance;
        else throw ConfigError("quota_mode must be per_image or per_instance");
    } else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
    else if (key == "optimizer") {
        if (v == "schedule_free_adamw") c.optimizer = OptimizerKind::schedule_free_adamw;
        else if (v == "sgd") c.optimizer = OptimizerKind::sgd;
        else throw ConfigError("optimizer must be schedule_free_adamw or sgd");
    } else if (key == "weight_decay") d(c.weight_decay);
    else if (key == "beta1") d(c.beta1);
    else if (key == "beta2") d(c.beta2);
    else if (key == "eps") d(c.eps);
    else if (key == "warmup_steps") i(c.warmup_steps);
    else if (key == "augment") c.augment = parse_bool(key, v);
    else if (key == "validation_fraction") d(c.validation_fraction);
    else if (key == "val_instances_per_image") i(c.val_instances_per_image);
    else if (key == "augment.scale_min") d(a.scale_min);
    else if (key == "augment.scale_max") d(a.scale_max);
    else if (key == "augment.aspect_min") d(a.aspect_min);
    else if (key == "augment.aspect_max") d(a.aspect_max);
    else if (key == "augment.hue_limit_deg") d(a.hue_limit_deg);
    else if (key == "augment.saturation_limit") d(a.saturation_limit);
    else if (key == "augment.value_limit") d(a.value_limit);
    else if (key == "augment.d4_probability") d(a.d4_probability);
    else if (key == "augment.crop_probability") d(a.crop_probability);
    else if (key == "augment.hsv_probability") d(a.hsv_probability);
    else if (key == "model.variant") m.variant = v;
    else if (key == "model.input_size") i(m.input_size);
    else if (key == "model.patch_size") i(m.patch_size);
    else if (key == "model.embed_dim") i(m.embed_dim);
    else if (key == "model.encoder_depth") i(m.encoder_depth);
    else if (key == "model.encoder_heads") i(m.encoder_heads);
    else if (key == "model.mlp_ratio") i(m.mlp_ratio);
    else if (key == "model.decoder_depth") i(m.decoder_depth);
    else if (key == "model.decoder_heads") i(m.decoder_heads);
    else if (key == "model.decoder_mlp_dim") i(m.decoder_mlp_dim);
    else if (key == "model.upscale_channels") i(m.upscale_channels);
    else if (key == "model.pe_scale") d(m.pe_scale);
    else if (key == "model.lora_rank") i(m.lora_rank);
    else if (key == "model.lora_alpha") d(m.lora_alpha);
    else if (key == "model.lora_targets") m.lora_targets = parse_list(v);
    else if (key == "model.mask_feedback") m.mask_feedback = parse_bool(key, v);
    else if (key == "model.seed") m.seed = parse_number<std::uint64_t>(key, v);
    else throw ConfigError("unknown configuration key '" + key + "'");
}

} // namespace

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig c;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        set_key(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_train_config(ss.str());
}

nlohmann::json to_json(const TrainConfig& c) {
    const auto& a = c.augmentation;
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"grad_accumulation_steps", c.grad_accumulation_steps},
            {"learning_rate", c.learning_rate},
            {"points_per_image", c.points_per_image},
            {"boxes_per_image", c.boxes_per_image},
            {"max_corrections", c.max_corrections},
            {"quota_mode", c.quota_mode == QuotaMode::per_image ? "per_image" : "per_instance"},
            {"seed", c.seed},
            {"optimizer", c.optimizer == OptimizerKind::sgd ? "sgd" : "schedule_free_adamw"},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"warmup_steps", c.warmup_steps},
            {"augment", c.augment},
            {"validation_fraction", c.validation_fraction},
            {"val_instances_per_image", c.val_instances_per_image},
            {"augmentation",
             {{"scale_min", a.scale_min},
              {"scale_max", a.scale_max},
              {"aspect_min", a.aspect_min},
              {"aspect_max", a.aspect_max},
              {"hue_limit_deg", a.hue_limit_deg},
              {"saturation_limit", a.saturation_limit},
              {"value_limit", a.value_limit},
              {"d4_probability", a.d4_probability},
              {"crop_probability", a.crop_probability},
              {"hsv_probability", a.hsv_probability}}},
            {"model", c.model}};
}

std::string format_train_config(const TrainConfig& c) {
    std::string out;
    const nlohmann::json j = to_json(c);
    auto emit = [&out](const std::string& key, const nlohmann::json& v) {
        std::string s;
        if (v.is_string()) s = v.get<std::string>();
        else if (v.is_array()) {
            for (const auto& e : v) s += (s.empty() ? "" : ",") + e.get<std::string>();
        } else s = v.dump();
        out += key + " = " + s + "\n";
    };
    for (const auto& [k, v] : j.items()) {
        if (k == "augmentation") {
            for (const auto& [k2, v2] : v.items()) emit("augment." + k2, v2);
        } else if (k == "model") {
            for (const auto& [k2, v2] : v.items()) emit("model." + k2, v2);
        } else {
            emit(k, v);
        }
    }
    return out;
}

// ---- loss ---------------------------------------------------------------------

namespace {

void check_loss_inputs(const Matrix& logits, const BinaryMask& gt) {
    if (logits.rows() != gt.height() || logits.cols() != gt.width())
        throw ShapeError("logits and ground truth differ in size");
    if (!logits.allFinite()) throw NumericError("non-finite logits in segmentation loss");
}

} // namespace

LossTerms segmentation_loss_terms(const Matrix& x, const BinaryMask& gt, double eps) {
    check_loss_inputs(x, gt);
    double spg = 0, sp = 0, sg = 0, bce = 0;
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            const double v = x(r, c);
            const double g = gt(static_cast<int>(r), static_cast<int>(c)) ? 1.0 : 0.0;
            const double p = 1.0 / (1.0 + std::exp(-v));
            spg += p * g;
            sp += p;
            sg += g;
            bce += std::max(v, 0.0) - v * g + std::log1p(std::exp(-std::fabs(v)));
        }
    LossTerms t;
    t.dice = 1.0 - (2.0 * spg + eps) / (sp + sg + eps);
    t.bce = bce / static_cast<double>(x.size());
    return t;
}

double segmentation_loss(const Matrix& logits, const BinaryMask& gt, double eps) {
    return segmentation_loss_terms(logits, gt, eps).total();
}

ag::Var segmentation_loss(const ag::Var& logits, const BinaryMask& gt, double eps) {
    const Matrix& x = logits.value();
    const LossTerms terms = segmentation_loss_terms(x, gt, eps);
    ag::Tape& t = *logits.tape();
    Matrix out(1, 1);
    out(0, 0) = terms.total();
    const int ix = logits.id(), self = static_cast<int>(t.size());
    return t.record(std::move(out), t.requires_grad(logits), [ix, self, gt, eps](ag::Tape& tp) {
        const double up = tp.grad(self)(0, 0);
        const Matrix& v = tp.value(ix);
        const Eigen::Index n = v.size();
        Matrix p = (1.0 / (1.0 + (-v.array()).exp())).matrix();
        double spg = 0, sp = p.sum(), sg = 0;
        for (Eigen::Index r = 0; r < v.rows(); ++r)
            for (Eigen::Index c = 0; c < v.cols(); ++c)
                if (gt(static_cast<int>(r), static_cast<int>(c))) {
                    spg += p(r, c);
                    sg += 1.0;
                }
        const double num = 2.0 * spg + eps, den = sp + sg + eps;
        Matrix& g = tp.grad(ix);
        for (Eigen::Index r = 0; r < v.rows(); ++r)
            for (Eigen::Index c = 0; c < v.cols(); ++c) {
                const double gi = gt(static_cast<int>(r), static_cast<int>(c)) ? 1.0 : 0.0;
                const double pi = p(r, c);
                // d dice / d p = -(2 g den - num) / den^2 ; dp/dx = p (1 - p)
                const double ddice = -(2.0 * gi * den - num) / (den * den) * pi * (1.0 - pi);
                const double dbce = (pi - gi) / static_cast<double>(n);
                g(r, c) += up * (ddice + dbce);
            }
    });
}

// ---- optimizers ---------------------------------------------------------------

void Sgd::step(const std::vector<ag::Parameter*>& params) {
    for (auto* p : params) {
        if (!p->trainable) continue;
        p->value -= lr_ * p->grad;
    }
    ++steps_;
}

nlohmann::json Sgd::state_meta() const { return {{"kind", "sgd"}, {"lr", lr_}, {"steps", steps_}}; }

void Sgd::load_state(const nlohmann::json& meta, const std::vector<std::pair<std::string, Matrix>>&) {
    if (meta.value("kind", "") != "sgd") throw ConfigError("optimizer state is not for SGD");
    steps_ = meta.at("steps").get<std::size_t>();
}

ScheduleFreeAdamW::Slot& ScheduleFreeAdamW::slot(ag::Parameter& p) {
    auto it = slots_.find(p.name);
    if (it == slots_.end()) {
        it = slots_.emplace(p.name, Slot{p.value, Matrix::Zero(p.value.rows(), p.value.cols())}).first;
    }
    return it->second;
}

double ScheduleFreeAdamW::current_lr() const {
    if (o_.warmup_steps > 0 && k_ < static_cast<std::size_t>(o_.warmup_steps))
        return o_.lr * static_cast<double>(k_ + 1) / o_.warmup_steps;
    return o_.lr;
}

void ScheduleFreeAdamW::step(const std::vector<ag::Parameter*>& params) {
    if (eval_) throw Error("optimizer step while parameters are in evaluation mode");
    const double lr = current_lr();
    const double bias2 = 1.0 - std::pow(o_.beta2, static_cast<double>(k_ + 1));
    lr_max_ = std::max(lr_max_, lr);
    const double weight = lr_max_ * lr_max_;
    weight_sum_ += weight;
    const double ckp1 = weight_sum_ > 0 ? weight / weight_sum_ : 0.0;
    for (auto* p : params) {
        if (!p->trainable) continue;
        Slot& s = slot(*p);
        s.v = o_.beta2 * s.v + (1.0 - o_.beta2) * p->grad.cwiseProduct(p->grad);
        Matrix g = (p->grad.array() / ((s.v.array() / bias2).sqrt() + o_.eps)).matrix();
        if (o_.weight_decay != 0.0) g += o_.weight_decay * p->value;
        // y <- (1 - c) y + c z ; y <- y + lr (beta1 (1 - c) - 1) g ; z <- z - lr g
        p->value = (1.0 - ckp1) * p->value + ckp1 * s.z;
        p->value += lr * (o_.beta1 * (1.0 - ckp1) - 1.0) * g;
        s.z -= lr * g;
    }
    ++k_;
}

void ScheduleFreeAdamW::eval_mode(const std::vector<ag::Parameter*>& params) {
    if (eval_) return;
    for (auto* p : params) {
        auto it = slots_.find(p->name);
        if (!p->trainable || it == slots_.end()) continue;
        p->value += (1.0 - 1.0 / o_.beta1) * (it->second.z - p->value);
    }
    eval_ = true;
}

void ScheduleFreeAdamW::train_mode(const std::vector<ag::Parameter*>& params) {
    if (!eval_) return;
    for (auto* p : params) {
        auto it = slots_.find(p->name);
        if (!p->trainable || it == slots_.end()) continue;
        p->value += (1.0 - o_.beta1) * (it->second.z - p->value);
    }
    eval_ = false;
}

nlohmann::json ScheduleFreeAdamW::state_meta() const {
    return {{"kind", "schedule_free_adamw"}, {"k", k_}, {"weight_sum", weight_sum_}, {"lr_max", lr_max_}};
}

std::vector<std::pair<std::string, Matrix>> ScheduleFreeAdamW::state_arrays() const {
    std::vector<std::pair<std::string, Matrix>> out;
    for (const auto& [name, s] : slots_) {
        out.emplace_back("z:" + name, s.z);
        out.emplace_back("v:" + name, s.v);
    }
    return out;
}

void ScheduleFreeAdamW::load_state(const nlohmann::json& meta,
                                   const std::vector<std::pair<std::string, Matrix>>& arrays) {
    if (meta.value("kind", "") != "schedule_free_adamw") throw ConfigError("optimizer state is not schedule-free AdamW");
    k_ = meta.at("k").get<std::size_t>();
    weight_sum_ = meta.at("weight_sum").get<double>();
    lr_max_ = meta.at("lr_max").get<double>();
    slots_.clear();
    for (const auto& [key, m] : arrays) {
        const std::string name = key.substr(2);
        auto& s = slots_[name];
        if (key.rfind("z:", 0) == 0) s.z = m;
        else if (key.rfind("v:", 0) == 0) s.v = m;
    }
    eval_ = false;
}

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg) {
    if (cfg.optimizer == OptimizerKind::sgd) return std::make_unique<Sgd>(cfg.learning_rate);
    return std::make_unique<ScheduleFreeAdamW>(ScheduleFreeAdamW::Options{
        cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.warmup_steps});
}

// ---- trainer ------------------------------------------------------------------

Trainer::Trainer(ToyModel& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
    optimizer_ = make_optimizer(cfg_);
}

std::vector<ag::Parameter*> Trainer::trainable() const {
    std::vector<ag::Parameter*> out;
    for (auto* p : model_.parameters())
        if (p->trainable) out.push_back(p);
    return out;
}

Trainer::Plan Trainer::plan_simulations(std::size_t count, Rng& rng) const {
    Plan plan;
    auto pick = [&](int quota, std::vector<std::size_t>& into) {
        if (cfg_.quota_mode == QuotaMode::per_instance) {
            for (std::size_t i = 0; i < count; ++i)
                for (int q = 0; q < quota; ++q) into.push_back(i);
            return;
        }
        std::vector<std::size_t> order(count);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        order.resize(std::min<std::size_t>(count, static_cast<std::size_t>(quota)));
        into = std::move(order);
    };
    pick(cfg_.points_per_image, plan.point_instances);
    pick(cfg_.boxes_per_image, plan.box_instances);
    return plan;
}

double Trainer::image_loss(const AnnotatedImage& item, std::uint64_t seed, double weight, std::size_t& sims) {
    const int size = model_.input_size();
    if (item.image.height() != size || item.image.width() != size)
        throw ShapeError("training images must be at the model input size");
    Rng rng(seed);
    augment::Sample sample{item.image, item.instances, {}};
    if (cfg_.augment) sample = augment::augment_sample(sample, cfg_.augmentation, rng, size);
    if (sample.masks.empty()) {
        spdlog::warn("train: image '{}' has no instances, skipped", item.id);
        return std::numeric_limits<double>::quiet_NaN();
    }

    const Plan plan = plan_simulations(sample.masks.size(), rng);
    promptsim::SimulationConfig sc;
    sc.max_corrections = cfg_.max_corrections;
    sc.placement = ClickPlacement::random;

    ag::Tape tape;
    const ag::Var emb = model_.encode_graph(tape, sample.image);
    const Matrix detached = emb.value();
    const promptsim::Predictor predict = [&](const PromptGroup& g) {
        ag::Tape nt(false);
        return LogitGrid{model_.decode_graph(nt, nt.constant(detached), g).value()};
    };

    std::vector<ag::Var> losses;
    auto simulate = [&](std::size_t inst, promptsim::StartMode mode) {
        const BinaryMask& gt = sample.masks[inst];
        const Prompt initial = promptsim::sample_initial_prompt(gt, mode, sc, rng);
        const int n = promptsim::draw_n(sc, rng);
        // Corrections are chosen without gradients; only the final decode is differentiated.
        const auto res = promptsim::simulate_interaction(predict, initial, gt, n, sc, rng);
        losses.push_back(segmentation_loss(model_.decode_graph(tape, emb, res.prompts.group()), gt));
    };
    for (std::size_t i : plan.point_instances) simulate(i, promptsim::StartMode::point);
    for (std::size_t i : plan.box_instances) simulate(i, promptsim::StartMode::box);

    ag::Var total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = ag::add(total, losses[i]);
    const double mean = total.scalar() / static_cast<double>(losses.size());
    if (!std::isfinite(mean)) throw NumericError("non-finite training loss on image '" + item.id + "'");
    tape.backward(ag::scale(total, weight / static_cast<double>(losses.size())));
    sims += losses.size();
    return mean;
}

StepResult Trainer::train_step(std::span<const AnnotatedImage* const> batch, std::span<const std::uint64_t> seeds) {
    if (batch.size() != seeds.size()) throw Error("train_step: one seed per image required");
    StepResult res;
    if (batch.empty()) return res;
    // Mean over the images of a micro-batch and over the accumulated micro-batches.
    const double weight = 1.0 / (static_cast<double>(batch.size()) * cfg_.grad_accumulation_steps);
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const double l = image_loss(*batch[i], seeds[i], weight, res.simulations);
        if (std::isnan(l)) continue;
        sum += l;
        ++res.images_used;
    }
    res.loss = res.images_used ? sum / static_cast<double>(res.images_used) : 0.0;
    ++micro_;
    if (micro_ % static_cast<std::size_t>(cfg_.grad_accumulation_steps) == 0) {
        const auto params = trainable();
        optimizer_->step(params);
        for (auto* p : params) p->zero_grad();
        res.optimizer_stepped = true;
    }
    return res;
}

StepResult Trainer::train_step(std::span<const AnnotatedImage* const> batch, Rng& rng) {
    std::vector<std::uint64_t> seeds(batch.size());
    for (auto& s : seeds) s = rng();
    return train_step(batch, seeds);
}

// ---- loop -----------------------------------------------------------------------

double single_prompt_iou(const PromptableModel& model, const std::vector<AnnotatedImage>& images,
                         promptsim::StartMode start, int instances_per_image, std::uint64_t seed) {
    eval::EvalConfig ec;
    ec.instances_per_image = instances_per_image;
    ec.max_clicks = 0;
    ec.start = start;
    ec.seed = seed;
    const auto r = eval::run_dataset(model, images, ec, "validation");
    return r.instances.empty() ? 0.0 : r.curve().front().mean;
}

void save_train_state(const std::string& path, Trainer& trainer, const nlohmann::json& progress) {
    auto& model = trainer.model();
    nlohmann::json meta;
    meta["kind"] = "train_state";
    meta["model_config"] = model.config();
    meta["lora_injected"] = model.lora_injected();
    meta["micro_steps"] = trainer.micro_steps();
    meta["optimizer"] = trainer.optimizer().state_meta();
    meta["progress"] = progress;
    std::vector<NamedArray> arrays;
    for (const auto* p : model.parameters()) {
        arrays.push_back({p->name, p->value, p->trainable});
        if (p->trainable) arrays.push_back({"grad:" + p->name, p->grad, false});
    }
    for (auto& [name, m] : trainer.optimizer().state_arrays())
        arrays.push_back({"opt:" + name, m, false});
    write_container(path, meta, arrays);
}

namespace {

nlohmann::json step_json(const StepRecord& s) {
    return {{"type", "step"}, {"epoch", s.epoch}, {"step", s.step}, {"loss", s.loss}, {"loss_avg", s.loss_avg}, {"lr", s.lr}};
}

nlohmann::json epoch_json(const EpochRecord& e) {
    return {{"type", "epoch"},          {"epoch", e.epoch},           {"train_loss", e.train_loss},
            {"val_box_iou", e.val_box_iou}, {"val_point_iou", e.val_point_iou}, {"seconds", e.seconds}};
}

nlohmann::json history_json(const TrainHistory& h) {
    nlohmann::json j;
    j["steps"] = nlohmann::json::array();
    for (const auto& s : h.steps) j["steps"].push_back(step_json(s));
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : h.epochs) j["epochs"].push_back(epoch_json(e));
    j["best_val_iou"] = h.best_val_iou;
    j["best_epoch"] = h.best_epoch;
    return j;
}

TrainHistory history_from_json(const nlohmann::json& j) {
    TrainHistory h;
    for (const auto& s : j.at("steps"))
        h.steps.push_back({s.at("epoch").get<int>(), s.at("step").get<std::size_t>(), s.at("loss").get<double>(),
                           s.at("loss_avg").get<double>(), s.at("lr").get<double>()});
    for (const auto& e : j.at("epochs"))
        h.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("val_box_iou").get<double>(),
                            e.at("val_point_iou").get<double>(), e.at("seconds").get<double>()});
    h.best_val_iou = j.at("best_val_iou").get<double>();
    h.best_epoch = j.at("best_epoch").get<int>();
    return h;
}

struct Progress {
    int epoch = 0;
    std::size_t batch = 0; // next batch within the epoch
    std::size_t step = 0;
    double loss_avg = 0.0;
    double epoch_loss_sum = 0.0;
    std::size_t epoch_batches = 0;
    TrainHistory history;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},       {"batch", batch},
                {"step", step},         {"loss_avg", loss_avg},
                {"epoch_loss_sum", epoch_loss_sum}, {"epoch_batches", epoch_batches},
                {"history", history_json(history)}};
    }
};

Progress restore_state(const std::string& path, Trainer& trainer) {
    const Container c = read_container(path);
    if (c.meta.value("kind", "") != "train_state") throw FormatError(path + " is not a training state", 0);
    ToyModel& model = trainer.model();
    if (c.meta.value("lora_injected", false) != model.lora_injected())
        throw ConfigError("training state LoRA layout does not match the model");
    std::vector<std::pair<std::string, Matrix>> opt;
    for (const auto& a : c.arrays) {
        if (a.name.rfind("opt:", 0) == 0) {
            opt.emplace_back(a.name.substr(4), a.value);
        } else if (a.name.rfind("grad:", 0) == 0) {
            ag::Parameter* p = model.find_parameter(a.name.substr(5));
            if (!p) throw ConfigError("training state has unknown parameter " + a.name);
            p->grad = a.value;
        } else {
            ag::Parameter* p = model.find_parameter(a.name);
            if (!p || p->value.rows() != a.value.rows() || p->value.cols() != a.value.cols())
                throw ConfigError("training state parameter '" + a.name + "' does not fit the model");
            p->value = a.value;
            p->trainable = a.trainable;
        }
    }
    trainer.optimizer().load_state(c.meta.at("optimizer"), opt);
    trainer.set_micro_steps(c.meta.at("micro_steps").get<std::size_t>());
    const auto& pj = c.meta.at("progress");
    Progress p;
    p.epoch = pj.at("epoch").get<int>();
    p.batch = pj.at("batch").get<std::size_t>();
    p.step = pj.at("step").get<std::size_t>();
    p.loss_avg = pj.at("loss_avg").get<double>();
    p.epoch_loss_sum = pj.at("epoch_loss_sum").get<double>();
    p.epoch_batches = pj.at("epoch_batches").get<std::size_t>();
    p.history = history_from_json(pj.at("history"));
    return p;
}

} // namespace

TrainHistory train(ToyModel& model, const std::vector<AnnotatedImage>& data, const TrainConfig& cfg,
                   const TrainOptions& options) {
    cfg.validate();
    if (cfg.epochs == 0) return {};

    std::vector<std::string> ids;
    for (const auto& d : data) ids.push_back(d.id);
    const std::vector<bool> is_val = split_validation(ids, cfg.validation_fraction, cfg.seed);
    std::vector<std::size_t> train_idx;
    std::vector<AnnotatedImage> val;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (is_val[i]) val.push_back(data[i]);
        else if (!data[i].instances.empty()) train_idx.push_back(i);
    }
    if (train_idx.empty()) throw ConfigError("training split is empty");

    if (!model.lora_injected()) model.inject_lora(cfg.model);
    Trainer trainer(model, cfg);

    Progress prog;
    if (!options.resume_state.empty()) prog = restore_state(options.resume_state, trainer);

    std::ofstream metrics;
    if (!options.out_dir.empty()) {
        fs::create_directories(options.out_dir);
        const auto mode = options.resume_state.empty() ? std::ios::trunc : std::ios::app;
        metrics.open(options.out_dir + "/metrics.jsonl", mode);
        if (!metrics) throw IoError("cannot write metrics to " + options.out_dir);
    }
    auto out_path = [&](const std::string& name) { return options.out_dir + "/" + name; };
    auto dump_state = [&](const std::string& name) {
        if (!options.out_dir.empty()) save_train_state(out_path(name), trainer, prog.to_json());
    };

    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    for (; prog.epoch < cfg.epochs; ++prog.epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order = train_idx;
        Rng shuffle_rng(fnv1a64("epoch:" + std::to_string(prog.epoch), cfg.seed));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const std::size_t nb = (order.size() + bs - 1) / bs;

        for (; prog.batch < nb; ++prog.batch) {
            std::vector<const AnnotatedImage*> items;
            std::vector<std::uint64_t> seeds;
            for (std::size_t i = prog.batch * bs; i < std::min(order.size(), (prog.batch + 1) * bs); ++i) {
                items.push_back(&data[order[i]]);
                seeds.push_back(fnv1a64("image:" + data[order[i]].id + ":" + std::to_string(prog.epoch), cfg.seed));
            }
            StepResult r;
            try {
                r = trainer.train_step(items, seeds);
            } catch (const NumericError&) {
                dump_state("diverged_state.ckpt");
                throw;
            }
            ++prog.step;
            prog.loss_avg = prog.step == 1 ? r.loss : 0.9 * prog.loss_avg + 0.1 * r.loss;
            prog.epoch_loss_sum += r.loss;
            ++prog.epoch_batches;
            StepRecord rec{prog.epoch, prog.step, r.loss, prog.loss_avg, trainer.optimizer().current_lr()};
            prog.history.steps.push_back(rec);
            if (metrics.is_open()) metrics << step_json(rec).dump() << "\n" << std::flush;
            if (options.on_step) options.on_step(rec);
            if (options.stop_after_steps && prog.step >= *options.stop_after_steps) {
                ++prog.batch;
                dump_state("train_state.ckpt");
                return prog.history;
            }
        }

        const auto params = trainer.trainable();
        trainer.optimizer().eval_mode(params);
        EpochRecord er;
        er.epoch = prog.epoch;
        er.train_loss = prog.epoch_batches ? prog.epoch_loss_sum / static_cast<double>(prog.epoch_batches) : 0.0;
        if (!val.empty()) {
            er.val_box_iou = single_prompt_iou(model, val, promptsim::StartMode::box, cfg.val_instances_per_image, cfg.seed);
            er.val_point_iou =
                single_prompt_iou(model, val, promptsim::StartMode::point, cfg.val_instances_per_image, cfg.seed);
        }
        er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (er.val_box_iou > prog.history.best_val_iou) {
            prog.history.best_val_iou = er.val_box_iou;
            prog.history.best_epoch = er.epoch;
            if (!options.out_dir.empty()) save_checkpoint(model, out_path("best.ckpt"));
        }
        if (!options.out_dir.empty()) save_checkpoint(model, out_path("last.ckpt"));
        prog.history.epochs.push_back(er);
        if (metrics.is_open()) metrics << epoch_json(er).dump() << "\n" << std::flush;
        if (options.log_progress)
            spdlog::info("epoch {} loss {:.4f} val box IoU {:.3f} point IoU {:.3f} ({:.0f} s)", er.epoch, er.train_loss,
                         er.val_box_iou, er.val_point_iou, er.seconds);

        const bool last_epoch = prog.epoch + 1 == cfg.epochs;
        if (!last_epoch) trainer.optimizer().train_mode(params);
        prog.batch = 0;
        prog.epoch_loss_sum = 0.0;
        prog.epoch_batches = 0;
        if (!last_epoch) {
            Progress next = prog;
            ++next.epoch;
            if (!options.out_dir.empty()) save_train_state(out_path("train_state.ckpt"), trainer, next.to_json());
        }
    }
    // Parameters are left at the evaluation point of the optimizer.
    return prog.history;
}

} // namespace cellpilot::training
