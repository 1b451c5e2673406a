#include "cellpilot/evalharness.hpp"

#include "cellpilot/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

namespace cellpilot::eval {

std::string to_string(StartMode m) { return m == StartMode::point ? "point" : "box"; }

StartMode start_mode_from_string(const std::string& s) {
    if (s == "point") return StartMode::point;
    if (s == "box") return StartMode::box;
    throw ConfigError("start mode must be 'point' or 'box', got '" + s + "'");
}

void EvalConfig::validate() const {
    if (instances_per_image < 1) throw ConfigError("instances_per_image must be >= 1");
    if (min_box_margin < 0 || max_box_margin < min_box_margin) throw ConfigError("invalid box margin range");
    if (max_clicks < 0) throw ConfigError("max_clicks must be >= 0");
}

void to_json(nlohmann::json& j, const EvalConfig& c) {
    j = {{"instances_per_image", c.instances_per_image},
         {"min_box_margin", c.min_box_margin},
         {"max_box_margin", c.max_box_margin},
         {"max_clicks", c.max_clicks},
         {"start", to_string(c.start)},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, EvalConfig& c) {
    c.instances_per_image = j.value("instances_per_image", 10);
    c.min_box_margin = j.value("min_box_margin", 0);
    c.max_box_margin = j.value("max_box_margin", 10);
    c.max_clicks = j.value("max_clicks", 5);
    c.start = start_mode_from_string(j.value("start", std::string("box")));
    c.seed = j.value("seed", std::uint64_t{0});
}

std::optional<std::vector<double>> run_instance(const PromptableModel& model, const ImageEmbedding& embedding,
                                                const PreprocessRecord& record, const BinaryMask& gt,
                                                const EvalConfig& cfg, Rng& rng) {
    cfg.validate();
    if (gt.height() != record.original_height || gt.width() != record.original_width)
        throw ShapeError("ground truth does not match the original image size");
    if (!gt.any()) return std::nullopt;

    std::vector<Prompt> history;
    if (cfg.start == StartMode::point) {
        history.emplace_back(sample_point_in_mask(gt, rng));
    } else {
        const int margin = std::uniform_int_distribution<int>(cfg.min_box_margin, cfg.max_box_margin)(rng);
        history.emplace_back(box_from_mask(gt, margin));
    }

    std::vector<double> ious;
    ious.reserve(static_cast<std::size_t>(cfg.max_clicks) + 1);
    BinaryMask pred = postprocess_mask(model.decode_mask(embedding, model_space_group(history, record)), record);
    ious.push_back(iou(pred, gt));
    for (int k = 0; k < cfg.max_clicks; ++k) {
        const auto click = sample_correction_click(pred, gt, rng, ClickPlacement::center);
        if (!click) break;
        history.emplace_back(*click);
        pred = postprocess_mask(model.decode_mask(embedding, model_space_group(history, record)), record);
        ious.push_back(iou(pred, gt));
    }
    ious.resize(static_cast<std::size_t>(cfg.max_clicks) + 1, ious.back());
    return ious;
}

std::optional<std::vector<double>> run_instance(const PromptableModel& model, const Image& image,
                                                const BinaryMask& gt, const EvalConfig& cfg, Rng& rng) {
    const Preprocessed pre = preprocess(image, model.input_size());
    const ImageEmbedding emb = model.encode_image(pre.image);
    return run_instance(model, emb, pre.record, gt, cfg, rng);
}

Summary summarize(const std::vector<double>& values) {
    Summary s;
    s.n = values.size();
    if (values.empty()) return s;
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n));
    return s;
}

std::vector<Summary> ModeResult::curve() const {
    std::vector<Summary> out;
    for (int k = 0; k <= config.max_clicks; ++k) {
        std::vector<double> col;
        col.reserve(instances.size());
        for (const auto& r : instances) col.push_back(r.ious.at(static_cast<std::size_t>(k)));
        out.push_back(summarize(col));
    }
    return out;
}

ModeResult run_dataset(const PromptableModel& model, const std::vector<AnnotatedImage>& split, const EvalConfig& cfg,
                       const std::string& dataset) {
    cfg.validate();
    ModeResult res;
    res.dataset = dataset;
    res.start = cfg.start;
    res.config = cfg;
    for (const auto& item : split) {
        const std::size_t avail = item.instances.size();
        std::vector<std::size_t> order(avail);
        std::iota(order.begin(), order.end(), 0);
        Rng pick(fnv1a64("pick:" + item.id, cfg.seed));
        std::shuffle(order.begin(), order.end(), pick);
        order.resize(std::min<std::size_t>(avail, static_cast<std::size_t>(cfg.instances_per_image)));
        std::sort(order.begin(), order.end());
        if (order.empty()) continue;

        const Preprocessed pre = preprocess(item.image, model.input_size());
        const ImageEmbedding emb = model.encode_image(pre.image);
        for (std::size_t idx : order) {
            Rng rng(fnv1a64(item.id + "#" + std::to_string(idx) + "/" + to_string(cfg.start), cfg.seed));
            auto traj = run_instance(model, emb, pre.record, item.instances[idx], cfg, rng);
            const std::string key = item.id + "#" + std::to_string(idx);
            if (!traj) {
                spdlog::warn("eval: skipping empty ground truth {}", key);
                res.skipped.push_back(key);
                continue;
            }
            res.instances.push_back({item.id, static_cast<int>(idx), std::move(*traj)});
        }
    }
    return res;
}

std::vector<ReferenceRow> published_single_prompt_scores() {
    using enum StartMode;
    return {
        {"SAM", "CellSeg", point, 0.60, 0.31},        {"SAM", "CellSeg", box, 0.75, 0.18},
        {"SAM", "MoNuSAC", point, 0.68, 0.23},        {"SAM", "MoNuSAC", box, 0.76, 0.13},
        {"SAM", "CRAG", point, 0.35, 0.33},           {"SAM", "CRAG", box, 0.69, 0.22},
        {"MedSAM", "CellSeg", point, 0.03, 0.08},     {"MedSAM", "CellSeg", box, 0.56, 0.21},
        {"MedSAM", "MoNuSAC", point, 0.03, 0.08},     {"MedSAM", "MoNuSAC", box, 0.64, 0.19},
        {"MedSAM", "CRAG", point, 0.06, 0.11},        {"MedSAM", "CRAG", box, 0.70, 0.18},
        {"SimpleClick", "CellSeg", point, 0.24, 0.31}, {"SimpleClick", "MoNuSAC", point, 0.08, 0.20},
        {"SimpleClick", "CRAG", point, 0.24, 0.30},
        {"CellPilot", "CellSeg", point, 0.63, 0.27},  {"CellPilot", "CellSeg", box, 0.79, 0.15},
        {"CellPilot", "MoNuSAC", point, 0.70, 0.23},  {"CellPilot", "MoNuSAC", box, 0.83, 0.09},
        {"CellPilot", "CRAG", point, 0.32, 0.33},     {"CellPilot", "CRAG", box, 0.79, 0.17},
    };
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["results"] = nlohmann::json::array();
    for (const auto& m : r.results) {
        nlohmann::json jm;
        jm["dataset"] = m.dataset;
        jm["start"] = to_string(m.start);
        jm["config"] = m.config;
        jm["instances"] = nlohmann::json::array();
        for (const auto& i : m.instances)
            jm["instances"].push_back({{"image_id", i.image_id}, {"instance", i.instance}, {"ious", i.ious}});
        jm["skipped"] = m.skipped;
        auto& curve = jm["summary"] = nlohmann::json::array();
        int k = 0;
        for (const auto& s : m.curve()) curve.push_back({{"clicks", k++}, {"mean", s.mean}, {"std", s.std}, {"n", s.n}});
        j["results"].push_back(std::move(jm));
    }
    j["references"] = nlohmann::json::array();
    for (const auto& ref : r.references)
        j["references"].push_back({{"method", ref.method},
                                   {"dataset", ref.dataset},
                                   {"start", to_string(ref.start)},
                                   {"mean", ref.mean},
                                   {"std", ref.std}});
    return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    for (const auto& jm : j.at("results")) {
        ModeResult m;
        m.dataset = jm.at("dataset").get<std::string>();
        m.start = start_mode_from_string(jm.at("start").get<std::string>());
        m.config = jm.at("config").get<EvalConfig>();
        for (const auto& ji : jm.at("instances"))
            m.instances.push_back({ji.at("image_id").get<std::string>(), ji.at("instance").get<int>(),
                                   ji.at("ious").get<std::vector<double>>()});
        m.skipped = jm.value("skipped", std::vector<std::string>{});
        r.results.push_back(std::move(m));
    }
    for (const auto& jr : j.value("references", nlohmann::json::array()))
        r.references.push_back({jr.at("method").get<std::string>(), jr.at("dataset").get<std::string>(),
                                start_mode_from_string(jr.at("start").get<std::string>()), jr.at("mean").get<double>(),
                                jr.at("std").get<double>()});
    return r;
}

namespace {

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string report_csv(const EvalReport& r) {
    std::string out = "method,dataset,start,clicks,mean,std,n\n";
    for (const auto& m : r.results) {
        int k = 0;
        for (const auto& s : m.curve()) {
            out += "measured," + m.dataset + "," + to_string(m.start) + "," + std::to_string(k++) + "," + num(s.mean) +
                   "," + num(s.std) + "," + std::to_string(s.n) + "\n";
        }
    }
    for (const auto& ref : r.references)
        out += ref.method + "," + ref.dataset + "," + to_string(ref.start) + ",0," + num(ref.mean) + "," +
               num(ref.std) + ",\n";
    return out;
}

nlohmann::json plot_data(const EvalReport& r) {
    nlohmann::json series = nlohmann::json::array();
    for (const auto& m : r.results) {
        nlohmann::json pts = nlohmann::json::array();
        int k = 0;
        for (const auto& s : m.curve()) pts.push_back({{"clicks", k++}, {"mean", s.mean}, {"std", s.std}});
        series.push_back({{"dataset", m.dataset}, {"start", to_string(m.start)}, {"points", std::move(pts)}});
    }
    return {{"x", "clicks"}, {"y", "mean_iou"}, {"series", std::move(series)}};
}

namespace {

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f << text;
    if (!f) throw IoError("failed writing " + path);
}

} // namespace

void emit_report(const EvalReport& r, const ReportPaths& paths) {
    if (!paths.csv.empty()) write_text(paths.csv, report_csv(r));
    if (!paths.json.empty()) write_text(paths.json, to_json(r).dump(2) + "\n");
    if (!paths.plot.empty()) write_text(paths.plot, plot_data(r).dump(2) + "\n");
}

ReportPaths default_report_paths(const std::string& dir) {
    return {dir + "/report.csv", dir + "/report.json", dir + "/curves.json"};
}

} // namespace cellpilot::eval
