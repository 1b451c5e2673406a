#pragma once

#include "cellpilot/dataset.hpp"
#include "cellpilot/model.hpp"
#include "cellpilot/pipeline.hpp"
#include "cellpilot/promptsim.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace cellpilot::eval {

using promptsim::StartMode;

std::string to_string(StartMode m);
StartMode start_mode_from_string(const std::string& s);

struct EvalConfig {
    int instances_per_image = 10;
    int min_box_margin = 0;
    int max_box_margin = 10;
    int max_clicks = 5;
    StartMode start = StartMode::box;
    std::uint64_t seed = 0;

    void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);

// IoU after the initial prompt and after each corrective click (length
// max_clicks + 1). Prompts are placed in original-image coordinates and IoU is
// measured there, after postprocessing. Returns nullopt for an empty gt.
std::optional<std::vector<double>> run_instance(const PromptableModel& model, const Image& image,
                                                const BinaryMask& gt, const EvalConfig& cfg, Rng& rng);

// Same, reusing an embedding of the preprocessed image.
std::optional<std::vector<double>> run_instance(const PromptableModel& model, const ImageEmbedding& embedding,
                                                const PreprocessRecord& record, const BinaryMask& gt,
                                                const EvalConfig& cfg, Rng& rng);

struct InstanceResult {
    std::string image_id;
    int instance = 0;
    std::vector<double> ious;
};

struct Summary {
    double mean = 0.0;
    double std = 0.0; // population standard deviation
    std::size_t n = 0;
};
Summary summarize(const std::vector<double>& values);

struct ModeResult {
    std::string dataset;
    StartMode start = StartMode::box;
    EvalConfig config;
    std::vector<InstanceResult> instances;
    std::vector<std::string> skipped; // "image_id#instance" with empty gt

    // Per click count 0..max_clicks.
    std::vector<Summary> curve() const;
};

// Evaluate one start mode on images at original resolution. Picks
// min(instances_per_image, available) instances per image without replacement.
ModeResult run_dataset(const PromptableModel& model, const std::vector<AnnotatedImage>& split,
                       const EvalConfig& cfg, const std::string& dataset = "dataset");

// A published score shown next to measured ones.
struct ReferenceRow {
    std::string method;
    std::string dataset;
    StartMode start = StartMode::box;
    double mean = 0.0;
    double std = 0.0;
};

// Single-prompt mean IoU ± std reported for CellPilot and the baselines.
std::vector<ReferenceRow> published_single_prompt_scores();

struct EvalReport {
    std::vector<ModeResult> results;
    std::vector<ReferenceRow> references;
};

nlohmann::json to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

// CSV columns: method,dataset,start,clicks,mean,std,n. Measured rows use
// method "measured"; reference rows carry the method name, clicks = 0 and an
// empty n.
std::string report_csv(const EvalReport& r);
// Plot data: per (dataset, start) series of {clicks, mean, std}.
nlohmann::json plot_data(const EvalReport& r);

struct ReportPaths {
    std::string csv;
    std::string json;
    std::string plot;
};
void emit_report(const EvalReport& r, const ReportPaths& paths);
ReportPaths default_report_paths(const std::string& dir);

} // namespace cellpilot::eval
