// cellpilot: dataset preparation, training, evaluation and the annotation
// server behind one binary.

#include "cellpilot/checkpoint.hpp"
#include "cellpilot/dataio.hpp"
#include "cellpilot/dataset.hpp"
#include "cellpilot/errors.hpp"
#include "cellpilot/evalharness.hpp"
#include "cellpilot/oracle_model.hpp"
#include "cellpilot/service.hpp"
#include "cellpilot/toy_model.hpp"
#include "cellpilot/training.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace cellpilot;

namespace {

std::vector<AnnotatedImage> load_data(const std::string& manifest_path, const std::string& split) {
    const auto manifest = dataio::read_manifest(manifest_path);
    auto items = dataio::load_split(manifest, split);
    if (items.empty()) throw ConfigError("no images in split '" + split + "' of " + manifest_path);
    return items;
}

int run_synth(const std::string& out, const BlobConfig& blobs, const dataio::ManifestRules& rules) {
    const auto items = make_blob_dataset(blobs);
    const std::string manifest = dataio::write_dataset(out, items, rules);
    std::size_t masks = 0;
    for (const auto& it : items) masks += it.instances.size();
    spdlog::info("wrote {} images with {} instances; manifest {}", items.size(), masks, manifest);
    return 0;
}

int run_manifest(const std::string& root, const std::string& out, const dataio::ManifestRules& rules) {
    const auto m = dataio::make_manifest(root, rules);
    const std::string path = out.empty() ? (fs::path(root) / "manifest.jsonl").string() : out;
    dataio::write_manifest(path, m);
    std::size_t val = 0, test = 0;
    for (const auto& e : m.entries) {
        val += e.split == "val";
        test += e.split == "test";
    }
    spdlog::info("{} entries ({} val, {} test) written to {}", m.entries.size(), val, test, path);
    if (!m.rejects.empty()) {
        const std::string rej = (fs::path(path).parent_path() / "rejects.json").string();
        dataio::write_rejects(rej, m);
        spdlog::warn("{} image(s) without annotation listed in {}", m.rejects.size(), rej);
    }
    return 0;
}

int run_train(const std::string& config_path, const std::string& data, const std::string& out,
              const std::string& resume, const std::string& init) {
    training::TrainConfig cfg = config_path.empty() ? training::TrainConfig{} : training::load_train_config(config_path);
    cfg.validate();

    std::unique_ptr<ToyModel> model;
    if (!init.empty()) {
        model = load_checkpoint(init);
        if (!(model->config() == cfg.model))
            spdlog::warn("initial checkpoint config differs from the training config; using the checkpoint's");
    } else {
        model = std::make_unique<ToyModel>(cfg.model);
    }

    // Held-out test entries never reach training; train() carves the
    // validation images out of the rest.
    const auto manifest = dataio::read_manifest(data);
    std::vector<AnnotatedImage> items;
    for (const char* split : {"train", "val"}) {
        for (auto& it : dataio::load_split(manifest, split))
            items.push_back(to_model_frame(it, model->input_size()));
    }
    if (items.empty()) throw ConfigError("manifest " + data + " has no train or val entries");

    fs::create_directories(out);
    std::ofstream(fs::path(out) / "train_config.txt") << training::format_train_config(cfg);

    training::TrainOptions opts;
    opts.out_dir = out;
    opts.resume_state = resume;
    opts.log_progress = true;
    const auto history = training::train(*model, items, cfg, opts);
    for (const auto& e : history.epochs)
        std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " val_box_iou " << e.val_box_iou
                  << " val_point_iou " << e.val_point_iou << " seconds " << e.seconds << "\n";
    if (history.best_epoch >= 0)
        std::cout << "best epoch " << history.best_epoch << " box IoU " << history.best_val_iou << "\n";
    return 0;
}

int run_eval(const std::string& model_path, const std::string& data, const std::string& split,
             const std::string& starts, eval::EvalConfig cfg, const std::string& out, bool references) {
    const auto items = load_data(data, split);
    const auto manifest_name = dataio::read_manifest(data).name;

    std::shared_ptr<const PromptableModel> model;
    if (model_path == "oracle") {
        auto oracle = std::make_shared<OracleModel>();
        for (const auto& it : items) oracle->add_image(it.image, it.instances);
        model = oracle;
    } else {
        model = load_checkpoint(model_path);
    }

    eval::EvalReport report;
    std::vector<eval::StartMode> modes;
    if (starts == "both") {
        modes = {eval::StartMode::box, eval::StartMode::point};
    } else {
        modes = {eval::start_mode_from_string(starts)};
    }
    for (auto m : modes) {
        cfg.start = m;
        report.results.push_back(eval::run_dataset(*model, items, cfg, manifest_name));
        const auto curve = report.results.back().curve();
        std::cout << manifest_name << " " << eval::to_string(m) << ":";
        for (std::size_t k = 0; k < curve.size(); ++k) std::cout << " " << k << "=" << curve[k].mean;
        std::cout << "\n";
    }
    if (references) report.references = eval::published_single_prompt_scores();

    fs::create_directories(out);
    eval::emit_report(report, eval::default_report_paths(out));
    spdlog::info("report written to {}", out);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"CellPilot interactive cell and gland segmentation"};
    app.require_subcommand(1);
    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");

    // synth
    auto* synth = app.add_subcommand("synth", "Write a synthetic blob dataset with a manifest");
    std::string synth_out;
    BlobConfig blobs;
    dataio::ManifestRules synth_rules;
    synth_rules.name = "blobs";
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--count", blobs.count, "Number of images")->check(CLI::PositiveNumber);
    synth->add_option("--size", blobs.size, "Image side in pixels")->check(CLI::Range(16, 4096));
    synth->add_option("--seed", blobs.seed, "Random seed");
    synth->add_option("--val", synth_rules.val_fraction, "Validation fraction")->check(CLI::Range(0.0, 1.0));
    synth->add_option("--test", synth_rules.test_fraction, "Test fraction")->check(CLI::Range(0.0, 1.0));

    // manifest
    auto* man = app.add_subcommand("manifest", "Index an images/ + labels/ directory into a manifest");
    std::string man_root, man_out;
    dataio::ManifestRules rules;
    man->add_option("--root", man_root, "Dataset root")->required()->check(CLI::ExistingDirectory);
    man->add_option("--out", man_out, "Manifest path (default <root>/manifest.jsonl)");
    man->add_option("--name", rules.name, "Dataset name");
    man->add_option("--images", rules.image_dir, "Image directory below the root");
    man->add_option("--labels", rules.annotation_dir, "Annotation directory below the root");
    man->add_option("--val", rules.val_fraction, "Validation fraction")->check(CLI::Range(0.0, 1.0));
    man->add_option("--test", rules.test_fraction, "Test fraction")->check(CLI::Range(0.0, 1.0));
    man->add_option("--seed", rules.seed, "Split seed");

    // train
    auto* train = app.add_subcommand("train", "Fine-tune the toy backbone with simulated interaction");
    std::string train_cfg, train_data, train_out, train_resume, train_init;
    train->add_option("--config", train_cfg, "key = value training config")->check(CLI::ExistingFile);
    train->add_option("--data", train_data, "Dataset manifest")->required()->check(CLI::ExistingFile);
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--resume", train_resume, "train_state.ckpt to resume from")->check(CLI::ExistingFile);
    train->add_option("--init", train_init, "Checkpoint to start from")->check(CLI::ExistingFile);

    // eval
    auto* ev = app.add_subcommand("eval", "Click-simulation evaluation");
    std::string ev_model, ev_data, ev_split = "test", ev_start = "both", ev_out;
    eval::EvalConfig ev_cfg;
    bool ev_refs = false;
    ev->add_option("--model", ev_model, "Checkpoint path, or 'oracle'")->required();
    ev->add_option("--data", ev_data, "Dataset manifest")->required()->check(CLI::ExistingFile);
    ev->add_option("--split", ev_split, "Manifest split (train, val, test; empty = all)");
    ev->add_option("--start", ev_start, "box, point or both")->check(CLI::IsMember({"box", "point", "both"}));
    ev->add_option("--clicks", ev_cfg.max_clicks, "Corrective clicks after the start prompt")
        ->check(CLI::Range(0, 100));
    ev->add_option("--instances", ev_cfg.instances_per_image, "Instances per image")->check(CLI::PositiveNumber);
    ev->add_option("--seed", ev_cfg.seed, "Seed");
    ev->add_option("--out", ev_out, "Report directory")->required();
    ev->add_flag("--references", ev_refs, "Add published single-prompt scores as comparison rows");

    // serve
    auto* srv = app.add_subcommand("serve", "Run the annotation HTTP service (CELLPILOT_* env vars apply)");
    std::optional<int> port;
    std::optional<std::string> host, model_path, detector, persist;
    srv->add_option("--port", port, "Port");
    srv->add_option("--host", host, "Bind address");
    srv->add_option("--model", model_path, "Checkpoint");
    srv->add_option("--detector", detector, "none, blob, process:<cmd> or http:<url>");
    srv->add_option("--persist", persist, "Directory for persistent sessions");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

    try {
        if (*synth) return run_synth(synth_out, blobs, synth_rules);
        if (*man) return run_manifest(man_root, man_out, rules);
        if (*train) return run_train(train_cfg, train_data, train_out, train_resume, train_init);
        if (*ev) return run_eval(ev_model, ev_data, ev_split, ev_start, ev_cfg, ev_out, ev_refs);
        if (*srv) {
            auto cfg = service::ServiceConfig::from_env();
            if (port) cfg.port = *port;
            if (host) cfg.host = *host;
            if (model_path) cfg.model_path = *model_path;
            if (detector) cfg.detector = *detector;
            if (persist) cfg.persist_dir = *persist;
            service::serve(cfg);
            return 0;
        }
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
