#pragma once

#include "cellpilot/dataset.hpp"
#include "cellpilot/mask.hpp"
#include "cellpilot/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace cellpilot::dataio {

inline constexpr int kAnnotationSchema = 1;

enum class AnnotationKind { labelmap, rle_json };
std::string to_string(AnnotationKind k);
AnnotationKind annotation_kind_from_string(const std::string& s);

// One mask per instance id (label maps) or per "masks" entry (RLE JSON).
// Empty instances are dropped with a warning.
std::vector<BinaryMask> load_annotations(const std::string& path, AnnotationKind kind);

// RLE JSON as an object: {"size": [h, w], "counts": [...] or "<coco string>"}.
nlohmann::json rle_to_json(const Rle& rle);
Rle rle_from_json(const nlohmann::json& j);

nlohmann::json prompt_to_json(const Prompt& p);
Prompt prompt_from_json(const nlohmann::json& j);

// ---- annotation files (schema 1) --------------------------------------------

struct ImageRef {
    std::string path; // may be empty for uploads
    int height = 0;
    int width = 0;
    std::uint64_t content_hash = 0;
};

struct AnnotatedMask {
    int id = 0;
    BinaryMask mask;
    MaskSource source = MaskSource::user;
    std::optional<double> score;
    std::vector<Prompt> prompts; // original-image coordinates
    std::int64_t created_ms = 0;
    std::int64_t updated_ms = 0;
};

struct AnnotationFile {
    ImageRef image;
    std::vector<AnnotatedMask> masks;
    std::int64_t exported_ms = 0;
};

nlohmann::json to_json(const AnnotationFile& f);
// Validates the schema; problems are reported as FormatError.
AnnotationFile annotation_from_json(const nlohmann::json& j);
AnnotationFile parse_annotation(const std::string& text);
AnnotationFile read_annotation(const std::string& path);
void write_annotation(const std::string& path, const AnnotationFile& f);

AnnotationFile export_session(const Session& session, const std::string& image_path = {});
void export_session(const Session& session, const std::string& path, const std::string& image_path);

// Recreate a session on `image` from an export; masks and histories are
// restored exactly.
std::unique_ptr<Session> import_session(std::shared_ptr<const PromptableModel> model, Image image,
                                        const AnnotationFile& f);

// ---- manifests ----------------------------------------------------------------

struct ManifestEntry {
    std::string image;      // path relative to the manifest root (or absolute)
    std::string annotation;
    AnnotationKind kind = AnnotationKind::labelmap;
    std::string split = "train"; // train | val | test
};

struct Reject {
    std::string image;
    std::string reason;
};

struct DatasetManifest {
    std::string name;
    std::string root; // directory the entry paths are relative to
    std::vector<ManifestEntry> entries;
    std::vector<Reject> rejects;
};

struct ManifestRules {
    std::string name = "dataset";
    std::string image_dir = "images";
    std::string annotation_dir = "labels";
    std::vector<std::string> image_extensions = {".png", ".tif", ".tiff", ".jpg", ".jpeg"};
    double val_fraction = 0.1;
    double test_fraction = 0.0;
    std::uint64_t seed = 0;
};

// Images under root/image_dir (lexicographic) matched by file stem to
// root/annotation_dir/<stem>.{png,tif,tiff} (label map) or <stem>.json (RLE).
// Images without an annotation go to `rejects`.
DatasetManifest make_manifest(const std::string& root, const ManifestRules& rules = {});

// Line-delimited JSON, one entry per line; relative paths resolve against
// the manifest's directory.
void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);
void write_rejects(const std::string& path, const DatasetManifest& m);

// Loads images and instances of the given split ("" = every entry).
std::vector<AnnotatedImage> load_split(const DatasetManifest& m, const std::string& split);

// Writes images/<id>.png and labels/<id>.png (16-bit label maps) plus a
// manifest.jsonl; returns the manifest path.
std::string write_dataset(const std::string& root, const std::vector<AnnotatedImage>& items,
                          const ManifestRules& rules = {});

} // namespace cellpilot::dataio
