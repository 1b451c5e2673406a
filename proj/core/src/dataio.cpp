#include "cellpilot/dataio.hpp"

#include "cellpilot/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace cellpilot::dataio {

namespace fs = std::filesystem;

std::string to_string(AnnotationKind k) { return k == AnnotationKind::labelmap ? "labelmap" : "rle-json"; }

AnnotationKind annotation_kind_from_string(const std::string& s) {
    if (s == "labelmap") return AnnotationKind::labelmap;
    if (s == "rle-json") return AnnotationKind::rle_json;
    throw FormatError("unknown annotation kind '" + s + "'", 0);
}

namespace {

std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write " + path);
        f << text;
        if (!f) throw IoError("failed writing " + path);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

nlohmann::json parse_json(const std::string& text, const std::string& what) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(what + ": " + e.what(), e.byte > 0 ? e.byte - 1 : 0);
    }
}

template <typename F>
auto field(const std::string& what, F&& f) {
    try {
        return f();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(what + ": " + e.what(), 0);
    }
}

} // namespace

nlohmann::json rle_to_json(const Rle& rle) { return {{"size", {rle.height, rle.width}}, {"counts", rle.counts}}; }

Rle rle_from_json(const nlohmann::json& j) {
    return field("rle", [&] {
        const auto size = j.at("size").get<std::vector<int>>();
        if (size.size() != 2) throw FormatError("rle size must be [height, width]", 0);
        const auto& counts = j.at("counts");
        if (counts.is_string()) return rle_from_string(size[0], size[1], counts.get<std::string>());
        Rle r{size[0], size[1], counts.get<std::vector<std::uint32_t>>()};
        rle_decode(r); // validates the counts
        return r;
    });
}

nlohmann::json prompt_to_json(const Prompt& p) {
    if (const auto* pt = std::get_if<PointPrompt>(&p))
        return {{"type", "point"},
                {"row", pt->row},
                {"col", pt->col},
                {"polarity", pt->polarity == Polarity::positive ? "positive" : "negative"}};
    const auto& b = std::get<BoxPrompt>(p);
    return {{"type", "box"}, {"row_min", b.row_min}, {"col_min", b.col_min}, {"row_max", b.row_max}, {"col_max", b.col_max}};
}

Prompt prompt_from_json(const nlohmann::json& j) {
    return field("prompt", [&]() -> Prompt {
        const std::string type = j.at("type").get<std::string>();
        if (type == "point") {
            const std::string pol = j.value("polarity", std::string("positive"));
            if (pol != "positive" && pol != "negative") throw FormatError("polarity must be positive or negative", 0);
            return PointPrompt{j.at("row").get<int>(), j.at("col").get<int>(),
                               pol == "positive" ? Polarity::positive : Polarity::negative};
        }
        if (type == "box") {
            BoxPrompt b{j.at("row_min").get<int>(), j.at("col_min").get<int>(), j.at("row_max").get<int>(),
                        j.at("col_max").get<int>()};
            if (b.row_min > b.row_max || b.col_min > b.col_max) throw FormatError("box corners out of order", 0);
            return b;
        }
        throw FormatError("unknown prompt type '" + type + "'", 0);
    });
}

namespace {
// 64-bit values do not survive JavaScript numbers, so hashes travel as hex.
std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}
} // namespace

nlohmann::json to_json(const AnnotationFile& f) {
    nlohmann::json j;
    j["schema"] = kAnnotationSchema;
    j["image"] = {{"path", f.image.path},
                  {"height", f.image.height},
                  {"width", f.image.width},
                  {"content_hash", hash_hex(f.image.content_hash)}};
    j["exported_ms"] = f.exported_ms;
    j["masks"] = nlohmann::json::array();
    for (const auto& m : f.masks) {
        nlohmann::json jm{{"id", m.id},
                          {"rle", rle_to_json(rle_encode(m.mask))},
                          {"source", to_string(m.source)},
                          {"score", m.score ? nlohmann::json(*m.score) : nlohmann::json(nullptr)},
                          {"prompts", nlohmann::json::array()},
                          {"created_ms", m.created_ms},
                          {"updated_ms", m.updated_ms}};
        for (const auto& p : m.prompts) jm["prompts"].push_back(prompt_to_json(p));
        j["masks"].push_back(std::move(jm));
    }
    return j;
}

AnnotationFile annotation_from_json(const nlohmann::json& j) {
    return field("annotation", [&] {
        if (!j.is_object()) throw FormatError("annotation must be a JSON object", 0);
        if (j.value("schema", -1) != kAnnotationSchema)
            throw FormatError("unsupported annotation schema (expected " + std::to_string(kAnnotationSchema) + ")", 0);
        AnnotationFile f;
        const auto& im = j.at("image");
        f.image.path = im.value("path", std::string());
        f.image.height = im.at("height").get<int>();
        f.image.width = im.at("width").get<int>();
        if (im.contains("content_hash")) {
            const auto& h = im.at("content_hash");
            if (!h.is_string() || h.get<std::string>().size() != 16)
                throw FormatError("image.content_hash must be a 16-digit hex string", 0);
            f.image.content_hash = std::stoull(h.get<std::string>(), nullptr, 16);
        }
        f.exported_ms = j.value("exported_ms", std::int64_t{0});
        for (const auto& jm : j.at("masks")) {
            AnnotatedMask m;
            m.id = jm.value("id", static_cast<int>(f.masks.size()) + 1);
            m.mask = rle_decode(rle_from_json(jm.at("rle")));
            if (m.mask.height() != f.image.height || m.mask.width() != f.image.width)
                throw FormatError("mask " + std::to_string(m.id) + " size differs from the image", 0);
            m.source = mask_source_from_string(jm.value("source", std::string("user")));
            if (jm.contains("score") && !jm.at("score").is_null()) m.score = jm.at("score").get<double>();
            for (const auto& jp : jm.value("prompts", nlohmann::json::array())) m.prompts.push_back(prompt_from_json(jp));
            m.created_ms = jm.value("created_ms", std::int64_t{0});
            m.updated_ms = jm.value("updated_ms", std::int64_t{0});
            f.masks.push_back(std::move(m));
        }
        return f;
    });
}

AnnotationFile parse_annotation(const std::string& text) { return annotation_from_json(parse_json(text, "annotation")); }

AnnotationFile read_annotation(const std::string& path) { return parse_annotation(read_text(path)); }

void write_annotation(const std::string& path, const AnnotationFile& f) { write_text(path, to_json(f).dump() + "\n"); }

std::vector<BinaryMask> load_annotations(const std::string& path, AnnotationKind kind) {
    std::vector<BinaryMask> raw;
    if (kind == AnnotationKind::labelmap) {
        raw = instances_from_label_map(read_label_map(path));
        if (raw.empty()) spdlog::warn("{}: label map has no instances", path);
        return raw;
    }
    for (auto& m : read_annotation(path).masks) raw.push_back(std::move(m.mask));
    std::vector<BinaryMask> out;
    for (auto& m : raw) {
        if (m.any()) out.push_back(std::move(m));
        else spdlog::warn("{}: dropping empty instance", path);
    }
    if (out.empty()) spdlog::warn("{}: annotation has no instances", path);
    return out;
}

AnnotationFile export_session(const Session& session, const std::string& image_path) {
    AnnotationFile f;
    f.image = {image_path, session.image().height(), session.image().width(), session.image().content_hash()};
    f.exported_ms = now_ms();
    for (const auto& r : session.masks())
        f.masks.push_back({r.id, r.mask, r.source, r.score, r.history, r.created_ms, r.updated_ms});
    return f;
}

void export_session(const Session& session, const std::string& path, const std::string& image_path) {
    write_annotation(path, export_session(session, image_path));
}

std::unique_ptr<Session> import_session(std::shared_ptr<const PromptableModel> model, Image image,
                                        const AnnotationFile& f) {
    if (image.height() != f.image.height || image.width() != f.image.width)
        throw ShapeError("image size differs from the annotation");
    if (f.image.content_hash && f.image.content_hash != image.content_hash())
        throw FormatError("image content does not match the annotation", 0);
    auto s = std::make_unique<Session>(std::move(model), std::move(image));
    for (const auto& m : f.masks)
        s->restore_mask({m.id, m.source, m.prompts, m.score, m.mask, m.created_ms, m.updated_ms});
    return s;
}

// ---- manifests ----------------------------------------------------------------

DatasetManifest make_manifest(const std::string& root, const ManifestRules& rules) {
    const fs::path base(root);
    if (!fs::is_directory(base)) throw IoError("dataset root " + root + " is not a directory");
    const fs::path img_dir = base / rules.image_dir;
    const fs::path ann_dir = base / rules.annotation_dir;
    std::vector<std::string> images;
    if (fs::is_directory(img_dir)) {
        for (const auto& e : fs::directory_iterator(img_dir)) {
            if (!e.is_regular_file()) continue;
            std::string ext = e.path().extension().string();
            std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
            if (std::find(rules.image_extensions.begin(), rules.image_extensions.end(), ext) != rules.image_extensions.end())
                images.push_back(fs::relative(e.path(), base).generic_string());
        }
    }
    if (images.empty()) throw IoError("no images matched under " + img_dir.string());
    std::sort(images.begin(), images.end());

    DatasetManifest m;
    m.name = rules.name;
    m.root = fs::absolute(base).lexically_normal().string();
    for (const auto& rel : images) {
        const std::string stem = fs::path(rel).stem().string();
        std::optional<ManifestEntry> entry;
        for (const char* ext : {".png", ".tif", ".tiff"}) {
            if (fs::exists(ann_dir / (stem + ext))) {
                entry = ManifestEntry{rel, fs::relative(ann_dir / (stem + ext), base).generic_string(),
                                      AnnotationKind::labelmap, "train"};
                break;
            }
        }
        if (!entry && fs::exists(ann_dir / (stem + ".json")))
            entry = ManifestEntry{rel, fs::relative(ann_dir / (stem + ".json"), base).generic_string(),
                                  AnnotationKind::rle_json, "train"};
        if (entry) m.entries.push_back(*entry);
        else m.rejects.push_back({rel, "no annotation found for stem '" + stem + "'"});
    }

    std::vector<std::string> ids;
    for (const auto& e : m.entries) ids.push_back(e.image);
    const auto val = split_validation(ids, rules.val_fraction + rules.test_fraction, rules.seed);
    // Within the held-out bucket, the test share is taken by a second hash.
    std::vector<std::string> held;
    std::vector<std::size_t> held_idx;
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (val[i]) {
            held.push_back(ids[i]);
            held_idx.push_back(i);
        }
    const double test_share =
        rules.val_fraction + rules.test_fraction > 0 ? rules.test_fraction / (rules.val_fraction + rules.test_fraction) : 0;
    const auto test = split_validation(held, test_share, rules.seed ^ 0x7e57ULL);
    for (std::size_t k = 0; k < held_idx.size(); ++k) m.entries[held_idx[k]].split = test[k] ? "test" : "val";
    return m;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
    std::string out;
    for (const auto& e : m.entries) {
        nlohmann::json j{{"dataset", m.name}, {"image", e.image}, {"annotation", e.annotation},
                         {"kind", to_string(e.kind)}, {"split", e.split}};
        out += j.dump() + "\n";
    }
    write_text(path, out);
}

DatasetManifest read_manifest(const std::string& path) {
    const std::string text = read_text(path);
    DatasetManifest m;
    m.root = fs::absolute(fs::path(path)).parent_path().lexically_normal().string();
    std::size_t offset = 0;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        const std::size_t line_start = offset;
        offset += line.size() + 1;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("manifest " + path + ": " + e.what(), line_start + (e.byte > 0 ? e.byte - 1 : 0));
        }
        ManifestEntry e;
        try {
            if (m.name.empty()) m.name = j.value("dataset", std::string("dataset"));
            e.image = j.at("image").get<std::string>();
            e.annotation = j.at("annotation").get<std::string>();
            e.kind = annotation_kind_from_string(j.value("kind", std::string("labelmap")));
            e.split = j.value("split", std::string("train"));
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("manifest " + path + ": " + ex.what(), line_start);
        }
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw FormatError("manifest " + path + ": split must be train, val or test", line_start);
        for (const auto& p : {e.image, e.annotation}) {
            const fs::path full = fs::path(p).is_absolute() ? fs::path(p) : fs::path(m.root) / p;
            if (!fs::exists(full)) throw IoError("manifest " + path + " references missing file " + full.string());
        }
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty()) throw FormatError("manifest " + path + " has no entries", 0);
    return m;
}

void write_rejects(const std::string& path, const DatasetManifest& m) {
    std::string out;
    for (const auto& r : m.rejects) out += nlohmann::json{{"image", r.image}, {"reason", r.reason}}.dump() + "\n";
    write_text(path, out);
}

std::vector<AnnotatedImage> load_split(const DatasetManifest& m, const std::string& split) {
    std::vector<AnnotatedImage> out;
    auto resolve = [&](const std::string& p) {
        return fs::path(p).is_absolute() ? p : (fs::path(m.root) / p).string();
    };
    for (const auto& e : m.entries) {
        if (!split.empty() && e.split != split) continue;
        AnnotatedImage item;
        item.id = e.image;
        item.image = read_image(resolve(e.image));
        item.instances = load_annotations(resolve(e.annotation), e.kind);
        for (const auto& inst : item.instances)
            if (inst.height() != item.image.height() || inst.width() != item.image.width())
                throw ShapeError("annotation " + e.annotation + " does not match image size");
        out.push_back(std::move(item));
    }
    return out;
}

std::string write_dataset(const std::string& root, const std::vector<AnnotatedImage>& items, const ManifestRules& rules) {
    const fs::path base(root);
    fs::create_directories(base / rules.image_dir);
    fs::create_directories(base / rules.annotation_dir);
    for (const auto& it : items) {
        const std::string stem = fs::path(it.id).stem().string();
        write_image((base / rules.image_dir / (stem + ".png")).string(), it.image);
        write_label_map((base / rules.annotation_dir / (stem + ".png")).string(),
                        label_map_from_instances(it.instances, it.image.height(), it.image.width()));
    }
    DatasetManifest m = make_manifest(root, rules);
    const std::string path = (base / "manifest.jsonl").string();
    write_manifest(path, m);
    if (!m.rejects.empty()) write_rejects((base / "rejects.jsonl").string(), m);
    return path;
}

} // namespace cellpilot::dataio
