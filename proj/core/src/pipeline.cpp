#include "cellpilot/pipeline.hpp"

#include "cellpilot/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace cellpilot {

std::int64_t now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

PreprocessRecord make_preprocess_record(int height, int width, int target) {
    if (height <= 0 || width <= 0) throw ShapeError("cannot preprocess an empty image");
    if (target <= 0) throw ShapeError("preprocess target must be positive");
    PreprocessRecord rec;
    rec.original_height = height;
    rec.original_width = width;
    rec.padded_size = target;
    rec.scale = static_cast<double>(target) / std::max(height, width);
    // round half up
    rec.scaled_height = std::clamp(static_cast<int>(std::floor(height * rec.scale + 0.5)), 1, target);
    rec.scaled_width = std::clamp(static_cast<int>(std::floor(width * rec.scale + 0.5)), 1, target);
    return rec;
}

Preprocessed preprocess(const Image& image, int target) {
    if (image.empty()) throw ShapeError("cannot preprocess an empty image");
    Preprocessed out;
    out.record = make_preprocess_record(image.height(), image.width(), target);
    Image scaled = resize_bilinear(image, out.record.scaled_height, out.record.scaled_width);
    out.image = pad_bottom_right(scaled, target, target);
    return out;
}

namespace {

Matrix resize_grid(const Matrix& src, int height, int width) {
    if (src.rows() == height && src.cols() == width) return src;
    Matrix dst(height, width);
    const double sy = static_cast<double>(src.rows()) / height;
    const double sx = static_cast<double>(src.cols()) / width;
    std::vector<int> x0(width), x1(width);
    std::vector<double> wx(width);
    for (int c = 0; c < width; ++c) {
        const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.cols() - 1));
        x0[c] = static_cast<int>(std::floor(x));
        x1[c] = std::min<int>(x0[c] + 1, static_cast<int>(src.cols()) - 1);
        wx[c] = x - x0[c];
    }
    for (int r = 0; r < height; ++r) {
        const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.rows() - 1));
        const int y0 = static_cast<int>(std::floor(y));
        const int y1 = std::min<int>(y0 + 1, static_cast<int>(src.rows()) - 1);
        const double wy = y - y0;
        for (int c = 0; c < width; ++c) {
            const double top = src(y0, x0[c]) * (1 - wx[c]) + src(y0, x1[c]) * wx[c];
            const double bot = src(y1, x0[c]) * (1 - wx[c]) + src(y1, x1[c]) * wx[c];
            dst(r, c) = top * (1 - wy) + bot * wy;
        }
    }
    return dst;
}

// Pixel v covers [v, v + 1); a point goes to the pixel holding its centre.
int to_model(int v, double scale, int limit) {
    return std::clamp(static_cast<int>(std::floor((v + 0.5) * scale)), 0, limit - 1);
}

int to_original(int v, double scale, int limit) {
    return std::clamp(static_cast<int>(std::floor((v + 0.5) / scale)), 0, limit - 1);
}

// Box edges map as edges, so a box over the whole image stays whole.
int edge_min(int v, double scale, int limit) {
    return std::clamp(static_cast<int>(std::floor(v * scale + 1e-9)), 0, limit - 1);
}

int edge_max(int v, double scale, int limit) {
    return std::clamp(static_cast<int>(std::ceil((v + 1) * scale - 1e-9)) - 1, 0, limit - 1);
}

} // namespace

BinaryMask postprocess_mask(const LogitGrid& logits, const PreprocessRecord& rec, double threshold) {
    if (logits.height() != rec.padded_size || logits.width() != rec.padded_size)
        throw ShapeError("logits do not match the preprocessing record");
    const Matrix content = logits.values.topLeftCorner(rec.scaled_height, rec.scaled_width);
    const Matrix full = resize_grid(content, rec.original_height, rec.original_width);
    return LogitGrid{full}.binarize(threshold);
}

BinaryMask mask_to_model_space(const BinaryMask& mask, const PreprocessRecord& rec) {
    if (mask.height() != rec.original_height || mask.width() != rec.original_width)
        throw ShapeError("mask does not match the preprocessing record");
    BinaryMask out(rec.padded_size, rec.padded_size);
    const double sy = static_cast<double>(rec.original_height) / rec.scaled_height;
    const double sx = static_cast<double>(rec.original_width) / rec.scaled_width;
    for (int r = 0; r < rec.scaled_height; ++r) {
        const int y = std::min(static_cast<int>((r + 0.5) * sy), rec.original_height - 1);
        for (int c = 0; c < rec.scaled_width; ++c) {
            const int x = std::min(static_cast<int>((c + 0.5) * sx), rec.original_width - 1);
            if (mask(y, x)) out.set(r, c);
        }
    }
    return out;
}

PointPrompt to_model_space(const PointPrompt& p, const PreprocessRecord& rec) {
    return PointPrompt{to_model(p.row, rec.scale, rec.scaled_height), to_model(p.col, rec.scale, rec.scaled_width),
                       p.polarity};
}

BoxPrompt to_model_space(const BoxPrompt& b, const PreprocessRecord& rec) {
    return BoxPrompt{edge_min(b.row_min, rec.scale, rec.scaled_height), edge_min(b.col_min, rec.scale, rec.scaled_width),
                     edge_max(b.row_max, rec.scale, rec.scaled_height), edge_max(b.col_max, rec.scale, rec.scaled_width)};
}

Prompt to_model_space(const Prompt& p, const PreprocessRecord& rec) {
    return std::visit([&](const auto& v) -> Prompt { return to_model_space(v, rec); }, p);
}

PointPrompt to_original_space(const PointPrompt& p, const PreprocessRecord& rec) {
    return PointPrompt{to_original(p.row, rec.scale, rec.original_height),
                       to_original(p.col, rec.scale, rec.original_width), p.polarity};
}

PromptGroup model_space_group(const std::vector<Prompt>& history, const PreprocessRecord& rec) {
    PromptGroup g;
    for (const auto& p : history) g.add(to_model_space(p, rec));
    return g;
}

std::string to_string(MaskSource s) { return s == MaskSource::automatic ? "automatic" : "user"; }

MaskSource mask_source_from_string(const std::string& s) {
    if (s == "automatic") return MaskSource::automatic;
    if (s == "user") return MaskSource::user;
    throw FormatError("unknown mask source '" + s + "'", 0);
}

Session::Session(std::shared_ptr<const PromptableModel> model, Image image)
    : model_(std::move(model)), image_(std::move(image)) {
    if (!model_) throw ModelError("session requires a model");
    Preprocessed pre = preprocess(image_, model_->input_size());
    record_ = pre.record;
    embedding_ = model_->encode_image(pre.image);
}

const MaskRecord& Session::mask(int id) const {
    for (const auto& m : masks_)
        if (m.id == id) return m;
    throw NotFoundError("no mask with id " + std::to_string(id));
}

MaskRecord& Session::find(int id) {
    for (auto& m : masks_)
        if (m.id == id) return m;
    throw NotFoundError("no mask with id " + std::to_string(id));
}

void Session::check_prompt(const Prompt& p) const {
    PromptGroup g;
    g.add(p);
    check_prompt_bounds(g, record_.original_height, record_.original_width);
}

std::pair<LogitGrid, BinaryMask> Session::decode(const std::vector<Prompt>& history) const {
    LogitGrid logits = model_->decode_mask(embedding_, model_space_group(history, record_));
    BinaryMask mask = postprocess_mask(logits, record_);
    return {std::move(logits), std::move(mask)};
}

BinaryMask Session::replay(const std::vector<Prompt>& history) const { return decode(history).second; }

std::vector<int> Session::auto_segment(const CellDetector& detector, double min_score) {
    // Detector and decodes run before any state changes, so a failure leaves
    // the session untouched.
    const auto boxes = detector.detect(image_);
    std::vector<MaskRecord> fresh;
    int id = next_id_;
    const auto t = now_ms();
    for (const auto& det : boxes) {
        if (det.score < min_score) continue;
        check_prompt(det.box);
        std::vector<Prompt> history{det.box};
        auto [logits, mask] = decode(history);
        if (!mask.any()) continue;
        MaskRecord rec;
        rec.id = id++;
        rec.mask = std::move(mask);
        rec.history = std::move(history);
        rec.source = MaskSource::automatic;
        rec.score = det.score;
        rec.logits = std::move(logits);
        rec.created_ms = rec.updated_ms = t;
        fresh.push_back(std::move(rec));
    }
    std::erase_if(masks_, [](const MaskRecord& m) { return m.source == MaskSource::automatic; });
    std::vector<int> ids;
    for (auto& r : fresh) {
        ids.push_back(r.id);
        masks_.push_back(std::move(r));
    }
    next_id_ = id;
    return ids;
}

const MaskRecord& Session::add_mask(const Prompt& prompt) {
    check_prompt(prompt);
    std::vector<Prompt> history{prompt};
    auto [logits, mask] = decode(history);
    MaskRecord rec;
    rec.id = next_id_++;
    rec.mask = std::move(mask);
    rec.history = std::move(history);
    rec.source = MaskSource::user;
    rec.logits = std::move(logits);
    rec.created_ms = rec.updated_ms = now_ms();
    masks_.push_back(std::move(rec));
    return masks_.back();
}

const MaskRecord& Session::refine_mask(int id, const Prompt& prompt) {
    MaskRecord& rec = find(id);
    check_prompt(prompt);
    std::vector<Prompt> history = rec.history;
    history.push_back(prompt);
    auto [logits, mask] = decode(history);
    rec.previous.push_back(std::move(rec.mask));
    rec.mask = std::move(mask);
    rec.logits = std::move(logits);
    rec.history = std::move(history);
    rec.updated_ms = now_ms();
    return rec;
}

const MaskRecord& Session::undo_last(int id) {
    MaskRecord& rec = find(id);
    if (rec.history.size() <= 1) throw RangeError("mask " + std::to_string(id) + " has no refinement to undo");
    rec.history.pop_back();
    if (!rec.previous.empty()) {
        rec.mask = std::move(rec.previous.back());
        rec.previous.pop_back();
        rec.logits = model_->decode_mask(embedding_, model_space_group(rec.history, record_));
    } else {
        std::tie(rec.logits, rec.mask) = decode(rec.history);
    }
    rec.updated_ms = now_ms();
    return rec;
}

void Session::remove_mask(int id) {
    const auto before = masks_.size();
    std::erase_if(masks_, [id](const MaskRecord& m) { return m.id == id; });
    if (masks_.size() == before) throw NotFoundError("no mask with id " + std::to_string(id));
}

const MaskRecord& Session::restore_mask(StoredMask stored) {
    const int id = stored.id;
    if (id < 1) throw FormatError("mask ids must be positive", 0);
    if (stored.history.empty()) throw FormatError("mask " + std::to_string(id) + " has an empty prompt history", 0);
    for (const auto& m : masks_)
        if (m.id == id) throw FormatError("duplicate mask id " + std::to_string(id), 0);
    for (const auto& p : stored.history) check_prompt(p);
    if (stored.mask && (stored.mask->height() != record_.original_height ||
                        stored.mask->width() != record_.original_width))
        throw ShapeError("stored mask " + std::to_string(id) + " does not match the image size");
    MaskRecord rec;
    rec.id = id;
    rec.source = stored.source;
    rec.score = stored.score;
    for (std::size_t k = 1; k < stored.history.size(); ++k) {
        rec.previous.push_back(replay(
            std::vector<Prompt>(stored.history.begin(), stored.history.begin() + static_cast<std::ptrdiff_t>(k))));
    }
    std::tie(rec.logits, rec.mask) = decode(stored.history);
    if (stored.mask) rec.mask = std::move(*stored.mask);
    rec.history = std::move(stored.history);
    const auto t = now_ms();
    rec.created_ms = stored.created_ms ? stored.created_ms : t;
    rec.updated_ms = stored.updated_ms ? stored.updated_ms : rec.created_ms;
    masks_.push_back(std::move(rec));
    next_id_ = std::max(next_id_, id + 1);
    return masks_.back();
}

} // namespace cellpilot
