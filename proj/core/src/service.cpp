#include "cellpilot/service.hpp"

#include "cellpilot/checkpoint.hpp"
#include "cellpilot/dataio.hpp"
#include "cellpilot/errors.hpp"
#include "cellpilot/toy_model.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <limits>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

namespace fs = std::filesystem;

namespace cellpilot::service {

std::string to_string(ApiCode c) {
    switch (c) {
    case ApiCode::bad_request: return "bad_request";
    case ApiCode::not_found: return "not_found";
    case ApiCode::model_error: return "model_error";
    case ApiCode::io_error: return "io_error";
    }
    return "io_error";
}

int http_status(ApiCode c) {
    switch (c) {
    case ApiCode::bad_request: return 400;
    case ApiCode::not_found: return 404;
    case ApiCode::model_error: return 503;
    case ApiCode::io_error: return 500;
    }
    return 500;
}

nlohmann::json ApiError::to_json() const {
    return {{"error", {{"code", to_string(code_)}, {"message", what()}}}};
}

namespace {

std::string env_or(const char* name, const std::string& fallback) {
    const char* v = std::getenv(name);
    return v && *v ? std::string(v) : fallback;
}

template <typename T>
T env_number(const char* name, T fallback) {
    const char* v = std::getenv(name);
    if (!v || !*v) return fallback;
    std::istringstream in(v);
    T out{};
    if (!(in >> out) || !in.eof()) throw ConfigError(std::string(name) + " is not a valid number: " + v);
    return out;
}

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

bool valid_session_id(const std::string& id) {
    if (id.size() != 36) return false;
    for (std::size_t i = 0; i < id.size(); ++i) {
        const char c = id[i];
        if (i == 8 || i == 13 || i == 18 || i == 23) {
            if (c != '-') return false;
        } else if (!std::isxdigit(static_cast<unsigned char>(c))) {
            return false;
        }
    }
    return true;
}

Response error_response(const std::exception_ptr& ep) {
    auto make = [](ApiCode code, const std::string& msg) {
        ApiError e(code, msg);
        return Response{http_status(code), e.to_json()};
    };
    try {
        std::rethrow_exception(ep);
    } catch (const ApiError& e) {
        return Response{http_status(e.code()), e.to_json()};
    } catch (const NotFoundError& e) {
        return make(ApiCode::not_found, e.what());
    } catch (const RangeError& e) {
        return make(ApiCode::bad_request, e.what());
    } catch (const ShapeError& e) {
        return make(ApiCode::bad_request, e.what());
    } catch (const EmptyMaskError& e) {
        return make(ApiCode::bad_request, e.what());
    } catch (const FormatError& e) {
        return make(ApiCode::bad_request, e.what());
    } catch (const ConfigError& e) {
        return make(ApiCode::bad_request, e.what());
    } catch (const nlohmann::json::exception& e) {
        return make(ApiCode::bad_request, std::string("invalid JSON: ") + e.what());
    } catch (const IoError& e) {
        return make(ApiCode::io_error, e.what());
    } catch (const std::exception& e) {
        // model failures, numeric blow-ups and anything unexpected
        return make(ApiCode::model_error, e.what());
    }
}

template <typename F>
Response guarded(F&& f) {
    try {
        return f();
    } catch (...) {
        return error_response(std::current_exception());
    }
}

Prompt parse_prompt_body(const std::string& body) {
    if (body.empty()) throw ApiError(ApiCode::bad_request, "request body must hold a prompt");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("request body is not JSON", e.byte);
    }
    if (!j.is_object()) throw ApiError(ApiCode::bad_request, "request body must be a JSON object");
    return dataio::prompt_from_json(j.contains("prompt") ? j.at("prompt") : j);
}

void write_bytes(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("cannot write " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp + " into place: " + ec.message());
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Image decode_upload(const std::string& bytes) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(bytes.data());
    return decode_image(std::span<const std::uint8_t>(p, bytes.size()));
}

} // namespace

ServiceConfig ServiceConfig::from_env() {
    ServiceConfig c;
    c.host = env_or("CELLPILOT_HOST", c.host);
    c.port = env_number("CELLPILOT_PORT", c.port);
    c.model_path = env_or("CELLPILOT_MODEL", c.model_path);
    c.detector = env_or("CELLPILOT_DETECTOR", c.detector);
    c.queue_depth = env_number("CELLPILOT_QUEUE_DEPTH", c.queue_depth);
    c.request_timeout = std::chrono::milliseconds(env_number("CELLPILOT_TIMEOUT_MS", c.request_timeout.count()));
    c.max_sessions = env_number("CELLPILOT_MAX_SESSIONS", c.max_sessions);
    c.persist_dir = env_or("CELLPILOT_PERSIST_DIR", c.persist_dir);
    c.max_upload_bytes = env_number("CELLPILOT_MAX_UPLOAD_BYTES", c.max_upload_bytes);
    c.min_detector_score = env_number("CELLPILOT_MIN_SCORE", c.min_detector_score);
    if (c.port <= 0 || c.port > 65535) throw ConfigError("CELLPILOT_PORT out of range");
    if (c.queue_depth == 0) throw ConfigError("CELLPILOT_QUEUE_DEPTH must be positive");
    if (c.max_sessions == 0) throw ConfigError("CELLPILOT_MAX_SESSIONS must be positive");
    if (c.request_timeout.count() <= 0) throw ConfigError("CELLPILOT_TIMEOUT_MS must be positive");
    return c;
}

std::shared_ptr<const CellDetector> make_detector(const std::string& spec) {
    if (spec == "none" || spec.empty()) return nullptr;
    if (spec == "blob") return std::make_shared<BlobDetector>();
    if (spec.rfind("process:", 0) == 0) return std::make_shared<ProcessDetector>(spec.substr(8));
    if (spec.rfind("http:", 0) == 0 || spec.rfind("https:", 0) == 0) {
        // "http:http://host/path" and bare "http://host/path" are both accepted
        std::string url = spec.rfind("http:http", 0) == 0 ? spec.substr(5) : spec;
        return std::make_shared<HttpDetector>(url);
    }
    throw ConfigError("unknown detector '" + spec + "' (none, blob, process:<cmd>, http:<url>)");
}

std::string uuid_v4(std::uint64_t a, std::uint64_t b) {
    a = (a & 0xFFFFFFFFFFFF0FFFull) | 0x0000000000004000ull; // version 4
    b = (b & 0x3FFFFFFFFFFFFFFFull) | 0x8000000000000000ull; // RFC 4122 variant
    char buf[37];
    std::snprintf(buf, sizeof buf, "%08llx-%04llx-%04llx-%04llx-%012llx",
                  static_cast<unsigned long long>(a >> 32), static_cast<unsigned long long>((a >> 16) & 0xFFFF),
                  static_cast<unsigned long long>(a & 0xFFFF), static_cast<unsigned long long>(b >> 48),
                  static_cast<unsigned long long>(b & 0xFFFFFFFFFFFFull));
    return buf;
}

// ---- queue -------------------------------------------------------------------

InferenceQueue::InferenceQueue(std::size_t depth, std::chrono::milliseconds timeout)
    : depth_(depth), timeout_(timeout) {
    if (depth_ == 0) throw ConfigError("queue depth must be positive");
    worker_ = std::thread([this] { loop(); });
}

InferenceQueue::~InferenceQueue() { shutdown(); }

void InferenceQueue::shutdown() {
    {
        std::lock_guard lock(mutex_);
        if (stop_) return;
        stop_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
}

std::size_t InferenceQueue::pending() const {
    std::lock_guard lock(mutex_);
    return jobs_.size();
}

void InferenceQueue::enqueue(std::function<void()> job) {
    {
        std::lock_guard lock(mutex_);
        if (stop_) throw ApiError(ApiCode::model_error, "service is shutting down");
        if (jobs_.size() >= depth_) throw ApiError(ApiCode::model_error, "inference queue is full; retry later");
        jobs_.push_back(std::move(job));
    }
    cv_.notify_one();
}

void InferenceQueue::loop() {
    for (;;) {
        std::function<void()> job;
        {
            std::unique_lock lock(mutex_);
            cv_.wait(lock, [this] { return stop_ || !jobs_.empty(); });
            if (stop_) return;
            job = std::move(jobs_.front());
            jobs_.pop_front();
        }
        job();
    }
}

// ---- service ---------------------------------------------------------------------

nlohmann::json mask_json(const MaskRecord& r) {
    nlohmann::json j{{"id", r.id},
                     {"rle", dataio::rle_to_json(rle_encode(r.mask))},
                     {"source", to_string(r.source)},
                     {"score", r.score ? nlohmann::json(*r.score) : nlohmann::json(nullptr)},
                     {"history_length", r.history.size()},
                     {"prompts", nlohmann::json::array()},
                     {"created_ms", r.created_ms},
                     {"updated_ms", r.updated_ms}};
    for (const auto& p : r.history) j["prompts"].push_back(dataio::prompt_to_json(p));
    return j;
}

AnnotationService::AnnotationService(std::shared_ptr<const PromptableModel> model,
                                     std::shared_ptr<const CellDetector> detector, ServiceConfig config)
    : model_(std::move(model)), detector_(std::move(detector)), cfg_(std::move(config)),
      queue_(cfg_.queue_depth, cfg_.request_timeout), rng_state_(std::random_device{}()) {
    if (!model_) throw ConfigError("the service needs a model");
    if (cfg_.max_sessions == 0) throw ConfigError("max_sessions must be positive");
    rng_state_ = (rng_state_ << 32) ^ std::random_device{}();

    if (!cfg_.persist_dir.empty()) {
        spill_dir_ = cfg_.persist_dir;
        fs::create_directories(spill_dir_);
        // Pick up sessions left by a previous run; they load lazily.
        std::vector<std::pair<fs::file_time_type, std::string>> found;
        for (const auto& e : fs::directory_iterator(spill_dir_)) {
            if (e.path().extension() != ".img") continue;
            const std::string id = e.path().stem().string();
            if (valid_session_id(id)) found.emplace_back(e.last_write_time(), id);
        }
        std::sort(found.begin(), found.end());
        for (const auto& [t, id] : found) {
            sessions_.emplace(id, Entry{});
            lru_.push_front(id);
        }
        if (!found.empty()) spdlog::info("restored {} session(s) from {}", found.size(), spill_dir_);
    } else {
        std::uint64_t s = rng_state_;
        spill_dir_ = (fs::temp_directory_path() / ("cellpilot-spill-" + uuid_v4(splitmix64(s), splitmix64(s)))).string();
        fs::create_directories(spill_dir_);
        owns_spill_dir_ = true;
    }
}

AnnotationService::~AnnotationService() {
    queue_.shutdown();
    if (owns_spill_dir_) {
        std::error_code ec;
        fs::remove_all(spill_dir_, ec);
    }
}

void AnnotationService::set_id_seed(std::uint64_t seed) {
    std::lock_guard lock(mutex_);
    rng_state_ = seed;
}

std::size_t AnnotationService::sessions_in_memory() const {
    return queue_.run([this] {
        std::lock_guard lock(mutex_);
        std::size_t n = 0;
        for (const auto& [id, e] : sessions_) n += e.session != nullptr;
        return n;
    });
}

std::size_t AnnotationService::session_count() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

std::string AnnotationService::new_id() {
    std::lock_guard lock(mutex_);
    for (;;) {
        const std::uint64_t a = splitmix64(rng_state_);
        const std::uint64_t b = splitmix64(rng_state_);
        std::string id = uuid_v4(a, b);
        if (!sessions_.count(id)) return id;
    }
}

std::string AnnotationService::image_path(const std::string& id) const {
    return (fs::path(spill_dir_) / (id + ".img")).string();
}

std::string AnnotationService::annotation_path(const std::string& id) const {
    return (fs::path(spill_dir_) / (id + ".json")).string();
}

Session& AnnotationService::materialise(const std::string& id) {
    Entry* e = nullptr;
    {
        std::lock_guard lock(mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw ApiError(ApiCode::not_found, "no session " + id);
        e = &it->second;
        lru_.remove(id);
        lru_.push_front(id);
    }
    if (e->session) return *e->session;

    Image image = decode_upload(read_bytes(image_path(id)));
    dataio::AnnotationFile ann;
    if (fs::exists(annotation_path(id))) {
        ann = dataio::read_annotation(annotation_path(id));
    } else {
        ann.image = {"", image.height(), image.width(), 0};
    }
    auto s = dataio::import_session(model_, std::move(image), ann);
    spdlog::debug("session {} loaded from disk", id);
    e->session = std::move(s);
    return *e->session;
}

void AnnotationService::persist(const std::string& id, const Session& s) const {
    dataio::export_session(s, annotation_path(id), "");
}

void AnnotationService::spill_excess(const std::string& keep) {
    std::vector<std::pair<std::string, Entry*>> resident;
    {
        std::lock_guard lock(mutex_);
        for (auto it = lru_.rbegin(); it != lru_.rend(); ++it) {
            Entry& e = sessions_.at(*it);
            if (e.session) resident.emplace_back(*it, &e);
        }
    }
    // `resident` runs from least to most recently used
    std::size_t count = resident.size();
    for (auto& [id, e] : resident) {
        if (count <= cfg_.max_sessions) break;
        if (id == keep) continue;
        persist(id, *e->session);
        e->session.reset();
        --count;
        spdlog::debug("session {} spilled to disk", id);
    }
}

template <typename F>
Response AnnotationService::on_session(const std::string& id, F&& f) {
    return guarded([&] {
        if (!valid_session_id(id)) throw ApiError(ApiCode::not_found, "no session " + id);
        // captured by value: after a timeout the job may outlive this frame
        return queue_.run([this, id, f = std::forward<F>(f)]() mutable {
            Session& s = materialise(id);
            Response r = f(s);
            if (!cfg_.persist_dir.empty()) persist(id, s);
            spill_excess(id);
            return r;
        });
    });
}

Response AnnotationService::create_session(const std::string& bytes) {
    return guarded([&] {
        if (bytes.empty()) throw ApiError(ApiCode::bad_request, "request body must hold an image");
        if (bytes.size() > cfg_.max_upload_bytes)
            throw ApiError(ApiCode::bad_request, "image exceeds the upload limit of " +
                                                     std::to_string(cfg_.max_upload_bytes) + " bytes");
        Image image;
        try {
            image = decode_upload(bytes);
        } catch (const Error& e) {
            throw ApiError(ApiCode::bad_request, std::string("cannot decode image: ") + e.what());
        }
        if (image.height() > cfg_.max_image_side || image.width() > cfg_.max_image_side)
            throw ApiError(ApiCode::bad_request, "image sides must not exceed " + std::to_string(cfg_.max_image_side));

        const std::string id = new_id();
        write_bytes(image_path(id), bytes);
        try {
            return queue_.run([this, id, image = std::move(image)]() mutable {
                const int h = image.height(), w = image.width();
                auto session = std::make_unique<Session>(model_, std::move(image));
                const std::string hash = [&] {
                    char buf[17];
                    std::snprintf(buf, sizeof buf, "%016llx",
                                  static_cast<unsigned long long>(session->image().content_hash()));
                    return std::string(buf);
                }();
                if (!cfg_.persist_dir.empty()) persist(id, *session);
                {
                    std::lock_guard lock(mutex_);
                    sessions_[id].session = std::move(session);
                    lru_.push_front(id);
                }
                spill_excess(id);
                spdlog::info("session {} created ({}x{})", id, h, w);
                return Response{201, {{"session_id", id},
                                      {"image", {{"height", h}, {"width", w}, {"content_hash", hash}}},
                                      {"masks", nlohmann::json::array()}}};
            });
        } catch (...) {
            std::error_code ec;
            fs::remove(image_path(id), ec);
            throw;
        }
    });
}

Response AnnotationService::auto_segment(const std::string& session_id) {
    return on_session(session_id, [this, session_id](Session& s) {
        if (!detector_) throw ApiError(ApiCode::model_error, "no detector is configured");
        std::vector<int> ids;
        try {
            ids = s.auto_segment(*detector_, cfg_.min_detector_score);
        } catch (const RangeError&) {
            throw;
        } catch (const std::exception& e) {
            throw ApiError(ApiCode::model_error, std::string("detector failed: ") + e.what() + "; retry later");
        }
        nlohmann::json masks = nlohmann::json::array();
        for (int id : ids) masks.push_back(mask_json(s.mask(id)));
        return Response{200, {{"session_id", session_id}, {"masks", masks}}};
    });
}

Response AnnotationService::add_mask(const std::string& session_id, const std::string& body) {
    return guarded([&] {
        const Prompt p = parse_prompt_body(body);
        return on_session(session_id, [p](Session& s) { return Response{201, mask_json(s.add_mask(p))}; });
    });
}

Response AnnotationService::refine_mask(const std::string& session_id, int mask_id, const std::string& body) {
    return guarded([&] {
        const Prompt p = parse_prompt_body(body);
        return on_session(session_id,
                          [p, mask_id](Session& s) { return Response{200, mask_json(s.refine_mask(mask_id, p))}; });
    });
}

Response AnnotationService::delete_mask(const std::string& session_id, int mask_id) {
    return on_session(session_id, [session_id, mask_id](Session& s) {
        s.remove_mask(mask_id);
        return Response{200, {{"session_id", session_id}, {"deleted", mask_id}}};
    });
}

Response AnnotationService::undo_last(const std::string& session_id, int mask_id) {
    return on_session(session_id, [mask_id](Session& s) { return Response{200, mask_json(s.undo_last(mask_id))}; });
}

Response AnnotationService::get_mask(const std::string& session_id, int mask_id) {
    return on_session(session_id, [mask_id](Session& s) { return Response{200, mask_json(s.mask(mask_id))}; });
}

Response AnnotationService::export_session(const std::string& session_id) {
    return on_session(session_id,
                      [](Session& s) { return Response{200, dataio::to_json(dataio::export_session(s, ""))}; });
}

void AnnotationService::mount(httplib::Server& server) {
    server.set_payload_max_length(cfg_.max_upload_bytes + (1u << 20));

    auto reply = [](httplib::Response& res, const Response& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    auto mask_id = [](const std::string& text) {
        try {
            std::size_t used = 0;
            const long v = std::stol(text, &used);
            if (used == text.size() && v > 0 && v <= std::numeric_limits<int>::max()) return static_cast<int>(v);
        } catch (const std::exception&) {
        }
        throw ApiError(ApiCode::not_found, "no mask with id " + text);
    };

    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Post("/sessions", [this, reply](const httplib::Request& req, httplib::Response& res) {
        if (req.is_multipart_form_data()) {
            if (!req.has_file("image")) {
                reply(res, error_response(std::make_exception_ptr(
                               ApiError(ApiCode::bad_request, "multipart upload needs an 'image' field"))));
                return;
            }
            reply(res, create_session(req.get_file_value("image").content));
        } else {
            reply(res, create_session(req.body));
        }
    });
    server.Post(R"(/sessions/([^/]+)/auto)", [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, auto_segment(req.matches[1]));
    });
    server.Post(R"(/sessions/([^/]+)/masks)", [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, add_mask(req.matches[1], req.body));
    });
    server.Post(R"(/sessions/([^/]+)/masks/([^/]+)/prompts)",
                [this, reply, mask_id](const httplib::Request& req, httplib::Response& res) {
                    reply(res, guarded([&] { return refine_mask(req.matches[1], mask_id(req.matches[2]), req.body); }));
                });
    server.Delete(R"(/sessions/([^/]+)/masks/([^/]+))",
                  [this, reply, mask_id](const httplib::Request& req, httplib::Response& res) {
                      reply(res, guarded([&] { return delete_mask(req.matches[1], mask_id(req.matches[2])); }));
                  });
    server.Delete(R"(/sessions/([^/]+)/masks/([^/]+)/prompts/last)",
                  [this, reply, mask_id](const httplib::Request& req, httplib::Response& res) {
                      reply(res, guarded([&] { return undo_last(req.matches[1], mask_id(req.matches[2])); }));
                  });
    server.Get(R"(/sessions/([^/]+)/masks/([^/]+))",
               [this, reply, mask_id](const httplib::Request& req, httplib::Response& res) {
                   reply(res, guarded([&] { return get_mask(req.matches[1], mask_id(req.matches[2])); }));
               });
    server.Get(R"(/sessions/([^/]+)/export)", [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, export_session(req.matches[1]));
    });
    server.Get("/health", [reply](const httplib::Request&, httplib::Response& res) {
        reply(res, Response{200, {{"status", "ok"}}});
    });

    // unmatched routes still answer with the error envelope
    server.set_error_handler([reply](const httplib::Request& req, httplib::Response& res) {
        if (!res.body.empty()) return;
        if (res.status == 404)
            reply(res, error_response(std::make_exception_ptr(
                           ApiError(ApiCode::not_found, "no route for " + req.method + " " + req.path))));
        else if (res.status == 413)
            reply(res, error_response(std::make_exception_ptr(ApiError(ApiCode::bad_request, "payload too large"))));
        else if (res.status >= 400 && res.status < 500)
            reply(res, error_response(std::make_exception_ptr(ApiError(ApiCode::bad_request, "malformed request"))));
    });
    server.set_exception_handler([reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        reply(res, error_response(ep));
    });
}

void serve(const ServiceConfig& config) {
    std::shared_ptr<const PromptableModel> model;
    if (config.model_path.empty()) {
        spdlog::warn("no CELLPILOT_MODEL given; serving an untrained toy model");
        model = std::make_shared<ToyModel>();
    } else {
        model = load_checkpoint(config.model_path);
        spdlog::info("loaded model from {}", config.model_path);
    }
    AnnotationService service(model, make_detector(config.detector), config);
    httplib::Server server;
    service.mount(server);
    spdlog::info("listening on {}:{}", config.host, config.port);
    if (!server.listen(config.host, config.port))
        throw IoError("cannot listen on " + config.host + ":" + std::to_string(config.port));
}

} // namespace cellpilot::service
