#pragma once

#include "cellpilot/detector.hpp"
#include "cellpilot/model.hpp"
#include "cellpilot/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <stdexcept>
#include <vector>

namespace httplib {
class Server;
}

namespace cellpilot::service {

enum class ApiCode { bad_request, not_found, model_error, io_error };
std::string to_string(ApiCode c);
int http_status(ApiCode c);

// Every non-2xx response carries one of these.
class ApiError : public std::runtime_error {
  public:
    ApiError(ApiCode code, const std::string& message) : std::runtime_error(message), code_(code) {}
    ApiCode code() const noexcept { return code_; }
    nlohmann::json to_json() const;

  private:
    ApiCode code_;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string model_path;          // checkpoint; empty = untrained toy model
    std::string detector = "blob";   // none | blob | process:<command> | http:<url>
    std::size_t queue_depth = 8;
    std::chrono::milliseconds request_timeout{30000};
    std::size_t max_sessions = 16;   // kept in memory; older ones are spilled to disk
    std::string persist_dir;         // enables persistence across restarts
    std::size_t max_upload_bytes = 64u << 20;
    int max_image_side = 8192;
    double min_detector_score = 0.5;

    // CELLPILOT_HOST, CELLPILOT_PORT, CELLPILOT_MODEL, CELLPILOT_DETECTOR,
    // CELLPILOT_QUEUE_DEPTH, CELLPILOT_TIMEOUT_MS, CELLPILOT_MAX_SESSIONS,
    // CELLPILOT_PERSIST_DIR, CELLPILOT_MAX_UPLOAD_BYTES, CELLPILOT_MIN_SCORE.
    static ServiceConfig from_env();
};

std::shared_ptr<const CellDetector> make_detector(const std::string& spec);

// Single worker executing model work in submission order. Submitting to a
// full queue or waiting past the timeout raises model_error.
class InferenceQueue {
  public:
    InferenceQueue(std::size_t depth, std::chrono::milliseconds timeout);
    ~InferenceQueue();
    InferenceQueue(const InferenceQueue&) = delete;
    InferenceQueue& operator=(const InferenceQueue&) = delete;

    template <typename F>
    auto run(F&& f) -> decltype(f()) {
        using R = decltype(f());
        auto task = std::make_shared<std::packaged_task<R()>>(std::forward<F>(f));
        std::future<R> fut = task->get_future();
        auto abandoned = std::make_shared<std::atomic<bool>>(false);
        // A job whose caller already gave up is dropped before it starts.
        enqueue([task, abandoned] {
            if (!abandoned->load()) (*task)();
        });
        if (fut.wait_for(timeout_) != std::future_status::ready) {
            abandoned->store(true);
            throw ApiError(ApiCode::model_error, "inference timed out; retry later");
        }
        return fut.get();
    }

    std::size_t pending() const;
    // Stops the worker; queued jobs are dropped.
    void shutdown();

  private:
    void enqueue(std::function<void()> job);
    void loop();

    std::size_t depth_;
    std::chrono::milliseconds timeout_;
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<std::function<void()>> jobs_;
    bool stop_ = false;
    std::thread worker_;
};

struct Response {
    int status = 200;
    nlohmann::json body;
};

// Transport-independent implementation of the REST API; mount() binds it to
// an HTTP server.
class AnnotationService {
  public:
    AnnotationService(std::shared_ptr<const PromptableModel> model, std::shared_ptr<const CellDetector> detector,
                      ServiceConfig config);
    ~AnnotationService();

    // Deterministic session ids (tests).
    void set_id_seed(std::uint64_t seed);

    Response create_session(const std::string& bytes);
    Response auto_segment(const std::string& session_id);
    Response add_mask(const std::string& session_id, const std::string& body);
    Response refine_mask(const std::string& session_id, int mask_id, const std::string& body);
    Response delete_mask(const std::string& session_id, int mask_id);
    Response undo_last(const std::string& session_id, int mask_id);
    Response get_mask(const std::string& session_id, int mask_id);
    Response export_session(const std::string& session_id);

    void mount(httplib::Server& server);

    std::size_t sessions_in_memory() const;
    std::size_t session_count() const;

  private:
    struct Entry {
        std::unique_ptr<Session> session; // null while spilled to disk
    };
    // Everything below runs on the inference worker, which is the only
    // thread touching session state.
    Session& materialise(const std::string& id);
    void persist(const std::string& id, const Session& s) const;
    void spill_excess(const std::string& keep);
    template <typename F>
    Response on_session(const std::string& id, F&& f);

    std::string new_id();
    std::string image_path(const std::string& id) const;
    std::string annotation_path(const std::string& id) const;

    std::shared_ptr<const PromptableModel> model_;
    std::shared_ptr<const CellDetector> detector_;
    ServiceConfig cfg_;
    std::string spill_dir_;
    bool owns_spill_dir_ = false;
    mutable InferenceQueue queue_;

    mutable std::mutex mutex_; // guards sessions_, lru_, rng_state_
    std::map<std::string, Entry> sessions_;
    std::list<std::string> lru_; // most recent at the front
    std::uint64_t rng_state_;
};

nlohmann::json mask_json(const MaskRecord& r);

std::string uuid_v4(std::uint64_t a, std::uint64_t b);

// Blocks serving HTTP until the process is stopped.
void serve(const ServiceConfig& config);

} // namespace cellpilot::service
