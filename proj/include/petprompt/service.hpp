#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "petprompt/manifest.hpp"
#include "petprompt/net.hpp"

namespace httplib {
class Server;
}

namespace petprompt::service {

inline constexpr const char* kApiVersion = "api/1";

// Foreground runs of a row-major binary buffer: [start, length] pairs in
// increasing order. An empty mask encodes as [].
using Runs = std::vector<std::pair<int64_t, int64_t>>;

Runs rle_encode(std::span<const uint8_t> mask);
std::vector<uint8_t> rle_decode(const Runs& runs, size_t size);
nlohmann::json to_json(const Runs& runs);
Runs runs_from_json(const nlohmann::json& j);

// Axis 0 gives an (H, W) slice, axis 1 (D, W), axis 2 (D, H).
struct SliceShape {
    int64_t rows = 0;
    int64_t cols = 0;
};
SliceShape slice_shape(const Shape3& s, int axis);
template <typename T>
std::vector<T> extract_slice(const Grid3<T>& g, int axis, int64_t index);

// 8-bit rendering clipped to the [lo, hi] intensity window.
std::vector<uint8_t> window_to_u8(std::span<const float> values, float lo, float hi);

struct SliceView {
    int axis = 0;
    int64_t index = 0;
    SliceShape shape;
    std::string image_base64;  // rows * cols bytes, row-major
    Runs mask;
    std::optional<Runs> ground_truth;
};

struct PromptOutcome {
    size_t history_length = 0;
    int64_t foreground = 0;
    int64_t changed_voxels = 0;
    std::optional<double> dsc;
    std::optional<SliceView> view;
};

struct SessionSpec {
    std::string volume_id;
    std::optional<std::string> target;  // enables GT overlays and DSC
    std::optional<Coord3> center;       // field-of-view center; default GT center, else volume center
};

struct SessionInfo {
    std::string session_id;
    std::string volume_id;
    std::optional<std::string> target;
    Shape3 shape;
    Coord3 center;
    Shape3 field_of_view;
    std::vector<PromptPoint> history;
    int64_t encoder_calls = 0;
};

class Session;

// In-memory sessions over one immutable model. Operations on one session are
// serialized; different sessions run concurrently.
class SessionManager {
public:
    SessionManager(net::PromptableSegmenter model, std::optional<DatasetManifest> data,
                   std::filesystem::path persist_dir = {});
    ~SessionManager();

    std::string create(const SessionSpec& spec);
    PromptOutcome prompt(const std::string& id, const PromptPoint& point,
                         std::optional<std::pair<int, int64_t>> view = std::nullopt);
    SliceView slice(const std::string& id, int axis, int64_t index) const;
    Grid3<uint8_t> mask(const std::string& id) const;
    SessionInfo info(const std::string& id) const;
    void remove(const std::string& id);
    size_t size() const;

    // Rebuilds persisted sessions by replaying their prompt histories.
    size_t restore();

    // Sessions whose first decode saw a non-zero previous mask; stays 0.
    int64_t nonzero_initial_masks() const { return nonzero_initial_masks_; }

    nlohmann::json health() const;

private:
    std::shared_ptr<Session> find(const std::string& id) const;
    std::string create_with_id(const std::string& id, const SessionSpec& spec);
    void persist(const Session& s) const;

    net::PromptableSegmenter model_;
    std::optional<DatasetManifest> data_;
    std::filesystem::path persist_dir_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::atomic<int64_t> nonzero_initial_masks_{0};
};

nlohmann::json to_json(const SliceView& v);
nlohmann::json to_json(const PromptOutcome& o);
nlohmann::json to_json(const SessionInfo& i);

// HTTP status for an Error code.
int http_status(const std::string& code);

void register_routes(httplib::Server& server, SessionManager& sessions);

struct ServiceConfig {
    std::filesystem::path checkpoint;
    std::filesystem::path data_dir;  // holds manifest.json
    std::filesystem::path session_dir;
    std::string host = "0.0.0.0";
    int port = 8080;

    // MODEL_CKPT, DATA_DIR, PORT, SESSION_DIR
    static ServiceConfig from_env();
};

// Blocks until the server stops.
void run_server(const ServiceConfig& config);

} // namespace petprompt::service
