#include "petprompt/service.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "httplib.h"
#include "petprompt/checkpoint.hpp"
#include "petprompt/io.hpp"
#include "petprompt/metrics.hpp"

namespace petprompt::service {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- codecs

Runs rle_encode(std::span<const uint8_t> mask) {
    Runs runs;
    const auto n = static_cast<int64_t>(mask.size());
    for (int64_t i = 0; i < n;) {
        if (!mask[static_cast<size_t>(i)]) {
            ++i;
            continue;
        }
        const int64_t start = i;
        while (i < n && mask[static_cast<size_t>(i)]) ++i;
        runs.emplace_back(start, i - start);
    }
    return runs;
}

std::vector<uint8_t> rle_decode(const Runs& runs, size_t size) {
    std::vector<uint8_t> out(size, 0);
    int64_t last_end = -1;
    for (const auto& [start, len] : runs) {
        require(start > last_end && len > 0 && static_cast<size_t>(start + len) <= size, "bad_request",
                "runs must be ordered, disjoint, non-empty and inside the buffer");
        std::fill_n(out.begin() + start, len, uint8_t{1});
        last_end = start + len;
    }
    return out;
}

json to_json(const Runs& runs) {
    json out = json::array();
    for (const auto& [s, l] : runs) out.push_back({s, l});
    return out;
}

Runs runs_from_json(const json& j) {
    require(j.is_array(), "bad_request", "runs must be an array");
    Runs out;
    for (const auto& r : j) {
        require(r.is_array() && r.size() == 2, "bad_request", "each run must be [start, length]");
        out.emplace_back(r[0].get<int64_t>(), r[1].get<int64_t>());
    }
    return out;
}

SliceShape slice_shape(const Shape3& s, int axis) {
    switch (axis) {
        case 0: return {s.h, s.w};
        case 1: return {s.d, s.w};
        case 2: return {s.d, s.h};
        default: throw Error("bad_request", "axis must be 0, 1 or 2");
    }
}

template <typename T>
std::vector<T> extract_slice(const Grid3<T>& g, int axis, int64_t index) {
    const Shape3& s = g.shape();
    const SliceShape ss = slice_shape(s, axis);
    require(index >= 0 && index < s[axis], "range", "index out of range");
    std::vector<T> out;
    out.reserve(static_cast<size_t>(ss.rows * ss.cols));
    for (int64_t r = 0; r < ss.rows; ++r) {
        for (int64_t c = 0; c < ss.cols; ++c) {
            if (axis == 0) out.push_back(g(index, r, c));
            else if (axis == 1) out.push_back(g(r, index, c));
            else out.push_back(g(r, c, index));
        }
    }
    return out;
}

template std::vector<float> extract_slice(const Grid3<float>&, int, int64_t);
template std::vector<uint8_t> extract_slice(const Grid3<uint8_t>&, int, int64_t);

std::vector<uint8_t> window_to_u8(std::span<const float> values, float lo, float hi) {
    std::vector<uint8_t> out(values.size(), 0);
    if (!(hi > lo)) return out;
    const float scale = 255.0f / (hi - lo);
    for (size_t i = 0; i < values.size(); ++i) {
        const float v = std::clamp((values[i] - lo) * scale, 0.0f, 255.0f);
        out[i] = static_cast<uint8_t>(v + 0.5f);
    }
    return out;
}

// --------------------------------------------------------------- sessions

class Session {
public:
    std::string id;
    SessionSpec spec;
    Volume image;  // normalized
    std::optional<LabelVolume> gt;
    Coord3 center;
    Shape3 fov;
    net::ImageEmbedding embedding;
    torch::Tensor prev;  // [1,1,fov] probabilities of the last decode
    std::vector<PromptPoint> history;
    Grid3<uint8_t> mask;
    float window_lo = 0, window_hi = 1;
    int64_t encoder_calls = 0;
    std::chrono::system_clock::time_point created, updated;
    mutable std::mutex mutex;
};

namespace {

std::string new_session_id() {
    static std::mutex m;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(m);
    std::ostringstream os;
    os << std::hex << rng();
    return os.str();
}

const ManifestEntry* find_entry(const DatasetManifest& m, const std::string& id) {
    for (const auto& e : m.entries) {
        if (e.id == id) return &e;
    }
    return nullptr;
}

std::string polarity_name(Polarity p) { return p == Polarity::Positive ? "positive" : "negative"; }

json point_json(const PromptPoint& p) {
    return {{"z", p.coord.z}, {"y", p.coord.y}, {"x", p.coord.x}, {"polarity", polarity_name(p.polarity)}};
}

Polarity parse_polarity(const json& j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "positive" || s == "pos" || s == "+") return Polarity::Positive;
        if (s == "negative" || s == "neg" || s == "-") return Polarity::Negative;
    } else if (j.is_boolean()) {
        return j.get<bool>() ? Polarity::Positive : Polarity::Negative;
    } else if (j.is_number_integer()) {
        const auto v = j.get<int>();
        if (v == 1) return Polarity::Positive;
        if (v == 0) return Polarity::Negative;
    }
    throw Error("bad_request", "polarity must be \"positive\" or \"negative\"");
}

PromptPoint parse_point(const json& j) {
    require(j.is_object() && j.contains("x") && j.contains("y") && j.contains("z"), "bad_request",
            "prompt needs integer x, y and z");
    return {{j.at("z").get<int64_t>(), j.at("y").get<int64_t>(), j.at("x").get<int64_t>()},
            j.contains("polarity") ? parse_polarity(j.at("polarity")) : Polarity::Positive};
}

SliceView render_slice(const Session& s, int axis, int64_t index) {
    SliceView v;
    v.axis = axis;
    v.index = index;
    v.shape = slice_shape(s.image.shape(), axis);
    const auto pixels = extract_slice(s.image.data, axis, index);
    const auto bytes = window_to_u8(pixels, s.window_lo, s.window_hi);
    v.image_base64 = httplib::detail::base64_encode(std::string(bytes.begin(), bytes.end()));
    v.mask = rle_encode(extract_slice(s.mask, axis, index));
    if (s.gt) v.ground_truth = rle_encode(extract_slice(s.gt->data, axis, index));
    return v;
}

} // namespace

SessionManager::SessionManager(net::PromptableSegmenter model, std::optional<DatasetManifest> data,
                               fs::path persist_dir)
    : model_(std::move(model)), data_(std::move(data)), persist_dir_(std::move(persist_dir)) {
    if (!model_.is_empty()) model_->eval();
    if (!persist_dir_.empty()) fs::create_directories(persist_dir_);
}

SessionManager::~SessionManager() = default;

std::shared_ptr<Session> SessionManager::find(const std::string& id) const {
    std::shared_lock lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error("not_found", "unknown session " + id);
    return it->second;
}

std::string SessionManager::create(const SessionSpec& spec) { return create_with_id(new_session_id(), spec); }

std::string SessionManager::create_with_id(const std::string& id, const SessionSpec& spec) {
    require(!model_.is_empty(), "model_missing", "no model loaded");
    require(data_.has_value(), "not_found", "no dataset configured");
    const ManifestEntry* entry = find_entry(*data_, spec.volume_id);
    require(entry != nullptr, "not_found", "unknown volume " + spec.volume_id);

    auto s = std::make_shared<Session>();
    s->id = id;
    s->spec = spec;
    Volume raw = io::load_volume(data_->resolve(entry->volume_path));
    raw.id = entry->id;
    s->image = normalize_intensity(raw).volume;
    if (spec.target) {
        auto it = entry->labels.find(*spec.target);
        require(it != entry->labels.end(), "not_found", "volume " + spec.volume_id + " has no label " + *spec.target);
        s->gt = io::load_label(data_->resolve(it->second), *spec.target, entry->quality);
        validate_pair(s->image, *s->gt);
    }
    const Shape3& shape = s->image.shape();
    s->fov = model_->config().input_size;
    if (spec.center) {
        require(in_bounds(shape, *spec.center), "bounds", "center outside the volume");
        s->center = *spec.center;
    } else if (s->gt && bbox_center(*s->gt)) {
        s->center = *bbox_center(*s->gt);
    } else {
        s->center = grid_center(shape);
    }
    const auto values = s->image.data.values();
    s->window_lo = static_cast<float>(percentile(values, 1.0));
    s->window_hi = static_cast<float>(percentile(values, 99.0));
    s->mask = Grid3<uint8_t>(shape);

    {
        torch::NoGradGuard no_grad;
        const auto x = net::to_tensor(extract_patch(s->image.data, s->center, s->fov));
        s->embedding = model_->encode_image(x);
        ++s->encoder_calls;
        s->prev = torch::zeros({1, 1, s->fov.d, s->fov.h, s->fov.w});
    }
    s->created = s->updated = std::chrono::system_clock::now();

    {
        std::unique_lock lock(mutex_);
        sessions_[id] = s;
    }
    persist(*s);
    return id;
}

PromptOutcome SessionManager::prompt(const std::string& id, const PromptPoint& point,
                                     std::optional<std::pair<int, int64_t>> view) {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    require(in_bounds(s->image.shape(), point.coord), "bounds", "point outside the volume");
    const Coord3 local = to_patch_coords(point.coord, s->center, s->fov);
    require(in_bounds(s->fov, local), "bounds", "point outside the session field of view");
    if (view) {
        // Validate before mutating so a bad view leaves the session untouched.
        slice_shape(s->image.shape(), view->first);
        require(view->second >= 0 && view->second < s->image.shape()[view->first], "range", "index out of range");
    }

    std::vector<PromptPoint> points;
    for (const auto& p : s->history) points.push_back({to_patch_coords(p.coord, s->center, s->fov), p.polarity});
    points.push_back({local, point.polarity});

    torch::Tensor prob;
    {
        torch::NoGradGuard no_grad;
        if (s->history.empty() && s->prev.abs().max().item<double>() != 0.0) ++nonzero_initial_masks_;
        const auto prompts = model_->encode_prompts({points}, s->prev);
        prob = torch::sigmoid(model_->decode_mask(s->embedding, prompts));
    }
    Grid3<uint8_t> next(s->image.shape());
    insert_patch(next, net::to_binary_grid(prob), s->center);

    PromptOutcome out;
    const auto a = s->mask.values();
    const auto b = next.values();
    for (size_t i = 0; i < a.size(); ++i) {
        out.changed_voxels += a[i] != b[i];
        out.foreground += b[i];
    }
    s->history.push_back(point);
    s->prev = prob;
    s->mask = std::move(next);
    s->updated = std::chrono::system_clock::now();
    out.history_length = s->history.size();
    if (s->gt) out.dsc = eval::dsc(s->gt->data, s->mask);
    if (view) out.view = render_slice(*s, view->first, view->second);
    persist(*s);
    return out;
}

SliceView SessionManager::slice(const std::string& id, int axis, int64_t index) const {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    return render_slice(*s, axis, index);
}

Grid3<uint8_t> SessionManager::mask(const std::string& id) const {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    return s->mask;
}

SessionInfo SessionManager::info(const std::string& id) const {
    auto s = find(id);
    std::lock_guard lock(s->mutex);
    return {s->id, s->spec.volume_id, s->spec.target, s->image.shape(), s->center, s->fov, s->history,
            s->encoder_calls};
}

void SessionManager::remove(const std::string& id) {
    {
        std::unique_lock lock(mutex_);
        require(sessions_.erase(id) == 1, "not_found", "unknown session " + id);
    }
    if (!persist_dir_.empty()) fs::remove(persist_dir_ / (id + ".json"));
}

size_t SessionManager::size() const {
    std::shared_lock lock(mutex_);
    return sessions_.size();
}

void SessionManager::persist(const Session& s) const {
    if (persist_dir_.empty()) return;
    json j = {{"api", kApiVersion},
              {"session_id", s.id},
              {"volume_id", s.spec.volume_id},
              {"center", {s.center.z, s.center.y, s.center.x}},
              {"points", json::array()}};
    if (s.spec.target) j["target"] = *s.spec.target;
    for (const auto& p : s.history) j["points"].push_back(point_json(p));
    const fs::path path = persist_dir_ / (s.id + ".json");
    const fs::path tmp = path.string() + ".tmp";
    std::ofstream(tmp) << j.dump(2) << "\n";
    fs::rename(tmp, path);
}

size_t SessionManager::restore() {
    if (persist_dir_.empty() || !fs::exists(persist_dir_)) return 0;
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(persist_dir_)) {
        if (f.path().extension() == ".json") files.push_back(f.path());
    }
    std::sort(files.begin(), files.end());
    size_t restored = 0;
    for (const auto& f : files) {
        std::ifstream in(f);
        const json j = json::parse(in);
        SessionSpec spec;
        spec.volume_id = j.at("volume_id").get<std::string>();
        if (j.contains("target")) spec.target = j.at("target").get<std::string>();
        const auto& c = j.at("center");
        spec.center = Coord3{c[0].get<int64_t>(), c[1].get<int64_t>(), c[2].get<int64_t>()};
        const std::string id = j.at("session_id").get<std::string>();
        create_with_id(id, spec);
        for (const auto& p : j.at("points")) prompt(id, parse_point(p));
        ++restored;
    }
    return restored;
}

json SessionManager::health() const {
    return {{"api", kApiVersion},
            {"status", "ok"},
            {"model_loaded", !model_.is_empty()},
            {"dataset", data_.has_value()},
            {"sessions", size()}};
}

// ------------------------------------------------------------ wire format

json to_json(const SliceView& v) {
    json j = {{"axis", v.axis},
              {"index", v.index},
              {"rows", v.shape.rows},
              {"cols", v.shape.cols},
              {"image", v.image_base64},
              {"mask", to_json(v.mask)}};
    if (v.ground_truth) j["ground_truth"] = to_json(*v.ground_truth);
    return j;
}

json to_json(const PromptOutcome& o) {
    json j = {{"history_length", o.history_length},
              {"foreground", o.foreground},
              {"changed_voxels", o.changed_voxels}};
    if (o.dsc) j["dsc"] = *o.dsc;
    if (o.view) j["view"] = to_json(*o.view);
    return j;
}

json to_json(const SessionInfo& i) {
    json j = {{"session_id", i.session_id},
              {"volume_id", i.volume_id},
              {"shape", {i.shape.d, i.shape.h, i.shape.w}},
              {"center", {i.center.z, i.center.y, i.center.x}},
              {"field_of_view", {i.field_of_view.d, i.field_of_view.h, i.field_of_view.w}},
              {"history", json::array()},
              {"encoder_calls", i.encoder_calls}};
    if (i.target) j["target"] = *i.target;
    for (const auto& p : i.history) j["history"].push_back(point_json(p));
    return j;
}

int http_status(const std::string& code) {
    if (code == "not_found") return 404;
    if (code == "model_missing") return 503;
    if (code == "bounds" || code == "range" || code == "bad_request" || code == "config" || code == "shape" ||
        code == "label" || code == "empty_mask")
        return 400;
    return 500;
}

// ------------------------------------------------------------------- HTTP

namespace {

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    json j = json::parse(req.body);
    require(j.is_object(), "bad_request", "request body must be a JSON object");
    if (j.contains("api")) {
        require(j.at("api") == kApiVersion, "bad_request", "unsupported api version");
    }
    return j;
}

void reply(httplib::Response& res, int status, json body) {
    body["api"] = kApiVersion;
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

template <typename F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const Error& e) {
            reply(res, http_status(e.code()), {{"error", e.code()}, {"message", e.what()}});
        } catch (const json::exception& e) {
            reply(res, 400, {{"error", "bad_request"}, {"message", e.what()}});
        } catch (const std::exception& e) {
            reply(res, 500, {{"error", "internal"}, {"message", e.what()}});
        }
    };
}

int64_t parse_int(const std::string& s) {
    try {
        size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw Error("bad_request", "expected an integer, got '" + s + "'");
}

} // namespace

void register_routes(httplib::Server& server, SessionManager& sessions) {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});

    server.Get("/healthz", guarded([&](const httplib::Request&, httplib::Response& res) {
                   reply(res, 200, sessions.health());
               }));

    server.Post("/sessions", guarded([&](const httplib::Request& req, httplib::Response& res) {
                    const json body = parse_body(req);
                    SessionSpec spec;
                    require(body.contains("volume_id"), "bad_request", "volume_id is required");
                    spec.volume_id = body.at("volume_id").get<std::string>();
                    if (body.contains("target")) spec.target = body.at("target").get<std::string>();
                    if (body.contains("center")) {
                        const auto& c = body.at("center");
                        require(c.is_array() && c.size() == 3, "bad_request", "center must be [z, y, x]");
                        spec.center = Coord3{c[0].get<int64_t>(), c[1].get<int64_t>(), c[2].get<int64_t>()};
                    }
                    const std::string id = sessions.create(spec);
                    reply(res, 201, to_json(sessions.info(id)));
                }));

    server.Get(R"(/sessions/([^/]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
                   reply(res, 200, to_json(sessions.info(req.matches[1])));
               }));

    server.Post(R"(/sessions/([^/]+)/prompts)", guarded([&](const httplib::Request& req, httplib::Response& res) {
                    const json body = parse_body(req);
                    const PromptPoint p = parse_point(body);
                    std::optional<std::pair<int, int64_t>> view;
                    if (body.contains("view")) {
                        const auto& v = body.at("view");
                        view = std::make_pair(v.at("axis").get<int>(), v.at("index").get<int64_t>());
                    }
                    reply(res, 200, to_json(sessions.prompt(req.matches[1], p, view)));
                }));

    server.Get(R"(/sessions/([^/]+)/slices/([^/]+)/([^/]+))",
               guarded([&](const httplib::Request& req, httplib::Response& res) {
                   const int64_t axis = parse_int(req.matches[2]);
                   require(axis >= 0 && axis <= 2, "bad_request", "axis must be 0, 1 or 2");
                   reply(res, 200, to_json(sessions.slice(req.matches[1], static_cast<int>(axis), parse_int(req.matches[3]))));
               }));

    server.Get(R"(/sessions/([^/]+)/mask)", guarded([&](const httplib::Request& req, httplib::Response& res) {
                   const auto m = sessions.mask(req.matches[1]);
                   const Shape3& s = m.shape();
                   reply(res, 200, {{"shape", {s.d, s.h, s.w}}, {"runs", to_json(rle_encode(m.values()))}});
               }));

    server.Delete(R"(/sessions/([^/]+))", guarded([&](const httplib::Request& req, httplib::Response& res) {
                      sessions.remove(req.matches[1]);
                      reply(res, 200, {{"deleted", std::string(req.matches[1])}});
                  }));
}

ServiceConfig ServiceConfig::from_env() {
    ServiceConfig c;
    if (const char* v = std::getenv("MODEL_CKPT")) c.checkpoint = v;
    if (const char* v = std::getenv("DATA_DIR")) c.data_dir = v;
    if (const char* v = std::getenv("SESSION_DIR")) c.session_dir = v;
    if (const char* v = std::getenv("PORT")) c.port = static_cast<int>(parse_int(v));
    return c;
}

void run_server(const ServiceConfig& config) {
    require(!config.checkpoint.empty(), "config", "MODEL_CKPT is not set");
    auto loaded = net::load_checkpoint(config.checkpoint);
    std::optional<DatasetManifest> data;
    if (!config.data_dir.empty()) data = load_manifest(config.data_dir / "manifest.json");
    SessionManager sessions(loaded.model, std::move(data), config.session_dir);
    sessions.restore();
    httplib::Server server;
    register_routes(server, sessions);
    require(server.bind_to_port(config.host, config.port), "config",
            "cannot bind " + config.host + ":" + std::to_string(config.port));
    server.listen_after_bind();
}

} // namespace petprompt::service
