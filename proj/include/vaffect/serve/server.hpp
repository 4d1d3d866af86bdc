#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "vaffect/corpus/annotation.hpp"
#include "vaffect/corpus/image.hpp"
#include "vaffect/corpus/partition.hpp"
#include "vaffect/serve/png.hpp"

namespace vaffect::serve {

namespace fs = std::filesystem;

/// Corpus layout served to the annotation UI:
///   meta.csv                                  (optional)
///   videos/<id>/frames/<k>.ppm
///   videos/<id>/valence.txt, arousal.txt      raw annotation tracks
///   videos/<id>/merged.txt                    per-frame ground truth
///   predictions/<report>.csv                  "video,frame,valence,arousal"
class CorpusStore {
 public:
  explicit CorpusStore(const fs::path& root) : root_(fs::canonical(root)) {
    if (!fs::is_directory(root_ / "videos")) throw ContractError("corpus dir has no videos/ directory: " + root_.string());
  }

  const fs::path& root() const { return root_; }

  static bool valid_name(const std::string& s) {
    static const std::regex re("[A-Za-z0-9_][A-Za-z0-9_.-]{0,127}");
    return std::regex_match(s, re);
  }

  // Resolved path inside the corpus, or nullopt if it would escape it.
  std::optional<fs::path> inside(const fs::path& rel) const {
    const fs::path p = fs::weakly_canonical(root_ / rel);
    auto [r, q] = std::mismatch(root_.begin(), root_.end(), p.begin(), p.end());
    if (r != root_.end()) return std::nullopt;
    return p;
  }

  std::optional<fs::path> video_dir(const std::string& id) const {
    if (!valid_name(id)) return std::nullopt;
    auto p = inside(fs::path("videos") / id);
    if (!p || !fs::is_directory(*p)) return std::nullopt;
    return p;
  }

  std::vector<std::string> video_ids() const {
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(root_ / "videos"))
      if (e.is_directory() && valid_name(e.path().filename().string())) ids.push_back(e.path().filename().string());
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  std::size_t frame_count(const std::string& id) const {
    load_meta();
    if (auto it = meta_.find(id); it != meta_.end()) return it->second.frames;
    std::size_t n = 0;
    const auto dir = root_ / "videos" / id / "frames";
    if (fs::is_directory(dir))
      for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ".ppm";
    return n;
  }

  int fps(const std::string& id) const {
    load_meta();
    auto it = meta_.find(id);
    return it == meta_.end() ? 30 : it->second.fps;
  }

  std::mutex& video_mutex(const std::string& id) {
    std::lock_guard lock(mutexes_guard_);
    auto& m = mutexes_[id];
    if (!m) m = std::make_unique<std::mutex>();
    return *m;
  }

 private:
  void load_meta() const {
    std::call_once(meta_once_, [&] {
      if (fs::exists(root_ / "meta.csv"))
        for (auto& v : corpus::read_meta(root_ / "meta.csv")) meta_.emplace(v.id, v);
    });
  }

  fs::path root_;
  mutable std::once_flag meta_once_;
  mutable std::map<std::string, corpus::VideoMeta> meta_;
  std::mutex mutexes_guard_;
  std::map<std::string, std::unique_ptr<std::mutex>> mutexes_;
};

/// JSON-over-HTTP endpoints backing the annotation UI. Responses carry a
/// permissive CORS header; nothing is ever written outside the corpus dir.
class AnnotationServer {
 public:
  explicit AnnotationServer(const fs::path& corpus_dir) : store_(corpus_dir) { routes(); }

  httplib::Server& http() { return http_; }
  int bind_any_port(const std::string& host = "127.0.0.1") { return http_.bind_to_any_port(host); }
  bool listen_after_bind() { return http_.listen_after_bind(); }
  bool listen(const std::string& host, int port) { return http_.listen(host, port); }
  void stop() { http_.stop(); }
  void wait_until_ready() { http_.wait_until_ready(); }

 private:
  using json = nlohmann::json;

  static void send_json(httplib::Response& res, const json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& msg) { send_json(res, {{"error", msg}}, status); }

  void routes() {
    http_.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
    });
    http_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    http_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    });

    http_.Get("/videos", [this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (const auto& id : store_.video_ids()) {
        json dims = json::array();
        for (auto d : {corpus::Dimension::Valence, corpus::Dimension::Arousal})
          if (fs::exists(store_.root() / "videos" / id / (std::string(corpus::dimension_name(d)) + ".txt"))) dims.push_back(corpus::dimension_name(d));
        out.push_back({{"id", id}, {"frames", store_.frame_count(id)}, {"fps", store_.fps(id)}, {"annotated_dims", dims}});
      }
      send_json(res, out);
    });

    http_.Get(R"(/videos/([^/]+)/frames/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto dir = store_.video_dir(req.matches[1]);
      if (!dir) return send_error(res, 404, "unknown video");
      const std::string k = req.matches[2];
      if (k.size() > 9 || std::stoul(k) == 0) return send_error(res, 404, "bad frame number");
      const auto path = *dir / "frames" / (std::to_string(std::stoul(k)) + ".ppm");
      if (!fs::exists(path)) return send_error(res, 404, "no such frame");
      const auto png = encode_png(read_ppm(path));
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    });

    http_.Post(R"(/videos/([^/]+)/annotations/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      auto dir = store_.video_dir(id);
      if (!dir) return send_error(res, 404, "unknown video");
      corpus::Dimension dim;
      try {
        dim = corpus::parse_dimension(req.matches[2]);
      } catch (const ContractError&) {
        return send_error(res, 404, "dimension must be valence or arousal");
      }
      corpus::AnnotationTrack track;
      track.dimension = dim;
      try {
        const json body = json::parse(req.body);
        if (!body.is_array()) return send_error(res, 400, "body must be an array of {t, v}");
        for (const auto& s : body) {
          const double t = s.at("t").get<double>();
          const double v = s.at("v").get<double>();
          if (v != std::floor(v)) return send_error(res, 400, "values must be integers");
          track.samples.push_back({t, static_cast<int>(v)});
        }
        track.validate();
      } catch (const json::exception& e) {
        return send_error(res, 400, std::string("malformed annotation: ") + e.what());
      } catch (const ContractError& e) {
        return send_error(res, 400, e.what());
      }
      const auto target = store_.inside(fs::path("videos") / id / (std::string(corpus::dimension_name(dim)) + ".txt"));
      if (!target) return send_error(res, 403, "path escapes corpus");
      std::lock_guard lock(store_.video_mutex(id));
      const fs::path tmp = target->string() + ".tmp";
      corpus::write_track(tmp, track);
      fs::rename(tmp, *target);
      res.status = 204;
    });

    http_.Get(R"(/videos/([^/]+)/predictions)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (!store_.video_dir(id)) return send_error(res, 404, "unknown video");
      const auto dir = store_.root() / "predictions";
      std::string report = req.get_param_value("report");
      if (report.empty()) {
        std::vector<std::string> names;
        if (fs::is_directory(dir))
          for (const auto& e : fs::directory_iterator(dir))
            if (e.path().extension() == ".csv") names.push_back(e.path().stem().string());
        if (names.size() != 1) return send_error(res, 400, "choose a report with ?report=<name>");
        report = names.front();
      }
      if (!CorpusStore::valid_name(report)) return send_error(res, 400, "bad report name");
      const auto path = store_.inside(fs::path("predictions") / (report + ".csv"));
      if (!path || !fs::exists(*path)) return send_error(res, 404, "no such report");
      std::ifstream in(*path);
      std::string line;
      std::getline(in, line);
      json out = json::array();
      while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string video, k, v, a;
        std::getline(ss, video, ',');
        std::getline(ss, k, ',');
        std::getline(ss, v, ',');
        std::getline(ss, a, ',');
        if (video != id) continue;
        out.push_back({{"k", std::stol(k)}, {"valence", std::stod(v)}, {"arousal", std::stod(a)}});
      }
      send_json(res, out);
    });

    http_.Get(R"(/videos/([^/]+)/groundtruth)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      auto dir = store_.video_dir(id);
      if (!dir) return send_error(res, 404, "unknown video");
      std::vector<corpus::MergedRow> rows;
      if (fs::exists(*dir / "merged.txt")) {
        rows = corpus::read_merged(*dir / "merged.txt");
      } else if (fs::exists(*dir / "valence.txt") && fs::exists(*dir / "arousal.txt")) {
        std::lock_guard lock(store_.video_mutex(id));
        const std::size_t n = store_.frame_count(id);
        rows = corpus::merge(corpus::match_track(corpus::read_track(*dir / "valence.txt", corpus::Dimension::Valence), n),
                             corpus::match_track(corpus::read_track(*dir / "arousal.txt", corpus::Dimension::Arousal), n));
      } else {
        return send_error(res, 404, "no ground truth for this video");
      }
      json out = json::array();
      for (const auto& r : rows) out.push_back({{"k", r.frame}, {"valence", r.valence}, {"arousal", r.arousal}});
      send_json(res, out);
    });
  }

  CorpusStore store_;
  httplib::Server http_;
};

}  // namespace vaffect::serve
