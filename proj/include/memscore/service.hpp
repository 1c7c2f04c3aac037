#pragma once

// HTTP scoring service:
//   POST /score        multipart (first file part) or raw PNG/JPEG body
//   POST /score/batch  multipart, one file part per image, at most 64
//   GET  /healthz      model tag and uptime
// The checkpoint is loaded once and only read while serving.

#include <chrono>
#include <cstddef>
#include <cstdlib>
#include <iostream>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "memscore/checkpoint.hpp"
#include "memscore/error.hpp"
#include "memscore/image_io.hpp"
#include "memscore/scoring.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose `_res` macro collides with
// Eigen parameter names.
#include <httplib.h>

namespace memscore {

struct ScoreResponse {
  double score = 0;
  std::string model_tag;
  std::string pipeline_tag;
  double elapsed_ms = 0;
};

inline void to_json(nlohmann::json& j, const ScoreResponse& r) {
  j = {{"score", r.score}, {"model_tag", r.model_tag}, {"pipeline_tag", r.pipeline_tag}, {"elapsed_ms", r.elapsed_ms}};
}
inline void from_json(const nlohmann::json& j, ScoreResponse& r) {
  j.at("score").get_to(r.score);
  j.at("model_tag").get_to(r.model_tag);
  j.at("pipeline_tag").get_to(r.pipeline_tag);
  j.at("elapsed_ms").get_to(r.elapsed_ms);
}

inline std::string pipeline_tag(const PipelineConfig& p) {
  return pipeline_kind(p) + "-" + std::to_string(pipeline_output_size(p));
}

struct ServiceConfig {
  std::size_t max_body_bytes = 10u * 1024u * 1024u;
  std::size_t max_batch = 64;
  std::string cors_origin = "*";
};

inline constexpr const char* kCheckpointEnv = "MEMSCORE_CHECKPOINT";

/// Checkpoint path from the flag, else the environment variable.
inline std::string checkpoint_path_or_env(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kCheckpointEnv); env && *env) return env;
  throw ValidationError(std::string("no checkpoint given (use --checkpoint or set ") + kCheckpointEnv + ")");
}

class ScoringService {
 public:
  explicit ScoringService(Checkpoint ck, ServiceConfig cfg = {})
      : ck_(std::move(ck)), cfg_(std::move(cfg)), tag_(pipeline_tag(ck_.pipeline)),
        started_(std::chrono::steady_clock::now()) {
    mount();
  }

  ScoringService(const ScoringService&) = delete;
  ScoringService& operator=(const ScoringService&) = delete;

  /// Decodes and scores one image; throws DecodeError on bad bytes.
  ScoreResponse score_bytes(std::string_view bytes) const {
    const auto t0 = std::chrono::steady_clock::now();
    const ImageTensor img = decode_image(std::string(bytes));
    ScoreResponse r;
    r.score = score_image(ck_.model, ck_.pipeline, img);
    r.model_tag = ck_.model.tag();
    r.pipeline_tag = tag_;
    r.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

  const std::string& model_tag() const { return ck_.model.tag(); }
  httplib::Server& server() { return server_; }

  /// Binds and serves until stop(); returns false if the bind fails.
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  /// Binds to an ephemeral port, returning it (or -1).
  int bind_any(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

 private:
  static void send_error(httplib::Response& res, int status, const std::string& msg) {
    res.status = status;
    res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
  }

  /// Rejects requests naming a model other than the loaded one.
  bool check_model(const httplib::Request& req, httplib::Response& res) const {
    std::string wanted;
    if (req.has_param("model")) wanted = req.get_param_value("model");
    if (req.has_file("model")) wanted = req.get_file_value("model").content;
    if (!wanted.empty() && wanted != ck_.model.tag()) {
      send_error(res, 400, "unknown model tag '" + wanted + "' (serving '" + ck_.model.tag() + "')");
      return false;
    }
    return true;
  }

  static std::vector<const httplib::MultipartFormData*> file_parts(const httplib::Request& req) {
    std::vector<const httplib::MultipartFormData*> out;
    for (const auto& [name, part] : req.files)
      if (name != "model") out.push_back(&part);
    return out;
  }

  void mount() {
    server_.set_payload_max_length(cfg_.max_body_bytes);
    server_.set_default_headers({{"Access-Control-Allow-Origin", cfg_.cors_origin},
                                 {"Access-Control-Allow-Headers", "Content-Type"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server_.set_exception_handler([](const httplib::Request& req, httplib::Response& res, std::exception_ptr ep) {
      try {
        if (ep) std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        std::cerr << "error: " << req.method << " " << req.path << ": " << e.what() << "\n";
      } catch (...) {
        std::cerr << "error: " << req.method << " " << req.path << ": unknown exception\n";
      }
      send_error(res, 500, "internal error");
    });
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.status == 413 && res.body.empty()) send_error(res, 413, "request body exceeds the size limit");
    });
    server_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      const double up = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
      res.set_content(nlohmann::json{{"status", "ok"},
                                     {"model_tag", ck_.model.tag()},
                                     {"pipeline_tag", tag_},
                                     {"uptime_s", up}}
                          .dump(),
                      "application/json");
    });

    server_.Post("/score", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_model(req, res)) return;
      std::string_view body = req.body;
      if (req.is_multipart_form_data()) {
        const auto parts = file_parts(req);
        if (parts.empty()) return send_error(res, 400, "multipart request has no image part");
        body = parts.front()->content;
      }
      if (body.empty()) return send_error(res, 400, "empty request body");
      try {
        res.set_content(nlohmann::json(score_bytes(body)).dump(), "application/json");
      } catch (const DecodeError& e) {
        send_error(res, 400, std::string("cannot decode image: ") + e.what());
      }
    });

    server_.Post("/score/batch", [this](const httplib::Request& req, httplib::Response& res) {
      if (!check_model(req, res)) return;
      if (!req.is_multipart_form_data()) return send_error(res, 400, "batch requests must be multipart/form-data");
      const auto parts = file_parts(req);
      if (parts.empty()) return send_error(res, 400, "batch request has no image parts");
      if (parts.size() > cfg_.max_batch)
        return send_error(res, 413, "batch of " + std::to_string(parts.size()) + " images exceeds the limit of " +
                                        std::to_string(cfg_.max_batch));
      nlohmann::json out = nlohmann::json::array();
      for (std::size_t i = 0; i < parts.size(); ++i) {
        try {
          out.push_back(score_bytes(parts[i]->content));
        } catch (const DecodeError& e) {
          return send_error(res, 400, "cannot decode image " + std::to_string(i) + " ('" + parts[i]->filename +
                                          "'): " + e.what());
        }
      }
      res.set_content(out.dump(), "application/json");
    });
  }

  Checkpoint ck_;
  ServiceConfig cfg_;
  std::string tag_;
  std::chrono::steady_clock::time_point started_;
  httplib::Server server_;
};

}  // namespace memscore
