// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "trialign/encoder.hpp"
#include "trialign/error.hpp"
#include "trialign/retrieval.hpp"

namespace trialign {

/// JSON request handling for the retrieval service, independent of the HTTP
/// transport so that it can be exercised in-process.
///
///   GET  /healthz
///   POST /query        {vector | shape_id | modality + raw_vector, k}
///   POST /query_joint  {a, b, k}; a and b take any of the /query forms
///
/// Failures are answered as {"code": ..., "message": ...}.
class QueryService {
 public:
  struct Response {
    int status = 200;
    nlohmann::json body;
  };

  explicit QueryService(RetrievalIndex index, std::optional<ModelState> model = std::nullopt)
      : index_(std::make_shared<const RetrievalIndex>(std::move(index))), model_(std::move(model)) {}

  /// Replaces the index; requests in flight keep the snapshot they started with.
  void swap_index(RetrievalIndex index) {
    auto fresh = std::make_shared<const RetrievalIndex>(std::move(index));
    std::lock_guard lock(mutex_);
    index_ = std::move(fresh);
  }

  std::shared_ptr<const RetrievalIndex> snapshot() const {
    std::lock_guard lock(mutex_);
    return index_;
  }

  Response handle(const std::string& method, const std::string& path, const std::string& body) const {
    try {
      if (path == "/healthz") {
        if (method != "GET") return error(405, "method_not_allowed", "use GET for /healthz");
        const auto index = snapshot();
        return {200, {{"status", "ok"}, {"size", index->size()}, {"dim", index->dim()}}};
      }
      if (path != "/query" && path != "/query_joint") return error(404, "not_found", "unknown path " + path);
      if (method != "POST") return error(405, "method_not_allowed", "use POST for " + path);
      nlohmann::json request;
      try {
        request = nlohmann::json::parse(body);
      } catch (const nlohmann::json::exception& e) {
        return error(400, to_string(ErrorCode::parse), e.what());
      }
      require(request.is_object(), ErrorCode::parse, "request body must be a JSON object");
      const auto index = snapshot();
      const std::size_t k = request.value("k", std::size_t{10});
      std::vector<Hit> hits;
      if (path == "/query") {
        hits = query(*index, resolve(*index, request), k);
      } else {
        require(request.contains("a") && request.contains("b"), ErrorCode::invalid_argument,
                "query_joint needs both 'a' and 'b'");
        hits = query_joint(*index, resolve(*index, request["a"]), resolve(*index, request["b"]), k);
      }
      return {200, {{"results", render(*index, hits)}}};
    } catch (const Error& e) {
      return error(e.code() == ErrorCode::not_found ? 404 : 400, to_string(e.code()), e.what());
    } catch (const nlohmann::json::exception& e) {
      return error(400, to_string(ErrorCode::parse), e.what());
    }
  }

 private:
  static Response error(int status, const std::string& code, const std::string& message) {
    return {status, {{"code", code}, {"message", message}}};
  }

  // A bare array is an aligned-space vector; objects name their form.
  Vector resolve(const RetrievalIndex& index, const nlohmann::json& q) const {
    if (q.is_array()) return q.get<Vector>();
    require(q.is_object(), ErrorCode::parse, "query must be an array or an object");
    if (q.contains("vector")) return q["vector"].get<Vector>();
    if (q.contains("shape_id")) {
      const auto id = q["shape_id"].get<std::string>();
      const auto row = index.find(id);
      require(row.has_value(), ErrorCode::not_found, "unknown shape id '" + id + "'");
      const auto r = index.rows.row(*row);
      return Vector(r.begin(), r.end());
    }
    if (q.contains("modality")) {
      require(model_.has_value(), ErrorCode::invalid_argument, "service was started without a checkpoint");
      const auto modality = q["modality"].get<std::string>();
      require(modality == "text" || modality == "image", ErrorCode::invalid_argument,
              "modality must be 'text' or 'image'");
      const auto raw = q.at("raw_vector").get<Vector>();
      return project(raw, *model_, modality == "text" ? Modality::text : Modality::image);
    }
    fail(ErrorCode::invalid_argument, "query needs 'vector', 'shape_id' or 'modality' + 'raw_vector'");
  }

  static nlohmann::json render(const RetrievalIndex& index, const std::vector<Hit>& hits) {
    nlohmann::json out = nlohmann::json::array();
    for (const Hit& h : hits) {
      nlohmann::json item = {{"id", h.id}, {"score", h.score}};
      if (auto it = index.metadata.find(h.id); it != index.metadata.end()) item["metadata"] = it->second;
      out.push_back(std::move(item));
    }
    return out;
  }

  mutable std::mutex mutex_;
  std::shared_ptr<const RetrievalIndex> index_;
  std::optional<ModelState> model_;
};

}  // namespace trialign
