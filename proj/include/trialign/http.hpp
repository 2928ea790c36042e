// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <httplib.h>

#include "trialign/service.hpp"

namespace trialign {

/// Routes the service endpoints of `service` on `server`.
inline void bind_http(httplib::Server& server, const QueryService& service) {
  auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
    const auto out = service.handle(req.method, req.path, req.body);
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  server.Get("/healthz", forward);
  server.Post("/query", forward);
  server.Post("/query_joint", forward);
  server.set_error_handler([&service](const httplib::Request& req, httplib::Response& res) {
    if (!res.body.empty()) return;
    const auto out = service.handle(req.method, req.path, req.body);
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  });
}

}  // namespace trialign
