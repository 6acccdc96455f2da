#include "recon/api.hpp"

#include <sstream>
#include <thread>

#include <httplib.h>

#include "recon/appscan.hpp"
#include "recon/attrib.hpp"
#include "recon/error.hpp"

namespace recon::api {

using nlohmann::json;
using orchestrator::SteadyClock;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) {
  send_json(res, status, {{"error", msg}});
}

// Maps library errors onto status codes.
template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const InvalidArgument& e) {
    send_error(res, 400, e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, std::string("bad json: ") + e.what());
  } catch (const Unauthorized& e) {
    send_error(res, 401, e.what());
  } catch (const NotFound& e) {
    send_error(res, 404, e.what());
  } catch (const Conflict& e) {
    send_error(res, 409, e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

std::uint64_t parse_id(const std::string& s) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw InvalidArgument("bad id '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw InvalidArgument("bad id '" + s + "'");
  }
}

json assignment_to_json(const orchestrator::Assignment& a) {
  json op;
  orchestrator::to_json(op, a.operation);
  return {{"unit", orchestrator::unit_to_json(a.unit)}, {"operation", op}};
}

std::size_t records_ndjson_lines(const std::vector<orchestrator::Orchestrator::LoggedResult>& log, std::string& out) {
  std::size_t n = 0;
  for (const auto& entry : log) {
    for (const auto& r : entry.batch.records) {
      out += r.dump();
      out += '\n';
      ++n;
    }
  }
  return n;
}

}  // namespace

std::string encode_result_body(const std::string& node_id, const orchestrator::ResultBatch& batch) {
  json probed = json::array();
  for (Ipv4 ip : batch.probed) probed.push_back(ip.to_string());
  std::string out = json{{"node_id", node_id}, {"probed", probed}}.dump();
  out += '\n';
  for (const auto& r : batch.records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

std::pair<std::string, orchestrator::ResultBatch> decode_result_body(const std::string& body) {
  std::istringstream in(body);
  std::string line;
  if (!std::getline(in, line)) throw InvalidArgument("empty result body");
  const auto head = json::parse(line);
  std::pair<std::string, orchestrator::ResultBatch> out;
  out.first = head.at("node_id").get<std::string>();
  for (const auto& ip : head.at("probed")) out.second.probed.push_back(Ipv4::parse(ip.get<std::string>()));
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto rec = json::parse(line);
    appscan::record_from_json(rec);  // schema check
    out.second.records.push_back(std::move(rec));
  }
  return out;
}

// ---- server ----

struct ApiServer::Impl {
  orchestrator::Orchestrator& orch;
  ServerOptions opt;
  httplib::Server server;
  std::thread thread;
  int port = 0;
  attrib::AssignmentBook* book = nullptr;

  Impl(orchestrator::Orchestrator& o, ServerOptions options) : orch(o), opt(std::move(options)) {}

  static bool bearer_ok(const httplib::Request& req, const std::string& token) {
    if (token.empty()) return true;
    return req.get_header_value("Authorization") == "Bearer " + token;
  }
  void require_node(const httplib::Request& req) const {
    if (!bearer_ok(req, opt.node_token)) throw Unauthorized("missing or wrong node token");
  }
  void require_operator(const httplib::Request& req) const {
    if (!bearer_ok(req, opt.operator_token)) throw Unauthorized("missing or wrong operator token");
  }

  void routes() {
    auto& s = server;
    s.Post("/nodes", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_node(req);
        const auto body = req.body.empty() ? json::object() : json::parse(req.body);
        const auto rec = orch.register_node(
            {body.value("node_id", ""), body.value("site_group", ""), body.value("bandwidth_class", "")},
            SteadyClock::now());
        send_json(res, 201, orchestrator::node_to_json(rec, SteadyClock::now()));
      });
    });
    s.Get("/nodes", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_operator(req);
        json out = json::array();
        const auto now = SteadyClock::now();
        for (const auto& n : orch.nodes()) out.push_back(orchestrator::node_to_json(n, now));
        send_json(res, 200, out);
      });
    });
    s.Post(R"(/nodes/([^/]+)/heartbeat)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_node(req);
        orch.heartbeat(req.matches[1], SteadyClock::now());
        send_json(res, 200, {{"ok", true}});
      });
    });
    s.Post(R"(/nodes/([^/]+)/units:next)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_node(req);
        auto a = orch.next_unit(req.matches[1], SteadyClock::now());
        if (!a) {
          res.status = 204;
          return;
        }
        send_json(res, 200, assignment_to_json(*a));
      });
    });
    s.Post(R"(/units/(\d+)/result)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_node(req);
        auto [node_id, batch] = decode_result_body(req.body);
        const auto ack = orch.submit_result(node_id, parse_id(req.matches[1]), batch, SteadyClock::now());
        send_json(res, 200, {{"accepted", ack.accepted}, {"duplicate", ack.duplicate}, {"late", ack.late}});
      });
    });
    s.Post(R"(/units/(\d+)/abort)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_node(req);
        const auto body = json::parse(req.body);
        orch.abort_unit(body.at("node_id").get<std::string>(), parse_id(req.matches[1]), SteadyClock::now());
        send_json(res, 200, {{"ok", true}});
      });
    });
    s.Post("/operations", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_operator(req);
        const auto spec = orchestrator::operation_spec_from_json(json::parse(req.body));
        const auto id = orch.create_operation(spec);
        send_json(res, 201, {{"operation_id", id}});
      });
    });
    s.Get("/operations", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_operator(req);
        json out = json::array();
        for (const auto& id : orch.operation_ids()) out.push_back(orchestrator::status_to_json(orch.status(id)));
        send_json(res, 200, out);
      });
    });
    s.Get(R"(/operations/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_operator(req);
        send_json(res, 200, orchestrator::status_to_json(orch.status(req.matches[1])));
      });
    });
    s.Get(R"(/operations/([^/]+)/results)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_operator(req);
        const std::string id = req.matches[1];
        orch.status(id);  // NotFound for unknown operations
        std::string out;
        records_ndjson_lines(req.get_param_value("late") == "1" ? orch.late_results(id) : orch.result_log(id), out);
        res.status = 200;
        res.set_content(out, "application/x-ndjson");
      });
    });
    s.Get("/assignments", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_operator(req);
        if (!book) throw NotFound("curation is not enabled on this server");
        std::optional<attrib::AssignmentStatus> filter;
        if (req.has_param("status")) filter = attrib::assignment_status_from_string(req.get_param_value("status"));
        json out = json::array();
        for (const auto& a : book->list(filter)) out.push_back(attrib::to_json(a));
        send_json(res, 200, out);
      });
    });
    s.Post(R"(/assignments/([^/]+)/decision)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        require_operator(req);
        if (!book) throw NotFound("curation is not enabled on this server");
        const auto body = json::parse(req.body);
        const auto decision = body.at("decision").get<std::string>();
        if (decision != "accept" && decision != "reject") throw InvalidArgument("decision must be accept or reject");
        const auto updated = book->decide(req.matches[1], decision == "accept", body.value("reviewer", ""));
        send_json(res, 200, attrib::to_json(updated));
      });
    });
  }
};

ApiServer::ApiServer(orchestrator::Orchestrator& orch, ServerOptions options)
    : impl_(std::make_unique<Impl>(orch, std::move(options))) {
  impl_->routes();
  impl_->server.set_payload_max_length(256u << 20);
  if (impl_->opt.port == 0) {
    impl_->port = impl_->server.bind_to_any_port(impl_->opt.bind);
  } else {
    impl_->port = impl_->server.bind_to_port(impl_->opt.bind, impl_->opt.port) ? impl_->opt.port : -1;
  }
  if (impl_->port <= 0) throw TransportError("api server could not bind " + impl_->opt.bind);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

ApiServer::~ApiServer() { stop(); }

void ApiServer::attach_curation(attrib::AssignmentBook& book) { impl_->book = &book; }
int ApiServer::port() const { return impl_->port; }
std::string ApiServer::base_url() const { return "http://" + impl_->opt.bind + ":" + std::to_string(impl_->port); }

void ApiServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

// ---- client ----

struct HttpLink::Impl {
  httplib::Client client;
  httplib::Headers headers;
  std::mutex mu;  // httplib::Client is not safe for concurrent requests

  Impl(const std::string& url, const std::string& token, std::chrono::milliseconds timeout) : client(url) {
    if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
    const auto secs = timeout.count() / 1000, usecs = (timeout.count() % 1000) * 1000;
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
  }

  httplib::Result post(const std::string& path, const std::string& body, const char* type) {
    std::lock_guard lk(mu);
    auto r = client.Post(path, headers, body, type);
    if (!r) throw TransportError("POST " + path + ": " + httplib::to_string(r.error()));
    return r;
  }

  static void check(const httplib::Result& r, const std::string& what) {
    const int st = r->status;
    if (st >= 200 && st < 300) return;
    std::string msg = what + ": HTTP " + std::to_string(st);
    try {
      msg += ": " + json::parse(r->body).value("error", "");
    } catch (const json::exception&) {
    }
    if (st == 400) throw InvalidArgument(msg);
    if (st == 401) throw Unauthorized(msg);
    if (st == 404) throw NotFound(msg);
    if (st == 409) throw Conflict(msg);
    throw TransportError(msg);
  }
};

HttpLink::HttpLink(const std::string& base_url, std::string token, std::chrono::milliseconds timeout)
    : impl_(std::make_unique<Impl>(base_url, token, timeout)) {}
HttpLink::~HttpLink() = default;

orchestrator::NodeRecord HttpLink::register_node(const orchestrator::NodeDescriptor& d) {
  const json body{{"node_id", d.node_id}, {"site_group", d.site_group}, {"bandwidth_class", d.bandwidth_class}};
  auto r = impl_->post("/nodes", body.dump(), "application/json");
  Impl::check(r, "register");
  const auto j = json::parse(r->body);
  orchestrator::NodeRecord rec;
  rec.node_id = j.at("node_id").get<std::string>();
  rec.site_group = j.value("site_group", "");
  rec.bandwidth_class = j.value("bandwidth_class", "");
  return rec;
}

void HttpLink::heartbeat(const std::string& node_id) {
  auto r = impl_->post("/nodes/" + node_id + "/heartbeat", "{}", "application/json");
  Impl::check(r, "heartbeat");
}

std::optional<orchestrator::Assignment> HttpLink::next_unit(const std::string& node_id) {
  auto r = impl_->post("/nodes/" + node_id + "/units:next", "{}", "application/json");
  Impl::check(r, "units:next");
  if (r->status == 204) return std::nullopt;
  const auto j = json::parse(r->body);
  return orchestrator::Assignment{orchestrator::unit_from_json(j.at("unit")),
                                  orchestrator::operation_spec_from_json(j.at("operation"))};
}

orchestrator::SubmitAck HttpLink::submit(const std::string& node_id, std::uint64_t unit_id,
                                         const orchestrator::ResultBatch& batch) {
  auto r = impl_->post("/units/" + std::to_string(unit_id) + "/result", encode_result_body(node_id, batch),
                       "application/x-ndjson");
  Impl::check(r, "result");
  const auto j = json::parse(r->body);
  return {j.value("accepted", false), j.value("duplicate", false), j.value("late", false)};
}

void HttpLink::abort_unit(const std::string& node_id, std::uint64_t unit_id) {
  auto r = impl_->post("/units/" + std::to_string(unit_id) + "/abort", json{{"node_id", node_id}}.dump(),
                       "application/json");
  Impl::check(r, "abort");
}

}  // namespace recon::api
