#pragma once

// HTTP+JSON control and worker API around an Orchestrator, and the node-side
// client for it.

#include <memory>
#include <string>

#include "recon/node.hpp"
#include "recon/orchestrator.hpp"

namespace recon::attrib {
class AssignmentBook;
}

namespace recon::api {

struct ServerOptions {
  std::string bind = "127.0.0.1";
  int port = 0;              // 0: ephemeral
  std::string node_token;    // required as "Authorization: Bearer <token>" on node routes
  std::string operator_token;  // empty: operator routes are open (loopback deployments)
};

// Routes:
//   POST /nodes                         register (body: site_group, bandwidth_class, node_id?)
//   GET  /nodes
//   POST /nodes/{id}/heartbeat
//   POST /nodes/{id}/units:next         200 {unit, operation} or 204
//   POST /units/{id}/result             NDJSON: header {node_id, probed[]} then records
//   POST /units/{id}/abort              {node_id}
//   POST /operations                    OperationSpec
//   GET  /operations, /operations/{id}, /operations/{id}/results[?late=1]
//   GET  /assignments?status=..., POST /assignments/{id}/decision  (when a book is attached)
class ApiServer {
 public:
  ApiServer(orchestrator::Orchestrator& orch, ServerOptions options);
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  void attach_curation(attrib::AssignmentBook& book);
  int port() const;
  std::string base_url() const;
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Result upload body, shared by server and client.
std::string encode_result_body(const std::string& node_id, const orchestrator::ResultBatch& batch);
std::pair<std::string, orchestrator::ResultBatch> decode_result_body(const std::string& body);

class HttpLink final : public node::MasterLink {
 public:
  HttpLink(const std::string& base_url, std::string token,
           std::chrono::milliseconds timeout = std::chrono::milliseconds(10000));
  ~HttpLink() override;

  orchestrator::NodeRecord register_node(const orchestrator::NodeDescriptor& d) override;
  void heartbeat(const std::string& node_id) override;
  std::optional<orchestrator::Assignment> next_unit(const std::string& node_id) override;
  orchestrator::SubmitAck submit(const std::string& node_id, std::uint64_t unit_id,
                                 const orchestrator::ResultBatch& batch) override;
  void abort_unit(const std::string& node_id, std::uint64_t unit_id) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace recon::api
