#include <doctest.h>

#include <httplib.h>

#include "recon/api.hpp"
#include "recon/appscan.hpp"
#include "recon/attrib.hpp"
#include "recon/error.hpp"

using namespace recon;
using nlohmann::json;

namespace {

orchestrator::OperationSpec small_op() {
  orchestrator::OperationSpec s;
  s.ranges = {Ipv4Range::parse("127.30.0.0/28")};
  s.port = 18400;
  s.protocol_id = "http";
  s.seed = 4;
  s.unit_size = 8;
  return s;
}

httplib::Headers bearer(const std::string& t) { return {{"Authorization", "Bearer " + t}}; }

}  // namespace

TEST_CASE("result body round trip") {
  orchestrator::ResultBatch b;
  b.probed = {Ipv4(127, 0, 0, 1), Ipv4(127, 0, 0, 2)};
  appscan::ServiceRecord r;
  r.ip = Ipv4(127, 0, 0, 2);
  r.port = 80;
  r.protocol_id = "http";
  r.banner = "nginx";
  b.records.push_back(appscan::to_json(r));
  const auto [node, back] = api::decode_result_body(api::encode_result_body("n1", b));
  CHECK(node == "n1");
  CHECK(back.probed == b.probed);
  REQUIRE(back.records.size() == 1);
  CHECK(appscan::record_from_json(back.records[0]) == r);
  CHECK_THROWS_AS(api::decode_result_body(""), InvalidArgument);
}

TEST_CASE("node routes require the node token") {
  orchestrator::Orchestrator orch;
  api::ApiServer server(orch, {.node_token = "sekrit"});
  httplib::Client c("127.0.0.1", server.port());

  auto bad = c.Post("/nodes", R"({"site_group":"g"})", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 401);
  auto wrong = c.Post("/nodes", bearer("nope"), R"({"site_group":"g"})", "application/json");
  REQUIRE(wrong);
  CHECK(wrong->status == 401);
  auto ok = c.Post("/nodes", bearer("sekrit"), R"({"site_group":"g"})", "application/json");
  REQUIRE(ok);
  CHECK(ok->status == 201);
  const auto id = json::parse(ok->body).at("node_id").get<std::string>();
  auto hb = c.Post("/nodes/" + id + "/heartbeat", bearer("sekrit"), "", "application/json");
  REQUIRE(hb);
  CHECK(hb->status / 100 == 2);
  auto unknown = c.Post("/nodes/ghost/heartbeat", bearer("sekrit"), "", "application/json");
  REQUIRE(unknown);
  CHECK(unknown->status == 401);  // unknown node is an identity error
}

TEST_CASE("operations, units and results over HTTP") {
  orchestrator::Orchestrator orch;
  api::ApiServer server(orch, {.node_token = "t", .operator_token = "op"});
  httplib::Client c("127.0.0.1", server.port());

  json spec;
  orchestrator::to_json(spec, small_op());
  auto no_auth = c.Post("/operations", spec.dump(), "application/json");
  REQUIRE(no_auth);
  CHECK(no_auth->status == 401);
  auto created = c.Post("/operations", bearer("op"), spec.dump(), "application/json");
  REQUIRE(created);
  REQUIRE(created->status == 201);
  const auto op_id = json::parse(created->body).at("operation_id").get<std::string>();

  auto bad_spec = c.Post("/operations", bearer("op"), "{nope", "application/json");
  REQUIRE(bad_spec);
  CHECK(bad_spec->status == 400);

  json public_spec = spec;
  public_spec["ranges"] = {"8.8.8.0/24"};
  auto pub = c.Post("/operations", bearer("op"), public_spec.dump(), "application/json");
  REQUIRE(pub);
  CHECK(pub->status == 400);

  api::HttpLink link(server.base_url(), "t");
  const auto node = link.register_node({"", "g1", "low"});
  std::size_t units = 0, probed = 0;
  while (auto a = link.next_unit(node.node_id)) {
    ++units;
    orchestrator::ResultBatch b;
    for (std::uint32_t k = 0; k < a->unit.length(); ++k)
      b.probed.push_back(Ipv4(127, 30, 0, static_cast<std::uint8_t>(a->unit.start_index + k)));
    probed += b.probed.size();
    appscan::ServiceRecord r;
    r.ip = b.probed.front();
    r.port = 18400;
    r.protocol_id = "http";
    r.banner = "unit " + std::to_string(a->unit.unit_id);
    b.records.push_back(appscan::to_json(r));
    const auto ack = link.submit(node.node_id, a->unit.unit_id, b);
    CHECK(ack.accepted);
    CHECK_FALSE(ack.late);
    const auto again = link.submit(node.node_id, a->unit.unit_id, b);
    CHECK(again.duplicate);
  }
  CHECK(units == 2);
  CHECK(probed == 16);

  auto st = c.Get("/operations/" + op_id, bearer("op"));
  REQUIRE(st);
  CHECK(st->status == 200);
  CHECK(json::parse(st->body).at("completed") == 2);

  auto res = c.Get("/operations/" + op_id + "/results", bearer("op"));
  REQUIRE(res);
  CHECK(res->status == 200);
  std::size_t lines = 0;
  std::istringstream in(res->body);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    ++lines;
    CHECK(appscan::record_from_json(json::parse(line)).port == 18400);
  }
  CHECK(lines == 2);

  auto missing = c.Get("/operations/op-999/results", bearer("op"));
  REQUIRE(missing);
  CHECK(missing->status == 404);
  auto list = c.Get("/operations", bearer("op"));
  REQUIRE(list);
  CHECK(json::parse(list->body).size() == 1);
}

TEST_CASE("abort returns a unit to the pool") {
  orchestrator::Orchestrator orch;
  api::ApiServer server(orch, {});
  orch.create_operation(small_op());
  api::HttpLink link(server.base_url(), "");
  const auto n = link.register_node({"", "", ""});
  const auto a = link.next_unit(n.node_id);
  REQUIRE(a);
  link.abort_unit(n.node_id, a->unit.unit_id);
  CHECK(orch.unit(a->unit.unit_id).attempt_count == 1);
  CHECK(orch.unit(a->unit.unit_id).state == ipgen::UnitState::pending);
}

TEST_CASE("curation routes") {
  orchestrator::Orchestrator orch;
  api::ApiServer server(orch, {.operator_token = "op"});
  httplib::Client c("127.0.0.1", server.port());

  auto off = c.Get("/assignments", bearer("op"));
  REQUIRE(off);
  CHECK(off->status == 404);

  attrib::AssignmentBook book;
  attrib::AssetAssignment a;
  a.assignment_id = "as-1";
  a.record = {"op-1", Ipv4(127, 0, 0, 9), 443, "https", ""};
  a.entity_id = "e1";
  a.status = attrib::AssignmentStatus::pending_review;
  book.add({a});
  server.attach_curation(book);

  auto pending = c.Get("/assignments?status=pending_review", bearer("op"));
  REQUIRE(pending);
  CHECK(pending->status == 200);
  CHECK(json::parse(pending->body).size() == 1);

  auto noauth = c.Post("/assignments/as-1/decision", R"({"decision":"accept","reviewer":"r"})", "application/json");
  REQUIRE(noauth);
  CHECK(noauth->status == 401);
  auto no_reviewer = c.Post("/assignments/as-1/decision", bearer("op"), R"({"decision":"accept"})", "application/json");
  REQUIRE(no_reviewer);
  CHECK(no_reviewer->status == 400);
  auto garbage = c.Post("/assignments/as-1/decision", bearer("op"), R"({"decision":"maybe","reviewer":"r"})",
                        "application/json");
  REQUIRE(garbage);
  CHECK(garbage->status == 400);
  auto ok = c.Post("/assignments/as-1/decision", bearer("op"), R"({"decision":"accept","reviewer":"r"})",
                   "application/json");
  REQUIRE(ok);
  CHECK(ok->status == 200);
  CHECK(json::parse(ok->body).at("status") == "accepted");
  auto twice = c.Post("/assignments/as-1/decision", bearer("op"), R"({"decision":"reject","reviewer":"r"})",
                      "application/json");
  REQUIRE(twice);
  CHECK(twice->status == 409);
  auto nf = c.Post("/assignments/as-x/decision", bearer("op"), R"({"decision":"reject","reviewer":"r"})",
                   "application/json");
  REQUIRE(nf);
  CHECK(nf->status == 404);
  CHECK(book.audit().size() == 1);
}
