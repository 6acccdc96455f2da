#include <doctest.h>

#include <thread>

#include "recon/appscan.hpp"
#include "recon/error.hpp"
#include "recon/simnet.hpp"

using namespace recon;
using namespace recon::appscan;
using namespace std::chrono_literals;

namespace {

const HandlerRegistry& registry() {
  static const auto r = HandlerRegistry::load(std::string(RECON_SOURCE_DIR) + "/config/handlers.json");
  return r;
}

GrabConfig quick() {
  GrabConfig g;
  g.connect_timeout = 1000ms;
  g.read_timeout = 500ms;
  g.total_timeout = 3000ms;
  g.node_id = "n1";
  g.site_group = "eu";
  return g;
}

simnet::SimServiceSpec svc(std::uint8_t host, std::uint16_t port, std::string proto, std::string banner) {
  simnet::SimServiceSpec s;
  s.address = Ipv4(127, 40, 0, host);
  s.port = port;
  s.protocol_id = std::move(proto);
  s.banner = std::move(banner);
  return s;
}

}  // namespace

TEST_CASE("registry loads shipped handler table") {
  const auto& r = registry();
  CHECK(r.at("http").handler == "http");
  CHECK(r.at("https").handler == "https");
  CHECK(r.at("ssh").default_port == 22);
  CHECK(r.at("snmpv1").transport == Transport::udp);
  CHECK(!r.at("snmpv1").udp_payload.empty());
  CHECK(r.resolve("not-registered").handler == "openport");
  CHECK(r.resolve("not-registered").transport == Transport::tcp);
  CHECK_THROWS_AS(r.at("not-registered"), NotFound);
  for (const auto& id : r.protocol_ids()) CHECK(is_known_handler(r.at(id).handler));
}

TEST_CASE("registry rejects UDP with a TCP banner handler") {
  HandlerRegistry r;
  CHECK_THROWS_AS(r.add({"x", Transport::udp, 1, "http", ""}), InvalidArgument);
  CHECK_THROWS_AS(r.add({"x", Transport::tcp, 1, "gopher", ""}), InvalidArgument);
  r.add({"x", Transport::udp, 1, "openport", "\x01"});
  CHECK(r.contains("x"));
}

TEST_CASE("http server header extraction") {
  bool bad = false;
  CHECK(http_server_header("HTTP/1.1 200 OK\r\nServer: nginx/1.18.0\r\n\r\n", &bad) == "nginx/1.18.0");
  CHECK(!bad);
  CHECK(http_server_header("HTTP/1.0 404 Not Found\r\nserver:   Apache/2.4.41 (Ubuntu)  \r\nX: y\r\n\r\n", &bad) ==
        "Apache/2.4.41 (Ubuntu)");
  CHECK(http_server_header("HTTP/1.1 200 OK\r\nContent-Length: 0\r\n\r\n", &bad).empty());
  CHECK(!bad);
  CHECK(http_server_header("SSH-2.0-OpenSSH_8.2\r\n", &bad).empty());
  CHECK(bad);
  // Header block cut off before the blank line still yields the header.
  CHECK(http_server_header("HTTP/1.1 200 OK\r\nServer: lighttpd/1.4", &bad) == "lighttpd/1.4");
}

TEST_CASE("telnet negotiation bytes are stripped") {
  CHECK(strip_telnet_iac(std::string("\xff\xfb\x01\xff\xfb\x03login: ")) == "login: ");
  CHECK(strip_telnet_iac(std::string("\xff\xfa\x18\x01\xff\xf0hi", 8)) == "hi");
  CHECK(strip_telnet_iac(std::string("a\xff\xff" "b", 4)) == "a\xff" "b");
}

TEST_CASE("banner groups") {
  CHECK(classify_banner_group("") == "empty");
  CHECK(classify_banner_group("   ") == "empty");
  CHECK(classify_banner_group("SSH-2.0-OpenSSH_7.4") == "ssh-family");
  CHECK(classify_banner_group("Microsoft-IIS/10.0") == "iis");
  CHECK(classify_banner_group("nginx/1.14.0 (Ubuntu)") == "nginx");
  CHECK(classify_banner_group("Apache/2.4.29 (Ubuntu)") == "apache");
  CHECK(classify_banner_group("Apache-Coyote/1.1") == "other");
  CHECK(classify_banner_group("ProFTPD 1.3.5 Server") == "ftp-family");
  CHECK(classify_banner_group("FileZilla Server 0.9.60 beta") == "ftp-family");
  CHECK(classify_banner_group("lighttpd/1.4.45") == "other");
}

TEST_CASE("record json round trip keeps binary excerpt") {
  ServiceRecord r;
  r.ip = Ipv4(10, 0, 0, 1);
  r.port = 23;
  r.protocol_id = "telnet";
  r.banner = "login:";
  r.raw_excerpt = std::string("\xff\xfb\x01\x00zz", 6);
  r.collected_at = 1700000000123456;
  r.node_id = "n";
  r.site_group = "eu";
  const auto j = to_json(r);
  CHECK(j["raw_excerpt"] == "fffb01007a7a");
  CHECK(record_from_json(j) == r);
  CHECK_THROWS_AS(hex_decode("abc"), InvalidArgument);
  CHECK_THROWS_AS(hex_decode("zz"), InvalidArgument);
}

TEST_CASE("grabs match simnet ground truth byte for byte") {
  std::vector<simnet::SimServiceSpec> specs = {
      svc(1, 18100, "http", "nginx/1.18.0"),
      svc(2, 18100, "http", ""),
      svc(3, 18101, "ssh", "SSH-2.0-OpenSSH_8.2p1 Ubuntu-4ubuntu0.5"),
      svc(4, 18102, "ftp", "ProFTPD 1.3.5b Server (Debian)"),
      svc(5, 18103, "telnet", "  router login:  "),
      svc(6, 18104, "pop3", "Dovecot ready."),
      svc(7, 18105, "imap", "[CAPABILITY IMAP4rev1] Dovecot ready."),
      svc(8, 18106, "mysql", "\x4a\x00\x00\x00\x0a" "5.7.33"),
  };
  auto tls_svc = svc(9, 18107, "https", "Microsoft-IIS/10.0");
  tls_svc.tls = simnet::TlsSpec{"portal.klinikum-a.de", {"portal.klinikum-a.de", "www.klinikum-a.de"}};
  specs.push_back(tls_svc);
  simnet::SimNet net(specs, registry());

  for (const auto& m : net.manifest()) {
    INFO("service " << m.endpoint.to_string() << " " << m.protocol_id);
    const auto spec = registry().resolve(m.protocol_id);
    const auto rec = grab(m.endpoint, spec, quick());
    CHECK(rec.banner == m.banner);
    CHECK(rec.ip == m.endpoint.ip);
    CHECK(rec.port == m.endpoint.port);
    CHECK(rec.node_id == "n1");
    CHECK(rec.site_group == "eu");
    CHECK(!rec.silent);
    CHECK(!rec.malformed);
    CHECK(rec.raw_excerpt.size() <= kExcerptCap);
    CHECK(rec.collected_at > 1'600'000'000'000'000);
    if (m.tls) {
      REQUIRE(rec.tls);
      REQUIRE(!rec.tls->empty());
      CHECK(rec.tls->front().subject_cn == m.tls->cn);
      CHECK(rec.tls->front().sans == m.tls->sans);
      CHECK(rec.tls->front().fingerprint_sha256.size() == 64);
    } else {
      CHECK(!rec.tls);
    }
    // Application layer stays inside its per-handler request budget.
    CHECK(net.stats(m.endpoint).max_request_bytes <= request_budget(spec));
  }
}

TEST_CASE("openport records presence without reading") {
  simnet::SimNet net({svc(20, 18120, "mysql", std::string(40000, 'x'))}, registry());
  const auto rec = grab({Ipv4(127, 40, 0, 20), 18120}, registry().resolve("mysql"), quick());
  CHECK(rec.banner.empty());
  CHECK(rec.raw_excerpt.empty());
  CHECK(!rec.silent);
}

TEST_CASE("long http banner is capped") {
  simnet::SimNet net({svc(21, 18121, "http", std::string(30000, 'A'))}, registry());
  const auto rec = grab({Ipv4(127, 40, 0, 21), 18121}, registry().at("http"), quick());
  CHECK(rec.banner.size() <= kBannerCap);
  CHECK(rec.raw_excerpt.size() == kExcerptCap);
}

TEST_CASE("silent service within read timeout is recorded as silent") {
  auto s = svc(22, 18122, "ssh", "SSH-2.0-x");
  s.silent = true;
  simnet::SimNet net({s}, registry());
  const auto t0 = std::chrono::steady_clock::now();
  const auto rec = grab({Ipv4(127, 40, 0, 22), 18122}, registry().at("ssh"), quick());
  CHECK(rec.silent);
  CHECK(rec.banner.empty());
  CHECK(std::chrono::steady_clock::now() - t0 < 2500ms);
}

TEST_CASE("closed port grab is silent, not an error") {
  const auto rec = grab({Ipv4(127, 40, 0, 99), 18199}, registry().at("http"), quick());
  CHECK(rec.silent);
}

TEST_CASE("udp grab keeps reply excerpt") {
  simnet::SimNet net({svc(23, 18123, "snmpv1", "sysDescr: test")}, registry());
  const auto rec = grab({Ipv4(127, 40, 0, 23), 18123}, registry().at("snmpv1"), quick());
  CHECK(rec.transport == Transport::udp);
  CHECK(rec.raw_excerpt == "sysDescr: test");
  CHECK(rec.banner.empty());
}

TEST_CASE("grab_all preserves order and bounds parallelism") {
  std::vector<simnet::SimServiceSpec> specs;
  std::vector<Endpoint> targets;
  for (std::uint8_t i = 30; i < 70; ++i) {
    specs.push_back(svc(i, 18130, "ssh", "SSH-2.0-host" + std::to_string(i)));
    targets.push_back({Ipv4(127, 40, 0, i), 18130});
  }
  simnet::SimNet net(specs, registry());
  const auto recs = grab_all(targets, registry().at("ssh"), quick(), 8);
  REQUIRE(recs.size() == targets.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs[i].ip == targets[i].ip);
    CHECK(recs[i].banner == "SSH-2.0-host" + std::to_string(30 + i));
  }
  CHECK(grab_all({}, registry().at("ssh"), quick()).empty());
}

TEST_CASE("http request identifies the survey") {
  const auto req = http_request(Ipv4(10, 1, 2, 3));
  CHECK(req.rfind("GET / HTTP/1.0\r\n", 0) == 0);
  CHECK(req.find("Host: 10.1.2.3\r\n") != std::string::npos);
  CHECK(req.find(std::string("User-Agent: ") + kUserAgent) != std::string::npos);
  CHECK(req.size() <= request_budget(registry().at("http")));
}
