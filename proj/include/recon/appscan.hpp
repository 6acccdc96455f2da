#pragma once

// Application-layer grabbing for validated responders: one handler per
// protocol family, selected through a registry file.

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "recon/net.hpp"
#include "recon/tls.hpp"

namespace recon::appscan {

inline constexpr std::size_t kBannerCap = 16 * 1024;
inline constexpr std::size_t kExcerptCap = 1024;
inline constexpr const char* kUserAgent = "recon-survey/1.0 (research scan; opt-out: see reverse DNS)";

enum class Transport { tcp, udp };
std::string to_string(Transport t);
Transport transport_from_string(const std::string& s);

struct ServiceRecord {
  Ipv4 ip;
  std::uint16_t port = 0;
  std::string protocol_id;
  Transport transport = Transport::tcp;
  std::string banner;               // may be empty
  std::string raw_excerpt;          // first bytes received, binary
  std::optional<std::vector<CertInfo>> tls;
  std::int64_t collected_at = 0;    // unix microseconds
  std::string node_id;
  std::string site_group;
  bool silent = false;              // connected but nothing came back in time
  bool malformed = false;           // reply did not follow the handler's protocol

  friend bool operator==(const ServiceRecord&, const ServiceRecord&) = default;
};

// raw_excerpt is hex-encoded on the wire.
nlohmann::json to_json(const ServiceRecord& r);
ServiceRecord record_from_json(const nlohmann::json& j);

std::string hex_encode(std::string_view bytes);
std::string hex_decode(std::string_view hex);  // throws InvalidArgument
std::string sanitize_utf8(std::string_view bytes);

struct HandlerSpec {
  std::string protocol_id;
  Transport transport = Transport::tcp;
  std::uint16_t default_port = 0;
  std::string handler;      // http, https, ssh, ftp, telnet, pop3, imap, openport
  std::string udp_payload;  // raw bytes
};

class HandlerRegistry {
 public:
  HandlerRegistry() = default;
  static HandlerRegistry from_json(const nlohmann::json& doc);
  static HandlerRegistry load(const std::string& path);

  void add(HandlerSpec spec);
  bool contains(const std::string& protocol_id) const { return specs_.count(protocol_id) != 0; }
  const HandlerSpec& at(const std::string& protocol_id) const;  // NotFound
  // Unregistered ids fall back to a TCP openport handler.
  HandlerSpec resolve(const std::string& protocol_id) const;
  std::vector<std::string> protocol_ids() const;

 private:
  std::map<std::string, HandlerSpec> specs_;
};

bool is_known_handler(const std::string& name);
// Upper bound on bytes the handler writes to the service in plaintext.
std::size_t request_budget(const HandlerSpec& spec);
std::string http_request(Ipv4 host);

struct GrabConfig {
  std::chrono::milliseconds connect_timeout{5000};
  std::chrono::milliseconds read_timeout{10000};
  std::chrono::milliseconds total_timeout{20000};
  std::size_t read_cap = kBannerCap;
  std::optional<Ipv4> source;  // local address to bind
  std::string node_id;
  std::string site_group;
};

ServiceRecord grab(Endpoint target, const HandlerSpec& spec, const GrabConfig& config);

// Runs grabs with at most `parallelism` in flight; output order follows input.
std::vector<ServiceRecord> grab_all(const std::vector<Endpoint>& targets, const HandlerSpec& spec,
                                    const GrabConfig& config, std::size_t parallelism = 32);

// Exposed for tests and offline re-parsing.
std::string http_server_header(std::string_view response, bool* malformed);
std::string strip_telnet_iac(std::string_view bytes);

// Banner family for share-of-services charts.
inline const std::vector<std::string> kBannerGroups = {"empty", "apache", "iis", "nginx",
                                                       "ssh-family", "ftp-family", "other"};
std::string classify_banner_group(std::string_view banner);
inline std::string classify_banner_group(const ServiceRecord& r) { return classify_banner_group(r.banner); }

std::int64_t now_micros();

}  // namespace recon::appscan
