#pragma once

// Thin RAII layer over OpenSSL for certificate collection (client side) and
// provisioned test identities (server side).

#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

typedef struct ssl_st SSL;
typedef struct ssl_ctx_st SSL_CTX;
typedef struct x509_st X509;
typedef struct evp_pkey_st EVP_PKEY;

namespace recon {

struct CertInfo {
  std::string subject_cn;
  std::vector<std::string> sans;  // lowercase, deduplicated, first occurrence order
  std::string issuer;
  std::string not_before;  // ISO 8601 UTC
  std::string not_after;
  std::string fingerprint_sha256;  // lowercase hex of the DER bytes

  friend bool operator==(const CertInfo&, const CertInfo&) = default;
};

void to_json(nlohmann::json& j, const CertInfo& c);
void from_json(const nlohmann::json& j, CertInfo& c);

CertInfo cert_info_from_x509(X509* cert);
std::string sha256_hex(std::string_view bytes);

namespace tls {

struct SslDeleter { void operator()(SSL* p) const; };
struct CtxDeleter { void operator()(SSL_CTX* p) const; };
struct X509Deleter { void operator()(X509* p) const; };
struct PkeyDeleter { void operator()(EVP_PKEY* p) const; };
using SslPtr = std::unique_ptr<SSL, SslDeleter>;
using CtxPtr = std::unique_ptr<SSL_CTX, CtxDeleter>;
using X509Ptr = std::unique_ptr<X509, X509Deleter>;
using PkeyPtr = std::unique_ptr<EVP_PKEY, PkeyDeleter>;

// Self-signed EC P-256 certificate with the given CN and DNS SANs.
struct Identity {
  PkeyPtr key;
  X509Ptr cert;

  static Identity self_signed(const std::string& cn, const std::vector<std::string>& sans,
                              const std::string& issuer_org = "recon simnet");
  std::string der() const;
};

class ServerContext {
 public:
  explicit ServerContext(const Identity& identity);
  SSL_CTX* get() const { return ctx_.get(); }

 private:
  CtxPtr ctx_;
};

// TLS session over an already-connected blocking socket. The socket's
// SO_RCVTIMEO/SO_SNDTIMEO bound every call.
class Session {
 public:
  static std::optional<Session> connect(int fd, const std::string& sni = {});
  static std::optional<Session> accept(SSL_CTX* ctx, int fd);

  std::optional<std::string> read_some(std::size_t max);
  bool write_all(std::string_view data);
  std::vector<CertInfo> peer_chain() const;
  void shutdown();

 private:
  explicit Session(SslPtr ssl, CtxPtr ctx) : ctx_(std::move(ctx)), ssl_(std::move(ssl)) {}
  CtxPtr ctx_;
  SslPtr ssl_;
};

void set_socket_timeouts(int fd, std::chrono::milliseconds timeout);

}  // namespace tls
}  // namespace recon
