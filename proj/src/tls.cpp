#include "recon/tls.hpp"

#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/ssl.h>
#include <openssl/x509v3.h>
#include <sys/socket.h>

#include <algorithm>
#include <ctime>
#include <stdexcept>

#include "recon/net.hpp"

namespace recon {

using nlohmann::json;

void to_json(json& j, const CertInfo& c) {
  j = json{{"subject_cn", c.subject_cn}, {"sans", c.sans}, {"issuer", c.issuer},
           {"not_before", c.not_before}, {"not_after", c.not_after},
           {"fingerprint_sha256", c.fingerprint_sha256}};
}

void from_json(const json& j, CertInfo& c) {
  c.subject_cn = j.value("subject_cn", "");
  c.sans = j.value("sans", std::vector<std::string>{});
  c.issuer = j.value("issuer", "");
  c.not_before = j.value("not_before", "");
  c.not_after = j.value("not_after", "");
  c.fingerprint_sha256 = j.value("fingerprint_sha256", "");
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

namespace {

std::string name_entry(X509_NAME* name, int nid) {
  const int idx = X509_NAME_get_index_by_NID(name, nid, -1);
  if (idx < 0) return {};
  ASN1_STRING* data = X509_NAME_ENTRY_get_data(X509_NAME_get_entry(name, idx));
  unsigned char* utf8 = nullptr;
  const int len = ASN1_STRING_to_UTF8(&utf8, data);
  if (len < 0) return {};
  std::string out(reinterpret_cast<char*>(utf8), static_cast<std::size_t>(len));
  OPENSSL_free(utf8);
  return out;
}

std::string name_oneline(X509_NAME* name) {
  BIO* bio = BIO_new(BIO_s_mem());
  X509_NAME_print_ex(bio, name, 0, XN_FLAG_RFC2253);
  char* data = nullptr;
  const long len = BIO_get_mem_data(bio, &data);
  std::string out(data, static_cast<std::size_t>(len));
  BIO_free(bio);
  return out;
}

std::string iso_time(const ASN1_TIME* t) {
  std::tm tm{};
  if (!t || ASN1_TIME_to_tm(t, &tm) != 1) return {};
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

[[noreturn]] void ssl_fail(const char* what) {
  char buf[256];
  ERR_error_string_n(ERR_get_error(), buf, sizeof buf);
  throw std::runtime_error(std::string(what) + ": " + buf);
}

}  // namespace

CertInfo cert_info_from_x509(X509* cert) {
  CertInfo info;
  info.subject_cn = name_entry(X509_get_subject_name(cert), NID_commonName);
  info.issuer = name_oneline(X509_get_issuer_name(cert));
  info.not_before = iso_time(X509_get0_notBefore(cert));
  info.not_after = iso_time(X509_get0_notAfter(cert));
  auto* names = static_cast<GENERAL_NAMES*>(X509_get_ext_d2i(cert, NID_subject_alt_name, nullptr, nullptr));
  if (names) {
    for (int i = 0; i < sk_GENERAL_NAME_num(names); ++i) {
      const GENERAL_NAME* gn = sk_GENERAL_NAME_value(names, i);
      if (gn->type != GEN_DNS) continue;
      const auto* s = gn->d.dNSName;
      auto name = to_lower(std::string_view(reinterpret_cast<const char*>(ASN1_STRING_get0_data(s)),
                                            static_cast<std::size_t>(ASN1_STRING_length(s))));
      if (std::find(info.sans.begin(), info.sans.end(), name) == info.sans.end()) {
        info.sans.push_back(std::move(name));
      }
    }
    GENERAL_NAMES_free(names);
  }
  unsigned char* der = nullptr;
  const int len = i2d_X509(cert, &der);
  if (len > 0) {
    info.fingerprint_sha256 = sha256_hex(std::string_view(reinterpret_cast<char*>(der), static_cast<std::size_t>(len)));
    OPENSSL_free(der);
  }
  return info;
}

namespace tls {

void SslDeleter::operator()(SSL* p) const { SSL_free(p); }
void CtxDeleter::operator()(SSL_CTX* p) const { SSL_CTX_free(p); }
void X509Deleter::operator()(X509* p) const { X509_free(p); }
void PkeyDeleter::operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }

Identity Identity::self_signed(const std::string& cn, const std::vector<std::string>& sans,
                               const std::string& issuer_org) {
  Identity id;
  id.key.reset(EVP_EC_gen("P-256"));
  if (!id.key) ssl_fail("EVP_EC_gen");
  id.cert.reset(X509_new());
  X509* x = id.cert.get();
  X509_set_version(x, 2);
  ASN1_INTEGER_set(X509_get_serialNumber(x), 1);
  X509_gmtime_adj(X509_getm_notBefore(x), 0);
  X509_gmtime_adj(X509_getm_notAfter(x), 60L * 60 * 24 * 365);
  X509_set_pubkey(x, id.key.get());
  X509_NAME* name = X509_get_subject_name(x);
  X509_NAME_add_entry_by_txt(name, "O", MBSTRING_UTF8, reinterpret_cast<const unsigned char*>(issuer_org.c_str()), -1, -1, 0);
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_UTF8, reinterpret_cast<const unsigned char*>(cn.c_str()), -1, -1, 0);
  X509_set_issuer_name(x, name);
  if (!sans.empty()) {
    std::string list;
    for (const auto& s : sans) list += (list.empty() ? "DNS:" : ",DNS:") + s;
    X509V3_CTX ctx;
    X509V3_set_ctx_nodb(&ctx);
    X509V3_set_ctx(&ctx, x, x, nullptr, nullptr, 0);
    X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, &ctx, NID_subject_alt_name, list.c_str());
    if (!ext) ssl_fail("subjectAltName");
    X509_add_ext(x, ext, -1);
    X509_EXTENSION_free(ext);
  }
  if (X509_sign(x, id.key.get(), EVP_sha256()) == 0) ssl_fail("X509_sign");
  return id;
}

std::string Identity::der() const {
  unsigned char* der = nullptr;
  const int len = i2d_X509(cert.get(), &der);
  std::string out(reinterpret_cast<char*>(der), static_cast<std::size_t>(len));
  OPENSSL_free(der);
  return out;
}

ServerContext::ServerContext(const Identity& identity) : ctx_(SSL_CTX_new(TLS_server_method())) {
  if (!ctx_) ssl_fail("SSL_CTX_new");
  if (SSL_CTX_use_certificate(ctx_.get(), identity.cert.get()) != 1) ssl_fail("use_certificate");
  if (SSL_CTX_use_PrivateKey(ctx_.get(), identity.key.get()) != 1) ssl_fail("use_PrivateKey");
}

std::optional<Session> Session::connect(int fd, const std::string& sni) {
  CtxPtr ctx(SSL_CTX_new(TLS_client_method()));
  if (!ctx) return std::nullopt;
  SSL_CTX_set_verify(ctx.get(), SSL_VERIFY_NONE, nullptr);  // collect, never trust
  SslPtr ssl(SSL_new(ctx.get()));
  SSL_set_fd(ssl.get(), fd);
  if (!sni.empty()) SSL_set_tlsext_host_name(ssl.get(), sni.c_str());
  if (SSL_connect(ssl.get()) != 1) {
    ERR_clear_error();
    return std::nullopt;
  }
  return Session(std::move(ssl), std::move(ctx));
}

std::optional<Session> Session::accept(SSL_CTX* ctx, int fd) {
  SslPtr ssl(SSL_new(ctx));
  SSL_set_fd(ssl.get(), fd);
  if (SSL_accept(ssl.get()) != 1) {
    ERR_clear_error();
    return std::nullopt;
  }
  return Session(std::move(ssl), nullptr);
}

std::optional<std::string> Session::read_some(std::size_t max) {
  std::string buf(max, '\0');
  const int n = SSL_read(ssl_.get(), buf.data(), static_cast<int>(max));
  if (n > 0) {
    buf.resize(static_cast<std::size_t>(n));
    return buf;
  }
  const int err = SSL_get_error(ssl_.get(), n);
  ERR_clear_error();
  if (err == SSL_ERROR_ZERO_RETURN || err == SSL_ERROR_SYSCALL) return std::string{};
  return std::nullopt;
}

bool Session::write_all(std::string_view data) {
  while (!data.empty()) {
    const int n = SSL_write(ssl_.get(), data.data(), static_cast<int>(data.size()));
    if (n <= 0) {
      ERR_clear_error();
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

std::vector<CertInfo> Session::peer_chain() const {
  std::vector<CertInfo> out;
  STACK_OF(X509)* chain = SSL_get_peer_cert_chain(ssl_.get());
  if (chain) {
    for (int i = 0; i < sk_X509_num(chain); ++i) out.push_back(cert_info_from_x509(sk_X509_value(chain, i)));
  }
  if (out.empty()) {
    if (X509* leaf = SSL_get1_peer_certificate(ssl_.get())) {
      out.push_back(cert_info_from_x509(leaf));
      X509_free(leaf);
    }
  }
  return out;
}

void Session::shutdown() {
  SSL_shutdown(ssl_.get());
  ERR_clear_error();
}

void set_socket_timeouts(int fd, std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = static_cast<long>(timeout.count() / 1000);
  tv.tv_usec = static_cast<long>((timeout.count() % 1000) * 1000);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

}  // namespace tls
}  // namespace recon
