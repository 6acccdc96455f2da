#include "recon/probe.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/ip.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/epoll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <map>
#include <thread>

#include "recon/error.hpp"
#include "recon/socket.hpp"

namespace recon::probe {

using std::chrono::milliseconds;

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::accept: return "accept";
    case Verdict::never_probed: return "never_probed";
    case Verdict::evicted: return "evicted";
    case Verdict::wrong_source: return "wrong_source";
  }
  return "?";
}

// ---- RecentProbeBuffer ----

RecentProbeBuffer::RecentProbeBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw InvalidArgument("probe buffer capacity must be >= 1");
}

std::uint64_t RecentProbeBuffer::record(Endpoint dest, SourceId source, TimePoint now) {
  std::unique_lock lk(mutex_);
  const std::uint64_t seq = next_seq_++;
  ProbeEntry e{dest, source, now, seq};
  const std::size_t slot = seq % capacity_;
  if (ring_.size() < capacity_) {
    ring_.push_back(e);
  } else {
    const ProbeEntry old = ring_[slot];
    auto it = live_.find(old.dest);
    if (it != live_.end() && it->second == old.seq) {
      live_.erase(it);
      const std::size_t gslot = evicted_count_ % capacity_;
      if (graveyard_.size() < capacity_) {
        graveyard_.push_back(old.dest);
      } else {
        auto g = evicted_.find(graveyard_[gslot]);
        if (g != evicted_.end() && g->second + capacity_ == evicted_count_) evicted_.erase(g);
        graveyard_[gslot] = old.dest;
      }
      evicted_[old.dest] = evicted_count_++;
    }
    ring_[slot] = e;
  }
  live_[dest] = seq;
  evicted_.erase(dest);
  return seq;
}

Verdict RecentProbeBuffer::validate(Endpoint from, SourceId arrived_on) const {
  std::shared_lock lk(mutex_);
  auto it = live_.find(from);
  if (it != live_.end()) {
    const ProbeEntry& e = ring_[it->second % capacity_];
    return e.source == arrived_on ? Verdict::accept : Verdict::wrong_source;
  }
  if (evicted_.count(from)) return Verdict::evicted;
  return Verdict::never_probed;
}

std::optional<ProbeEntry> RecentProbeBuffer::lookup(Endpoint dest) const {
  std::shared_lock lk(mutex_);
  auto it = live_.find(dest);
  if (it == live_.end()) return std::nullopt;
  return ring_[it->second % capacity_];
}

std::size_t RecentProbeBuffer::size() const {
  std::shared_lock lk(mutex_);
  return ring_.size();
}

std::uint64_t RecentProbeBuffer::total_recorded() const {
  std::shared_lock lk(mutex_);
  return next_seq_;
}

// ---- SourcePool ----

SourcePool::SourcePool(std::vector<Source> sources, std::uint64_t seed) : sources_(std::move(sources)), seed_(seed) {
  if (sources_.empty()) throw InvalidArgument("source pool must not be empty");
  for (std::size_t i = 0; i < sources_.size(); ++i) {
    sources_[i].id = static_cast<SourceId>(i);
    if (!by_endpoint_.emplace(Endpoint{sources_[i].address, sources_[i].port}, sources_[i].id).second) {
      throw InvalidArgument("duplicate source " + Endpoint{sources_[i].address, sources_[i].port}.to_string());
    }
  }
}

SourcePool SourcePool::loopback(std::size_t count, std::uint64_t seed, Ipv4 base) {
  std::vector<Source> s;
  for (std::size_t i = 0; i < count; ++i) s.push_back({0, Ipv4(base.value + static_cast<std::uint32_t>(i)), 0});
  return SourcePool(std::move(s), seed);
}

SourcePool SourcePool::parse(const std::string& spec, std::uint64_t seed) {
  std::vector<Source> s;
  const auto colon = spec.find(':');
  if (colon != std::string::npos) {
    const Ipv4 ip = Ipv4::parse(spec.substr(0, colon));
    const auto ports = split(spec.substr(colon + 1), '-');
    const int lo = std::stoi(ports.at(0));
    const int hi = ports.size() > 1 ? std::stoi(ports[1]) : lo;
    if (lo < 1 || hi > 65535 || lo > hi) throw InvalidArgument("bad source port range: " + spec);
    for (int p = lo; p <= hi; ++p) s.push_back({0, ip, static_cast<std::uint16_t>(p)});
  } else {
    // Host bits are allowed here: "127.64.0.1/22" means 1024 addresses from .1.
    Ipv4Range r;
    const auto slash = spec.find('/');
    if (slash != std::string::npos) {
      const Ipv4 start = Ipv4::parse(spec.substr(0, slash));
      const int len = std::stoi(spec.substr(slash + 1));
      if (len < 0 || len > 32) throw InvalidArgument("bad prefix length: " + spec);
      const std::uint64_t n = std::uint64_t{1} << (32 - len);
      r = {start, Ipv4(static_cast<std::uint32_t>(std::min<std::uint64_t>(start.value + n - 1, 0xffffffffu)))};
    } else {
      r = Ipv4Range::parse(spec);
    }
    if (r.size() > 65536) throw InvalidArgument("source pool too large: " + spec);
    for (std::uint64_t v = r.first.value; v <= r.last.value; ++v) s.push_back({0, Ipv4(static_cast<std::uint32_t>(v)), 0});
  }
  return SourcePool(std::move(s), seed);
}

SourceId SourcePool::source_for(Endpoint target) const {
  const std::uint64_t key = (std::uint64_t{target.ip.value} << 16) | target.port;
  return static_cast<SourceId>(ipgen::mix64(seed_ ^ ipgen::mix64(key)) % sources_.size());
}

std::optional<SourceId> SourcePool::find(Ipv4 address, std::uint16_t port) const {
  auto it = by_endpoint_.find({address, port});
  if (it != by_endpoint_.end()) return it->second;
  if (port != 0) {
    it = by_endpoint_.find({address, 0});
    if (it != by_endpoint_.end()) return it->second;
  }
  return std::nullopt;
}

// ---- engines ----

void ProbeEngine::inject(RawResponse r) {
  if (r.at == TimePoint{}) r.at = Clock::now();
  std::lock_guard lk(inject_mu_);
  injected_.push_back(r);
}

std::vector<RawResponse> ProbeEngine::take_injected() {
  std::lock_guard lk(inject_mu_);
  return std::exchange(injected_, {});
}

namespace {

sockaddr_in to_sa(Ipv4 ip, std::uint16_t port) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(port);
  sa.sin_addr.s_addr = htonl(ip.value);
  return sa;
}

[[noreturn]] void sys_fail(const std::string& what) {
  throw TransportError(what + ": " + std::strerror(errno));
}

class ConnectEngine final : public ProbeEngine {
 public:
  ConnectEngine(const SourcePool& pool, ConnectEngineConfig cfg) : pool_(pool), cfg_(std::move(cfg)) {
    epoll_ = sock::Fd(::epoll_create1(EPOLL_CLOEXEC));
    if (!epoll_) sys_fail("epoll_create1");
    if (cfg_.transport == ProbeTransport::udp) {
      std::lock_guard lk(mu_);
      for (const auto& src : pool_.sources()) open_udp_locked(src);
    }
  }

  ~ConnectEngine() override {
    for (auto& [fd, _] : tcp_) ::close(fd);
    for (auto& [_, u] : udp_) ::close(u.fd);
  }

  std::string name() const override { return cfg_.transport == ProbeTransport::tcp ? "connect-tcp" : "udp"; }

  void send(Endpoint target, const Source& source) override {
    if (cfg_.transport == ProbeTransport::udp) return send_udp(target, source);
    {
      // Backpressure: bounded number of half-finished connects.
      std::unique_lock lk(mu_);
      cv_.wait_for(lk, milliseconds(cfg_.timeout.count() * 2 + 100), [&] { return tcp_.size() < kMaxInflight; });
      if (tcp_.size() >= kMaxInflight) throw TransportError("connect engine stalled: no poller draining replies");
    }
    const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
    if (fd < 0) sys_fail("socket");
    const int one = 1;
    ::setsockopt(fd, IPPROTO_IP, IP_BIND_ADDRESS_NO_PORT, &one, sizeof one);
    auto local = to_sa(source.address, source.port);
    if (source.port) ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&local), sizeof local) != 0) {
      const int e = errno;
      ::close(fd);
      errno = e;
      sys_fail("bind source " + source.address.to_string());
    }
    auto sa = to_sa(target.ip, target.port);
    const int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa);
    if (rc != 0 && errno != EINPROGRESS) {
      const int e = errno;
      ::close(fd);
      if (e == ECONNREFUSED || e == ENETUNREACH || e == EHOSTUNREACH || e == ETIMEDOUT) return;
      errno = e;
      sys_fail("connect " + target.to_string());
    }
    std::lock_guard lk(mu_);
    const std::uint32_t gen = ++gen_;
    tcp_[fd] = Pending{target, source.id, Clock::now(), gen};
    epoll_event ev{};
    ev.events = EPOLLOUT | EPOLLERR | EPOLLHUP;
    ev.data.u64 = (std::uint64_t{gen} << 32) | static_cast<std::uint32_t>(fd);
    if (::epoll_ctl(epoll_.get(), EPOLL_CTL_ADD, fd, &ev) != 0) sys_fail("epoll_ctl");
  }

  std::vector<RawResponse> poll(milliseconds timeout) override {
    std::vector<RawResponse> out = take_injected();
    epoll_event events[256];
    const int n = ::epoll_wait(epoll_.get(), events, 256, out.empty() ? static_cast<int>(timeout.count()) : 0);
    if (n < 0 && errno != EINTR) sys_fail("epoll_wait");
    const auto now = Clock::now();
    std::lock_guard lk(mu_);
    for (int i = 0; i < n; ++i) {
      const auto tag = events[i].data.u64;
      const int fd = static_cast<int>(tag & 0xffffffffu);
      const auto gen = static_cast<std::uint32_t>(tag >> 32);
      if (gen == 0) {
        drain_udp(fd, now, out);
        continue;
      }
      auto it = tcp_.find(fd);
      if (it == tcp_.end() || it->second.gen != gen) continue;
      int err = 0;
      socklen_t len = sizeof err;
      ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
      if (err == 0) out.push_back({it->second.target, it->second.source, now});
      close_tcp(it);
    }
    for (auto it = tcp_.begin(); it != tcp_.end();) {
      if (now - it->second.sent_at > cfg_.timeout) it = close_tcp(it);
      else ++it;
    }
    for (auto it = udp_pending_.begin(); it != udp_pending_.end();) {
      if (now - it->second > cfg_.timeout) it = udp_pending_.erase(it);
      else ++it;
    }
    cv_.notify_all();
    return out;
  }

  std::size_t outstanding() const override {
    std::lock_guard lk(mu_);
    return tcp_.size() + udp_pending_.size();
  }

  // Local UDP endpoints, one per source.
  std::vector<Endpoint> udp_endpoints() const {
    std::lock_guard lk(mu_);
    std::vector<Endpoint> out;
    for (const auto& [id, s] : udp_) out.push_back(s.local);
    return out;
  }

 private:
  static constexpr std::size_t kMaxInflight = 4096;

  struct Pending {
    Endpoint target;
    SourceId source;
    TimePoint sent_at;
    std::uint32_t gen;
  };
  struct UdpSock {
    int fd;
    Endpoint local;
  };

  std::map<int, Pending>::iterator close_tcp(std::map<int, Pending>::iterator it) {
    const int fd = it->first;
    ::epoll_ctl(epoll_.get(), EPOLL_CTL_DEL, fd, nullptr);
    linger lg{1, 0};
    ::setsockopt(fd, SOL_SOCKET, SO_LINGER, &lg, sizeof lg);
    ::close(fd);
    return tcp_.erase(it);
  }

  // Caller holds mu_.
  int open_udp_locked(const Source& source) {
    auto s = sock::udp_socket({source.address, source.port});
    sock::set_nonblocking(s.get(), true);
    const int fd = s.release();
    udp_[source.id] = UdpSock{fd, sock::local_endpoint(fd)};
    udp_by_fd_[fd] = source.id;
    epoll_event ev{};
    ev.events = EPOLLIN;
    ev.data.u64 = static_cast<std::uint32_t>(fd);
    if (::epoll_ctl(epoll_.get(), EPOLL_CTL_ADD, fd, &ev) != 0) sys_fail("epoll_ctl");
    return fd;
  }

  void send_udp(Endpoint target, const Source& source) {
    int fd;
    {
      std::lock_guard lk(mu_);
      auto it = udp_.find(source.id);
      fd = it == udp_.end() ? open_udp_locked(source) : it->second.fd;
      udp_pending_[target] = Clock::now();
    }
    auto sa = to_sa(target.ip, target.port);
    const auto n = ::sendto(fd, cfg_.udp_payload.data(), cfg_.udp_payload.size(), MSG_NOSIGNAL,
                            reinterpret_cast<sockaddr*>(&sa), sizeof sa);
    if (n < 0 && errno != ECONNREFUSED && errno != EAGAIN) sys_fail("sendto " + target.to_string());
  }

  void drain_udp(int fd, TimePoint now, std::vector<RawResponse>& out) {
    const SourceId id = udp_by_fd_.at(fd);
    char buf[2048];
    while (true) {
      sockaddr_in from{};
      socklen_t len = sizeof from;
      const auto n = ::recvfrom(fd, buf, sizeof buf, MSG_DONTWAIT, reinterpret_cast<sockaddr*>(&from), &len);
      if (n < 0) {
        if (errno == ECONNREFUSED) continue;  // ICMP port unreachable surfaced on the socket
        break;
      }
      const Endpoint src{Ipv4(ntohl(from.sin_addr.s_addr)), ntohs(from.sin_port)};
      udp_pending_.erase(src);
      out.push_back({src, id, now});
    }
  }

  const SourcePool& pool_;
  ConnectEngineConfig cfg_;
  sock::Fd epoll_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<int, Pending> tcp_;
  std::uint32_t gen_ = 0;
  std::map<SourceId, UdpSock> udp_;
  std::map<int, SourceId> udp_by_fd_;
  std::unordered_map<Endpoint, TimePoint> udp_pending_;
};

std::uint16_t checksum(const void* data, std::size_t len, std::uint32_t sum = 0) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i + 1 < len; i += 2) sum += (std::uint32_t{p[i]} << 8) | p[i + 1];
  if (len & 1) sum += std::uint32_t{p[len - 1]} << 8;
  while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
  return static_cast<std::uint16_t>(~sum);
}

class RawSynEngine final : public ProbeEngine {
 public:
  RawSynEngine(const SourcePool& pool, std::uint16_t sport, std::uint64_t key, milliseconds timeout)
      : pool_(pool), sport_(sport), key_(key), timeout_(timeout) {
    tx_ = sock::Fd(::socket(AF_INET, SOCK_RAW | SOCK_CLOEXEC, IPPROTO_RAW));
    if (!tx_) sys_fail("raw send socket");
    rx_ = sock::Fd(::socket(AF_INET, SOCK_RAW | SOCK_CLOEXEC | SOCK_NONBLOCK, IPPROTO_TCP));
    if (!rx_) sys_fail("raw receive socket");
  }

  std::string name() const override { return "raw-syn"; }

  void send(Endpoint target, const Source& source) override {
    std::uint8_t pkt[40] = {};
    auto* ip = reinterpret_cast<iphdr*>(pkt);
    auto* tcp = reinterpret_cast<tcphdr*>(pkt + 20);
    ip->version = 4;
    ip->ihl = 5;
    ip->ttl = 64;
    ip->protocol = IPPROTO_TCP;
    ip->tot_len = htons(sizeof pkt);
    ip->id = htons(static_cast<std::uint16_t>(ipgen::mix64(key_ ^ target.ip.value)));
    ip->saddr = htonl(source.address.value);
    ip->daddr = htonl(target.ip.value);
    ip->check = htons(checksum(pkt, 20));
    tcp->source = htons(source.port ? source.port : sport_);
    tcp->dest = htons(target.port);
    tcp->seq = htonl(cookie(source.address, target));
    tcp->doff = 5;
    tcp->syn = 1;
    tcp->window = htons(65535);
    std::uint32_t pseudo = 0;
    pseudo += (source.address.value >> 16) + (source.address.value & 0xffff);
    pseudo += (target.ip.value >> 16) + (target.ip.value & 0xffff);
    pseudo += IPPROTO_TCP + 20;
    tcp->check = htons(checksum(tcp, 20, pseudo));
    {
      std::lock_guard lk(mu_);
      pending_[target] = Clock::now();
    }
    auto sa = to_sa(target.ip, 0);
    if (::sendto(tx_.get(), pkt, sizeof pkt, 0, reinterpret_cast<sockaddr*>(&sa), sizeof sa) < 0) {
      sys_fail("raw sendto " + target.to_string());
    }
  }

  std::vector<RawResponse> poll(milliseconds timeout) override {
    std::vector<RawResponse> out = take_injected();
    if (out.empty()) {
      pollfd p{rx_.get(), POLLIN, 0};
      ::poll(&p, 1, static_cast<int>(timeout.count()));
    }
    std::uint8_t buf[1500];
    const auto now = Clock::now();
    std::lock_guard lk(mu_);
    while (true) {
      const auto n = ::recv(rx_.get(), buf, sizeof buf, MSG_DONTWAIT);
      if (n < 0) break;
      if (n < 40) continue;
      const auto* ip = reinterpret_cast<const iphdr*>(buf);
      const std::size_t ihl = ip->ihl * 4u;
      if (static_cast<std::size_t>(n) < ihl + 20) continue;
      const auto* tcp = reinterpret_cast<const tcphdr*>(buf + ihl);
      if (!(tcp->syn && tcp->ack)) continue;
      const Ipv4 dst(ntohl(ip->daddr));
      const std::uint16_t dport = ntohs(tcp->dest);
      const auto src_id = pool_.find(dst, dport);
      if (!src_id) continue;
      const Source& src = pool_.at(*src_id);
      if (dport != (src.port ? src.port : sport_)) continue;
      const Endpoint from{Ipv4(ntohl(ip->saddr)), ntohs(tcp->source)};
      // A reply without our cookie was never elicited by us.
      if (ntohl(tcp->ack_seq) != cookie(src.address, from) + 1) {
        ++bad_cookie_;
        continue;
      }
      pending_.erase(from);
      out.push_back({from, *src_id, now});
    }
    for (auto it = pending_.begin(); it != pending_.end();) {
      if (now - it->second > timeout_) it = pending_.erase(it);
      else ++it;
    }
    return out;
  }

  std::size_t outstanding() const override {
    std::lock_guard lk(mu_);
    return pending_.size();
  }

 private:
  std::uint32_t cookie(Ipv4 src, Endpoint dst) const {
    return static_cast<std::uint32_t>(ipgen::mix64(key_ ^ (std::uint64_t{src.value} << 32) ^
                                                    (std::uint64_t{dst.ip.value} << 16) ^ dst.port));
  }

  const SourcePool& pool_;
  std::uint16_t sport_;
  std::uint64_t key_;
  milliseconds timeout_;
  sock::Fd tx_, rx_;
  mutable std::mutex mu_;
  std::unordered_map<Endpoint, TimePoint> pending_;
  std::uint64_t bad_cookie_ = 0;
};

}  // namespace

std::unique_ptr<ProbeEngine> make_connect_engine(const SourcePool& pool, ConnectEngineConfig cfg) {
  return std::make_unique<ConnectEngine>(pool, std::move(cfg));
}

std::unique_ptr<ProbeEngine> make_raw_syn_engine(const SourcePool& pool, std::uint16_t source_port,
                                                 std::uint64_t cookie_key, milliseconds timeout) {
  return std::make_unique<RawSynEngine>(pool, source_port, cookie_key, timeout);
}

bool raw_sockets_available() {
  const int fd = ::socket(AF_INET, SOCK_RAW | SOCK_CLOEXEC, IPPROTO_RAW);
  if (fd < 0) return false;
  ::close(fd);
  return true;
}

std::vector<Endpoint> udp_local_endpoints(const ProbeEngine& engine) {
  if (const auto* c = dynamic_cast<const ConnectEngine*>(&engine)) return c->udp_endpoints();
  return {};
}

// ---- pacing ----

Pacer::Pacer(double pps, NowFn now, SleepFn sleep) : pps_(pps), now_(std::move(now)), sleep_(std::move(sleep)) {
  if (pps < 0) throw InvalidArgument("max_pps must be >= 0");
  if (!now_) now_ = [] { return Clock::now(); };
  if (!sleep_) sleep_ = [](Clock::duration d) { std::this_thread::sleep_for(d); };
}

void Pacer::sleep_until(TimePoint t) {
  for (auto now = now_(); now < t; now = now_()) sleep_(t - now);
}

void Pacer::wait() {
  if (!start_) start_ = now_();
  if (pps_ > 0) {
    const auto offset = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(count_ / pps_));
    sleep_until(*start_ + offset);
  }
  ++count_;
}

void Pacer::finish() {
  if (!start_ || pps_ <= 0) return;
  const auto offset = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(count_ / pps_));
  sleep_until(*start_ + offset);
}

// ---- unit execution ----

UnitRun run_unit(const ipgen::WorkUnit& unit, const ipgen::TargetSpace& space,
                 const ipgen::IndexPermutation& perm, const SourcePool& pool,
                 RecentProbeBuffer& buffer, ProbeEngine& engine, const RunConfig& config) {
  if (unit.end_index > space.size() || unit.start_index >= unit.end_index) {
    throw InvalidArgument("unit interval outside target space");
  }
  if (perm.space_size() != space.size()) throw InvalidArgument("permutation does not match target space");

  UnitRun run;
  run.probed.reserve(unit.length());
  const auto t0 = Clock::now();
  std::atomic<bool> sending_done{false};
  std::atomic<bool> stop_receiver{false};
  std::exception_ptr receiver_error;
  std::unordered_map<Endpoint, ProbeResult> accepted;

  std::thread receiver([&] {
    try {
      std::optional<TimePoint> drain_start;
      while (!stop_receiver) {
        for (const auto& r : engine.poll(milliseconds(5))) {
          const Verdict v = buffer.validate(r.from, r.arrived_on);
          if (v == Verdict::accept) {
            const auto entry = buffer.lookup(r.from);
            if (!accepted.count(r.from)) {
              ProbeResult pr{r.from, true, 0, r.arrived_on, r.at};
              if (entry) pr.rtt_ms = std::chrono::duration<double, std::milli>(r.at - entry->sent_at).count();
              accepted.emplace(r.from, pr);
            }
            continue;
          }
          if (v == Verdict::never_probed) ++run.rejected.never_probed;
          if (v == Verdict::evicted) ++run.rejected.evicted;
          if (v == Verdict::wrong_source) ++run.rejected.wrong_source;
          if (config.on_reject) config.on_reject(r, v);
        }
        if (sending_done) {
          if (!drain_start) drain_start = Clock::now();
          if (engine.outstanding() == 0 || Clock::now() - *drain_start > config.drain_timeout) break;
        }
      }
    } catch (...) {
      receiver_error = std::current_exception();
    }
  });

  std::exception_ptr sender_error;
  try {
    Pacer pacer(config.max_pps, config.now, config.sleep);
    for (std::uint64_t i = unit.start_index; i < unit.end_index; ++i) {
      if (config.cancel && config.cancel->load()) {
        run.cancelled = true;
        break;
      }
      if (receiver_error) break;
      const Endpoint target = space.index_to_target(perm.permute(i));
      const SourceId sid = pool.source_for(target);
      pacer.wait();
      buffer.record(target, sid);  // visible to the receiver before the packet exists
      engine.send(target, pool.at(sid));
      run.probed.push_back(target);
    }
    if (!run.cancelled) pacer.finish();
  } catch (...) {
    sender_error = std::current_exception();
  }
  sending_done = true;
  if (sender_error || run.cancelled) stop_receiver = true;
  receiver.join();
  if (sender_error) std::rethrow_exception(sender_error);
  if (receiver_error) std::rethrow_exception(receiver_error);

  for (auto& [_, r] : accepted) run.results.push_back(r);
  std::sort(run.results.begin(), run.results.end(), [](const ProbeResult& a, const ProbeResult& b) { return a.dest < b.dest; });
  run.elapsed = Clock::now() - t0;
  return run;
}

}  // namespace recon::probe
