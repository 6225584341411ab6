#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "seek/protocol/session.hpp"

namespace seek::protocol {

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }
};

inline Endpoint parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) {
    throw StructuralError("endpoint must be host:port, got '" + s + "'");
  }
  const std::string port = s.substr(colon + 1);
  char* end = nullptr;
  const long p = std::strtol(port.c_str(), &end, 10);
  if (*end != '\0' || p < 0 || p > 65535) throw StructuralError("bad port in endpoint '" + s + "'");
  std::string host = s.substr(0, colon);
  if (host.size() > 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
  return Endpoint{host, static_cast<std::uint16_t>(p)};
}

namespace detail {

inline std::string sys_error(const std::string& what) { return what + ": " + std::strerror(errno); }

inline void write_all(int fd, const std::vector<std::uint8_t>& bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw TransportError(sys_error("send"));
    off += static_cast<std::size_t>(n);
  }
}

// False on a clean EOF before the first byte.
inline bool read_all(int fd, std::uint8_t* buf, std::size_t len) {
  std::size_t off = 0;
  while (off < len) {
    const ssize_t n = ::recv(fd, buf + off, len - off, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n < 0) throw TransportError(sys_error("recv"));
    if (n == 0) {
      if (off == 0) return false;
      throw TransportError("connection closed mid-frame");
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

// nullopt on EOF at a frame boundary; ProtocolError for a corrupt header.
inline std::optional<Frame> read_frame(int fd) {
  std::uint8_t header[kHeaderBytes];
  if (!read_all(fd, header, kHeaderBytes)) return std::nullopt;
  const Header h = decode_header(header);
  std::vector<std::uint8_t> payload(h.length);
  if (h.length && !read_all(fd, payload.data(), h.length)) throw TransportError("connection closed mid-frame");
  return Frame{h.tag, h.layer, decode_payload(payload.data(), h.length)};
}

inline void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

}  // namespace detail

class SocketTransport final : public Transport {
 public:
  explicit SocketTransport(int fd) : fd_(fd) {}
  ~SocketTransport() override {
    if (fd_ >= 0) ::close(fd_);
  }
  SocketTransport(const SocketTransport&) = delete;
  SocketTransport& operator=(const SocketTransport&) = delete;

  static std::unique_ptr<SocketTransport> connect(const Endpoint& ep) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(ep.port);
    if (const int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
      throw TransportError("resolve " + ep.str() + ": " + ::gai_strerror(rc));
    }
    int fd = -1;
    for (addrinfo* a = res; a; a = a->ai_next) {
      fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
      ::close(fd);
      fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw TransportError(detail::sys_error("connect " + ep.str()));
    detail::set_nodelay(fd);
    return std::make_unique<SocketTransport>(fd);
  }

  void send(const Frame& f) override { detail::write_all(fd_, encode(f)); }
  Frame receive() override {
    auto f = detail::read_frame(fd_);
    if (!f) throw TransportError("server closed the connection");
    return std::move(*f);
  }

  // Raw bytes, for robustness tests that need to send garbage.
  void send_bytes(const std::vector<std::uint8_t>& bytes) { detail::write_all(fd_, bytes); }

 private:
  int fd_;
};

// TCP server: one thread per connection, each with its own ServerConnection
// (and therefore its own mask RNG). Seeds advance across all sessions served.
class ProtocolServer {
 public:
  ProtocolServer(std::shared_ptr<const ModelGraph> model, const Endpoint& ep, SeedPolicy seeds,
                 double mask_bound = default_mask_bound())
      : model_(std::move(model)), seeds_(seeds), mask_bound_(mask_bound) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(ep.port);
    const char* host = ep.host.empty() || ep.host == "*" ? nullptr : ep.host.c_str();
    if (const int rc = ::getaddrinfo(host, port.c_str(), &hints, &res); rc != 0) {
      throw TransportError("resolve " + ep.str() + ": " + ::gai_strerror(rc));
    }
    for (addrinfo* a = res; a && listen_fd_ < 0; a = a->ai_next) {
      const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
      if (::bind(fd, a->ai_addr, a->ai_addrlen) == 0 && ::listen(fd, 16) == 0) {
        listen_fd_ = fd;
      } else {
        ::close(fd);
      }
    }
    ::freeaddrinfo(res);
    if (listen_fd_ < 0) throw TransportError(detail::sys_error("bind " + ep.str()));

    sockaddr_storage addr{};
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port
                                             : reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  ~ProtocolServer() { stop(); }
  ProtocolServer(const ProtocolServer&) = delete;
  ProtocolServer& operator=(const ProtocolServer&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  std::uint64_t sessions_started() const noexcept { return session_counter_.load(); }
  std::uint64_t frames_rejected() const noexcept { return rejected_.load(); }

  void stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::list<Worker> workers;
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (auto& w : workers_) ::shutdown(w.fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& w : workers) {
      if (w.thread.joinable()) w.thread.join();
    }
  }

 private:
  struct Worker {
    int fd;
    std::thread thread;
  };

  void accept_loop() {
    while (!stopping_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        return;
      }
      detail::set_nodelay(fd);
      std::lock_guard<std::mutex> lock(mu_);
      if (stopping_) {
        ::close(fd);
        return;
      }
      workers_.push_back(Worker{fd, {}});
      workers_.back().thread = std::thread([this, fd] { serve_connection(fd); });
    }
  }

  void serve_connection(int fd) {
    // Seeds come from a server-wide counter so concurrent connections never reuse one.
    ServerConnection conn(
        model_, [this] { return seeds_.session_seed(session_counter_.fetch_add(1)); }, mask_bound_);
    try {
      for (;;) {
        std::optional<Frame> f;
        try {
          f = detail::read_frame(fd);
        } catch (const ProtocolError& e) {
          // The stream cannot be resynchronised after a corrupt header.
          ++rejected_;
          detail::write_all(fd, encode(error_frame(ErrorCode::Malformed, e.layer())));
          break;
        }
        if (!f) break;
        for (const Frame& reply : conn.handle(*f)) {
          if (reply.tag == Tag::Error) ++rejected_;
          detail::write_all(fd, encode(reply));
        }
      }
    } catch (const TransportError&) {
    }
    ::shutdown(fd, SHUT_RDWR);
    ::close(fd);
  }

  std::shared_ptr<const ModelGraph> model_;
  SeedPolicy seeds_;
  double mask_bound_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> session_counter_{0};
  std::atomic<std::uint64_t> rejected_{0};
  std::thread acceptor_;
  std::mutex mu_;
  std::list<Worker> workers_;
};

inline std::unique_ptr<ClientConnection> connect(const Endpoint& ep) {
  return std::make_unique<ClientConnection>(SocketTransport::connect(ep));
}

inline std::size_t connect_and_infer(const Endpoint& ep, const Tensor& input, const MaliciousClientPlan& plan,
                                     std::uint64_t seed = 0) {
  return connect(ep)->infer(input, plan, seed);
}

}  // namespace seek::protocol
