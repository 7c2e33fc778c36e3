#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "qmc/protocol.hpp"

namespace qmc::net {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }
  static std::optional<Endpoint> parse(const std::string& s);
};

// Thin RAII TCP socket. Send/recv helpers apply a per-call timeout.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept;
  ~Socket();
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  bool valid() const { return fd_ >= 0; }
  int fd() const { return fd_; }
  void close();

  bool send_all(const void* data, std::size_t len, int timeout_ms);
  // reads exactly len bytes; false on timeout/EOF/error
  bool recv_exact(void* data, std::size_t len, int timeout_ms);
  // reads whatever is available, up to len; 0 on timeout, -1 on EOF/error
  long recv_some(void* data, std::size_t len, int timeout_ms);

  bool send_frame(const proto::Frame& f, int timeout_ms);
  std::optional<proto::Frame> recv_frame(int timeout_ms);

 private:
  int fd_ = -1;
};

class Listener {
 public:
  Listener() = default;
  static std::optional<Listener> bind(const Endpoint& ep, int backlog = 64);
  std::optional<Socket> accept(int timeout_ms);
  Endpoint local_endpoint() const { return local_; }
  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  ~Listener();
  Listener(Listener&& o) noexcept : fd_(o.fd_), local_(o.local_) { o.fd_ = -1; }
  Listener& operator=(Listener&& o) noexcept;
  Listener(const Listener&) = delete;

 private:
  int fd_ = -1;
  Endpoint local_;
};

std::optional<Socket> connect_to(const Endpoint& ep, int timeout_ms);

}  // namespace qmc::net
