#include "qmc/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace qmc::net {

std::optional<Endpoint> Endpoint::parse(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) return std::nullopt;
  Endpoint ep;
  ep.host = s.substr(0, colon);
  try {
    const int p = std::stoi(s.substr(colon + 1));
    if (p < 0 || p > 65535) return std::nullopt;
    ep.port = static_cast<std::uint16_t>(p);
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (ep.host.empty()) ep.host = "127.0.0.1";
  return ep;
}

Socket& Socket::operator=(Socket&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = o.fd_;
    o.fd_ = -1;
  }
  return *this;
}

Socket::~Socket() { close(); }

void Socket::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

namespace {

bool wait_fd(int fd, short events, int timeout_ms) {
  pollfd p{fd, events, 0};
  for (;;) {
    const int rc = ::poll(&p, 1, timeout_ms);
    if (rc > 0) return (p.revents & (events | POLLHUP | POLLERR)) != 0;
    if (rc == 0) return false;
    if (errno != EINTR) return false;
  }
}

}  // namespace

bool Socket::send_all(const void* data, std::size_t len, int timeout_ms) {
  const char* p = static_cast<const char*>(data);
  std::size_t sent = 0;
  while (sent < len) {
    const ssize_t n = ::send(fd_, p + sent, len - sent, MSG_NOSIGNAL | MSG_DONTWAIT);
    if (n > 0) {
      sent += static_cast<std::size_t>(n);
      continue;
    }
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      if (!wait_fd(fd_, POLLOUT, timeout_ms)) return false;
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    return false;
  }
  return true;
}

bool Socket::recv_exact(void* data, std::size_t len, int timeout_ms) {
  char* p = static_cast<char*>(data);
  std::size_t got = 0;
  while (got < len) {
    const long n = recv_some(p + got, len - got, timeout_ms);
    if (n <= 0) return false;
    got += static_cast<std::size_t>(n);
  }
  return true;
}

long Socket::recv_some(void* data, std::size_t len, int timeout_ms) {
  for (;;) {
    const ssize_t n = ::recv(fd_, data, len, MSG_DONTWAIT);
    if (n > 0) return n;
    if (n == 0) return -1;  // peer closed
    if (errno == EAGAIN || errno == EWOULDBLOCK) {
      if (!wait_fd(fd_, POLLIN, timeout_ms)) return 0;
      continue;
    }
    if (errno == EINTR) continue;
    return -1;
  }
}

bool Socket::send_frame(const proto::Frame& f, int timeout_ms) {
  const std::string bytes = proto::encode_frame(f);
  return send_all(bytes.data(), bytes.size(), timeout_ms);
}

std::optional<proto::Frame> Socket::recv_frame(int timeout_ms) {
  unsigned char header[proto::kHeaderSize];
  if (!recv_exact(header, sizeof(header), timeout_ms)) return std::nullopt;
  const auto h = proto::parse_header(header);
  if (!h) return std::nullopt;
  std::string payload(h->compressed_len, '\0');
  if (!recv_exact(payload.data(), payload.size(), timeout_ms)) return std::nullopt;
  return proto::decode_payload(*h, reinterpret_cast<const unsigned char*>(payload.data()));
}

Listener::~Listener() {
  if (fd_ >= 0) ::close(fd_);
}

Listener& Listener::operator=(Listener&& o) noexcept {
  if (this != &o) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = o.fd_;
    local_ = o.local_;
    o.fd_ = -1;
  }
  return *this;
}

std::optional<Listener> Listener::bind(const Endpoint& ep, int backlog) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return std::nullopt;
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    return std::nullopt;
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(fd, backlog) != 0) {
    ::close(fd);
    return std::nullopt;
  }
  sockaddr_in bound{};
  socklen_t blen = sizeof(bound);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &blen);
  Listener l;
  l.fd_ = fd;
  l.local_.host = ep.host;
  l.local_.port = ntohs(bound.sin_port);
  return l;
}

std::optional<Socket> Listener::accept(int timeout_ms) {
  if (!wait_fd(fd_, POLLIN, timeout_ms)) return std::nullopt;
  const int cfd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
  if (cfd < 0) return std::nullopt;
  int one = 1;
  ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return Socket(cfd);
}

std::optional<Socket> connect_to(const Endpoint& ep, int timeout_ms) {
  const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) return std::nullopt;
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (::inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    return std::nullopt;
  }
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
  const int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr));
  if (rc != 0 && errno != EINPROGRESS) {
    ::close(fd);
    return std::nullopt;
  }
  if (rc != 0) {
    if (!wait_fd(fd, POLLOUT, timeout_ms)) {
      ::close(fd);
      return std::nullopt;
    }
    int err = 0;
    socklen_t elen = sizeof(err);
    ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &elen);
    if (err != 0) {
      ::close(fd);
      return std::nullopt;
    }
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return Socket(fd);
}

}  // namespace qmc::net
