/* Copyright 2026 The ElasticEP Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>
#include <utility>

#include "elasticep/core.hpp"

namespace elasticep::net {

class NetError : public Error {
 public:
  using Error::Error;
};

class ConnectionClosed : public NetError {
 public:
  ConnectionClosed() : NetError("connection closed by peer") {}
};

struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }

  static Endpoint parse(const std::string& s) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == s.size())
      throw ValidationError("endpoint '" + s + "' is not host:port");
    Endpoint e;
    e.host = s.substr(0, colon);
    try {
      std::size_t used = 0;
      e.port = std::stoi(s.substr(colon + 1), &used);
      if (used != s.size() - colon - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ValidationError("endpoint '" + s + "' has a bad port");
    }
    if (e.port < 0 || e.port > 65535) throw ValidationError("endpoint '" + s + "' port out of range");
    return e;
  }

  bool operator==(const Endpoint&) const = default;
};

using Clock = std::chrono::steady_clock;

inline int remaining_ms(Clock::time_point deadline) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
  return ms < 0 ? 0 : static_cast<int>(ms);
}

inline Clock::time_point deadline_after(double seconds) {
  return Clock::now() + std::chrono::microseconds(static_cast<long long>(seconds * 1e6));
}

/// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  // Wakes any thread blocked on this socket without releasing the fd.
  void shutdown() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void write_all(const void* data, std::size_t n) {
    const char* p = static_cast<const char*>(data);
    while (n > 0) {
      const ssize_t k = ::send(fd_, p, n, MSG_NOSIGNAL);
      if (k < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK) {
          pollfd pfd{fd_, POLLOUT, 0};
          ::poll(&pfd, 1, 1000);
          continue;
        }
        throw NetError(std::string("send: ") + std::strerror(errno));
      }
      p += k;
      n -= static_cast<std::size_t>(k);
    }
  }

  /// Reads whatever is available within the timeout. Returns 0 on timeout;
  /// throws ConnectionClosed on EOF.
  std::size_t read_some(void* buf, std::size_t cap, int timeout_ms) {
    pollfd pfd{fd_, POLLIN, 0};
    int r;
    do {
      r = ::poll(&pfd, 1, timeout_ms);
    } while (r < 0 && errno == EINTR);
    if (r < 0) throw NetError(std::string("poll: ") + std::strerror(errno));
    if (r == 0) return 0;
    ssize_t k;
    do {
      k = ::recv(fd_, buf, cap, 0);
    } while (k < 0 && errno == EINTR);
    if (k == 0) throw ConnectionClosed();
    if (k < 0) {
      if (errno == EAGAIN || errno == EWOULDBLOCK) return 0;
      if (errno == ECONNRESET) throw ConnectionClosed();
      throw NetError(std::string("recv: ") + std::strerror(errno));
    }
    return static_cast<std::size_t>(k);
  }

 private:
  int fd_ = -1;
};

namespace detail {
inline sockaddr_in resolve(const Endpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res);
  if (rc != 0 || res == nullptr) throw NetError("cannot resolve " + ep.host + ": " + ::gai_strerror(rc));
  sockaddr_in addr{};
  std::memcpy(&addr, res->ai_addr, sizeof addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(static_cast<std::uint16_t>(ep.port));
  return addr;
}
}  // namespace detail

inline Socket connect_to(const Endpoint& ep, double timeout_s) {
  const auto addr = detail::resolve(ep);
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw NetError(std::string("socket: ") + std::strerror(errno));
  const int flags = ::fcntl(s.fd(), F_GETFL, 0);
  ::fcntl(s.fd(), F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr);
  if (rc < 0 && errno != EINPROGRESS) throw NetError("connect " + ep.str() + ": " + std::strerror(errno));
  if (rc < 0) {
    pollfd pfd{s.fd(), POLLOUT, 0};
    do {
      rc = ::poll(&pfd, 1, static_cast<int>(timeout_s * 1000));
    } while (rc < 0 && errno == EINTR);
    if (rc == 0) throw NetError("connect " + ep.str() + ": timed out");
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) throw NetError("connect " + ep.str() + ": " + std::strerror(err));
  }
  ::fcntl(s.fd(), F_SETFL, flags);
  int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

class Listener {
 public:
  Listener() = default;
  explicit Listener(const Endpoint& ep) {
    const auto addr = detail::resolve(ep);
    sock_ = Socket(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!sock_.valid()) throw NetError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(sock_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(sock_.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) < 0)
      throw NetError("bind " + ep.str() + ": " + std::strerror(errno));
    if (::listen(sock_.fd(), 64) < 0) throw NetError(std::string("listen: ") + std::strerror(errno));
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    ::getsockname(sock_.fd(), reinterpret_cast<sockaddr*>(&bound), &len);
    endpoint_ = Endpoint{ep.host, ntohs(bound.sin_port)};
  }

  const Endpoint& endpoint() const { return endpoint_; }
  int port() const { return endpoint_.port; }

  /// Waits up to timeout_ms for a connection.
  std::optional<Socket> accept(int timeout_ms) {
    if (!sock_.valid()) return std::nullopt;
    pollfd pfd{sock_.fd(), POLLIN, 0};
    const int r = ::poll(&pfd, 1, timeout_ms);
    if (r <= 0 || !(pfd.revents & POLLIN)) return std::nullopt;
    const int fd = ::accept4(sock_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) return std::nullopt;
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return Socket(fd);
  }

  void close() { sock_.close(); }

 private:
  Socket sock_;
  Endpoint endpoint_;
};

}  // namespace elasticep::net
