// Copyright 2026 The Pipeflow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pipeflow/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>

namespace pipeflow::net {

namespace {

[[noreturn]] void transport_error(const std::string& what) {
  throw Error(ErrorCode::kTransport, what + ": " + std::strerror(errno));
}

bool recv_exact(int fd, std::uint8_t* out, std::size_t n, bool allow_clean_eof) {
  std::size_t got = 0;
  while (got < n) {
    const auto r = ::recv(fd, out + got, n - got, 0);
    if (r == 0) {
      if (got == 0 && allow_clean_eof) return false;
      throw Error(ErrorCode::kTransport, "peer closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      transport_error("recv");
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

// Closing with unread input makes the kernel send RST, which can destroy the
// error reply before the peer reads it.
void drain_and_close_write(int fd) {
  ::shutdown(fd, SHUT_WR);
  timeval tv{1, 0};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  std::uint8_t sink[4096];
  for (int i = 0; i < 1024; ++i) {
    const auto r = ::recv(fd, sink, sizeof(sink), 0);
    if (r == 0 || (r < 0 && errno != EINTR)) return;
  }
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

}  // namespace

Endpoint Endpoint::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw Error(ErrorCode::kConfig, "endpoint '" + std::string(text) + "' is not host:port");
  }
  Endpoint ep;
  ep.host = std::string(text.substr(0, colon));
  const auto port = text.substr(colon + 1);
  unsigned value = 0;
  auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
  if (ec != std::errc() || ptr != port.data() + port.size() || value > 65535) {
    throw Error(ErrorCode::kConfig, "bad port in endpoint '" + std::string(text) + "'");
  }
  ep.port = static_cast<std::uint16_t>(value);
  return ep;
}

std::string Endpoint::to_string() const { return host + ":" + std::to_string(port); }

Connection Connection::connect(const Endpoint& endpoint, std::chrono::milliseconds timeout) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const auto port = std::to_string(endpoint.port);
  if (::getaddrinfo(endpoint.host.c_str(), port.c_str(), &hints, &res) != 0 || !res) {
    throw Error(ErrorCode::kTransport, "cannot resolve " + endpoint.to_string());
  }
  const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(res);
    transport_error("socket");
  }
  Connection conn(fd);
  timeval tv{};
  tv.tv_sec = timeout.count() / 1000;
  tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
  timeval reply_wait{30, 0};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &reply_wait, sizeof(reply_wait));
  const int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0) transport_error("connect " + endpoint.to_string());
  set_nodelay(fd);
  return conn;
}

Connection& Connection::operator=(Connection&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = std::exchange(other.fd_, -1);
  }
  return *this;
}

Connection::~Connection() {
  if (fd_ >= 0) ::close(fd_);
}

void Connection::send_bytes(std::span<const std::uint8_t> bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const auto r = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) continue;
      transport_error("send");
    }
    sent += static_cast<std::size_t>(r);
  }
}

std::optional<Bytes> Connection::recv_frame() {
  std::uint8_t prefix[4];
  if (!recv_exact(fd_, prefix, 4, true)) return std::nullopt;
  const std::uint32_t length = (std::uint32_t{prefix[0]} << 24) | (std::uint32_t{prefix[1]} << 16) |
                               (std::uint32_t{prefix[2]} << 8) | prefix[3];
  if (length == 0 || length > wire::kMaxFrameLength) {
    throw Error(ErrorCode::kProtocol, "frame length " + std::to_string(length) + " out of range");
  }
  Bytes frame(4 + std::size_t{length});
  std::memcpy(frame.data(), prefix, 4);
  recv_exact(fd_, frame.data() + 4, length, false);
  return frame;
}

wire::Message Connection::call(const wire::Message& request) {
  send_bytes(wire::encode(request));
  auto frame = recv_frame();
  if (!frame) throw Error(ErrorCode::kTransport, "connection closed before reply");
  auto reply = wire::decode(*frame);
  if (auto* err = std::get_if<wire::ErrorReply>(&reply)) wire::raise(*err);
  return reply;
}

void Connection::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

wire::Message Channel::call(const wire::Message& request) {
  std::lock_guard lock(mu_);
  try {
    if (!conn_) conn_ = Connection::connect(endpoint_);
    return conn_->call(request);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kTransport || e.code() == ErrorCode::kProtocol) conn_.reset();
    throw;
  }
}

bool is_request_kind(wire::Kind kind) { return static_cast<std::uint8_t>(kind) < 0x80; }

FrameServer::FrameServer(Endpoint bind, Handler handler)
    : requested_(std::move(bind)), bound_(requested_), handler_(std::move(handler)) {}

FrameServer::~FrameServer() { stop(); }

void FrameServer::start() {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) transport_error("socket");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(requested_.port);
  if (::inet_pton(AF_INET, requested_.host.c_str(), &addr.sin_addr) != 1) {
    if (requested_.host == "localhost") {
      addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    } else {
      throw Error(ErrorCode::kConfig, "bind host must be an IPv4 address: " + requested_.host);
    }
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    const auto what = "bind " + requested_.to_string();
    ::close(std::exchange(listen_fd_, -1));
    transport_error(what);
  }
  if (::listen(listen_fd_, 64) != 0) transport_error("listen");
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  bound_.port = ntohs(addr.sin_port);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void FrameServer::stop() {
  if (!running_.exchange(false)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  if (acceptor_.joinable()) acceptor_.join();
  ::close(std::exchange(listen_fd_, -1));
  std::list<Worker> workers;
  {
    std::lock_guard lock(mu_);
    for (auto& w : workers_) {
      if (!*w.done) ::shutdown(w.fd, SHUT_RDWR);
    }
    workers.splice(workers.end(), workers_);
  }
  for (auto& w : workers) w.thread.join();
}

void FrameServer::reap_locked() {
  for (auto it = workers_.begin(); it != workers_.end();) {
    if (*it->done) {
      it->thread.join();
      it = workers_.erase(it);
    } else {
      ++it;
    }
  }
}

void FrameServer::accept_loop() {
  while (running_) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 200);
    if (ready <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    if (!running_) {
      ::close(fd);
      break;
    }
    set_nodelay(fd);
    std::lock_guard lock(mu_);
    reap_locked();
    auto done = std::make_shared<std::atomic<bool>>(false);
    workers_.push_back({fd, std::thread([this, fd, done] {
                          serve(fd);
                          std::lock_guard guard(mu_);
                          *done = true;
                          ::close(fd);
                        }),
                        done});
  }
}

void FrameServer::serve(int fd) {
  Connection conn(fd);
  struct Release {
    Connection& c;
    ~Release() { c.release(); }
  } release{conn};
  auto reply_error = [&](const Error& e) {
    try {
      conn.send_bytes(wire::encode(wire::to_error_reply(e)));
    } catch (const Error&) {
    }
  };
  while (running_) {
    std::optional<Bytes> frame;
    try {
      frame = conn.recv_frame();
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kProtocol) {
        ++protocol_errors_;
        reply_error(e);
        drain_and_close_write(fd);
      }
      return;
    }
    if (!frame) return;
    ++frames_;
    wire::Message reply;
    try {
      auto request = wire::decode(*frame);
      if (!is_request_kind(wire::kind_of(request))) {
        throw Error(ErrorCode::kProtocol,
                    std::string("unexpected ") + std::string(wire::kind_name(wire::kind_of(request))));
      }
      reply = handler_(request);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kProtocol) ++protocol_errors_;
      reply = wire::to_error_reply(e);
    } catch (const std::exception& e) {
      reply = wire::to_error_reply(Error(ErrorCode::kInvalidArgument, e.what()));
    }
    try {
      conn.send_bytes(wire::encode(reply));
    } catch (const Error&) {
      return;
    }
  }
}

}  // namespace pipeflow::net
