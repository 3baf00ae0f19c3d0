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

#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "pipeflow/wire.hpp"

// Blocking TCP transport for wire frames.
namespace pipeflow::net {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  /// "host:port"; throws kConfig on anything else.
  static Endpoint parse(std::string_view text);
  std::string to_string() const;
  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

/// One connected socket. Move-only; closes on destruction.
class Connection {
 public:
  /// Throws kTransport when the peer cannot be reached.
  static Connection connect(const Endpoint& endpoint,
                            std::chrono::milliseconds timeout = std::chrono::seconds(5));
  explicit Connection(int fd) : fd_(fd) {}
  Connection(Connection&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  Connection& operator=(Connection&& other) noexcept;
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;
  ~Connection();

  void send_bytes(std::span<const std::uint8_t> bytes);
  /// A whole frame (length prefix included), or nullopt on a clean close
  /// before the first byte. kProtocol for a length outside [1, kMaxFrameLength],
  /// kTransport for I/O failures and mid-frame closes.
  std::optional<Bytes> recv_frame();
  /// Sends a request and decodes the reply; an ErrorReply is rethrown as Error.
  wire::Message call(const wire::Message& request);
  void shutdown();
  int fd() const { return fd_; }
  /// Gives up ownership of the descriptor without closing it.
  int release() { return std::exchange(fd_, -1); }

 private:
  int fd_ = -1;
};

/// A lazily (re)connecting client channel. Thread-safe; calls are serialized.
class Channel {
 public:
  explicit Channel(Endpoint endpoint) : endpoint_(std::move(endpoint)) {}
  const Endpoint& endpoint() const { return endpoint_; }
  /// Transport failures drop the connection and surface as kTransport; the
  /// next call reconnects.
  wire::Message call(const wire::Message& request);

 private:
  Endpoint endpoint_;
  std::mutex mu_;
  std::optional<Connection> conn_;
};

/// Accepts connections and answers each request frame with one reply frame,
/// in order per connection.
///
/// Malformed input: a bad length prefix gets an ERROR reply and the
/// connection is closed (framing is lost). A frame with an unknown kind,
/// a truncated or over-long body, or a reply kind used as a request gets an
/// ERROR reply and the connection stays usable. Handler errors become ERROR
/// replies carrying the library error code.
class FrameServer {
 public:
  using Handler = std::function<wire::Message(const wire::Message&)>;

  FrameServer(Endpoint bind, Handler handler);
  ~FrameServer();
  FrameServer(const FrameServer&) = delete;
  FrameServer& operator=(const FrameServer&) = delete;

  /// Binds and starts accepting. Port 0 picks a free port.
  void start();
  void stop();
  Endpoint endpoint() const { return bound_; }
  std::uint64_t frames_handled() const { return frames_; }
  std::uint64_t protocol_errors() const { return protocol_errors_; }

 private:
  void accept_loop();
  void serve(int fd);
  void reap_locked();

  Endpoint requested_;
  Endpoint bound_;
  Handler handler_;
  int listen_fd_ = -1;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex mu_;
  struct Worker {
    int fd;
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
  };
  std::list<Worker> workers_;
  std::atomic<std::uint64_t> frames_{0};
  std::atomic<std::uint64_t> protocol_errors_{0};
};

/// True for kinds a server accepts as requests.
bool is_request_kind(wire::Kind kind);

}  // namespace pipeflow::net
