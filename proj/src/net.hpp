#pragma once

// Small POSIX socket helpers shared by the wire server and client.

#include <chrono>
#include <optional>
#include <string>
#include <string_view>

#include "reqsentry/chunkwire.hpp"

namespace reqsentry::net {

using Clock = std::chrono::steady_clock;

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { close(); }
  Socket(Socket&& o) noexcept : fd_(o.release()) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = o.release();
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release() {
    const int f = fd_;
    fd_ = -1;
    return f;
  }
  void close();
  void shutdown();

 private:
  int fd_ = -1;
};

Socket listen_on(const Endpoint& ep, int backlog = 128);
std::uint16_t local_port(const Socket& s);

// Blocking connect bounded by deadline; the socket is left non-blocking.
Socket connect_to(const Endpoint& ep, Clock::time_point deadline);

// Writes everything or throws; TimeoutError past the deadline.
void send_all(const Socket& s, std::string_view bytes,
              std::optional<Clock::time_point> deadline = std::nullopt);

// Appends what is available. Returns false on orderly EOF.
bool recv_some(const Socket& s, std::string& out,
               std::optional<Clock::time_point> deadline = std::nullopt);

}  // namespace reqsentry::net
