#pragma once

#include "vfl/wire.hpp"

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace vfl {

using Millis = std::chrono::milliseconds;

// A bidirectional, ordered stream of framed messages.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const Message& message) = 0;
  // Throws TimeoutError when nothing complete arrives within `timeout`, and
  // ProtocolError when the peer closes or sends a malformed frame.
  virtual Message receive(Millis timeout) = 0;
};

// Shared receive-side framing over a byte source.
class FramedChannel : public Channel {
 public:
  void send(const Message& message) override;
  Message receive(Millis timeout) override;

 protected:
  virtual void write_bytes(const std::vector<std::uint8_t>& bytes) = 0;
  // Appends at least one byte to `buffer`; returns false on orderly close.
  virtual bool read_some(std::vector<std::uint8_t>& buffer, std::chrono::steady_clock::time_point deadline) = 0;

 private:
  std::vector<std::uint8_t> buffer_;
};

// Two connected in-process endpoints.
std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_channel_pair();

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;
};

// "host:port"; an empty host means all interfaces when listening.
Endpoint parse_endpoint(const std::string& text);

class TcpChannel : public FramedChannel {
 public:
  explicit TcpChannel(int fd);
  ~TcpChannel() override;
  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;

 protected:
  void write_bytes(const std::vector<std::uint8_t>& bytes) override;
  bool read_some(std::vector<std::uint8_t>& buffer, std::chrono::steady_clock::time_point deadline) override;

 private:
  int fd_;
};

class TcpListener {
 public:
  // Port 0 picks an ephemeral port; see port().
  explicit TcpListener(const Endpoint& endpoint);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }
  std::unique_ptr<Channel> accept(Millis timeout);

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

// Retries refused connections until `timeout` elapses.
std::unique_ptr<Channel> tcp_connect(const Endpoint& endpoint, Millis timeout);

// Test double that forwards to another channel and keeps a copy of every
// outgoing message and its encoded frame.
class RecordingChannel : public Channel {
 public:
  explicit RecordingChannel(std::unique_ptr<Channel> inner);

  void send(const Message& message) override;
  Message receive(Millis timeout) override;

  std::vector<Message> sent() const;
  std::vector<std::vector<std::uint8_t>> frames() const;

 private:
  std::unique_ptr<Channel> inner_;
  mutable std::mutex mutex_;
  std::vector<Message> sent_;
  std::vector<std::vector<std::uint8_t>> frames_;
};

}  // namespace vfl
