#include "vfl/channel.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <thread>

namespace vfl {

using Clock = std::chrono::steady_clock;

void FramedChannel::send(const Message& message) { write_bytes(encode(message)); }

Message FramedChannel::receive(Millis timeout) {
  const auto deadline = Clock::now() + timeout;
  for (;;) {
    if (auto d = try_decode(buffer_)) {
      buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(d->consumed));
      return std::move(d->message);
    }
    if (!read_some(buffer_, deadline)) throw ProtocolError("connection closed by peer");
  }
}

namespace {

struct ByteQueue {
  std::mutex mutex;
  std::condition_variable ready;
  std::deque<std::uint8_t> bytes;
  bool closed = false;
};

class QueueChannel : public FramedChannel {
 public:
  QueueChannel(std::shared_ptr<ByteQueue> in, std::shared_ptr<ByteQueue> out)
      : in_(std::move(in)), out_(std::move(out)) {}

  ~QueueChannel() override {
    for (auto* queue : {in_.get(), out_.get()}) {
      std::lock_guard lock(queue->mutex);
      queue->closed = true;
      queue->ready.notify_all();
    }
  }

 protected:
  void write_bytes(const std::vector<std::uint8_t>& bytes) override {
    std::lock_guard lock(out_->mutex);
    if (out_->closed) throw ProtocolError("in-process channel closed");
    out_->bytes.insert(out_->bytes.end(), bytes.begin(), bytes.end());
    out_->ready.notify_all();
  }

  bool read_some(std::vector<std::uint8_t>& buffer, Clock::time_point deadline) override {
    std::unique_lock lock(in_->mutex);
    if (!in_->ready.wait_until(lock, deadline, [&] { return !in_->bytes.empty() || in_->closed; }))
      throw TimeoutError("timed out waiting for a message");
    if (in_->bytes.empty()) return false;
    buffer.insert(buffer.end(), in_->bytes.begin(), in_->bytes.end());
    in_->bytes.clear();
    return true;
  }

 private:
  std::shared_ptr<ByteQueue> in_;
  std::shared_ptr<ByteQueue> out_;
};

std::string errno_text(const std::string& what) { return what + ": " + std::strerror(errno); }

int remaining_ms(Clock::time_point deadline) {
  auto left = std::chrono::duration_cast<Millis>(deadline - Clock::now()).count();
  return left < 0 ? 0 : static_cast<int>(std::min<long long>(left, 1 << 30));
}

addrinfo* resolve(const Endpoint& endpoint, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* result = nullptr;
  std::string port = std::to_string(endpoint.port);
  const char* host = endpoint.host.empty() ? nullptr : endpoint.host.c_str();
  int rc = ::getaddrinfo(host, port.c_str(), &hints, &result);
  if (rc != 0) throw ProtocolError("cannot resolve " + endpoint.host + ": " + ::gai_strerror(rc));
  return result;
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

}  // namespace

std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_channel_pair() {
  auto a_to_b = std::make_shared<ByteQueue>();
  auto b_to_a = std::make_shared<ByteQueue>();
  return {std::make_unique<QueueChannel>(b_to_a, a_to_b), std::make_unique<QueueChannel>(a_to_b, b_to_a)};
}

Endpoint parse_endpoint(const std::string& text) {
  auto colon = text.rfind(':');
  if (colon == std::string::npos) throw ConfigError("address '" + text + "' must have the form host:port");
  Endpoint e;
  e.host = text.substr(0, colon);
  std::string port = text.substr(colon + 1);
  unsigned long value = 0;
  try {
    std::size_t used = 0;
    value = std::stoul(port, &used);
    if (used != port.size()) throw std::invalid_argument(port);
  } catch (const std::exception&) {
    throw ConfigError("address '" + text + "' has an invalid port");
  }
  if (value > 65535) throw ConfigError("address '" + text + "' has an invalid port");
  e.port = static_cast<std::uint16_t>(value);
  return e;
}

TcpChannel::TcpChannel(int fd) : fd_(fd) { set_nodelay(fd_); }

TcpChannel::~TcpChannel() {
  if (fd_ >= 0) ::close(fd_);
}

void TcpChannel::write_bytes(const std::vector<std::uint8_t>& bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(errno_text("send failed"));
    }
    sent += static_cast<std::size_t>(n);
  }
}

bool TcpChannel::read_some(std::vector<std::uint8_t>& buffer, Clock::time_point deadline) {
  for (;;) {
    pollfd p{fd_, POLLIN, 0};
    int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(errno_text("poll failed"));
    }
    if (rc == 0) throw TimeoutError("timed out waiting for a message");
    std::uint8_t chunk[1 << 16];
    ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw ProtocolError(errno_text("recv failed"));
    }
    if (n == 0) return false;
    buffer.insert(buffer.end(), chunk, chunk + n);
    return true;
  }
}

TcpListener::TcpListener(const Endpoint& endpoint) {
  addrinfo* info = resolve(endpoint, true);
  fd_ = ::socket(info->ai_family, info->ai_socktype, info->ai_protocol);
  if (fd_ < 0) {
    ::freeaddrinfo(info);
    throw ProtocolError(errno_text("socket failed"));
  }
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  int rc = ::bind(fd_, info->ai_addr, info->ai_addrlen);
  ::freeaddrinfo(info);
  if (rc != 0 || ::listen(fd_, 64) != 0) {
    std::string msg = errno_text("cannot listen on " + endpoint.host + ":" + std::to_string(endpoint.port));
    ::close(fd_);
    throw ProtocolError(msg);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Channel> TcpListener::accept(Millis timeout) {
  const auto deadline = Clock::now() + timeout;
  for (;;) {
    pollfd p{fd_, POLLIN, 0};
    int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(errno_text("poll failed"));
    }
    if (rc == 0) throw TimeoutError("timed out waiting for a party to connect");
    int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR || errno == EAGAIN || errno == ECONNABORTED) continue;
      throw ProtocolError(errno_text("accept failed"));
    }
    return std::make_unique<TcpChannel>(fd);
  }
}

std::unique_ptr<Channel> tcp_connect(const Endpoint& endpoint, Millis timeout) {
  const auto deadline = Clock::now() + timeout;
  for (;;) {
    addrinfo* info = resolve(endpoint, false);
    int fd = ::socket(info->ai_family, info->ai_socktype, info->ai_protocol);
    if (fd < 0) {
      ::freeaddrinfo(info);
      throw ProtocolError(errno_text("socket failed"));
    }
    int rc = ::connect(fd, info->ai_addr, info->ai_addrlen);
    ::freeaddrinfo(info);
    if (rc == 0) return std::make_unique<TcpChannel>(fd);
    int err = errno;
    ::close(fd);
    if (err != ECONNREFUSED && err != EINTR && err != ETIMEDOUT)
      throw ProtocolError("cannot connect to " + endpoint.host + ":" + std::to_string(endpoint.port) + ": " +
                          std::strerror(err));
    if (Clock::now() >= deadline)
      throw TimeoutError("timed out connecting to " + endpoint.host + ":" + std::to_string(endpoint.port));
    std::this_thread::sleep_for(Millis(50));
  }
}

RecordingChannel::RecordingChannel(std::unique_ptr<Channel> inner) : inner_(std::move(inner)) {}

void RecordingChannel::send(const Message& message) {
  {
    std::lock_guard lock(mutex_);
    sent_.push_back(message);
    frames_.push_back(encode(message));
  }
  inner_->send(message);
}

Message RecordingChannel::receive(Millis timeout) { return inner_->receive(timeout); }

std::vector<Message> RecordingChannel::sent() const {
  std::lock_guard lock(mutex_);
  return sent_;
}

std::vector<std::vector<std::uint8_t>> RecordingChannel::frames() const {
  std::lock_guard lock(mutex_);
  return frames_;
}

}  // namespace vfl
