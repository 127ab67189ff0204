// Copyright 2026 The Lanepipe Authors. All Rights Reserved.
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

#include "lanepipe/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <bit>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>

#include "lanepipe/crc32.hpp"
#include "lanepipe/error.hpp"

namespace lanepipe {
namespace {

constexpr std::uint8_t kProtocolVersion = 1;
constexpr std::int64_t kMaxTensorBytes = std::int64_t{1} << 31;
constexpr char kMagic[4] = {'C', 'F', 'D', 'T'};

void put_u16(std::vector<std::uint8_t>* out, std::uint16_t v) {
  out->push_back(static_cast<std::uint8_t>(v & 0xff));
  out->push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>* out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out->push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>* out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out->push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (static_cast<std::uint16_t>(p[1]) << 8));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

const char* msg_type_name(MsgType t) {
  switch (t) {
    case MsgType::kActivation: return "ACTIVATION";
    case MsgType::kGradient: return "GRADIENT";
    case MsgType::kControl: return "CONTROL";
    case MsgType::kWeights: return "WEIGHTS";
  }
  return "?";
}

std::int64_t WireTensor::element_count() const {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d == 0) return 0;
    if (n > kMaxTensorBytes / d) raise(ErrorCode::kOversize, "tensor element count overflows");
    n *= d;
  }
  return n;
}

WireTensor WireTensor::from_f32(std::vector<std::int64_t> shape, std::vector<float> values) {
  WireTensor t;
  t.shape = std::move(shape);
  t.precision = 4;
  t.f32 = std::move(values);
  return t;
}

WireTensor WireTensor::from_f64(std::vector<std::int64_t> shape, std::vector<double> values) {
  WireTensor t;
  t.shape = std::move(shape);
  t.precision = 8;
  t.f64 = std::move(values);
  return t;
}

std::vector<std::uint8_t> encode(const PipeMessage& m) {
  if (m.tensors.size() > 0xffff) raise(ErrorCode::kOversize, "too many tensors for u16 count");

  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(kProtocolVersion);
  out.push_back(static_cast<std::uint8_t>(m.type));
  put_u32(&out, m.batch_id);
  put_u32(&out, m.version);
  put_u16(&out, static_cast<std::uint16_t>(m.tensors.size()));

  for (const auto& t : m.tensors) {
    if (t.shape.size() > 0xff) raise(ErrorCode::kOversize, "tensor rank exceeds u8");
    for (std::int64_t d : t.shape) {
      if (d < 0 || d > 0xffffffffLL) raise(ErrorCode::kOversize, "tensor dim exceeds u32");
    }
    if (t.precision != 4 && t.precision != 8) {
      raise(ErrorCode::kInvalidConfig, "tensor precision must be 4 or 8");
    }
    const std::int64_t count = t.element_count();
    if (count * t.precision > kMaxTensorBytes) raise(ErrorCode::kOversize, "tensor exceeds 2^31 bytes");
    const std::size_t populated = t.precision == 4 ? t.f32.size() : t.f64.size();
    if (populated != static_cast<std::size_t>(count)) {
      raise(ErrorCode::kInvalidConfig, "tensor value count mismatches shape");
    }

    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (std::int64_t d : t.shape) put_u32(&out, static_cast<std::uint32_t>(d));
    out.push_back(t.precision);
    if (t.precision == 4) {
      for (float v : t.f32) put_u32(&out, std::bit_cast<std::uint32_t>(v));
    } else {
      for (double v : t.f64) put_u64(&out, std::bit_cast<std::uint64_t>(v));
    }
  }

  put_u32(&out, crc32(out.data(), out.size()));
  return out;
}

bool try_decode(const std::uint8_t* data, std::size_t size, PipeMessage* out,
                std::size_t* consumed) {
  std::size_t at = 0;
  auto have = [&](std::size_t n) { return size - at >= n; };

  if (!have(16)) return false;
  if (std::memcmp(data, kMagic, 4) != 0) raise(ErrorCode::kMalformedFrame, "bad magic");
  if (data[4] != kProtocolVersion) raise(ErrorCode::kMalformedFrame, "unsupported protocol");
  const std::uint8_t type_byte = data[5];
  PipeMessage m;
  m.batch_id = get_u32(data + 6);
  m.version = get_u32(data + 10);
  const std::uint16_t tensor_count = get_u16(data + 14);
  at = 16;

  m.tensors.resize(tensor_count);
  for (auto& t : m.tensors) {
    if (!have(1)) return false;
    const std::uint8_t rank = data[at++];
    if (!have(std::size_t{4} * rank + 1)) return false;
    t.shape.resize(rank);
    for (auto& d : t.shape) {
      d = static_cast<std::int64_t>(get_u32(data + at));
      at += 4;
    }
    t.precision = data[at++];
    if (t.precision != 4 && t.precision != 8) {
      raise(ErrorCode::kMalformedFrame, "bad precision byte");
    }
    const std::int64_t count = t.element_count();
    if (!have(static_cast<std::size_t>(count) * t.precision)) return false;
    if (t.precision == 4) {
      t.f32.resize(static_cast<std::size_t>(count));
      for (auto& v : t.f32) {
        v = std::bit_cast<float>(get_u32(data + at));
        at += 4;
      }
    } else {
      t.f64.resize(static_cast<std::size_t>(count));
      for (auto& v : t.f64) {
        v = std::bit_cast<double>(get_u64(data + at));
        at += 8;
      }
    }
  }

  if (!have(4)) return false;
  const std::uint32_t stored = get_u32(data + at);
  if (stored != crc32(data, at)) raise(ErrorCode::kCrcMismatch, "frame checksum mismatch");
  at += 4;

  if (type_byte > static_cast<std::uint8_t>(MsgType::kWeights)) {
    raise(ErrorCode::kUnknownMsgType, "unknown message type byte");
  }
  m.type = static_cast<MsgType>(type_byte);
  *out = std::move(m);
  *consumed = at;
  return true;
}

PipeMessage decode(const std::uint8_t* data, std::size_t size) {
  PipeMessage m;
  std::size_t consumed = 0;
  if (!try_decode(data, size, &m, &consumed)) {
    raise(ErrorCode::kMalformedFrame, "truncated frame");
  }
  if (consumed != size) raise(ErrorCode::kMalformedFrame, "trailing bytes after frame");
  return m;
}

PipeMessage decode(const std::vector<std::uint8_t>& frame) {
  return decode(frame.data(), frame.size());
}

std::vector<PipeMessage> decode_stream(const std::vector<std::uint8_t>& bytes) {
  std::vector<PipeMessage> out;
  std::size_t at = 0;
  while (at < bytes.size()) {
    PipeMessage m;
    std::size_t consumed = 0;
    if (!try_decode(bytes.data() + at, bytes.size() - at, &m, &consumed)) {
      raise(ErrorCode::kMalformedFrame, "truncated frame in stream");
    }
    out.push_back(std::move(m));
    at += consumed;
  }
  return out;
}

WireTensor control_text_to_tensor(const std::string& text) {
  std::vector<float> bytes;
  bytes.reserve(text.size());
  for (unsigned char c : text) bytes.push_back(static_cast<float>(c));
  return WireTensor::from_f32({static_cast<std::int64_t>(text.size())}, std::move(bytes));
}

std::string tensor_to_control_text(const WireTensor& t) {
  if (t.precision != 4 || t.shape.size() != 1) {
    raise(ErrorCode::kMalformedFrame, "control payload must be one rank-1 f32 tensor");
  }
  std::string text;
  text.reserve(t.f32.size());
  for (float v : t.f32) {
    if (v < 0.0f || v > 255.0f || v != static_cast<float>(static_cast<unsigned char>(v))) {
      raise(ErrorCode::kMalformedFrame, "control payload scalar is not a byte value");
    }
    text.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return text;
}

namespace {

struct LoopbackQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::pair<std::vector<std::uint8_t>, double>> frames;
  bool closed = false;
};

struct LoopbackState {
  LoopbackQueue dir[2];
};

class LoopbackLink final : public Link {
 public:
  LoopbackLink(std::shared_ptr<LoopbackState> state, int send_dir)
      : state_(std::move(state)), send_dir_(send_dir) {}
  ~LoopbackLink() override { close(); }

  void send(const PipeMessage& m) override {
    auto frame = encode(m);
    auto& q = state_->dir[send_dir_];
    {
      std::lock_guard<std::mutex> lock(q.mu);
      if (q.closed) raise(ErrorCode::kTransportClosed, "send on closed link");
      q.frames.emplace_back(std::move(frame), m.ts_ms);
    }
    q.cv.notify_one();
  }

  PipeMessage recv(int timeout_ms) override {
    auto& q = state_->dir[1 - send_dir_];
    std::unique_lock<std::mutex> lock(q.mu);
    auto ready = [&] { return !q.frames.empty() || q.closed; };
    if (timeout_ms < 0) {
      q.cv.wait(lock, ready);
    } else if (!q.cv.wait_for(lock, std::chrono::milliseconds(timeout_ms), ready)) {
      raise(ErrorCode::kTimeout, "recv timed out");
    }
    if (q.frames.empty()) raise(ErrorCode::kTransportClosed, "recv on closed link");
    auto [frame, ts] = std::move(q.frames.front());
    q.frames.pop_front();
    lock.unlock();
    PipeMessage m = decode(frame);
    m.ts_ms = ts;
    return m;
  }

  void close() override {
    for (auto& q : state_->dir) {
      {
        std::lock_guard<std::mutex> lock(q.mu);
        q.closed = true;
      }
      q.cv.notify_all();
    }
  }

 private:
  std::shared_ptr<LoopbackState> state_;
  int send_dir_;
};

class TcpLink final : public Link {
 public:
  explicit TcpLink(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~TcpLink() override { close(); }

  void send(const PipeMessage& m) override {
    const auto frame = encode(m);
    std::lock_guard<std::mutex> lock(send_mu_);
    if (closed_.load()) raise(ErrorCode::kTransportClosed, "send on closed link");
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        raise(ErrorCode::kTransportClosed, "send failed");
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  PipeMessage recv(int timeout_ms) override {
    std::lock_guard<std::mutex> lock(recv_mu_);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(
                              timeout_ms < 0 ? 0 : timeout_ms);
    for (;;) {
      PipeMessage m;
      std::size_t consumed = 0;
      if (!buffer_.empty() && try_decode(buffer_.data(), buffer_.size(), &m, &consumed)) {
        buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(consumed));
        return m;
      }
      if (closed_.load()) raise(ErrorCode::kTransportClosed, "recv on closed link");

      int wait_ms = -1;
      if (timeout_ms >= 0) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                              deadline - std::chrono::steady_clock::now())
                              .count();
        if (left <= 0) raise(ErrorCode::kTimeout, "recv timed out");
        wait_ms = static_cast<int>(left);
      }
      pollfd pfd{fd_, POLLIN, 0};
      const int pr = ::poll(&pfd, 1, wait_ms);
      if (pr == 0) raise(ErrorCode::kTimeout, "recv timed out");
      if (pr < 0) {
        if (errno == EINTR) continue;
        raise(ErrorCode::kTransportClosed, "poll failed");
      }

      std::uint8_t chunk[65536];
      const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
      if (n == 0) {
        if (buffer_.empty()) raise(ErrorCode::kTransportClosed, "recv on closed link");
        raise(ErrorCode::kMalformedFrame, "peer closed mid-frame");
      }
      if (n < 0) {
        if (errno == EINTR) continue;
        raise(ErrorCode::kTransportClosed, "recv failed");
      }
      buffer_.insert(buffer_.end(), chunk, chunk + n);
    }
  }

  void close() override {
    bool expected = false;
    if (closed_.compare_exchange_strong(expected, true)) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
    }
  }

 private:
  int fd_;
  std::atomic<bool> closed_{false};
  std::mutex send_mu_;
  std::mutex recv_mu_;
  std::vector<std::uint8_t> buffer_;
};

}  // namespace

std::pair<std::shared_ptr<Link>, std::shared_ptr<Link>> make_loopback_pair() {
  auto state = std::make_shared<LoopbackState>();
  return {std::make_shared<LoopbackLink>(state, 0), std::make_shared<LoopbackLink>(state, 1)};
}

TcpListener::TcpListener(std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) raise(ErrorCode::kTransportClosed, "socket() failed");
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_ANY);
  addr.sin_port = htons(port);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(fd_, 8) != 0) {
    ::close(fd_);
    raise(ErrorCode::kTransportClosed, "bind/listen failed");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::shared_ptr<Link> TcpListener::accept_one(int timeout_ms) {
  pollfd pfd{fd_, POLLIN, 0};
  const int pr = ::poll(&pfd, 1, timeout_ms);
  if (pr == 0) raise(ErrorCode::kTimeout, "accept timed out");
  if (pr < 0) raise(ErrorCode::kTransportClosed, "poll failed");
  const int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) raise(ErrorCode::kTransportClosed, "accept failed");
  return std::make_shared<TcpLink>(fd);
}

std::shared_ptr<Link> tcp_connect(const std::string& host, std::uint16_t port, int timeout_ms) {
  const auto deadline =
      std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  const std::string port_str = std::to_string(port);

  for (;;) {
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res) == 0) {
      for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
        const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
          ::freeaddrinfo(res);
          return std::make_shared<TcpLink>(fd);
        }
        ::close(fd);
      }
      ::freeaddrinfo(res);
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      raise(ErrorCode::kTimeout, "connect timed out");
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

}  // namespace lanepipe
