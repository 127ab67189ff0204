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

#ifndef LANEPIPE_TRANSPORT_HPP_
#define LANEPIPE_TRANSPORT_HPP_

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace lanepipe {

// Wire frame layout (all integers little-endian):
//   magic "CFDT" | protocol u8 = 1 | msg_type u8 | batch_id u32 | version u32
//   | tensor count u16 | per tensor: rank u8, dims u32 each, precision u8
//   (4 = f32, 8 = f64), raw scalars | crc32 u32 over all preceding bytes.
// Frames carry no length field; the tensor headers delimit them.

enum class MsgType : std::uint8_t {
  kActivation = 0,
  kGradient = 1,
  kControl = 2,
  kWeights = 3,
};

const char* msg_type_name(MsgType t);

// One serialized tensor. Exactly one of f32/f64 is meaningful, selected by
// `precision` (bytes per scalar); the populated vector's size must equal the
// product of dims.
struct WireTensor {
  std::vector<std::int64_t> shape;
  std::uint8_t precision = 4;
  std::vector<float> f32;
  std::vector<double> f64;

  std::int64_t element_count() const;
  static WireTensor from_f32(std::vector<std::int64_t> shape, std::vector<float> values);
  static WireTensor from_f64(std::vector<std::int64_t> shape, std::vector<double> values);

  friend bool operator==(const WireTensor& a, const WireTensor& b) {
    return a.shape == b.shape && a.precision == b.precision && a.f32 == b.f32 && a.f64 == b.f64;
  }
};

struct PipeMessage {
  MsgType type = MsgType::kControl;
  std::uint32_t batch_id = 0;
  std::uint32_t version = 0;
  std::vector<WireTensor> tensors;

  // Virtual-clock stamp carried by the loopback transport only; never
  // serialized, excluded from equality.
  double ts_ms = 0.0;

  friend bool operator==(const PipeMessage& a, const PipeMessage& b) {
    return a.type == b.type && a.batch_id == b.batch_id && a.version == b.version &&
           a.tensors == b.tensors;
  }
};

// Raises kOversize when a field exceeds its wire width or a tensor exceeds
// 2^31 bytes; kInvalidConfig when a tensor's value count mismatches its shape.
std::vector<std::uint8_t> encode(const PipeMessage& m);

// Decodes exactly one frame spanning the whole buffer. Raises kMalformedFrame
// (bad magic/protocol/shape arithmetic, truncation, trailing bytes),
// kUnknownMsgType, or kCrcMismatch.
PipeMessage decode(const std::uint8_t* data, std::size_t size);
PipeMessage decode(const std::vector<std::uint8_t>& frame);

// Incremental parse for stream transports: returns true and sets `out` and
// `consumed` when `data` starts with one complete frame; returns false when
// more bytes are needed. Malformation raises as in decode().
bool try_decode(const std::uint8_t* data, std::size_t size, PipeMessage* out,
                std::size_t* consumed);

// Splits a concatenation of whole frames into messages.
std::vector<PipeMessage> decode_stream(const std::vector<std::uint8_t>& bytes);

// Control documents (JSON text) ride as one rank-1 f32 tensor holding one
// byte value per scalar, exact for 0..255.
WireTensor control_text_to_tensor(const std::string& text);
std::string tensor_to_control_text(const WireTensor& t);

// Reliable, ordered, point-to-point message channel. One sender and one
// receiver per direction; they may live on different threads.
class Link {
 public:
  virtual ~Link() = default;
  virtual void send(const PipeMessage& m) = 0;
  // timeout_ms < 0 blocks indefinitely. Raises kTimeout when it elapses,
  // kTransportClosed when the channel is closed and drained.
  virtual PipeMessage recv(int timeout_ms = -1) = 0;
  virtual void close() = 0;
};

// In-process pair of endpoints over byte queues. Frames are encoded and
// decoded exactly as on a stream transport; ts_ms rides alongside each frame.
std::pair<std::shared_ptr<Link>, std::shared_ptr<Link>> make_loopback_pair();

// Stream-socket link. `listen_port` = 0 picks an ephemeral port.
class TcpListener {
 public:
  explicit TcpListener(std::uint16_t port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }
  std::shared_ptr<Link> accept_one(int timeout_ms = -1);

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

std::shared_ptr<Link> tcp_connect(const std::string& host, std::uint16_t port,
                                  int timeout_ms = 10000);

}  // namespace lanepipe

#endif  // LANEPIPE_TRANSPORT_HPP_
