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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdint>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "lanepipe/crc32.hpp"
#include "lanepipe/error.hpp"
#include "lanepipe/transport.hpp"

using namespace lanepipe;

#define CHECK_RAISES(expr, expected)            \
  do {                                          \
    bool caught_ = false;                       \
    try {                                       \
      (void)(expr);                             \
    } catch (const Error& e_) {                 \
      caught_ = true;                           \
      CHECK(e_.code() == (expected));           \
    }                                           \
    CHECK_MESSAGE(caught_, "no error raised");  \
  } while (0)

namespace {

std::uint32_t crc_of_string(const std::string& s) {
  return crc32(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
}

PipeMessage random_message(std::mt19937& rng) {
  PipeMessage m;
  m.type = static_cast<MsgType>(rng() % 4);
  m.batch_id = rng();
  m.version = rng();
  const std::size_t tensors = rng() % 4;
  for (std::size_t i = 0; i < tensors; ++i) {
    std::vector<std::int64_t> shape(rng() % 4);
    std::int64_t count = 1;
    for (auto& d : shape) {
      d = static_cast<std::int64_t>(rng() % 7);
      count *= d;
    }
    auto real = [&] {
      return (static_cast<double>(rng()) / 4294967296.0 - 0.5) * 2e6;
    };
    if (rng() % 2 == 0) {
      std::vector<float> v(static_cast<std::size_t>(count));
      for (auto& x : v) x = static_cast<float>(real());
      m.tensors.push_back(WireTensor::from_f32(std::move(shape), std::move(v)));
    } else {
      std::vector<double> v(static_cast<std::size_t>(count));
      for (auto& x : v) x = real();
      m.tensors.push_back(WireTensor::from_f64(std::move(shape), std::move(v)));
    }
  }
  return m;
}

}  // namespace

TEST_CASE("crc32 known answers") {
  CHECK(crc_of_string("123456789") == 0xCBF43926u);
  CHECK(crc_of_string("") == 0x00000000u);
  CHECK(crc_of_string("The quick brown fox jumps over the lazy dog") == 0x414FA339u);

  // Streaming over split input equals one-shot.
  std::uint32_t state = crc32_init();
  state = crc32_update(state, reinterpret_cast<const std::uint8_t*>("1234"), 4);
  state = crc32_update(state, reinterpret_cast<const std::uint8_t*>("56789"), 5);
  CHECK(crc32_final(state) == 0xCBF43926u);
}

TEST_CASE("empty control frame layout is exactly 20 bytes") {
  PipeMessage m;
  m.type = MsgType::kControl;
  m.batch_id = 7;
  m.version = 3;
  const auto frame = encode(m);
  REQUIRE(frame.size() == 20);
  CHECK(frame[0] == 'C');
  CHECK(frame[1] == 'F');
  CHECK(frame[2] == 'D');
  CHECK(frame[3] == 'T');
  CHECK(frame[4] == 1);
  CHECK(frame[5] == 2);
  CHECK(frame[6] == 7);
  CHECK(frame[7] == 0);
  CHECK(frame[10] == 3);
  CHECK(frame[14] == 0);
  CHECK(frame[15] == 0);
  const std::uint32_t stored = static_cast<std::uint32_t>(frame[16]) |
                               (static_cast<std::uint32_t>(frame[17]) << 8) |
                               (static_cast<std::uint32_t>(frame[18]) << 16) |
                               (static_cast<std::uint32_t>(frame[19]) << 24);
  CHECK(stored == crc32(frame.data(), 16));
  CHECK(decode(frame) == m);
}

TEST_CASE("activation frame with one 2x2 f32 tensor sizes by field widths") {
  PipeMessage m;
  m.type = MsgType::kActivation;
  m.batch_id = 1;
  m.tensors.push_back(WireTensor::from_f32({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f}));
  const auto frame = encode(m);
  // 16 header + (rank 1 + dims 2*4 + precision 1 + scalars 16) + crc 4.
  CHECK(frame.size() == 16 + (1 + 8 + 1 + 16) + 4);
  CHECK(frame[16] == 2);
  CHECK(decode(frame) == m);
}

TEST_CASE("round trip holds for 1000 random messages") {
  std::mt19937 rng(20260814);
  for (int i = 0; i < 1000; ++i) {
    const PipeMessage m = random_message(rng);
    CHECK(decode(encode(m)) == m);
  }
}

TEST_CASE("concatenated frames decode into exactly n messages") {
  std::mt19937 rng(99);
  std::vector<PipeMessage> sent;
  std::vector<std::uint8_t> stream;
  for (int i = 0; i < 7; ++i) {
    sent.push_back(random_message(rng));
    const auto frame = encode(sent.back());
    stream.insert(stream.end(), frame.begin(), frame.end());
  }
  const auto got = decode_stream(stream);
  REQUIRE(got.size() == sent.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == sent[i]);
  CHECK(decode_stream({}).empty());
}

TEST_CASE("malformed frames are rejected") {
  PipeMessage m;
  m.type = MsgType::kGradient;
  m.tensors.push_back(WireTensor::from_f32({3}, {1.0f, 2.0f, 3.0f}));
  const auto frame = encode(m);

  SUBCASE("bad magic") {
    auto bad = frame;
    bad[0] = 'X';
    CHECK_RAISES(decode(bad), ErrorCode::kMalformedFrame);
  }
  SUBCASE("unsupported protocol byte") {
    auto bad = frame;
    bad[4] = 2;
    CHECK_RAISES(decode(bad), ErrorCode::kMalformedFrame);
  }
  SUBCASE("corrupted crc byte") {
    auto bad = frame;
    bad.back() ^= 0xff;
    CHECK_RAISES(decode(bad), ErrorCode::kCrcMismatch);
  }
  SUBCASE("corrupted scalar byte") {
    auto bad = frame;
    bad[22] ^= 0x01;  // header 16 + rank 1 + dim 4 + precision 1 = first scalar
    CHECK_RAISES(decode(bad), ErrorCode::kCrcMismatch);
  }
  SUBCASE("corrupted dim byte breaks framing") {
    auto bad = frame;
    bad[20] ^= 0x01;
    CHECK_RAISES(decode(bad), ErrorCode::kMalformedFrame);
  }
  SUBCASE("unknown message type") {
    auto bad = frame;
    bad[5] = 9;
    const std::uint32_t c = crc32(bad.data(), bad.size() - 4);
    for (int i = 0; i < 4; ++i) bad[bad.size() - 4 + static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>((c >> (8 * i)) & 0xff);
    CHECK_RAISES(decode(bad), ErrorCode::kUnknownMsgType);
  }
  SUBCASE("bad precision byte") {
    auto bad = frame;
    bad[21] = 5;  // header 16 + rank 1 + one dim 4 = offset 21
    CHECK_RAISES(decode(bad), ErrorCode::kMalformedFrame);
  }
  SUBCASE("truncation") {
    auto bad = frame;
    bad.pop_back();
    CHECK_RAISES(decode(bad), ErrorCode::kMalformedFrame);
  }
  SUBCASE("trailing bytes") {
    auto bad = frame;
    bad.push_back(0);
    CHECK_RAISES(decode(bad), ErrorCode::kMalformedFrame);
  }
}

TEST_CASE("encode rejects field overflow and shape mismatches") {
  SUBCASE("rank beyond u8") {
    PipeMessage m;
    m.tensors.push_back(WireTensor::from_f32(std::vector<std::int64_t>(300, 1), {}));
    m.tensors[0].f32.assign(1, 0.0f);
    CHECK_RAISES(encode(m), ErrorCode::kOversize);
  }
  SUBCASE("dim beyond u32") {
    PipeMessage m;
    m.tensors.push_back(WireTensor::from_f32({1LL << 33}, {}));
    CHECK_RAISES(encode(m), ErrorCode::kOversize);
  }
  SUBCASE("value count mismatch") {
    PipeMessage m;
    m.tensors.push_back(WireTensor::from_f32({4}, {1.0f}));
    CHECK_RAISES(encode(m), ErrorCode::kInvalidConfig);
  }
  SUBCASE("bad precision") {
    PipeMessage m;
    WireTensor t;
    t.shape = {0};
    t.precision = 6;
    m.tensors.push_back(t);
    CHECK_RAISES(encode(m), ErrorCode::kInvalidConfig);
  }
  SUBCASE("too many tensors") {
    PipeMessage m;
    m.tensors.assign(70000, WireTensor::from_f32({0}, {}));
    CHECK_RAISES(encode(m), ErrorCode::kOversize);
  }
}

TEST_CASE("control documents ride as byte-per-scalar tensors") {
  const std::string doc = "{\"cmd\":\"start\",\"stages\":3}";
  const WireTensor t = control_text_to_tensor(doc);
  CHECK(t.shape == std::vector<std::int64_t>{static_cast<std::int64_t>(doc.size())});
  CHECK(tensor_to_control_text(t) == doc);

  // Every byte value survives.
  std::string all;
  for (int c = 0; c < 256; ++c) all.push_back(static_cast<char>(c));
  CHECK(tensor_to_control_text(control_text_to_tensor(all)) == all);

  WireTensor bad = t;
  bad.f32[0] = 256.0f;
  CHECK_RAISES(tensor_to_control_text(bad), ErrorCode::kMalformedFrame);
  CHECK_RAISES(tensor_to_control_text(WireTensor::from_f64({1}, {65.0})),
               ErrorCode::kMalformedFrame);
}

TEST_CASE("loopback links deliver in order with timestamps") {
  auto [a, b] = make_loopback_pair();

  PipeMessage m;
  m.type = MsgType::kActivation;
  m.batch_id = 5;
  m.version = 2;
  m.ts_ms = 123.5;
  m.tensors.push_back(WireTensor::from_f32({2}, {1.5f, -2.5f}));
  a->send(m);
  const PipeMessage got = b->recv();
  CHECK(got == m);
  CHECK(got.ts_ms == 123.5);

  std::mt19937 rng(7);
  std::vector<PipeMessage> sent;
  for (int i = 0; i < 100; ++i) {
    sent.push_back(random_message(rng));
    sent.back().batch_id = static_cast<std::uint32_t>(i);
    b->send(sent.back());
  }
  for (int i = 0; i < 100; ++i) CHECK(a->recv() == sent[static_cast<std::size_t>(i)]);
}

TEST_CASE("loopback timeout and close semantics") {
  auto [a, b] = make_loopback_pair();
  CHECK_RAISES(b->recv(50), ErrorCode::kTimeout);

  PipeMessage m;
  a->send(m);
  a->close();
  CHECK(b->recv() == m);  // Queued frames drain after close.
  CHECK_RAISES(b->recv(), ErrorCode::kTransportClosed);
  CHECK_RAISES(a->send(m), ErrorCode::kTransportClosed);
}

TEST_CASE("tcp links carry messages both ways") {
  TcpListener listener(0);
  REQUIRE(listener.port() != 0);

  std::shared_ptr<Link> client;
  std::thread dialer([&] { client = tcp_connect("127.0.0.1", listener.port()); });
  auto server = listener.accept_one(5000);
  dialer.join();
  REQUIRE(client != nullptr);

  PipeMessage big;
  big.type = MsgType::kWeights;
  big.version = 44;
  std::vector<float> payload(100000);
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(i) * 0.25f;
  const std::int64_t payload_len = static_cast<std::int64_t>(payload.size());
  big.tensors.push_back(WireTensor::from_f32({payload_len}, std::move(payload)));
  client->send(big);
  CHECK(server->recv(5000) == big);

  PipeMessage reply;
  reply.type = MsgType::kControl;
  reply.batch_id = 9;
  server->send(reply);
  CHECK(client->recv(5000) == reply);
}

TEST_CASE("tcp preserves fifo order under a sender thread") {
  TcpListener listener(0);
  std::shared_ptr<Link> client;
  std::thread dialer([&] { client = tcp_connect("127.0.0.1", listener.port()); });
  auto server = listener.accept_one(5000);
  dialer.join();

  std::mt19937 rng(1234);
  std::vector<PipeMessage> sent;
  for (int i = 0; i < 200; ++i) {
    sent.push_back(random_message(rng));
    sent.back().batch_id = static_cast<std::uint32_t>(i);
  }
  std::thread sender([&] {
    for (const auto& m : sent) client->send(m);
  });
  for (int i = 0; i < 200; ++i) CHECK(server->recv(5000) == sent[static_cast<std::size_t>(i)]);
  sender.join();
}

TEST_CASE("tcp close and timeout error paths") {
  TcpListener listener(0);
  std::shared_ptr<Link> client;
  std::thread dialer([&] { client = tcp_connect("127.0.0.1", listener.port()); });
  auto server = listener.accept_one(5000);
  dialer.join();

  CHECK_RAISES(server->recv(50), ErrorCode::kTimeout);
  client->close();
  CHECK_RAISES(server->recv(5000), ErrorCode::kTransportClosed);

  const std::uint16_t dead_port = [] {
    TcpListener probe(0);
    return probe.port();
  }();
  CHECK_RAISES(tcp_connect("127.0.0.1", dead_port, 100), ErrorCode::kTimeout);
  CHECK_RAISES(listener.accept_one(50), ErrorCode::kTimeout);
}
