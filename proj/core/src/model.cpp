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

#include "lanepipe/model.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"
#include "lanepipe/transport.hpp"

namespace lanepipe {

void EncoderConfig::validate() const {
  for (std::int64_t v : {layers, heads, d_model, d_ff, vocab, seq_len, classes}) {
    if (v <= 0) raise(ErrorCode::kInvalidConfig, "encoder dims must be positive");
  }
  if (d_model % heads != 0) {
    raise(ErrorCode::kInvalidConfig, "d_model must be divisible by head count");
  }
}

std::string EncoderConfig::to_json() const {
  nlohmann::ordered_json doc;
  doc["layers"] = layers;
  doc["heads"] = heads;
  doc["d_model"] = d_model;
  doc["d_ff"] = d_ff;
  doc["vocab"] = vocab;
  doc["seq_len"] = seq_len;
  doc["classes"] = classes;
  doc["seed"] = seed;
  return doc.dump(2);
}

EncoderConfig EncoderConfig::from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::kInvalidConfig, std::string("encoder config JSON: ") + e.what());
  }
  EncoderConfig cfg;
  try {
    if (doc.contains("layers")) cfg.layers = doc.at("layers").get<std::int64_t>();
    if (doc.contains("heads")) cfg.heads = doc.at("heads").get<std::int64_t>();
    if (doc.contains("d_model")) cfg.d_model = doc.at("d_model").get<std::int64_t>();
    if (doc.contains("d_ff")) cfg.d_ff = doc.at("d_ff").get<std::int64_t>();
    if (doc.contains("vocab")) cfg.vocab = doc.at("vocab").get<std::int64_t>();
    if (doc.contains("seq_len")) cfg.seq_len = doc.at("seq_len").get<std::int64_t>();
    if (doc.contains("classes")) cfg.classes = doc.at("classes").get<std::int64_t>();
    if (doc.contains("seed")) cfg.seed = doc.at("seed").get<std::uint32_t>();
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::kInvalidConfig, std::string("encoder config field: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

SyntheticTask::SyntheticTask(std::int64_t vocab, std::int64_t seq_len,
                             std::int64_t classes, std::uint32_t seed)
    : vocab_(vocab), seq_len_(seq_len), classes_(classes), seed_(seed) {
  if (vocab_ <= 0 || seq_len_ <= 0 || classes_ <= 0 || classes_ > vocab_) {
    raise(ErrorCode::kInvalidConfig, "synthetic task dims inconsistent");
  }
}

Batch SyntheticTask::make_batch(std::int64_t first_index, std::int64_t size) const {
  if (first_index < 0 || size <= 0) {
    raise(ErrorCode::kInvalidConfig, "batch range invalid");
  }
  Batch b;
  b.batch_size = size;
  b.seq_len = seq_len_;
  b.tokens.resize(static_cast<std::size_t>(size * seq_len_));
  b.labels.resize(static_cast<std::size_t>(size));

  const std::int64_t bucket = vocab_ / classes_;
  for (std::int64_t i = 0; i < size; ++i) {
    const std::int64_t index = first_index + i;
    // Per-sample stream: reproducible regardless of batch boundaries.
    std::uint64_t mix = (static_cast<std::uint64_t>(seed_) << 32) ^
                        (static_cast<std::uint64_t>(index) * 0x9E3779B97F4A7C15ULL);
    std::mt19937 rng(static_cast<std::uint32_t>(mix ^ (mix >> 32)));

    const std::int32_t label = static_cast<std::int32_t>(index % classes_);
    std::int32_t* row = b.tokens.data() + i * seq_len_;
    for (std::int64_t t = 0; t < seq_len_; ++t) {
      row[t] = static_cast<std::int32_t>(rng() % static_cast<std::uint32_t>(vocab_));
    }
    // Plant a strict-majority token from the label's bucket.
    const std::int32_t planted = static_cast<std::int32_t>(
        label * bucket + static_cast<std::int64_t>(rng() % static_cast<std::uint32_t>(bucket)));
    std::vector<std::int64_t> order(static_cast<std::size_t>(seq_len_));
    for (std::int64_t t = 0; t < seq_len_; ++t) order[static_cast<std::size_t>(t)] = t;
    for (std::int64_t t = seq_len_ - 1; t > 0; --t) {
      std::swap(order[static_cast<std::size_t>(t)],
                order[rng() % static_cast<std::uint32_t>(t + 1)]);
    }
    const std::int64_t majority = seq_len_ / 2 + 1;
    for (std::int64_t t = 0; t < majority; ++t) row[order[static_cast<std::size_t>(t)]] = planted;
    b.labels[static_cast<std::size_t>(i)] = label;
  }
  return b;
}

void save_checkpoint(const std::string& path, const Model<float>& m) {
  PipeMessage msg;
  msg.type = MsgType::kWeights;
  for (const auto& p : m.params) {
    msg.tensors.push_back(WireTensor::from_f32(p.value.shape(), p.value.value()));
  }
  const std::vector<std::uint8_t> frame = encode(msg);
  const std::string header = m.cfg.to_json();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::kInvalidConfig, "cannot open checkpoint for writing: " + path);
  const std::uint32_t len = static_cast<std::uint32_t>(header.size());
  char len_bytes[4];
  for (int i = 0; i < 4; ++i) len_bytes[i] = static_cast<char>((len >> (8 * i)) & 0xff);
  out.write(len_bytes, 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(frame.data()),
            static_cast<std::streamsize>(frame.size()));
  if (!out) raise(ErrorCode::kInvalidConfig, "checkpoint write failed: " + path);
}

Model<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::kInvalidConfig, "cannot open checkpoint: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() < 4) raise(ErrorCode::kMalformedFrame, "checkpoint too short");
  std::uint32_t len = 0;
  for (int i = 3; i >= 0; --i) {
    len = (len << 8) | static_cast<std::uint8_t>(bytes[static_cast<std::size_t>(i)]);
  }
  if (bytes.size() < 4 + static_cast<std::size_t>(len)) {
    raise(ErrorCode::kMalformedFrame, "checkpoint header truncated");
  }
  const EncoderConfig cfg =
      EncoderConfig::from_json(std::string(bytes.data() + 4, len));

  const auto* frame = reinterpret_cast<const std::uint8_t*>(bytes.data()) + 4 + len;
  const PipeMessage msg = decode(frame, bytes.size() - 4 - len);
  if (msg.type != MsgType::kWeights) {
    raise(ErrorCode::kMalformedFrame, "checkpoint payload is not a weights message");
  }

  Model<float> m = build_model<float>(cfg);
  if (msg.tensors.size() != m.params.size()) {
    raise(ErrorCode::kShapeMismatch, "checkpoint tensor count mismatches config");
  }
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const WireTensor& t = msg.tensors[i];
    if (t.precision != 4 || t.shape != m.params[i].value.shape()) {
      raise(ErrorCode::kShapeMismatch,
            "checkpoint tensor " + std::to_string(i) + " mismatches " + m.params[i].name);
    }
    m.params[i].value.mutable_value() = t.f32;
  }
  return m;
}

}  // namespace lanepipe
