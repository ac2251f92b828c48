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

#include <zlib.h>

#include <array>
#include <cstdint>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "elasticep/control_plane/net.hpp"
#include "elasticep/core.hpp"

namespace elasticep::cp {

using nlohmann::json;

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;
inline constexpr NodeId kControllerId = -1;

class ProtocolError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::array<std::string_view, 7> kMessageKinds = {
    "register", "heartbeat", "plan_push", "load_report", "fetch_request", "fetch_reply", "shutdown"};

inline bool known_kind(std::string_view k) {
  for (auto s : kMessageKinds)
    if (s == k) return true;
  return false;
}

struct Message {
  std::string kind;
  NodeId sender = kControllerId;
  json payload = json::object();
  int v = kProtocolVersion;

  bool operator==(const Message&) const = default;
};

inline json message_to_json(const Message& m) {
  return json{{"v", m.v}, {"kind", m.kind}, {"sender", m.sender}, {"payload", m.payload}};
}

inline Message message_from_json(const json& j) {
  if (!j.is_object()) throw ProtocolError("frame is not a JSON object");
  Message m;
  try {
    m.v = j.at("v").get<int>();
    m.kind = j.at("kind").get<std::string>();
    m.sender = j.at("sender").get<NodeId>();
    m.payload = j.value("payload", json::object());
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed message: ") + e.what());
  }
  if (m.v != kProtocolVersion) throw ProtocolError("unsupported protocol version " + std::to_string(m.v));
  if (!known_kind(m.kind)) throw ProtocolError("unknown message kind '" + m.kind + "'");
  if (!m.payload.is_object()) throw ProtocolError("payload of '" + m.kind + "' is not an object");
  return m;
}

/// 4-byte big-endian length followed by the JSON body.
inline std::string encode_frame(const Message& m) {
  const std::string body = message_to_json(m).dump();
  if (body.size() > kMaxFrameBytes) throw ProtocolError("frame too large");
  const auto n = static_cast<std::uint32_t>(body.size());
  std::string out;
  out.reserve(4 + body.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out += body;
  return out;
}

/// Incremental decoder; feed bytes, pop complete messages.
class FrameDecoder {
 public:
  void feed(const char* data, std::size_t n) { buf_.append(data, n); }

  std::optional<Message> next() {
    if (buf_.size() < 4) return std::nullopt;
    const auto* p = reinterpret_cast<const unsigned char*>(buf_.data());
    const std::uint32_t n = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
                            (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
    if (n > kMaxFrameBytes) throw ProtocolError("frame length " + std::to_string(n) + " exceeds limit");
    if (buf_.size() < 4 + static_cast<std::size_t>(n)) return std::nullopt;
    json j;
    try {
      j = json::parse(buf_.begin() + 4, buf_.begin() + 4 + n);
    } catch (const json::parse_error& e) {
      throw ProtocolError(std::string("frame is not JSON: ") + e.what());
    }
    buf_.erase(0, 4 + static_cast<std::size_t>(n));
    return message_from_json(j);
  }

  std::size_t buffered() const { return buf_.size(); }

 private:
  std::string buf_;
};

/// A TCP connection carrying framed messages. Reads are single-reader;
/// writes may come from several threads.
class Connection {
 public:
  explicit Connection(net::Socket s) : sock_(std::move(s)) {}

  void send(const Message& m) {
    const auto frame = encode_frame(m);
    std::lock_guard lk(write_mu_);
    sock_.write_all(frame.data(), frame.size());
  }

  /// Next message, or nullopt if nothing complete arrived within the
  /// timeout. Throws net::ConnectionClosed on EOF.
  std::optional<Message> receive(double timeout_s) {
    const auto deadline = net::deadline_after(timeout_s);
    for (;;) {
      if (auto m = dec_.next()) return m;
      char buf[65536];
      const auto n = sock_.read_some(buf, sizeof buf, net::remaining_ms(deadline));
      if (n == 0 && net::remaining_ms(deadline) == 0) return std::nullopt;
      dec_.feed(buf, n);
    }
  }

  void shutdown() { sock_.shutdown(); }
  void close() { sock_.close(); }

 private:
  net::Socket sock_;
  FrameDecoder dec_;
  std::mutex write_mu_;
};

// ---- expert state blobs ----

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(
      ::crc32(c, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string to_hex(std::string_view bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(bytes.size() * 2, '0');
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto b = static_cast<unsigned char>(bytes[i]);
    out[2 * i] = digits[b >> 4];
    out[2 * i + 1] = digits[b & 0xf];
  }
  return out;
}

inline std::string from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw ProtocolError("odd-length hex string");
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw ProtocolError(std::string("bad hex digit '") + c + "'");
  };
  std::string out(hex.size() / 2, '\0');
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<char>((nib(hex[2 * i]) << 4) | nib(hex[2 * i + 1]));
  return out;
}

struct ExpertStateBlob {
  ExpertId expert = 0;
  int layer = 0;
  std::int64_t version = 0;
  std::string bytes;
  std::uint32_t checksum = 0;

  bool valid() const { return crc32_of(bytes) == checksum; }
  bool operator==(const ExpertStateBlob&) const = default;
};

/// Stand-in for weights and optimizer state, reproducible from its key.
inline ExpertStateBlob make_synthetic_blob(int layer, ExpertId expert, std::int64_t version, std::size_t size) {
  std::seed_seq seq{static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(expert),
                    static_cast<std::uint32_t>(version), static_cast<std::uint32_t>(version >> 32)};
  std::mt19937 rng(seq);
  ExpertStateBlob b;
  b.expert = expert;
  b.layer = layer;
  b.version = version;
  b.bytes.resize(size);
  for (auto& ch : b.bytes) ch = static_cast<char>(rng() & 0xff);
  b.checksum = crc32_of(b.bytes);
  return b;
}

inline void to_json(json& j, const ExpertStateBlob& b) {
  j = json{{"expert", b.expert}, {"layer", b.layer}, {"version", b.version},
           {"bytes", to_hex(b.bytes)}, {"checksum", b.checksum}};
}

inline void from_json(const json& j, ExpertStateBlob& b) {
  try {
    b.expert = j.at("expert").get<ExpertId>();
    b.layer = j.at("layer").get<int>();
    b.version = j.at("version").get<std::int64_t>();
    b.bytes = from_hex(j.at("bytes").get<std::string>());
    b.checksum = j.at("checksum").get<std::uint32_t>();
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed blob: ") + e.what());
  }
}

}  // namespace elasticep::cp
