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

#include <chrono>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "elasticep/control_plane/net.hpp"
#include "elasticep/control_plane/wire.hpp"
#include "elasticep/migration.hpp"

namespace elasticep::cp {

/// A scheduled fetch plus the other owners to try if the source fails.
struct PlanTransfer {
  Transfer transfer;
  std::vector<NodeId> alternates;

  bool operator==(const PlanTransfer&) const = default;
};

/// Payload of plan_push.
struct PlanPush {
  std::uint64_t version = 0;
  std::int64_t step = 0;
  bool initial = false;
  bool fallback = false;
  std::int64_t resume_step = 0;  // checkpoint to reload from, when fallback
  std::vector<LayerDeployment> deployments;
  std::vector<PlanTransfer> transfers;
  std::map<NodeId, net::Endpoint> peers;

  bool operator==(const PlanPush&) const = default;
};

inline json plan_push_to_json(const PlanPush& p) {
  json transfers = json::array();
  for (const auto& t : p.transfers) {
    json tj = t.transfer;
    tj["alt"] = t.alternates;
    transfers.push_back(std::move(tj));
  }
  json peers = json::object();
  for (const auto& [n, ep] : p.peers) peers[std::to_string(n)] = ep.str();
  return json{{"version", p.version},   {"step", p.step},
              {"initial", p.initial},   {"fallback", p.fallback},
              {"resume_step", p.resume_step}, {"deployments", p.deployments},
              {"transfers", transfers}, {"peers", peers}};
}

inline PlanPush plan_push_from_json(const json& j) {
  PlanPush p;
  try {
    p.version = j.at("version").get<std::uint64_t>();
    p.step = j.value("step", std::int64_t{0});
    p.initial = j.value("initial", false);
    p.fallback = j.value("fallback", false);
    p.resume_step = j.value("resume_step", std::int64_t{0});
    p.deployments = j.at("deployments").get<std::vector<LayerDeployment>>();
    for (const auto& tj : j.at("transfers")) {
      PlanTransfer t;
      t.transfer = tj.get<Transfer>();
      t.alternates = tj.value("alt", std::vector<NodeId>{});
      p.transfers.push_back(std::move(t));
    }
    for (const auto& [k, v] : j.at("peers").items()) p.peers[std::stoi(k)] = net::Endpoint::parse(v.get<std::string>());
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed plan_push: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ProtocolError("malformed plan_push: bad peer id");
  }
  for (const auto& d : p.deployments) d.validate();
  return p;
}

/// One completed (or abandoned) fetch.
struct TransferRecord {
  int layer = 0;
  ExpertId expert = 0;
  NodeId source = -1;  // owner that finally served it, -1 if none did
  NodeId destination = 0;
  std::int64_t bytes = 0;
  double wall_ms = 0.0;
  int attempts = 0;
  bool ok = false;
  std::string error;
};

inline void to_json(json& j, const TransferRecord& r) {
  j = json{{"layer", r.layer}, {"expert", r.expert},     {"src", r.source},   {"dst", r.destination},
           {"bytes", r.bytes}, {"wall_ms", r.wall_ms}, {"attempts", r.attempts}, {"ok", r.ok}};
  if (!r.error.empty()) j["error"] = r.error;
}

inline void from_json(const json& j, TransferRecord& r) {
  r.layer = j.at("layer").get<int>();
  r.expert = j.at("expert").get<ExpertId>();
  r.source = j.at("src").get<NodeId>();
  r.destination = j.at("dst").get<NodeId>();
  r.bytes = j.at("bytes").get<std::int64_t>();
  r.wall_ms = j.at("wall_ms").get<double>();
  r.attempts = j.at("attempts").get<int>();
  r.ok = j.at("ok").get<bool>();
  r.error = j.value("error", std::string{});
}

using BlobKey = std::pair<int, ExpertId>;  // (layer, expert)
using BlobStore = std::map<BlobKey, ExpertStateBlob>;

/// Asks a peer's fetch server for one blob. Throws on network or protocol
/// trouble, or if the peer does not hold it. The checksum is not checked here.
inline ExpertStateBlob fetch_blob(const net::Endpoint& peer, NodeId self, int layer, ExpertId expert,
                                  double timeout_s) {
  Connection conn(net::connect_to(peer, timeout_s));
  conn.send(Message{"fetch_request", self, json{{"layer", layer}, {"expert", expert}}});
  auto reply = conn.receive(timeout_s);
  if (!reply) throw net::NetError("fetch from " + peer.str() + " timed out");
  if (reply->kind != "fetch_reply") throw ProtocolError("expected fetch_reply, got " + reply->kind);
  if (!reply->payload.value("ok", false))
    throw ProtocolError("peer refused: " + reply->payload.value("error", std::string("unknown")));
  auto blob = reply->payload.at("blob").get<ExpertStateBlob>();
  if (blob.layer != layer || blob.expert != expert) throw ProtocolError("peer sent the wrong blob");
  return blob;
}

struct TransferReport {
  std::vector<TransferRecord> records;
  BlobStore received;

  bool ok() const {
    for (const auto& r : records)
      if (!r.ok) return false;
    return true;
  }
  std::int64_t total_bytes() const {
    std::int64_t s = 0;
    for (const auto& r : records) s += r.ok ? r.bytes : 0;
    return s;
  }
};

/// Runs the given fetches on behalf of `self`: source first, then the
/// alternates in order. A blob is accepted only if its checksum verifies and
/// its version is not older than `min_version` for that key.
inline TransferReport execute_transfers(std::span<const PlanTransfer> transfers, NodeId self,
                                        const std::map<NodeId, net::Endpoint>& peers, double timeout_s,
                                        const std::map<BlobKey, std::int64_t>& min_version = {}) {
  TransferReport rep;
  for (const auto& pt : transfers) {
    const auto& t = pt.transfer;
    TransferRecord rec{t.layer, t.expert, -1, t.destination, 0, 0.0, 0, false, {}};
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<NodeId> candidates{t.source};
    candidates.insert(candidates.end(), pt.alternates.begin(), pt.alternates.end());
    std::string errors;
    for (auto src : candidates) {
      ++rec.attempts;
      try {
        auto it = peers.find(src);
        if (it == peers.end()) throw net::NetError("no address for node " + std::to_string(src));
        auto blob = fetch_blob(it->second, self, t.layer, t.expert, timeout_s);
        if (!blob.valid()) throw ProtocolError("checksum mismatch");
        auto mv = min_version.find({t.layer, t.expert});
        if (mv != min_version.end() && blob.version < mv->second)
          throw ProtocolError("stale version " + std::to_string(blob.version));
        rec.source = src;
        rec.bytes = static_cast<std::int64_t>(blob.bytes.size());
        rec.ok = true;
        rep.received[{t.layer, t.expert}] = std::move(blob);
        break;
      } catch (const std::exception& e) {
        if (!errors.empty()) errors += "; ";
        errors += "node " + std::to_string(src) + ": " + e.what();
      }
    }
    if (!rec.ok) rec.error = errors;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    rep.records.push_back(std::move(rec));
  }
  return rep;
}

}  // namespace elasticep::cp
