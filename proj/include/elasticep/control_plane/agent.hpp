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

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "elasticep/control_plane/net.hpp"
#include "elasticep/control_plane/protocol.hpp"
#include "elasticep/control_plane/wire.hpp"

namespace elasticep::cp {

struct AgentConfig {
  net::Endpoint controller;
  NodeId node = 0;
  std::size_t blob_size = 4096;
  double heartbeat_period_s = 1.0;
  int load_report_every = 5;  // heartbeats between load reports
  std::string listen_host = "127.0.0.1";
  double io_timeout_s = 5.0;
  double connect_timeout_s = 10.0;  // keep retrying the controller this long
  bool corrupt_serving = false;     // fault injection: serve blobs with a flipped byte
  std::vector<std::int64_t> synthetic_load;  // per-expert tokens to report; empty means 100 each

  void validate() const {
    if (node < 0) throw ValidationError("agent: node id must be >= 0");
    if (blob_size < 1) throw ValidationError("agent: blob size must be >= 1");
    if (!(heartbeat_period_s > 0)) throw ValidationError("agent: heartbeat period must be positive");
    if (load_report_every < 1) throw ValidationError("agent: load_report_every must be >= 1");
    for (auto v : synthetic_load)
      if (v < 0) throw ValidationError("agent: synthetic load must be non-negative");
  }
};

/// Node-side process: heartbeats, plan application, and a fetch server for
/// expert state. Heartbeats and fetch serving run on their own threads; plans
/// are applied on the connection reader in arrival order.
class Agent {
 public:
  explicit Agent(AgentConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;
  ~Agent() { crash(); }

  /// Opens the fetch server only; start() calls this too.
  void start_serving() {
    if (server_.joinable()) return;
    listener_ = net::Listener(net::Endpoint{cfg_.listen_host, 0});
    running_ = true;
    server_ = std::thread([this] { serve_loop(); });
  }

  void start() {
    start_serving();
    const auto deadline = net::deadline_after(cfg_.connect_timeout_s);
    for (;;) {
      try {
        conn_ = std::make_unique<Connection>(net::connect_to(cfg_.controller, cfg_.io_timeout_s));
        break;
      } catch (const net::NetError&) {
        if (net::remaining_ms(deadline) == 0) throw;
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
      }
    }
    conn_->send(Message{"register", cfg_.node,
                        json{{"node", cfg_.node}, {"fetch", net::Endpoint{cfg_.listen_host, listener_.port()}.str()}}});
    heartbeat_ = std::thread([this] { heartbeat_loop(); });
    reader_ = std::thread([this] { reader_loop(); });
  }

  /// Deregisters, then tears down.
  void stop() {
    if (running_ && conn_) {
      try {
        conn_->send(Message{"shutdown", cfg_.node, json{{"node", cfg_.node}}});
      } catch (const std::exception&) {
      }
    }
    crash();
  }

  /// Tears down without telling anyone, as if the process died.
  void crash() {
    finish("stopped");
    if (conn_) conn_->shutdown();
    for (auto* t : {&server_, &heartbeat_, &reader_})
      if (t->joinable()) t->join();
    listener_.close();
    std::vector<std::thread> handlers;
    {
      std::lock_guard lk(handlers_mu_);
      handlers.swap(handlers_);
    }
    for (auto& t : handlers) t.join();
  }

  /// Blocks until the agent stops for any reason; returns that reason.
  std::string wait() {
    std::unique_lock lk(done_mu_);
    done_cv_.wait(lk, [&] { return !running_; });
    return exit_reason_;
  }

  bool running() const { return running_; }
  NodeId node() const { return cfg_.node; }
  net::Endpoint fetch_endpoint() const { return net::Endpoint{cfg_.listen_host, listener_.port()}; }

  std::uint64_t applied_version() const {
    std::lock_guard lk(state_mu_);
    return applied_version_;
  }

  BlobStore store() const {
    std::lock_guard lk(state_mu_);
    return store_;
  }

  std::vector<TransferRecord> last_transfers() const {
    std::lock_guard lk(state_mu_);
    return last_records_;
  }

  /// Applies a plan. Older or equal versions are ignored; returns whether it
  /// was applied.
  bool apply_plan(const PlanPush& p) {
    {
      std::lock_guard lk(state_mu_);
      if (p.version <= applied_version_) return false;
    }
    BlobStore current;
    std::map<BlobKey, std::int64_t> seen;
    {
      std::lock_guard lk(state_mu_);
      current = store_;
      seen = max_seen_;
    }
    BlobStore next;
    std::vector<PlanTransfer> mine;
    std::vector<std::string> failures;
    std::set<BlobKey> listed;
    for (const auto& pt : p.transfers)
      if (pt.transfer.destination == cfg_.node) listed.insert({pt.transfer.layer, pt.transfer.expert});
    for (const auto& d : p.deployments) {
      for (auto e : d.experts_on(cfg_.node).elements()) {
        const BlobKey key{d.layer(), e};
        if (p.initial || p.fallback) {
          const auto v = std::max(p.step, seen.count(key) ? seen[key] : std::int64_t{0});
          next[key] = make_synthetic_blob(d.layer(), e, v, cfg_.blob_size);
        } else if (auto it = current.find(key); it != current.end()) {
          next[key] = it->second;
        } else if (!listed.count(key)) {
          failures.push_back("layer " + std::to_string(key.first) + " expert " + std::to_string(e) +
                             ": missing and no source scheduled");
        }
      }
    }
    if (!p.initial && !p.fallback) {
      for (const auto& pt : p.transfers) {
        const BlobKey key{pt.transfer.layer, pt.transfer.expert};
        if (pt.transfer.destination != cfg_.node || next.count(key)) continue;
        mine.push_back(pt);
      }
    }
    auto rep = execute_transfers(mine, cfg_.node, p.peers, cfg_.io_timeout_s, seen);
    for (auto& [k, b] : rep.received) next[k] = std::move(b);
    for (const auto& r : rep.records)
      if (!r.ok)
        failures.push_back("layer " + std::to_string(r.layer) + " expert " + std::to_string(r.expert) + ": " +
                           r.error);
    std::lock_guard lk(state_mu_);
    if (p.version <= applied_version_) return false;
    previous_ = std::move(store_);
    store_ = std::move(next);
    for (const auto& [k, b] : store_) max_seen_[k] = std::max(max_seen_[k], b.version);
    applied_version_ = p.version;
    for (const auto& d : p.deployments) layer_experts_[d.layer()] = d.plan.n_experts();
    last_records_ = std::move(rep.records);
    fetch_failures_ = std::move(failures);
    return true;
  }

  json heartbeat_payload() const {
    std::lock_guard lk(state_mu_);
    json inv = json::object();
    bool ok = true;
    for (const auto& [k, b] : store_) {
      inv[std::to_string(k.first)].push_back(k.second);
      ok = ok && b.valid();
    }
    return json{{"applied_version", applied_version_}, {"inventory", inv},        {"checksums_ok", ok},
                {"fetch_failures", fetch_failures_},  {"transfers", last_records_}};
  }

  /// Gating demand this node saw in the last window, per layer and expert.
  /// Synthetic: `synthetic_load` if given, otherwise 100 tokens per expert.
  json load_payload() const {
    std::lock_guard lk(state_mu_);
    json layers = json::object();
    for (const auto& [l, n_experts] : layer_experts_) {
      json counts = json::object();
      for (int e = 0; e < n_experts; ++e) {
        const auto c = static_cast<std::size_t>(e) < cfg_.synthetic_load.size() ? cfg_.synthetic_load[e] : 100;
        counts[std::to_string(e)] = c;
      }
      layers[std::to_string(l)] = counts;
    }
    return json{{"layers", layers}};
  }

 private:
  void finish(const std::string& reason) {
    {
      std::lock_guard lk(done_mu_);
      if (!running_ && !exit_reason_.empty()) return;
      running_ = false;
      if (exit_reason_.empty()) exit_reason_ = reason;
    }
    done_cv_.notify_all();
  }

  void heartbeat_loop() {
    int beats = 0;
    while (running_) {
      try {
        conn_->send(Message{"heartbeat", cfg_.node, heartbeat_payload()});
        if (++beats % cfg_.load_report_every == 0) conn_->send(Message{"load_report", cfg_.node, load_payload()});
      } catch (const std::exception& e) {
        finish(std::string("lost controller: ") + e.what());
        return;
      }
      std::unique_lock lk(done_mu_);
      done_cv_.wait_for(lk, std::chrono::duration<double>(cfg_.heartbeat_period_s), [&] { return !running_; });
    }
  }

  void reader_loop() {
    while (running_) {
      try {
        auto m = conn_->receive(0.1);
        if (!m) continue;
        if (m->kind == "plan_push") {
          apply_plan(plan_push_from_json(m->payload));
          // report right away rather than waiting for the next beat
          conn_->send(Message{"heartbeat", cfg_.node, heartbeat_payload()});
        } else if (m->kind == "shutdown") {
          finish("controller requested shutdown");
        }
      } catch (const net::ConnectionClosed&) {
        finish("controller closed the connection");
      } catch (const std::exception& e) {
        finish(std::string("controller link failed: ") + e.what());
      }
    }
  }

  void serve_loop() {
    while (running_) {
      auto s = listener_.accept(100);
      if (!s) continue;
      auto conn = std::make_shared<Connection>(std::move(*s));
      std::lock_guard lk(handlers_mu_);
      handlers_.emplace_back([this, conn] { serve_one(*conn); });
    }
  }

  void serve_one(Connection& conn) {
    try {
      auto m = conn.receive(cfg_.io_timeout_s);
      if (!m || m->kind != "fetch_request") return;
      const BlobKey key{m->payload.at("layer").get<int>(), m->payload.at("expert").get<ExpertId>()};
      std::optional<ExpertStateBlob> blob;
      {
        std::lock_guard lk(state_mu_);
        if (auto it = store_.find(key); it != store_.end()) blob = it->second;
        else if (auto jt = previous_.find(key); jt != previous_.end()) blob = jt->second;
      }
      json reply;
      if (!blob) {
        reply = json{{"ok", false}, {"error", "not held"}};
      } else {
        if (cfg_.corrupt_serving && !blob->bytes.empty()) blob->bytes[0] = static_cast<char>(~blob->bytes[0]);
        reply = json{{"ok", true}, {"blob", *blob}};
      }
      conn.send(Message{"fetch_reply", cfg_.node, reply});
    } catch (const std::exception&) {
      // the requester will retry elsewhere
    }
  }

  AgentConfig cfg_;
  net::Listener listener_;
  std::unique_ptr<Connection> conn_;
  std::thread server_, heartbeat_, reader_;
  std::mutex handlers_mu_;
  std::vector<std::thread> handlers_;

  std::atomic<bool> running_{false};
  std::mutex done_mu_;
  std::condition_variable done_cv_;
  std::string exit_reason_;

  mutable std::mutex state_mu_;
  BlobStore store_, previous_;
  std::map<BlobKey, std::int64_t> max_seen_;
  std::uint64_t applied_version_ = 0;
  std::map<int, int> layer_experts_;
  std::vector<TransferRecord> last_records_;
  std::vector<std::string> fetch_failures_;
};

}  // namespace elasticep::cp
