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
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "elasticep/control_plane/cluster_view.hpp"
#include "elasticep/control_plane/net.hpp"
#include "elasticep/control_plane/protocol.hpp"
#include "elasticep/control_plane/wire.hpp"
#include "elasticep/migration.hpp"

namespace elasticep::cp {

struct ControllerConfig {
  net::Endpoint listen{"127.0.0.1", 0};
  double heartbeat_period_s = 1.0;
  double timeout_multiplier = 2.5;
  int checkpoint_interval_steps = 250;
  int expected_nodes = 1;       // registrations needed before the first plan
  ClusterSpec spec;             // n_nodes is taken from the live set
  int n_layers = 1;
  int n_experts = 4;
  std::vector<std::vector<std::int64_t>> initial_loads;  // per layer; empty means uniform
  std::int64_t blob_bytes = 4096;
  double join_accumulation_s = 1.0;
  double rebalance_interval_s = 0.0;  // 0 disables periodic rebalancing

  double timeout_s() const { return heartbeat_period_s * timeout_multiplier; }

  void validate() const {
    if (!(heartbeat_period_s > 0)) throw ValidationError("controller: heartbeat period must be positive");
    if (!(timeout_multiplier > 1)) throw ValidationError("controller: timeout multiplier must exceed 1");
    if (checkpoint_interval_steps < 1) throw ValidationError("controller: checkpoint interval must be >= 1");
    if (expected_nodes < 1) throw ValidationError("controller: expected nodes must be >= 1");
    if (n_layers < 1 || n_experts < 1) throw ValidationError("controller: need at least one layer and expert");
    if (spec.slots_per_node < 1 || spec.fault_threshold < 0) throw ValidationError("controller: bad cluster spec");
    if (!initial_loads.empty()) {
      if (static_cast<int>(initial_loads.size()) != n_layers)
        throw ValidationError("controller: initial loads must have one row per layer");
      for (const auto& row : initial_loads)
        if (static_cast<int>(row.size()) != n_experts)
          throw ValidationError("controller: initial load rows must have one entry per expert");
    }
    if (blob_bytes < 1) throw ValidationError("controller: blob size must be >= 1");
    if (join_accumulation_s < 0 || rebalance_interval_s < 0) throw ValidationError("controller: negative interval");
  }
};

struct ControllerEvent {
  double time_s = 0.0;
  std::string kind;
  json detail = json::object();
};

inline json event_to_json(const ControllerEvent& e) {
  return json{{"time_s", e.time_s}, {"kind", e.kind}, {"detail", e.detail}};
}

/// Holds the cluster view and plans. All view mutations happen on one loop
/// thread; connection readers only enqueue what they receive.
class Controller {
 public:
  explicit Controller(ControllerConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }
  Controller(const Controller&) = delete;
  Controller& operator=(const Controller&) = delete;
  ~Controller() { stop(); }

  /// Called on the loop thread for every event. Set before start().
  void on_event(std::function<void(const ControllerEvent&)> cb) { callback_ = std::move(cb); }

  void start() {
    listener_ = net::Listener(cfg_.listen);
    t0_ = net::Clock::now();
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    loop_ = std::thread([this] { event_loop(); });
  }

  /// Tells every agent to shut down and stops all threads.
  void stop() {
    if (!running_.exchange(false)) return;
    queue_cv_.notify_all();
    if (loop_.joinable()) loop_.join();
    if (acceptor_.joinable()) acceptor_.join();
    std::map<int, std::shared_ptr<Connection>> conns;
    {
      std::lock_guard lk(conn_mu_);
      conns = conns_;
    }
    for (auto& [id, c] : conns) {
      try {
        c->send(Message{"shutdown", kControllerId, json::object()});
      } catch (const std::exception&) {
      }
      c->shutdown();
    }
    std::vector<std::thread> readers;
    {
      std::lock_guard lk(conn_mu_);
      readers.swap(readers_);
    }
    for (auto& t : readers) t.join();
    listener_.close();
  }

  int port() const { return listener_.port(); }
  net::Endpoint endpoint() const { return listener_.endpoint(); }
  const ControllerConfig& config() const { return cfg_; }

  std::vector<ControllerEvent> events() const {
    std::lock_guard lk(state_mu_);
    return events_;
  }

  ClusterView view() const {
    std::lock_guard lk(state_mu_);
    return view_;
  }

  std::vector<LayerDeployment> deployments() const {
    std::lock_guard lk(state_mu_);
    return current_;
  }

  std::uint64_t plan_version() const {
    std::lock_guard lk(state_mu_);
    return version_;
  }

  /// Waits for an event of `kind` at index >= from; returns its index.
  std::optional<std::size_t> wait_for_event(const std::string& kind, std::size_t from, double timeout_s) const {
    std::unique_lock lk(state_mu_);
    std::optional<std::size_t> hit;
    events_cv_.wait_for(lk, std::chrono::duration<double>(timeout_s), [&] {
      for (std::size_t i = from; i < events_.size(); ++i)
        if (events_[i].kind == kind) {
          hit = i;
          return true;
        }
      return false;
    });
    return hit;
  }

  double now() const { return std::chrono::duration<double>(net::Clock::now() - t0_).count(); }

 private:
  struct Inbound {
    int conn = 0;
    std::optional<Message> msg;  // nullopt: connection closed
  };

  // ---- network side ----

  void accept_loop() {
    while (running_) {
      auto s = listener_.accept(100);
      if (!s) continue;
      auto c = std::make_shared<Connection>(std::move(*s));
      std::lock_guard lk(conn_mu_);
      const int id = next_conn_++;
      conns_[id] = c;
      readers_.emplace_back([this, id, c] { read_loop(id, c); });
    }
  }

  void read_loop(int id, std::shared_ptr<Connection> c) {
    while (running_) {
      try {
        auto m = c->receive(0.1);
        if (m) push(Inbound{id, std::move(m)});
      } catch (const std::exception&) {
        break;
      }
    }
    push(Inbound{id, std::nullopt});
  }

  void push(Inbound in) {
    {
      std::lock_guard lk(queue_mu_);
      queue_.push_back(std::move(in));
    }
    queue_cv_.notify_one();
  }

  void send_to(NodeId node, const Message& m) {
    std::shared_ptr<Connection> c;
    {
      std::lock_guard lk(conn_mu_);
      auto it = node_conn_.find(node);
      if (it == node_conn_.end()) return;
      auto jt = conns_.find(it->second);
      if (jt == conns_.end()) return;
      c = jt->second;
    }
    try {
      c->send(m);
    } catch (const std::exception&) {
      // the heartbeat timeout will notice
    }
  }

  // ---- loop thread ----

  void event_loop() {
    const auto tick = std::chrono::duration<double>(cfg_.heartbeat_period_s / 4);
    while (running_) {
      std::deque<Inbound> batch;
      {
        std::unique_lock lk(queue_mu_);
        queue_cv_.wait_for(lk, tick, [&] { return !queue_.empty() || !running_; });
        batch.swap(queue_);
      }
      for (auto& in : batch) handle(in);
      on_tick();
    }
  }

  void log(const std::string& kind, json detail = json::object()) {
    ControllerEvent ev{now(), kind, std::move(detail)};
    {
      std::lock_guard lk(state_mu_);
      events_.push_back(ev);
    }
    events_cv_.notify_all();
    if (callback_) callback_(ev);
  }

  void handle(const Inbound& in) {
    if (!in.msg) {
      std::lock_guard lk(conn_mu_);
      conns_.erase(in.conn);
      for (auto it = node_conn_.begin(); it != node_conn_.end();)
        it = it->second == in.conn ? node_conn_.erase(it) : std::next(it);
      return;
    }
    const Message& m = *in.msg;
    try {
      if (m.kind == "register") on_register(in.conn, m);
      else if (m.kind == "heartbeat") on_heartbeat(m);
      else if (m.kind == "load_report") on_load_report(m);
      else if (m.kind == "shutdown") on_deregister(m.sender);
    } catch (const std::exception& e) {
      log("protocol_error", {{"sender", m.sender}, {"kind", m.kind}, {"error", e.what()}});
    }
  }

  bool in_plan(NodeId n) const {
    if (current_.empty()) return false;
    const auto& cols = current_.front().column_nodes;
    return std::find(cols.begin(), cols.end(), n) != cols.end();
  }

  void on_register(int conn, const Message& m) {
    const NodeId node = m.payload.at("node").get<NodeId>();
    const auto fetch = net::Endpoint::parse(m.payload.at("fetch").get<std::string>());
    const double t = now();
    bool rejoin = false;
    {
      std::lock_guard lk(state_mu_);
      // a node that comes back before we noticed it die has lost its state
      rejoin = view_.alive(node) && in_plan(node);
      if (rejoin) view_.deregister(node);
      view_.register_node(node, t, fetch);
      if (started_) view_.pending_joins[node] = t;
    }
    {
      std::lock_guard lk(conn_mu_);
      node_conn_[node] = conn;
    }
    if (rejoin) log("failure", {{"nodes", {node}}, {"reason", "re-registered"}});
    log(started_ ? "join" : "register", {{"node", node}, {"fetch", fetch.str()}});
    if (rejoin) reconfigure("failure");
  }

  void on_heartbeat(const Message& m) {
    const double t = now();
    std::lock_guard lk(state_mu_);
    auto it = view_.nodes.find(m.sender);
    if (it == view_.nodes.end() || it->second.status == NodeStatus::dead) return;
    view_.heartbeat(m.sender, t);
    auto& r = it->second;
    const auto& p = m.payload;
    r.applied_version = p.value("applied_version", std::uint64_t{0});
    r.checksums_ok = p.value("checksums_ok", true);
    r.inventory.clear();
    if (p.contains("inventory"))
      for (const auto& [l, es] : p.at("inventory").items()) r.inventory[std::stoi(l)] = es.get<std::vector<ExpertId>>();
    r.fetch_failures = p.value("fetch_failures", std::vector<std::string>{});
    if (r.applied_version == version_ && p.contains("transfers"))
      reports_[m.sender] = p.at("transfers").get<std::vector<TransferRecord>>();
  }

  void on_load_report(const Message& m) {
    std::lock_guard lk(state_mu_);
    auto& mine = node_loads_[m.sender];
    mine.assign(static_cast<std::size_t>(cfg_.n_layers), std::vector<std::int64_t>(cfg_.n_experts, 0));
    for (const auto& [l, counts] : m.payload.at("layers").items()) {
      const int layer = std::stoi(l);
      if (layer < 0 || layer >= cfg_.n_layers) continue;
      for (const auto& [e, c] : counts.items()) {
        const int expert = std::stoi(e);
        if (expert >= 0 && expert < cfg_.n_experts) mine[layer][expert] = c.get<std::int64_t>();
      }
    }
  }

  void on_deregister(NodeId node) {
    {
      std::lock_guard lk(state_mu_);
      if (!view_.alive(node)) return;
      view_.deregister(node);
    }
    log("deregister", {{"node", node}});
    if (started_) reconfigure("failure");
  }

  void on_tick() {
    const double t = now();
    std::set<NodeId> failed;
    {
      std::lock_guard lk(state_mu_);
      failed = detect_failures(view_, t, cfg_.timeout_s());
    }
    if (!failed.empty()) {
      log("failure", {{"nodes", failed}, {"timeout_s", cfg_.timeout_s()}});
      if (started_) reconfigure("failure");
    }
    if (!started_) {
      if (static_cast<int>(live_count()) >= cfg_.expected_nodes) reconfigure("initial");
      return;
    }
    check_progress();
    double first_join = -1;
    {
      std::lock_guard lk(state_mu_);
      for (const auto& [n, at] : view_.pending_joins) first_join = first_join < 0 ? at : std::min(first_join, at);
    }
    if (first_join >= 0 && t - first_join >= cfg_.join_accumulation_s) {
      reconfigure("join");
    } else if (stalled_) {
      // nothing to do until capacity returns
    } else if (cfg_.rebalance_interval_s > 0 && converged_ && t - last_plan_time_ >= cfg_.rebalance_interval_s) {
      reconfigure("rebalance");
    }
  }

  std::size_t live_count() const {
    std::lock_guard lk(state_mu_);
    return view_.live_nodes().size();
  }

  std::int64_t step() const { return static_cast<std::int64_t>(now() / cfg_.heartbeat_period_s); }

  std::vector<std::vector<std::int64_t>> current_loads(const std::vector<NodeId>& live) const {
    std::vector<std::vector<std::int64_t>> sum(static_cast<std::size_t>(cfg_.n_layers),
                                               std::vector<std::int64_t>(cfg_.n_experts, 0));
    bool any = false;
    for (auto n : live) {
      auto it = node_loads_.find(n);
      if (it == node_loads_.end()) continue;
      for (int l = 0; l < cfg_.n_layers; ++l)
        for (int e = 0; e < cfg_.n_experts; ++e) sum[l][e] += it->second[l][e];
      any = true;
    }
    if (any) {
      // an expert nobody reported still needs a replica
      for (auto& row : sum) {
        std::int64_t total = 0;
        for (auto v : row) total += v;
        if (total == 0) std::fill(row.begin(), row.end(), 1);
      }
      return sum;
    }
    if (!cfg_.initial_loads.empty()) return cfg_.initial_loads;
    return std::vector<std::vector<std::int64_t>>(static_cast<std::size_t>(cfg_.n_layers),
                                                  std::vector<std::int64_t>(cfg_.n_experts, 1));
  }

  /// Computes and pushes new plans for the current live set. Falls back to a
  /// fresh plan, flagged for checkpoint reload, when state would be lost.
  void reconfigure(const std::string& reason, bool force_fallback = false,
                   std::vector<std::pair<int, ExpertId>> orphans = {}) {
    std::vector<NodeId> live;
    std::vector<LayerDeployment> base;
    std::vector<std::vector<std::int64_t>> loads;
    std::map<NodeId, net::Endpoint> peers;
    {
      std::lock_guard lk(state_mu_);
      live = view_.live_nodes();
      view_.pending_joins.clear();
      base = base_;
      loads = current_loads(live);
      for (const auto& [id, r] : view_.nodes)
        if (r.status != NodeStatus::dead) peers[id] = r.fetch_endpoint;
    }
    if (live.empty()) {
      log("fatal", {{"reason", "no live nodes"}});
      stalled_ = true;
      return;
    }
    ClusterSpec spec = cfg_.spec;
    spec.n_nodes = static_cast<int>(live.size());
    // nothing was ever confirmed on the nodes, so there is nothing to migrate
    bool fallback = force_fallback || !started_ || base.empty();
    Reconfiguration r;
    try {
      if (!fallback) {
        try {
          r = replan(base, live, loads, spec, cfg_.blob_bytes);
        } catch (const UnrecoverableError& e) {
          fallback = true;
          orphans = e.orphans();
        }
      }
      if (fallback) r = replan({}, live, loads, spec, cfg_.blob_bytes);
    } catch (const InfeasibleError& e) {
      stalled_ = true;
      log("stalled", {{"reason", e.what()}, {"live", live}});
      if (started_ && !stall_signalled_) {
        stall_signalled_ = true;
        log("fallback", {{"reason", "insufficient capacity"}, {"resume_step", checkpoint_step()}});
      }
      return;
    }
    stalled_ = false;
    stall_signalled_ = false;

    PlanPush push;
    push.step = step();
    push.initial = !started_;
    push.fallback = fallback && started_;
    push.resume_step = checkpoint_step();
    push.deployments = r.deployments;
    push.peers = peers;
    std::set<NodeId> alive(live.begin(), live.end());
    for (const auto& t : r.transfers.transfers) {
      PlanTransfer pt{t, {}};
      for (auto o : base[static_cast<std::size_t>(t.layer)].owners(t.expert))
        if (o != t.source && alive.count(o)) pt.alternates.push_back(o);
      push.transfers.push_back(std::move(pt));
    }
    {
      std::lock_guard lk(state_mu_);
      push.version = ++version_;
      current_ = r.deployments;
      view_.plan_versions.assign(static_cast<std::size_t>(cfg_.n_layers), version_);
      converged_ = false;
      reports_.clear();
    }
    if (!started_) base_.clear();
    started_ = true;
    last_plan_time_ = now();
    if (push.fallback) {
      json o = json::array();
      for (const auto& [l, e] : orphans) o.push_back({{"layer", l}, {"expert", e}});
      log("fallback", {{"reason", reason}, {"orphans", o}, {"resume_step", push.resume_step}, {"version", push.version}});
    }
    log(push.initial ? "initial_plan" : (reason == "rebalance" ? "rebalance" : "reconfigure"),
        {{"version", push.version},
         {"reason", reason},
         {"live", live},
         {"transfers", static_cast<std::int64_t>(push.transfers.size())},
         {"transfer_bytes", r.transfers.total_bytes()},
         {"cost", r.cost()}});
    const auto msg = Message{"plan_push", kControllerId, plan_push_to_json(push)};
    for (auto n : live) send_to(n, msg);
  }

  std::int64_t checkpoint_step() const {
    const auto s = step();
    return s - s % cfg_.checkpoint_interval_steps;
  }

  /// Notices convergence of the current version and fetch failures that
  /// need a checkpoint reload.
  void check_progress() {
    bool done = true;
    bool failed = false;
    std::vector<std::string> why;
    json report = json::array();
    std::int64_t bytes = 0;
    double max_ms = 0.0;
    {
      std::lock_guard lk(state_mu_);
      if (converged_ || current_.empty()) return;
      for (auto n : current_.front().column_nodes) {
        auto it = view_.nodes.find(n);
        if (it == view_.nodes.end() || it->second.status == NodeStatus::dead) {
          done = false;
          continue;
        }
        const auto& r = it->second;
        if (r.applied_version != version_) {
          done = false;
          continue;
        }
        if (!r.fetch_failures.empty()) {
          failed = true;
          why.insert(why.end(), r.fetch_failures.begin(), r.fetch_failures.end());
        }
        for (const auto& d : current_) {
          auto inv = r.inventory.find(d.layer());
          const auto want = d.experts_on(n).elements();
          const std::vector<ExpertId> have = inv == r.inventory.end() ? std::vector<ExpertId>{} : inv->second;
          if (have != want || !r.checksums_ok) done = false;
        }
      }
      for (const auto& [n, recs] : reports_)
        for (const auto& rec : recs) {
          report.push_back(rec);
          bytes += rec.ok ? rec.bytes : 0;
          max_ms = std::max(max_ms, rec.wall_ms);
        }
      if (done && !failed) {
        converged_ = true;
        base_ = current_;
      }
    }
    if (failed) {
      log("transfer_failed", {{"version", version_}, {"errors", why}});
      reconfigure("transfer failed", true);
      return;
    }
    if (converged_)
      log("converged", {{"version", version_}, {"transfers", report}, {"bytes", bytes}, {"max_wall_ms", max_ms}});
  }

  ControllerConfig cfg_;
  std::function<void(const ControllerEvent&)> callback_;
  net::Listener listener_;
  net::Clock::time_point t0_ = net::Clock::now();
  std::atomic<bool> running_{false};
  std::thread acceptor_, loop_;

  std::mutex conn_mu_;
  std::map<int, std::shared_ptr<Connection>> conns_;
  std::map<NodeId, int> node_conn_;
  std::vector<std::thread> readers_;
  int next_conn_ = 0;

  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<Inbound> queue_;

  // Written only by the loop thread; the mutex is for outside readers.
  mutable std::mutex state_mu_;
  mutable std::condition_variable events_cv_;
  std::vector<ControllerEvent> events_;
  ClusterView view_;
  std::map<NodeId, std::vector<std::vector<std::int64_t>>> node_loads_;
  std::map<NodeId, std::vector<TransferRecord>> reports_;
  std::vector<LayerDeployment> current_;  // last pushed
  std::vector<LayerDeployment> base_;     // last confirmed on every node
  std::uint64_t version_ = 0;
  bool started_ = false;
  bool converged_ = false;
  bool stalled_ = false;
  bool stall_signalled_ = false;
  double last_plan_time_ = 0.0;
};

}  // namespace elasticep::cp
