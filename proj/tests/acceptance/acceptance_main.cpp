// Copyright 2026 The Pipeflow Authors
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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>

#include <spdlog/spdlog.h>

#include "pipeflow/client.hpp"
#include "pipeflow/planner.hpp"
#include "pipeflow/simulator.hpp"
#include "pipeflow/wire.hpp"
#include "support/cluster.hpp"
#include "support/planner_oracle.hpp"
#include "support/random_messages.hpp"
#include "support/reference_controller.hpp"
#include "support/scenarios.hpp"
#include "support/scripts.hpp"

namespace {

using namespace pipeflow;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------- exactly once

const TaskSpec kRollout{"rollout", {"prompt"}, {"response"}};
const TaskSpec kTrain{"train", {"prompt", "response"}, {}};

Bytes prompt_of(GlobalIndex r) { return to_bytes("p" + std::to_string(r)); }
Bytes response_of(GlobalIndex r) { return Bytes(1 + r % 37, static_cast<std::uint8_t>(r)); }

struct Epoch256 {
  static constexpr std::uint32_t kG = 256;
  static constexpr std::uint32_t kGroups = 4;

  explicit Epoch256(std::mt19937_64& rng) : partition(1 + static_cast<std::uint32_t>(rng() % 4), kG) {
    for (auto& u : make_storage_units(partition)) storage.push_back(u);
    rollout = std::make_shared<Controller>(kRollout, kG);
    train = std::make_shared<Controller>(kTrain, kG);
    for (auto& u : storage) {
      u->register_controller(rollout);
      u->register_controller(train);
    }
    for (GlobalIndex r = 0; r < kG; ++r) tokens[r] = rng() % 500;
  }

  Client client(const TaskSpec& task, std::uint32_t group) {
    return Client(task, group, task.task_name == "rollout" ? rollout : train, storage, partition);
  }

  /// Checks the ledgers and payloads; returns an empty string when clean.
  std::string verify(const std::map<std::string, std::vector<GlobalIndex>>& consumed) const {
    for (const auto& [task, rows] : consumed) {
      std::vector<GlobalIndex> sorted = rows;
      std::sort(sorted.begin(), sorted.end());
      for (GlobalIndex r = 0; r < kG; ++r) {
        if (r >= sorted.size() || sorted[r] != r) return task + ": row coverage broken near " + std::to_string(r);
      }
      if (sorted.size() != kG) return task + ": " + std::to_string(sorted.size()) + " issues for " + std::to_string(kG) + " rows";
    }
    if (rollout->consumed_count() != kG || train->consumed_count() != kG) return "controller ledger incomplete";
    return {};
  }

  PartitionMap partition;
  StorageDirectory storage;
  std::shared_ptr<Controller> rollout, train;
  std::map<GlobalIndex, std::uint64_t> tokens;
};

PackingPolicy random_policy(std::mt19937_64& rng, const std::map<GlobalIndex, std::uint64_t>& tokens) {
  return rng() % 2 ? PackingPolicy::fifo() : PackingPolicy::token_balanced(tokens);
}

/// One seeded interleaving of a loader, four rollout groups and four train
/// groups, executed step by step on this thread.
std::string scheduled_epoch(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Epoch256 e(rng);
  Client loader(TaskSpec{"loader", {}, {"prompt"}}, 0, nullptr, e.storage, e.partition);
  std::vector<GlobalIndex> order(Epoch256::kG);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  struct Group {
    Client client;
    std::optional<Batch> held;
    bool done = false;
  };
  std::vector<Group> groups;
  for (std::uint32_t g = 0; g < Epoch256::kGroups; ++g) groups.push_back({e.client(kRollout, g), std::nullopt});
  for (std::uint32_t g = 0; g < Epoch256::kGroups; ++g) groups.push_back({e.client(kTrain, g), std::nullopt});
  std::map<std::string, std::vector<GlobalIndex>> consumed{{"rollout", {}}, {"train", {}}};

  std::size_t cursor = 0;
  for (std::size_t step = 0; step < 1'000'000; ++step) {
    const bool loader_live = cursor < order.size();
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (!groups[i].done) live.push_back(i);
    }
    if (live.empty() && !loader_live) return e.verify(consumed);
    const auto pick = rng() % (live.size() + (loader_live ? 1 : 0));
    if (pick == live.size()) {
      const auto n = std::min<std::size_t>(order.size() - cursor, 1 + rng() % 16);
      std::vector<GlobalIndex> rows(order.begin() + cursor, order.begin() + cursor + n);
      std::vector<Bytes> values;
      for (auto r : rows) values.push_back(prompt_of(r));
      loader.write_back(rows, "prompt", values);
      cursor += n;
      continue;
    }
    auto& g = groups[live[pick]];
    const auto& task = g.client.task().task_name;
    if (g.held) {
      std::vector<Bytes> out;
      for (auto r : g.held->meta.rows) out.push_back(response_of(r));
      g.client.write_back(g.held->meta.rows, "response", out);
      g.held.reset();
      continue;
    }
    auto polled = g.client.try_next(1 + static_cast<std::uint32_t>(rng() % 8), random_policy(rng, e.tokens));
    if (polled.status == BatchStatus::kEpochExhausted) {
      g.done = true;
    } else if (polled.batch) {
      for (auto r : polled.batch->meta.rows) {
        consumed[task].push_back(r);
        if (polled.batch->cell(r, "prompt") != prompt_of(r)) return "prompt payload mismatch";
        if (task == "train" && polled.batch->cell(r, "response") != response_of(r)) return "response payload mismatch";
      }
      if (task == "rollout") g.held = std::move(polled.batch);
    }
  }
  return "interleaving did not terminate";
}

/// The same workload on real threads with seeded yields.
std::string threaded_epoch(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Epoch256 e(rng);
  std::mutex mu;
  std::map<std::string, std::vector<GlobalIndex>> consumed{{"rollout", {}}, {"train", {}}};
  std::string error;
  std::vector<std::thread> threads;
  for (const auto* task : {&kRollout, &kTrain}) {
    for (std::uint32_t g = 0; g < Epoch256::kGroups; ++g) {
      threads.emplace_back([&, task, g, s = rng()] {
        std::mt19937_64 local(s);
        auto client = e.client(*task, g);
        IteratorOptions opts{1 + static_cast<std::uint32_t>(local() % 8), std::chrono::milliseconds(0),
                             random_policy(local, e.tokens), 3};
        StreamingBatchIterator it(client, opts, [&](auto) {
          if (local() % 2) std::this_thread::yield();
        });
        for (const auto& batch : it) {
          if (task == &kRollout) {
            std::vector<Bytes> out;
            for (auto r : batch.meta.rows) out.push_back(response_of(r));
            client.write_back(batch.meta.rows, "response", out);
          }
          std::lock_guard lock(mu);
          for (auto r : batch.meta.rows) {
            consumed[task->task_name].push_back(r);
            if (batch.cell(r, "prompt") != prompt_of(r)) error = "prompt payload mismatch";
          }
        }
      });
    }
  }
  Client loader(TaskSpec{"loader", {}, {"prompt"}}, 0, nullptr, e.storage, e.partition);
  std::vector<GlobalIndex> order(Epoch256::kG);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (auto r : order) {
    loader.write_back({r}, "prompt", {prompt_of(r)});
    if (rng() % 4 == 0) std::this_thread::yield();
  }
  for (auto& t : threads) t.join();
  return error.empty() ? e.verify(consumed) : error;
}

Outcome exactly_once() {
  const auto t0 = Clock::now();
  int violations = 0;
  std::string first;
  for (std::uint64_t k = 0; k < 1000; ++k) {
    // Every tenth interleaving runs on real threads.
    auto err = k % 10 == 0 ? threaded_epoch(k) : scheduled_epoch(k);
    if (!err.empty()) {
      ++violations;
      if (first.empty()) first = "seed " + std::to_string(k) + ": " + err;
    }
  }
  const double secs = seconds_since(t0);
  return {violations == 0 && secs < 30.0,
          fmt("4 groups/task, G=256, 1000 interleavings, %d violations, %.2fs (limit 30s)%s", violations, secs,
              first.empty() ? "" : ("; " + first).c_str())};
}

// ------------------------------------------------------------------- oracle

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7);
  int mismatches = 0;
  std::size_t requests = 0;
  for (int i = 0; i < 200; ++i) {
    auto script = testing::random_script(rng, 16);
    PackingPolicy policy = PackingPolicy::fifo();
    if (i % 2 == 1) {
      std::map<GlobalIndex, std::uint64_t> counts;
      for (GlobalIndex r = 0; r < script.global_size; ++r) counts[r] = rng() % 100;
      policy = PackingPolicy::token_balanced(counts);
    }
    Controller c({"task", script.required, {}}, script.global_size);
    testing::ReferenceController ref(script.global_size, script.required, policy);
    bool same = true;
    for (const auto& ev : script.events) {
      if (ev.type == testing::ScriptEvent::Type::kNotify) {
        c.on_notify({ev.unit, 0, ev.coordinates});
        ref.notify(ev.coordinates);
      } else {
        ++requests;
        auto got = c.request_batch({"task", ev.ordinal}, ev.size, policy);
        auto want = ref.request(ev.ordinal, ev.size);
        if (got.status != want.status || got.meta.rows != want.rows) same = false;
      }
    }
    if (!same) ++mismatches;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0,
          fmt("200 scripts (G<=16, %zu requests), %d mismatches, %.2fs (limit 10s)", requests, mismatches, secs)};
}

// ---------------------------------------------------------------- staleness

constexpr sim::Mode kModes[] = {sim::Mode::kSequential, sim::Mode::kStreamed, sim::Mode::kStreamedAsync,
                                sim::Mode::kStreamedAsyncStaggered};

Outcome staleness() {
  std::mt19937_64 rng(11);
  int runs = 0, violations = 0;
  std::uint64_t worst[2] = {0, 0};
  std::string first;
  for (int i = 0; i < 100; ++i) {
    auto base = testing::random_scenario(rng);
    for (auto mode : kModes) {
      for (std::uint64_t s : {0u, 1u}) {
        auto sc = base;
        sc.mode = mode;
        sc.staleness = s;
        // Staggered propagation needs a second rollout instance to stagger against.
        if (mode == sim::Mode::kStreamedAsyncStaggered) sc.num_rollout_instances = std::max(2u, sc.num_rollout_instances);
        const auto r = sim::run(sc);
        ++runs;
        std::uint64_t gap = 0;
        for (const auto& [g, n] : r.staleness_histogram) {
          if (n > 0) gap = std::max(gap, g);
        }
        worst[s] = std::max(worst[s], std::max(gap, r.max_staleness));
        const bool bad = !r.violations.empty() || r.max_staleness > s || gap > s || r.samples_dropped > 0 ||
                         r.iterations_completed != sc.iterations;
        if (bad) {
          ++violations;
          if (first.empty()) {
            first = fmt("scenario %d %s s=%llu: max=%llu", i, std::string(sim::mode_name(mode)).c_str(),
                        static_cast<unsigned long long>(s), static_cast<unsigned long long>(r.max_staleness));
            if (!r.violations.empty()) first += " " + r.violations.front();
          }
        }
      }
    }
  }
  return {violations == 0,
          fmt("%d runs (100 scenarios x 4 modes x s in {0,1}), max gap s=0: %llu, s=1: %llu, %d violations%s", runs,
              static_cast<unsigned long long>(worst[0]), static_cast<unsigned long long>(worst[1]), violations,
              first.empty() ? "" : ("; " + first).c_str())};
}

// ----------------------------------------------------------------- ablation

Outcome ablation() {
  auto throughput = [](sim::Scenario sc, sim::Mode m) {
    sc.mode = m;
    return sim::run(sc).samples_per_second;
  };
  const auto d = sim::default_scenario();
  const double seq = throughput(d, sim::Mode::kSequential);
  const double str = throughput(d, sim::Mode::kStreamed);
  const double asy = throughput(d, sim::Mode::kStreamedAsync);
  const bool default_ok = str > 1.3 * seq && asy > 1.1 * str;

  std::mt19937_64 rng(13);
  int ordered = 0;
  for (int i = 0; i < 100; ++i) {
    const auto sc = testing::random_scenario(rng);
    const double a = throughput(sc, sim::Mode::kSequential);
    const double b = throughput(sc, sim::Mode::kStreamed);
    const double c = throughput(sc, sim::Mode::kStreamedAsync);
    if (a < b && b < c) ++ordered;
  }
  return {default_ok && ordered >= 95,
          fmt("default: streamed/sequential %.3f (>1.3), async/streamed %.3f (>1.1); ordering holds on %d/100 (>=95)",
              str / seq, asy / str, ordered)};
}

// ------------------------------------------------------------------- bubble

Outcome bubble() {
  sim::Scenario sc;
  sc.mode = sim::Mode::kStreamedAsync;
  sc.global_batch = 64;
  sc.num_rollout_instances = 4;
  sc.num_train_instances = 4;
  sc.response_length = sim::LengthDist::fixed(100);
  sc.per_token_cost = 1'000;
  sc.per_sample_train_cost = 100'000;
  sc.weight_transfer = 20'000;
  sc.h2d_swap = 1'000;
  sc.iterations = 10;
  const auto r10 = sim::run(sc);
  sc.iterations = 100;
  const auto r100 = sim::run(sc);
  bool ok = r100.violations.empty();
  std::string detail;
  for (const auto* cls : {"rollout", "train"}) {
    const double b10 = r10.bubble_ratio.at(cls), b100 = r100.bubble_ratio.at(cls);
    ok = ok && b100 < 0.05 && b100 < b10;
    detail += fmt("%s%s N=10 %.4f -> N=100 %.4f", detail.empty() ? "" : "; ", cls, b10, b100);
  }
  return {ok, detail + " (N=100 < 0.05, decreasing)"};
}

// -------------------------------------------------------------- closed form

Outcome closed_form() {
  int checked = 0, off = 0;
  Nanos worst = 0;
  for (std::uint32_t n : {1u, 5u, 20u}) {
    for (auto [g, len, tok, smp] : {std::tuple{16u, 100u, Nanos{1000}, Nanos{50'000}},
                                    std::tuple{64u, 7u, Nanos{3}, Nanos{1}},
                                    std::tuple{8u, 300u, Nanos{250}, Nanos{2'000'000}}}) {
      sim::Scenario sc;
      sc.mode = sim::Mode::kSequential;
      sc.global_batch = g;
      sc.num_rollout_instances = 1;
      sc.num_train_instances = 1;
      sc.response_length = sim::LengthDist::fixed(len);
      sc.per_token_cost = tok;
      sc.per_sample_train_cost = smp;
      sc.weight_transfer = 0;
      sc.h2d_swap = 0;
      sc.iterations = n;
      const Nanos t_gen = static_cast<Nanos>(g) * len * tok;
      const Nanos t_train = static_cast<Nanos>(g) * smp;
      const auto r = sim::run(sc);
      const Nanos diff = std::abs(r.end_to_end_time - static_cast<Nanos>(n) * (t_gen + t_train));
      worst = std::max(worst, diff);
      ++checked;
      if (diff > 1 || !r.violations.empty()) ++off;
    }
  }
  return {off == 0, fmt("%d configurations, worst |e2e - N(Tgen+Ttrain)| = %lld ns (tolerance 1)", checked,
                        static_cast<long long>(worst))};
}

// ------------------------------------------------------------------- varlen

Outcome varlen() {
  std::mt19937_64 rng(17);
  int failures = 0, padded_checks = 0;
  std::uint64_t payload_total = 0, frame_total = 0, padded_total = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto rows = 1 + rng() % 32;
    const std::vector<ColumnId> columns = rng() % 2 ? std::vector<ColumnId>{"response"}
                                                    : std::vector<ColumnId>{"prompt", "response"};
    const bool uniform = i % 10 == 0;
    const std::size_t fixed_len = rng() % 64;
    Batch batch;
    batch.meta.epoch = rng() % 5;
    batch.meta.task_name = "train";
    batch.meta.issued_to = {"train", static_cast<std::uint32_t>(rng() % 4)};
    batch.meta.columns = columns;
    std::size_t sum = 0, longest = 0;
    for (GlobalIndex r = 0; r < rows; ++r) {
      batch.meta.rows.push_back(r);
      batch.meta.locations[r] = r % 3;
      for (const auto& c : columns) {
        Bytes v(uniform ? fixed_len : rng() % 512);
        for (auto& x : v) x = static_cast<std::uint8_t>(rng());
        sum += v.size();
        longest = std::max(longest, v.size());
        batch.cells.push_back({r, c, std::move(v)});
      }
    }
    const auto env = encode_varlen(batch.cells);
    bool ok = decode_varlen(env) == batch.cells && env.concatenated.size() == sum;

    // Frame bytes = payload + metadata, where metadata does not depend on the payload.
    const auto frame = wire::encode(wire::Fanout{batch.meta, env});
    auto empty = env;
    empty.concatenated.clear();
    const std::size_t metadata = wire::encode(wire::Fanout{batch.meta, empty}).size();
    ok = ok && frame.size() == sum + metadata && fanout_frame_size(batch) == frame.size();
    ok = ok && std::get<wire::Fanout>(wire::decode(frame)).envelope == env;

    const std::size_t padded = batch.cells.size() * longest + metadata;
    const bool non_uniform = std::any_of(batch.cells.begin(), batch.cells.end(),
                                         [&](const CellEntry& c) { return c.value.size() != longest; });
    if (non_uniform) {
      ++padded_checks;
      ok = ok && frame.size() < padded;
    } else {
      ok = ok && frame.size() == padded;
    }
    payload_total += sum;
    frame_total += frame.size();
    padded_total += padded;
    if (!ok) ++failures;
  }
  return {failures == 0,
          fmt("1000 batches, %d failures; %d non-uniform all below padded size; bytes sent %llu vs padded %llu "
              "(payload %llu)",
              failures, padded_checks, static_cast<unsigned long long>(frame_total),
              static_cast<unsigned long long>(padded_total), static_cast<unsigned long long>(payload_total))};
}

// ------------------------------------------------------------------ planner

Outcome planner() {
  std::mt19937_64 rng(19);
  int mismatches = 0, evaluated = 0;
  std::string first;
  for (int i = 0; i < 50; ++i) {
    auto req = testing::random_plan_request(rng);
    req.keep_k = 0;
    const auto got = plan::plan(req);
    const auto want = testing::brute_force_plan(req);
    evaluated += static_cast<int>(got.evaluated.size());
    if (got.allocation.counts != want.counts || got.report.end_to_end_time != want.end_to_end_time) {
      ++mismatches;
      plan::Allocation best{got.allocation.tasks, want.counts};
      if (first.empty()) first = "draw " + std::to_string(i) + ": " + got.allocation.to_string() + " vs " + best.to_string();
    }
  }
  return {mismatches == 0, fmt("50 draws (D<=8, 2-3 tasks, keep_k=all, %d simulations), %d mismatches%s", evaluated,
                               mismatches, first.empty() ? "" : ("; " + first).c_str())};
}

// --------------------------------------------------------------------- fuzz

Outcome protocol_fuzz() {
  testing::LocalCluster cluster(16, 2, {testing::rollout_task(), testing::train_task()});
  std::vector<net::Endpoint> targets = cluster.config.storage_units;
  for (const auto& t : cluster.config.tasks) targets.push_back(t.controller);
  targets.push_back(cluster.config.coordinator);

  testing::MessageGenerator gen(23);
  std::vector<std::optional<net::Connection>> conns(targets.size());
  int valid = 0, codec_failures = 0, missing_replies = 0, closes = 0;
  std::map<std::string, int> replies;
  for (int i = 0; i < 10'000; ++i) {
    const auto target = gen.below(targets.size());
    auto& conn = conns[target];
    const auto frame = gen.frame();
    if (frame.cls == testing::MessageGenerator::FrameClass::kValid) {
      ++valid;
      const auto m = wire::decode(frame.bytes);
      if (wire::encode(m) != frame.bytes || wire::decode(wire::encode(m)) != m) ++codec_failures;
    }
    try {
      if (!conn) conn = net::Connection::connect(targets[target]);
      conn->send_bytes(frame.bytes);
      auto reply = conn->recv_frame();
      if (!reply) {
        ++missing_replies;
        conn.reset();
        continue;
      }
      const auto msg = wire::decode(*reply);
      ++replies[std::string(wire::kind_name(wire::kind_of(msg)))];
      if (frame.cls == testing::MessageGenerator::FrameClass::kBadLength) {
        if (!conn->recv_frame()) ++closes;
        conn.reset();
      }
    } catch (const Error&) {
      ++missing_replies;
      conn.reset();
    }
  }
  int alive = 0;
  for (const auto& ep : targets) {
    try {
      net::Channel ch(ep);
      ch.call(wire::Ack{});
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kProtocol) ++alive;
    }
  }
  std::string kinds;
  for (const auto& [k, n] : replies) kinds += (kinds.empty() ? "" : ",") + k + "=" + std::to_string(n);
  const bool ok = codec_failures == 0 && missing_replies == 0 && alive == static_cast<int>(targets.size());
  return {ok, fmt("10000 frames (%d valid), %d codec mismatches, %d missing replies, %d clean closes, %d/%zu servers "
                  "alive; replies %s",
                  valid, codec_failures, missing_replies, closes, alive, targets.size(), kinds.c_str())};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const std::pair<const char*, std::function<Outcome()>> checks[] = {
      {"exactly_once_consumption", exactly_once},
      {"scheduling_oracle_equivalence", oracle_equivalence},
      {"staleness_bound", staleness},
      {"ablation_ordering", ablation},
      {"bubble_elimination", bubble},
      {"sequential_closed_form", closed_form},
      {"varlen_round_trip_no_padding", varlen},
      {"planner_exhaustive_equivalence", planner},
      {"protocol_fuzz", protocol_fuzz},
  };
  int failed = 0;
  for (const auto& [name, check] : checks) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
