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

#include "pipeflow/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <queue>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pipeflow/client.hpp"
#include "pipeflow/coordinator.hpp"
#include "pipeflow/data_plane.hpp"

namespace pipeflow::sim {

namespace {

constexpr const char* kPrompt = "prompt";
constexpr const char* kResponse = "response";

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Bytes encode_sample(WeightVersion version, std::uint32_t tokens) {
  Bytes out(12);
  std::memcpy(out.data(), &version.value, 8);
  std::memcpy(out.data() + 8, &tokens, 4);
  return out;
}

WeightVersion decode_version(const Bytes& b) {
  if (b.size() != 12) throw Error(ErrorCode::kSizeMismatch, "malformed response payload");
  WeightVersion v;
  std::memcpy(&v.value, b.data(), 8);
  return v;
}

enum class Role : std::uint8_t { kRollout, kStage, kTrain };

struct Instance {
  Role role = Role::kRollout;
  std::uint32_t index = 0;  // within its role (and stage)
  std::uint32_t stage = 0;
  std::string name;
  std::string cls;
  bool idle = false;
  std::uint64_t token = 0;  // invalidates superseded wake-ups
};

struct Slot {
  StorageDirectory storage;
  std::vector<std::shared_ptr<StorageUnit>> units;
  std::shared_ptr<Controller> rollout;
  std::vector<std::shared_ptr<Controller>> stages;
  std::shared_ptr<Controller> train;
  std::unique_ptr<Client> loader;
  std::vector<Client> rollout_clients;
  std::vector<std::vector<Client>> stage_clients;
  std::vector<Client> train_clients;
  Epoch epoch = 0;
  bool constructed = false;
  bool rollout_exhausted = false;
  std::vector<bool> stage_exhausted;
  std::uint32_t trained = 0;
  std::vector<std::uint32_t> lengths;
};

struct Event {
  Nanos time;
  std::uint64_t seq;
  std::function<void()> fn;
};
struct Later {
  bool operator()(const Event& a, const Event& b) const {
    return std::tie(a.time, a.seq) > std::tie(b.time, b.seq);
  }
};

class Simulation {
 public:
  explicit Simulation(const Scenario& sc)
      : sc_(sc),
        s_(sc.effective_staleness()),
        slots_(static_cast<std::size_t>(s_ + 1)),
        partition_(sc.num_storage_units, sc.global_batch),
        coord_(sync() ? TransferMode::kSynchronous : TransferMode::kAsynchronous,
               sc.num_rollout_instances),
        tracker_(StalenessBound{s_}) {
    rollout_task_ = {"rollout", {kPrompt}, {kResponse}};
    std::vector<ColumnId> train_in{kPrompt, kResponse};
    for (const auto& st : sc.stages) {
      stage_tasks_.push_back({st.name, {kPrompt, kResponse}, {st.name}});
      train_in.push_back(st.name);
    }
    train_task_ = {"train", train_in, {}};
    loader_task_ = {"loader", {}, {kPrompt}};

    for (std::uint32_t i = 0; i < sc.num_rollout_instances; ++i) add_instance(Role::kRollout, i, 0);
    for (std::uint32_t k = 0; k < sc.stages.size(); ++k) {
      for (std::uint32_t i = 0; i < sc.stages[k].instances; ++i) add_instance(Role::kStage, i, k);
    }
    for (std::uint32_t i = 0; i < sc.num_train_instances; ++i) add_instance(Role::kTrain, i, 0);

    report_.version_stalls.assign(sc.iterations, 0);
    report_.step_versions.resize(sc.iterations);
    issued_.resize(sc.iterations);
  }

  Report run() {
    open_epochs();
    for (std::size_t i = 0; i < instances_.size(); ++i) schedule_ready(i, 0);
    while (!queue_.empty() && !finished_) {
      auto ev = queue_.top();
      queue_.pop();
      now_ = ev.time;
      ev.fn();
    }
    if (!finished_) violation("deadlock: event queue drained after " + std::to_string(train_epoch_) +
                              " of " + std::to_string(sc_.iterations) + " iterations");
    return finish();
  }

 private:
  bool sync() const { return sc_.mode == Mode::kSequential || sc_.mode == Mode::kStreamed; }
  bool staggered() const { return sc_.mode == Mode::kStreamedAsyncStaggered; }
  Slot& slot_of(Epoch e) { return slots_[e % slots_.size()]; }

  void add_instance(Role role, std::uint32_t index, std::uint32_t stage) {
    Instance inst;
    inst.role = role;
    inst.index = index;
    inst.stage = stage;
    inst.cls = role == Role::kRollout ? "rollout" : role == Role::kTrain ? "train" : sc_.stages[stage].name;
    inst.name = inst.cls + "/" + std::to_string(index);
    instances_.push_back(std::move(inst));
  }

  std::size_t rollout_id(std::uint32_t i) const { return i; }

  void at(Nanos time, std::function<void()> fn) { queue_.push({time, seq_++, std::move(fn)}); }

  void schedule_ready(std::size_t id, Nanos time) {
    auto& inst = instances_[id];
    inst.idle = false;
    const auto token = ++inst.token;
    at(time, [this, id, token] {
      if (instances_[id].token != token) return;
      ready(id);
    });
  }

  void go_idle(std::size_t id) { instances_[id].idle = true; }

  void wake_all() {
    for (std::size_t id = 0; id < instances_.size(); ++id) {
      if (instances_[id].idle) schedule_ready(id, now_);
    }
  }

  void segment(std::size_t id, SegmentKind kind, Nanos start, Nanos end, Epoch epoch,
               std::uint64_t version) {
    const auto& inst = instances_[id];
    report_.gantt.push_back({inst.name, inst.cls, kind, start, end, epoch, version});
  }

  void violation(std::string what) { report_.violations.push_back(std::move(what)); }

  // ---- epochs -------------------------------------------------------------

  void open_epochs() {
    while (next_open_ < sc_.iterations && next_open_ < train_epoch_ + slots_.size()) {
      open_epoch(next_open_++);
    }
  }

  void open_epoch(Epoch e) {
    auto& slot = slot_of(e);
    const auto g = sc_.global_batch;
    if (!slot.constructed) {
      for (auto& u : make_storage_units(partition_, e)) {
        slot.units.push_back(u);
        slot.storage.push_back(u);
      }
      slot.rollout = std::make_shared<Controller>(rollout_task_, g, e, "rollout");
      for (const auto& t : stage_tasks_) {
        slot.stages.push_back(std::make_shared<Controller>(t, g, e, t.task_name));
      }
      slot.train = std::make_shared<Controller>(train_task_, g, e, "train");
      for (auto& u : slot.units) {
        u->register_controller(slot.rollout);
        for (auto& c : slot.stages) u->register_controller(c);
        u->register_controller(slot.train);
      }
      slot.loader = std::make_unique<Client>(loader_task_, 0, slot.rollout, slot.storage, partition_);
      for (std::uint32_t i = 0; i < sc_.num_rollout_instances; ++i) {
        slot.rollout_clients.emplace_back(rollout_task_, i, slot.rollout, slot.storage, partition_);
      }
      slot.stage_clients.resize(stage_tasks_.size());
      for (std::size_t k = 0; k < stage_tasks_.size(); ++k) {
        for (std::uint32_t i = 0; i < sc_.stages[k].instances; ++i) {
          slot.stage_clients[k].emplace_back(stage_tasks_[k], i, slot.stages[k], slot.storage, partition_);
        }
      }
      for (std::uint32_t i = 0; i < sc_.num_train_instances; ++i) {
        slot.train_clients.emplace_back(train_task_, i, slot.train, slot.storage, partition_);
      }
      slot.constructed = true;
    } else {
      slot.rollout->reset_epoch(e, g, rollout_task_.input_columns);
      for (std::size_t k = 0; k < stage_tasks_.size(); ++k) {
        slot.stages[k]->reset_epoch(e, g, stage_tasks_[k].input_columns);
      }
      slot.train->reset_epoch(e, g, train_task_.input_columns);
      for (auto& u : slot.units) u->reset_epoch(e, partition_.rows_of(u->unit_id()));
    }
    slot.epoch = e;
    slot.rollout_exhausted = false;
    slot.stage_exhausted.assign(stage_tasks_.size(), false);
    slot.trained = 0;
    slot.lengths = sample_lengths(sc_.response_length, g, mix_seed(sc_.seed, e));

    std::vector<GlobalIndex> rows(g);
    std::vector<Bytes> prompts(g);
    for (GlobalIndex r = 0; r < g; ++r) {
      rows[r] = r;
      prompts[r] = to_bytes("e" + std::to_string(e) + "/p" + std::to_string(r));
    }
    slot.loader->write_back(rows, kPrompt, prompts);
  }

  void note_issue(Epoch e, const std::string& task, const std::vector<GlobalIndex>& rows) {
    auto& seen = issued_[e][task];
    for (auto r : rows) {
      if (!seen.insert(r).second) {
        violation("row " + std::to_string(r) + " issued twice to " + task + " in epoch " +
                  std::to_string(e));
      }
    }
  }

  // ---- instance dispatch --------------------------------------------------

  void ready(std::size_t id) {
    switch (instances_[id].role) {
      case Role::kRollout: return rollout_ready(id);
      case Role::kStage: return stage_ready(id);
      case Role::kTrain: return train_ready(id);
    }
  }

  Nanos load_cost() const { return staggered() ? sc_.weight_transfer + sc_.h2d_swap : sc_.h2d_swap; }
  SegmentKind load_kind() const { return staggered() ? SegmentKind::kWeightLoad : SegmentKind::kH2DSwap; }

  void rollout_ready(std::size_t id) {
    const auto i = instances_[id].index;
    if (coord_.instance(i).staged) {
      const auto swap = coord_.maybe_swap(i);
      const auto end = now_ + load_cost();
      segment(id, load_kind(), now_, end, 0, swap.new_version.value);
      schedule_ready(id, end);
      return;
    }
    const auto active = coord_.instance(i).active_version.value;
    for (Epoch e = train_epoch_; e < next_open_; ++e) {
      auto& slot = slot_of(e);
      if (slot.rollout_exhausted) continue;
      if (e > active + s_) {
        if (stalled_.insert({i, e}).second) ++report_.version_stalls[e];
        return go_idle(id);
      }
      auto poll = slot.rollout_clients[i].try_next(sc_.rollout_micro_batch, PackingPolicy::fifo());
      if (poll.status == BatchStatus::kEpochExhausted) {
        slot.rollout_exhausted = true;
        continue;
      }
      if (poll.status == BatchStatus::kNotReady) continue;
      const auto& rows = poll.batch->meta.rows;
      note_issue(e, "rollout", rows);
      Nanos cost = 0;
      for (auto r : rows) {
        if (poll.batch->cell(r, kPrompt).empty()) violation("empty prompt fetched");
        cost += static_cast<Nanos>(slot.lengths[r]) * sc_.per_token_cost;
      }
      coord_.begin_generation(i);
      const auto end = now_ + cost;
      segment(id, SegmentKind::kGenerate, now_, end, e, active);
      instances_[id].idle = false;
      ++instances_[id].token;
      at(end, [this, id, e, rows, active] { rollout_done(id, e, rows, active); });
      return;
    }
    go_idle(id);
  }

  void rollout_done(std::size_t id, Epoch e, std::vector<GlobalIndex> rows, std::uint64_t version) {
    const auto i = instances_[id].index;
    if (coord_.instance(i).active_version.value != version) {
      violation(instances_[id].name + " changed weights mid-generation");
    }
    auto& slot = slot_of(e);
    std::vector<Bytes> values;
    for (auto r : rows) {
      values.push_back(encode_sample({version}, slot.lengths[r]));
      in_flight_.insert({e, r});
    }
    slot.rollout_clients[i].write_back(rows, kResponse, values);
    report_.samples_generated += rows.size();

    const auto swap = coord_.maybe_swap(i);
    if (swap.swapped) {
      const auto end = now_ + load_cost();
      segment(id, load_kind(), now_, end, e, swap.new_version.value);
      schedule_ready(id, end);
    } else {
      schedule_ready(id, now_);
    }
    wake_all();
  }

  void stage_ready(std::size_t id) {
    const auto& inst = instances_[id];
    const auto k = inst.stage;
    const auto& spec = sc_.stages[k];
    for (Epoch e = train_epoch_; e < next_open_; ++e) {
      auto& slot = slot_of(e);
      if (slot.stage_exhausted[k]) continue;
      if (sc_.mode == Mode::kSequential && !slot.stages[k]->fully_written()) return go_idle(id);
      auto poll = slot.stage_clients[k][inst.index].try_next(spec.micro_batch, PackingPolicy::fifo());
      if (poll.status == BatchStatus::kEpochExhausted) {
        slot.stage_exhausted[k] = true;
        continue;
      }
      if (poll.status == BatchStatus::kNotReady) continue;
      const auto rows = poll.batch->meta.rows;
      note_issue(e, spec.name, rows);
      const auto end = now_ + static_cast<Nanos>(rows.size()) * spec.per_sample_cost;
      segment(id, SegmentKind::kInfer, now_, end, e, 0);
      instances_[id].idle = false;
      ++instances_[id].token;
      at(end, [this, id, e, rows, k] {
        auto& s = slot_of(e);
        std::vector<Bytes> values(rows.size(), to_bytes(sc_.stages[k].name));
        s.stage_clients[k][instances_[id].index].write_back(rows, sc_.stages[k].name, values);
        schedule_ready(id, now_);
        wake_all();
      });
      return;
    }
    go_idle(id);
  }

  void train_ready(std::size_t id) {
    const auto j = instances_[id].index;
    const auto e = train_epoch_;
    if (e >= next_open_) return go_idle(id);
    auto& slot = slot_of(e);
    if (sc_.mode == Mode::kSequential && !slot.train->fully_written()) return go_idle(id);
    PackingPolicy policy;
    if (sc_.train_policy == PackingKind::kTokenBalanced) {
      std::map<GlobalIndex, std::uint64_t> counts;
      for (GlobalIndex r = 0; r < slot.lengths.size(); ++r) counts[r] = slot.lengths[r];
      policy = PackingPolicy::token_balanced(std::move(counts));
    }
    auto poll = slot.train_clients[j].try_next(sc_.train_micro_batch, policy);
    if (poll.status != BatchStatus::kGranted) return go_idle(id);
    const auto& rows = poll.batch->meta.rows;
    note_issue(e, "train", rows);
    std::uint32_t admitted = 0;
    for (auto r : rows) {
      const auto version = decode_version(poll.batch->cell(r, kResponse));
      in_flight_.erase({e, r});
      tracker_.record_sample(r, version);
      if (tracker_.consume(r) == Admission::kAdmit) {
        ++admitted;
        report_.step_versions[e].insert(version.value);
      }
    }
    const auto n = static_cast<std::uint32_t>(rows.size());
    const auto end = now_ + static_cast<Nanos>(admitted) * sc_.per_sample_train_cost;
    segment(id, SegmentKind::kTrain, now_, end, e, e);
    instances_[id].idle = false;
    ++instances_[id].token;
    at(end, [this, id, e, n] { train_done(id, e, n); });
  }

  void train_done(std::size_t id, Epoch e, std::uint32_t n) {
    auto& slot = slot_of(e);
    slot.trained += n;
    if (slot.trained == sc_.global_batch) step_complete(e);
    if (!finished_) {
      schedule_ready(id, now_);
      wake_all();
    }
  }

  void step_complete(Epoch e) {
    const WeightVersion version{e + 1};
    tracker_.set_trainer_version(version);
    ++train_epoch_;
    ++report_.iterations_completed;
    if (train_epoch_ == sc_.iterations) {
      finished_ = true;
      report_.end_to_end_time = now_;
      return;
    }
    open_epochs();
    const auto payload = to_bytes("weights-v" + std::to_string(version.value));
    switch (sc_.mode) {
      case Mode::kSequential:
      case Mode::kStreamed:
        at(now_ + sc_.weight_transfer, [this, version, payload] { sync_push(version, payload); });
        break;
      case Mode::kStreamedAsync:
        if (coord_.in_flight()) {
          pending_ = version;
        } else {
          start_transfer(version);
        }
        break;
      case Mode::kStreamedAsyncStaggered:
        coord_.begin_staggered(version, payload, sc_.stagger_limit);
        if (coord_.staggered_peak() > sc_.stagger_limit) violation("staggered window over its limit");
        break;
    }
  }

  void sync_push(WeightVersion version, const Bytes& payload) {
    for (std::uint32_t i = 0; i < sc_.num_rollout_instances; ++i) {
      if (coord_.instance(i).generating) {
        violation("synchronous weight push while rollout/" + std::to_string(i) + " generates");
        return;
      }
    }
    coord_.submit_weights(version, payload);
    for (std::uint32_t i = 0; i < sc_.num_rollout_instances; ++i) {
      const auto id = rollout_id(i);
      const auto end = now_ + sc_.h2d_swap;
      segment(id, SegmentKind::kH2DSwap, now_, end, 0, version.value);
      schedule_ready(id, end);
    }
  }

  void start_transfer(WeightVersion version) {
    auto handle = coord_.submit_weights(version, to_bytes("weights-v" + std::to_string(version.value)));
    at(now_ + sc_.weight_transfer, [this, handle] {
      coord_.complete_transfer(handle);
      if (pending_) {
        const auto next = *pending_;
        pending_.reset();
        start_transfer(next);
      }
      wake_all();
    });
  }

  Report finish() {
    report_.samples_consumed = tracker_.admitted();
    report_.samples_dropped = tracker_.dropped();
    report_.samples_in_flight = in_flight_.size();
    report_.staleness_histogram = tracker_.histogram();
    report_.max_staleness = tracker_.max_observed_gap();
    if (report_.max_staleness > s_) {
      violation("staleness " + std::to_string(report_.max_staleness) + " above bound " +
                std::to_string(s_));
    }
    if (report_.samples_generated !=
        report_.samples_consumed + report_.samples_dropped + report_.samples_in_flight) {
      violation("sample conservation broken");
    }
    for (std::uint32_t e = 0; e < report_.iterations_completed; ++e) {
      for (const auto& [task, rows] : issued_[e]) {
        if (rows.size() != sc_.global_batch) {
          violation(task + " saw " + std::to_string(rows.size()) + " rows in epoch " + std::to_string(e));
        }
      }
    }
    if (report_.end_to_end_time > 0) {
      report_.samples_per_second =
          static_cast<double>(report_.samples_consumed) * 1e9 / static_cast<double>(report_.end_to_end_time);
    }

    std::stable_sort(report_.gantt.begin(), report_.gantt.end(), [](const auto& a, const auto& b) {
      return std::tie(a.start, a.end, a.instance) < std::tie(b.start, b.end, b.instance);
    });
    std::map<std::string, Nanos> last_end;
    for (const auto& seg : report_.gantt) {
      auto [it, fresh] = last_end.try_emplace(seg.instance, seg.end);
      if (!fresh) {
        if (seg.start < it->second) violation("overlapping segments on " + seg.instance);
        it->second = std::max(it->second, seg.end);
      }
    }

    std::map<std::string, std::uint32_t> class_size;
    for (const auto& inst : instances_) ++class_size[inst.cls];
    for (const auto& [cls, count] : class_size) {
      const double span = static_cast<double>(report_.end_to_end_time);
      double busy = 0;
      for (const auto& seg : report_.gantt) {
        if (seg.instance_class != cls) continue;
        busy += static_cast<double>(std::min(seg.end, report_.end_to_end_time) -
                                    std::min(seg.start, report_.end_to_end_time));
      }
      report_.bubble_ratio[cls] = span > 0 ? std::clamp(1.0 - busy / (span * count), 0.0, 1.0) : 0.0;
    }
    return std::move(report_);
  }

  const Scenario& sc_;
  std::uint64_t s_;
  std::vector<Slot> slots_;
  PartitionMap partition_;
  WeightCoordinator coord_;
  StalenessTracker tracker_;
  TaskSpec rollout_task_, train_task_, loader_task_;
  std::vector<TaskSpec> stage_tasks_;
  std::vector<Instance> instances_;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::uint64_t seq_ = 0;
  Nanos now_ = 0;
  bool finished_ = false;
  Epoch next_open_ = 0;
  Epoch train_epoch_ = 0;
  std::optional<WeightVersion> pending_;
  std::set<std::pair<std::uint32_t, Epoch>> stalled_;
  std::set<std::pair<Epoch, GlobalIndex>> in_flight_;
  std::vector<std::map<std::string, std::set<GlobalIndex>>> issued_;
  Report report_;
};

}  // namespace

std::string_view mode_name(Mode mode) {
  switch (mode) {
    case Mode::kSequential: return "sequential";
    case Mode::kStreamed: return "streamed";
    case Mode::kStreamedAsync: return "streamed_async";
    case Mode::kStreamedAsyncStaggered: return "streamed_async_staggered";
  }
  return "unknown";
}

Mode parse_mode(std::string_view name) {
  for (auto m : {Mode::kSequential, Mode::kStreamed, Mode::kStreamedAsync, Mode::kStreamedAsyncStaggered}) {
    if (mode_name(m) == name) return m;
  }
  throw Error(ErrorCode::kScenarioInvalid, "unknown mode '" + std::string(name) + "'");
}

std::string_view segment_kind_name(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::kGenerate: return "generate";
    case SegmentKind::kInfer: return "infer";
    case SegmentKind::kTrain: return "train";
    case SegmentKind::kH2DSwap: return "h2d_swap";
    case SegmentKind::kWeightLoad: return "weight_load";
  }
  return "unknown";
}

std::uint64_t Scenario::effective_staleness() const {
  if (mode == Mode::kSequential || mode == Mode::kStreamed) return 0;
  return std::min<std::uint64_t>(staleness, iterations);
}

void Scenario::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kScenarioInvalid, what); };
  if (global_batch == 0) fail("global batch must be positive");
  if (num_rollout_instances == 0) fail("need at least one rollout instance");
  if (num_train_instances == 0) fail("need at least one train instance");
  if (rollout_micro_batch == 0 || train_micro_batch == 0) fail("micro-batch sizes must be positive");
  if (iterations == 0) fail("iterations must be positive");
  if (num_storage_units == 0) fail("need at least one storage unit");
  if (per_token_cost < 0 || per_sample_train_cost < 0 || weight_transfer < 0 || h2d_swap < 0) {
    fail("durations must be non-negative");
  }
  if (response_length.kind == LengthDist::Kind::kFixed && response_length.fixed_length == 0) {
    fail("fixed response length must be positive");
  }
  if (response_length.kind == LengthDist::Kind::kLognormal &&
      (!(response_length.sigma >= 0) || !std::isfinite(response_length.mu) ||
       response_length.max_length == 0)) {
    fail("lognormal needs sigma >= 0, finite mu and max_length >= 1");
  }
  if (mode == Mode::kStreamedAsyncStaggered &&
      (stagger_limit < 1 || stagger_limit >= num_rollout_instances)) {
    fail("staggered mode needs 1 <= stagger_limit < rollout instances");
  }
  std::set<std::string> names{"rollout", "train", "loader", kPrompt, kResponse};
  for (const auto& st : stages) {
    if (st.name.empty() || !names.insert(st.name).second) fail("stage names must be unique and non-empty");
    if (st.instances == 0 || st.micro_batch == 0) fail("stage " + st.name + " needs instances and micro-batch");
    if (st.per_sample_cost < 0) fail("durations must be non-negative");
  }
}

Scenario default_scenario() { return Scenario{}; }

Report run(const Scenario& scenario) {
  scenario.validate();
  Simulation sim(scenario);
  return sim.run();
}

std::vector<std::uint32_t> sample_lengths(const LengthDist& dist, std::size_t count, std::uint64_t seed) {
  std::vector<std::uint32_t> out;
  out.reserve(count);
  if (dist.kind == LengthDist::Kind::kFixed) {
    out.assign(count, dist.fixed_length);
    return out;
  }
  std::mt19937_64 rng(seed);
  std::lognormal_distribution<double> d(dist.mu, dist.sigma);
  const double hi = dist.max_length;
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(static_cast<std::uint32_t>(std::clamp(std::round(d(rng)), 1.0, hi)));
  }
  return out;
}

double bubble_ratio(const std::vector<GanttSegment>& gantt, std::string_view instance_class) {
  if (gantt.empty()) return 0.0;
  Nanos lo = gantt.front().start, hi = gantt.front().end;
  for (const auto& s : gantt) {
    lo = std::min(lo, s.start);
    hi = std::max(hi, s.end);
  }
  std::map<std::string, Nanos> busy;
  for (const auto& s : gantt) {
    if (s.instance_class == instance_class) busy[s.instance] += s.end - s.start;
  }
  if (busy.empty() || hi == lo) return 0.0;
  const double span = static_cast<double>(hi - lo);
  double idle = 0;
  for (const auto& [_, b] : busy) idle += span - static_cast<double>(b);
  return std::clamp(idle / (span * static_cast<double>(busy.size())), 0.0, 1.0);
}

TraceFormat parse_trace_format(std::string_view name) {
  if (name == "json_lines") return TraceFormat::kJsonLines;
  if (name == "chrome_trace") return TraceFormat::kChromeTrace;
  throw Error(ErrorCode::kInvalidArgument, "unknown trace format '" + std::string(name) + "'");
}

std::string render_trace(const std::vector<GanttSegment>& gantt, TraceFormat format) {
  using nlohmann::json;
  std::ostringstream out;
  if (format == TraceFormat::kJsonLines) {
    for (const auto& s : gantt) {
      out << json{{"instance", s.instance}, {"class", s.instance_class},
                  {"kind", segment_kind_name(s.kind)}, {"start_ns", s.start},
                  {"end_ns", s.end}, {"epoch", s.epoch}, {"version", s.version}}
                 .dump()
          << '\n';
    }
    return out.str();
  }
  json events = json::array();
  for (const auto& s : gantt) {
    events.push_back({{"name", segment_kind_name(s.kind)},
                      {"cat", s.instance_class},
                      {"ph", "X"},
                      {"ts", static_cast<double>(s.start) / 1000.0},
                      {"dur", static_cast<double>(s.end - s.start) / 1000.0},
                      {"pid", s.instance_class},
                      {"tid", s.instance},
                      {"args", {{"epoch", s.epoch}, {"version", s.version}}}});
  }
  out << json{{"traceEvents", events}, {"displayTimeUnit", "ms"}}.dump() << '\n';
  return out.str();
}

void export_trace(const Report& report, const std::filesystem::path& path, TraceFormat format) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::kInvalidArgument, "cannot write " + path.string());
  f << render_trace(report.gantt, format);
  if (!f) throw Error(ErrorCode::kInvalidArgument, "write failed for " + path.string());
}

}  // namespace pipeflow::sim

namespace pipeflow::sim {

namespace {

using nlohmann::json;

template <typename T>
void take(json& obj, const char* key, T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    if (!it->is_number_unsigned()) throw Error(ErrorCode::kConfig, std::string("'") + key + "' must be a non-negative integer");
  } else if constexpr (std::is_integral_v<T>) {
    if (!it->is_number_integer()) throw Error(ErrorCode::kConfig, std::string("'") + key + "' must be an integer");
  }
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::kConfig, std::string("bad value for '") + key + "'");
  }
  obj.erase(it);
}

void reject_unknown(const json& obj, const std::string& where) {
  if (!obj.empty()) throw Error(ErrorCode::kConfig, "unknown key '" + obj.begin().key() + "' in " + where);
}

}  // namespace

Scenario scenario_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfig, std::string("scenario is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw Error(ErrorCode::kConfig, "scenario must be a JSON object");
  Scenario sc;
  std::string mode{mode_name(sc.mode)};
  take(doc, "mode", mode);
  sc.mode = parse_mode(mode);
  take(doc, "global_batch", sc.global_batch);
  take(doc, "rollout_instances", sc.num_rollout_instances);
  take(doc, "train_instances", sc.num_train_instances);
  take(doc, "rollout_micro_batch", sc.rollout_micro_batch);
  take(doc, "train_micro_batch", sc.train_micro_batch);
  take(doc, "per_token_cost_ns", sc.per_token_cost);
  take(doc, "per_sample_train_cost_ns", sc.per_sample_train_cost);
  take(doc, "weight_transfer_ns", sc.weight_transfer);
  take(doc, "h2d_swap_ns", sc.h2d_swap);
  take(doc, "staleness", sc.staleness);
  take(doc, "iterations", sc.iterations);
  take(doc, "seed", sc.seed);
  take(doc, "storage_units", sc.num_storage_units);
  take(doc, "stagger_limit", sc.stagger_limit);
  std::string policy = sc.train_policy == PackingKind::kFifo ? "fifo" : "token_balanced";
  take(doc, "train_policy", policy);
  if (policy == "fifo") {
    sc.train_policy = PackingKind::kFifo;
  } else if (policy == "token_balanced") {
    sc.train_policy = PackingKind::kTokenBalanced;
  } else {
    throw Error(ErrorCode::kConfig, "unknown train_policy '" + policy + "'");
  }
  if (auto it = doc.find("response_length"); it != doc.end()) {
    json dist = *it;
    doc.erase(it);
    if (!dist.is_object()) throw Error(ErrorCode::kConfig, "response_length must be an object");
    std::string kind;
    take(dist, "dist", kind);
    if (kind == "fixed") {
      std::uint32_t length = 0;
      take(dist, "length", length);
      sc.response_length = LengthDist::fixed(length);
    } else if (kind == "lognormal") {
      auto d = LengthDist::lognormal(4.0, 1.0);
      take(dist, "mu", d.mu);
      take(dist, "sigma", d.sigma);
      take(dist, "max", d.max_length);
      sc.response_length = d;
    } else {
      throw Error(ErrorCode::kConfig, "response_length.dist must be fixed or lognormal");
    }
    reject_unknown(dist, "response_length");
  }
  if (auto it = doc.find("stages"); it != doc.end()) {
    json stages = *it;
    doc.erase(it);
    if (!stages.is_array()) throw Error(ErrorCode::kConfig, "stages must be an array");
    for (auto& st : stages) {
      if (!st.is_object()) throw Error(ErrorCode::kConfig, "stage entries must be objects");
      StageSpec spec;
      take(st, "name", spec.name);
      take(st, "instances", spec.instances);
      take(st, "per_sample_cost_ns", spec.per_sample_cost);
      take(st, "micro_batch", spec.micro_batch);
      reject_unknown(st, "stage");
      sc.stages.push_back(spec);
    }
  }
  reject_unknown(doc, "scenario");
  sc.validate();
  return sc;
}

std::string scenario_to_json(const Scenario& sc) {
  json dist = sc.response_length.kind == LengthDist::Kind::kFixed
                  ? json{{"dist", "fixed"}, {"length", sc.response_length.fixed_length}}
                  : json{{"dist", "lognormal"},
                         {"mu", sc.response_length.mu},
                         {"sigma", sc.response_length.sigma},
                         {"max", sc.response_length.max_length}};
  json stages = json::array();
  for (const auto& st : sc.stages) {
    stages.push_back({{"name", st.name},
                      {"instances", st.instances},
                      {"per_sample_cost_ns", st.per_sample_cost},
                      {"micro_batch", st.micro_batch}});
  }
  json doc{{"mode", mode_name(sc.mode)},
           {"global_batch", sc.global_batch},
           {"rollout_instances", sc.num_rollout_instances},
           {"train_instances", sc.num_train_instances},
           {"rollout_micro_batch", sc.rollout_micro_batch},
           {"train_micro_batch", sc.train_micro_batch},
           {"response_length", dist},
           {"per_token_cost_ns", sc.per_token_cost},
           {"per_sample_train_cost_ns", sc.per_sample_train_cost},
           {"weight_transfer_ns", sc.weight_transfer},
           {"h2d_swap_ns", sc.h2d_swap},
           {"staleness", sc.staleness},
           {"iterations", sc.iterations},
           {"seed", sc.seed},
           {"storage_units", sc.num_storage_units},
           {"stagger_limit", sc.stagger_limit},
           {"train_policy", sc.train_policy == PackingKind::kFifo ? "fifo" : "token_balanced"},
           {"stages", stages}};
  return doc.dump(2) + "\n";
}

std::string report_to_json(const Report& r, bool include_gantt) {
  json hist = json::object();
  for (const auto& [gap, n] : r.staleness_histogram) hist[std::to_string(gap)] = n;
  json versions = json::array();
  for (const auto& s : r.step_versions) versions.push_back(s);
  json doc{{"samples_per_second", r.samples_per_second},
           {"end_to_end_time_ns", r.end_to_end_time},
           {"iterations_completed", r.iterations_completed},
           {"bubble_ratio", r.bubble_ratio},
           {"staleness_histogram", hist},
           {"max_staleness", r.max_staleness},
           {"samples_generated", r.samples_generated},
           {"samples_consumed", r.samples_consumed},
           {"samples_dropped", r.samples_dropped},
           {"samples_in_flight", r.samples_in_flight},
           {"version_stalls", r.version_stalls},
           {"step_versions", versions},
           {"violations", r.violations}};
  if (include_gantt) {
    json g = json::array();
    for (const auto& s : r.gantt) {
      g.push_back({{"instance", s.instance},
                   {"class", s.instance_class},
                   {"kind", segment_kind_name(s.kind)},
                   {"start_ns", s.start},
                   {"end_ns", s.end},
                   {"epoch", s.epoch},
                   {"version", s.version}});
    }
    doc["gantt"] = g;
  }
  return doc.dump(2) + "\n";
}

}  // namespace pipeflow::sim
