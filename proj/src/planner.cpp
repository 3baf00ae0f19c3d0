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

#include "pipeflow/planner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <set>
#include <nlohmann/json.hpp>
#include <numeric>
#include <thread>

namespace pipeflow::plan {

namespace {

double coefficient(const AnalyticModel& model, const std::string& task) {
  auto it = model.coeff.find(task);
  if (it == model.coeff.end()) throw Error(ErrorCode::kInvalidArgument, "no coefficient for task " + task);
  if (!(it->second > 0)) throw Error(ErrorCode::kInvalidArgument, "coefficient for " + task + " must be > 0");
  return it->second;
}

Nanos unit_cost(const AnalyticModel& model, const std::string& task, std::uint32_t devices) {
  const double per_instance = coefficient(model, task) * std::pow(devices, model.alpha - 1.0);
  return static_cast<Nanos>(std::llround(1e9 / per_instance));
}

void check_tasks(const std::vector<PlanTask>& tasks) {
  if (tasks.size() < 2) throw Error(ErrorCode::kInvalidArgument, "planning needs at least rollout and train tasks");
  for (const auto& t : tasks) {
    if (!(t.workload >= 0)) throw Error(ErrorCode::kInvalidArgument, "negative workload for " + t.name);
  }
}

}  // namespace

std::uint32_t Allocation::total() const { return std::accumulate(counts.begin(), counts.end(), 0u); }

std::uint32_t Allocation::at(const std::string& task) const {
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (tasks[i] == task) return counts[i];
  }
  throw Error(ErrorCode::kInvalidArgument, "allocation has no task " + task);
}

std::string Allocation::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (i) out += ',';
    out += tasks[i] + ':' + std::to_string(counts[i]);
  }
  return out;
}

void ProfileTable::add(const std::string& task, std::uint32_t devices, double seconds) {
  if (!(seconds > 0)) throw Error(ErrorCode::kInvalidArgument, "profile entries must be positive");
  entries_[{task, devices}] = seconds;
}

std::optional<double> ProfileTable::lookup(const std::string& task, std::uint32_t devices) const {
  auto it = entries_.find({task, devices});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

double analytic_time(const AnalyticModel& model, const std::string& task, std::uint32_t devices,
                     double workload) {
  if (workload == 0) return 0.0;
  if (devices == 0) return std::numeric_limits<double>::infinity();
  if (!(model.alpha > 0 && model.alpha <= 1)) throw Error(ErrorCode::kInvalidArgument, "alpha must be in (0,1]");
  return workload / (coefficient(model, task) * std::pow(devices, model.alpha)) + model.comm_overhead;
}

double bottleneck_time(const AnalyticModel& model, const ProfileTable& profile,
                       const std::vector<PlanTask>& tasks, const Allocation& allocation) {
  double worst = 0.0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto n = allocation.counts.at(i);
    auto measured = tasks[i].workload > 0 ? profile.lookup(tasks[i].name, n) : std::nullopt;
    worst = std::max(worst, measured ? *measured : analytic_time(model, tasks[i].name, n, tasks[i].workload));
  }
  return worst;
}

std::vector<Allocation> enumerate_allocations(std::uint32_t budget, const std::vector<PlanTask>& tasks) {
  if (budget < tasks.size()) {
    throw Error(ErrorCode::kInfeasibleBudget, std::to_string(budget) + " devices for " +
                                                  std::to_string(tasks.size()) + " tasks");
  }
  Allocation proto;
  for (const auto& t : tasks) proto.tasks.push_back(t.name);
  proto.counts.assign(tasks.size(), 0);

  std::vector<Allocation> out;
  auto rec = [&](auto& self, std::size_t i, std::uint32_t left) -> void {
    const std::uint32_t lo = tasks[i].workload > 0 ? 1 : 0;
    if (i + 1 == tasks.size()) {
      if (left >= lo) {
        proto.counts[i] = left;
        out.push_back(proto);
      }
      return;
    }
    for (std::uint32_t c = lo; c <= left; ++c) {
      proto.counts[i] = c;
      self(self, i + 1, left - c);
    }
  };
  rec(rec, 0, budget);
  return out;
}

std::vector<Allocation> prune(const std::vector<Allocation>& candidates, const AnalyticModel& model,
                              const std::vector<PlanTask>& tasks, std::size_t keep_k,
                              const ProfileTable& profile) {
  std::vector<std::pair<double, const Allocation*>> scored;
  scored.reserve(candidates.size());
  for (const auto& c : candidates) scored.emplace_back(bottleneck_time(model, profile, tasks, c), &c);
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return *a.second < *b.second;
  });
  std::vector<Allocation> out;
  for (std::size_t i = 0; i < scored.size() && i < keep_k; ++i) out.push_back(*scored[i].second);
  return out;
}

sim::Scenario scenario_for(const sim::Scenario& base, const AnalyticModel& model,
                           const std::vector<PlanTask>& tasks, const Allocation& allocation) {
  check_tasks(tasks);
  auto sc = base;
  const auto& rollout = tasks.front();
  const auto& train = tasks.back();
  const auto n_r = allocation.counts.front();
  const auto n_t = allocation.counts.back();
  // A task with no work and no devices still needs one (free) instance to
  // move rows through the pipeline.
  sc.num_rollout_instances = std::max(1u, n_r);
  sc.per_token_cost = n_r == 0 ? 0 : unit_cost(model, rollout.name, n_r);
  sc.num_train_instances = std::max(1u, n_t);
  sc.per_sample_train_cost = n_t == 0 ? 0 : unit_cost(model, train.name, n_t);
  std::vector<sim::StageSpec> stages;
  for (std::size_t i = 1; i + 1 < tasks.size(); ++i) {
    const auto n = allocation.counts[i];
    if (n == 0) continue;
    sim::StageSpec st{tasks[i].name, n, unit_cost(model, tasks[i].name, n), base.rollout_micro_batch};
    for (const auto& b : base.stages) {
      if (b.name == st.name) st.micro_batch = b.micro_batch;
    }
    stages.push_back(st);
  }
  sc.stages = std::move(stages);
  return sc;
}

std::vector<PlanTask> tasks_from_scenario(const sim::Scenario& base, const std::vector<std::string>& task_names) {
  if (task_names.size() < 2) throw Error(ErrorCode::kInvalidArgument, "need at least two tasks");
  const auto& d = base.response_length;
  double mean_tokens = d.fixed_length;
  if (d.kind == sim::LengthDist::Kind::kLognormal) {
    mean_tokens = std::min<double>(d.max_length, std::exp(d.mu + d.sigma * d.sigma / 2));
  }
  std::vector<PlanTask> out;
  for (std::size_t i = 0; i < task_names.size(); ++i) {
    out.push_back({task_names[i], i == 0 ? base.global_batch * mean_tokens : double(base.global_batch)});
  }
  return out;
}

PlanResult plan(const PlanRequest& req) {
  check_tasks(req.tasks);
  auto candidates = enumerate_allocations(req.budget, req.tasks);
  const auto keep = req.keep_k == 0 ? candidates.size() : req.keep_k;
  auto finalists = prune(candidates, req.model, req.tasks, keep, req.profile);

  std::vector<std::optional<std::uint32_t>> grid;
  for (auto mb : req.micro_batch_grid) grid.emplace_back(mb);
  if (grid.empty()) grid.emplace_back(std::nullopt);

  std::vector<Evaluation> evals;
  std::vector<sim::Scenario> scenarios;
  for (const auto& alloc : finalists) {
    for (const auto& mb : grid) {
      auto sc = scenario_for(req.base, req.model, req.tasks, alloc);
      if (mb) {
        sc.rollout_micro_batch = *mb;
        sc.train_micro_batch = *mb;
      }
      evals.push_back({alloc, mb, bottleneck_time(req.model, req.profile, req.tasks, alloc), 0});
      scenarios.push_back(std::move(sc));
    }
  }

  std::vector<std::optional<sim::Report>> reports(scenarios.size());
  std::vector<std::exception_ptr> errors(scenarios.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < scenarios.size();) {
      try {
        reports[i] = sim::run(scenarios[i]);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kScenarioInvalid) errors[i] = std::current_exception();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto workers = std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, scenarios.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  PlanResult result;
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < evals.size(); ++i) {
    if (!reports[i]) continue;
    auto& ev = evals[i];
    ev.end_to_end_time = reports[i]->end_to_end_time;
    result.evaluated.push_back(ev);
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = evals[*best];
    if (std::tie(ev.end_to_end_time, ev.allocation.counts, ev.micro_batch) <
        std::tie(b.end_to_end_time, b.allocation.counts, b.micro_batch)) {
      best = i;
    }
  }
  if (!best) throw Error(ErrorCode::kScenarioInvalid, "no finalist produced a valid scenario");
  result.allocation = evals[*best].allocation;
  result.micro_batch = evals[*best].micro_batch;
  result.report = std::move(*reports[*best]);
  return result;
}

PlanRequest request_from_json(std::string_view text, std::uint32_t budget, std::size_t keep_k) {
  using nlohmann::json;
  PlanRequest req;
  req.budget = budget;
  req.keep_k = keep_k;
  req.base = sim::default_scenario();
  try {
    const auto j = json::parse(text);
    for (const auto& [key, _] : j.items()) {
      static const std::set<std::string> known{"alpha", "comm_overhead", "tasks", "scenario", "profile",
                                               "micro_batch_grid"};
      if (!known.count(key)) throw Error(ErrorCode::kConfig, "unknown key '" + key + "' in planner input");
    }
    req.model.alpha = j.value("alpha", 0.9);
    req.model.comm_overhead = j.value("comm_overhead", 0.0);
    if (j.contains("scenario")) req.base = sim::scenario_from_json(j.at("scenario").dump());

    std::vector<std::string> names;
    for (const auto& t : j.at("tasks")) names.push_back(t.at("name").get<std::string>());
    if (names.size() < 2) throw Error(ErrorCode::kConfig, "planner input needs at least two tasks");
    const auto derived = tasks_from_scenario(req.base, names);
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto& t = j.at("tasks")[i];
      req.model.coeff[names[i]] = t.at("coeff").get<double>();
      req.tasks.push_back({names[i], t.contains("workload") ? t.at("workload").get<double>() : derived[i].workload});
    }
    for (const auto& p : j.value("profile", json::array())) {
      req.profile.add(p.at("task").get<std::string>(), p.at("devices").get<std::uint32_t>(),
                      p.at("seconds").get<double>());
    }
    req.micro_batch_grid = j.value("micro_batch_grid", std::vector<std::uint32_t>{});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("planner input: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kScenarioInvalid) throw;
    throw Error(ErrorCode::kConfig, e.what());
  }
  return req;
}

std::string result_to_json(const PlanResult& result) {
  using nlohmann::json;
  auto mb = [](const std::optional<std::uint32_t>& m) { return m ? json(*m) : json(nullptr); };
  json j;
  j["allocation"] = result.allocation.to_string();
  j["micro_batch"] = mb(result.micro_batch);
  j["end_to_end_ns"] = result.report.end_to_end_time;
  j["samples_per_second"] = result.report.samples_per_second;
  j["finalists"] = json::array();
  for (const auto& ev : result.evaluated) {
    j["finalists"].push_back({{"allocation", ev.allocation.to_string()},
                              {"micro_batch", mb(ev.micro_batch)},
                              {"bottleneck_s", ev.bottleneck_seconds},
                              {"end_to_end_ns", ev.end_to_end_time}});
  }
  return j.dump(2);
}

}  // namespace pipeflow::plan
