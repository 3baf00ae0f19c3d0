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

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pipeflow/simulator.hpp"

namespace pipeflow::plan {

/// One task of the pipeline. Order matters when simulating: the first task
/// is rollout, the last is train, anything between is an inference stage.
struct PlanTask {
  std::string name;
  /// Work units per iteration (tokens for rollout, samples otherwise).
  double workload = 0.0;
};

/// Device counts aligned with the task list.
struct Allocation {
  std::vector<std::string> tasks;
  std::vector<std::uint32_t> counts;

  std::uint32_t total() const;
  std::uint32_t at(const std::string& task) const;
  /// "rollout:4,train:2"
  std::string to_string() const;
  friend bool operator==(const Allocation&, const Allocation&) = default;
  /// Lexicographic on counts.
  friend bool operator<(const Allocation& a, const Allocation& b) { return a.counts < b.counts; }
};

/// throughput(n) = coeff * n^alpha units per second; time = workload /
/// throughput + comm_overhead (seconds, only when there is work).
struct AnalyticModel {
  std::map<std::string, double> coeff;
  double alpha = 0.9;
  double comm_overhead = 0.0;
};

/// Measured durations (seconds) by (task, device count); they take precedence
/// over the analytic estimate.
class ProfileTable {
 public:
  /// Throws kInvalidArgument unless seconds > 0.
  void add(const std::string& task, std::uint32_t devices, double seconds);
  std::optional<double> lookup(const std::string& task, std::uint32_t devices) const;
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::pair<std::string, std::uint32_t>, double> entries_;
};

/// Seconds for `workload` units on n devices. Zero workload costs nothing;
/// positive workload on zero devices is infinite.
double analytic_time(const AnalyticModel& model, const std::string& task, std::uint32_t devices,
                     double workload);

/// Bottleneck score used for pruning: max over tasks of the profiled or
/// analytic time.
double bottleneck_time(const AnalyticModel& model, const ProfileTable& profile,
                       const std::vector<PlanTask>& tasks, const Allocation& allocation);

/// Every split of `budget` devices with at least one device per task that
/// has work; zero-workload tasks may get none. Lexicographic order.
/// Throws kInfeasibleBudget when budget < |tasks|.
std::vector<Allocation> enumerate_allocations(std::uint32_t budget, const std::vector<PlanTask>& tasks);

/// The keep_k candidates with the lowest bottleneck score, ties broken
/// lexicographically, in rank order.
std::vector<Allocation> prune(const std::vector<Allocation>& candidates, const AnalyticModel& model,
                              const std::vector<PlanTask>& tasks, std::size_t keep_k,
                              const ProfileTable& profile = {});

/// Simulator scenario for one allocation: per-instance unit costs are
/// 1/(coeff * n^(alpha-1)) so that the simulated aggregate throughput of n
/// instances is coeff * n^alpha.
sim::Scenario scenario_for(const sim::Scenario& base, const AnalyticModel& model,
                           const std::vector<PlanTask>& tasks, const Allocation& allocation);

/// Workloads implied by a scenario: expected tokens for rollout, G samples
/// for every other task.
std::vector<PlanTask> tasks_from_scenario(const sim::Scenario& base,
                                          const std::vector<std::string>& task_names);

struct PlanRequest {
  std::uint32_t budget = 0;
  std::vector<PlanTask> tasks;
  AnalyticModel model;
  sim::Scenario base;
  /// 0 means keep every candidate.
  std::size_t keep_k = 0;
  ProfileTable profile;
  /// Optional micro-batch sizes tried for every finalist (applied to rollout
  /// and train micro-batches alike).
  std::vector<std::uint32_t> micro_batch_grid;
};

struct Evaluation {
  Allocation allocation;
  std::optional<std::uint32_t> micro_batch;
  double bottleneck_seconds = 0.0;
  Nanos end_to_end_time = 0;
};

struct PlanResult {
  Allocation allocation;
  std::optional<std::uint32_t> micro_batch;
  sim::Report report;
  std::vector<Evaluation> evaluated;
};

/// Planner input file:
///   {
///     "alpha": 0.9, "comm_overhead": 0.0,                 (optional)
///     "tasks": [{"name": "rollout", "coeff": 5e4, "workload": 6400}, ...],
///     "scenario": {...},                                  (optional base scenario)
///     "profile": [{"task": "train", "devices": 2, "seconds": 0.4}],
///     "micro_batch_grid": [2, 4]                          (optional)
///   }
/// A task without "workload" takes it from the base scenario. Throws kConfig.
PlanRequest request_from_json(std::string_view text, std::uint32_t budget, std::size_t keep_k);

/// Chosen allocation plus the finalist table, deterministic JSON.
std::string result_to_json(const PlanResult& result);

/// Enumerate, prune to keep_k, simulate the finalists, return the minimum
/// simulated end-to-end time (ties: lexicographic allocation, then smaller
/// micro-batch). Errors: kInfeasibleBudget; kScenarioInvalid if no finalist
/// yields a valid scenario.
PlanResult plan(const PlanRequest& request);

}  // namespace pipeflow::plan
