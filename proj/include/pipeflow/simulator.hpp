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

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pipeflow/control_plane.hpp"
#include "pipeflow/types.hpp"

namespace pipeflow::sim {

enum class Mode : std::uint8_t {
  kSequential,       // tasks serialized, on-policy
  kStreamed,         // tasks overlap through the store, on-policy
  kStreamedAsync,    // + delayed parameter update, bounded staleness
  kStreamedAsyncStaggered,  // + per-instance windows of weight loading
};

std::string_view mode_name(Mode mode);
Mode parse_mode(std::string_view name);

struct LengthDist {
  enum class Kind : std::uint8_t { kFixed, kLognormal } kind = Kind::kFixed;
  std::uint32_t fixed_length = 100;
  double mu = 4.0;
  double sigma = 1.0;
  std::uint32_t max_length = 4096;

  static LengthDist fixed(std::uint32_t length) { return {Kind::kFixed, length, 0, 0, length}; }
  static LengthDist lognormal(double mu, double sigma, std::uint32_t max_length = 4096) {
    return {Kind::kLognormal, 0, mu, sigma, max_length};
  }
};

/// An inference task between rollout and train (e.g. reference log-probs).
/// It reads prompt and response and writes a column named after the stage.
struct StageSpec {
  std::string name;
  std::uint32_t instances = 1;
  Nanos per_sample_cost = 0;
  std::uint32_t micro_batch = 4;
};

struct Scenario {
  Mode mode = Mode::kStreamedAsync;
  std::uint32_t global_batch = 64;
  std::uint32_t num_rollout_instances = 4;
  std::uint32_t num_train_instances = 2;
  std::uint32_t rollout_micro_batch = 4;
  std::uint32_t train_micro_batch = 4;
  LengthDist response_length = LengthDist::lognormal(4.0, 1.0, 1024);
  Nanos per_token_cost = 100'000;
  Nanos per_sample_train_cost = 4'500'000;
  Nanos weight_transfer = 20'000'000;
  Nanos h2d_swap = 2'000'000;
  std::uint64_t staleness = 1;
  std::uint32_t iterations = 20;
  std::uint64_t seed = 0;
  std::uint32_t num_storage_units = 2;
  /// Staggered mode: instances loading weights at the same time.
  std::uint32_t stagger_limit = 1;
  PackingKind train_policy = PackingKind::kFifo;
  std::vector<StageSpec> stages;

  /// Staleness bound actually enforced: sequential and streamed are on-policy;
  /// a bound at or above the iteration count never binds and is clamped to it.
  std::uint64_t effective_staleness() const;
  /// Throws Error(kScenarioInvalid) describing the first problem found.
  void validate() const;
};

/// The default desk-scale scenario: G=64, 4 rollout + 2 train instances,
/// lognormal response lengths, per-iteration rollout and train work balanced.
Scenario default_scenario();

enum class SegmentKind : std::uint8_t { kGenerate, kInfer, kTrain, kH2DSwap, kWeightLoad };
std::string_view segment_kind_name(SegmentKind kind);

struct GanttSegment {
  std::string instance;        // e.g. "rollout/0"
  std::string instance_class;  // e.g. "rollout"
  SegmentKind kind = SegmentKind::kGenerate;
  Nanos start = 0;
  Nanos end = 0;
  std::uint64_t epoch = 0;
  std::uint64_t version = 0;

  friend bool operator==(const GanttSegment&, const GanttSegment&) = default;
};

struct Report {
  double samples_per_second = 0.0;
  Nanos end_to_end_time = 0;
  std::uint32_t iterations_completed = 0;
  std::map<std::string, double> bubble_ratio;
  /// staleness gap -> admitted samples
  std::map<std::uint64_t, std::uint64_t> staleness_histogram;
  std::uint64_t max_staleness = 0;
  std::uint64_t samples_generated = 0;
  std::uint64_t samples_consumed = 0;
  std::uint64_t samples_dropped = 0;
  std::uint64_t samples_in_flight = 0;
  /// Rollout waits on the staleness gate, indexed by the epoch being opened.
  std::vector<std::uint64_t> version_stalls;
  /// Distinct data versions seen by each trainer step.
  std::vector<std::set<std::uint64_t>> step_versions;
  std::vector<GanttSegment> gantt;
  /// Invariant violations detected over the run; empty on a healthy run.
  std::vector<std::string> violations;

  friend bool operator==(const Report&, const Report&) = default;
};

/// Scenario files are JSON objects; absent keys keep their defaults and
/// unknown keys are rejected (kConfig). Durations are integer nanoseconds.
///
///   mode                 sequential | streamed | streamed_async | streamed_async_staggered
///   global_batch, rollout_instances, train_instances,
///   rollout_micro_batch, train_micro_batch, iterations, seed, storage_units,
///   staleness, stagger_limit
///   response_length      {"dist": "fixed", "length": L}
///                        {"dist": "lognormal", "mu": m, "sigma": s, "max": L_max}
///   per_token_cost_ns, per_sample_train_cost_ns, weight_transfer_ns, h2d_swap_ns
///   train_policy         fifo | token_balanced
///   stages               [{"name", "instances", "per_sample_cost_ns", "micro_batch"}]
Scenario scenario_from_json(std::string_view text);
std::string scenario_to_json(const Scenario& scenario);
/// Stable key order and formatting; identical reports give identical bytes.
std::string report_to_json(const Report& report, bool include_gantt = false);

/// Runs the scenario to completion. Deterministic for a given scenario.
Report run(const Scenario& scenario);

/// Response lengths in tokens: fixed, or lognormal rounded and clipped to
/// [1, max_length].
std::vector<std::uint32_t> sample_lengths(const LengthDist& dist, std::size_t count,
                                          std::uint64_t seed);

/// Idle fraction of one instance class: over the trace span, the share of
/// time its instances are not covered by a segment.
double bubble_ratio(const std::vector<GanttSegment>& gantt, std::string_view instance_class);

enum class TraceFormat : std::uint8_t { kJsonLines, kChromeTrace };
TraceFormat parse_trace_format(std::string_view name);
void export_trace(const Report& report, const std::filesystem::path& path, TraceFormat format);
std::string render_trace(const std::vector<GanttSegment>& gantt, TraceFormat format);

}  // namespace pipeflow::sim
