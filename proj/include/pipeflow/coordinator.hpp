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

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <vector>

#include "pipeflow/types.hpp"

namespace pipeflow {

enum class TransferMode : std::uint8_t { kSynchronous = 0, kAsynchronous = 1 };

struct StagedWeights {
  WeightVersion version;
  Bytes payload;
};

struct RolloutInstanceState {
  std::uint32_t instance_id = 0;
  WeightVersion active_version;
  bool generating = false;
  std::optional<StagedWeights> staged;
};

struct TransferHandle {
  WeightVersion version;
};

struct SwapResult {
  bool swapped = false;
  WeightVersion new_version;
};

/// Weight-version bookkeeping between the trainer (sender) and the rollout
/// instances (receivers).
///
/// An instance's active version changes only at a generation boundary
/// (maybe_swap), or immediately when it is idle during a synchronous
/// submission. Staging is latest-wins. Transitions are serialized by one
/// mutex, so the object may be driven from several threads.
class WeightCoordinator {
 public:
  WeightCoordinator(TransferMode mode, std::uint32_t num_instances);

  TransferMode mode() const { return mode_; }
  std::uint32_t num_instances() const { return static_cast<std::uint32_t>(instances_.size()); }

  /// Synchronous: stages on every instance, swaps the idle ones, and blocks
  /// until all instances run `version`. Asynchronous: records the transfer as
  /// in flight and returns at once; complete_transfer() lands it.
  /// Errors: kStaleSubmission (version <= last submitted), kChannelBusy
  /// (asynchronous, a transfer already in flight).
  TransferHandle submit_weights(WeightVersion version, Bytes payload);

  /// Asynchronous transfer has reached host memory: stage on every instance.
  void complete_transfer(const TransferHandle& handle);
  std::optional<WeightVersion> in_flight() const;
  std::optional<WeightVersion> last_submitted() const;

  /// Errors: kVersionRegression when version is not newer than both the
  /// active and any staged version.
  void stage_weights(std::uint32_t instance, WeightVersion version, Bytes payload);
  void begin_generation(std::uint32_t instance);
  /// Generation boundary. Applies staged weights if any.
  SwapResult maybe_swap(std::uint32_t instance);

  /// Staggered propagation: at most `concurrency_limit` instances hold
  /// staged-but-unswapped weights at a time; each swap releases the next
  /// pending instance. Requires 1 <= limit < num_instances.
  void begin_staggered(WeightVersion version, Bytes payload, std::uint32_t concurrency_limit);
  bool staggered_in_progress() const;
  /// Peak number of instances simultaneously inside a staggered window.
  std::uint32_t staggered_peak() const;

  RolloutInstanceState instance(std::uint32_t instance) const;
  /// Blocks until every instance runs at least `version` or the timeout expires.
  bool wait_all_at(WeightVersion version, std::chrono::milliseconds timeout) const;

 private:
  void check_instance(std::uint32_t instance) const;
  void stage_locked(std::uint32_t instance, WeightVersion version, const Bytes& payload);
  void refill_staggered_locked();

  TransferMode mode_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::vector<RolloutInstanceState> instances_;
  std::optional<WeightVersion> last_submitted_;
  std::optional<StagedWeights> in_flight_;

  struct Staggered {
    WeightVersion version;
    Bytes payload;
    std::uint32_t limit = 1;
    std::deque<std::uint32_t> pending;
    std::set<std::uint32_t> updating;
  };
  std::optional<Staggered> staggered_;
  std::uint32_t staggered_peak_ = 0;
};

enum class Admission : std::uint8_t { kAdmit, kReject };
enum class RejectPolicy : std::uint8_t { kDrop, kRequeueForDiscard };

/// Staleness gate on the trainer side: admits a sample iff
/// trainer_version - data_version <= bound.
class StalenessTracker {
 public:
  explicit StalenessTracker(StalenessBound bound, RejectPolicy policy = RejectPolicy::kDrop);

  StalenessBound bound() const { return bound_; }
  WeightVersion trainer_version() const { return trainer_version_; }
  /// Versions only move forward; a regression throws kVersionRegression.
  void set_trainer_version(WeightVersion version);

  void record_sample(GlobalIndex row, WeightVersion data_version);
  std::optional<WeightVersion> data_version(GlobalIndex row) const;

  /// Pure check, no bookkeeping.
  Admission admit_sample(WeightVersion sample_version) const;
  /// Check plus accounting for a recorded row: histogram on admit, drop
  /// counter or discard queue on reject.
  Admission consume(GlobalIndex row);

  std::uint64_t admitted() const { return admitted_; }
  std::uint64_t dropped() const { return dropped_; }
  const std::vector<GlobalIndex>& discard_queue() const { return discard_; }
  /// gap -> count over admitted samples.
  const std::map<std::uint64_t, std::uint64_t>& histogram() const { return histogram_; }
  std::uint64_t max_observed_gap() const;

 private:
  StalenessBound bound_;
  RejectPolicy policy_;
  WeightVersion trainer_version_;
  std::map<GlobalIndex, WeightVersion> data_versions_;
  std::map<std::uint64_t, std::uint64_t> histogram_;
  std::vector<GlobalIndex> discard_;
  std::uint64_t admitted_ = 0;
  std::uint64_t dropped_ = 0;
};

}  // namespace pipeflow
