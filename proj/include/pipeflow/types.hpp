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

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pipeflow {

/// Row address inside one global batch. Dense in [0, G).
using GlobalIndex = std::uint32_t;

/// Batch epoch counter; (epoch, GlobalIndex) is unique across a run.
using Epoch = std::uint64_t;

/// Column name, e.g. "prompt", "response", "ref_log_prob".
using ColumnId = std::string;

/// Opaque cell payload. Zero-length payloads are valid cells.
using Bytes = std::vector<std::uint8_t>;

using UnitId = std::uint32_t;

/// Largest global batch a controller or run config accepts.
inline constexpr std::uint32_t kMaxGlobalSize = 1u << 20;

/// Simulated time in integer nanoseconds.
using Nanos = std::int64_t;

inline Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }
inline std::string to_string(const Bytes& b) { return std::string(b.begin(), b.end()); }

enum class ErrorCode : std::uint16_t {
  kNotOwnedRow = 1,
  kDuplicateWrite,
  kMissingCell,
  kAlreadyRegistered,
  kEpochRegression,
  kBadCoordinate,
  kWrongTask,
  kControllerUnreachable,
  kFetchInconsistent,
  kInvalidColumn,
  kMemberUnreachable,
  kLengthMismatch,
  kChannelBusy,
  kStaleSubmission,
  kVersionRegression,
  kScenarioInvalid,
  kInfeasibleBudget,
  kSizeMismatch,
  kProtocol,
  kTransport,
  kInvalidArgument,
  kConfig,
};

std::string_view error_code_name(ErrorCode code);

/// The single exception type used across the library; callers switch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// A DP group within one task.
struct ConsumerGroupId {
  std::string task_name;
  std::uint32_t group_ordinal = 0;

  friend bool operator==(const ConsumerGroupId&, const ConsumerGroupId&) = default;
  friend auto operator<=>(const ConsumerGroupId&, const ConsumerGroupId&) = default;
};

/// One RL task's data contract: which columns it reads and which it produces.
struct TaskSpec {
  std::string task_name;
  std::vector<ColumnId> input_columns;
  std::vector<ColumnId> output_columns;

  bool reads(std::string_view column) const;
  bool writes(std::string_view column) const;

  /// Throws kInvalidArgument when inputs and outputs overlap, a name is empty
  /// or a column is repeated.
  void validate() const;

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

/// Monotone weight version; 0 is the initial policy.
struct WeightVersion {
  std::uint64_t value = 0;

  WeightVersion next() const { return {value + 1}; }
  friend bool operator==(const WeightVersion&, const WeightVersion&) = default;
  friend auto operator<=>(const WeightVersion&, const WeightVersion&) = default;
};

/// Maximum allowed trainer_version - data_version.
struct StalenessBound {
  std::uint64_t s = 1;
};

}  // namespace pipeflow
