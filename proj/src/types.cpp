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

#include "pipeflow/types.hpp"

#include <algorithm>
#include <set>

namespace pipeflow {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotOwnedRow: return "NotOwnedRow";
    case ErrorCode::kDuplicateWrite: return "DuplicateWrite";
    case ErrorCode::kMissingCell: return "MissingCell";
    case ErrorCode::kAlreadyRegistered: return "AlreadyRegistered";
    case ErrorCode::kEpochRegression: return "EpochRegression";
    case ErrorCode::kBadCoordinate: return "BadCoordinate";
    case ErrorCode::kWrongTask: return "WrongTask";
    case ErrorCode::kControllerUnreachable: return "ControllerUnreachable";
    case ErrorCode::kFetchInconsistent: return "FetchInconsistent";
    case ErrorCode::kInvalidColumn: return "InvalidColumn";
    case ErrorCode::kMemberUnreachable: return "MemberUnreachable";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kChannelBusy: return "ChannelBusy";
    case ErrorCode::kStaleSubmission: return "StaleSubmission";
    case ErrorCode::kVersionRegression: return "VersionRegression";
    case ErrorCode::kScenarioInvalid: return "ScenarioInvalid";
    case ErrorCode::kInfeasibleBudget: return "InfeasibleBudget";
    case ErrorCode::kSizeMismatch: return "SizeMismatch";
    case ErrorCode::kProtocol: return "Protocol";
    case ErrorCode::kTransport: return "Transport";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kConfig: return "Config";
  }
  return "Unknown";
}

bool TaskSpec::reads(std::string_view column) const {
  return std::find(input_columns.begin(), input_columns.end(), column) != input_columns.end();
}

bool TaskSpec::writes(std::string_view column) const {
  return std::find(output_columns.begin(), output_columns.end(), column) != output_columns.end();
}

void TaskSpec::validate() const {
  if (task_name.empty()) throw Error(ErrorCode::kInvalidArgument, "task name is empty");
  std::set<std::string_view> seen;
  for (const auto* list : {&input_columns, &output_columns}) {
    for (const auto& c : *list) {
      if (c.empty()) throw Error(ErrorCode::kInvalidArgument, "empty column id in task " + task_name);
      if (!seen.insert(c).second) {
        throw Error(ErrorCode::kInvalidArgument,
                    "column '" + c + "' repeated or both input and output in task " + task_name);
      }
    }
  }
}

}  // namespace pipeflow
