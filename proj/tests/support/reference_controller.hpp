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

// Single-threaded reference model of a task controller, written independently
// of pipeflow::Controller. Used as the oracle for script-replay tests.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pipeflow/control_plane.hpp"

namespace pipeflow::testing {

struct ScriptEvent {
  enum class Type { kNotify, kRequest } type;
  // kNotify
  UnitId unit = 0;
  std::vector<Coordinate> coordinates;
  // kRequest
  std::uint32_t ordinal = 0;
  std::uint32_t size = 1;
};

struct ReferenceOutcome {
  BatchStatus status;
  std::vector<GlobalIndex> rows;
  friend bool operator==(const ReferenceOutcome&, const ReferenceOutcome&) = default;
};

class ReferenceController {
 public:
  ReferenceController(std::uint32_t g, std::vector<ColumnId> required, PackingPolicy policy)
      : g_(g), required_(std::move(required)), policy_(std::move(policy)) {}

  void notify(const std::vector<Coordinate>& coords) {
    for (const auto& c : coords) {
      if (std::count(required_.begin(), required_.end(), c.column)) written_[c.row].insert(c.column);
    }
  }

  std::set<GlobalIndex> ready() const {
    std::set<GlobalIndex> out;
    for (GlobalIndex r = 0; r < g_; ++r) {
      if (owner_.count(r)) continue;
      auto it = written_.find(r);
      const std::size_t have = it == written_.end() ? 0 : it->second.size();
      if (have == required_.size()) out.insert(r);
    }
    return out;
  }

  ReferenceOutcome request(std::uint32_t ordinal, std::uint32_t size) {
    if (owner_.size() == g_) return {BatchStatus::kEpochExhausted, {}};
    auto r = ready();
    std::size_t take;
    if (r.size() >= size) {
      take = size;
    } else if (!r.empty() && r.size() + owner_.size() == g_) {
      take = r.size();
    } else {
      return {BatchStatus::kNotReady, {}};
    }
    std::vector<GlobalIndex> rows = policy_.kind == PackingKind::kFifo
                                        ? std::vector<GlobalIndex>(r.begin(), std::next(r.begin(), take))
                                        : balanced(r, take, ordinal);
    for (auto row : rows) owner_[row] = ordinal;
    return {BatchStatus::kGranted, rows};
  }

 private:
  double tok(GlobalIndex r) const {
    auto it = policy_.token_counts.find(r);
    return it == policy_.token_counts.end() ? 0.0 : static_cast<double>(it->second);
  }

  std::vector<GlobalIndex> balanced(const std::set<GlobalIndex>& ready_set, std::size_t take,
                                    std::uint32_t ordinal) {
    totals_.emplace(ordinal, 0.0);
    double mean = 0;
    for (const auto& [o, t] : totals_) mean += t;
    mean /= static_cast<double>(totals_.size());
    const double mine = totals_[ordinal];
    double share = 0;
    for (auto r : ready_set) share += tok(r);
    share = share * static_cast<double>(take) / static_cast<double>(ready_set.size());
    const double target = std::max(0.0, share + mean - mine);

    std::vector<GlobalIndex> left(ready_set.begin(), ready_set.end());
    std::vector<GlobalIndex> chosen;
    // First pick by extreme token count, smallest index among equals.
    std::size_t first = 0;
    for (std::size_t i = 0; i < left.size(); ++i) {
      const bool better = mine <= mean ? tok(left[i]) > tok(left[first]) : tok(left[i]) < tok(left[first]);
      if (better) first = i;
    }
    double sum = tok(left[first]);
    chosen.push_back(left[first]);
    left.erase(left.begin() + static_cast<std::ptrdiff_t>(first));
    while (chosen.size() < take) {
      const double goal = target * static_cast<double>(chosen.size() + 1) / static_cast<double>(take);
      std::size_t best = 0;
      for (std::size_t i = 1; i < left.size(); ++i) {
        if (std::abs(sum + tok(left[i]) - goal) < std::abs(sum + tok(left[best]) - goal)) best = i;
      }
      sum += tok(left[best]);
      chosen.push_back(left[best]);
      left.erase(left.begin() + static_cast<std::ptrdiff_t>(best));
    }
    for (auto r : chosen) totals_[ordinal] += tok(r);
    std::sort(chosen.begin(), chosen.end());
    return chosen;
  }

  std::uint32_t g_;
  std::vector<ColumnId> required_;
  PackingPolicy policy_;
  std::map<GlobalIndex, std::set<ColumnId>> written_;
  std::map<GlobalIndex, std::uint32_t> owner_;
  std::map<std::uint32_t, double> totals_;
};

}  // namespace pipeflow::testing
