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

#include <mutex>
#include <string>
#include <vector>

#include "pipeflow/data_plane.hpp"

namespace pipeflow::testing {

/// Records every notification it receives.
class RecordingSink final : public NotificationSink {
 public:
  explicit RecordingSink(std::string name) : name_(std::move(name)) {}

  std::string endpoint() const override { return name_; }
  void on_notify(const WriteNotification& n) override {
    std::lock_guard lock(mu_);
    received_.push_back(n);
  }
  std::vector<WriteNotification> received() const {
    std::lock_guard lock(mu_);
    return received_;
  }

 private:
  std::string name_;
  mutable std::mutex mu_;
  std::vector<WriteNotification> received_;
};

}  // namespace pipeflow::testing
