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

#include "pipeflow/data_plane.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <thread>

#include "support/test_sinks.hpp"

namespace pipeflow {
namespace {

using testing::RecordingSink;

std::shared_ptr<StorageUnit> unit0_of_eight() {
  PartitionMap pm(2, 8);
  return std::make_shared<StorageUnit>(0, 0, pm.rows_of(0));
}

TEST(PartitionMapTest, ModuloAssignment) {
  PartitionMap pm(2, 8);
  EXPECT_EQ(pm.rows_of(0), (std::vector<GlobalIndex>{0, 2, 4, 6}));
  EXPECT_EQ(pm.rows_of(1), (std::vector<GlobalIndex>{1, 3, 5, 7}));
  EXPECT_EQ(pm.unit_of(7), 1u);
  EXPECT_THROW(pm.unit_of(8), Error);
  EXPECT_THROW(PartitionMap(0, 8), Error);
}

TEST(PartitionMapTest, TotalAndDisjointForAllSmallShapes) {
  for (std::uint32_t g = 0; g <= 40; ++g) {
    for (std::uint32_t n = 1; n <= 9; ++n) {
      PartitionMap pm(n, g);
      std::vector<int> hits(g, 0);
      for (UnitId u = 0; u < n; ++u) {
        for (auto r : pm.rows_of(u)) {
          ASSERT_LT(r, g);
          ASSERT_EQ(pm.unit_of(r), u);
          ++hits[r];
        }
      }
      for (std::uint32_t r = 0; r < g; ++r) ASSERT_EQ(hits[r], 1) << "g=" << g << " n=" << n;
    }
  }
}

TEST(StorageUnitTest, SingleCellPutNotifiesOnce) {
  auto unit = unit0_of_eight();
  auto sink = std::make_shared<RecordingSink>("c0");
  unit->register_controller(sink);
  EXPECT_EQ(unit->put({{0, "prompt", to_bytes("hi")}}), 1u);
  auto got = sink->received();
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0].unit_id, 0u);
  EXPECT_EQ(got[0].coordinates, (std::vector<Coordinate>{{0, "prompt"}}));
}

TEST(StorageUnitTest, EmptyPutDispatchesNothing) {
  auto unit = unit0_of_eight();
  auto sink = std::make_shared<RecordingSink>("c0");
  unit->register_controller(sink);
  EXPECT_EQ(unit->put({}), 0u);
  EXPECT_TRUE(sink->received().empty());
}

TEST(StorageUnitTest, ForeignRowIsRejected) {
  auto unit = unit0_of_eight();
  try {
    unit->put({{7, "response", to_bytes("x")}});
    FAIL() << "expected NotOwnedRow";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotOwnedRow);
  }
  EXPECT_EQ(unit->cell_count(), 0u);
}

TEST(StorageUnitTest, WriteOnceKeepsOriginalValue) {
  auto unit = unit0_of_eight();
  unit->put({{2, "prompt", to_bytes("first")}});
  try {
    unit->put({{4, "prompt", to_bytes("ok")}, {2, "prompt", to_bytes("second")}});
    FAIL() << "expected DuplicateWrite";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDuplicateWrite);
  }
  // All-or-nothing: row 4 was not written either.
  EXPECT_EQ(unit->cell_count(), 1u);
  EXPECT_EQ(to_string(unit->get({2}, {"prompt"})[0].value), "first");
  EXPECT_THROW(unit->put({{4, "p", {}}, {4, "p", {}}}), Error);
}

TEST(StorageUnitTest, GetIsRowsOuterColumnsInner) {
  auto unit = std::make_shared<StorageUnit>(0, 0, std::vector<GlobalIndex>{0, 1});
  unit->put({{1, "response", to_bytes("r1")},
             {0, "prompt", to_bytes("p0")},
             {1, "prompt", to_bytes("p1")},
             {0, "response", to_bytes("r0")}});
  auto cells = unit->get({0, 1}, {"prompt", "response"});
  ASSERT_EQ(cells.size(), 4u);
  std::vector<std::pair<GlobalIndex, std::string>> order;
  for (const auto& c : cells) order.emplace_back(c.row, c.column);
  EXPECT_EQ(order, (std::vector<std::pair<GlobalIndex, std::string>>{
                       {0, "prompt"}, {0, "response"}, {1, "prompt"}, {1, "response"}}));
  EXPECT_EQ(to_string(cells[3].value), "r1");
  EXPECT_EQ(unit->get({0, 1}, {"prompt", "response"}), cells);
}

TEST(StorageUnitTest, ReadYourWriteAndMissingCell) {
  auto unit = unit0_of_eight();
  unit->put({{0, "prompt", to_bytes("hi")}});
  auto cells = unit->get({0}, {"prompt"});
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0], (CellEntry{0, "prompt", to_bytes("hi")}));
  try {
    unit->get({2}, {"response"});
    FAIL() << "expected MissingCell";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingCell);
  }
}

TEST(StorageUnitTest, ZeroLengthCellIsStored) {
  auto unit = unit0_of_eight();
  unit->put({{6, "prompt", {}}});
  EXPECT_TRUE(unit->get({6}, {"prompt"})[0].value.empty());
}

TEST(StorageUnitTest, RegisterTwiceIsRejected) {
  auto unit = unit0_of_eight();
  unit->register_controller(std::make_shared<RecordingSink>("c0"));
  try {
    unit->register_controller(std::make_shared<RecordingSink>("c0"));
    FAIL() << "expected AlreadyRegistered";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kAlreadyRegistered);
  }
}

TEST(StorageUnitTest, BroadcastsIdenticalNotificationToAllControllers) {
  auto unit = unit0_of_eight();
  auto a = std::make_shared<RecordingSink>("a");
  auto b = std::make_shared<RecordingSink>("b");
  unit->register_controller(a);
  unit->register_controller(b);
  unit->put({{2, "response", to_bytes("r")}, {4, "response", to_bytes("s")}});
  ASSERT_EQ(a->received().size(), 1u);
  EXPECT_EQ(a->received(), b->received());
}

TEST(StorageUnitTest, LateRegistrationGetsSnapshot) {
  auto unit = unit0_of_eight();
  unit->put({{0, "prompt", to_bytes("a")}, {2, "prompt", to_bytes("b")}});
  auto late = std::make_shared<RecordingSink>("late");
  unit->register_controller(late);
  auto got = late->received();
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0].coordinates, (std::vector<Coordinate>{{0, "prompt"}, {2, "prompt"}}));
}

TEST(StorageUnitTest, ResetEpochClearsAndRestartsWriteOnce) {
  auto unit = unit0_of_eight();
  auto sink = std::make_shared<RecordingSink>("c");
  unit->register_controller(sink);
  unit->put({{0, "prompt", to_bytes("old")}});
  unit->reset_epoch(1, {0, 1});
  EXPECT_EQ(unit->epoch(), 1u);
  EXPECT_EQ(unit->cell_count(), 0u);
  EXPECT_EQ(unit->owned_rows(), (std::set<GlobalIndex>{0, 1}));
  unit->put({{0, "prompt", to_bytes("new")}});
  EXPECT_EQ(to_string(unit->get({0}, {"prompt"})[0].value), "new");
  EXPECT_EQ(sink->received().back().epoch, 1u);
  try {
    unit->reset_epoch(1, {});
    FAIL() << "expected EpochRegression";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEpochRegression);
  }
}

// Many writers on disjoint cells: every registered sink sees exactly the
// written coordinates, as a multiset.
TEST(StorageUnitTest, NotificationCompletenessUnderConcurrentPuts) {
  constexpr GlobalIndex kRows = 64;
  std::vector<GlobalIndex> rows(kRows);
  std::iota(rows.begin(), rows.end(), 0);
  auto unit = std::make_shared<StorageUnit>(0, 0, rows);
  auto a = std::make_shared<RecordingSink>("a");
  auto b = std::make_shared<RecordingSink>("b");
  unit->register_controller(a);
  unit->register_controller(b);

  const std::vector<std::string> columns = {"prompt", "response", "reward"};
  std::vector<std::thread> writers;
  for (std::size_t t = 0; t < columns.size(); ++t) {
    writers.emplace_back([&, t] {
      std::mt19937 rng(static_cast<unsigned>(t));
      auto order = rows;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i = 0; i < order.size(); i += 3) {
        std::vector<CellEntry> entries;
        for (std::size_t j = i; j < std::min(order.size(), i + 3); ++j) {
          entries.push_back({order[j], columns[t], Bytes(order[j] % 5, 0x7f)});
        }
        unit->put(entries);
      }
    });
  }
  for (auto& w : writers) w.join();

  std::vector<Coordinate> expected;
  for (auto r : rows) {
    for (const auto& c : columns) expected.push_back({r, c});
  }
  std::sort(expected.begin(), expected.end());
  for (const auto& sink : {a, b}) {
    std::vector<Coordinate> seen;
    for (const auto& n : sink->received()) seen.insert(seen.end(), n.coordinates.begin(), n.coordinates.end());
    std::sort(seen.begin(), seen.end());
    EXPECT_EQ(seen, expected);
  }
}

}  // namespace
}  // namespace pipeflow
