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

#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pipeflow/client.hpp"
#include "pipeflow/control_plane.hpp"
#include "pipeflow/data_plane.hpp"

// Binary framing shared by every plane.
//
//   frame  := length:u32be kind:u8 body
//   length := 1 + |body|
//
// Scalars are big-endian. str and bytes are u32be length + raw bytes.
// list<T> is u32be count followed by the items. A decoder rejects unknown
// kinds, truncated or trailing bytes, and out-of-range enum or bool values.
namespace pipeflow::wire {

inline constexpr std::size_t kHeaderSize = 5;
inline constexpr std::uint32_t kMaxFrameLength = 256u << 20;

enum class Kind : std::uint8_t {
  kPut = 0x01,
  kGet = 0x02,
  kRegister = 0x03,
  kReset = 0x04,
  kNotify = 0x10,
  kRequestBatch = 0x11,
  kWeightSubmit = 0x20,
  kWeightStaged = 0x21,
  kSwapReport = 0x22,
  kPutPrompts = 0x30,
  kGetExperience = 0x31,
  kWeightSyncNotify = 0x32,
  kFanout = 0x40,
  kAck = 0x80,
  kPutAck = 0x81,
  kGetReply = 0x82,
  kBatchReply = 0x83,
  kBatchData = 0x84,
  kError = 0xFF,
};

// body: list<(row:u32, column:str, value:bytes)>
struct PutRequest {
  std::vector<CellEntry> entries;
  friend bool operator==(const PutRequest&, const PutRequest&) = default;
};
// body: rows:list<u32> columns:list<str>
struct GetRequest {
  std::vector<GlobalIndex> rows;
  std::vector<ColumnId> columns;
  friend bool operator==(const GetRequest&, const GetRequest&) = default;
};
// body: endpoint:str  ("host:port" of the controller to notify)
struct RegisterRequest {
  std::string endpoint;
  friend bool operator==(const RegisterRequest&, const RegisterRequest&) = default;
};
// body: epoch:u64 global_size:u32 owned_rows:list<u32> columns:list<str>
// Storage units use owned_rows; controllers use global_size and columns.
struct ResetRequest {
  Epoch epoch = 0;
  std::uint32_t global_size = 0;
  std::vector<GlobalIndex> owned_rows;
  std::vector<ColumnId> columns;
  friend bool operator==(const ResetRequest&, const ResetRequest&) = default;
};
// body: unit:u32 epoch:u64 coordinates:list<(row:u32, column:str)>
struct NotifyRequest {
  WriteNotification notification;
  friend bool operator==(const NotifyRequest&, const NotifyRequest&) = default;
};
// body: task:str ordinal:u32 size:u32 policy:u8 token_counts:list<(row:u32, tokens:u64)>
struct RequestBatch {
  ConsumerGroupId consumer;
  std::uint32_t micro_batch_size = 1;
  PackingPolicy policy;
  friend bool operator==(const RequestBatch&, const RequestBatch&) = default;
};
// body: version:u64 payload:bytes
struct WeightSubmit {
  std::uint64_t version = 0;
  Bytes payload;
  friend bool operator==(const WeightSubmit&, const WeightSubmit&) = default;
};
// body: instance:u32 version:u64
struct WeightStaged {
  std::uint32_t instance = 0;
  std::uint64_t version = 0;
  friend bool operator==(const WeightStaged&, const WeightStaged&) = default;
};
// body: instance:u32 version:u64 swapped:u8
struct SwapReport {
  std::uint32_t instance = 0;
  std::uint64_t version = 0;
  bool swapped = false;
  friend bool operator==(const SwapReport&, const SwapReport&) = default;
};
// body: prompts:list<bytes>
struct PutPrompts {
  std::vector<Bytes> prompts;
  friend bool operator==(const PutPrompts&, const PutPrompts&) = default;
};
// body: task:str ordinal:u32 size:u32
struct GetExperience {
  ConsumerGroupId consumer;
  std::uint32_t micro_batch_size = 1;
  friend bool operator==(const GetExperience&, const GetExperience&) = default;
};
// body: version:u64
struct WeightSyncNotify {
  std::uint64_t version = 0;
  friend bool operator==(const WeightSyncNotify&, const WeightSyncNotify&) = default;
};
// body: meta envelope, where
//   meta     := epoch:u64 task:str rows:list<u32> columns:list<str>
//               locations:list<(row:u32, unit:u32)> issued_task:str issued_ordinal:u32
//   envelope := lengths:list<u32> order:list<(row:u32, column:str)> concatenated:bytes
struct Fanout {
  BatchMeta meta;
  VarlenEnvelope envelope;
  friend bool operator==(const Fanout&, const Fanout&) = default;
};
// body: empty
struct Ack {
  friend bool operator==(const Ack&, const Ack&) = default;
};
// body: count:u64
struct PutAck {
  std::uint64_t count = 0;
  friend bool operator==(const PutAck&, const PutAck&) = default;
};
// body: same layout as PutRequest
struct GetReply {
  std::vector<CellEntry> cells;
  friend bool operator==(const GetReply&, const GetReply&) = default;
};
// body: status:u8 [meta if status == granted]
struct BatchReplyMessage {
  BatchReply reply;
  friend bool operator==(const BatchReplyMessage&, const BatchReplyMessage&) = default;
};
// body: status:u8 [meta envelope if status == granted]
struct BatchData {
  BatchStatus status = BatchStatus::kNotReady;
  std::optional<Batch> batch;
  friend bool operator==(const BatchData&, const BatchData&) = default;
};
// body: code:u16 message:str
struct ErrorReply {
  std::uint16_t code = 0;
  std::string message;
  friend bool operator==(const ErrorReply&, const ErrorReply&) = default;
};

using Message =
    std::variant<PutRequest, GetRequest, RegisterRequest, ResetRequest, NotifyRequest, RequestBatch,
                 WeightSubmit, WeightStaged, SwapReport, PutPrompts, GetExperience,
                 WeightSyncNotify, Fanout, Ack, PutAck, GetReply, BatchReplyMessage, BatchData,
                 ErrorReply>;

Kind kind_of(const Message& message);
std::string_view kind_name(Kind kind);

/// Full frame including the length prefix.
Bytes encode(const Message& message);
/// Decodes one full frame; throws Error(kProtocol) on any malformation.
Message decode(std::span<const std::uint8_t> frame);
/// Decodes a body whose kind byte has already been read.
Message decode_body(std::uint8_t kind, std::span<const std::uint8_t> body);

/// Error reply for an exception, preserving the library error code.
ErrorReply to_error_reply(const Error& error);
/// Throws the Error carried by an ErrorReply.
[[noreturn]] void raise(const ErrorReply& reply);

}  // namespace pipeflow::wire
