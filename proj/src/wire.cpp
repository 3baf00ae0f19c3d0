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

#include "pipeflow/wire.hpp"

#include <type_traits>

namespace pipeflow::wire {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { be(v, 2); }
  void u32(std::uint32_t v) { be(v, 4); }
  void u64(std::uint64_t v) { be(v, 8); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void bytes(const Bytes& b) {
    u32(static_cast<std::uint32_t>(b.size()));
    out_.insert(out_.end(), b.begin(), b.end());
  }
  template <typename T, typename F>
  void list(const std::vector<T>& items, F&& item) {
    u32(static_cast<std::uint32_t>(items.size()));
    for (const auto& i : items) item(i);
  }
  Bytes take() { return std::move(out_); }

 private:
  void be(std::uint64_t v, int width) {
    for (int i = width - 1; i >= 0; --i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(be(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(be(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(be(4)); }
  std::uint64_t u64() { return be(8); }
  bool boolean() {
    auto v = u8();
    if (v > 1) fail("bool out of range");
    return v == 1;
  }
  std::string str() {
    auto n = u32();
    need(n);
    std::string s(in_.begin() + pos_, in_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  Bytes bytes() {
    auto n = u32();
    need(n);
    Bytes b(in_.begin() + pos_, in_.begin() + pos_ + n);
    pos_ += n;
    return b;
  }
  /// min_item_size bounds the count against the remaining input so a forged
  /// count cannot trigger a huge allocation.
  template <typename F>
  auto list(std::size_t min_item_size, F&& item) {
    auto n = u32();
    if (min_item_size > 0 && n > remaining() / min_item_size) fail("list count exceeds frame");
    std::vector<std::invoke_result_t<F&>> out;
    out.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) out.push_back(item());
    return out;
  }
  void finish() const {
    if (pos_ != in_.size()) fail("trailing bytes in body");
  }
  std::size_t remaining() const { return in_.size() - pos_; }
  [[noreturn]] static void fail(const std::string& why) {
    throw Error(ErrorCode::kProtocol, "malformed frame: " + why);
  }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) fail("truncated");
  }
  std::uint64_t be(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v = (v << 8) | in_[pos_++];
    return v;
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_cells(Writer& w, const std::vector<CellEntry>& cells) {
  w.list(cells, [&](const CellEntry& c) {
    w.u32(c.row);
    w.str(c.column);
    w.bytes(c.value);
  });
}

std::vector<CellEntry> read_cells(Reader& r) {
  return r.list(12, [&] {
    CellEntry c;
    c.row = r.u32();
    c.column = r.str();
    c.value = r.bytes();
    return c;
  });
}

std::vector<ColumnId> read_columns(Reader& r) {
  return r.list(4, [&] { return r.str(); });
}

std::vector<GlobalIndex> read_rows(Reader& r) {
  return r.list(4, [&] { return r.u32(); });
}

void write_meta(Writer& w, const BatchMeta& m) {
  w.u64(m.epoch);
  w.str(m.task_name);
  w.list(m.rows, [&](GlobalIndex r) { w.u32(r); });
  w.list(m.columns, [&](const ColumnId& c) { w.str(c); });
  w.u32(static_cast<std::uint32_t>(m.locations.size()));
  for (const auto& [row, unit] : m.locations) {
    w.u32(row);
    w.u32(unit);
  }
  w.str(m.issued_to.task_name);
  w.u32(m.issued_to.group_ordinal);
}

BatchMeta read_meta(Reader& r) {
  BatchMeta m;
  m.epoch = r.u64();
  m.task_name = r.str();
  m.rows = read_rows(r);
  m.columns = read_columns(r);
  auto locs = r.list(8, [&] {
    auto row = r.u32();
    auto unit = r.u32();
    return std::pair<GlobalIndex, UnitId>(row, unit);
  });
  for (const auto& [row, unit] : locs) {
    if (!m.locations.emplace(row, unit).second) Reader::fail("duplicate location row");
  }
  m.issued_to.task_name = r.str();
  m.issued_to.group_ordinal = r.u32();
  return m;
}

void write_envelope(Writer& w, const VarlenEnvelope& e) {
  w.list(e.lengths, [&](std::uint32_t n) { w.u32(n); });
  w.list(e.order, [&](const Coordinate& c) {
    w.u32(c.row);
    w.str(c.column);
  });
  w.bytes(e.concatenated);
}

VarlenEnvelope read_envelope(Reader& r) {
  VarlenEnvelope e;
  e.lengths = r.list(4, [&] { return r.u32(); });
  e.order = r.list(8, [&] {
    Coordinate c;
    c.row = r.u32();
    c.column = r.str();
    return c;
  });
  e.concatenated = r.bytes();
  return e;
}

BatchStatus read_status(Reader& r) {
  auto s = r.u8();
  if (s > static_cast<std::uint8_t>(BatchStatus::kEpochExhausted)) Reader::fail("bad batch status");
  return static_cast<BatchStatus>(s);
}

PackingPolicy read_policy(Reader& r) {
  PackingPolicy p;
  auto kind = r.u8();
  if (kind > static_cast<std::uint8_t>(PackingKind::kTokenBalanced)) Reader::fail("bad policy");
  p.kind = static_cast<PackingKind>(kind);
  auto counts = r.list(12, [&] {
    auto row = r.u32();
    auto tokens = r.u64();
    return std::pair<GlobalIndex, std::uint64_t>(row, tokens);
  });
  for (const auto& [row, tokens] : counts) {
    if (!p.token_counts.emplace(row, tokens).second) Reader::fail("duplicate token count row");
  }
  return p;
}

void write_body(Writer& w, const Message& message) {
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, PutRequest>) {
          write_cells(w, m.entries);
        } else if constexpr (std::is_same_v<T, GetRequest>) {
          w.list(m.rows, [&](GlobalIndex r) { w.u32(r); });
          w.list(m.columns, [&](const ColumnId& c) { w.str(c); });
        } else if constexpr (std::is_same_v<T, RegisterRequest>) {
          w.str(m.endpoint);
        } else if constexpr (std::is_same_v<T, ResetRequest>) {
          w.u64(m.epoch);
          w.u32(m.global_size);
          w.list(m.owned_rows, [&](GlobalIndex r) { w.u32(r); });
          w.list(m.columns, [&](const ColumnId& c) { w.str(c); });
        } else if constexpr (std::is_same_v<T, NotifyRequest>) {
          w.u32(m.notification.unit_id);
          w.u64(m.notification.epoch);
          w.list(m.notification.coordinates, [&](const Coordinate& c) {
            w.u32(c.row);
            w.str(c.column);
          });
        } else if constexpr (std::is_same_v<T, RequestBatch>) {
          w.str(m.consumer.task_name);
          w.u32(m.consumer.group_ordinal);
          w.u32(m.micro_batch_size);
          w.u8(static_cast<std::uint8_t>(m.policy.kind));
          w.u32(static_cast<std::uint32_t>(m.policy.token_counts.size()));
          for (const auto& [row, tokens] : m.policy.token_counts) {
            w.u32(row);
            w.u64(tokens);
          }
        } else if constexpr (std::is_same_v<T, WeightSubmit>) {
          w.u64(m.version);
          w.bytes(m.payload);
        } else if constexpr (std::is_same_v<T, WeightStaged>) {
          w.u32(m.instance);
          w.u64(m.version);
        } else if constexpr (std::is_same_v<T, SwapReport>) {
          w.u32(m.instance);
          w.u64(m.version);
          w.u8(m.swapped ? 1 : 0);
        } else if constexpr (std::is_same_v<T, PutPrompts>) {
          w.list(m.prompts, [&](const Bytes& b) { w.bytes(b); });
        } else if constexpr (std::is_same_v<T, GetExperience>) {
          w.str(m.consumer.task_name);
          w.u32(m.consumer.group_ordinal);
          w.u32(m.micro_batch_size);
        } else if constexpr (std::is_same_v<T, WeightSyncNotify>) {
          w.u64(m.version);
        } else if constexpr (std::is_same_v<T, Fanout>) {
          write_meta(w, m.meta);
          write_envelope(w, m.envelope);
        } else if constexpr (std::is_same_v<T, Ack>) {
        } else if constexpr (std::is_same_v<T, PutAck>) {
          w.u64(m.count);
        } else if constexpr (std::is_same_v<T, GetReply>) {
          write_cells(w, m.cells);
        } else if constexpr (std::is_same_v<T, BatchReplyMessage>) {
          w.u8(static_cast<std::uint8_t>(m.reply.status));
          if (m.reply.granted()) write_meta(w, m.reply.meta);
        } else if constexpr (std::is_same_v<T, BatchData>) {
          w.u8(static_cast<std::uint8_t>(m.status));
          if (m.status == BatchStatus::kGranted) {
            if (!m.batch) throw Error(ErrorCode::kProtocol, "granted BatchData without batch");
            write_meta(w, m.batch->meta);
            write_envelope(w, encode_varlen(m.batch->cells));
          }
        } else if constexpr (std::is_same_v<T, ErrorReply>) {
          w.u16(m.code);
          w.str(m.message);
        }
      },
      message);
}

}  // namespace

Kind kind_of(const Message& message) {
  static constexpr Kind kinds[] = {
      Kind::kPut,          Kind::kGet,         Kind::kRegister,   Kind::kReset,
      Kind::kNotify,       Kind::kRequestBatch, Kind::kWeightSubmit, Kind::kWeightStaged,
      Kind::kSwapReport,   Kind::kPutPrompts,  Kind::kGetExperience, Kind::kWeightSyncNotify,
      Kind::kFanout,       Kind::kAck,         Kind::kPutAck,     Kind::kGetReply,
      Kind::kBatchReply,   Kind::kBatchData,   Kind::kError};
  static_assert(std::size(kinds) == std::variant_size_v<Message>);
  return kinds[message.index()];
}

std::string_view kind_name(Kind kind) {
  switch (kind) {
    case Kind::kPut: return "PUT";
    case Kind::kGet: return "GET";
    case Kind::kRegister: return "REGISTER";
    case Kind::kReset: return "RESET";
    case Kind::kNotify: return "NOTIFY";
    case Kind::kRequestBatch: return "REQUEST_BATCH";
    case Kind::kWeightSubmit: return "WEIGHT_SUBMIT";
    case Kind::kWeightStaged: return "WEIGHT_STAGED";
    case Kind::kSwapReport: return "SWAP_REPORT";
    case Kind::kPutPrompts: return "PUT_PROMPTS";
    case Kind::kGetExperience: return "GET_EXPERIENCE";
    case Kind::kWeightSyncNotify: return "WEIGHT_SYNC_NOTIFY";
    case Kind::kFanout: return "FANOUT";
    case Kind::kAck: return "ACK";
    case Kind::kPutAck: return "PUT_ACK";
    case Kind::kGetReply: return "GET_REPLY";
    case Kind::kBatchReply: return "BATCH_REPLY";
    case Kind::kBatchData: return "BATCH_DATA";
    case Kind::kError: return "ERROR";
  }
  return "UNKNOWN";
}

Bytes encode(const Message& message) {
  Writer body;
  write_body(body, message);
  Bytes b = body.take();
  if (b.size() + 1 > kMaxFrameLength) throw Error(ErrorCode::kProtocol, "frame too large");
  Writer frame;
  frame.u32(static_cast<std::uint32_t>(b.size() + 1));
  frame.u8(static_cast<std::uint8_t>(kind_of(message)));
  Bytes out = frame.take();
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

Message decode(std::span<const std::uint8_t> frame) {
  if (frame.size() < kHeaderSize) Reader::fail("shorter than header");
  Reader header(frame.first(kHeaderSize));
  auto length = header.u32();
  auto kind = header.u8();
  if (length == 0 || length > kMaxFrameLength) Reader::fail("bad length prefix");
  if (frame.size() - 4 != length) Reader::fail("length prefix does not match frame size");
  return decode_body(kind, frame.subspan(kHeaderSize));
}

Message decode_body(std::uint8_t kind, std::span<const std::uint8_t> body) {
  Reader r(body);
  Message out;
  switch (static_cast<Kind>(kind)) {
    case Kind::kPut: out = PutRequest{read_cells(r)}; break;
    case Kind::kGet: {
      GetRequest m;
      m.rows = read_rows(r);
      m.columns = read_columns(r);
      out = std::move(m);
      break;
    }
    case Kind::kRegister: out = RegisterRequest{r.str()}; break;
    case Kind::kReset: {
      ResetRequest m;
      m.epoch = r.u64();
      m.global_size = r.u32();
      m.owned_rows = read_rows(r);
      m.columns = read_columns(r);
      out = std::move(m);
      break;
    }
    case Kind::kNotify: {
      NotifyRequest m;
      m.notification.unit_id = r.u32();
      m.notification.epoch = r.u64();
      m.notification.coordinates = r.list(8, [&] {
        Coordinate c;
        c.row = r.u32();
        c.column = r.str();
        return c;
      });
      out = std::move(m);
      break;
    }
    case Kind::kRequestBatch: {
      RequestBatch m;
      m.consumer.task_name = r.str();
      m.consumer.group_ordinal = r.u32();
      m.micro_batch_size = r.u32();
      m.policy = read_policy(r);
      out = std::move(m);
      break;
    }
    case Kind::kWeightSubmit: {
      WeightSubmit m;
      m.version = r.u64();
      m.payload = r.bytes();
      out = std::move(m);
      break;
    }
    case Kind::kWeightStaged: {
      WeightStaged m;
      m.instance = r.u32();
      m.version = r.u64();
      out = m;
      break;
    }
    case Kind::kSwapReport: {
      SwapReport m;
      m.instance = r.u32();
      m.version = r.u64();
      m.swapped = r.boolean();
      out = m;
      break;
    }
    case Kind::kPutPrompts: out = PutPrompts{r.list(4, [&] { return r.bytes(); })}; break;
    case Kind::kGetExperience: {
      GetExperience m;
      m.consumer.task_name = r.str();
      m.consumer.group_ordinal = r.u32();
      m.micro_batch_size = r.u32();
      out = std::move(m);
      break;
    }
    case Kind::kWeightSyncNotify: out = WeightSyncNotify{r.u64()}; break;
    case Kind::kFanout: {
      Fanout m;
      m.meta = read_meta(r);
      m.envelope = read_envelope(r);
      out = std::move(m);
      break;
    }
    case Kind::kAck: out = Ack{}; break;
    case Kind::kPutAck: out = PutAck{r.u64()}; break;
    case Kind::kGetReply: out = GetReply{read_cells(r)}; break;
    case Kind::kBatchReply: {
      BatchReplyMessage m;
      m.reply.status = read_status(r);
      if (m.reply.granted()) m.reply.meta = read_meta(r);
      out = std::move(m);
      break;
    }
    case Kind::kBatchData: {
      BatchData m;
      m.status = read_status(r);
      if (m.status == BatchStatus::kGranted) {
        Batch b;
        b.meta = read_meta(r);
        try {
          b.cells = decode_varlen(read_envelope(r));
        } catch (const Error& e) {
          Reader::fail(e.what());
        }
        m.batch = std::move(b);
      }
      out = std::move(m);
      break;
    }
    case Kind::kError: {
      ErrorReply m;
      m.code = r.u16();
      m.message = r.str();
      out = std::move(m);
      break;
    }
    default: Reader::fail("unknown message kind " + std::to_string(kind));
  }
  r.finish();
  return out;
}

ErrorReply to_error_reply(const Error& error) {
  return {static_cast<std::uint16_t>(error.code()), error.what()};
}

void raise(const ErrorReply& reply) {
  throw Error(static_cast<ErrorCode>(reply.code), reply.message);
}

}  // namespace pipeflow::wire
