#include "vfl/wire.hpp"

#include <bit>
#include <cstring>

namespace vfl {
namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int shift = 0; shift < 64; shift += 8) out.push_back(static_cast<std::uint8_t>(bits >> shift));
}

std::uint16_t get_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

bool known_kind(std::uint8_t k) { return k >= 1 && k <= 5; }

}  // namespace

std::string to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::Register: return "REGISTER";
    case MessageKind::Ack: return "ACK";
    case MessageKind::Broadcast: return "BROADCAST";
    case MessageKind::PushShare: return "PUSH_SHARE";
    case MessageKind::Shutdown: return "SHUTDOWN";
  }
  return "UNKNOWN";
}

bool Message::operator==(const Message& other) const {
  if (kind != other.kind || iteration != other.iteration || party_id != other.party_id ||
      payload.size() != other.payload.size())
    return false;
  for (std::size_t i = 0; i < payload.size(); ++i) {
    if (payload[i].size() != other.payload[i].size()) return false;
    if (payload[i].size() &&
        std::memcmp(payload[i].data(), other.payload[i].data(), sizeof(double) * payload[i].size()) != 0)
      return false;
  }
  return true;
}

std::size_t vector_count(MessageKind kind) {
  switch (kind) {
    case MessageKind::Broadcast: return 2;
    case MessageKind::Shutdown: return 0;
    default: return 1;
  }
}

std::vector<std::uint8_t> encode(const Message& message) {
  const std::size_t expected = vector_count(message.kind);
  if (message.payload.size() != expected)
    throw ProtocolError(to_string(message.kind) + " carries " + std::to_string(expected) + " vector(s), got " +
                        std::to_string(message.payload.size()));
  if (message.kind == MessageKind::Broadcast && message.payload[0].size() != message.payload[1].size())
    throw ProtocolError("BROADCAST vectors must have equal length");

  std::size_t doubles = 0;
  for (const auto& v : message.payload) doubles += static_cast<std::size_t>(v.size());
  if (doubles * 8 > kMaxPayloadBytes) throw ProtocolError("payload exceeds the frame size limit");

  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + doubles * 8);
  out.push_back(0x56);
  out.push_back(0x41);
  out.push_back(kWireVersion);
  out.push_back(static_cast<std::uint8_t>(message.kind));
  put_u32(out, message.iteration);
  put_u16(out, message.party_id);
  put_u32(out, static_cast<std::uint32_t>(doubles * 8));
  for (const auto& v : message.payload)
    for (Eigen::Index i = 0; i < v.size(); ++i) put_f64(out, v[i]);
  return out;
}

std::optional<Decoded> try_decode(std::span<const std::uint8_t> bytes) {
  // Validate whatever part of the header is present before asking for more.
  if (bytes.size() >= 1 && bytes[0] != 0x56) throw ProtocolError("bad frame magic");
  if (bytes.size() >= 2 && bytes[1] != 0x41) throw ProtocolError("bad frame magic");
  if (bytes.size() >= 3 && bytes[2] != kWireVersion)
    throw ProtocolError("unsupported wire version " + std::to_string(bytes[2]));
  if (bytes.size() >= 4 && !known_kind(bytes[3])) throw ProtocolError("unknown message kind " + std::to_string(bytes[3]));
  if (bytes.size() < kHeaderSize) return std::nullopt;

  const auto kind = static_cast<MessageKind>(bytes[3]);
  const std::uint32_t length = get_u32(bytes.data() + 10);
  if (length % 8 != 0) throw ProtocolError("payload length " + std::to_string(length) + " is not a multiple of 8");
  if (length > kMaxPayloadBytes) throw ProtocolError("payload length " + std::to_string(length) + " exceeds limit");
  const std::size_t doubles = length / 8;
  switch (kind) {
    case MessageKind::Shutdown:
      if (doubles != 0) throw ProtocolError("SHUTDOWN must not carry a payload");
      break;
    case MessageKind::Broadcast:
      if (doubles % 2 != 0) throw ProtocolError("BROADCAST payload must split into two equal vectors");
      break;
    default:
      break;
  }
  if (bytes.size() < kHeaderSize + length) return std::nullopt;

  Decoded d;
  d.consumed = kHeaderSize + length;
  d.message.kind = kind;
  d.message.iteration = get_u32(bytes.data() + 4);
  d.message.party_id = get_u16(bytes.data() + 8);
  const std::uint8_t* p = bytes.data() + kHeaderSize;
  const std::size_t count = vector_count(kind);
  const std::size_t each = count ? doubles / count : 0;
  for (std::size_t v = 0; v < count; ++v) {
    Vec vec(static_cast<Eigen::Index>(each));
    for (std::size_t i = 0; i < each; ++i, p += 8) vec[static_cast<Eigen::Index>(i)] = get_f64(p);
    d.message.payload.push_back(std::move(vec));
  }
  return d;
}

Message decode(std::span<const std::uint8_t> bytes) {
  auto d = try_decode(bytes);
  if (!d) throw ProtocolError("truncated frame");
  if (d->consumed != bytes.size()) throw ProtocolError("trailing bytes after frame");
  return std::move(d->message);
}

}  // namespace vfl
