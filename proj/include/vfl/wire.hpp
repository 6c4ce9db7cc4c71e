#pragma once

#include "vfl/dataset.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vfl {

enum class MessageKind : std::uint8_t {
  Register = 1,
  Ack = 2,
  Broadcast = 3,
  PushShare = 4,
  Shutdown = 5,
};

std::string to_string(MessageKind kind);

struct Message {
  MessageKind kind = MessageKind::Shutdown;
  std::uint32_t iteration = 0;
  std::uint16_t party_id = 0;  // 0 is the coordinator
  std::vector<Vec> payload;

  bool operator==(const Message& other) const;
};

// Frame layout, all integers little-endian:
//   'V' 'A' | version | kind | iteration u32 | party_id u16 | payload_len u32 | doubles
inline constexpr std::size_t kHeaderSize = 14;
inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::uint32_t kMaxPayloadBytes = 1u << 30;

// Number of vectors a kind carries; BROADCAST splits its payload in two halves.
std::size_t vector_count(MessageKind kind);

std::vector<std::uint8_t> encode(const Message& message);

struct Decoded {
  Message message;
  std::size_t consumed = 0;
};

// nullopt when `bytes` holds only part of a frame; ProtocolError when the
// prefix can never become a valid frame.
std::optional<Decoded> try_decode(std::span<const std::uint8_t> bytes);

// Decodes exactly one complete frame.
Message decode(std::span<const std::uint8_t> bytes);

}  // namespace vfl
