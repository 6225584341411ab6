#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include "seek/error.hpp"
#include "seek/model.hpp"

namespace seek::protocol {

inline constexpr std::uint32_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderBytes = 9;
// Upper bound on one payload; larger length fields are treated as corrupt.
inline constexpr std::uint32_t kMaxPayloadBytes = 1u << 28;

enum class Tag : std::uint8_t {
  Hello = 0x01,
  HelloAck = 0x02,
  EncInput = 0x10,
  MaskedPre = 0x11,
  NonlinearShare = 0x12,
  EncPost = 0x13,
  LabelResult = 0x14,
  Error = 0x7F,
};

inline bool known_tag(std::uint8_t t) {
  switch (static_cast<Tag>(t)) {
    case Tag::Hello:
    case Tag::HelloAck:
    case Tag::EncInput:
    case Tag::MaskedPre:
    case Tag::NonlinearShare:
    case Tag::EncPost:
    case Tag::LabelResult:
    case Tag::Error:
      return true;
  }
  return false;
}

inline std::string to_string(Tag t) {
  switch (t) {
    case Tag::Hello: return "Hello";
    case Tag::HelloAck: return "HelloAck";
    case Tag::EncInput: return "EncInput";
    case Tag::MaskedPre: return "MaskedPre";
    case Tag::NonlinearShare: return "NonlinearShare";
    case Tag::EncPost: return "EncPost";
    case Tag::LabelResult: return "LabelResult";
    case Tag::Error: return "Error";
  }
  return "?";
}

// Error frame codes (payload[0]).
enum class ErrorCode : std::uint32_t {
  Malformed = 1,
  VersionMismatch = 2,
  OutOfOrder = 3,
};

// One message. Blobs (EncInput, EncPost) carry the session nonce in payload[0].
struct Frame {
  Tag tag = Tag::Error;
  LayerId layer = 0;
  std::vector<double> payload;

  bool operator==(const Frame&) const = default;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(p[k]) << (8 * k);
  return v;
}

}  // namespace detail

struct Header {
  Tag tag;
  LayerId layer;
  std::uint32_t length;  // payload bytes
};

inline std::vector<std::uint8_t> encode(const Frame& f) {
  const std::size_t bytes = f.payload.size() * 8;
  if (bytes > kMaxPayloadBytes) throw ProtocolError("frame payload too large", f.layer);
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + bytes);
  out.push_back(static_cast<std::uint8_t>(f.tag));
  detail::put_u32(out, f.layer);
  detail::put_u32(out, static_cast<std::uint32_t>(bytes));
  for (double v : f.payload) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(u >> (8 * k)));
  }
  return out;
}

// Header check shared by the in-memory decoder and the stream reader.
inline Header decode_header(const std::uint8_t* p) {
  Header h{static_cast<Tag>(p[0]), detail::get_u32(p + 1), detail::get_u32(p + 5)};
  if (!known_tag(p[0])) throw ProtocolError("unknown frame tag " + std::to_string(p[0]), h.layer);
  if (h.length % 8 != 0) throw ProtocolError("payload length not a multiple of 8", h.layer);
  if (h.length > kMaxPayloadBytes) throw ProtocolError("payload length too large", h.layer);
  return h;
}

inline std::vector<double> decode_payload(const std::uint8_t* p, std::size_t bytes) {
  std::vector<double> out(bytes / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t u = 0;
    for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(p[8 * i + k]) << (8 * k);
    out[i] = std::bit_cast<double>(u);
  }
  return out;
}

// Exactly one frame; trailing or missing bytes are an error.
inline Frame decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderBytes) throw ProtocolError("truncated frame header");
  const Header h = decode_header(bytes.data());
  if (bytes.size() != kHeaderBytes + h.length) throw ProtocolError("frame length mismatch", h.layer);
  return Frame{h.tag, h.layer, decode_payload(bytes.data() + kHeaderBytes, h.length)};
}

inline Frame error_frame(ErrorCode code, LayerId layer) {
  return Frame{Tag::Error, layer, {static_cast<double>(code)}};
}

// Handshake acknowledgement: [version, output id, n_classes, input rank, dims...].
struct ModelInfo {
  std::uint32_t version = kProtocolVersion;
  LayerId output = 0;
  std::size_t num_classes = 0;
  Shape input_shape;
};

inline Frame hello_ack(const ModelGraph& model) {
  Frame f{Tag::HelloAck, 0, {}};
  f.payload.push_back(kProtocolVersion);
  f.payload.push_back(model.output_id());
  f.payload.push_back(static_cast<double>(model.num_classes()));
  f.payload.push_back(static_cast<double>(model.input_shape().size()));
  for (std::size_t d : model.input_shape()) f.payload.push_back(static_cast<double>(d));
  return f;
}

inline ModelInfo parse_hello_ack(const Frame& f) {
  if (f.tag != Tag::HelloAck || f.payload.size() < 4) throw ProtocolError("malformed handshake acknowledgement");
  ModelInfo info;
  info.version = static_cast<std::uint32_t>(f.payload[0]);
  info.output = static_cast<LayerId>(f.payload[1]);
  info.num_classes = static_cast<std::size_t>(f.payload[2]);
  const auto rank = static_cast<std::size_t>(f.payload[3]);
  if (f.payload.size() != 4 + rank) throw ProtocolError("malformed handshake acknowledgement");
  for (std::size_t k = 0; k < rank; ++k) info.input_shape.push_back(static_cast<std::size_t>(f.payload[4 + k]));
  return info;
}

}  // namespace seek::protocol
