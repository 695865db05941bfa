#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace ldic::bitstream {

inline constexpr uint8_t kFormatVersion = 1;
inline constexpr size_t kHeaderSize = 20;
inline constexpr size_t kHeaderSizeWithDepth = 24;

inline constexpr uint8_t kFlagDepthPayload = 0x01;
inline constexpr uint8_t kFlagDepthGuided = 0x02;

// In-memory form of an `.ldic` stream.
//
//   "LDIC" | version u8 | flags u8 | width u16 | height u16 | m_lambda u16
//   | len_z u32 | len_y u32 | [len_depth u32] | payload_z | payload_y | [depth]
//
// Multi-byte integers are big-endian. The depth payload is itself a complete
// stream that must not carry a depth payload of its own.
struct CompressedImage {
    uint16_t width = 0;
    uint16_t height = 0;
    uint16_t m_lambda_fixed = 0;
    bool depth_guided = false;
    std::vector<uint8_t> payload_z;
    std::vector<uint8_t> payload_y;
    std::shared_ptr<const CompressedImage> depth;

    bool has_depth_payload() const { return depth != nullptr; }
    uint8_t flags() const;
    double m_lambda() const { return m_lambda_fixed / 65535.0; }

    bool operator==(const CompressedImage& other) const;
};

// round(m * 65535) with m clamped to [0, 1].
uint16_t encode_m_lambda(double m_lambda);

size_t serialized_size(const CompressedImage& c);
std::vector<uint8_t> serialize(const CompressedImage& c);

// Throws ParseError: BadMagic, UnsupportedVersion, Truncated (declared
// lengths exceed the buffer) or Malformed (anything else inconsistent).
CompressedImage parse(std::span<const uint8_t> bytes);

// 8 * total stream bytes (header and depth payload included) / (width * height).
double bpp(const CompressedImage& c);

}  // namespace ldic::bitstream
