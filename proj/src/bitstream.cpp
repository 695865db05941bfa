#include "ldic/bitstream.hpp"

#include "ldic/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ldic::bitstream {

namespace {

constexpr uint8_t kMagic[4] = {'L', 'D', 'I', 'C'};

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) {
        out.push_back(static_cast<uint8_t>(v >> shift));
    }
}

uint32_t checked_length(size_t n) {
    if (n > UINT32_MAX) {
        throw UsageError("payload exceeds 4 GiB");
    }
    return static_cast<uint32_t>(n);
}

class Reader {
public:
    explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

    void require(size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw ParseError(ParseError::Kind::Truncated,
                             std::string("stream truncated in ") + what);
        }
    }
    uint8_t u8() {
        require(1, "header");
        return bytes_[pos_++];
    }
    uint16_t u16() {
        require(2, "header");
        uint16_t v = static_cast<uint16_t>((bytes_[pos_] << 8) | bytes_[pos_ + 1]);
        pos_ += 2;
        return v;
    }
    uint32_t u32() {
        require(4, "header");
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v = (v << 8) | bytes_[pos_ + i];
        }
        pos_ += 4;
        return v;
    }
    std::span<const uint8_t> take(size_t n, const char* what) {
        require(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::span<const uint8_t> bytes_;
    size_t pos_ = 0;
};

CompressedImage parse_impl(std::span<const uint8_t> bytes, bool nested) {
    Reader in(bytes);
    const size_t probe = std::min<size_t>(bytes.size(), 4);
    if (!std::equal(kMagic, kMagic + probe, bytes.begin())) {
        throw ParseError(ParseError::Kind::BadMagic, "bad magic, not an LDIC stream");
    }
    if (probe < 4) {
        throw ParseError(ParseError::Kind::Truncated, "stream truncated in magic");
    }
    in.take(4, "magic");
    const uint8_t version = in.u8();
    if (version != kFormatVersion) {
        throw ParseError(ParseError::Kind::UnsupportedVersion,
                         "unsupported stream version " + std::to_string(version));
    }
    const uint8_t flags = in.u8();
    if ((flags & ~(kFlagDepthPayload | kFlagDepthGuided)) != 0) {
        throw ParseError(ParseError::Kind::Malformed, "unknown flag bits set");
    }
    const bool has_depth = (flags & kFlagDepthPayload) != 0;
    if (has_depth && nested) {
        throw ParseError(ParseError::Kind::Malformed, "depth sub-stream carries its own depth payload");
    }

    CompressedImage c;
    c.depth_guided = (flags & kFlagDepthGuided) != 0;
    c.width = in.u16();
    c.height = in.u16();
    c.m_lambda_fixed = in.u16();
    const uint32_t len_z = in.u32();
    const uint32_t len_y = in.u32();
    const uint32_t len_depth = has_depth ? in.u32() : 0;
    if (c.width == 0 || c.height == 0) {
        throw ParseError(ParseError::Kind::Malformed, "zero image dimension");
    }

    const uint64_t declared = uint64_t{len_z} + len_y + len_depth;
    if (declared > in.remaining()) {
        throw ParseError(ParseError::Kind::Truncated,
                         "declared payload length " + std::to_string(declared) + " exceeds buffer (" +
                             std::to_string(in.remaining()) + " bytes left)");
    }
    if (declared < in.remaining()) {
        throw ParseError(ParseError::Kind::Malformed, "trailing bytes after declared payloads");
    }
    auto z = in.take(len_z, "payload_z");
    auto y = in.take(len_y, "payload_y");
    c.payload_z.assign(z.begin(), z.end());
    c.payload_y.assign(y.begin(), y.end());
    if (has_depth) {
        c.depth = std::make_shared<const CompressedImage>(parse_impl(in.take(len_depth, "payload_depth"), true));
    }
    return c;
}

}  // namespace

uint8_t CompressedImage::flags() const {
    return static_cast<uint8_t>((depth ? kFlagDepthPayload : 0) | (depth_guided ? kFlagDepthGuided : 0));
}

bool CompressedImage::operator==(const CompressedImage& other) const {
    if (width != other.width || height != other.height || m_lambda_fixed != other.m_lambda_fixed ||
        depth_guided != other.depth_guided || payload_z != other.payload_z ||
        payload_y != other.payload_y || has_depth_payload() != other.has_depth_payload()) {
        return false;
    }
    return !depth || *depth == *other.depth;
}

uint16_t encode_m_lambda(double m_lambda) {
    const double m = std::clamp(m_lambda, 0.0, 1.0);
    return static_cast<uint16_t>(std::lround(m * 65535.0));
}

size_t serialized_size(const CompressedImage& c) {
    size_t n = (c.depth ? kHeaderSizeWithDepth : kHeaderSize) + c.payload_z.size() + c.payload_y.size();
    if (c.depth) {
        n += serialized_size(*c.depth);
    }
    return n;
}

std::vector<uint8_t> serialize(const CompressedImage& c) {
    if (c.depth && c.depth->depth) {
        throw UsageError("depth sub-stream must not nest another depth payload");
    }
    std::vector<uint8_t> depth_bytes;
    if (c.depth) {
        depth_bytes = serialize(*c.depth);
    }
    std::vector<uint8_t> out;
    out.reserve(serialized_size(c));
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(kFormatVersion);
    out.push_back(c.flags());
    put_u16(out, c.width);
    put_u16(out, c.height);
    put_u16(out, c.m_lambda_fixed);
    put_u32(out, checked_length(c.payload_z.size()));
    put_u32(out, checked_length(c.payload_y.size()));
    if (c.depth) {
        put_u32(out, checked_length(depth_bytes.size()));
    }
    out.insert(out.end(), c.payload_z.begin(), c.payload_z.end());
    out.insert(out.end(), c.payload_y.begin(), c.payload_y.end());
    out.insert(out.end(), depth_bytes.begin(), depth_bytes.end());
    return out;
}

CompressedImage parse(std::span<const uint8_t> bytes) {
    return parse_impl(bytes, false);
}

double bpp(const CompressedImage& c) {
    if (c.width == 0 || c.height == 0) {
        throw UsageError("bpp of an image with zero area");
    }
    return 8.0 * static_cast<double>(serialized_size(c)) / (double(c.width) * double(c.height));
}

}  // namespace ldic::bitstream
