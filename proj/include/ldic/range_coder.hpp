#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace ldic::entropy {

inline constexpr int kCdfPrecision = 16;
inline constexpr uint32_t kCdfTotal = 1u << kCdfPrecision;

// Integer cumulative frequency table over the contiguous symbol range
// [offset, offset + size()). cdf.front() == 0, cdf.back() == kCdfTotal and
// every symbol owns at least one quantum.
struct CdfTable {
    int32_t offset = 0;
    std::vector<uint32_t> cdf;

    int32_t size() const { return static_cast<int32_t>(cdf.size()) - 1; }
    int32_t min_symbol() const { return offset; }
    int32_t max_symbol() const { return offset + size() - 1; }
    bool contains(int32_t symbol) const { return symbol >= min_symbol() && symbol <= max_symbol(); }
    uint32_t frequency(int32_t symbol) const {
        auto i = static_cast<size_t>(symbol - offset);
        return cdf[i + 1] - cdf[i];
    }

    // Throws InternalError when the invariants above are violated.
    void validate() const;

    bool operator==(const CdfTable&) const = default;
};

// Turns a floating-point pmf into a CdfTable. Every bin receives at least one
// quantum; the remaining mass is distributed proportionally and rounding drift
// is absorbed by the most probable bin.
CdfTable quantize_pmf(std::span<const double> pmf, int32_t offset);

// Carry-propagating byte-oriented range coder (32-bit range, 16-bit totals).
class RangeEncoder {
public:
    void encode(const CdfTable& table, int32_t symbol);
    std::vector<uint8_t> finish();

private:
    void shift_low();

    uint64_t low_ = 0;
    uint32_t range_ = 0xFFFFFFFFu;
    uint8_t cache_ = 0;
    uint64_t cache_size_ = 1;
    std::vector<uint8_t> out_;
};

class RangeDecoder {
public:
    explicit RangeDecoder(std::span<const uint8_t> bytes);

    int32_t decode(const CdfTable& table);

    // Bytes requested past the end of the input (read as zero).
    size_t overrun() const { return overrun_; }
    // Bytes taken from the input so far. A complete stream is consumed exactly.
    size_t consumed() const { return pos_; }

private:
    uint8_t next_byte();

    std::span<const uint8_t> bytes_;
    size_t pos_ = 0;
    size_t overrun_ = 0;
    uint32_t code_ = 0;
    uint32_t range_ = 0xFFFFFFFFu;
};

// Codes symbols[i] with tables[table_index[i]].
std::vector<uint8_t> range_encode(std::span<const int32_t> symbols,
                                  std::span<const uint32_t> table_index,
                                  std::span<const CdfTable> tables);

std::vector<int32_t> range_decode(std::span<const uint8_t> bytes,
                                  std::span<const uint32_t> table_index,
                                  std::span<const CdfTable> tables);

// Ideal code length in bits of the symbols under the integer tables.
double table_cost_bits(std::span<const int32_t> symbols,
                       std::span<const uint32_t> table_index,
                       std::span<const CdfTable> tables);

}  // namespace ldic::entropy
