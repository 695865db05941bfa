#include "ldic/range_coder.hpp"

#include "ldic/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ldic::entropy {

namespace {

constexpr uint32_t kTopValue = 1u << 24;

}  // namespace

void CdfTable::validate() const {
    if (cdf.size() < 2) {
        throw InternalError("cdf table needs at least one symbol");
    }
    if (cdf.front() != 0 || cdf.back() != kCdfTotal) {
        throw InternalError("cdf table must span [0, 2^16]");
    }
    for (size_t i = 1; i < cdf.size(); ++i) {
        if (cdf[i] <= cdf[i - 1]) {
            throw InternalError("cdf table has an empty bin at index " + std::to_string(i - 1));
        }
    }
}

CdfTable quantize_pmf(std::span<const double> pmf, int32_t offset) {
    const auto n = pmf.size();
    if (n == 0 || n > kCdfTotal / 2) {
        throw InternalError("pmf size out of range for 16-bit tables: " + std::to_string(n));
    }
    double mass = 0.0;
    for (double p : pmf) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw InternalError("pmf contains a negative or non-finite entry");
        }
        mass += p;
    }
    if (mass <= 0.0) {
        throw InternalError("pmf has zero total mass");
    }

    const uint32_t spare = kCdfTotal - static_cast<uint32_t>(n);
    std::vector<uint32_t> freq(n);
    uint64_t assigned = 0;
    for (size_t i = 0; i < n; ++i) {
        freq[i] = 1 + static_cast<uint32_t>(std::floor(pmf[i] / mass * spare));
        assigned += freq[i];
    }
    // floor() never overshoots, so the drift is a non-negative remainder.
    auto largest = static_cast<size_t>(std::max_element(pmf.begin(), pmf.end()) - pmf.begin());
    freq[largest] += static_cast<uint32_t>(kCdfTotal - assigned);

    CdfTable table;
    table.offset = offset;
    table.cdf.resize(n + 1);
    table.cdf[0] = 0;
    for (size_t i = 0; i < n; ++i) {
        table.cdf[i + 1] = table.cdf[i] + freq[i];
    }
    return table;
}

void RangeEncoder::shift_low() {
    if (static_cast<uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
        const auto carry = static_cast<uint8_t>(low_ >> 32);
        uint8_t pending = cache_;
        do {
            out_.push_back(static_cast<uint8_t>(pending + carry));
            pending = 0xFF;
        } while (--cache_size_ != 0);
        cache_ = static_cast<uint8_t>(low_ >> 24);
    }
    ++cache_size_;
    low_ = (low_ & 0x00FFFFFFu) << 8;
}

void RangeEncoder::encode(const CdfTable& table, int32_t symbol) {
    if (!table.contains(symbol)) {
        throw EncodeError("symbol " + std::to_string(symbol) + " outside table support [" +
                          std::to_string(table.min_symbol()) + ", " +
                          std::to_string(table.max_symbol()) + "]");
    }
    const auto i = static_cast<size_t>(symbol - table.offset);
    const uint32_t r = range_ >> kCdfPrecision;
    low_ += static_cast<uint64_t>(r) * table.cdf[i];
    range_ = r * (table.cdf[i + 1] - table.cdf[i]);
    while (range_ < kTopValue) {
        range_ <<= 8;
        shift_low();
    }
}

std::vector<uint8_t> RangeEncoder::finish() {
    for (int i = 0; i < 5; ++i) {
        shift_low();
    }
    return std::move(out_);
}

RangeDecoder::RangeDecoder(std::span<const uint8_t> bytes) : bytes_(bytes) {
    for (int i = 0; i < 5; ++i) {
        code_ = (code_ << 8) | next_byte();
    }
}

uint8_t RangeDecoder::next_byte() {
    if (pos_ < bytes_.size()) {
        return bytes_[pos_++];
    }
    ++overrun_;
    return 0;
}

int32_t RangeDecoder::decode(const CdfTable& table) {
    const uint32_t r = range_ >> kCdfPrecision;
    const uint32_t target = std::min<uint32_t>(code_ / r, kCdfTotal - 1);
    // First bin whose upper edge exceeds the target.
    auto it = std::upper_bound(table.cdf.begin() + 1, table.cdf.end(), target);
    const auto i = static_cast<size_t>(it - table.cdf.begin()) - 1;
    code_ -= r * table.cdf[i];
    range_ = r * (table.cdf[i + 1] - table.cdf[i]);
    while (range_ < kTopValue) {
        code_ = (code_ << 8) | next_byte();
        range_ <<= 8;
    }
    return table.offset + static_cast<int32_t>(i);
}

std::vector<uint8_t> range_encode(std::span<const int32_t> symbols,
                                  std::span<const uint32_t> table_index,
                                  std::span<const CdfTable> tables) {
    if (symbols.size() != table_index.size()) {
        throw InternalError("symbol and table index counts differ");
    }
    RangeEncoder enc;
    for (size_t i = 0; i < symbols.size(); ++i) {
        if (table_index[i] >= tables.size()) {
            throw InternalError("table index out of range");
        }
        enc.encode(tables[table_index[i]], symbols[i]);
    }
    return enc.finish();
}

std::vector<int32_t> range_decode(std::span<const uint8_t> bytes,
                                  std::span<const uint32_t> table_index,
                                  std::span<const CdfTable> tables) {
    RangeDecoder dec(bytes);
    std::vector<int32_t> out;
    out.reserve(table_index.size());
    for (uint32_t idx : table_index) {
        if (idx >= tables.size()) {
            throw InternalError("table index out of range");
        }
        out.push_back(dec.decode(tables[idx]));
    }
    return out;
}

double table_cost_bits(std::span<const int32_t> symbols,
                       std::span<const uint32_t> table_index,
                       std::span<const CdfTable> tables) {
    double bits = 0.0;
    for (size_t i = 0; i < symbols.size(); ++i) {
        const auto& t = tables[table_index[i]];
        bits += kCdfPrecision - std::log2(static_cast<double>(t.frequency(symbols[i])));
    }
    return bits;
}

}  // namespace ldic::entropy
