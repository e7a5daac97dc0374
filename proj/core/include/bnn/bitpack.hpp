#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bnn/tensor.hpp"

namespace bnn {

/// Bit-packed {-1,+1} tensor: -1 is stored as 0, +1 as 1. The innermost
/// logical axis maps to ascending bit positions, least-significant bit first;
/// each row (all outer axes fixed) is padded to whole 64-bit words with the
/// trailing pad bits forced to 0 and a validity count of `valid` bits.
struct PackedBitTensor {
    Shape shape;
    std::int64_t rows = 0;
    int valid = 0;      // meaningful bits per row (innermost extent)
    int row_words = 0;  // ceil(valid / 64)
    std::vector<std::uint64_t> words;

    std::span<const std::uint64_t> row(std::int64_t r) const {
        return {words.data() + r * row_words, static_cast<std::size_t>(row_words)};
    }
    std::span<std::uint64_t> row(std::int64_t r) {
        return {words.data() + r * row_words, static_cast<std::size_t>(row_words)};
    }
};

/// Packs a strictly {-1,+1} tensor; any other value is rejected with its
/// flat index. unpack_bits(pack_bits(x)) == x exactly.
PackedBitTensor pack_bits(const Tensor& x);
Tensor unpack_bits(const PackedBitTensor& p);

/// +/-1 dot product of two packed rows over the first n bits:
/// 2 * popcount(xnor(a, b) & validity_mask) - n. Pad bits never contribute.
std::int64_t xnor_popcount_dot(std::span<const std::uint64_t> a,
                               std::span<const std::uint64_t> b, std::int64_t n);

inline std::uint64_t tail_mask(int bits_in_last_word) {
    return bits_in_last_word == 0 ? ~0ull : (bits_in_last_word == 64 ? ~0ull
                                                                     : ((1ull << bits_in_last_word) - 1));
}

}  // namespace bnn
