#include "bnn/bitpack.hpp"

#include <bit>

namespace bnn {

PackedBitTensor pack_bits(const Tensor& x) {
    if (x.shape.empty()) throw std::invalid_argument("pack_bits: empty shape");
    PackedBitTensor p;
    p.shape = x.shape;
    p.valid = x.shape.back();
    p.rows = x.size() / p.valid;
    p.row_words = (p.valid + 63) / 64;
    p.words.assign(static_cast<std::size_t>(p.rows * p.row_words), 0ull);
    for (std::int64_t r = 0; r < p.rows; ++r) {
        std::uint64_t* row = p.words.data() + r * p.row_words;
        const double* src = x.data.data() + r * p.valid;
        for (int i = 0; i < p.valid; ++i) {
            if (src[i] == 1.0) {
                row[i >> 6] |= 1ull << (i & 63);
            } else if (src[i] != -1.0) {
                throw std::invalid_argument("pack_bits: element at flat index " +
                                            std::to_string(r * p.valid + i) + " is " +
                                            std::to_string(src[i]) + ", not +/-1");
            }
        }
    }
    return p;
}

Tensor unpack_bits(const PackedBitTensor& p) {
    Tensor x(p.shape);
    for (std::int64_t r = 0; r < p.rows; ++r) {
        const std::uint64_t* row = p.words.data() + r * p.row_words;
        double* dst = x.data.data() + r * p.valid;
        for (int i = 0; i < p.valid; ++i)
            dst[i] = (row[i >> 6] >> (i & 63)) & 1ull ? 1.0 : -1.0;
    }
    return x;
}

std::int64_t xnor_popcount_dot(std::span<const std::uint64_t> a,
                               std::span<const std::uint64_t> b, std::int64_t n) {
    const int words = static_cast<int>((n + 63) / 64);
    if (static_cast<int>(a.size()) < words || static_cast<int>(b.size()) < words ||
        a.size() != b.size())
        throw std::invalid_argument("xnor_popcount_dot: rows of " + std::to_string(a.size()) +
                                    " and " + std::to_string(b.size()) + " words cannot hold " +
                                    std::to_string(n) + " valid bits");
    std::int64_t pc = 0;
    for (int i = 0; i < words; ++i) {
        std::uint64_t x = ~(a[i] ^ b[i]);
        if (i == words - 1) x &= tail_mask(static_cast<int>(n - static_cast<std::int64_t>(i) * 64));
        pc += std::popcount(x);
    }
    return 2 * pc - n;
}

}  // namespace bnn
