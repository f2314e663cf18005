#include "vptq/packing.hpp"

#include <cmath>
#include <string>

#include "vptq/errors.hpp"

namespace vptq {

PackedIndices pack(std::span<const uint32_t> indices, unsigned bitwidth) {
    if (bitwidth < 1 || bitwidth > 16) {
        throw InvalidArgument("bitwidth must be in 1..16, got " + std::to_string(bitwidth));
    }
    PackedIndices out;
    out.bitwidth = bitwidth;
    out.count = indices.size();
    out.bytes.assign((indices.size() * bitwidth + 7) / 8, 0);
    uint32_t limit = 1u << bitwidth;
    std::size_t bit = 0;
    for (std::size_t i = 0; i < indices.size(); i++) {
        uint32_t v = indices[i];
        if (v >= limit) {
            throw IndexOverflow(i, "index " + std::to_string(v) + " at position " +
                                       std::to_string(i) + " does not fit " +
                                       std::to_string(bitwidth) + " bits");
        }
        for (unsigned b = 0; b < bitwidth; b++, bit++) {
            if (v >> b & 1u) {
                out.bytes[bit >> 3] |= uint8_t(1u << (bit & 7));
            }
        }
    }
    return out;
}

std::vector<uint32_t> unpack(const PackedIndices& packed) {
    if (packed.bitwidth < 1 || packed.bitwidth > 16) {
        throw CorruptStream("bitwidth must be in 1..16, got " + std::to_string(packed.bitwidth));
    }
    std::size_t total_bits = packed.count * packed.bitwidth;
    if (packed.bytes.size() != (total_bits + 7) / 8) {
        throw CorruptStream("byte count " + std::to_string(packed.bytes.size()) +
                            " does not match " + std::to_string(packed.count) + " indices of " +
                            std::to_string(packed.bitwidth) + " bits");
    }
    // pad bits beyond count*bitwidth must be zero
    for (std::size_t bit = total_bits; bit < packed.bytes.size() * 8; bit++) {
        if (packed.bytes[bit >> 3] >> (bit & 7) & 1u) {
            throw CorruptStream("nonzero padding bit at " + std::to_string(bit));
        }
    }
    std::vector<uint32_t> out(packed.count);
    std::size_t bit = 0;
    for (std::size_t i = 0; i < packed.count; i++) {
        uint32_t v = 0;
        for (unsigned b = 0; b < packed.bitwidth; b++, bit++) {
            v |= uint32_t(packed.bytes[bit >> 3] >> (bit & 7) & 1u) << b;
        }
        out[i] = v;
    }
    return out;
}

static unsigned exact_log2(std::size_t k) {
    unsigned b = 0;
    while ((std::size_t(1) << b) < k) b++;
    return b;
}

CompressionReport compression_report(std::size_t rows, std::size_t cols,
                                     const QuantConfig& cfg, std::size_t outlier_count,
                                     bool codebook_fp16_bits) {
    if (rows == 0 || cols == 0) throw InvalidArgument("rows and cols must be >= 1");
    if (outlier_count > cols) throw InvalidArgument("outlier_count exceeds column count");
    {
        auto problems = cfg.validate();
        if (!problems.empty()) {
            std::string joined = "invalid config:";
            for (const auto& p : problems) joined += "\n  " + p;
            throw InvalidArgument(joined);
        }
    }

    CompressionReport r;
    // the original dtype is charged at 16 bits per weight regardless of how
    // tensors are stored on disk here
    r.total_original_bits = uint64_t(16) * rows * cols;

    uint64_t codebook_entries = uint64_t(cfg.group_num) * cfg.v1 * (cfg.k1 + cfg.k2);
    if (outlier_count > 0) codebook_entries += uint64_t(cfg.v0) * cfg.k0;
    r.codebook_bits = codebook_entries * (codebook_fp16_bits ? 16 : 1);

    unsigned bits1 = exact_log2(cfg.k1);
    unsigned bits2 = cfg.k2 > 0 ? exact_log2(cfg.k2) : 0;
    uint64_t non_out = cols - outlier_count;
    uint64_t vecs_main = (rows + cfg.v1 - 1) / cfg.v1;
    r.index_bits = non_out * vecs_main * (bits1 + bits2);
    if (outlier_count > 0) {
        uint64_t vecs_out = (rows + cfg.v0 - 1) / cfg.v0;
        r.index_bits += uint64_t(outlier_count) * vecs_out * exact_log2(cfg.k0);
    }

    r.compression_ratio =
        double(r.total_original_bits) / double(r.codebook_bits + r.index_bits);
    r.equivalent_bitwidth = 16.0 / r.compression_ratio;
    r.average_index_bitwidth = double(bits1 + bits2) / double(cfg.v1);
    return r;
}

CompressionReport compression_report(const QuantizedMatrix& qm, bool codebook_fp16_bits) {
    return compression_report(qm.rows, qm.cols, qm.config, qm.outlier_cols.size(),
                              codebook_fp16_bits);
}

CompressionReport aggregate_reports(std::span<const CompressionReport> reports) {
    if (reports.empty()) throw InvalidArgument("nothing to aggregate");
    CompressionReport total;
    bool same_avg = true;
    for (const auto& r : reports) {
        total.total_original_bits += r.total_original_bits;
        total.codebook_bits += r.codebook_bits;
        total.index_bits += r.index_bits;
        same_avg = same_avg && r.average_index_bitwidth == reports[0].average_index_bitwidth;
    }
    total.compression_ratio =
        double(total.total_original_bits) / double(total.codebook_bits + total.index_bits);
    total.equivalent_bitwidth = 16.0 / total.compression_ratio;
    if (same_avg) {
        total.average_index_bitwidth = reports[0].average_index_bitwidth;
    } else {
        // mixed configs: weight each matrix by its share of the original bits
        double acc = 0.0;
        for (const auto& r : reports) {
            acc += r.average_index_bitwidth * double(r.total_original_bits);
        }
        total.average_index_bitwidth = acc / double(total.total_original_bits);
    }
    return total;
}

}  // namespace vptq
