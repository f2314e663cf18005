#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vptq/quantizer.hpp"

namespace vptq {

// Little-endian LSB-first bitstream: index i occupies bits [i*bw, (i+1)*bw),
// and bit b of the stream lives in byte b/8 at position b%8. Unused bits in
// the final byte are zero.
struct PackedIndices {
    unsigned bitwidth = 0;  // 1..16
    std::size_t count = 0;
    std::vector<uint8_t> bytes;

    bool operator==(const PackedIndices&) const = default;
};

// Throws InvalidArgument for bitwidth outside 1..16, IndexOverflow (with the
// position) if a value needs more bits.
PackedIndices pack(std::span<const uint32_t> indices, unsigned bitwidth);

// Exact inverse of pack. Throws CorruptStream when the byte count does not
// match count*bitwidth or the trailing pad bits are not zero.
std::vector<uint32_t> unpack(const PackedIndices& packed);

// Size accounting for one matrix under a config. Everything derives from
// exact integer bit counts; the ratios are computed from those integers at
// the end. The original dtype is charged at 16 bits per weight. Codebook
// entries are charged 16 bits each too; codebook_fp16_bits=false counts each
// entry as a single unit instead, an older accounting convention kept behind
// this flag for comparison.
struct CompressionReport {
    uint64_t total_original_bits = 0;
    uint64_t codebook_bits = 0;
    uint64_t index_bits = 0;
    double compression_ratio = 0.0;      // total / (codebook + index)
    double equivalent_bitwidth = 0.0;    // 16 / compression_ratio
    double average_index_bitwidth = 0.0; // (log2 k1 + log2 k2) / v1, config only

    bool operator==(const CompressionReport&) const = default;
};

CompressionReport compression_report(std::size_t rows, std::size_t cols,
                                     const QuantConfig& cfg, std::size_t outlier_count,
                                     bool codebook_fp16_bits = true);

// Accounting for an actual quantized matrix (its config and outlier count).
CompressionReport compression_report(const QuantizedMatrix& qm,
                                     bool codebook_fp16_bits = true);

// Sums the integer fields, then recomputes the ratios, so aggregation is
// numerator-and-denominator arithmetic rather than a mean of ratios.
CompressionReport aggregate_reports(std::span<const CompressionReport> reports);

// Container layout (.vptq), little-endian:
//   magic "VPTQ1", u32 section count, then sections of
//   (u16 type, u64 payload length, u32 crc32, payload).
// Section types: 1 META (UTF-8 JSON: shapes, config, layout, stats),
// 2 CBOOK (u8 role, u32 group, u16 vector_len, u32 k, f32 centroids),
// 3 IDX (u8 role, u32 group, u8 bitwidth, u64 count, packed bytes).
// Unknown section types are skipped on read. serialize writes atomically.
// deserialize throws FormatError on a bad magic and CorruptContainer on
// truncation, checksum mismatch, or inconsistent sections.
void serialize(const QuantizedMatrix& qm, const std::filesystem::path& path);
QuantizedMatrix deserialize(const std::filesystem::path& path);

}  // namespace vptq
