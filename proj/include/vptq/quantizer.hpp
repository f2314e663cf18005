#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vptq/codebook.hpp"
#include "vptq/hessian.hpp"
#include "vptq/tensor.hpp"

namespace vptq {

enum class ColumnOrder : uint8_t {
    Natural = 0,                // ascending column index
    DescendingHessianDiag = 1,  // largest H diagonal first, ties to lower index
};

struct QuantConfig {
    // main stage: vectors of length v1, codebook of k1 entries per group
    std::size_t v1 = 8;
    std::size_t k1 = 256;
    // residual stage codebook size; 0 disables the stage (config files may
    // also say -1 for disabled)
    std::size_t k2 = 0;
    // outlier stage; active when outlier_percent > 0
    std::size_t v0 = 0;
    std::size_t k0 = 0;
    double outlier_percent = 0.0;
    // number of contiguous column bands, each with its own codebook(s)
    std::size_t group_num = 1;
    // forwarded to hessian finalize when building curvature from activations
    double damping_fraction = 0.01;
    ColumnOrder column_order = ColumnOrder::Natural;
    TrainOptions kmeans;
    // Experimental: propagate with rows of H instead of rows of H^-1 (both
    // divided by the q-th diagonal of H^-1). The inverse-row form is the one
    // that cancels exactly on the quantized column; this switch exists only
    // for comparing against the alternative update.
    bool propagate_with_hessian_rows = false;

    bool operator==(const QuantConfig&) const = default;

    // Returns one message per problem, empty when usable. M and N are the
    // target matrix dims (pass 0 to skip shape-dependent checks).
    std::vector<std::string> validate(std::size_t rows = 0, std::size_t cols = 0) const;
};

// One contiguous band of non-outlier columns sharing a codebook. Band ranges
// tile [0, N); a band owns every non-outlier column q with
// col_start <= q < col_end (outlier columns inside the range belong to the
// outlier codebook instead).
struct GroupBand {
    std::size_t col_start = 0;
    std::size_t col_end = 0;
    std::size_t codebook_ref = 0;  // index into QuantizedMatrix::codebooks

    bool operator==(const GroupBand&) const = default;
};

struct QuantStats {
    double proxy_loss = 0.0;     // tr((W^ - W) H (W^ - W)^T), final reconstruction
    double sum_delta_L = 0.0;    // sum of per-column closed-form losses during the sweep
    double frobenius_mse = 0.0;  // mean squared error over all M*N entries
    double max_abs_err = 0.0;

    bool operator==(const QuantStats&) const = default;
};

struct QuantizedMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    // rows rounded up to the vector length, per stage; 0 when the stage is off
    std::size_t padded_rows_main = 0;
    std::size_t padded_rows_outlier = 0;

    std::vector<std::size_t> outlier_cols;  // ascending
    std::vector<GroupBand> group_layout;
    std::vector<Codebook> codebooks;

    // Indices are stored per column position, vectors-per-column at a time.
    // main/residual: one row of ceil(rows/v1) indices for each non-outlier
    // column, in ascending column order. outlier: ceil(rows/v0) per outlier
    // column. residual_indices is empty when the stage is off.
    std::vector<uint32_t> main_indices;
    std::vector<uint32_t> residual_indices;
    std::vector<uint32_t> outlier_indices;

    QuantStats stats;
    QuantConfig config;

    bool operator==(const QuantizedMatrix&) const = default;
};

// Chops one column into ceil(M/v) vectors of length v, zero-padding the last.
// Concatenating the result and dropping the pad recovers the column.
std::vector<float> reshape_column(std::span<const float> column, std::size_t v);
std::vector<double> reshape_column(std::span<const double> column, std::size_t v);

struct ColumnQuant {
    std::vector<float> values;           // reconstructed column, length = column size
    std::vector<uint32_t> main_idx;      // ceil(M/v) entries
    std::vector<uint32_t> residual_idx;  // same, empty without residual_cb
};

// Quantizes one column against a codebook: reshape, nearest-centroid per
// vector, reconstruct. With residual_cb, each vector's remainder is mapped
// through the residual codebook as well and the two centroids sum (in
// float32, matching dequantize). The column is read, never written.
ColumnQuant quantize_column(std::span<const double> column, const Codebook& cb,
                            const Codebook* residual_cb = nullptr);

// Closed-form loss of quantizing column q: ||q_hat - q_orig||^2 / (2 * hinv_qq).
// hinv_qq must be positive (it is a diagonal entry of an SPD inverse).
double delta_L(std::span<const double> q_hat, std::span<const double> q_orig, double hinv_qq);
double delta_L(std::span<const float> q_hat, std::span<const float> q_orig, double hinv_qq);

// Applies the compensation update after fixing column q to q_hat:
//   work[:, q] = q_hat
//   work[:, j] += (q_hat - work[:, q]) * hinv[q, j] / hinv[q, q]   for unquantized j
// Only columns listed in `unquantized` are touched; quantized columns stay
// frozen. `work` is rows x cols row-major float64. With hessian_rows the
// coefficients read from h instead of hinv (see QuantConfig).
void propagate_error(std::vector<double>& work, std::size_t rows, std::size_t cols,
                     std::size_t q, std::span<const float> q_hat, const HessianData& hd,
                     std::span<const std::size_t> unquantized, bool hessian_rows = false);

// Columns ranked by H_qq * ||W[:, q]||^2, top floor(percent * N / 100),
// ties to the lower index. Returned ascending.
std::vector<std::size_t> select_outlier_columns(const TensorF32& w, const HessianData& hd,
                                                double percent);

// Full pipeline for one matrix: outlier selection, per-band Hessian-weighted
// codebook training on the original columns, a single column sweep (outliers
// first) with quantize + compensation, then the optional residual stage
// (zero-seeded, trained on what each column looked like when it was
// quantized; no further propagation). Each sweep step propagates with the
// inverse of H restricted to the still-unquantized columns, maintained by
// Schur downdates of the explicit inverse. Stats are measured against the
// original matrix with the final reconstruction.
QuantizedMatrix quantize_matrix(const TensorF32& w, const HessianData& hd,
                                const QuantConfig& cfg);

// Reconstructs the float32 matrix. Bit-identical to the reconstruction the
// quantizer used for its stats. Throws CorruptIndices on out-of-range
// indices.
TensorF32 dequantize(const QuantizedMatrix& qm);

// tr((w_hat - w) H (w_hat - w)^T) in float64, summed row by row.
double proxy_loss(const TensorF32& w, const TensorF32& w_hat, const HessianData& hd);

// Same quantity summed the other way: sum_i h_ii ||d_i||^2 over columns plus
// sum_{i != j} h_ij <d_i, d_j>. Kept as an independent summation route for
// cross-checking proxy_loss.
double proxy_loss_decomposed(const TensorF32& w, const TensorF32& w_hat,
                             const HessianData& hd);

// Seed for one codebook's training stream, decorrelated per role and group.
// Exposed so reference implementations can reproduce pipeline codebooks.
uint64_t stage_seed(uint64_t base, CodebookRole role, uint32_t group);

struct ModelEntry {
    std::string name;
    std::string weight_path;   // npy, rank 2
    std::string hessian_path;  // npy, N x N, already damped
};

struct ModelEntryResult {
    std::string name;
    std::optional<QuantizedMatrix> quantized;  // empty on failure
    std::string error;                         // empty on success
};

// Quantizes every manifest entry with the same config, up to `workers`
// entries in parallel (0 = hardware concurrency). Results keep manifest
// order; a failed entry carries its error message and does not abort the
// rest. Output is identical for any worker count.
std::vector<ModelEntryResult> quantize_model(const std::vector<ModelEntry>& manifest,
                                             const QuantConfig& cfg, unsigned workers = 0);

}  // namespace vptq
