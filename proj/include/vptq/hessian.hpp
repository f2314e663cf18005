#pragma once

#include <cstddef>
#include <vector>

#include "vptq/tensor.hpp"

namespace vptq {

// Streaming proxy-Hessian builder for one weight matrix with N input
// channels. Batches of activations X (N x samples) accumulate 2*X*X^T in
// float64; finalize() averages over the sample count, adds diagonal damping,
// and inverts. Memory is O(N^2); fine for the matrix sizes this engine
// targets.
struct HessianAccumulator {
    explicit HessianAccumulator(std::size_t dim);

    std::size_t dim;
    std::vector<double> sum;  // dim x dim, row-major, kept exactly symmetric
    std::size_t sample_count = 0;
};

// Finalized curvature data used by the quantizer. h is SPD (damped), hinv its
// inverse via Cholesky, hinv_diag the inverse's diagonal. All float64.
struct HessianData {
    std::size_t dim = 0;
    double damping_fraction = 0.0;
    std::vector<double> h;
    std::vector<double> hinv;
    std::vector<double> hinv_diag;
};

// Adds one batch (dim x samples, rank 2) to the running sum.
void accumulate(HessianAccumulator& acc, const TensorF32& batch);

// H = sum/sample_count + damping_fraction * mean(diag) * I, then Cholesky
// inverse. Throws NotPositiveDefinite (with the offending pivot) if the
// damped matrix is not SPD, NumericError if the inverse residual
// max|H*Hinv - I| exceeds 1e-6 * max|H|.
HessianData finalize(const HessianAccumulator& acc, double damping_fraction);

// Exact identity curvature; turns the quantizer into plain vector
// quantization.
HessianData identity_hessian(std::size_t dim);

// Builds HessianData from an already-damped square matrix, e.g. one written
// by the hessian CLI command. Requires symmetry (within float32 round-off)
// and positive definiteness. damping_fraction is recorded as 0: whatever
// damping the producer applied is already folded in.
HessianData hessian_from_matrix(const TensorF32& h);

}  // namespace vptq
