#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace vptq {

enum class CodebookRole : uint8_t {
    Main = 0,
    Residual = 1,
    Outlier = 2,
};

// k centroids of length vector_len, row-major float32. k is a power of two
// so indices pack to exactly log2(k) bits.
struct Codebook {
    std::size_t vector_len = 0;
    std::size_t k = 0;
    std::vector<float> centroids;  // k * vector_len
    CodebookRole role = CodebookRole::Main;
    uint32_t group_id = 0;

    std::span<const float> centroid(std::size_t i) const {
        return {centroids.data() + i * vector_len, vector_len};
    }

    bool operator==(const Codebook&) const = default;
};

struct TrainOptions {
    int max_iters = 100;      // Lloyd iteration cap
    double rel_tol = 1e-6;    // stop when relative objective improvement drops below
    uint64_t seed = 0;
    // Vectors that must appear among the initial centroids (used to pin the
    // zero centroid for residual codebooks). Each entry must have the
    // training vector length.
    std::vector<std::vector<float>> forced_seeds;

    bool operator==(const TrainOptions&) const = default;
};

struct TrainResult {
    Codebook codebook;
    std::vector<uint32_t> assignments;      // one per input vector
    std::vector<double> objective_history;  // weighted objective per iteration, non-increasing
};

// Index of the nearest centroid by squared L2, ties to the lowest index.
// Distances accumulate in float64.
std::size_t assign_nearest(std::span<const float> vec, const Codebook& cb);
std::size_t assign_nearest(std::span<const double> vec, const Codebook& cb);

// sum_d weights[d] * ||vectors[d] - centroid(assignments[d])||^2, accumulated
// in float64. vectors is count * vector_len, row-major.
double weighted_objective(std::span<const float> vectors, std::size_t vector_len,
                          std::span<const double> weights, const Codebook& cb,
                          std::span<const uint32_t> assignments);

// Weighted k-means. Init is weighted k-means++ (selection probability
// proportional to weight * min squared distance; the first free pick is by
// weight alone) after any forced seeds. Lloyd updates use weighted means
// computed in float64 and rounded to float32 each iteration, so the stored
// codebook is exactly the one that was trained and the recorded objective
// history is exactly non-increasing. A cluster that loses all members is
// respawned at the not-yet-used vector with the largest weighted distance to
// its current centroid.
//
// Throws InvalidK unless k is a power of two, InsufficientData if k exceeds
// the vector count, InvalidArgument for bad weights or option values.
// Deterministic: same inputs and seed give a bit-identical codebook.
TrainResult train_codebook(std::span<const float> vectors, std::size_t vector_len,
                           std::span<const double> weights, std::size_t k,
                           const TrainOptions& opts);

// Same as train_codebook with the zero vector prepended to forced_seeds and
// the role set to Residual. Starting from a codebook that contains zero, the
// initial objective is at most sum_d weights[d]*||residuals[d]||^2 (the cost
// of skipping the stage entirely) and Lloyd never increases it, so training
// can only improve on an identity reconstruction.
TrainResult train_residual_codebook(std::span<const float> residuals, std::size_t vector_len,
                                    std::span<const double> weights, std::size_t k,
                                    const TrainOptions& opts);

}  // namespace vptq
