#include "vptq/codebook.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#include "parallel.hpp"
#include "vptq/errors.hpp"
#include "vptq/rng.hpp"

namespace vptq {

static bool is_pow2(std::size_t k) { return k >= 1 && (k & (k - 1)) == 0; }

// One distance kernel for every caller (float32 or working float64 inputs),
// so a pipeline assigning a float64 copy of a float32 vector lands on the
// same centroid as the public float32 path.
template <typename T>
static double sq_dist(const T* x, const float* c, std::size_t v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v; i++) {
        double d = double(x[i]) - double(c[i]);
        s += d * d;
    }
    return s;
}

template <typename T>
static std::size_t nearest(const T* x, const Codebook& cb, double* best_out) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cb.k; i++) {
        double d = sq_dist(x, cb.centroids.data() + i * cb.vector_len, cb.vector_len);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    if (best_out) *best_out = best_d;
    return best;
}

std::size_t assign_nearest(std::span<const float> vec, const Codebook& cb) {
    if (vec.size() != cb.vector_len) {
        throw ShapeError("vector length " + std::to_string(vec.size()) +
                         " does not match codebook vector_len " +
                         std::to_string(cb.vector_len));
    }
    return nearest(vec.data(), cb, nullptr);
}

std::size_t assign_nearest(std::span<const double> vec, const Codebook& cb) {
    if (vec.size() != cb.vector_len) {
        throw ShapeError("vector length " + std::to_string(vec.size()) +
                         " does not match codebook vector_len " +
                         std::to_string(cb.vector_len));
    }
    return nearest(vec.data(), cb, nullptr);
}

double weighted_objective(std::span<const float> vectors, std::size_t vector_len,
                          std::span<const double> weights, const Codebook& cb,
                          std::span<const uint32_t> assignments) {
    if (vector_len != cb.vector_len || vectors.size() % vector_len != 0) {
        throw ShapeError("vectors buffer does not match vector_len");
    }
    std::size_t count = vectors.size() / vector_len;
    if (weights.size() != count || assignments.size() != count) {
        throw ShapeError("weights/assignments size does not match vector count");
    }
    double total = 0.0;
    for (std::size_t d = 0; d < count; d++) {
        uint32_t a = assignments[d];
        if (a >= cb.k) {
            throw InvalidArgument("assignment " + std::to_string(a) + " out of range");
        }
        total += weights[d] * sq_dist(vectors.data() + d * vector_len,
                                      cb.centroids.data() + a * vector_len, vector_len);
    }
    return total;
}

// ---- training --------------------------------------------------------------

namespace {

struct AssignPass {
    std::vector<uint32_t> assign;
    std::vector<double> dist;  // squared distance to the assigned centroid
    double objective = 0.0;
};

void run_assign(std::span<const float> vectors, std::size_t v, std::span<const double> weights,
                const Codebook& cb, AssignPass& out) {
    std::size_t count = weights.size();
    out.assign.resize(count);
    out.dist.resize(count);
    std::size_t work_per_vec = cb.k * v;
    std::size_t grain = std::max<std::size_t>(1, (1u << 20) / std::max<std::size_t>(1, work_per_vec));
    detail::parallel_for(count, grain, [&](std::size_t b, std::size_t e) {
        for (std::size_t d = b; d < e; d++) {
            double dist;
            out.assign[d] = uint32_t(nearest(vectors.data() + d * v, cb, &dist));
            out.dist[d] = dist;
        }
    });
    double obj = 0.0;
    for (std::size_t d = 0; d < count; d++) obj += weights[d] * out.dist[d];
    out.objective = obj;
}

// Weighted k-means++ after any forced seeds: first free pick by weight, the
// rest by weight times squared distance to the nearest chosen centroid. When
// every remaining vector coincides with a centroid the mass is zero; fall
// back to picking by weight so initialization still returns k centroids.
void init_centroids(std::span<const float> vectors, std::size_t v,
                    std::span<const double> weights, std::size_t k,
                    const TrainOptions& opts, Codebook& cb) {
    std::size_t count = weights.size();
    cb.centroids.assign(k * v, 0.0f);
    std::size_t placed = 0;

    for (const auto& seed_vec : opts.forced_seeds) {
        if (placed == k) break;
        if (seed_vec.size() != v) {
            throw InvalidArgument("forced seed has length " + std::to_string(seed_vec.size()) +
                                  ", want " + std::to_string(v));
        }
        std::copy(seed_vec.begin(), seed_vec.end(), cb.centroids.begin() + placed * v);
        placed++;
    }

    Rng rng(opts.seed);
    std::vector<double> min_dist(count, std::numeric_limits<double>::infinity());

    auto update_min_dist = [&](std::size_t centroid_idx) {
        const float* c = cb.centroids.data() + centroid_idx * v;
        for (std::size_t d = 0; d < count; d++) {
            double dd = sq_dist(vectors.data() + d * v, c, v);
            if (dd < min_dist[d]) min_dist[d] = dd;
        }
    };

    auto pick_by_mass = [&](const std::vector<double>& mass, double total) {
        double u = rng.next_double() * total;
        double cum = 0.0;
        std::size_t last_positive = 0;
        for (std::size_t d = 0; d < count; d++) {
            if (mass[d] <= 0.0) continue;
            cum += mass[d];
            last_positive = d;
            if (u < cum) return d;
        }
        return last_positive;  // u landed on accumulated round-off
    };

    if (placed == 0) {
        std::vector<double> mass(weights.begin(), weights.end());
        double total = 0.0;
        for (double w : mass) total += w;
        std::size_t first = pick_by_mass(mass, total);
        std::copy(vectors.begin() + first * v, vectors.begin() + (first + 1) * v,
                  cb.centroids.begin());
        placed = 1;
    }
    for (std::size_t i = 0; i < placed; i++) update_min_dist(i);

    std::vector<double> mass(count);
    while (placed < k) {
        double total = 0.0;
        for (std::size_t d = 0; d < count; d++) {
            mass[d] = weights[d] * min_dist[d];
            total += mass[d];
        }
        std::size_t pick;
        if (total > 0.0) {
            pick = pick_by_mass(mass, total);
        } else {
            std::vector<double> wmass(weights.begin(), weights.end());
            double wtotal = 0.0;
            for (double w : wmass) wtotal += w;
            pick = pick_by_mass(wmass, wtotal);
        }
        std::copy(vectors.begin() + pick * v, vectors.begin() + (pick + 1) * v,
                  cb.centroids.begin() + placed * v);
        update_min_dist(placed);
        placed++;
    }
}

}  // namespace

TrainResult train_codebook(std::span<const float> vectors, std::size_t vector_len,
                           std::span<const double> weights, std::size_t k,
                           const TrainOptions& opts) {
    if (vector_len == 0 || vectors.size() % vector_len != 0) {
        throw ShapeError("vectors buffer does not match vector_len");
    }
    std::size_t count = vectors.size() / vector_len;
    if (count == 0) {
        throw InsufficientData("no training vectors");
    }
    if (weights.size() != count) {
        throw ShapeError("weights size does not match vector count");
    }
    if (!is_pow2(k)) {
        throw InvalidK("k must be a power of two, got " + std::to_string(k));
    }
    if (k > count) {
        throw InsufficientData("k=" + std::to_string(k) + " exceeds vector count " +
                               std::to_string(count));
    }
    if (opts.max_iters < 0) {
        throw InvalidArgument("max_iters must be >= 0");
    }
    if (!(opts.rel_tol >= 0.0)) {
        throw InvalidArgument("rel_tol must be >= 0");
    }
    for (double w : weights) {
        if (!(w > 0.0) || !std::isfinite(w)) {
            throw InvalidArgument("weights must be positive and finite");
        }
    }

    TrainResult result;
    Codebook& cb = result.codebook;
    cb.vector_len = vector_len;
    cb.k = k;
    init_centroids(vectors, vector_len, weights, k, opts, cb);

    AssignPass pass;
    run_assign(vectors, vector_len, weights, cb, pass);
    result.objective_history.push_back(pass.objective);

    std::vector<double> acc(k * vector_len);
    std::vector<double> wsum(k);
    std::vector<char> respawned(count);

    for (int iter = 0; iter < opts.max_iters; iter++) {
        // update: weighted means in float64, rounded to float32. Rounding to
        // the nearest float32 keeps the objective non-increasing: per
        // coordinate, either the rounded mean equals the old centroid value
        // or it is strictly closer to the mean than the old value was.
        std::fill(acc.begin(), acc.end(), 0.0);
        std::fill(wsum.begin(), wsum.end(), 0.0);
        for (std::size_t d = 0; d < count; d++) {
            double w = weights[d];
            double* a = acc.data() + pass.assign[d] * vector_len;
            const float* x = vectors.data() + d * vector_len;
            for (std::size_t i = 0; i < vector_len; i++) a[i] += w * double(x[i]);
            wsum[pass.assign[d]] += w;
        }
        std::fill(respawned.begin(), respawned.end(), 0);
        for (std::size_t c = 0; c < k; c++) {
            if (wsum[c] > 0.0) {
                float* dst = cb.centroids.data() + c * vector_len;
                const double* a = acc.data() + c * vector_len;
                for (std::size_t i = 0; i < vector_len; i++) {
                    dst[i] = float(a[i] / wsum[c]);
                }
            } else {
                // respawn an empty cluster at the unused vector with the
                // largest weighted distance to its current centroid
                std::size_t far = count;
                double far_mass = -1.0;
                for (std::size_t d = 0; d < count; d++) {
                    if (respawned[d]) continue;
                    double m = weights[d] * pass.dist[d];
                    if (m > far_mass) {
                        far_mass = m;
                        far = d;
                    }
                }
                if (far == count) continue;  // fewer distinct vectors than empties
                respawned[far] = 1;
                std::copy(vectors.begin() + far * vector_len,
                          vectors.begin() + (far + 1) * vector_len,
                          cb.centroids.begin() + c * vector_len);
            }
        }

        double prev = pass.objective;
        run_assign(vectors, vector_len, weights, cb, pass);
        result.objective_history.push_back(pass.objective);
        if (pass.objective == 0.0) break;
        if (prev - pass.objective < opts.rel_tol * prev) break;
    }

    result.assignments = std::move(pass.assign);
    return result;
}

TrainResult train_residual_codebook(std::span<const float> residuals, std::size_t vector_len,
                                    std::span<const double> weights, std::size_t k,
                                    const TrainOptions& opts) {
    TrainOptions seeded = opts;
    seeded.forced_seeds.insert(seeded.forced_seeds.begin(),
                               std::vector<float>(vector_len, 0.0f));
    TrainResult result = train_codebook(residuals, vector_len, weights, k, seeded);
    result.codebook.role = CodebookRole::Residual;
    return result;
}

}  // namespace vptq
