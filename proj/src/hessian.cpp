#include "vptq/hessian.hpp"

#include <cmath>
#include <string>

#include "vptq/errors.hpp"

namespace vptq {

HessianAccumulator::HessianAccumulator(std::size_t dim_) : dim(dim_) {
    if (dim == 0) {
        throw InvalidArgument("hessian dim must be >= 1");
    }
    sum.assign(dim * dim, 0.0);
}

void accumulate(HessianAccumulator& acc, const TensorF32& batch) {
    if (batch.rank() != 2 || batch.rows() != acc.dim) {
        throw ShapeError("activation batch must be dim x samples, dim=" +
                         std::to_string(acc.dim));
    }
    std::size_t n = acc.dim;
    std::size_t s = batch.cols();
    // sum += 2 * X * X^T, upper triangle then mirrored so the stored matrix
    // stays exactly symmetric after every call
    for (std::size_t t = 0; t < s; t++) {
        for (std::size_t i = 0; i < n; i++) {
            double xi = batch.at(i, t);
            if (xi == 0.0) continue;
            double* row = acc.sum.data() + i * n;
            for (std::size_t j = i; j < n; j++) {
                row[j] += 2.0 * xi * double(batch.at(j, t));
            }
        }
    }
    for (std::size_t i = 0; i < n; i++) {
        for (std::size_t j = 0; j < i; j++) {
            acc.sum[i * n + j] = acc.sum[j * n + i];
        }
    }
    acc.sample_count += s;
}

// In-place lower Cholesky of a row-major SPD matrix. Throws with the pivot
// index on failure.
static void cholesky_lower(std::vector<double>& a, std::size_t n) {
    for (std::size_t j = 0; j < n; j++) {
        double d = a[j * n + j];
        for (std::size_t k = 0; k < j; k++) {
            d -= a[j * n + k] * a[j * n + k];
        }
        if (!(d > 0.0) || !std::isfinite(d)) {
            throw NotPositiveDefinite(j, "cholesky failed at pivot " + std::to_string(j) +
                                             " (value " + std::to_string(d) + ")");
        }
        double dj = std::sqrt(d);
        a[j * n + j] = dj;
        for (std::size_t i = j + 1; i < n; i++) {
            double v = a[i * n + j];
            for (std::size_t k = 0; k < j; k++) {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / dj;
        }
        for (std::size_t k = j + 1; k < n; k++) {
            a[j * n + k] = 0.0;
        }
    }
}

// H^-1 = L^-T L^-1 from the lower factor.
static std::vector<double> invert_from_cholesky(const std::vector<double>& l, std::size_t n) {
    std::vector<double> linv(n * n, 0.0);
    for (std::size_t j = 0; j < n; j++) {
        linv[j * n + j] = 1.0 / l[j * n + j];
        for (std::size_t i = j + 1; i < n; i++) {
            double s = 0.0;
            for (std::size_t k = j; k < i; k++) {
                s += l[i * n + k] * linv[k * n + j];
            }
            linv[i * n + j] = -s / l[i * n + i];
        }
    }
    std::vector<double> hinv(n * n);
    for (std::size_t i = 0; i < n; i++) {
        for (std::size_t j = i; j < n; j++) {
            double s = 0.0;
            for (std::size_t k = j; k < n; k++) {
                s += linv[k * n + i] * linv[k * n + j];
            }
            hinv[i * n + j] = s;
            hinv[j * n + i] = s;
        }
    }
    return hinv;
}

static HessianData build_from_damped(std::vector<double> h, std::size_t n,
                                     double damping_fraction) {
    std::vector<double> chol = h;
    cholesky_lower(chol, n);
    std::vector<double> hinv = invert_from_cholesky(chol, n);

    double max_h = 0.0;
    for (double v : h) max_h = std::max(max_h, std::fabs(v));
    double max_residual = 0.0;
    for (std::size_t i = 0; i < n; i++) {
        for (std::size_t j = 0; j < n; j++) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; k++) {
                s += h[i * n + k] * hinv[k * n + j];
            }
            s -= (i == j) ? 1.0 : 0.0;
            max_residual = std::max(max_residual, std::fabs(s));
        }
    }
    if (max_residual > 1e-6 * max_h) {
        throw NumericError("hessian inverse residual " + std::to_string(max_residual) +
                           " exceeds 1e-6 * " + std::to_string(max_h));
    }

    HessianData hd;
    hd.dim = n;
    hd.damping_fraction = damping_fraction;
    hd.hinv_diag.resize(n);
    for (std::size_t i = 0; i < n; i++) {
        double d = hinv[i * n + i];
        if (!(d > 0.0)) {
            throw NumericError("inverse diagonal not positive at " + std::to_string(i));
        }
        hd.hinv_diag[i] = d;
    }
    hd.h = std::move(h);
    hd.hinv = std::move(hinv);
    return hd;
}

HessianData finalize(const HessianAccumulator& acc, double damping_fraction) {
    if (acc.sample_count == 0) {
        throw InvalidArgument("finalize needs at least one accumulated sample");
    }
    if (!(damping_fraction > 0.0)) {
        throw InvalidArgument("damping_fraction must be positive");
    }
    std::size_t n = acc.dim;
    std::vector<double> h(n * n);
    double inv_count = 1.0 / double(acc.sample_count);
    for (std::size_t i = 0; i < n * n; i++) {
        h[i] = acc.sum[i] * inv_count;
    }
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < n; i++) mean_diag += h[i * n + i];
    mean_diag /= double(n);
    double lambda = damping_fraction * mean_diag;
    for (std::size_t i = 0; i < n; i++) h[i * n + i] += lambda;
    return build_from_damped(std::move(h), n, damping_fraction);
}

HessianData identity_hessian(std::size_t dim) {
    if (dim == 0) {
        throw InvalidArgument("hessian dim must be >= 1");
    }
    HessianData hd;
    hd.dim = dim;
    hd.damping_fraction = 0.0;
    hd.h.assign(dim * dim, 0.0);
    hd.hinv.assign(dim * dim, 0.0);
    hd.hinv_diag.assign(dim, 1.0);
    for (std::size_t i = 0; i < dim; i++) {
        hd.h[i * dim + i] = 1.0;
        hd.hinv[i * dim + i] = 1.0;
    }
    return hd;
}

HessianData hessian_from_matrix(const TensorF32& t) {
    if (t.rank() != 2 || t.rows() != t.cols()) {
        throw InvalidHessian("hessian matrix must be square rank 2");
    }
    std::size_t n = t.rows();
    std::vector<double> h(n * n);
    double max_abs = 0.0;
    for (std::size_t i = 0; i < n * n; i++) {
        h[i] = double(t.data[i]);
        max_abs = std::max(max_abs, std::fabs(h[i]));
    }
    for (std::size_t i = 0; i < n; i++) {
        for (std::size_t j = i + 1; j < n; j++) {
            double asym = std::fabs(h[i * n + j] - h[j * n + i]);
            if (asym > 1e-5 * std::max(max_abs, 1e-30)) {
                throw InvalidHessian("hessian matrix is not symmetric at (" +
                                     std::to_string(i) + "," + std::to_string(j) + ")");
            }
            double m = 0.5 * (h[i * n + j] + h[j * n + i]);
            h[i * n + j] = m;
            h[j * n + i] = m;
        }
    }
    return build_from_damped(std::move(h), n, 0.0);
}

}  // namespace vptq
