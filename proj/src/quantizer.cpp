#include "vptq/quantizer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <thread>

#include "vptq/errors.hpp"
#include "vptq/npy.hpp"
#include "vptq/rng.hpp"

namespace vptq {

static bool is_pow2(std::size_t k) { return k >= 1 && (k & (k - 1)) == 0; }

static std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

uint64_t stage_seed(uint64_t base, CodebookRole role, uint32_t group) {
    return mix_seed(base, (uint64_t(role) + 1) * 0x100000000ull + group);
}

std::vector<std::string> QuantConfig::validate(std::size_t rows, std::size_t cols) const {
    std::vector<std::string> problems;
    auto bad = [&](const std::string& msg) { problems.push_back(msg); };

    if (v1 == 0) bad("v1 must be >= 1");
    if (k1 < 2 || !is_pow2(k1)) bad("k1 must be a power of two >= 2");
    if (k2 != 0 && (k2 < 2 || !is_pow2(k2))) bad("k2 must be 0 (disabled) or a power of two >= 2");
    if (k1 > 65536) bad("k1 must be <= 65536 (indices pack to at most 16 bits)");
    if (k2 > 65536) bad("k2 must be <= 65536 (indices pack to at most 16 bits)");
    if (!(outlier_percent >= 0.0 && outlier_percent <= 100.0)) {
        bad("outlier_percent must be in [0, 100]");
    }
    if (outlier_percent > 0.0) {
        if (v0 == 0) bad("v0 must be >= 1 when outliers are enabled");
        if (k0 < 2 || !is_pow2(k0)) bad("k0 must be a power of two >= 2 when outliers are enabled");
        if (k0 > 65536) bad("k0 must be <= 65536 (indices pack to at most 16 bits)");
    }
    if (group_num == 0) bad("group_num must be >= 1");
    if (!(damping_fraction > 0.0)) bad("damping_fraction must be positive");
    if (kmeans.max_iters < 0) bad("kmeans.max_iters must be >= 0");
    if (!(kmeans.rel_tol >= 0.0)) bad("kmeans.rel_tol must be >= 0");

    if (rows > 0 && cols > 0 && problems.empty()) {
        std::size_t out_count = std::size_t(std::floor(outlier_percent * double(cols) / 100.0));
        std::size_t non_out = cols - out_count;
        if (non_out < group_num) {
            bad("group_num=" + std::to_string(group_num) + " exceeds the " +
                std::to_string(non_out) + " non-outlier columns");
        } else {
            std::size_t band_cols = non_out / group_num;  // last band only gains columns
            std::size_t band_vectors = band_cols * ceil_div(rows, v1);
            if (band_vectors < k1) {
                bad("k1=" + std::to_string(k1) + " exceeds the " + std::to_string(band_vectors) +
                    " training vectors of the smallest band");
            }
            if (k2 > 0 && band_vectors < k2) {
                bad("k2=" + std::to_string(k2) + " exceeds the " + std::to_string(band_vectors) +
                    " training vectors of the smallest band");
            }
        }
        if (out_count > 0) {
            std::size_t out_vectors = out_count * ceil_div(rows, v0);
            if (out_vectors < k0) {
                bad("k0=" + std::to_string(k0) + " exceeds the " + std::to_string(out_vectors) +
                    " outlier training vectors");
            }
        }
    }
    return problems;
}

// ---- column helpers --------------------------------------------------------

template <typename T>
static std::vector<T> reshape_column_impl(std::span<const T> column, std::size_t v) {
    if (v == 0) throw InvalidArgument("vector length must be >= 1");
    if (column.empty()) throw ShapeError("column must not be empty");
    std::vector<T> out(ceil_div(column.size(), v) * v, T(0));
    std::copy(column.begin(), column.end(), out.begin());
    return out;
}

std::vector<float> reshape_column(std::span<const float> column, std::size_t v) {
    return reshape_column_impl(column, v);
}

std::vector<double> reshape_column(std::span<const double> column, std::size_t v) {
    return reshape_column_impl(column, v);
}

ColumnQuant quantize_column(std::span<const double> column, const Codebook& cb,
                            const Codebook* residual_cb) {
    if (residual_cb && residual_cb->vector_len != cb.vector_len) {
        throw ShapeError("residual codebook vector_len does not match");
    }
    std::size_t m = column.size();
    std::size_t v = cb.vector_len;
    std::vector<double> padded = reshape_column(column, v);
    std::size_t vecs = padded.size() / v;

    ColumnQuant out;
    out.values.resize(m);
    out.main_idx.resize(vecs);
    if (residual_cb) out.residual_idx.resize(vecs);

    std::vector<double> residual(v);
    for (std::size_t s = 0; s < vecs; s++) {
        std::span<const double> chunk(padded.data() + s * v, v);
        std::size_t a = assign_nearest(chunk, cb);
        out.main_idx[s] = uint32_t(a);
        std::span<const float> c = cb.centroid(a);
        std::span<const float> r;
        if (residual_cb) {
            // pad rows carry no residual, matching how the pipeline trains
            for (std::size_t i = 0; i < v; i++) {
                residual[i] = (s * v + i < m) ? chunk[i] - double(c[i]) : 0.0;
            }
            std::size_t ra = assign_nearest(std::span<const double>(residual), *residual_cb);
            out.residual_idx[s] = uint32_t(ra);
            r = residual_cb->centroid(ra);
        }
        for (std::size_t i = 0; i < v; i++) {
            std::size_t pos = s * v + i;
            if (pos >= m) break;
            out.values[pos] = residual_cb ? c[i] + r[i] : c[i];
        }
    }
    return out;
}

template <typename A, typename B>
static double delta_L_impl(std::span<const A> q_hat, std::span<const B> q_orig, double hinv_qq) {
    if (q_hat.size() != q_orig.size()) {
        throw ShapeError("delta_L column sizes differ");
    }
    if (!(hinv_qq > 0.0) || !std::isfinite(hinv_qq)) {
        throw InvalidHessian("hinv_qq must be positive, got " + std::to_string(hinv_qq));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < q_hat.size(); i++) {
        double d = double(q_hat[i]) - double(q_orig[i]);
        s += d * d;
    }
    return s / (2.0 * hinv_qq);
}

double delta_L(std::span<const double> q_hat, std::span<const double> q_orig, double hinv_qq) {
    return delta_L_impl(q_hat, q_orig, hinv_qq);
}

double delta_L(std::span<const float> q_hat, std::span<const float> q_orig, double hinv_qq) {
    return delta_L_impl(q_hat, q_orig, hinv_qq);
}

void propagate_error(std::vector<double>& work, std::size_t rows, std::size_t cols,
                     std::size_t q, std::span<const float> q_hat, const HessianData& hd,
                     std::span<const std::size_t> unquantized, bool hessian_rows) {
    if (work.size() != rows * cols) throw ShapeError("work buffer does not match rows*cols");
    if (q >= cols) throw ShapeError("column index out of range");
    if (q_hat.size() != rows) throw ShapeError("q_hat must have one entry per row");
    if (hd.dim != cols) throw ShapeError("hessian dim does not match column count");

    double hinv_qq = hd.hinv[q * cols + q];
    if (!(hinv_qq > 0.0)) {
        throw InvalidHessian("hinv_qq must be positive at column " + std::to_string(q));
    }
    const double* row_src = (hessian_rows ? hd.h.data() : hd.hinv.data()) + q * cols;

    std::vector<double> err(rows);
    for (std::size_t m = 0; m < rows; m++) {
        err[m] = double(q_hat[m]) - work[m * cols + q];
        work[m * cols + q] = double(q_hat[m]);
    }

    std::vector<std::pair<std::size_t, double>> coeff;
    coeff.reserve(unquantized.size());
    for (std::size_t j : unquantized) {
        if (j >= cols) throw ShapeError("unquantized column index out of range");
        if (j == q) continue;  // the quantized column stays exactly q_hat
        coeff.emplace_back(j, row_src[j] / hinv_qq);
    }

    for (std::size_t m = 0; m < rows; m++) {
        double e = err[m];
        if (e == 0.0) continue;
        double* row = work.data() + m * cols;
        for (const auto& [j, c] : coeff) {
            row[j] += e * c;
        }
    }
}

std::vector<std::size_t> select_outlier_columns(const TensorF32& w, const HessianData& hd,
                                                double percent) {
    if (w.rank() != 2) throw ShapeError("weight matrix must be rank 2");
    if (hd.dim != w.cols()) throw ShapeError("hessian dim does not match column count");
    if (!(percent >= 0.0 && percent <= 100.0)) {
        throw InvalidArgument("outlier percent must be in [0, 100]");
    }
    std::size_t n = w.cols();
    std::size_t count = std::size_t(std::floor(percent * double(n) / 100.0));
    if (count == 0) return {};

    std::vector<double> score(n);
    for (std::size_t q = 0; q < n; q++) {
        double norm2 = 0.0;
        for (std::size_t m = 0; m < w.rows(); m++) {
            double x = w.at(m, q);
            norm2 += x * x;
        }
        score[q] = hd.h[q * n + q] * norm2;
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; i++) order[i] = i;
    std::partial_sort(order.begin(), order.begin() + count, order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (score[a] != score[b]) return score[a] > score[b];
                          return a < b;
                      });
    order.resize(count);
    std::sort(order.begin(), order.end());
    return order;
}

// ---- full pipeline ----------------------------------------------------------

namespace {

// Column gather/scatter for the row-major working matrix.
void copy_column(const std::vector<double>& work, std::size_t rows, std::size_t cols,
                 std::size_t q, std::vector<double>& out) {
    out.resize(rows);
    for (std::size_t m = 0; m < rows; m++) out[m] = work[m * cols + q];
}

std::vector<std::size_t> complement_sorted(std::span<const std::size_t> outliers,
                                           std::size_t n) {
    std::vector<std::size_t> rest;
    rest.reserve(n - outliers.size());
    std::size_t oi = 0;
    for (std::size_t q = 0; q < n; q++) {
        if (oi < outliers.size() && outliers[oi] == q) {
            oi++;
        } else {
            rest.push_back(q);
        }
    }
    return rest;
}

// Training vectors for a set of columns: each original column reshaped to
// length-v chunks, chunk weight = the column's damped Hessian diagonal.
void gather_training_set(const TensorF32& w, const HessianData& hd,
                         std::span<const std::size_t> columns, std::size_t v,
                         std::vector<float>& vectors, std::vector<double>& weights) {
    std::size_t vecs = ceil_div(w.rows(), v);
    vectors.assign(columns.size() * vecs * v, 0.0f);
    weights.resize(columns.size() * vecs);
    for (std::size_t ci = 0; ci < columns.size(); ci++) {
        std::size_t q = columns[ci];
        float* dst = vectors.data() + ci * vecs * v;
        for (std::size_t m = 0; m < w.rows(); m++) dst[m] = w.at(m, q);
        double h_qq = hd.h[q * hd.dim + q];
        for (std::size_t s = 0; s < vecs; s++) weights[ci * vecs + s] = h_qq;
    }
}

}  // namespace

QuantizedMatrix quantize_matrix(const TensorF32& w, const HessianData& hd,
                                const QuantConfig& cfg) {
    if (w.rank() != 2) throw ShapeError("weight matrix must be rank 2");
    std::size_t rows = w.rows(), cols = w.cols();
    if (hd.dim != cols) {
        throw ShapeError("hessian dim " + std::to_string(hd.dim) +
                         " does not match column count " + std::to_string(cols));
    }
    {
        auto problems = cfg.validate(rows, cols);
        if (!problems.empty()) {
            std::string joined = "invalid config:";
            for (const auto& p : problems) joined += "\n  " + p;
            throw InvalidArgument(joined);
        }
    }

    QuantizedMatrix qm;
    qm.rows = rows;
    qm.cols = cols;
    qm.config = cfg;
    qm.padded_rows_main = ceil_div(rows, cfg.v1) * cfg.v1;

    qm.outlier_cols = select_outlier_columns(w, hd, cfg.outlier_percent);
    bool has_outliers = !qm.outlier_cols.empty();
    qm.padded_rows_outlier = has_outliers ? ceil_div(rows, cfg.v0) * cfg.v0 : 0;
    std::vector<std::size_t> non_out = complement_sorted(qm.outlier_cols, cols);

    // contiguous bands over the non-outlier columns; the last takes the
    // remainder
    std::size_t g = cfg.group_num;
    std::size_t per_band = non_out.size() / g;
    std::vector<std::pair<std::size_t, std::size_t>> band_pos(g);  // positions in non_out
    for (std::size_t b = 0; b < g; b++) {
        band_pos[b].first = b * per_band;
        band_pos[b].second = (b + 1 == g) ? non_out.size() : (b + 1) * per_band;
    }
    qm.group_layout.resize(g);
    for (std::size_t b = 0; b < g; b++) {
        qm.group_layout[b].col_start = (b == 0) ? 0 : qm.group_layout[b - 1].col_end;
        qm.group_layout[b].col_end =
            (b + 1 == g) ? cols : non_out[band_pos[b].second - 1] + 1;
        qm.group_layout[b].codebook_ref = b;
    }

    // codebooks are trained on the original columns; the sweep below then
    // quantizes the drifting working copy against them
    std::vector<float> train_vectors;
    std::vector<double> train_weights;
    for (std::size_t b = 0; b < g; b++) {
        std::span<const std::size_t> cols_b(non_out.data() + band_pos[b].first,
                                            band_pos[b].second - band_pos[b].first);
        gather_training_set(w, hd, cols_b, cfg.v1, train_vectors, train_weights);
        TrainOptions opts = cfg.kmeans;
        opts.seed = stage_seed(cfg.kmeans.seed, CodebookRole::Main, uint32_t(b));
        TrainResult tr = train_codebook(train_vectors, cfg.v1, train_weights, cfg.k1, opts);
        tr.codebook.role = CodebookRole::Main;
        tr.codebook.group_id = uint32_t(b);
        qm.codebooks.push_back(std::move(tr.codebook));
    }
    std::size_t outlier_cb_index = 0;
    if (has_outliers) {
        gather_training_set(w, hd, qm.outlier_cols, cfg.v0, train_vectors, train_weights);
        TrainOptions opts = cfg.kmeans;
        opts.seed = stage_seed(cfg.kmeans.seed, CodebookRole::Outlier, 0);
        TrainResult tr = train_codebook(train_vectors, cfg.v0, train_weights, cfg.k0, opts);
        tr.codebook.role = CodebookRole::Outlier;
        tr.codebook.group_id = 0;
        outlier_cb_index = qm.codebooks.size();
        qm.codebooks.push_back(std::move(tr.codebook));
    }

    // sweep order: outliers first, then the rest, each in the configured order
    std::vector<std::size_t> order;
    order.reserve(cols);
    order.insert(order.end(), qm.outlier_cols.begin(), qm.outlier_cols.end());
    order.insert(order.end(), non_out.begin(), non_out.end());
    if (cfg.column_order == ColumnOrder::DescendingHessianDiag) {
        auto by_diag = [&](std::size_t a, std::size_t b) {
            double da = hd.h[a * cols + a], db = hd.h[b * cols + b];
            if (da != db) return da > db;
            return a < b;
        };
        std::stable_sort(order.begin(), order.begin() + qm.outlier_cols.size(), by_diag);
        std::stable_sort(order.begin() + qm.outlier_cols.size(), order.end(), by_diag);
    }

    std::vector<std::size_t> band_of(cols, SIZE_MAX);
    std::vector<std::size_t> position_of(cols, SIZE_MAX);
    for (std::size_t b = 0; b < g; b++) {
        for (std::size_t p = band_pos[b].first; p < band_pos[b].second; p++) {
            band_of[non_out[p]] = b;
            position_of[non_out[p]] = p;
        }
    }
    for (std::size_t p = 0; p < qm.outlier_cols.size(); p++) {
        position_of[qm.outlier_cols[p]] = p;
    }

    std::size_t vecs_main = qm.padded_rows_main / cfg.v1;
    std::size_t vecs_out = has_outliers ? qm.padded_rows_outlier / cfg.v0 : 0;
    qm.main_indices.assign(non_out.size() * vecs_main, 0);
    qm.outlier_indices.assign(qm.outlier_cols.size() * vecs_out, 0);

    std::vector<double> work(w.data.begin(), w.data.end());
    // residual targets: each non-outlier column as it stood when quantized,
    // minus what the main stage wrote for it
    std::vector<float> residual_cols;
    if (cfg.k2 > 0) residual_cols.assign(non_out.size() * rows, 0.0f);

    // Working inverse over the still-unquantized columns. Freezing a column
    // removes it from the quadratic system, so before the next step the
    // inverse must become the inverse of H restricted to the remaining
    // columns: the Schur downdate below does exactly that to the explicit
    // matrix, which keeps arbitrary sweep orders cheap.
    HessianData hcur = hd;

    double sum_dl = 0.0;
    std::vector<double> snapshot;
    std::vector<double> inv_col(cols);
    for (std::size_t pos = 0; pos < order.size(); pos++) {
        std::size_t q = order[pos];
        bool outlier = band_of[q] == SIZE_MAX;
        const Codebook& cb = qm.codebooks[outlier ? outlier_cb_index : band_of[q]];

        copy_column(work, rows, cols, q, snapshot);
        ColumnQuant cq = quantize_column(snapshot, cb);

        sum_dl += delta_L_impl(std::span<const float>(cq.values),
                               std::span<const double>(snapshot), hcur.hinv_diag[q]);

        std::size_t p = position_of[q];
        if (outlier) {
            std::copy(cq.main_idx.begin(), cq.main_idx.end(),
                      qm.outlier_indices.begin() + p * vecs_out);
        } else {
            std::copy(cq.main_idx.begin(), cq.main_idx.end(),
                      qm.main_indices.begin() + p * vecs_main);
            if (cfg.k2 > 0) {
                float* dst = residual_cols.data() + p * rows;
                for (std::size_t m = 0; m < rows; m++) {
                    dst[m] = float(snapshot[m] - double(cq.values[m]));
                }
            }
        }

        std::span<const std::size_t> remaining(order.data() + pos + 1, order.size() - pos - 1);
        propagate_error(work, rows, cols, q, cq.values, hcur, remaining,
                        cfg.propagate_with_hessian_rows);

        // hinv' = hinv - hinv[:,q] hinv[q,:] / hinv[q,q] over the remaining
        // columns; the products commute, so symmetry survives bit for bit
        double pivot = hcur.hinv[q * cols + q];
        for (std::size_t j : remaining) inv_col[j] = hcur.hinv[j * cols + q];
        for (std::size_t a = 0; a < remaining.size(); a++) {
            std::size_t j = remaining[a];
            for (std::size_t b = a; b < remaining.size(); b++) {
                std::size_t l = remaining[b];
                double sub = inv_col[j] * inv_col[l] / pivot;
                hcur.hinv[j * cols + l] -= sub;
                if (l != j) hcur.hinv[l * cols + j] -= sub;
            }
            hcur.hinv_diag[j] = hcur.hinv[j * cols + j];
        }
        for (std::size_t l = 0; l < cols; l++) {
            hcur.hinv[q * cols + l] = 0.0;
            hcur.hinv[l * cols + q] = 0.0;
        }
    }
    qm.stats.sum_delta_L = sum_dl;

    if (cfg.k2 > 0) {
        qm.residual_indices.assign(non_out.size() * vecs_main, 0);
        std::vector<float> vectors;
        std::vector<double> weights;
        for (std::size_t b = 0; b < g; b++) {
            std::size_t pb = band_pos[b].first, pe = band_pos[b].second;
            vectors.assign((pe - pb) * vecs_main * cfg.v1, 0.0f);
            weights.resize((pe - pb) * vecs_main);
            for (std::size_t p = pb; p < pe; p++) {
                std::size_t q = non_out[p];
                float* dst = vectors.data() + (p - pb) * vecs_main * cfg.v1;
                std::memcpy(dst, residual_cols.data() + p * rows, rows * sizeof(float));
                double h_qq = hd.h[q * cols + q];
                for (std::size_t s = 0; s < vecs_main; s++) {
                    weights[(p - pb) * vecs_main + s] = h_qq;
                }
            }
            TrainOptions opts = cfg.kmeans;
            opts.seed = stage_seed(cfg.kmeans.seed, CodebookRole::Residual, uint32_t(b));
            TrainResult tr =
                train_residual_codebook(vectors, cfg.v1, weights, cfg.k2, opts);
            tr.codebook.group_id = uint32_t(b);
            qm.codebooks.push_back(std::move(tr.codebook));
            std::copy(tr.assignments.begin(), tr.assignments.end(),
                      qm.residual_indices.begin() + pb * vecs_main);
        }
    }

    TensorF32 w_hat = dequantize(qm);
    double se = 0.0, max_err = 0.0;
    for (std::size_t i = 0; i < w.data.size(); i++) {
        double d = double(w_hat.data[i]) - double(w.data[i]);
        se += d * d;
        max_err = std::max(max_err, std::fabs(d));
    }
    qm.stats.frobenius_mse = se / double(rows * cols);
    qm.stats.max_abs_err = max_err;
    qm.stats.proxy_loss = proxy_loss(w, w_hat, hd);
    return qm;
}

TensorF32 dequantize(const QuantizedMatrix& qm) {
    const QuantConfig& cfg = qm.config;
    std::size_t rows = qm.rows, cols = qm.cols;
    if (rows == 0 || cols == 0) throw CorruptIndices("quantized matrix has empty shape");

    std::vector<std::size_t> non_out = complement_sorted(qm.outlier_cols, cols);
    std::size_t vecs_main = cfg.v1 ? qm.padded_rows_main / cfg.v1 : 0;
    std::size_t vecs_out = cfg.v0 ? qm.padded_rows_outlier / cfg.v0 : 0;
    bool residual = !qm.residual_indices.empty();

    if (qm.main_indices.size() != non_out.size() * vecs_main) {
        throw CorruptIndices("main index count does not match layout");
    }
    if (residual && qm.residual_indices.size() != qm.main_indices.size()) {
        throw CorruptIndices("residual index count does not match main indices");
    }
    if (qm.outlier_indices.size() != qm.outlier_cols.size() * vecs_out) {
        throw CorruptIndices("outlier index count does not match layout");
    }

    auto find_codebook = [&](CodebookRole role, uint32_t group) -> const Codebook& {
        for (const auto& cb : qm.codebooks) {
            if (cb.role == role && cb.group_id == group) return cb;
        }
        throw CorruptIndices("missing codebook for role " +
                             std::to_string(int(role)) + " group " + std::to_string(group));
    };

    TensorF32 out = TensorF32::zeros({rows, cols});

    // non-outlier columns, walking the bands in step with the sorted column list
    std::size_t band = 0;
    for (std::size_t p = 0; p < non_out.size(); p++) {
        std::size_t q = non_out[p];
        while (band < qm.group_layout.size() && q >= qm.group_layout[band].col_end) band++;
        if (band >= qm.group_layout.size()) {
            throw CorruptIndices("column " + std::to_string(q) + " outside all bands");
        }
        if (qm.group_layout[band].codebook_ref >= qm.codebooks.size()) {
            throw CorruptIndices("band codebook_ref out of range");
        }
        const Codebook& cb = qm.codebooks[qm.group_layout[band].codebook_ref];
        const Codebook* rcb =
            residual ? &find_codebook(CodebookRole::Residual, cb.group_id) : nullptr;
        for (std::size_t s = 0; s < vecs_main; s++) {
            uint32_t idx = qm.main_indices[p * vecs_main + s];
            if (idx >= cb.k) throw CorruptIndices("main index out of range");
            std::span<const float> c = cb.centroid(idx);
            std::span<const float> r;
            if (rcb) {
                uint32_t ridx = qm.residual_indices[p * vecs_main + s];
                if (ridx >= rcb->k) throw CorruptIndices("residual index out of range");
                r = rcb->centroid(ridx);
            }
            for (std::size_t i = 0; i < cfg.v1; i++) {
                std::size_t m = s * cfg.v1 + i;
                if (m >= rows) break;
                out.at(m, q) = rcb ? c[i] + r[i] : c[i];
            }
        }
    }

    if (!qm.outlier_cols.empty()) {
        const Codebook& cb = find_codebook(CodebookRole::Outlier, 0);
        for (std::size_t p = 0; p < qm.outlier_cols.size(); p++) {
            std::size_t q = qm.outlier_cols[p];
            if (q >= cols) throw CorruptIndices("outlier column out of range");
            for (std::size_t s = 0; s < vecs_out; s++) {
                uint32_t idx = qm.outlier_indices[p * vecs_out + s];
                if (idx >= cb.k) throw CorruptIndices("outlier index out of range");
                std::span<const float> c = cb.centroid(idx);
                for (std::size_t i = 0; i < cfg.v0; i++) {
                    std::size_t m = s * cfg.v0 + i;
                    if (m >= rows) break;
                    out.at(m, q) = c[i];
                }
            }
        }
    }
    return out;
}

double proxy_loss(const TensorF32& w, const TensorF32& w_hat, const HessianData& hd) {
    if (w.shape != w_hat.shape || w.rank() != 2) {
        throw ShapeError("matrices must be rank 2 with equal shapes");
    }
    if (hd.dim != w.cols()) throw ShapeError("hessian dim does not match column count");
    std::size_t rows = w.rows(), n = w.cols();
    std::vector<double> d(n);
    double total = 0.0;
    for (std::size_t m = 0; m < rows; m++) {
        for (std::size_t j = 0; j < n; j++) {
            d[j] = double(w_hat.at(m, j)) - double(w.at(m, j));
        }
        for (std::size_t i = 0; i < n; i++) {
            if (d[i] == 0.0) continue;
            const double* hrow = hd.h.data() + i * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; j++) s += hrow[j] * d[j];
            total += d[i] * s;
        }
    }
    return total;
}

double proxy_loss_decomposed(const TensorF32& w, const TensorF32& w_hat,
                             const HessianData& hd) {
    if (w.shape != w_hat.shape || w.rank() != 2) {
        throw ShapeError("matrices must be rank 2 with equal shapes");
    }
    if (hd.dim != w.cols()) throw ShapeError("hessian dim does not match column count");
    std::size_t rows = w.rows(), n = w.cols();
    // gram matrix of the per-column error vectors
    std::vector<double> gram(n * n, 0.0);
    for (std::size_t m = 0; m < rows; m++) {
        for (std::size_t i = 0; i < n; i++) {
            double di = double(w_hat.at(m, i)) - double(w.at(m, i));
            if (di == 0.0) continue;
            for (std::size_t j = i; j < n; j++) {
                double dj = double(w_hat.at(m, j)) - double(w.at(m, j));
                gram[i * n + j] += di * dj;
            }
        }
    }
    double diag_term = 0.0, cross_term = 0.0;
    for (std::size_t i = 0; i < n; i++) {
        diag_term += hd.h[i * n + i] * gram[i * n + i];
        for (std::size_t j = i + 1; j < n; j++) {
            cross_term += 2.0 * hd.h[i * n + j] * gram[i * n + j];
        }
    }
    return diag_term + cross_term;
}

std::vector<ModelEntryResult> quantize_model(const std::vector<ModelEntry>& manifest,
                                             const QuantConfig& cfg, unsigned workers) {
    std::vector<ModelEntryResult> results(manifest.size());
    if (manifest.empty()) return results;
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = unsigned(std::min<std::size_t>(workers, manifest.size()));

    std::atomic<std::size_t> next{0};
    auto run = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= manifest.size()) break;
            const ModelEntry& entry = manifest[i];
            ModelEntryResult& res = results[i];
            res.name = entry.name;
            try {
                TensorF32 w = load_npy(entry.weight_path);
                if (w.rank() != 2) {
                    throw ShapeError("weight tensor must be rank 2: " + entry.weight_path);
                }
                HessianData hd = hessian_from_matrix(load_npy(entry.hessian_path));
                res.quantized = quantize_matrix(w, hd, cfg);
            } catch (const std::exception& e) {
                res.quantized.reset();
                res.error = e.what();
            }
        }
    };

    if (workers == 1) {
        run();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < workers; t++) pool.emplace_back(run);
        for (auto& t : pool) t.join();
    }
    return results;
}

}  // namespace vptq
