#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <doctest.h>

#include "test_helpers.hpp"
#include "vptq/errors.hpp"
#include "vptq/hessian.hpp"
#include "vptq/npy.hpp"
#include "vptq/quantizer.hpp"
#include "vptq/rng.hpp"

using namespace vptq;

namespace {

TensorF32 random_matrix(std::size_t rows, std::size_t cols, uint64_t seed,
                        double scale = 1.0) {
    Rng rng{seed};
    std::vector<float> data(rows * cols);
    for (auto& v : data) v = float((rng.next_double() * 2.0 - 1.0) * scale);
    return TensorF32({rows, cols}, std::move(data));
}

// Damped curvature from random activations; correlated off-diagonals.
HessianData random_hessian(std::size_t dim, uint64_t seed, double damping = 0.05) {
    Rng rng{seed};
    std::vector<float> batch(dim * (dim + 6));
    for (auto& v : batch) v = float(rng.next_double() * 2.0 - 1.0);
    HessianAccumulator acc(dim);
    accumulate(acc, TensorF32({dim, dim + 6}, std::move(batch)));
    return finalize(acc, damping);
}

Codebook make_codebook(std::size_t v, std::vector<float> centroids,
                       CodebookRole role = CodebookRole::Main) {
    Codebook cb;
    cb.vector_len = v;
    cb.k = centroids.size() / v;
    cb.centroids = std::move(centroids);
    cb.role = role;
    return cb;
}

// tr(D * H * D^T) for a float64 difference matrix, summed independently of
// the library's proxy_loss.
double trace_loss(const std::vector<double>& delta, std::size_t rows, std::size_t cols,
                  const HessianData& hd) {
    double total = 0.0;
    for (std::size_t m = 0; m < rows; m++) {
        const double* d = delta.data() + m * cols;
        for (std::size_t i = 0; i < cols; i++) {
            double s = 0.0;
            for (std::size_t j = 0; j < cols; j++) s += hd.h[i * cols + j] * d[j];
            total += d[i] * s;
        }
    }
    return total;
}

std::vector<double> widen(const TensorF32& t) {
    return std::vector<double>(t.data.begin(), t.data.end());
}

QuantConfig small_config() {
    QuantConfig cfg;
    cfg.v1 = 2;
    cfg.k1 = 4;
    cfg.k2 = 0;
    cfg.group_num = 1;
    return cfg;
}

}  // namespace

TEST_SUITE("quantizer") {

TEST_CASE("reshape_column pads the tail with zeros") {
    std::vector<float> col = {1, 2, 3, 4, 5};
    auto padded = reshape_column(std::span<const float>(col), 2);
    CHECK(padded == std::vector<float>{1, 2, 3, 4, 5, 0});
    auto same = reshape_column(std::span<const float>(col), 1);
    CHECK(same == col);
    auto wide = reshape_column(std::span<const float>(col), 8);
    CHECK(wide.size() == 8);
    CHECK(wide[4] == 5.0f);
    CHECK(wide[7] == 0.0f);
    CHECK_THROWS_AS(reshape_column(std::span<const float>(col), 0), InvalidArgument);
    CHECK_THROWS_AS(reshape_column(std::span<const float>{}, 2), ShapeError);
}

TEST_CASE("reshape round-trips after dropping the pad") {
    Rng rng{17};
    std::vector<double> col(97);
    for (auto& v : col) v = rng.next_double();
    auto padded = reshape_column(std::span<const double>(col), 8);
    CHECK(padded.size() == 104);
    CHECK(std::equal(col.begin(), col.end(), padded.begin()));
    for (std::size_t i = 97; i < 104; i++) CHECK(padded[i] == 0.0);
}

TEST_CASE("quantize_column maps each chunk to its centroid") {
    auto cb = make_codebook(2, {1.0f, 2.0f});
    std::vector<double> col = {1, 2, 3, 4};
    auto cq = quantize_column(col, cb);
    CHECK(cq.values == std::vector<float>{1, 2, 1, 2});
    CHECK(cq.main_idx == std::vector<uint32_t>{0, 0});
    CHECK(cq.residual_idx.empty());
}

TEST_CASE("quantize_column adds the residual centroid") {
    auto cb = make_codebook(2, {1.0f, 2.0f});
    auto rcb = make_codebook(2, {0.0f, 0.0f, 2.0f, 2.0f}, CodebookRole::Residual);
    std::vector<double> col = {3, 4};
    auto cq = quantize_column(col, cb, &rcb);
    CHECK(cq.main_idx == std::vector<uint32_t>{0});
    CHECK(cq.residual_idx == std::vector<uint32_t>{1});
    CHECK(cq.values == std::vector<float>{3, 4});
}

TEST_CASE("quantize_column ignores pad rows when matching residuals") {
    // column (1,1,1) with v=2: the pad slot of the last chunk must not pull
    // the residual toward (0,-1)
    auto cb = make_codebook(2, {1.0f, 1.0f});
    auto rcb = make_codebook(2, {0.0f, 0.0f, 0.0f, -1.0f}, CodebookRole::Residual);
    std::vector<double> col = {1, 1, 1};
    auto cq = quantize_column(col, cb, &rcb);
    CHECK(cq.residual_idx == std::vector<uint32_t>{0, 0});
    CHECK(cq.values == std::vector<float>{1, 1, 1});
}

TEST_CASE("delta_L closed form") {
    std::vector<double> q_hat = {2.0, 3.0};
    std::vector<double> q_orig = {1.0, 2.0};
    CHECK(delta_L(std::span<const double>(q_hat), std::span<const double>(q_orig), 0.5) == 2.0);
    std::vector<float> fh = {2.0f, 3.0f}, fo = {1.0f, 2.0f};
    CHECK(delta_L(std::span<const float>(fh), std::span<const float>(fo), 0.5) == 2.0);
    CHECK_THROWS_AS(delta_L(std::span<const double>(q_hat), std::span<const double>(q_orig), 0.0),
                    InvalidHessian);
    CHECK_THROWS_AS(delta_L(std::span<const double>(q_hat), std::span<const double>(q_orig), -1.0),
                    InvalidHessian);
    std::vector<double> shorter = {1.0};
    CHECK_THROWS_AS(delta_L(std::span<const double>(q_hat), std::span<const double>(shorter), 0.5),
                    ShapeError);
}

TEST_CASE("propagation under identity curvature changes nothing else") {
    auto w = random_matrix(4, 5, 23);
    auto hd = identity_hessian(5);
    auto work = widen(w);
    std::vector<float> q_hat = {0.5f, -0.5f, 0.25f, 0.0f};
    std::vector<std::size_t> rest = {0, 1, 3, 4};
    propagate_error(work, 4, 5, 2, q_hat, hd, rest);
    for (std::size_t m = 0; m < 4; m++) {
        for (std::size_t j = 0; j < 5; j++) {
            double want = (j == 2) ? double(q_hat[m]) : double(w.at(m, j));
            CHECK(work[m * 5 + j] == want);
        }
    }
}

TEST_CASE("propagation shifts a column by e * hinv_qj / hinv_qq") {
    // H = [[2,1],[1,2]], Hinv = (1/3)[[2,-1],[-1,2]]. Quantizing column 0 of
    // [[1, 0]] to 0.75 gives e = -0.25 and a shift of -0.25 * (-1/2) = 0.125.
    TensorF32 h({2, 2}, {2.0f, 1.0f, 1.0f, 2.0f});
    auto hd = hessian_from_matrix(h);
    std::vector<double> work = {1.0, 0.0};
    std::vector<float> q_hat = {0.75f};
    std::vector<std::size_t> rest = {1};
    propagate_error(work, 1, 2, 0, q_hat, hd, rest);
    CHECK(work[0] == 0.75);
    CHECK(work[1] == doctest::Approx(0.125).epsilon(1e-12));
}

TEST_CASE("compensation is the cheapest feasible update") {
    // Fixing column q to q_hat and letting every other column move, the
    // propagated update must (a) hit q_hat exactly, (b) cost exactly
    // 2 * delta_L under the curvature trace, and (c) beat 1000 random
    // feasible alternatives.
    std::size_t rows = 3, cols = 4, q = 1;
    auto w = random_matrix(rows, cols, 31);
    auto hd = random_hessian(cols, 32);

    std::vector<float> q_hat(rows);
    for (std::size_t m = 0; m < rows; m++) {
        q_hat[m] = float(std::round(w.at(m, q) * 4.0) / 4.0);
    }
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < cols; j++) {
        if (j != q) rest.push_back(j);
    }

    auto work = widen(w);
    propagate_error(work, rows, cols, q, q_hat, hd, rest);

    std::vector<double> delta(rows * cols);
    for (std::size_t i = 0; i < delta.size(); i++) delta[i] = work[i] - double(w.data[i]);
    for (std::size_t m = 0; m < rows; m++) {
        CHECK(delta[m * cols + q] == double(q_hat[m]) - double(w.at(m, q)));
    }

    std::vector<double> orig_col(rows), hat_col(rows);
    for (std::size_t m = 0; m < rows; m++) {
        orig_col[m] = w.at(m, q);
        hat_col[m] = q_hat[m];
    }
    double dl = delta_L(std::span<const double>(hat_col), std::span<const double>(orig_col),
                        hd.hinv_diag[q]);
    double cost = trace_loss(delta, rows, cols, hd);
    CHECK(std::abs(cost - 2.0 * dl) <= 1e-9 * std::max(1.0, std::abs(cost)));

    Rng rng{33};
    std::vector<double> alt(rows * cols);
    for (int trial = 0; trial < 1000; trial++) {
        for (std::size_t m = 0; m < rows; m++) {
            for (std::size_t j = 0; j < cols; j++) {
                alt[m * cols + j] =
                    delta[m * cols + j] +
                    (j == q ? 0.0 : (rng.next_double() - 0.5) * 0.2);
            }
        }
        CHECK(trace_loss(alt, rows, cols, hd) >= cost - 1e-9 * std::max(1.0, cost));
    }
}

TEST_CASE("curvature-row propagation is a distinct update") {
    std::size_t rows = 2, cols = 3, q = 0;
    auto w = random_matrix(rows, cols, 41);
    auto hd = random_hessian(cols, 42);
    std::vector<float> q_hat(rows, 0.0f);
    std::vector<std::size_t> rest = {1, 2};

    auto inv_form = widen(w);
    propagate_error(inv_form, rows, cols, q, q_hat, hd, rest, false);
    auto row_form = widen(w);
    propagate_error(row_form, rows, cols, q, q_hat, hd, rest, true);

    for (std::size_t m = 0; m < rows; m++) {
        CHECK(inv_form[m * cols + q] == 0.0);
        CHECK(row_form[m * cols + q] == 0.0);
    }
    CHECK(inv_form != row_form);
}

TEST_CASE("outlier selection ranks by curvature-weighted column norm") {
    // scores: col0 1*(1+1)=2, col1 4*1=4, col2 1*(4+4)=8, col3 1*0=0
    TensorF32 w({2, 4}, {1.0f, 1.0f, 2.0f, 0.0f, 1.0f, 0.0f, 2.0f, 0.0f});
    TensorF32 h({4, 4}, {1, 0, 0, 0, 0, 4, 0, 0, 0, 0, 1, 0, 0, 0, 0, 2});
    auto hd = hessian_from_matrix(h);

    CHECK(select_outlier_columns(w, hd, 0.0).empty());
    CHECK(select_outlier_columns(w, hd, 25.0) == std::vector<std::size_t>{2});
    CHECK(select_outlier_columns(w, hd, 50.0) == std::vector<std::size_t>{1, 2});
    CHECK(select_outlier_columns(w, hd, 49.0) == std::vector<std::size_t>{2});  // floor
    CHECK(select_outlier_columns(w, hd, 100.0) == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("outlier selection breaks score ties toward the lower column") {
    TensorF32 w({1, 4}, {3.0f, 1.0f, 3.0f, 1.0f});
    auto hd = identity_hessian(4);
    CHECK(select_outlier_columns(w, hd, 25.0) == std::vector<std::size_t>{0});
    CHECK(select_outlier_columns(w, hd, 50.0) == std::vector<std::size_t>{0, 2});
}

TEST_CASE("outlier selection matches a full sort") {
    auto w = random_matrix(5, 40, 51);
    auto hd = random_hessian(40, 52);
    auto got = select_outlier_columns(w, hd, 30.0);

    std::vector<double> score(40);
    for (std::size_t q = 0; q < 40; q++) {
        double n2 = 0.0;
        for (std::size_t m = 0; m < 5; m++) n2 += double(w.at(m, q)) * double(w.at(m, q));
        score[q] = hd.h[q * 40 + q] * n2;
    }
    std::vector<std::size_t> order(40);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b]) return score[a] > score[b];
        return a < b;
    });
    order.resize(12);  // floor(30% of 40)
    std::sort(order.begin(), order.end());
    CHECK(got == order);
}

TEST_CASE("identity curvature reduces the pipeline to plain vector quantization") {
    auto w = random_matrix(8, 6, 61);
    auto hd = identity_hessian(6);
    auto cfg = small_config();
    cfg.kmeans.seed = 9;

    auto qm = quantize_matrix(w, hd, cfg);

    // reference: train on the reshaped columns with unit weights, then assign
    // each original column chunk independently
    std::vector<float> vectors;
    for (std::size_t q = 0; q < 6; q++) {
        std::vector<float> col(8);
        for (std::size_t m = 0; m < 8; m++) col[m] = w.at(m, q);
        auto padded = reshape_column(std::span<const float>(col), 2);
        vectors.insert(vectors.end(), padded.begin(), padded.end());
    }
    std::vector<double> weights(vectors.size() / 2, 1.0);
    TrainOptions opts = cfg.kmeans;
    opts.seed = stage_seed(cfg.kmeans.seed, CodebookRole::Main, 0);
    auto ref = train_codebook(vectors, 2, weights, 4, opts);

    REQUIRE(qm.codebooks.size() == 1);
    CHECK(qm.codebooks[0].centroids == ref.codebook.centroids);
    for (std::size_t i = 0; i < qm.main_indices.size(); i++) {
        std::span<const float> chunk{vectors.data() + i * 2, 2};
        CHECK(qm.main_indices[i] == assign_nearest(chunk, qm.codebooks[0]));
    }

    auto w_hat = dequantize(qm);
    for (std::size_t q = 0; q < 6; q++) {
        for (std::size_t s = 0; s < 4; s++) {
            auto c = qm.codebooks[0].centroid(qm.main_indices[q * 4 + s]);
            CHECK(w_hat.at(s * 2, q) == c[0]);
            CHECK(w_hat.at(s * 2 + 1, q) == c[1]);
        }
    }
}

TEST_CASE("a perfectly representable matrix quantizes exactly") {
    // every column tiles two of four distinct length-2 patterns, and k1=4
    std::vector<float> patterns = {0.5f, -0.5f, 1.0f, 2.0f, -1.5f, 0.25f, 3.0f, -2.0f};
    TensorF32 w = TensorF32::zeros({4, 6});
    Rng rng{71};
    for (std::size_t q = 0; q < 6; q++) {
        for (std::size_t s = 0; s < 2; s++) {
            std::size_t p = rng.next_below(4);
            w.at(s * 2, q) = patterns[p * 2];
            w.at(s * 2 + 1, q) = patterns[p * 2 + 1];
        }
    }
    auto hd = random_hessian(6, 72);
    auto cfg = small_config();
    auto qm = quantize_matrix(w, hd, cfg);

    CHECK(qm.stats.frobenius_mse == 0.0);
    CHECK(qm.stats.max_abs_err == 0.0);
    CHECK(qm.stats.proxy_loss == 0.0);
    CHECK(qm.stats.sum_delta_L == 0.0);
    CHECK(dequantize(qm).data == w.data);
}

TEST_CASE("pipeline stats are measured on the final reconstruction") {
    auto w = random_matrix(10, 8, 81);
    auto hd = random_hessian(8, 82);
    auto cfg = small_config();
    cfg.k2 = 4;
    cfg.kmeans.seed = 83;
    auto qm = quantize_matrix(w, hd, cfg);

    auto w_hat = dequantize(qm);
    double se = 0.0, max_err = 0.0;
    for (std::size_t i = 0; i < w.data.size(); i++) {
        double d = double(w_hat.data[i]) - double(w.data[i]);
        se += d * d;
        max_err = std::max(max_err, std::abs(d));
    }
    CHECK(qm.stats.frobenius_mse == se / 80.0);
    CHECK(qm.stats.max_abs_err == max_err);
    CHECK(qm.stats.proxy_loss == proxy_loss(w, w_hat, hd));
    CHECK(qm.stats.proxy_loss >= 0.0);
    CHECK(qm.stats.sum_delta_L >= 0.0);
}

TEST_CASE("per-column closed-form losses telescope to the final proxy loss") {
    // Each sweep step fixes one column and applies the optimal compensation
    // for the still-free ones, so the quadratic loss grows by exactly
    // 2 * delta_L per step. Without a residual stage the final proxy loss
    // must therefore equal twice the accumulated closed-form losses.
    for (uint64_t seed : {211u, 212u, 213u}) {
        auto w = random_matrix(16, 12, seed);
        auto hd = random_hessian(12, seed + 500);
        QuantConfig cfg;
        cfg.v1 = 4;
        cfg.k1 = 8;
        cfg.group_num = 2;
        cfg.kmeans.seed = seed;
        if (seed == 212u) {
            cfg.v0 = 2;
            cfg.k0 = 4;
            cfg.outlier_percent = 20.0;
        }
        if (seed == 213u) cfg.column_order = ColumnOrder::DescendingHessianDiag;
        auto qm = quantize_matrix(w, hd, cfg);
        CHECK(std::abs(qm.stats.proxy_loss - 2.0 * qm.stats.sum_delta_L) <=
              1e-9 * std::max(qm.stats.proxy_loss, 1e-12));
    }
}

TEST_CASE("the residual stage can only help the proxy loss") {
    for (uint64_t seed : {101u, 102u, 103u}) {
        auto w = random_matrix(16, 12, seed);
        auto hd = random_hessian(12, seed + 1000);
        QuantConfig base;
        base.v1 = 4;
        base.k1 = 8;
        base.group_num = 1;
        base.kmeans.seed = seed;
        auto plain = quantize_matrix(w, hd, base);
        auto with_residual = base;
        with_residual.k2 = 8;
        auto rvq = quantize_matrix(w, hd, with_residual);
        CHECK(rvq.stats.proxy_loss <= plain.stats.proxy_loss);
    }
}

TEST_CASE("outliers and bands partition the columns") {
    auto w = random_matrix(6, 8, 91);
    auto hd = random_hessian(8, 92);
    QuantConfig cfg;
    cfg.v1 = 2;
    cfg.k1 = 4;
    cfg.v0 = 2;
    cfg.k0 = 4;
    cfg.outlier_percent = 25.0;
    cfg.group_num = 1;
    auto qm = quantize_matrix(w, hd, cfg);

    CHECK(qm.outlier_cols.size() == 2);
    CHECK(std::is_sorted(qm.outlier_cols.begin(), qm.outlier_cols.end()));
    CHECK(qm.outlier_cols == select_outlier_columns(w, hd, 25.0));
    CHECK(qm.padded_rows_outlier == 6);
    CHECK(qm.outlier_indices.size() == 2 * 3);
    CHECK(qm.main_indices.size() == 6 * 3);

    REQUIRE(qm.group_layout.size() == 1);
    CHECK(qm.group_layout[0].col_start == 0);
    CHECK(qm.group_layout[0].col_end == 8);

    bool has_outlier_book = false;
    for (const auto& cb : qm.codebooks) {
        if (cb.role == CodebookRole::Outlier) has_outlier_book = true;
    }
    CHECK(has_outlier_book);
    CHECK(std::isfinite(qm.stats.proxy_loss));
    dequantize(qm);  // must reconstruct every column without throwing
}

TEST_CASE("bands tile the columns and own contiguous index slices") {
    auto w = random_matrix(8, 9, 111);
    auto hd = random_hessian(9, 112);
    QuantConfig cfg;
    cfg.v1 = 2;
    cfg.k1 = 4;
    cfg.k2 = 4;
    cfg.group_num = 2;
    cfg.kmeans.seed = 4;
    auto qm = quantize_matrix(w, hd, cfg);

    REQUIRE(qm.group_layout.size() == 2);
    CHECK(qm.group_layout[0].col_start == 0);
    CHECK(qm.group_layout[0].col_end == qm.group_layout[1].col_start);
    CHECK(qm.group_layout[1].col_end == 9);
    // 4 columns in band 0 (9/2 rounded down), 5 in band 1
    CHECK(qm.group_layout[0].col_end == 4);

    std::size_t mains = 0, residuals = 0;
    for (const auto& cb : qm.codebooks) {
        if (cb.role == CodebookRole::Main) mains++;
        if (cb.role == CodebookRole::Residual) residuals++;
        CHECK(cb.k == 4);
    }
    CHECK(mains == 2);
    CHECK(residuals == 2);

    // band 0 indices must decode against codebook 0, not codebook 1
    const auto& band0 = qm.codebooks[qm.group_layout[0].codebook_ref];
    CHECK(band0.role == CodebookRole::Main);
    CHECK(band0.group_id == 0);
    auto w_hat = dequantize(qm);
    CHECK(w_hat.shape == w.shape);
}

TEST_CASE("column order variants run and stay deterministic") {
    auto w = random_matrix(8, 6, 121);
    auto hd = random_hessian(6, 122);
    auto cfg = small_config();
    cfg.column_order = ColumnOrder::DescendingHessianDiag;
    auto a = quantize_matrix(w, hd, cfg);
    auto b = quantize_matrix(w, hd, cfg);
    CHECK(a == b);

    cfg.column_order = ColumnOrder::Natural;
    auto c = quantize_matrix(w, hd, cfg);
    CHECK(c.group_layout == a.group_layout);  // layout does not depend on sweep order
}

TEST_CASE("proxy loss agrees with its decomposition") {
    for (uint64_t seed : {131u, 132u, 133u}) {
        auto w = random_matrix(7, 9, seed);
        auto w_hat = random_matrix(7, 9, seed + 50);
        auto hd = random_hessian(9, seed + 100);
        double a = proxy_loss(w, w_hat, hd);
        double b = proxy_loss_decomposed(w, w_hat, hd);
        CHECK(std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)));
    }
    CHECK_THROWS_AS(
        proxy_loss(random_matrix(2, 3, 1), random_matrix(3, 2, 1), identity_hessian(2)),
        ShapeError);
}

TEST_CASE("larger main codebooks lower the proxy loss on a fixed instance") {
    auto w = random_matrix(12, 8, 141);
    auto hd = random_hessian(8, 142);
    QuantConfig cfg;
    cfg.v1 = 2;
    cfg.k1 = 2;
    cfg.kmeans.seed = 7;
    double prev = quantize_matrix(w, hd, cfg).stats.proxy_loss;
    for (std::size_t k : {4u, 16u}) {
        cfg.k1 = k;
        double cur = quantize_matrix(w, hd, cfg).stats.proxy_loss;
        CHECK(cur <= prev);
        prev = cur;
    }
}

TEST_CASE("stage seeds differ per role and group") {
    uint64_t base = 42;
    CHECK(stage_seed(base, CodebookRole::Main, 0) != stage_seed(base, CodebookRole::Residual, 0));
    CHECK(stage_seed(base, CodebookRole::Main, 0) != stage_seed(base, CodebookRole::Outlier, 0));
    CHECK(stage_seed(base, CodebookRole::Main, 0) != stage_seed(base, CodebookRole::Main, 1));
    CHECK(stage_seed(base, CodebookRole::Main, 1) != stage_seed(base, CodebookRole::Residual, 0));
}

TEST_CASE("config validation reports every problem at once") {
    QuantConfig cfg;
    cfg.v1 = 0;
    cfg.k1 = 3;
    cfg.k2 = 5;
    cfg.group_num = 0;
    cfg.damping_fraction = 0.0;
    auto problems = cfg.validate();
    CHECK(problems.size() == 5);

    QuantConfig shape_cfg;
    shape_cfg.v1 = 2;
    shape_cfg.k1 = 256;
    auto shape_problems = shape_cfg.validate(4, 4);
    REQUIRE(shape_problems.size() == 1);
    CHECK(shape_problems[0].find("k1=256") != std::string::npos);

    QuantConfig outlier_cfg;
    outlier_cfg.outlier_percent = 10.0;
    auto outlier_problems = outlier_cfg.validate();
    CHECK(outlier_problems.size() == 2);  // v0 and k0 both unset

    CHECK(small_config().validate(8, 8).empty());
}

TEST_CASE("quantize_matrix rejects mismatched curvature and bad configs") {
    auto w = random_matrix(4, 6, 151);
    CHECK_THROWS_AS(quantize_matrix(w, identity_hessian(5), small_config()), ShapeError);

    QuantConfig bad;
    bad.v1 = 0;
    bad.k1 = 3;
    try {
        quantize_matrix(w, identity_hessian(6), bad);
        FAIL("expected InvalidArgument");
    } catch (const InvalidArgument& e) {
        std::string msg = e.what();
        CHECK(msg.find("v1") != std::string::npos);
        CHECK(msg.find("k1") != std::string::npos);
    }
}

TEST_CASE("dequantize rejects tampered indices") {
    auto w = random_matrix(6, 6, 161);
    auto qm = quantize_matrix(w, identity_hessian(6), small_config());

    auto bad = qm;
    bad.main_indices[0] = 999;
    CHECK_THROWS_AS(dequantize(bad), CorruptIndices);

    bad = qm;
    bad.main_indices.pop_back();
    CHECK_THROWS_AS(dequantize(bad), CorruptIndices);

    bad = qm;
    bad.residual_indices = {1, 2};  // wrong size for the layout
    CHECK_THROWS_AS(dequantize(bad), CorruptIndices);

    bad = qm;
    bad.codebooks.clear();
    CHECK_THROWS_AS(dequantize(bad), CorruptIndices);
}

TEST_CASE("quantize_model collects failures and keeps manifest order") {
    testutil::TempDir tmp;
    auto w0 = random_matrix(6, 4, 171);
    auto w1 = random_matrix(6, 4, 172);
    auto h = random_hessian(4, 173);
    TensorF32 h_mat({4, 4}, std::vector<float>(16));
    for (std::size_t i = 0; i < 16; i++) h_mat.data[i] = float(h.h[i]);
    save_npy(w0, tmp.path("w0.npy"));
    save_npy(w1, tmp.path("w1.npy"));
    save_npy(h_mat, tmp.path("h.npy"));

    std::vector<ModelEntry> manifest = {
        {"first", tmp.path("w0.npy").string(), tmp.path("h.npy").string()},
        {"missing", tmp.path("nope.npy").string(), tmp.path("h.npy").string()},
        {"second", tmp.path("w1.npy").string(), tmp.path("h.npy").string()},
    };
    auto results = quantize_model(manifest, small_config(), 2);
    REQUIRE(results.size() == 3);
    CHECK(results[0].name == "first");
    CHECK(results[0].quantized.has_value());
    CHECK(results[0].error.empty());
    CHECK(!results[1].quantized.has_value());
    CHECK(!results[1].error.empty());
    CHECK(results[2].name == "second");
    CHECK(results[2].quantized.has_value());
}

TEST_CASE("quantize_model output does not depend on the worker count") {
    testutil::TempDir tmp;
    std::vector<ModelEntry> manifest;
    for (int i = 0; i < 4; i++) {
        auto w = random_matrix(6, 4, 181 + i);
        auto h = random_hessian(4, 191 + i);
        TensorF32 h_mat({4, 4}, std::vector<float>(16));
        for (std::size_t j = 0; j < 16; j++) h_mat.data[j] = float(h.h[j]);
        auto wp = tmp.path("w" + std::to_string(i) + ".npy");
        auto hp = tmp.path("h" + std::to_string(i) + ".npy");
        save_npy(w, wp);
        save_npy(h_mat, hp);
        manifest.push_back({"m" + std::to_string(i), wp.string(), hp.string()});
    }
    auto serial = quantize_model(manifest, small_config(), 1);
    auto parallel = quantize_model(manifest, small_config(), 4);
    REQUIRE(serial.size() == parallel.size());
    for (std::size_t i = 0; i < serial.size(); i++) {
        CHECK(serial[i].quantized.has_value());
        CHECK(parallel[i].quantized.has_value());
        CHECK(*serial[i].quantized == *parallel[i].quantized);
    }
}

TEST_CASE("quantizing twice gives the identical result") {
    auto w = random_matrix(10, 8, 201);
    auto hd = random_hessian(8, 202);
    QuantConfig cfg;
    cfg.v1 = 2;
    cfg.k1 = 8;
    cfg.k2 = 4;
    cfg.v0 = 2;
    cfg.k0 = 4;
    cfg.outlier_percent = 25.0;
    cfg.group_num = 2;
    cfg.kmeans.seed = 203;
    CHECK(quantize_matrix(w, hd, cfg) == quantize_matrix(w, hd, cfg));
}

}  // TEST_SUITE
