#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vptq/errors.hpp"
#include "vptq/hessian.hpp"
#include "vptq/npy.hpp"
#include "vptq/packing.hpp"
#include "vptq/quantizer.hpp"

using nlohmann::json;

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void kv(const std::string& key, const std::string& value) {
    std::printf("%s=%s\n", key.c_str(), value.c_str());
}

void kv(const std::string& key, double value) { kv(key, fmt(value)); }

void kv(const std::string& key, uint64_t value) { kv(key, std::to_string(value)); }

void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::path tmp = path;
    tmp += ".tmp." + std::to_string(std::random_device{}());
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw vptq::IoError("cannot create " + tmp.string());
        f << text;
        if (!f) throw vptq::IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw vptq::IoError("rename failed: " + path.string() + ": " + ec.message());
    }
}

std::string single_line(std::string s) {
    for (auto& c : s) {
        if (c == '\n') c = ';';
    }
    return s;
}

// ---- config files ------------------------------------------------------------

struct LoadedConfig {
    vptq::QuantConfig cfg;
    bool has_seed = false;
};

// JSON schema mirrors QuantConfig; every key is optional, unknown keys are
// rejected, and every problem is reported in one pass. k2 may be -1 as an
// alternative spelling of "residual stage off".
LoadedConfig parse_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw vptq::IoError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw vptq::InvalidArgument("config " + path.string() + " is not valid JSON: " +
                                    e.what());
    }
    if (!j.is_object()) {
        throw vptq::InvalidArgument("config " + path.string() + " must be a JSON object");
    }

    static const std::set<std::string> known = {
        "v1", "k1", "k2", "v0", "k0", "outlier_percent", "group_num",
        "damping_fraction", "column_order", "propagate_with_hessian_rows", "kmeans"};
    static const std::set<std::string> known_kmeans = {"max_iters", "rel_tol", "seed",
                                                       "forced_seeds"};

    std::vector<std::string> problems;
    auto get = [&](const json& obj, const char* key, auto& out) {
        if (!obj.contains(key)) return false;
        try {
            obj.at(key).get_to(out);
            return true;
        } catch (const json::exception& e) {
            problems.push_back(std::string(key) + ": " + e.what());
            return false;
        }
    };

    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key)) problems.push_back("unknown config key '" + key + "'");
    }

    LoadedConfig loaded;
    vptq::QuantConfig& cfg = loaded.cfg;
    get(j, "v1", cfg.v1);
    get(j, "k1", cfg.k1);
    if (j.contains("k2")) {
        if (j.at("k2").is_number_integer() && j.at("k2").get<int64_t>() < 0) {
            cfg.k2 = 0;
        } else {
            get(j, "k2", cfg.k2);
        }
    }
    get(j, "v0", cfg.v0);
    get(j, "k0", cfg.k0);
    get(j, "outlier_percent", cfg.outlier_percent);
    get(j, "group_num", cfg.group_num);
    get(j, "damping_fraction", cfg.damping_fraction);
    if (j.contains("column_order")) {
        std::string name;
        if (get(j, "column_order", name)) {
            if (name == "natural") {
                cfg.column_order = vptq::ColumnOrder::Natural;
            } else if (name == "descending_hessian_diag") {
                cfg.column_order = vptq::ColumnOrder::DescendingHessianDiag;
            } else {
                problems.push_back("column_order must be 'natural' or 'descending_hessian_diag'");
            }
        }
    }
    get(j, "propagate_with_hessian_rows", cfg.propagate_with_hessian_rows);
    if (j.contains("kmeans")) {
        const json& km = j.at("kmeans");
        if (!km.is_object()) {
            problems.push_back("kmeans must be an object");
        } else {
            for (const auto& [key, value] : km.items()) {
                (void)value;
                if (!known_kmeans.count(key)) {
                    problems.push_back("unknown config key 'kmeans." + key + "'");
                }
            }
            get(km, "max_iters", cfg.kmeans.max_iters);
            get(km, "rel_tol", cfg.kmeans.rel_tol);
            loaded.has_seed = get(km, "seed", cfg.kmeans.seed);
            if (km.contains("forced_seeds")) {
                std::vector<std::vector<float>> seeds;
                if (get(km, "forced_seeds", seeds)) cfg.kmeans.forced_seeds = std::move(seeds);
            }
        }
    }

    for (const auto& p : cfg.validate()) problems.push_back(p);
    if (!problems.empty()) {
        std::string joined = "config " + path.string() + " is invalid:";
        for (const auto& p : problems) joined += "\n  " + p;
        throw vptq::InvalidArgument(joined);
    }
    return loaded;
}

// Seed precedence: --seed flag, then the config file, then VPTQ_SEED, then 0.
void apply_seed(LoadedConfig& loaded, const std::optional<uint64_t>& flag) {
    if (flag) {
        loaded.cfg.kmeans.seed = *flag;
        return;
    }
    if (loaded.has_seed) return;
    if (const char* env = std::getenv("VPTQ_SEED")) {
        char* end = nullptr;
        errno = 0;
        unsigned long long v = std::strtoull(env, &end, 10);
        if (errno != 0 || end == env || *end != '\0') {
            throw vptq::InvalidArgument("VPTQ_SEED must be an unsigned integer, got '" +
                                        std::string(env) + "'");
        }
        loaded.cfg.kmeans.seed = v;
    }
}

void print_report(const vptq::CompressionReport& r, const std::string& prefix = "") {
    kv(prefix + "total_original_bits", r.total_original_bits);
    kv(prefix + "codebook_bits", r.codebook_bits);
    kv(prefix + "index_bits", r.index_bits);
    kv(prefix + "compression_ratio", r.compression_ratio);
    kv(prefix + "equivalent_bitwidth", r.equivalent_bitwidth);
    kv(prefix + "average_index_bitwidth", r.average_index_bitwidth);
}

// ---- subcommands -------------------------------------------------------------

int cmd_hessian(const std::vector<std::string>& activations, const std::string& out,
                double damping) {
    vptq::TensorF32 first = vptq::load_npy(activations.front());
    if (first.rank() != 2) {
        throw vptq::ShapeError("activations must be rank 2 (dim x samples): " +
                               activations.front());
    }
    vptq::HessianAccumulator acc(first.rows());
    vptq::accumulate(acc, first);
    for (std::size_t i = 1; i < activations.size(); i++) {
        vptq::accumulate(acc, vptq::load_npy(activations[i]));
    }
    vptq::HessianData hd = vptq::finalize(acc, damping);

    std::size_t n = hd.dim;
    vptq::TensorF32 h_mat = vptq::TensorF32::zeros({n, n});
    for (std::size_t i = 0; i < n * n; i++) h_mat.data[i] = float(hd.h[i]);
    vptq::save_npy(h_mat, out);

    atomic_write_text(out + ".meta", "dim=" + std::to_string(n) +
                                         "\nsample_count=" + std::to_string(acc.sample_count) +
                                         "\ndamping_fraction=" + fmt(damping) + "\n");

    double min_diag = hd.h[0], max_diag = hd.h[0];
    for (std::size_t i = 1; i < n; i++) {
        min_diag = std::min(min_diag, hd.h[i * n + i]);
        max_diag = std::max(max_diag, hd.h[i * n + i]);
    }
    kv("dim", uint64_t(n));
    kv("sample_count", uint64_t(acc.sample_count));
    kv("damping_fraction", damping);
    kv("min_diag", min_diag);
    kv("max_diag", max_diag);
    return 0;
}

void print_quant_result(const vptq::QuantizedMatrix& qm, const std::filesystem::path& out) {
    kv("rows", uint64_t(qm.rows));
    kv("cols", uint64_t(qm.cols));
    kv("outlier_count", uint64_t(qm.outlier_cols.size()));
    kv("group_num", uint64_t(qm.group_layout.size()));
    kv("proxy_loss", qm.stats.proxy_loss);
    kv("sum_delta_L", qm.stats.sum_delta_L);
    kv("frobenius_mse", qm.stats.frobenius_mse);
    kv("max_abs_err", qm.stats.max_abs_err);
    print_report(vptq::compression_report(qm));
    kv("container_bytes", uint64_t(std::filesystem::file_size(out)));
}

int cmd_quantize_single(const std::string& weight, const std::string& hessian,
                        const LoadedConfig& loaded, const std::string& out, bool verbose) {
    vptq::TensorF32 w = vptq::load_npy(weight);
    if (w.rank() != 2) throw vptq::ShapeError("weight tensor must be rank 2: " + weight);
    vptq::HessianData hd = vptq::hessian_from_matrix(vptq::load_npy(hessian));
    if (verbose) {
        kv("seed", uint64_t(loaded.cfg.kmeans.seed));
        kv("hessian_dim", uint64_t(hd.dim));
    }
    vptq::QuantizedMatrix qm = vptq::quantize_matrix(w, hd, loaded.cfg);
    vptq::serialize(qm, out);
    print_quant_result(qm, out);
    return 0;
}

int cmd_quantize_manifest(const std::string& manifest_path, const LoadedConfig& loaded,
                          const std::string& out_dir, unsigned workers) {
    std::ifstream in(manifest_path);
    if (!in) throw vptq::IoError("cannot open manifest " + manifest_path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw vptq::InvalidArgument(std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!j.is_array() || j.empty()) {
        throw vptq::InvalidArgument("manifest must be a non-empty JSON array");
    }

    std::vector<vptq::ModelEntry> entries;
    for (const auto& item : j) {
        vptq::ModelEntry e;
        try {
            e.name = item.at("name").get<std::string>();
            e.weight_path = item.at("weight").get<std::string>();
            e.hessian_path = item.at("hessian").get<std::string>();
        } catch (const json::exception& ex) {
            throw vptq::InvalidArgument(std::string("manifest entry missing fields: ") +
                                        ex.what());
        }
        if (e.name.empty() || e.name.find('/') != std::string::npos) {
            throw vptq::InvalidArgument("manifest entry name must be a plain file stem: '" +
                                        e.name + "'");
        }
        entries.push_back(std::move(e));
    }

    std::filesystem::create_directories(out_dir);
    auto results = vptq::quantize_model(entries, loaded.cfg, workers);

    bool any_failed = false;
    for (const auto& res : results) {
        kv("name", res.name);
        if (!res.quantized) {
            any_failed = true;
            kv("status", std::string("error"));
            kv("error", single_line(res.error));
            continue;
        }
        std::filesystem::path out = std::filesystem::path(out_dir) / (res.name + ".vptq");
        vptq::serialize(*res.quantized, out);
        kv("status", std::string("ok"));
        kv("out", out.string());
        kv("proxy_loss", res.quantized->stats.proxy_loss);
        kv("frobenius_mse", res.quantized->stats.frobenius_mse);
    }
    return any_failed ? 2 : 0;
}

int cmd_dequantize(const std::string& in, const std::string& out) {
    vptq::QuantizedMatrix qm = vptq::deserialize(in);
    vptq::TensorF32 w_hat = vptq::dequantize(qm);
    vptq::save_npy(w_hat, out);
    kv("rows", uint64_t(qm.rows));
    kv("cols", uint64_t(qm.cols));
    return 0;
}

int cmd_eval(const std::string& weight, const std::string& quantized,
             const std::string& hessian) {
    vptq::TensorF32 w = vptq::load_npy(weight);
    vptq::QuantizedMatrix qm = vptq::deserialize(quantized);
    vptq::TensorF32 w_hat = vptq::dequantize(qm);
    if (w.shape != w_hat.shape) {
        throw vptq::ShapeError("weight shape does not match the quantized matrix");
    }

    double se = 0.0, ref = 0.0, max_err = 0.0;
    for (std::size_t i = 0; i < w.data.size(); i++) {
        double d = double(w_hat.data[i]) - double(w.data[i]);
        se += d * d;
        ref += double(w.data[i]) * double(w.data[i]);
        max_err = std::max(max_err, std::fabs(d));
    }
    kv("frobenius_mse", se / double(w.data.size()));
    kv("max_abs_err", max_err);
    kv("relative_frobenius", se == 0.0 ? 0.0 : std::sqrt(se) / std::sqrt(ref));
    kv("stored_frobenius_mse", qm.stats.frobenius_mse);
    kv("stored_max_abs_err", qm.stats.max_abs_err);
    kv("stored_proxy_loss", qm.stats.proxy_loss);
    kv("stored_sum_delta_L", qm.stats.sum_delta_L);

    if (!hessian.empty()) {
        vptq::HessianData hd = vptq::hessian_from_matrix(vptq::load_npy(hessian));
        double tr = vptq::proxy_loss(w, w_hat, hd);
        double dec = vptq::proxy_loss_decomposed(w, w_hat, hd);
        kv("proxy_loss", tr);
        kv("proxy_loss_decomposed", dec);
        if (std::fabs(tr - dec) > 1e-9 * std::max(1.0, std::fabs(tr))) {
            throw vptq::NumericError("proxy loss summation routes disagree: " + fmt(tr) +
                                     " vs " + fmt(dec));
        }
    }
    return 0;
}

int cmd_report(const std::string& config_path, const std::string& shapes_path, bool legacy) {
    LoadedConfig loaded = parse_config_file(config_path);

    std::ifstream in(shapes_path);
    if (!in) throw vptq::IoError("cannot open shapes " + shapes_path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw vptq::InvalidArgument(std::string("shapes file is not valid JSON: ") + e.what());
    }
    if (!j.is_array() || j.empty()) {
        throw vptq::InvalidArgument("shapes must be a non-empty JSON array");
    }

    struct Shape {
        std::string name;
        uint64_t rows, cols;
    };
    std::vector<Shape> shapes;
    std::vector<std::string> problems;
    for (std::size_t i = 0; i < j.size(); i++) {
        Shape s;
        try {
            s.name = j[i].at("name").get<std::string>();
            s.rows = j[i].at("rows").get<uint64_t>();
            s.cols = j[i].at("cols").get<uint64_t>();
        } catch (const json::exception& e) {
            problems.push_back("entry " + std::to_string(i) + ": " + e.what());
            continue;
        }
        if (s.rows == 0 || s.cols == 0) {
            problems.push_back("entry " + std::to_string(i) + ": rows and cols must be >= 1");
        }
        shapes.push_back(std::move(s));
    }
    if (!problems.empty()) {
        std::string joined = "invalid shapes:";
        for (const auto& p : problems) joined += "\n  " + p;
        throw vptq::InvalidArgument(joined);
    }

    std::vector<vptq::CompressionReport> reports;
    for (const auto& s : shapes) {
        std::size_t outliers =
            std::size_t(std::floor(loaded.cfg.outlier_percent * double(s.cols) / 100.0));
        auto r = vptq::compression_report(s.rows, s.cols, loaded.cfg, outliers, !legacy);
        kv("matrix", s.name);
        kv("rows", s.rows);
        kv("cols", s.cols);
        kv("outlier_count", uint64_t(outliers));
        print_report(r);
        reports.push_back(r);
    }
    auto total = vptq::aggregate_reports(reports);
    print_report(total, "aggregate_");
    kv("aggregate_codebook_bits_per_param",
       double(total.codebook_bits) / (double(total.total_original_bits) / 16.0));
    return 0;
}

int run_mapped(const std::function<int()>& body) {
    try {
        return body();
    } catch (const vptq::NotPositiveDefinite& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const vptq::InvalidHessian& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const vptq::NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const vptq::CorruptContainer& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const vptq::CorruptStream& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const vptq::CorruptIndices& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const vptq::FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"second-order vector quantization for weight matrices"};
    app.require_subcommand(1);

    auto* hess = app.add_subcommand("hessian", "accumulate activations into a damped hessian");
    std::vector<std::string> activations;
    std::string hess_out;
    double damping = 0.01;
    hess->add_option("--activations", activations, "activation npy files (dim x samples)")
        ->required()
        ->expected(-1);
    hess->add_option("--out", hess_out, "output hessian npy")->required();
    hess->add_option("--damping", damping, "diagonal damping fraction");

    auto* quant = app.add_subcommand("quantize", "quantize one matrix or a manifest");
    std::string weight, hessian, config_path, quant_out;
    std::string manifest, out_dir;
    unsigned workers = 0;
    bool verbose = false;
    std::optional<uint64_t> seed_flag;
    uint64_t seed_value = 0;
    quant->add_option("--weight", weight, "weight npy (rows x cols)");
    quant->add_option("--hessian", hessian, "damped hessian npy (cols x cols)");
    quant->add_option("--config", config_path, "config json")->required();
    quant->add_option("--out", quant_out, "output .vptq container");
    quant->add_option("--manifest", manifest, "manifest json [{name, weight, hessian}]");
    quant->add_option("--out-dir", out_dir, "output directory for manifest mode");
    quant->add_option("--workers", workers, "parallel manifest entries (0 = all cores)");
    auto* seed_opt = quant->add_option("--seed", seed_value, "k-means seed override");
    quant->add_flag("--verbose", verbose, "echo run parameters");

    auto* deq = app.add_subcommand("dequantize", "reconstruct a matrix from a container");
    std::string deq_in, deq_out;
    deq->add_option("--in", deq_in, "input .vptq container")->required();
    deq->add_option("--out", deq_out, "output npy")->required();

    auto* ev = app.add_subcommand("eval", "compare a container against a weight matrix");
    std::string eval_weight, eval_quantized, eval_hessian;
    ev->add_option("--weight", eval_weight, "original weight npy")->required();
    ev->add_option("--quantized", eval_quantized, ".vptq container")->required();
    ev->add_option("--hessian", eval_hessian, "hessian npy for the proxy loss");

    auto* rep = app.add_subcommand("report", "size accounting for declared shapes");
    std::string rep_config, rep_shapes;
    bool legacy = false;
    rep->add_option("--config", rep_config, "config json")->required();
    rep->add_option("--shapes", rep_shapes, "shapes json [{name, rows, cols}]")->required();
    rep->add_flag("--legacy-codebook-accounting", legacy,
                  "count codebook entries instead of their 16-bit size");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    if (seed_opt->count() > 0) seed_flag = seed_value;

    if (hess->parsed()) {
        return run_mapped([&] { return cmd_hessian(activations, hess_out, damping); });
    }
    if (quant->parsed()) {
        return run_mapped([&] {
            LoadedConfig loaded = parse_config_file(config_path);
            apply_seed(loaded, seed_flag);
            bool single = !weight.empty() || !hessian.empty() || !quant_out.empty();
            bool batch = !manifest.empty() || !out_dir.empty();
            if (single == batch) {
                throw vptq::InvalidArgument(
                    "pass either --weight/--hessian/--out or --manifest/--out-dir");
            }
            if (single) {
                if (weight.empty() || hessian.empty() || quant_out.empty()) {
                    throw vptq::InvalidArgument(
                        "single-matrix mode needs --weight, --hessian and --out");
                }
                return cmd_quantize_single(weight, hessian, loaded, quant_out, verbose);
            }
            if (manifest.empty() || out_dir.empty()) {
                throw vptq::InvalidArgument("manifest mode needs --manifest and --out-dir");
            }
            return cmd_quantize_manifest(manifest, loaded, out_dir, workers);
        });
    }
    if (deq->parsed()) {
        return run_mapped([&] { return cmd_dequantize(deq_in, deq_out); });
    }
    if (ev->parsed()) {
        return run_mapped([&] { return cmd_eval(eval_weight, eval_quantized, eval_hessian); });
    }
    return run_mapped([&] { return cmd_report(rep_config, rep_shapes, legacy); });
}
