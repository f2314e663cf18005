#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <string>
#include <vector>

#include "vptq/errors.hpp"
#include "vptq/hessian.hpp"
#include "vptq/packing.hpp"
#include "vptq/quantizer.hpp"

namespace py = pybind11;
using namespace vptq;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

TensorF32 tensor_from_array(const FloatArray& arr) {
    py::buffer_info info = arr.request();
    if (info.ndim != 1 && info.ndim != 2) {
        throw ShapeError("expected a rank-1 or rank-2 array");
    }
    std::vector<std::size_t> shape(info.shape.begin(), info.shape.end());
    const float* src = static_cast<const float*>(info.ptr);
    std::vector<float> data(src, src + std::size_t(info.size));
    return TensorF32(std::move(shape), std::move(data));
}

py::array_t<float> array_from_tensor(const TensorF32& t) {
    py::array_t<float> out(t.shape);
    std::memcpy(out.mutable_data(), t.data.data(), t.data.size() * sizeof(float));
    return out;
}

py::array_t<double> square_f64(const std::vector<double>& values, std::size_t n) {
    py::array_t<double> out({n, n});
    std::memcpy(out.mutable_data(), values.data(), values.size() * sizeof(double));
    return out;
}

std::string order_name(ColumnOrder order) {
    return order == ColumnOrder::Natural ? "natural" : "descending_hessian_diag";
}

ColumnOrder order_from_name(const std::string& name) {
    if (name == "natural") return ColumnOrder::Natural;
    if (name == "descending_hessian_diag") return ColumnOrder::DescendingHessianDiag;
    throw InvalidArgument("column_order must be 'natural' or 'descending_hessian_diag'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "second-order vector quantization for weight matrices";

    py::register_exception<Error>(m, "Error");

    py::class_<HessianData>(m, "Hessian")
        .def_property_readonly("dim", [](const HessianData& hd) { return hd.dim; })
        .def_property_readonly("damping_fraction",
                               [](const HessianData& hd) { return hd.damping_fraction; })
        .def_property_readonly(
            "matrix", [](const HessianData& hd) { return square_f64(hd.h, hd.dim); })
        .def_property_readonly(
            "inverse", [](const HessianData& hd) { return square_f64(hd.hinv, hd.dim); })
        .def("__repr__", [](const HessianData& hd) {
            return "Hessian(dim=" + std::to_string(hd.dim) + ")";
        });

    m.def(
        "accumulate_hessian",
        [](const std::vector<FloatArray>& batches, double damping) {
            if (batches.empty()) throw InsufficientData("no activation batches");
            TensorF32 first = tensor_from_array(batches.front());
            if (first.rank() != 2) throw ShapeError("batches must be rank 2 (dim x samples)");
            HessianAccumulator acc(first.rows());
            accumulate(acc, first);
            for (std::size_t i = 1; i < batches.size(); i++) {
                accumulate(acc, tensor_from_array(batches[i]));
            }
            return finalize(acc, damping);
        },
        py::arg("batches"), py::arg("damping") = 0.01,
        "Builds a damped curvature proxy from activation batches (dim x samples).");
    m.def("identity_hessian", &identity_hessian, py::arg("dim"));
    m.def(
        "hessian_from_matrix",
        [](const FloatArray& h) { return hessian_from_matrix(tensor_from_array(h)); },
        py::arg("h"), "Wraps an already-damped symmetric positive definite matrix.");

    py::class_<TrainOptions>(m, "TrainOptions")
        .def(py::init([](int max_iters, double rel_tol, uint64_t seed) {
                 TrainOptions o;
                 o.max_iters = max_iters;
                 o.rel_tol = rel_tol;
                 o.seed = seed;
                 return o;
             }),
             py::arg("max_iters") = 100, py::arg("rel_tol") = 1e-6, py::arg("seed") = 0)
        .def_readwrite("max_iters", &TrainOptions::max_iters)
        .def_readwrite("rel_tol", &TrainOptions::rel_tol)
        .def_readwrite("seed", &TrainOptions::seed);

    py::class_<QuantConfig>(m, "QuantConfig")
        .def(py::init([](std::size_t v1, std::size_t k1, std::size_t k2, std::size_t v0,
                         std::size_t k0, double outlier_percent, std::size_t group_num,
                         double damping_fraction, const std::string& column_order,
                         bool propagate_with_hessian_rows, const TrainOptions& kmeans) {
                 QuantConfig cfg;
                 cfg.v1 = v1;
                 cfg.k1 = k1;
                 cfg.k2 = k2;
                 cfg.v0 = v0;
                 cfg.k0 = k0;
                 cfg.outlier_percent = outlier_percent;
                 cfg.group_num = group_num;
                 cfg.damping_fraction = damping_fraction;
                 cfg.column_order = order_from_name(column_order);
                 cfg.propagate_with_hessian_rows = propagate_with_hessian_rows;
                 cfg.kmeans = kmeans;
                 return cfg;
             }),
             py::arg("v1") = 8, py::arg("k1") = 256, py::arg("k2") = 0, py::arg("v0") = 0,
             py::arg("k0") = 0, py::arg("outlier_percent") = 0.0, py::arg("group_num") = 1,
             py::arg("damping_fraction") = 0.01, py::arg("column_order") = "natural",
             py::arg("propagate_with_hessian_rows") = false,
             py::arg("kmeans") = TrainOptions{})
        .def_readwrite("v1", &QuantConfig::v1)
        .def_readwrite("k1", &QuantConfig::k1)
        .def_readwrite("k2", &QuantConfig::k2)
        .def_readwrite("v0", &QuantConfig::v0)
        .def_readwrite("k0", &QuantConfig::k0)
        .def_readwrite("outlier_percent", &QuantConfig::outlier_percent)
        .def_readwrite("group_num", &QuantConfig::group_num)
        .def_readwrite("damping_fraction", &QuantConfig::damping_fraction)
        .def_property(
            "column_order",
            [](const QuantConfig& c) { return order_name(c.column_order); },
            [](QuantConfig& c, const std::string& name) { c.column_order = order_from_name(name); })
        .def_readwrite("propagate_with_hessian_rows", &QuantConfig::propagate_with_hessian_rows)
        .def_readwrite("kmeans", &QuantConfig::kmeans)
        .def("validate", &QuantConfig::validate, py::arg("rows") = 0, py::arg("cols") = 0,
             "Returns one message per problem; empty when usable.");

    py::class_<QuantStats>(m, "QuantStats")
        .def_readonly("proxy_loss", &QuantStats::proxy_loss)
        .def_readonly("sum_delta_L", &QuantStats::sum_delta_L)
        .def_readonly("frobenius_mse", &QuantStats::frobenius_mse)
        .def_readonly("max_abs_err", &QuantStats::max_abs_err)
        .def("__repr__", [](const QuantStats& s) {
            return "QuantStats(frobenius_mse=" + std::to_string(s.frobenius_mse) +
                   ", proxy_loss=" + std::to_string(s.proxy_loss) + ")";
        });

    py::class_<CompressionReport>(m, "CompressionReport")
        .def_readonly("total_original_bits", &CompressionReport::total_original_bits)
        .def_readonly("codebook_bits", &CompressionReport::codebook_bits)
        .def_readonly("index_bits", &CompressionReport::index_bits)
        .def_readonly("compression_ratio", &CompressionReport::compression_ratio)
        .def_readonly("equivalent_bitwidth", &CompressionReport::equivalent_bitwidth)
        .def_readonly("average_index_bitwidth", &CompressionReport::average_index_bitwidth)
        .def("__repr__", [](const CompressionReport& r) {
            return "CompressionReport(compression_ratio=" + std::to_string(r.compression_ratio) +
                   ")";
        });

    py::class_<QuantizedMatrix>(m, "QuantizedMatrix")
        .def_property_readonly("rows", [](const QuantizedMatrix& q) { return q.rows; })
        .def_property_readonly("cols", [](const QuantizedMatrix& q) { return q.cols; })
        .def_property_readonly("outlier_cols",
                               [](const QuantizedMatrix& q) { return q.outlier_cols; })
        .def_readonly("stats", &QuantizedMatrix::stats)
        .def_readonly("config", &QuantizedMatrix::config)
        .def("dequantize",
             [](const QuantizedMatrix& q) { return array_from_tensor(dequantize(q)); })
        .def("compression_report",
             [](const QuantizedMatrix& q, bool codebook_fp16_bits) {
                 return compression_report(q, codebook_fp16_bits);
             },
             py::arg("codebook_fp16_bits") = true)
        .def("save",
             [](const QuantizedMatrix& q, const std::filesystem::path& path) {
                 serialize(q, path);
             },
             py::arg("path"))
        .def("__eq__", [](const QuantizedMatrix& a, const QuantizedMatrix& b) { return a == b; })
        .def("__repr__", [](const QuantizedMatrix& q) {
            return "QuantizedMatrix(rows=" + std::to_string(q.rows) +
                   ", cols=" + std::to_string(q.cols) + ")";
        });

    m.def(
        "quantize_matrix",
        [](const FloatArray& w, const HessianData& hd, const QuantConfig& cfg) {
            TensorF32 wt = tensor_from_array(w);
            py::gil_scoped_release release;
            return quantize_matrix(wt, hd, cfg);
        },
        py::arg("w"), py::arg("hessian"), py::arg("config"));
    m.def("load", &deserialize, py::arg("path"), "Reads a .vptq container.");

    m.def(
        "compression_report",
        [](std::size_t rows, std::size_t cols, const QuantConfig& cfg,
           std::size_t outlier_count, bool codebook_fp16_bits) {
            return compression_report(rows, cols, cfg, outlier_count, codebook_fp16_bits);
        },
        py::arg("rows"), py::arg("cols"), py::arg("config"), py::arg("outlier_count") = 0,
        py::arg("codebook_fp16_bits") = true,
        "Size accounting for one matrix shape under a config.");
    m.def(
        "aggregate_reports",
        [](const std::vector<CompressionReport>& reports) {
            return aggregate_reports(reports);
        },
        py::arg("reports"));

    m.def(
        "proxy_loss",
        [](const FloatArray& w, const FloatArray& w_hat, const HessianData& hd) {
            return proxy_loss(tensor_from_array(w), tensor_from_array(w_hat), hd);
        },
        py::arg("w"), py::arg("w_hat"), py::arg("hessian"));
    m.def(
        "proxy_loss_decomposed",
        [](const FloatArray& w, const FloatArray& w_hat, const HessianData& hd) {
            return proxy_loss_decomposed(tensor_from_array(w), tensor_from_array(w_hat), hd);
        },
        py::arg("w"), py::arg("w_hat"), py::arg("hessian"));

    m.def(
        "pack",
        [](const std::vector<uint32_t>& indices, unsigned bitwidth) {
            PackedIndices packed = pack(indices, bitwidth);
            return py::bytes(reinterpret_cast<const char*>(packed.bytes.data()),
                             packed.bytes.size());
        },
        py::arg("indices"), py::arg("bitwidth"),
        "Packs indices into a little-endian LSB-first bitstream.");
    m.def(
        "unpack",
        [](const py::bytes& data, unsigned bitwidth, std::size_t count) {
            PackedIndices packed;
            packed.bitwidth = bitwidth;
            packed.count = count;
            std::string_view view = data;
            packed.bytes.assign(view.begin(), view.end());
            return unpack(packed);
        },
        py::arg("data"), py::arg("bitwidth"), py::arg("count"));
}
