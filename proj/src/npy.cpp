#include "vptq/npy.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>

#include "vptq/errors.hpp"

namespace vptq {

static const char kMagic[6] = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

// ---- header dict parsing ------------------------------------------------
// Headers are python dict literals written by numpy or compatible tools,
// e.g. {'descr': '<f4', 'fortran_order': False, 'shape': (3, 4), }
// Keys are located by name so key order does not matter.

static std::string find_quoted_value(const std::string& header, const std::string& key) {
    std::size_t k = header.find("'" + key + "'");
    if (k == std::string::npos) {
        throw FormatError("npy header missing key '" + key + "'");
    }
    std::size_t colon = header.find(':', k);
    std::size_t open = header.find('\'', colon);
    if (colon == std::string::npos || open == std::string::npos) {
        throw FormatError("npy header malformed near '" + key + "'");
    }
    std::size_t close = header.find('\'', open + 1);
    if (close == std::string::npos) {
        throw FormatError("npy header malformed near '" + key + "'");
    }
    return header.substr(open + 1, close - open - 1);
}

static bool find_bool_value(const std::string& header, const std::string& key) {
    std::size_t k = header.find("'" + key + "'");
    if (k == std::string::npos) {
        throw FormatError("npy header missing key '" + key + "'");
    }
    std::size_t colon = header.find(':', k);
    if (colon == std::string::npos) {
        throw FormatError("npy header malformed near '" + key + "'");
    }
    std::size_t p = header.find_first_not_of(" \t", colon + 1);
    if (p != std::string::npos) {
        if (header.compare(p, 4, "True") == 0) return true;
        if (header.compare(p, 5, "False") == 0) return false;
    }
    throw FormatError("npy header key '" + key + "' is not a boolean");
}

static std::vector<std::size_t> find_shape_value(const std::string& header) {
    std::size_t k = header.find("'shape'");
    if (k == std::string::npos) {
        throw FormatError("npy header missing key 'shape'");
    }
    std::size_t open = header.find('(', k);
    std::size_t close = header.find(')', open == std::string::npos ? k : open);
    if (open == std::string::npos || close == std::string::npos) {
        throw FormatError("npy header shape tuple malformed");
    }
    std::vector<std::size_t> shape;
    std::size_t p = open + 1;
    while (p < close) {
        while (p < close && (header[p] == ' ' || header[p] == ',')) p++;
        if (p >= close) break;
        std::size_t value = 0;
        auto [next, ec] = std::from_chars(header.data() + p, header.data() + close, value);
        if (ec != std::errc()) {
            throw FormatError("npy header shape tuple malformed");
        }
        shape.push_back(value);
        p = next - header.data();
    }
    return shape;
}

// ---- load ----------------------------------------------------------------

TensorF32 load_npy(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }

    char magic[6];
    uint8_t version[2];
    if (!in.read(magic, 6) || !in.read(reinterpret_cast<char*>(version), 2)) {
        throw FormatError("npy file too short for magic");
    }
    if (std::memcmp(magic, kMagic, 6) != 0) {
        throw FormatError("not an npy file: " + path.string());
    }

    uint32_t header_len = 0;
    if (version[0] == 1) {
        uint8_t b[2];
        if (!in.read(reinterpret_cast<char*>(b), 2)) throw FormatError("npy header truncated");
        header_len = uint32_t(b[0]) | uint32_t(b[1]) << 8;
    } else if (version[0] == 2) {
        uint8_t b[4];
        if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("npy header truncated");
        header_len = uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
    } else {
        throw FormatError("unsupported npy version " + std::to_string(version[0]) + "." +
                          std::to_string(version[1]));
    }

    std::string header(header_len, '\0');
    if (!in.read(header.data(), header_len)) {
        throw FormatError("npy header truncated");
    }

    std::string descr = find_quoted_value(header, "descr");
    if (find_bool_value(header, "fortran_order")) {
        throw UnsupportedLayout("fortran_order=True not supported: " + path.string());
    }
    bool f64;
    if (descr == "<f4") {
        f64 = false;
    } else if (descr == "<f8") {
        f64 = true;
    } else {
        throw FormatError("unsupported npy dtype '" + descr + "' (want '<f4' or '<f8')");
    }

    std::vector<std::size_t> shape = find_shape_value(header);
    if (shape.empty() || shape.size() > 2) {
        throw FormatError("npy rank " + std::to_string(shape.size()) + " not supported (want 1 or 2)");
    }

    std::size_t count = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("npy shape has a zero dimension");
        count *= d;
    }

    std::size_t item = f64 ? 8 : 4;
    std::vector<uint8_t> payload(count * item);
    if (!in.read(reinterpret_cast<char*>(payload.data()), payload.size())) {
        throw FormatError("npy payload truncated: " + path.string());
    }
    if (in.get() != std::ifstream::traits_type::eof()) {
        throw FormatError("npy payload larger than shape: " + path.string());
    }

    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; i++) {
        float v;
        if (f64) {
            uint64_t u = 0;
            for (int b = 0; b < 8; b++) u |= uint64_t(payload[i * 8 + b]) << (8 * b);
            v = static_cast<float>(std::bit_cast<double>(u));
        } else {
            uint32_t u = 0;
            for (int b = 0; b < 4; b++) u |= uint32_t(payload[i * 4 + b]) << (8 * b);
            v = std::bit_cast<float>(u);
        }
        if (!std::isfinite(v)) {
            throw NonFiniteData(i, "non-finite value at index " + std::to_string(i) +
                                       " in " + path.string());
        }
        data[i] = v;
    }
    return TensorF32(std::move(shape), std::move(data));
}

// ---- save ----------------------------------------------------------------

static std::string shape_tuple(const std::vector<std::size_t>& shape) {
    if (shape.size() == 1) {
        return "(" + std::to_string(shape[0]) + ",)";
    }
    return "(" + std::to_string(shape[0]) + ", " + std::to_string(shape[1]) + ")";
}

void save_npy(const TensorF32& tensor, const std::filesystem::path& path) {
    std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': " +
                       shape_tuple(tensor.shape) + ", }";
    // magic(6) + version(2) + header_len(2) + dict + padding + '\n', total
    // a multiple of 64.
    std::size_t unpadded = 10 + dict.size() + 1;
    std::size_t pad = (64 - unpadded % 64) % 64;
    std::string header = dict + std::string(pad, ' ') + "\n";
    if (header.size() > 0xffff) {
        throw FormatError("npy header too large");
    }

    std::filesystem::path tmp = path;
    tmp += ".tmp." + std::to_string(std::random_device{}());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot create " + tmp.string());
        }
        out.write(kMagic, 6);
        out.put('\x01');
        out.put('\x00');
        out.put(char(header.size() & 0xff));
        out.put(char(header.size() >> 8));
        out.write(header.data(), header.size());
        std::vector<uint8_t> payload(tensor.data.size() * 4);
        for (std::size_t i = 0; i < tensor.data.size(); i++) {
            uint32_t u = std::bit_cast<uint32_t>(tensor.data[i]);
            for (int b = 0; b < 4; b++) payload[i * 4 + b] = uint8_t(u >> (8 * b));
        }
        out.write(reinterpret_cast<const char*>(payload.data()), payload.size());
        if (!out) {
            throw IoError("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw IoError("rename failed: " + path.string() + ": " + ec.message());
    }
}

}  // namespace vptq
