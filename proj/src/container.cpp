#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <string>

#include <json.hpp>

#include "vptq/errors.hpp"
#include "vptq/packing.hpp"

namespace vptq {

using nlohmann::json;

static constexpr char kMagic[5] = {'V', 'P', 'T', 'Q', '1'};
static constexpr uint16_t kSectionMeta = 1;
static constexpr uint16_t kSectionCodebook = 2;
static constexpr uint16_t kSectionIndices = 3;

// ---- little-endian scratch buffer -----------------------------------------

namespace {

struct Writer {
    std::vector<uint8_t> bytes;

    void u8(uint8_t v) { bytes.push_back(v); }
    void u16(uint16_t v) {
        for (int b = 0; b < 2; b++) bytes.push_back(uint8_t(v >> (8 * b)));
    }
    void u32(uint32_t v) {
        for (int b = 0; b < 4; b++) bytes.push_back(uint8_t(v >> (8 * b)));
    }
    void u64(uint64_t v) {
        for (int b = 0; b < 8; b++) bytes.push_back(uint8_t(v >> (8 * b)));
    }
    void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
    void raw(const uint8_t* p, std::size_t n) { bytes.insert(bytes.end(), p, p + n); }
};

struct Reader {
    const uint8_t* p;
    std::size_t len;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > len) throw CorruptContainer("container truncated");
    }
    uint8_t u8() {
        need(1);
        return p[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = uint16_t(p[pos]) | uint16_t(p[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int b = 0; b < 4; b++) v |= uint32_t(p[pos + b]) << (8 * b);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int b = 0; b < 8; b++) v |= uint64_t(p[pos + b]) << (8 * b);
        pos += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    void skip(std::size_t n) {
        need(n);
        pos += n;
    }
};

void append_section(Writer& out, uint16_t type, const std::vector<uint8_t>& payload) {
    out.u16(type);
    out.u64(payload.size());
    out.u32(uint32_t(crc32(0L, payload.data(), uInt(payload.size()))));
    out.raw(payload.data(), payload.size());
}

std::string order_name(ColumnOrder o) {
    return o == ColumnOrder::DescendingHessianDiag ? "descending_hessian_diag" : "natural";
}

ColumnOrder order_from_name(const std::string& s) {
    if (s == "natural") return ColumnOrder::Natural;
    if (s == "descending_hessian_diag") return ColumnOrder::DescendingHessianDiag;
    throw CorruptContainer("unknown column_order '" + s + "'");
}

json config_to_json(const QuantConfig& cfg) {
    json km;
    km["max_iters"] = cfg.kmeans.max_iters;
    km["rel_tol"] = cfg.kmeans.rel_tol;
    km["seed"] = cfg.kmeans.seed;
    json seeds = json::array();
    for (const auto& s : cfg.kmeans.forced_seeds) {
        json v = json::array();
        for (float x : s) v.push_back(double(x));
        seeds.push_back(std::move(v));
    }
    km["forced_seeds"] = std::move(seeds);

    json j;
    j["v1"] = cfg.v1;
    j["k1"] = cfg.k1;
    j["k2"] = cfg.k2;
    j["v0"] = cfg.v0;
    j["k0"] = cfg.k0;
    j["outlier_percent"] = cfg.outlier_percent;
    j["group_num"] = cfg.group_num;
    j["damping_fraction"] = cfg.damping_fraction;
    j["column_order"] = order_name(cfg.column_order);
    j["propagate_with_hessian_rows"] = cfg.propagate_with_hessian_rows;
    j["kmeans"] = std::move(km);
    return j;
}

QuantConfig config_from_json(const json& j) {
    QuantConfig cfg;
    cfg.v1 = j.at("v1").get<std::size_t>();
    cfg.k1 = j.at("k1").get<std::size_t>();
    // -1 is an accepted spelling of "no residual stage"
    cfg.k2 = j.at("k2").is_number_integer() && j.at("k2").get<int64_t>() < 0
                 ? 0
                 : j.at("k2").get<std::size_t>();
    cfg.v0 = j.at("v0").get<std::size_t>();
    cfg.k0 = j.at("k0").get<std::size_t>();
    cfg.outlier_percent = j.at("outlier_percent").get<double>();
    cfg.group_num = j.at("group_num").get<std::size_t>();
    cfg.damping_fraction = j.at("damping_fraction").get<double>();
    cfg.column_order = order_from_name(j.at("column_order").get<std::string>());
    cfg.propagate_with_hessian_rows = j.at("propagate_with_hessian_rows").get<bool>();
    const json& km = j.at("kmeans");
    cfg.kmeans.max_iters = km.at("max_iters").get<int>();
    cfg.kmeans.rel_tol = km.at("rel_tol").get<double>();
    cfg.kmeans.seed = km.at("seed").get<uint64_t>();
    cfg.kmeans.forced_seeds.clear();
    for (const auto& s : km.at("forced_seeds")) {
        std::vector<float> v;
        for (const auto& x : s) v.push_back(float(x.get<double>()));
        cfg.kmeans.forced_seeds.push_back(std::move(v));
    }
    return cfg;
}

// Non-outlier positions covered by each band, in ascending column order.
// Bands tile the column range, so each band owns one contiguous slice.
std::vector<std::pair<std::size_t, std::size_t>> band_position_ranges(
    const QuantizedMatrix& qm, const std::vector<std::size_t>& non_out) {
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    std::size_t p = 0;
    for (const auto& band : qm.group_layout) {
        std::size_t begin = p;
        while (p < non_out.size() && non_out[p] < band.col_end) p++;
        ranges.emplace_back(begin, p);
    }
    if (p != non_out.size()) {
        throw CorruptContainer("group layout does not cover all non-outlier columns");
    }
    return ranges;
}

std::vector<std::size_t> complement_sorted(const std::vector<std::size_t>& outliers,
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

unsigned exact_log2(std::size_t k) {
    unsigned b = 0;
    while ((std::size_t(1) << b) < k) b++;
    return b;
}

}  // namespace

// ---- serialize --------------------------------------------------------------

void serialize(const QuantizedMatrix& qm, const std::filesystem::path& path) {
    json meta;
    meta["rows"] = qm.rows;
    meta["cols"] = qm.cols;
    meta["padded_rows_main"] = qm.padded_rows_main;
    meta["padded_rows_outlier"] = qm.padded_rows_outlier;
    meta["outlier_cols"] = qm.outlier_cols;
    json layout = json::array();
    for (const auto& band : qm.group_layout) {
        layout.push_back({{"col_start", band.col_start},
                          {"col_end", band.col_end},
                          {"codebook_ref", band.codebook_ref}});
    }
    meta["group_layout"] = std::move(layout);
    meta["config"] = config_to_json(qm.config);
    meta["stats"] = {{"proxy_loss", qm.stats.proxy_loss},
                     {"sum_delta_L", qm.stats.sum_delta_L},
                     {"frobenius_mse", qm.stats.frobenius_mse},
                     {"max_abs_err", qm.stats.max_abs_err}};

    std::vector<std::size_t> non_out = complement_sorted(qm.outlier_cols, qm.cols);
    auto ranges = band_position_ranges(qm, non_out);
    std::size_t vecs_main = qm.config.v1 ? qm.padded_rows_main / qm.config.v1 : 0;
    std::size_t vecs_out = qm.config.v0 ? qm.padded_rows_outlier / qm.config.v0 : 0;

    Writer out;
    out.raw(reinterpret_cast<const uint8_t*>(kMagic), 5);

    uint32_t sections = 1 + uint32_t(qm.codebooks.size());
    sections += uint32_t(qm.group_layout.size());  // main IDX per band
    if (!qm.residual_indices.empty()) sections += uint32_t(qm.group_layout.size());
    if (!qm.outlier_cols.empty()) sections += 1;
    out.u32(sections);

    {
        std::string text = meta.dump();
        std::vector<uint8_t> payload(text.begin(), text.end());
        append_section(out, kSectionMeta, payload);
    }

    for (const auto& cb : qm.codebooks) {
        Writer p;
        p.u8(uint8_t(cb.role));
        p.u32(cb.group_id);
        p.u16(uint16_t(cb.vector_len));
        p.u32(uint32_t(cb.k));
        for (float c : cb.centroids) p.f32(c);
        append_section(out, kSectionCodebook, p.bytes);
    }

    auto append_indices = [&](CodebookRole role, uint32_t group,
                              std::span<const uint32_t> indices, std::size_t k) {
        PackedIndices packed = pack(indices, exact_log2(k));
        Writer p;
        p.u8(uint8_t(role));
        p.u32(group);
        p.u8(uint8_t(packed.bitwidth));
        p.u64(packed.count);
        p.raw(packed.bytes.data(), packed.bytes.size());
        append_section(out, kSectionIndices, p.bytes);
    };

    for (std::size_t b = 0; b < qm.group_layout.size(); b++) {
        auto [pb, pe] = ranges[b];
        append_indices(CodebookRole::Main, uint32_t(b),
                       {qm.main_indices.data() + pb * vecs_main, (pe - pb) * vecs_main},
                       qm.config.k1);
    }
    if (!qm.residual_indices.empty()) {
        for (std::size_t b = 0; b < qm.group_layout.size(); b++) {
            auto [pb, pe] = ranges[b];
            append_indices(CodebookRole::Residual, uint32_t(b),
                           {qm.residual_indices.data() + pb * vecs_main, (pe - pb) * vecs_main},
                           qm.config.k2);
        }
    }
    if (!qm.outlier_cols.empty()) {
        append_indices(CodebookRole::Outlier, 0,
                       {qm.outlier_indices.data(), qm.outlier_cols.size() * vecs_out},
                       qm.config.k0);
    }

    std::filesystem::path tmp = path;
    tmp += ".tmp." + std::to_string(std::random_device{}());
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot create " + tmp.string());
        f.write(reinterpret_cast<const char*>(out.bytes.data()), out.bytes.size());
        if (!f) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw IoError("rename failed: " + path.string() + ": " + ec.message());
    }
}

// ---- deserialize -------------------------------------------------------------

QuantizedMatrix deserialize(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    if (bytes.size() < 5 || std::memcmp(bytes.data(), kMagic, 5) != 0) {
        throw FormatError("not a vptq container: " + path.string());
    }

    Reader in{bytes.data(), bytes.size(), 5};
    uint32_t sections = in.u32();

    bool have_meta = false;
    json meta;
    std::vector<Codebook> codebooks;
    struct IdxSection {
        CodebookRole role;
        uint32_t group;
        PackedIndices packed;
    };
    std::vector<IdxSection> idx_sections;

    for (uint32_t s = 0; s < sections; s++) {
        uint16_t type = in.u16();
        uint64_t length = in.u64();
        uint32_t stored_crc = in.u32();
        in.need(length);
        const uint8_t* payload = in.p + in.pos;

        if (type == kSectionMeta || type == kSectionCodebook || type == kSectionIndices) {
            uint32_t actual = uint32_t(crc32(0L, payload, uInt(length)));
            if (actual != stored_crc) {
                throw CorruptContainer("crc mismatch in section " + std::to_string(s));
            }
        }

        Reader pr{payload, std::size_t(length), 0};
        switch (type) {
            case kSectionMeta: {
                if (have_meta) throw CorruptContainer("duplicate META section");
                try {
                    meta = json::parse(payload, payload + length);
                } catch (const json::exception& e) {
                    throw CorruptContainer(std::string("bad META json: ") + e.what());
                }
                have_meta = true;
                break;
            }
            case kSectionCodebook: {
                Codebook cb;
                uint8_t role = pr.u8();
                if (role > 2) throw CorruptContainer("unknown codebook role");
                cb.role = CodebookRole(role);
                cb.group_id = pr.u32();
                cb.vector_len = pr.u16();
                cb.k = pr.u32();
                if (cb.vector_len == 0 || cb.k == 0 ||
                    length != 11 + 4 * uint64_t(cb.k) * cb.vector_len) {
                    throw CorruptContainer("codebook section size mismatch");
                }
                cb.centroids.resize(cb.k * cb.vector_len);
                for (auto& c : cb.centroids) c = pr.f32();
                codebooks.push_back(std::move(cb));
                break;
            }
            case kSectionIndices: {
                IdxSection idx;
                uint8_t role = pr.u8();
                if (role > 2) throw CorruptContainer("unknown index role");
                idx.role = CodebookRole(role);
                idx.group = pr.u32();
                idx.packed.bitwidth = pr.u8();
                idx.packed.count = pr.u64();
                if (idx.packed.bitwidth < 1 || idx.packed.bitwidth > 16) {
                    throw CorruptContainer("index section bitwidth out of range");
                }
                uint64_t expect = (uint64_t(idx.packed.count) * idx.packed.bitwidth + 7) / 8;
                if (length != 14 + expect) {
                    throw CorruptContainer("index section size mismatch");
                }
                idx.packed.bytes.assign(payload + 14, payload + length);
                idx_sections.push_back(std::move(idx));
                break;
            }
            default:
                break;  // unknown section type: skip
        }
        in.skip(length);
    }
    if (in.pos != bytes.size()) {
        throw CorruptContainer("trailing bytes after last section");
    }
    if (!have_meta) throw CorruptContainer("missing META section");

    QuantizedMatrix qm;
    try {
        qm.rows = meta.at("rows").get<std::size_t>();
        qm.cols = meta.at("cols").get<std::size_t>();
        qm.padded_rows_main = meta.at("padded_rows_main").get<std::size_t>();
        qm.padded_rows_outlier = meta.at("padded_rows_outlier").get<std::size_t>();
        qm.outlier_cols = meta.at("outlier_cols").get<std::vector<std::size_t>>();
        for (const auto& b : meta.at("group_layout")) {
            GroupBand band;
            band.col_start = b.at("col_start").get<std::size_t>();
            band.col_end = b.at("col_end").get<std::size_t>();
            band.codebook_ref = b.at("codebook_ref").get<std::size_t>();
            qm.group_layout.push_back(band);
        }
        qm.config = config_from_json(meta.at("config"));
        const json& st = meta.at("stats");
        qm.stats.proxy_loss = st.at("proxy_loss").get<double>();
        qm.stats.sum_delta_L = st.at("sum_delta_L").get<double>();
        qm.stats.frobenius_mse = st.at("frobenius_mse").get<double>();
        qm.stats.max_abs_err = st.at("max_abs_err").get<double>();
    } catch (const json::exception& e) {
        throw CorruptContainer(std::string("META missing fields: ") + e.what());
    }
    qm.codebooks = std::move(codebooks);

    if (qm.rows == 0 || qm.cols == 0 || qm.config.v1 == 0) {
        throw CorruptContainer("META has empty shape");
    }

    std::vector<std::size_t> non_out = complement_sorted(qm.outlier_cols, qm.cols);
    auto ranges = band_position_ranges(qm, non_out);
    std::size_t vecs_main = qm.padded_rows_main / qm.config.v1;
    std::size_t vecs_out = qm.config.v0 ? qm.padded_rows_outlier / qm.config.v0 : 0;

    bool has_residual = false;
    for (const auto& idx : idx_sections) {
        if (idx.role == CodebookRole::Residual) has_residual = true;
    }
    qm.main_indices.assign(non_out.size() * vecs_main, 0);
    if (has_residual) qm.residual_indices.assign(non_out.size() * vecs_main, 0);
    qm.outlier_indices.assign(qm.outlier_cols.size() * vecs_out, 0);

    std::vector<bool> main_seen(qm.group_layout.size(), false);
    std::vector<bool> residual_seen(qm.group_layout.size(), false);
    bool outlier_seen = false;

    for (const auto& idx : idx_sections) {
        const Codebook* book = nullptr;
        for (const auto& cb : qm.codebooks) {
            if (cb.role == idx.role && (idx.role == CodebookRole::Outlier || cb.group_id == idx.group)) {
                book = &cb;
                break;
            }
        }
        if (!book) throw CorruptContainer("index section without matching codebook");
        if ((uint32_t(1) << idx.packed.bitwidth) != book->k) {
            throw CorruptContainer("index bitwidth does not match codebook size");
        }
        std::vector<uint32_t> values = unpack(idx.packed);
        if (idx.role == CodebookRole::Outlier) {
            if (outlier_seen) throw CorruptContainer("duplicate outlier index section");
            if (values.size() != qm.outlier_indices.size()) {
                throw CorruptContainer("outlier index count mismatch");
            }
            std::copy(values.begin(), values.end(), qm.outlier_indices.begin());
            outlier_seen = true;
            continue;
        }
        if (idx.group >= qm.group_layout.size()) {
            throw CorruptContainer("index section group out of range");
        }
        auto [pb, pe] = ranges[idx.group];
        if (values.size() != (pe - pb) * vecs_main) {
            throw CorruptContainer("index count mismatch for group " +
                                   std::to_string(idx.group));
        }
        auto& seen =
            idx.role == CodebookRole::Main ? main_seen : residual_seen;
        auto& target = idx.role == CodebookRole::Main ? qm.main_indices : qm.residual_indices;
        if (seen[idx.group]) throw CorruptContainer("duplicate index section");
        seen[idx.group] = true;
        std::copy(values.begin(), values.end(), target.begin() + pb * vecs_main);
    }
    for (std::size_t b = 0; b < qm.group_layout.size(); b++) {
        if (!main_seen[b]) {
            throw CorruptContainer("missing main indices for group " + std::to_string(b));
        }
        if (has_residual && !residual_seen[b]) {
            throw CorruptContainer("missing residual indices for group " + std::to_string(b));
        }
    }
    if (!qm.outlier_cols.empty() && !outlier_seen) {
        throw CorruptContainer("missing outlier index section");
    }
    return qm;
}

}  // namespace vptq
