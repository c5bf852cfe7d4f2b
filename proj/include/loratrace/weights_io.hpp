#pragma once

// Model directory layout: manifest.json + weights.bin.
//
//   manifest.json  structured-text header: format_version, model config,
//                  tensor records {name, shape, dtype, byte_offset,
//                  byte_length}, and "fnv1a64:<16 hex>" checksum of the blob.
//   weights.bin    raw little-endian tensor payload, records back to back.
//
// Tensor names: "embedding" plus "layers.<i>.<tensor>" with tensor one of
// w_q, w_k, w_v, w_o, attn_norm, mlp_norm, w_gate, w_up, w_down.
// Storage dtype is f32 or f64; loading always upconverts to f64.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "loratrace/errors.hpp"
#include "loratrace/model.hpp"

namespace loratrace {

enum class StorageDtype { f32, f64 };

inline std::string dtype_name(StorageDtype d) { return d == StorageDtype::f32 ? "f32" : "f64"; }

inline std::size_t dtype_size(StorageDtype d) { return d == StorageDtype::f32 ? 4 : 8; }

struct TensorRecord {
    std::string name;
    std::vector<std::size_t> shape;
    StorageDtype dtype = StorageDtype::f32;
    std::uint64_t byte_offset = 0;
    std::uint64_t byte_length = 0;
};

struct Manifest {
    int format_version = 1;
    ModelConfig config;
    std::vector<TensorRecord> tensors;
    std::uint64_t blob_checksum = 0;
};

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t len) {
    std::uint64_t h = 14695981039346656037ULL;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 1099511628211ULL;
    }
    return h;
}

namespace detail {

inline void put_u32_le(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

inline void put_u64_le(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void append_values(std::vector<unsigned char>& blob, const double* v, std::size_t n,
                          StorageDtype dtype) {
    if (dtype == StorageDtype::f32) {
        for (std::size_t i = 0; i < n; ++i)
            put_u32_le(blob, std::bit_cast<std::uint32_t>(static_cast<float>(v[i])));
    } else {
        for (std::size_t i = 0; i < n; ++i) put_u64_le(blob, std::bit_cast<std::uint64_t>(v[i]));
    }
}

inline void read_values(const unsigned char* p, std::size_t n, StorageDtype dtype, double* out) {
    if (dtype == StorageDtype::f32) {
        for (std::size_t i = 0; i < n; ++i)
            out[i] = static_cast<double>(std::bit_cast<float>(get_u32_le(p + 4 * i)));
    } else {
        for (std::size_t i = 0; i < n; ++i)
            out[i] = std::bit_cast<double>(get_u64_le(p + 8 * i));
    }
}

inline std::string checksum_string(std::uint64_t checksum) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx",
                  static_cast<unsigned long long>(checksum));
    return buf;
}

} // namespace detail

inline std::string activation_name(Activation a) {
    return a == Activation::silu ? "silu" : "gelu";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "silu") return Activation::silu;
    if (s == "gelu") return Activation::gelu;
    throw error(errc::bad_config, "unknown activation '" + s + "'");
}

inline std::string norm_mode_name(NormMode m) {
    return m == NormMode::paper_literal ? "paper_literal" : "mean_normalized";
}

inline NormMode norm_mode_from_name(const std::string& s) {
    if (s == "paper_literal") return NormMode::paper_literal;
    if (s == "mean_normalized") return NormMode::mean_normalized;
    throw error(errc::bad_config, "unknown norm_mode '" + s + "'");
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"hidden_size", c.hidden_size}, {"mlp_size", c.mlp_size},
            {"num_layers", c.num_layers},   {"vocab_size", c.vocab_size},
            {"norm_eps", c.norm_eps},       {"rope_base", c.rope_base},
            {"activation", activation_name(c.activation)},
            {"norm_mode", norm_mode_name(c.norm_mode)}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.mlp_size = j.at("mlp_size").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.norm_eps = j.value("norm_eps", 1e-6);
    c.rope_base = j.value("rope_base", 10000.0);
    c.activation = activation_from_name(j.value("activation", std::string("silu")));
    c.norm_mode = norm_mode_from_name(j.value("norm_mode", std::string("paper_literal")));
    return c;
}

namespace detail {

struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    const double* data;
    std::size_t count;
};

inline std::vector<NamedTensor> enumerate_tensors(const Model& m) {
    std::vector<NamedTensor> out;
    out.push_back({"embedding",
                   {m.embedding.rows(), m.embedding.cols()},
                   m.embedding.data(),
                   m.embedding.size()});
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& w = m.layers[l];
        const std::string prefix = "layers." + std::to_string(l) + ".";
        auto add_mat = [&](const char* name, const Matrix& mat) {
            out.push_back({prefix + name, {mat.rows(), mat.cols()}, mat.data(), mat.size()});
        };
        auto add_vec = [&](const char* name, const std::vector<double>& v) {
            out.push_back({prefix + name, {v.size()}, v.data(), v.size()});
        };
        add_mat("w_q", w.w_q);
        add_mat("w_k", w.w_k);
        add_mat("w_v", w.w_v);
        add_mat("w_o", w.w_o);
        add_vec("attn_norm", w.attn_norm);
        add_vec("mlp_norm", w.mlp_norm);
        add_mat("w_gate", w.w_gate);
        add_mat("w_up", w.w_up);
        add_mat("w_down", w.w_down);
    }
    return out;
}

} // namespace detail

inline void save_model(const Model& model, const std::filesystem::path& dir,
                       StorageDtype dtype = StorageDtype::f32) {
    model.validate();
    std::filesystem::create_directories(dir);

    std::vector<unsigned char> blob;
    nlohmann::json records = nlohmann::json::array();
    for (const auto& t : detail::enumerate_tensors(model)) {
        const std::uint64_t offset = blob.size();
        detail::append_values(blob, t.data, t.count, dtype);
        records.push_back({{"name", t.name},
                           {"shape", t.shape},
                           {"dtype", dtype_name(dtype)},
                           {"byte_offset", offset},
                           {"byte_length", blob.size() - offset}});
    }

    nlohmann::json manifest = {{"format_version", 1},
                               {"config", model_config_to_json(model.config)},
                               {"tensors", records},
                               {"blob_checksum",
                                detail::checksum_string(fnv1a64(blob.data(), blob.size()))}};

    {
        std::ofstream f(dir / "weights.bin", std::ios::binary | std::ios::trunc);
        if (!f) throw error(errc::io_failure, "cannot open " + (dir / "weights.bin").string());
        f.write(reinterpret_cast<const char*>(blob.data()),
                static_cast<std::streamsize>(blob.size()));
        if (!f) throw error(errc::io_failure, "short write to weights.bin");
    }
    {
        std::ofstream f(dir / "manifest.json", std::ios::trunc);
        if (!f) throw error(errc::io_failure, "cannot open " + (dir / "manifest.json").string());
        f << manifest.dump(2) << "\n";
    }
}

inline Manifest read_manifest(const std::filesystem::path& dir) {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw error(errc::io_failure, "cannot open " + (dir / "manifest.json").string());
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw error(errc::malformed_manifest, e.what());
    }
    Manifest m;
    try {
        m.format_version = j.at("format_version").get<int>();
        m.config = model_config_from_json(j.at("config"));
        const std::string checksum = j.at("blob_checksum").get<std::string>();
        if (checksum.rfind("fnv1a64:", 0) != 0 || checksum.size() != 8 + 16)
            throw error(errc::malformed_manifest, "bad checksum string '" + checksum + "'");
        m.blob_checksum = std::stoull(checksum.substr(8), nullptr, 16);
        for (const auto& r : j.at("tensors")) {
            TensorRecord t;
            t.name = r.at("name").get<std::string>();
            t.shape = r.at("shape").get<std::vector<std::size_t>>();
            const std::string dt = r.at("dtype").get<std::string>();
            if (dt == "f32")
                t.dtype = StorageDtype::f32;
            else if (dt == "f64")
                t.dtype = StorageDtype::f64;
            else
                throw error(errc::unknown_dtype, "tensor '" + t.name + "' has dtype '" + dt + "'");
            t.byte_offset = r.at("byte_offset").get<std::uint64_t>();
            t.byte_length = r.at("byte_length").get<std::uint64_t>();
            m.tensors.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw error(errc::malformed_manifest, e.what());
    }
    return m;
}

inline std::vector<unsigned char> read_blob(const std::filesystem::path& dir) {
    std::ifstream f(dir / "weights.bin", std::ios::binary | std::ios::ate);
    if (!f) throw error(errc::io_failure, "cannot open " + (dir / "weights.bin").string());
    const auto size = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<unsigned char> blob(size);
    f.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(size));
    if (!f) throw error(errc::io_failure, "short read from weights.bin");
    return blob;
}

struct ValidationIssue {
    errc code;
    std::string message;
};

struct ValidationReport {
    bool ok = true;
    std::vector<ValidationIssue> issues;

    void add(errc code, std::string message) {
        ok = false;
        issues.push_back({code, std::move(message)});
    }
};

namespace detail {

inline std::vector<std::pair<std::string, std::vector<std::size_t>>>
expected_tensors(const ModelConfig& c) {
    std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
    const std::size_t d = c.hidden_size, p = c.mlp_size;
    out.push_back({"embedding", {c.vocab_size, d}});
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        out.push_back({prefix + "w_q", {d, d}});
        out.push_back({prefix + "w_k", {d, d}});
        out.push_back({prefix + "w_v", {d, d}});
        out.push_back({prefix + "w_o", {d, d}});
        out.push_back({prefix + "attn_norm", {d}});
        out.push_back({prefix + "mlp_norm", {d}});
        out.push_back({prefix + "w_gate", {d, p}});
        out.push_back({prefix + "w_up", {d, p}});
        out.push_back({prefix + "w_down", {p, d}});
    }
    return out;
}

} // namespace detail

// Structural checks against manifest + blob bytes; no tensor is materialized.
inline ValidationReport validate_manifest(const std::filesystem::path& dir) {
    ValidationReport report;
    Manifest manifest;
    try {
        manifest = read_manifest(dir);
    } catch (const error& e) {
        report.add(e.code(), e.what());
        return report;
    }

    std::vector<unsigned char> blob;
    try {
        blob = read_blob(dir);
    } catch (const error& e) {
        report.add(e.code(), e.what());
        return report;
    }

    if (fnv1a64(blob.data(), blob.size()) != manifest.blob_checksum)
        report.add(errc::checksum_mismatch, "blob checksum does not match manifest");

    std::map<std::string, const TensorRecord*> by_name;
    std::vector<std::pair<std::uint64_t, std::uint64_t>> extents;
    for (const auto& t : manifest.tensors) {
        if (!by_name.emplace(t.name, &t).second)
            report.add(errc::malformed_manifest, "duplicate tensor name '" + t.name + "'");
        std::size_t count = 1;
        for (std::size_t s : t.shape) count *= s;
        if (t.byte_length != count * dtype_size(t.dtype))
            report.add(errc::shape_mismatch,
                       "tensor '" + t.name + "' byte_length inconsistent with shape");
        if (t.byte_offset + t.byte_length > blob.size())
            report.add(errc::malformed_manifest,
                       "tensor '" + t.name + "' extends past end of blob");
        extents.push_back({t.byte_offset, t.byte_offset + t.byte_length});
    }

    std::sort(extents.begin(), extents.end());
    for (std::size_t i = 1; i < extents.size(); ++i)
        if (extents[i].first < extents[i - 1].second) {
            report.add(errc::malformed_manifest, "overlapping tensor records");
            break;
        }

    for (const auto& [name, shape] : detail::expected_tensors(manifest.config)) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            report.add(errc::missing_tensor, "tensor '" + name + "' missing");
            continue;
        }
        if (it->second->shape != shape)
            report.add(errc::shape_mismatch, "tensor '" + name + "' shape does not match config");
    }
    return report;
}

inline Model load_model(const std::filesystem::path& dir) {
    const ValidationReport report = validate_manifest(dir);
    if (!report.ok) {
        const auto& issue = report.issues.front();
        throw error(issue.code, issue.message);
    }
    const Manifest manifest = read_manifest(dir);
    const std::vector<unsigned char> blob = read_blob(dir);

    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& t : manifest.tensors) by_name[t.name] = &t;

    auto read_matrix = [&](const std::string& name) {
        const TensorRecord& t = *by_name.at(name);
        Matrix m(t.shape.at(0), t.shape.size() > 1 ? t.shape.at(1) : 1);
        detail::read_values(blob.data() + t.byte_offset, m.size(), t.dtype, m.data());
        return m;
    };
    auto read_vector = [&](const std::string& name) {
        const TensorRecord& t = *by_name.at(name);
        std::vector<double> v(t.shape.at(0));
        detail::read_values(blob.data() + t.byte_offset, v.size(), t.dtype, v.data());
        return v;
    };

    Model model;
    model.config = manifest.config;
    model.embedding = read_matrix("embedding");
    model.layers.resize(manifest.config.num_layers);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        auto& w = model.layers[l];
        w.w_q = read_matrix(prefix + "w_q");
        w.w_k = read_matrix(prefix + "w_k");
        w.w_v = read_matrix(prefix + "w_v");
        w.w_o = read_matrix(prefix + "w_o");
        w.attn_norm = read_vector(prefix + "attn_norm");
        w.mlp_norm = read_vector(prefix + "mlp_norm");
        w.w_gate = read_matrix(prefix + "w_gate");
        w.w_up = read_matrix(prefix + "w_up");
        w.w_down = read_matrix(prefix + "w_down");
    }
    model.validate();
    return model;
}

} // namespace loratrace
