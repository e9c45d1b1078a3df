// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duallora/errors.hpp"
#include "duallora/tensor.hpp"

namespace duallora {

/// Flat tensor archive.
///
/// Layout: one line of JSON (the header, terminated by '\n') holding at least
/// {"format_version": 1, "model_config": {...}}, followed by records until EOF:
///
///   u32  name length in bytes
///   u8[] name (UTF-8)
///   u32  number of extents
///   u64  extent, repeated
///   f64  values, row-major
///
/// Every integer and float is little-endian regardless of host order.
struct TensorArchive {
    static constexpr int kFormatVersion = 1;

    nlohmann::json header = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) {
                return &t;
            }
        }
        return nullptr;
    }
    void put(std::string name, Tensor t) {
        for (auto& [n, existing] : tensors) {
            if (n == name) {
                existing = std::move(t);
                return;
            }
        }
        tensors.emplace_back(std::move(name), std::move(t));
    }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline std::uint64_t get_uint(const std::string& in, std::size_t& pos, int bytes) {
    if (pos + static_cast<std::size_t>(bytes) > in.size()) {
        throw LoadError("checkpoint truncated at byte " + std::to_string(pos));
    }
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    }
    pos += static_cast<std::size_t>(bytes);
    return v;
}

}  // namespace detail

inline std::string serialize_archive(const TensorArchive& archive) {
    nlohmann::json header = archive.header;
    header["format_version"] = TensorArchive::kFormatVersion;
    if (!header.contains("model_config")) {
        header["model_config"] = nullptr;
    }
    std::string out = header.dump();
    out.push_back('\n');
    for (const auto& [name, t] : archive.tensors) {
        detail::put_u64(out, name.size(), 4);
        out += name;
        detail::put_u64(out, t.shape().size(), 4);
        for (auto extent : t.shape()) {
            detail::put_u64(out, extent, 8);
        }
        for (double v : t.data()) {
            detail::put_u64(out, std::bit_cast<std::uint64_t>(v), 8);
        }
    }
    return out;
}

inline TensorArchive parse_archive(const std::string& bytes) {
    const auto newline = bytes.find('\n');
    if (newline == std::string::npos) {
        throw LoadError("checkpoint has no header line");
    }
    TensorArchive archive;
    try {
        archive.header = nlohmann::json::parse(bytes.substr(0, newline));
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("checkpoint header is not JSON: ") + e.what());
    }
    if (!archive.header.is_object() || archive.header.value("format_version", 0) !=
                                           TensorArchive::kFormatVersion) {
        throw LoadError("unsupported checkpoint format_version");
    }
    std::size_t pos = newline + 1;
    while (pos < bytes.size()) {
        const auto name_len = detail::get_uint(bytes, pos, 4);
        if (pos + name_len > bytes.size()) {
            throw LoadError("checkpoint truncated in tensor name");
        }
        std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        const auto ndim = detail::get_uint(bytes, pos, 4);
        if (ndim == 0 || ndim > 8) {
            throw LoadError("tensor '" + name + "' has invalid rank " + std::to_string(ndim));
        }
        Shape shape(ndim);
        for (auto& extent : shape) {
            extent = detail::get_uint(bytes, pos, 8);
            if (extent == 0) {
                throw LoadError("tensor '" + name + "' has a zero extent");
            }
        }
        const auto count = numel(shape);
        if (count > (bytes.size() - pos) / 8) {
            throw LoadError("tensor '" + name + "' truncated");
        }
        std::vector<double> values(count);
        for (auto& v : values) {
            v = std::bit_cast<double>(detail::get_uint(bytes, pos, 8));
        }
        archive.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    return archive;
}

inline void save_archive(const TensorArchive& archive, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw LoadError("cannot write " + path.string());
    }
    const auto bytes = serialize_archive(archive);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline TensorArchive load_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open checkpoint " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_archive(ss.str());
}

}  // namespace duallora
