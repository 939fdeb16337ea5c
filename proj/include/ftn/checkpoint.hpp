#pragma once

// Binary model container:
//   "FTNCKPT\0" | u32 version | u64 spec length | spec JSON | f32 tensors
// All integers and floats little-endian; tensors follow Model::state_tensors().

#include "ftn/error.hpp"
#include "ftn/network.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace ftn {

inline constexpr std::array<char, 8> kCheckpointMagic{'F', 'T', 'N', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t& off, const std::string& path, const char* what) {
    if (in.size() < off + sizeof(U)) {
        throw IoError(path + ": truncated " + what + " at byte offset " + std::to_string(off));
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    off += sizeof(U);
    return v;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(path + ": cannot open for reading");
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(path + ": cannot open for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError(path + ": write failed");
}

} // namespace detail

template <typename T>
std::string serialize_checkpoint(Model<T>& model) {
    std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    const std::string spec = to_json(model.spec()).dump();
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint64_t>(out, spec.size());
    out += spec;
    for (const auto* t : model.state_tensors()) {
        for (T v : t->data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    return out;
}

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model) {
    detail::write_file(path, serialize_checkpoint(model));
}

template <typename T>
Model<T> deserialize_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
    if (bytes.size() < kCheckpointMagic.size() ||
        std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
        throw IoError(path + ": not a model checkpoint (bad magic at byte offset 0)");
    }
    std::size_t off = kCheckpointMagic.size();
    const auto version = detail::get_le<std::uint32_t>(bytes, off, path, "version");
    if (version != kCheckpointVersion) {
        throw IoError(path + ": unsupported checkpoint version " + std::to_string(version) + " at byte offset 8");
    }
    const auto len = detail::get_le<std::uint64_t>(bytes, off, path, "spec length");
    if (bytes.size() - off < len) throw IoError(path + ": truncated spec at byte offset " + std::to_string(off));
    NetworkSpec spec;
    try {
        spec = network_spec_from_json(nlohmann::json::parse(bytes.substr(off, len)));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": malformed spec at byte offset " + std::to_string(off) + ": " + e.what());
    }
    off += len;
    Model<T> model(std::move(spec), 0);
    for (auto* t : model.state_tensors()) {
        for (T& v : t->data()) {
            v = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, off, path, "tensor data")));
        }
    }
    if (off != bytes.size()) {
        throw IoError(path + ": " + std::to_string(bytes.size() - off) + " trailing bytes at byte offset " +
                      std::to_string(off));
    }
    return model;
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    return deserialize_checkpoint<T>(detail::read_file(path), path);
}

} // namespace ftn
