#pragma once

// CIFAR binary format: each record is the label byte(s) followed by 3072
// pixel bytes (R plane, G plane, B plane; each 32x32 row-major). CIFAR-100
// records carry a coarse then a fine label byte.

#include "ftn/error.hpp"
#include "ftn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace ftn::data {

inline constexpr std::size_t kCifarPixels = 3 * 32 * 32;

enum class CifarVariant { cifar10, cifar100 };

inline std::size_t label_bytes(CifarVariant v) { return v == CifarVariant::cifar10 ? 1 : 2; }
inline std::size_t record_size(CifarVariant v) { return label_bytes(v) + kCifarPixels; }
inline int class_count(CifarVariant v) { return v == CifarVariant::cifar10 ? 10 : 100; }

inline CifarVariant parse_cifar_variant(const std::string& s) {
    if (s == "cifar10") return CifarVariant::cifar10;
    if (s == "cifar100") return CifarVariant::cifar100;
    throw ConfigError("unknown dataset '" + s + "' (expected cifar10 or cifar100)");
}

struct CifarRecord {
    int label = 0;
    int coarse_label = -1; ///< CIFAR-100 only
    std::vector<std::uint8_t> pixels = std::vector<std::uint8_t>(kCifarPixels);
};

/// Images as reals in [0,255], shape [N,3,32,32]; labels are the fine labels.
struct CifarSet {
    Tensor<float> images;
    std::vector<int> labels;
    std::size_t size() const { return labels.size(); }
};

inline std::vector<CifarRecord> parse_cifar_records(const std::string& bytes, CifarVariant v,
                                                    const std::string& origin = "<memory>") {
    const std::size_t rec = record_size(v);
    if (bytes.empty()) throw DataError(origin + ": empty file");
    if (bytes.size() % rec != 0) {
        throw DataError(origin + ": truncated record at byte offset " + std::to_string(bytes.size() / rec * rec) +
                        " (file size " + std::to_string(bytes.size()) + " is not a multiple of " +
                        std::to_string(rec) + ")");
    }
    std::vector<CifarRecord> out(bytes.size() / rec);
    for (std::size_t r = 0; r < out.size(); ++r) {
        const std::size_t off = r * rec;
        auto byte = [&](std::size_t i) { return static_cast<std::uint8_t>(bytes[off + i]); };
        auto& o = out[r];
        if (v == CifarVariant::cifar100) {
            o.coarse_label = byte(0);
            o.label = byte(1);
            if (o.coarse_label >= 20) {
                throw DataError(origin + ": coarse label " + std::to_string(o.coarse_label) + " out of range at byte offset " +
                                std::to_string(off));
            }
        } else {
            o.label = byte(0);
        }
        if (o.label >= class_count(v)) {
            throw DataError(origin + ": label " + std::to_string(o.label) + " out of range at byte offset " +
                            std::to_string(off + label_bytes(v) - 1));
        }
        for (std::size_t i = 0; i < kCifarPixels; ++i) o.pixels[i] = byte(label_bytes(v) + i);
    }
    return out;
}

inline std::string serialize_cifar_records(const std::vector<CifarRecord>& records, CifarVariant v) {
    std::string out;
    out.reserve(records.size() * record_size(v));
    for (const auto& r : records) {
        if (r.pixels.size() != kCifarPixels) throw DataError("cifar: record must hold 3072 pixels");
        if (v == CifarVariant::cifar100) out.push_back(static_cast<char>(r.coarse_label));
        out.push_back(static_cast<char>(r.label));
        out.append(reinterpret_cast<const char*>(r.pixels.data()), r.pixels.size());
    }
    return out;
}

inline std::string read_binary(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError(path.string() + ": cannot open for reading");
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_binary(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(path.string() + ": cannot open for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError(path.string() + ": write failed");
}

inline CifarSet to_set(const std::vector<CifarRecord>& records) {
    if (records.empty()) throw DataError("cifar: no records");
    CifarSet s{Tensor<float>(Shape{records.size(), 3, 32, 32}), {}};
    s.labels.reserve(records.size());
    float* dst = s.images.ptr();
    for (const auto& r : records) {
        s.labels.push_back(r.label);
        for (auto p : r.pixels) *dst++ = static_cast<float>(p);
    }
    return s;
}

/// Standard file names of a split inside the dataset directory.
inline std::vector<std::filesystem::path> cifar_split_files(const std::filesystem::path& root, CifarVariant v,
                                                            const std::string& split) {
    if (split != "train" && split != "test") throw ConfigError("cifar: split must be train or test, got '" + split + "'");
    if (v == CifarVariant::cifar100) return {root / (split + ".bin")};
    if (split == "test") return {root / "test_batch.bin"};
    std::vector<std::filesystem::path> files;
    for (int k = 1; k <= 5; ++k) files.push_back(root / ("data_batch_" + std::to_string(k) + ".bin"));
    return files;
}

inline std::vector<CifarRecord> load_cifar_records(const std::vector<std::filesystem::path>& files, CifarVariant v) {
    std::vector<CifarRecord> all;
    for (const auto& f : files) {
        if (!std::filesystem::exists(f)) throw IoError(f.string() + ": no such file");
        auto part = parse_cifar_records(read_binary(f), v, f.string());
        all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return all;
}

inline CifarSet load_cifar(const std::filesystem::path& root, CifarVariant v, const std::string& split) {
    return to_set(load_cifar_records(cifar_split_files(root, v, split), v));
}

/// First `n` samples (or all if fewer).
inline CifarSet head(const CifarSet& s, std::size_t n) {
    n = std::min(n, s.size());
    if (n == 0) throw DataError("cifar: empty subset");
    CifarSet out{Tensor<float>(Shape{n, 3, 32, 32}), std::vector<int>(s.labels.begin(), s.labels.begin() + n)};
    std::copy(s.images.ptr(), s.images.ptr() + n * kCifarPixels, out.images.ptr());
    return out;
}

} // namespace ftn::data
