#pragma once

// Global contrast normalisation followed by ZCA whitening:
//   x' = Z (gcn(x / 255) - mu),  Z = U diag((s + lambda)^-1/2) U^T
// with (U, s) the eigendecomposition of the training covariance.

#include "ftn/data/cifar.hpp"
#include "ftn/error.hpp"
#include "ftn/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ftn::data {

inline constexpr double kGcnStdFloor = 1e-8;
inline constexpr double kDefaultZcaLambda = 0.1;

/// Per-sample mean subtraction and division by the (population) standard
/// deviation, floored so constant inputs map to zeros.
template <typename T>
void gcn_inplace(std::span<T> x) {
    if (x.empty()) return;
    double mean = 0;
    for (T v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0;
    for (T v : x) var += (v - mean) * (v - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(x.size())), kGcnStdFloor);
    for (T& v : x) v = static_cast<T>((v - mean) / sd);
}

struct WhiteningTransform {
    Eigen::VectorXd mean;   ///< [D], of the GCN-normalised training set
    Eigen::MatrixXd matrix; ///< [D,D], symmetric
    double lambda = kDefaultZcaLambda;
    std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

/// ZCA matrix from a covariance and the data mean.
inline WhiteningTransform zca_from_covariance(Eigen::VectorXd mean, const Eigen::MatrixXd& cov, double lambda) {
    if (!(lambda > 0)) throw ConfigError("zca: lambda must be positive");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericError("zca: eigendecomposition failed");
    const Eigen::VectorXd scale = (eig.eigenvalues().array().max(0.0) + lambda).rsqrt();
    WhiteningTransform t;
    t.lambda = lambda;
    t.mean = std::move(mean);
    t.matrix = eig.eigenvectors() * scale.asDiagonal() * eig.eigenvectors().transpose();
    t.matrix = 0.5 * (t.matrix + t.matrix.transpose()).eval();
    return t;
}

/// Plain ZCA of the rows of `x` (no GCN).
inline WhiteningTransform fit_zca(const Eigen::MatrixXd& x, double lambda) {
    if (x.rows() < 2) throw DataError("zca: need at least two samples");
    Eigen::VectorXd mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(x.cols(), x.cols());
    cov.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose(), 1.0 / static_cast<double>(x.rows()));
    cov = cov.selfadjointView<Eigen::Lower>();
    return zca_from_covariance(std::move(mean), cov, lambda);
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Rows [r0, r0+rows) of the images scaled to [0,1] and contrast-normalised.
inline RowMatrix gcn_rows(const Tensor<float>& images, std::size_t r0, std::size_t rows) {
    const std::size_t d = images.size() / images.dim(0);
    RowMatrix x(rows, d);
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = x.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) row[c] = images[(r0 + r) * d + c] / 255.0;
        gcn_inplace(std::span<double>(row, d));
    }
    return x;
}

inline constexpr std::size_t kChunkRows = 512;

} // namespace detail

/// ZCA from centred rows `xc` ([N,D], N < D) without a D x D
/// eigendecomposition. With (s_j, v_j) the eigenpairs of xc xc^T / N, the
/// covariance eigenvectors are u_j = xc^T v_j / sqrt(N s_j) and every other
/// direction has eigenvalue 0, so
///   Z = I / sqrt(lambda) + sum_j u_j ((s_j + lambda)^-1/2 - lambda^-1/2) u_j^T.
inline WhiteningTransform zca_low_rank(Eigen::VectorXd mean, const Eigen::MatrixXd& xc, double lambda) {
    if (!(lambda > 0)) throw ConfigError("zca: lambda must be positive");
    const double n = static_cast<double>(xc.rows());
    Eigen::MatrixXd gram = xc * xc.transpose() / n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    if (eig.info() != Eigen::Success) throw NumericError("zca: eigendecomposition failed");
    const Eigen::VectorXd& s = eig.eigenvalues();
    const double cutoff = 1e-12 * std::max(s.maxCoeff(), 0.0);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index j = 0; j < s.size(); ++j)
        if (s[j] > cutoff) keep.push_back(j);
    Eigen::MatrixXd u(xc.cols(), static_cast<Eigen::Index>(keep.size()));
    Eigen::VectorXd shrink(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t c = 0; c < keep.size(); ++c) {
        const auto j = keep[c];
        const auto ci = static_cast<Eigen::Index>(c);
        u.col(ci) = xc.transpose() * eig.eigenvectors().col(j) / std::sqrt(n * s[j]);
        shrink[ci] = 1.0 / std::sqrt(s[j] + lambda) - 1.0 / std::sqrt(lambda);
    }
    WhiteningTransform t;
    t.lambda = lambda;
    t.mean = std::move(mean);
    t.matrix = Eigen::MatrixXd::Identity(xc.cols(), xc.cols()) / std::sqrt(lambda);
    t.matrix.noalias() += u * shrink.asDiagonal() * u.transpose();
    t.matrix = 0.5 * (t.matrix + t.matrix.transpose()).eval();
    return t;
}

/// Fits GCN + ZCA on the training images ([N, ...], raw [0,255]). The
/// covariance is accumulated in chunks so the full set is never duplicated;
/// with fewer images than dimensions the low-rank route is used instead.
inline WhiteningTransform fit_whitening(const Tensor<float>& train_images, double lambda = kDefaultZcaLambda) {
    const std::size_t n = train_images.dim(0), d = train_images.size() / n;
    if (n < 2) throw DataError("whitening: need at least two training images");
    if (n < d) {
        Eigen::MatrixXd x = detail::gcn_rows(train_images, 0, n);
        Eigen::VectorXd mean = x.colwise().mean().transpose();
        x.rowwise() -= mean.transpose();
        return zca_low_rank(std::move(mean), x, lambda);
    }
    const auto di = static_cast<Eigen::Index>(d);
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(di);
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(di, di);
    for (std::size_t r0 = 0; r0 < n; r0 += detail::kChunkRows) {
        const auto x = detail::gcn_rows(train_images, r0, std::min(detail::kChunkRows, n - r0));
        sum += x.colwise().sum().transpose();
        gram.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose());
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    Eigen::VectorXd mean = sum * inv_n;
    Eigen::MatrixXd cov = gram.selfadjointView<Eigen::Lower>();
    cov *= inv_n;
    cov.noalias() -= mean * mean.transpose();
    return zca_from_covariance(std::move(mean), cov, lambda);
}

/// Returns GCN + ZCA applied to every image, same shape as the input.
inline Tensor<float> apply_whitening(const WhiteningTransform& t, const Tensor<float>& images) {
    const std::size_t n = images.dim(0), d = images.size() / n;
    if (d != t.dim()) {
        throw ShapeError("whitening: transform has dimension " + std::to_string(t.dim()) + ", images have " +
                         std::to_string(d));
    }
    Tensor<float> out(images.shape());
    for (std::size_t r0 = 0; r0 < n; r0 += detail::kChunkRows) {
        const std::size_t rows = std::min(detail::kChunkRows, n - r0);
        auto x = detail::gcn_rows(images, r0, rows);
        x.rowwise() -= t.mean.transpose();
        const detail::RowMatrix y = x * t.matrix;
        for (std::size_t k = 0; k < rows * d; ++k) out[r0 * d + k] = static_cast<float>(y.data()[k]);
    }
    return out;
}

/// Covariance of the rows of [N, ...] data (biased).
inline Eigen::MatrixXd covariance(const Tensor<float>& data) {
    const std::size_t n = data.dim(0), d = data.size() / n;
    Eigen::MatrixXd x(n, d);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) x(r, c) = data[r * d + c];
    const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    cov.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose(), 1.0 / static_cast<double>(n));
    return cov.selfadjointView<Eigen::Lower>();
}

inline double mean_abs_off_diagonal(const Eigen::MatrixXd& m) {
    const double total = m.cwiseAbs().sum() - m.diagonal().cwiseAbs().sum();
    const double count = static_cast<double>(m.rows() * m.cols() - m.rows());
    return count > 0 ? total / count : 0.0;
}

// ---------------------------------------------------------------------------
// Disk cache: "FTNZCA01" | u64 key | u64 D | f64 lambda | f64 mean[D] |
// f64 matrix[D*D] row-major, all little-endian.

inline constexpr char kZcaMagic[8] = {'F', 'T', 'N', 'Z', 'C', 'A', '0', '1'};

/// 64-bit FNV-1a, chainable through `h`.
inline std::uint64_t fnv1a(std::span<const char> bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Cache key over the training files' contents and lambda.
inline std::uint64_t whitening_cache_key(const std::vector<std::filesystem::path>& files, double lambda) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& f : files) {
        const auto bytes = read_binary(f);
        h = fnv1a(bytes, h);
    }
    const auto bits = std::bit_cast<std::uint64_t>(lambda);
    char raw[8];
    for (int i = 0; i < 8; ++i) raw[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    return fnv1a(std::span<const char>(raw, 8), h);
}

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t& off, const std::string& path) {
    if (in.size() < off + 8) throw IoError(path + ": truncated whitening cache at byte offset " + std::to_string(off));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    off += 8;
    return v;
}

} // namespace detail

inline void save_whitening(const std::filesystem::path& path, const WhiteningTransform& t, std::uint64_t key) {
    std::string out(kZcaMagic, kZcaMagic + 8);
    detail::put_u64(out, key);
    detail::put_u64(out, t.dim());
    detail::put_u64(out, std::bit_cast<std::uint64_t>(t.lambda));
    for (Eigen::Index i = 0; i < t.mean.size(); ++i) detail::put_u64(out, std::bit_cast<std::uint64_t>(t.mean[i]));
    for (Eigen::Index r = 0; r < t.matrix.rows(); ++r)
        for (Eigen::Index c = 0; c < t.matrix.cols(); ++c)
            detail::put_u64(out, std::bit_cast<std::uint64_t>(t.matrix(r, c)));
    write_binary(path, out);
}

/// Returns the cached transform, or nothing if the file is absent or was
/// written for a different key.
inline std::optional<WhiteningTransform> load_whitening(const std::filesystem::path& path, std::uint64_t key) {
    if (!std::filesystem::exists(path)) return std::nullopt;
    const auto bytes = read_binary(path);
    const std::string p = path.string();
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kZcaMagic, 8) != 0) {
        throw IoError(p + ": not a whitening cache (bad magic at byte offset 0)");
    }
    std::size_t off = 8;
    if (detail::get_u64(bytes, off, p) != key) return std::nullopt;
    const auto d = detail::get_u64(bytes, off, p);
    if (bytes.size() != 32 + 8 * (d + d * d)) {
        throw IoError(p + ": whitening cache size " + std::to_string(bytes.size()) + " does not match dimension " +
                      std::to_string(d));
    }
    WhiteningTransform t;
    t.lambda = std::bit_cast<double>(detail::get_u64(bytes, off, p));
    t.mean.resize(static_cast<Eigen::Index>(d));
    t.matrix.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < d; ++i) t.mean[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(detail::get_u64(bytes, off, p));
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < d; ++c)
            t.matrix(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                std::bit_cast<double>(detail::get_u64(bytes, off, p));
    return t;
}

} // namespace ftn::data
