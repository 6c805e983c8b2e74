// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices, the handful of differentiable primitives the
// model needs, and a seeded counter-based random stream.
//
// Every reduction runs in a fixed order (row-major outer loops, ascending
// inner index) so results are bit-reproducible for identical inputs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "loracomp/errors.hpp"

namespace loracomp {

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {
        if (rows == 0 || cols == 0) {
            throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
        }
    }

    Matrix(std::initializer_list<std::initializer_list<double>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        if (rows_ == 0 || cols_ == 0) {
            throw ShapeError("matrix literal must be non-empty");
        }
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_) {
                throw ShapeError("ragged matrix literal");
            }
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    static Matrix from_rows(std::size_t rows, std::size_t cols, std::vector<double> data) {
        if (data.size() != rows * cols) {
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match " +
                             shape_string(rows, cols));
        }
        Matrix m(rows, cols);
        m.data_ = std::move(data);
        return m;
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    std::string shape() const { return shape_string(rows_, cols_); }

    bool same_shape(const Matrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    Matrix& operator+=(const Matrix& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += other.data_[i];
        }
        return *this;
    }

    Matrix& operator-=(const Matrix& other) {
        require_same_shape(other, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] -= other.data_[i];
        }
        return *this;
    }

    Matrix& operator*=(double s) noexcept {
        for (double& v : data_) {
            v *= s;
        }
        return *this;
    }

    /// this += s * other
    Matrix& add_scaled(const Matrix& other, double s) {
        require_same_shape(other, "add_scaled");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += s * other.data_[i];
        }
        return *this;
    }

    void fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Matrix& a, const Matrix& b) noexcept {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

    static std::string shape_string(std::size_t r, std::size_t c) {
        return std::to_string(r) + "x" + std::to_string(c);
    }

private:
    void require_same_shape(const Matrix& other, const char* op) const {
        if (!same_shape(other)) {
            throw ShapeError(std::string(op) + ": shape mismatch " + shape() + " vs " + other.shape());
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

/// a (m×k) · b (k×n).
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + a.shape() + " x " + b.shape());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* o = out.row(i).data();
        const double* ar = a.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double s = ar[k];
            const double* br = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) {
                o[j] += s * br[j];
            }
        }
    }
    return out;
}

/// a (m×k) · bᵀ where b is n×k.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: inner dimensions differ, " + a.shape() + " x " + b.shape() + "^T");
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* br = b.row(j).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                acc += ar[k] * br[k];
            }
            out(i, j) = acc;
        }
    }
    return out;
}

/// aᵀ · b where a is k×m and b is k×n.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: inner dimensions differ, " + a.shape() + "^T x " + b.shape());
    }
    Matrix out(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* ar = a.row(k).data();
        const double* br = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double s = ar[i];
            double* o = out.row(i).data();
            for (std::size_t j = 0; j < n; ++j) {
                o[j] += s * br[j];
            }
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

inline double frob_inner(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("frob_inner: shape mismatch " + a.shape() + " vs " + b.shape());
    }
    double acc = 0.0;
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        acc += av[i] * bv[i];
    }
    return acc;
}

inline double frob_norm(const Matrix& a) { return std::sqrt(frob_inner(a, a)); }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("max_abs_diff: shape mismatch " + a.shape() + " vs " + b.shape());
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    }
    return m;
}

/// Numerically stable softmax (max subtracted before exponentiation).
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) {
        throw ArgumentError("softmax of an empty vector");
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double& v : out) {
        v /= sum;
    }
    return out;
}

/// Lowest index wins on ties.
inline std::size_t argmax(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return best;
}

struct CrossEntropy {
    double loss = 0.0;
    std::vector<double> grad;
};

/// loss = -log softmax(logits)[label]; grad = softmax(logits) - onehot(label).
inline CrossEntropy cross_entropy(std::span<const double> logits, std::size_t label) {
    if (label >= logits.size()) {
        throw ArgumentError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                            std::to_string(logits.size()) + " classes");
    }
    // log-sum-exp as mx + log1p(Σ_{i≠argmax} exp(vᵢ - mx)) keeps precision
    // when one logit dominates.
    const std::size_t top = argmax(logits);
    const double mx = logits[top];
    double rest = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (i != top) {
            rest += std::exp(logits[i] - mx);
        }
    }
    const double lse_shifted = std::log1p(rest);
    CrossEntropy ce;
    ce.loss = lse_shifted - (logits[label] - mx);
    ce.grad.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        ce.grad[i] = std::exp(logits[i] - mx - lse_shifted);
    }
    ce.grad[label] -= 1.0;
    return ce;
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace detail

/// SplitMix64 in counter mode: the i-th draw is mix64(key + (i+1)·γ).
/// Substreams are keyed by (parent key, label) through FNV-1a and a mixing
/// round, so any draw is addressable without replaying a sequence.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : key_(detail::mix64(seed ^ 0x6C6F7261636F6D70ULL)) {}

    static RngStream substream(std::uint64_t seed, std::string_view label) {
        return RngStream(seed).child(label);
    }

    RngStream child(std::string_view label) const {
        RngStream s(0);
        s.key_ = detail::mix64(key_ ^ detail::mix64(detail::fnv1a(label)));
        return s;
    }

    RngStream child(std::string_view label, std::uint64_t index) const {
        RngStream s = child(label);
        s.key_ = detail::mix64(s.key_ + detail::mix64(index + 1));
        return s;
    }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return detail::mix64(key_ + counter_ * detail::kGolden);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal via the cosine branch of Box-Muller; two uniforms per draw.
    double normal() noexcept {
        const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) noexcept {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    std::uint64_t key() const noexcept { return key_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// i.i.d. Normal(0, sigma²) entries.
inline Matrix gaussian(RngStream& rng, std::size_t rows, std::size_t cols, double sigma) {
    if (!(sigma >= 0.0)) {
        throw ArgumentError("gaussian: sigma must be non-negative");
    }
    Matrix m(rows, cols);
    for (double& v : m.values()) {
        v = sigma * rng.normal();
    }
    return m;
}

}  // namespace loracomp
