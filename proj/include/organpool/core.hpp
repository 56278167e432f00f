// Shared value types, error categories, and the counter-based RNG.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace organpool {

enum class ErrorKind {
    config,
    data,
    geometry,
    index,
    invalid_input,
    schema,
    numeric,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::data: return "data";
        case ErrorKind::geometry: return "geometry";
        case ErrorKind::index: return "index";
        case ErrorKind::invalid_input: return "invalid-input";
        case ErrorKind::schema: return "schema";
        case ErrorKind::numeric: return "numeric";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind), detail_(what) {}

    ErrorKind kind() const noexcept { return kind_; }
    /// Message without the category prefix.
    const std::string& detail() const noexcept { return detail_; }

    /// Same category, message prefixed with `context`.
    Error within(const std::string& context) const { return Error(kind_, context + ": " + detail_); }

private:
    ErrorKind kind_;
    std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

/// Process exit code for an error category: 2 config, 3 data, 4 numeric.
inline int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::numeric: return 4;
        default: return 3;
    }
}

struct Shape3 {
    std::size_t d = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t size() const { return d * h * w; }
    bool operator==(const Shape3&) const = default;
};

inline std::string to_string(const Shape3& s) {
    return "(" + std::to_string(s.d) + "," + std::to_string(s.h) + "," + std::to_string(s.w) + ")";
}

/// Dense D x H x W grid in raster order (z slowest, x fastest).
template <typename T>
class Grid3 {
public:
    Grid3() = default;
    explicit Grid3(Shape3 shape, T fill = T{}) : shape_(shape), data_(shape.size(), fill) {}
    Grid3(Shape3 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.size()) {
            fail(ErrorKind::invalid_input, "grid payload size does not match shape " + organpool::to_string(shape_));
        }
    }

    const Shape3& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }

    std::size_t offset(std::size_t z, std::size_t y, std::size_t x) const {
        return (z * shape_.h + y) * shape_.w + x;
    }
    T& at(std::size_t z, std::size_t y, std::size_t x) { return data_[offset(z, y, x)]; }
    const T& at(std::size_t z, std::size_t y, std::size_t x) const { return data_[offset(z, y, x)]; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    bool operator==(const Grid3&) const = default;

private:
    Shape3 shape_;
    std::vector<T> data_;
};

using MaskGrid = Grid3<std::uint8_t>;

/// Row-major dense matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) fail(ErrorKind::invalid_input, "matrix payload size mismatch");
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Numerically stable BCE-with-logits: max(z,0) - z*t + log(1 + exp(-|z|)).
inline double bce_with_logits(double z, double t) {
    return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
}

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Counter-based RNG. A stream is keyed by (seed, study id, purpose) so results
// never depend on call order across studies.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::string_view study, std::string_view purpose, std::uint64_t index = 0)
        : key_(splitmix64(splitmix64(seed) ^ fnv1a64(purpose, fnv1a64(study)) ^ splitmix64(index + 0x51ed))) {}

    std::uint64_t next_u64() { return splitmix64(key_ + 0x632be59bd9b4e019ULL * ++counter_); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    bool bernoulli(double p) { return uniform() < p; }

    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) { return n == 0 ? 0 : static_cast<std::size_t>(next_u64() % n); }

    /// Standard normal via Box-Muller (no cached second draw).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Fisher-Yates permutation of [0, n).
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[below(i)]);
        return p;
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace organpool
