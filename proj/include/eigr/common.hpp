#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace eigr {

using Vec = std::vector<double>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MalformedRow : public Error {
public:
    MalformedRow(std::size_t line, const std::string& detail)
        : Error("malformed row at line " + std::to_string(line) + ": " + detail), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

#define EIGR_DEFINE_ERROR(Name)                                                                    \
    class Name : public Error {                                                                    \
    public:                                                                                        \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {}                      \
    }

EIGR_DEFINE_ERROR(EmptyFile);
EIGR_DEFINE_ERROR(InvalidDataset);
EIGR_DEFINE_ERROR(InsufficientData);
EIGR_DEFINE_ERROR(DimensionMismatch);
EIGR_DEFINE_ERROR(UnknownItem);
EIGR_DEFINE_ERROR(UnknownGroup);
EIGR_DEFINE_ERROR(NonFiniteLoss);
EIGR_DEFINE_ERROR(SequenceTooShort);
EIGR_DEFINE_ERROR(IsolatedEndpoint);
EIGR_DEFINE_ERROR(ZeroProbability);
EIGR_DEFINE_ERROR(ZeroVector);
EIGR_DEFINE_ERROR(TooFewPoints);
EIGR_DEFINE_ERROR(NormExceedsCap);
EIGR_DEFINE_ERROR(DuplicateGroupId);
EIGR_DEFINE_ERROR(EmptyIndex);
EIGR_DEFINE_ERROR(VersionMismatch);
EIGR_DEFINE_ERROR(CorruptFile);
EIGR_DEFINE_ERROR(InvalidConfig);

#undef EIGR_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Dense row-major matrix
// ---------------------------------------------------------------------------

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    bool operator==(const Matrix&) const = default;
};

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

inline double sigmoid(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// ln(1 + e^x) without overflow.
inline double softplus(double x) {
    if (x > 30) return x;
    if (x < -30) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return dot(a, a); }
inline double norm(std::span<const double> a) { return std::sqrt(norm2(a)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// out += scale * x
inline void axpy(double scale, std::span<const double> x, std::span<double> out) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] += scale * x[i];
}

/// out = m * x (m is rows x cols, x has cols entries)
inline void matvec(const Matrix& m, std::span<const double> x, std::span<double> out) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.data.data() + r * m.cols;
        double s = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c) s += mr[c] * x[c];
        out[r] = s;
    }
}

/// out += m^T * y
inline void matvec_transposed_add(const Matrix& m, std::span<const double> y, std::span<double> out) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double* mr = m.data.data() + r * m.cols;
        const double yr = y[r];
        if (yr == 0.0) continue;
        for (std::size_t c = 0; c < m.cols; ++c) out[c] += mr[c] * yr;
    }
}

/// m += y * x^T
inline void outer_add(std::span<const double> y, std::span<const double> x, Matrix& m) {
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double yr = y[r];
        if (yr == 0.0) continue;
        double* mr = m.data.data() + r * m.cols;
        for (std::size_t c = 0; c < m.cols; ++c) mr[c] += yr * x[c];
    }
}

// ---------------------------------------------------------------------------
// Seeding and hashing
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a stream tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

using Rng = std::mt19937_64;

inline void fill_uniform(std::span<double> out, double lo, double hi, Rng& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : out) v = dist(rng);
}

}  // namespace eigr
