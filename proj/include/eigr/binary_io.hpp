#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "eigr/common.hpp"

namespace eigr::binary {

// Host byte order is little-endian on every supported target; values are
// written as raw bytes.

/// Accumulates bytes and a running checksum while writing.
class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    template <class T>
    void pod(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        bytes(&v, sizeof(T));
    }

    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        checksum_ = fnv1a64(std::span<const unsigned char>(p, n), checksum_);
        out_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
    }

    void doubles(std::span<const double> v) { bytes(v.data(), v.size() * sizeof(double)); }

    void string(const std::string& s) {
        pod(static_cast<std::uint64_t>(s.size()));
        bytes(s.data(), s.size());
    }

    void matrix(const Matrix& m) {
        pod(static_cast<std::uint64_t>(m.rows));
        pod(static_cast<std::uint64_t>(m.cols));
        doubles(m.data);
    }

    void index_lists(const std::vector<std::vector<std::size_t>>& lists) {
        pod(static_cast<std::uint64_t>(lists.size()));
        for (const auto& l : lists) {
            pod(static_cast<std::uint64_t>(l.size()));
            for (std::size_t x : l) pod(static_cast<std::uint64_t>(x));
        }
    }

    std::uint64_t checksum() const { return checksum_; }

    /// Appends the checksum of everything written so far (not itself hashed).
    void finish() {
        const std::uint64_t c = checksum_;
        out_.write(reinterpret_cast<const char*>(&c), sizeof(c));
        if (!out_) throw Error("write failed");
    }

private:
    std::ostream& out_;
    std::uint64_t checksum_ = 0xcbf29ce484222325ULL;
};

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    template <class T>
    T pod() {
        static_assert(std::is_trivially_copyable_v<T>);
        T v;
        bytes(&v, sizeof(T));
        return v;
    }

    void bytes(void* data, std::size_t n) {
        in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) throw CorruptFile("unexpected end of file");
        checksum_ = fnv1a64(std::span<const unsigned char>(static_cast<const unsigned char*>(data), n), checksum_);
    }

    std::uint64_t length(std::uint64_t limit = (1ULL << 40)) {
        const auto n = pod<std::uint64_t>();
        if (n > limit) throw CorruptFile("implausible length field");
        return n;
    }

    void doubles(std::span<double> v) { bytes(v.data(), v.size() * sizeof(double)); }

    std::string string() {
        std::string s(length(1ULL << 20), '\0');
        bytes(s.data(), s.size());
        return s;
    }

    Matrix matrix() {
        const auto r = length(1ULL << 32);
        const auto c = length(1ULL << 32);
        if (r * c > (1ULL << 34)) throw CorruptFile("matrix too large");
        Matrix m(r, c);
        doubles(m.data);
        return m;
    }

    std::vector<std::vector<std::size_t>> index_lists() {
        std::vector<std::vector<std::size_t>> lists(length(1ULL << 32));
        for (auto& l : lists) {
            l.resize(length(1ULL << 32));
            for (auto& x : l) x = static_cast<std::size_t>(pod<std::uint64_t>());
        }
        return lists;
    }

    /// Reads the trailing checksum and compares it with the bytes consumed.
    void verify() {
        const std::uint64_t expected = checksum_;
        std::uint64_t stored = 0;
        in_.read(reinterpret_cast<char*>(&stored), sizeof(stored));
        if (in_.gcount() != sizeof(stored)) throw CorruptFile("missing checksum");
        if (stored != expected) throw CorruptFile("checksum mismatch");
    }

private:
    std::istream& in_;
    std::uint64_t checksum_ = 0xcbf29ce484222325ULL;
};

}  // namespace eigr::binary
