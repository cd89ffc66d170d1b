#pragma once

// Little-endian binary primitives for artifact files. Raw IEEE doubles keep
// save/load round-trips bit-exact.

#include "dcsr/common.hpp"

#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace dcsr::binio {

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out) throw RuntimeFailure("write failed");
}

inline void read_bytes(std::istream& in, void* p, std::size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n)) throw RuntimeFailure("truncated artifact file");
}

inline void write_u8(std::ostream& out, std::uint8_t v) { write_bytes(out, &v, 1); }
inline void write_u32(std::ostream& out, std::uint32_t v) { write_bytes(out, &v, 4); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_bytes(out, &v, 8); }
inline void write_f64(std::ostream& out, double v) { write_bytes(out, &v, 8); }

inline std::uint8_t read_u8(std::istream& in) { std::uint8_t v; read_bytes(in, &v, 1); return v; }
inline std::uint32_t read_u32(std::istream& in) { std::uint32_t v; read_bytes(in, &v, 4); return v; }
inline std::uint64_t read_u64(std::istream& in) { std::uint64_t v; read_bytes(in, &v, 8); return v; }
inline double read_f64(std::istream& in) { double v; read_bytes(in, &v, 8); return v; }

inline void write_magic(std::ostream& out, const char tag[8]) { write_bytes(out, tag, 8); }

inline void expect_magic(std::istream& in, const char tag[8], const char* what) {
    char got[8];
    in.read(got, 8);
    if (in.gcount() != 8 || std::memcmp(got, tag, 8) != 0) {
        throw RuntimeFailure(std::string("bad ") + what + " file: wrong magic");
    }
}

inline void write_vec(std::ostream& out, const Vec& v) {
    write_u64(out, static_cast<std::uint64_t>(v.size()));
    if (v.size() > 0) write_bytes(out, v.data(), static_cast<std::size_t>(v.size()) * 8);
}

inline Vec read_vec(std::istream& in) {
    const auto n = read_u64(in);
    if (n > (1ULL << 32)) throw RuntimeFailure("implausible vector length in artifact");
    Vec v(static_cast<Eigen::Index>(n));
    if (n > 0) read_bytes(in, v.data(), static_cast<std::size_t>(n) * 8);
    return v;
}

inline void write_mat(std::ostream& out, const Mat& m) {
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
    if (m.size() > 0) write_bytes(out, m.data(), static_cast<std::size_t>(m.size()) * 8);
}

inline Mat read_mat(std::istream& in) {
    const auto r = read_u64(in);
    const auto c = read_u64(in);
    if (r > (1ULL << 24) || c > (1ULL << 24)) throw RuntimeFailure("implausible matrix shape in artifact");
    Mat m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    if (m.size() > 0) read_bytes(in, m.data(), static_cast<std::size_t>(m.size()) * 8);
    return m;
}

inline void write_u32_list(std::ostream& out, const std::vector<std::uint32_t>& xs) {
    write_u64(out, xs.size());
    if (!xs.empty()) write_bytes(out, xs.data(), xs.size() * 4);
}

inline std::vector<std::uint32_t> read_u32_list(std::istream& in) {
    const auto n = read_u64(in);
    if (n > (1ULL << 32)) throw RuntimeFailure("implausible list length in artifact");
    std::vector<std::uint32_t> xs(n);
    if (n > 0) read_bytes(in, xs.data(), n * 4);
    return xs;
}

inline void write_f64_list(std::ostream& out, const std::vector<double>& xs) {
    write_u64(out, xs.size());
    if (!xs.empty()) write_bytes(out, xs.data(), xs.size() * 8);
}

inline std::vector<double> read_f64_list(std::istream& in) {
    const auto n = read_u64(in);
    if (n > (1ULL << 32)) throw RuntimeFailure("implausible list length in artifact");
    std::vector<double> xs(n);
    if (n > 0) read_bytes(in, xs.data(), n * 8);
    return xs;
}

}  // namespace dcsr::binio
