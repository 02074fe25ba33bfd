#pragma once

#include <fstream>

#include "cats/tensor.hpp"

namespace cats {

// Min-max normalization to 8-bit; a constant map becomes uniform mid-gray 128.
inline std::vector<std::uint8_t> normalize_to_bytes(const real* data, std::size_t n) {
    real lo = data[0], hi = data[0];
    for (std::size_t i = 1; i < n; ++i) {
        lo = std::min(lo, data[i]);
        hi = std::max(hi, data[i]);
    }
    std::vector<std::uint8_t> bytes(n);
    if (lo == hi) {
        std::fill(bytes.begin(), bytes.end(), std::uint8_t(128));
        return bytes;
    }
    const real scale = real(255) / (hi - lo);
    for (std::size_t i = 0; i < n; ++i)
        bytes[i] = std::uint8_t(std::lround(double((data[i] - lo) * scale)));
    return bytes;
}

// Binary PGM: "P5\n<w> <h>\n255\n" followed by exactly w*h bytes.
inline void write_pgm(const std::string& path, const std::uint8_t* bytes, std::size_t h,
                      std::size_t w) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("write_pgm: cannot open " + path);
    out << "P5\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes), std::streamsize(h * w));
    if (!out) throw IoError("write_pgm: write failed for " + path);
}

// One matrix (or matrix slice) as a normalized PGM image.
inline void write_matrix_pgm(const std::string& path, const real* data, std::size_t h,
                             std::size_t w) {
    const auto bytes = normalize_to_bytes(data, h * w);
    write_pgm(path, bytes.data(), h, w);
}

}  // namespace cats
