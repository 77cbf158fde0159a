#pragma once

#include <algorithm>
#include <fstream>
#include <string>

#include "mffm/core.hpp"

namespace mffm {

/// Writes one channel of a field as an 8-bit binary PGM (P5), min-max
/// normalized per frame. Qualitative inspection only.
inline void write_pgm(const std::string& path, const Field& f, int channel = 0) {
    if (channel < 0 || channel >= f.channels) throw dimension_error("write_pgm: channel out of range");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error("write_pgm: cannot open '" + path + "'");
    const double* src = f.channel(channel);
    const size_t n = f.plane();
    double lo = src[0], hi = src[0];
    for (size_t i = 0; i < n; ++i) {
        lo = std::min(lo, src[i]);
        hi = std::max(hi, src[i]);
    }
    const double scale = (hi > lo) ? 255.0 / (hi - lo) : 0.0;
    out << "P5\n" << f.width << " " << f.height << "\n255\n";
    for (size_t i = 0; i < n; ++i) {
        const unsigned char b = static_cast<unsigned char>(std::clamp((src[i] - lo) * scale, 0.0, 255.0));
        out.write(reinterpret_cast<const char*>(&b), 1);
    }
    if (!out) throw format_error("write_pgm: write failed for '" + path + "'");
}

}  // namespace mffm
