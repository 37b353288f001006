#pragma once

// run manifests: per-command provenance records with content hashes

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "cellrefine/errors.hpp"
#include "cellrefine/hash.hpp"

namespace cellrefine {

inline std::uint64_t file_fnv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot hash " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 15];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
        if (in.eof()) break;
    }
    return h;
}

inline std::string file_digest(const std::string& path) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t v = file_fnv(path);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace cellrefine
