#pragma once

// Little-endian scalar IO shared by the checkpoint and dataset formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "skiptune/errors.hpp"

namespace skiptune::binio {

template <class U>
void put_le(std::ostream& os, U value) {
    unsigned char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
    unsigned char bytes[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw IoError("unexpected end of file");
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
    return value;
}

inline void put_f64(std::ostream& os, double v) { put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

inline void put_i32(std::ostream& os, std::int32_t v) { put_le<std::uint32_t>(os, static_cast<std::uint32_t>(v)); }
inline std::int32_t get_i32(std::istream& is) { return static_cast<std::int32_t>(get_le<std::uint32_t>(is)); }

inline void put_string(std::ostream& os, const std::string& s) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t limit = 1 << 20) {
    const auto n = get_le<std::uint32_t>(is);
    if (n > limit) throw IoError("string field too long");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) throw IoError("unexpected end of file");
    return s;
}

}  // namespace skiptune::binio
