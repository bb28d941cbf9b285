#pragma once
// Little-endian integer packing shared by the binary file formats.

#include <cstdint>
#include <string>
#include <string_view>

namespace selfcal::detail {

template <class UInt>
void put_le(std::string& out, UInt v) {
    for (std::size_t i = 0; i < sizeof(UInt); ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

template <class UInt>
UInt get_le(std::string_view in, std::size_t at) {
    UInt v = 0;
    for (std::size_t i = sizeof(UInt); i-- > 0;) {
        v = static_cast<UInt>((v << 8) | static_cast<unsigned char>(in[at + i]));
    }
    return v;
}

}  // namespace selfcal::detail
