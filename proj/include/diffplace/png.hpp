#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffplace/image.hpp"

namespace diffplace {
namespace pngio {

inline void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

inline std::uint32_t get_u32_be(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

inline void write_chunk(std::vector<std::uint8_t>& out, const char type[4],
                        const std::vector<std::uint8_t>& payload) {
    put_u32_be(out, std::uint32_t(payload.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const std::uint32_t crc =
        std::uint32_t(::crc32(0, out.data() + start, uInt(out.size() - start)));
    put_u32_be(out, crc);
}

inline std::vector<std::uint8_t> zlib_compress(const std::uint8_t* data, std::size_t n) {
    uLongf bound = ::compressBound(uLong(n));
    std::vector<std::uint8_t> out(bound);
    if (::compress2(out.data(), &bound, data, uLong(n), 6) != Z_OK)
        throw std::runtime_error("png: deflate failed");
    out.resize(bound);
    return out;
}

inline std::vector<std::uint8_t> zlib_decompress(const std::uint8_t* data, std::size_t n,
                                                 std::size_t expected) {
    std::vector<std::uint8_t> out(expected);
    uLongf len = uLongf(expected);
    const int rc = ::uncompress(out.data(), &len, data, uLong(n));
    if (rc != Z_OK || len != expected) throw std::runtime_error("png: inflate failed");
    return out;
}

}  // namespace pngio

inline std::vector<std::uint8_t> encode_png(const ImageU8& img) {
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    std::vector<std::uint8_t> out(sig, sig + 8);

    std::vector<std::uint8_t> ihdr;
    pngio::put_u32_be(ihdr, std::uint32_t(img.w));
    pngio::put_u32_be(ihdr, std::uint32_t(img.h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type: truecolor
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    pngio::write_chunk(out, "IHDR", ihdr);

    // Raw scanlines with filter byte 0 (None).
    const std::size_t stride = std::size_t(img.w) * 3;
    std::vector<std::uint8_t> raw((stride + 1) * std::size_t(img.h));
    for (int y = 0; y < img.h; ++y) {
        raw[(stride + 1) * std::size_t(y)] = 0;
        std::memcpy(raw.data() + (stride + 1) * std::size_t(y) + 1, img.at(0, y), stride);
    }
    pngio::write_chunk(out, "IDAT", pngio::zlib_compress(raw.data(), raw.size()));
    pngio::write_chunk(out, "IEND", {});
    return out;
}

inline void write_png(const std::string& path, const ImageU8& img) {
    const std::vector<std::uint8_t> bytes = encode_png(img);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_png: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("write_png: write failed for " + path);
}

// Decodes non-interlaced 8-bit PNGs (gray, gray+alpha, RGB, RGBA, palette);
// alpha is dropped, gray is broadcast to RGB.
inline ImageU8 decode_png(const std::vector<std::uint8_t>& bytes) {
    static const std::uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw std::runtime_error("png: bad signature");

    int w = 0, h = 0, bit_depth = 0, color_type = 0, interlace = 0;
    std::vector<std::uint8_t> idat;
    std::vector<std::uint8_t> palette;  // rgb triples
    std::size_t pos = 8;
    bool seen_end = false;
    while (pos + 8 <= bytes.size() && !seen_end) {
        const std::uint32_t len = pngio::get_u32_be(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw std::runtime_error("png: truncated chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw std::runtime_error("png: bad IHDR");
            w = int(pngio::get_u32_be(payload));
            h = int(pngio::get_u32_be(payload + 4));
            bit_depth = payload[8];
            color_type = payload[9];
            interlace = payload[12];
        } else if (std::memcmp(type, "PLTE", 4) == 0) {
            palette.assign(payload, payload + len);
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            seen_end = true;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0 || idat.empty()) throw std::runtime_error("png: missing image data");
    if (bit_depth != 8) throw std::runtime_error("png: only 8-bit depth supported");
    if (interlace != 0) throw std::runtime_error("png: interlaced images not supported");

    int channels = 0;
    switch (color_type) {
        case 0: channels = 1; break;  // gray
        case 2: channels = 3; break;  // rgb
        case 3: channels = 1; break;  // palette index
        case 4: channels = 2; break;  // gray + alpha
        case 6: channels = 4; break;  // rgba
        default: throw std::runtime_error("png: unsupported color type");
    }

    const std::size_t stride = std::size_t(w) * channels;
    const std::vector<std::uint8_t> raw =
        pngio::zlib_decompress(idat.data(), idat.size(), (stride + 1) * std::size_t(h));

    // Undo scanline filters in place.
    std::vector<std::uint8_t> img_data(stride * std::size_t(h));
    const int bpp = channels;
    for (int y = 0; y < h; ++y) {
        const std::uint8_t filter = raw[(stride + 1) * std::size_t(y)];
        const std::uint8_t* src = raw.data() + (stride + 1) * std::size_t(y) + 1;
        std::uint8_t* cur = img_data.data() + stride * std::size_t(y);
        const std::uint8_t* up = y > 0 ? img_data.data() + stride * std::size_t(y - 1) : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= std::size_t(bpp) ? cur[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= std::size_t(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: {
                    const int p = a + b - c;
                    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw std::runtime_error("png: bad filter type");
            }
            cur[x] = std::uint8_t(v & 0xff);
        }
    }

    ImageU8 out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::uint8_t* p = img_data.data() + stride * std::size_t(y) + std::size_t(x) * channels;
            std::uint8_t* dst = out.at(x, y);
            switch (color_type) {
                case 0:
                case 4: dst[0] = dst[1] = dst[2] = p[0]; break;
                case 2:
                case 6: dst[0] = p[0]; dst[1] = p[1]; dst[2] = p[2]; break;
                case 3: {
                    const std::size_t idx = std::size_t(p[0]) * 3;
                    if (idx + 2 >= palette.size()) throw std::runtime_error("png: palette overflow");
                    dst[0] = palette[idx];
                    dst[1] = palette[idx + 1];
                    dst[2] = palette[idx + 2];
                    break;
                }
            }
        }
    return out;
}

inline ImageU8 read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_png: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return decode_png(bytes);
}

}  // namespace diffplace
