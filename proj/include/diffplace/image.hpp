#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace diffplace {

// Interleaved 8-bit RGB image, row-major.
struct ImageU8 {
    int w = 0;
    int h = 0;
    std::vector<std::uint8_t> px;  // size w * h * 3

    ImageU8() = default;
    ImageU8(int width, int height) : w(width), h(height), px(std::size_t(width) * height * 3, 0) {}

    std::uint8_t* at(int x, int y) { return px.data() + 3 * (std::size_t(y) * w + x); }
    const std::uint8_t* at(int x, int y) const { return px.data() + 3 * (std::size_t(y) * w + x); }
};

constexpr int kPatchSize = 32;

// One 32x32 RGB patch with float pixels in [0, 1], channel-interleaved.
struct Patch {
    std::vector<float> px;  // 32 * 32 * 3

    Patch() : px(std::size_t(kPatchSize) * kPatchSize * 3, 0.0f) {}
    float& at(int x, int y, int c) { return px[3 * (std::size_t(y) * kPatchSize + x) + c]; }
    float at(int x, int y, int c) const { return px[3 * (std::size_t(y) * kPatchSize + x) + c]; }
};

// Bilinear sample of a sub-rectangle of `src` onto a dst_w x dst_h grid with
// center-aligned coordinates, so an identity-size resize is an exact copy.
inline void bilinear_resize_rect(const ImageU8& src, int x0, int y0, int rw, int rh, int dst_w,
                                 int dst_h, float* out /* dst_w*dst_h*3 */) {
    const double sx = double(rw) / double(dst_w);
    const double sy = double(rh) / double(dst_h);
    for (int y = 0; y < dst_h; ++y) {
        const double fy = (double(y) + 0.5) * sy - 0.5;
        const double fy_cl = std::min(std::max(fy, 0.0), double(rh - 1));
        const int yi = std::min(int(fy_cl), rh - 2 >= 0 ? rh - 2 : 0);
        const double wy = rh > 1 ? fy_cl - double(yi) : 0.0;
        for (int x = 0; x < dst_w; ++x) {
            const double fx = (double(x) + 0.5) * sx - 0.5;
            const double fx_cl = std::min(std::max(fx, 0.0), double(rw - 1));
            const int xi = std::min(int(fx_cl), rw - 2 >= 0 ? rw - 2 : 0);
            const double wx = rw > 1 ? fx_cl - double(xi) : 0.0;
            const std::uint8_t* p00 = src.at(x0 + xi, y0 + yi);
            const std::uint8_t* p10 = src.at(x0 + std::min(xi + 1, rw - 1), y0 + yi);
            const std::uint8_t* p01 = src.at(x0 + xi, y0 + std::min(yi + 1, rh - 1));
            const std::uint8_t* p11 =
                src.at(x0 + std::min(xi + 1, rw - 1), y0 + std::min(yi + 1, rh - 1));
            float* dst = out + 3 * (std::size_t(y) * dst_w + x);
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - wy) * ((1 - wx) * p00[c] + wx * p10[c]) +
                                 wy * ((1 - wx) * p01[c] + wx * p11[c]);
                dst[c] = float(v / 255.0);
            }
        }
    }
}

// Splits the image into an n x n tiling in row-major order and resizes each
// tile to 32x32. When the image is exactly 32n x 32n the tiles are exact
// crops with no resampling.
inline std::vector<Patch> patchify(const ImageU8& img, int n) {
    if (n < 1) throw std::invalid_argument("patchify: n must be >= 1");
    if (img.w < n || img.h < n) throw std::invalid_argument("patchify: image smaller than grid");
    std::vector<Patch> patches(std::size_t(n) * n);
    for (int i = 0; i < n; ++i) {
        const int y0 = int(std::int64_t(i) * img.h / n);
        const int y1 = int(std::int64_t(i + 1) * img.h / n);
        for (int j = 0; j < n; ++j) {
            const int x0 = int(std::int64_t(j) * img.w / n);
            const int x1 = int(std::int64_t(j + 1) * img.w / n);
            Patch& p = patches[std::size_t(i) * n + j];
            bilinear_resize_rect(img, x0, y0, x1 - x0, y1 - y0, kPatchSize, kPatchSize,
                                 p.px.data());
        }
    }
    return patches;
}

// Center crop to the largest contained square.
inline ImageU8 center_crop_square(const ImageU8& img) {
    const int side = std::min(img.w, img.h);
    const int x0 = (img.w - side) / 2;
    const int y0 = (img.h - side) / 2;
    ImageU8 out(side, side);
    for (int y = 0; y < side; ++y)
        std::copy(img.at(x0, y0 + y), img.at(x0, y0 + y) + std::size_t(side) * 3, out.at(0, y));
    return out;
}

}  // namespace diffplace
