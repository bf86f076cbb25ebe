#pragma once

#include <string>
#include <vector>

#include "dispfuse/errors.hpp"

namespace dispfuse::img {

enum class ValueRange { raw255, normalized };

/// Single-channel intensity image. `raw255` pixels live in [0,255],
/// `normalized` in [-1,1].
struct IntensityImage {
    int h = 0, w = 0;
    std::vector<double> px;
    ValueRange range = ValueRange::raw255;

    double at(int y, int x) const { return px[static_cast<size_t>(y) * w + x]; }
    double& at(int y, int x) { return px[static_cast<size_t>(y) * w + x]; }
};

/// Sobel responses and their Euclidean magnitude.
struct GradientImage {
    int h = 0, w = 0;
    std::vector<double> gx, gy, mag;
};

/// Left-view disparity in pixels of horizontal shift.
struct DisparityMap {
    int h = 0, w = 0;
    std::vector<double> d;

    double at(int y, int x) const { return d[static_cast<size_t>(y) * w + x]; }
    double& at(int y, int x) { return d[static_cast<size_t>(y) * w + x]; }
};

/// Content padded to 32-multiples with a {0,1} validity mask
/// (1 on original pixels, 0 on the zero-filled border).
struct PaddedFrame {
    int h = 0, w = 0;         // padded extents
    int orig_h = 0, orig_w = 0;
    std::vector<double> content;
    std::vector<double> mask;
};

// ---- file I/O -----------------------------------------------------------------

/// 8-bit grayscale PGM (P5) or PNG, selected by file extension.
IntensityImage load_image(const std::string& path);
void save_image(const std::string& path, const IntensityImage& im);

IntensityImage load_pgm(const std::string& path);
void save_pgm(const std::string& path, const IntensityImage& im);
IntensityImage load_png(const std::string& path);
void save_png_gray(const std::string& path, const IntensityImage& im);
/// Interleaved 8-bit RGB, for colorized visualizations.
void save_png_rgb(const std::string& path, int h, int w,
                  const std::vector<unsigned char>& rgb);

/// PFM "Pf" single channel; scale sign encodes endianness, rows bottom-to-top.
DisparityMap load_pfm(const std::string& path);
void save_pfm(const std::string& path, const DisparityMap& m);

// ---- processing ------------------------------------------------------------------

/// Standard 3x3 Sobel with replicate borders.
GradientImage sobel(const IntensityImage& im);

/// [0,255] -> [-1,1] via x/127.5 - 1.
IntensityImage normalize(const IntensityImage& im);

/// Pads row-major data of extents h x w with zeros to the smallest
/// 32-multiples, content at the top-left.
PaddedFrame pad_to_32(const std::vector<double>& data, int h, int w);

int round_up_32(int v);

} // namespace dispfuse::img
