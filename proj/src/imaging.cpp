#include "dispfuse/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace dispfuse::img {

namespace {

bool has_suffix(const std::string& s, const std::string& suf) {
    if (s.size() < suf.size()) return false;
    std::string tail = s.substr(s.size() - suf.size());
    std::transform(tail.begin(), tail.end(), tail.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return tail == suf;
}

std::vector<char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    auto size = in.tellg();
    in.seekg(0);
    std::vector<char> buf(static_cast<size_t>(size));
    if (size > 0) in.read(buf.data(), size);
    if (!in) throw IoError("cannot read " + path);
    return buf;
}

/// Whitespace/comment-aware token scanner over a PNM/PFM header.
struct HeaderScanner {
    const std::vector<char>& buf;
    size_t pos = 0;

    void skip_space_and_comments(bool allow_comments) {
        while (pos < buf.size()) {
            char c = buf[pos];
            if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos;
            } else if (allow_comments && c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
    }

    std::string token(bool allow_comments, const char* what) {
        skip_space_and_comments(allow_comments);
        size_t start = pos;
        while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
        if (pos == start)
            throw FormatError(std::string("missing ") + what, static_cast<long long>(start));
        return std::string(buf.begin() + static_cast<long>(start),
                           buf.begin() + static_cast<long>(pos));
    }

    long parse_int(bool allow_comments, const char* what) {
        size_t at = pos;
        std::string t = token(allow_comments, what);
        try {
            size_t used = 0;
            long v = std::stol(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            throw FormatError(std::string("bad ") + what + " '" + t + "'",
                              static_cast<long long>(at));
        }
    }

    double parse_double(bool allow_comments, const char* what) {
        size_t at = pos;
        std::string t = token(allow_comments, what);
        try {
            size_t used = 0;
            double v = std::stod(t, &used);
            if (used != t.size()) throw std::invalid_argument(t);
            return v;
        } catch (const std::exception&) {
            throw FormatError(std::string("bad ") + what + " '" + t + "'",
                              static_cast<long long>(at));
        }
    }
};

} // namespace

// ---- PGM ---------------------------------------------------------------------------

IntensityImage load_pgm(const std::string& path) {
    std::vector<char> buf = read_file(path);
    HeaderScanner sc{buf};
    std::string magic = sc.token(true, "magic");
    if (magic != "P5") throw FormatError("not a P5 PGM (magic '" + magic + "')", 0);
    long w = sc.parse_int(true, "width");
    long h = sc.parse_int(true, "height");
    long maxval = sc.parse_int(true, "maxval");
    if (w < 1 || h < 1) throw FormatError("bad extents", static_cast<long long>(sc.pos));
    if (maxval < 1 || maxval > 255)
        throw FormatError("unsupported maxval " + std::to_string(maxval),
                          static_cast<long long>(sc.pos));
    // Exactly one whitespace byte separates header from raster.
    if (sc.pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[sc.pos])))
        throw FormatError("missing raster separator", static_cast<long long>(sc.pos));
    ++sc.pos;
    size_t need = static_cast<size_t>(w) * static_cast<size_t>(h);
    if (buf.size() - sc.pos < need)
        throw FormatError("truncated raster: need " + std::to_string(need) + " bytes, have " +
                              std::to_string(buf.size() - sc.pos),
                          static_cast<long long>(buf.size()));
    IntensityImage im;
    im.h = static_cast<int>(h);
    im.w = static_cast<int>(w);
    im.range = ValueRange::raw255;
    im.px.resize(need);
    for (size_t i = 0; i < need; ++i)
        im.px[i] = static_cast<double>(static_cast<unsigned char>(buf[sc.pos + i]));
    return im;
}

void save_pgm(const std::string& path, const IntensityImage& im) {
    if (im.range != ValueRange::raw255)
        throw ContractViolation("save_pgm expects raw [0,255] pixels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "P5\n" << im.w << " " << im.h << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(im.w));
    for (int y = 0; y < im.h; ++y) {
        for (int x = 0; x < im.w; ++x) {
            double v = std::lround(std::clamp(im.at(y, x), 0.0, 255.0));
            row[static_cast<size_t>(x)] = static_cast<unsigned char>(v);
        }
        out.write(reinterpret_cast<const char*>(row.data()), im.w);
    }
    if (!out) throw IoError("write failed: " + path);
}

// ---- PNG ---------------------------------------------------------------------------

IntensityImage load_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError("malformed PNG: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int depth = png_get_bit_depth(png, info);
    int color = png_get_color_type(png, info);
    // Fold everything down to 8-bit grayscale.
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (depth == 16) png_set_strip_16(png);
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
        color == PNG_COLOR_TYPE_PALETTE)
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);

    std::vector<unsigned char> raster(static_cast<size_t>(w) * h);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = raster.data() + static_cast<size_t>(y) * w;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    IntensityImage im;
    im.h = static_cast<int>(h);
    im.w = static_cast<int>(w);
    im.range = ValueRange::raw255;
    im.px.assign(raster.begin(), raster.end());
    return im;
}

namespace {

void write_png(const std::string& path, int h, int w, int color_type, int channels,
               const unsigned char* data) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("PNG write failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y)
        rows[static_cast<size_t>(y)] =
            const_cast<png_bytep>(data + static_cast<size_t>(y) * w * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

} // namespace

void save_png_gray(const std::string& path, const IntensityImage& im) {
    if (im.range != ValueRange::raw255)
        throw ContractViolation("save_png_gray expects raw [0,255] pixels");
    std::vector<unsigned char> data(static_cast<size_t>(im.h) * im.w);
    for (size_t i = 0; i < data.size(); ++i)
        data[i] = static_cast<unsigned char>(std::lround(std::clamp(im.px[i], 0.0, 255.0)));
    write_png(path, im.h, im.w, PNG_COLOR_TYPE_GRAY, 1, data.data());
}

void save_png_rgb(const std::string& path, int h, int w,
                  const std::vector<unsigned char>& rgb) {
    if (rgb.size() != static_cast<size_t>(h) * w * 3)
        throw ContractViolation("save_png_rgb: buffer size mismatch");
    write_png(path, h, w, PNG_COLOR_TYPE_RGB, 3, rgb.data());
}

IntensityImage load_image(const std::string& path) {
    if (has_suffix(path, ".png")) return load_png(path);
    return load_pgm(path);
}

void save_image(const std::string& path, const IntensityImage& im) {
    if (has_suffix(path, ".png"))
        save_png_gray(path, im);
    else
        save_pgm(path, im);
}

// ---- PFM ---------------------------------------------------------------------------

DisparityMap load_pfm(const std::string& path) {
    std::vector<char> buf = read_file(path);
    HeaderScanner sc{buf};
    std::string magic = sc.token(false, "magic");
    if (magic == "PF") throw FormatError("color PFM ('PF') is unsupported; expected 'Pf'", 0);
    if (magic != "Pf") throw FormatError("not a PFM (magic '" + magic + "')", 0);
    long w = sc.parse_int(false, "width");
    long h = sc.parse_int(false, "height");
    double scale = sc.parse_double(false, "scale");
    if (w < 1 || h < 1) throw FormatError("bad extents", static_cast<long long>(sc.pos));
    if (scale == 0.0) throw FormatError("zero scale", static_cast<long long>(sc.pos));
    if (sc.pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[sc.pos])))
        throw FormatError("missing raster separator", static_cast<long long>(sc.pos));
    ++sc.pos;
    size_t need = static_cast<size_t>(w) * static_cast<size_t>(h) * 4;
    if (buf.size() - sc.pos < need)
        throw FormatError("truncated raster", static_cast<long long>(buf.size()));

    const bool file_little = scale < 0.0;
    const bool host_little = std::endian::native == std::endian::little;
    DisparityMap m;
    m.h = static_cast<int>(h);
    m.w = static_cast<int>(w);
    m.d.resize(static_cast<size_t>(w) * h);
    // PFM rows run bottom-to-top.
    for (long y = 0; y < h; ++y) {
        const char* src = buf.data() + sc.pos + static_cast<size_t>(h - 1 - y) * w * 4;
        for (long x = 0; x < w; ++x) {
            unsigned char b4[4];
            std::memcpy(b4, src + x * 4, 4);
            if (file_little != host_little) std::swap(b4[0], b4[3]), std::swap(b4[1], b4[2]);
            float f;
            std::memcpy(&f, b4, 4);
            m.d[static_cast<size_t>(y) * w + x] = static_cast<double>(f);
        }
    }
    return m;
}

void save_pfm(const std::string& path, const DisparityMap& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    const bool host_little = std::endian::native == std::endian::little;
    out << "Pf\n" << m.w << " " << m.h << "\n" << (host_little ? "-1.0" : "1.0") << "\n";
    std::vector<char> row(static_cast<size_t>(m.w) * 4);
    for (int y = m.h - 1; y >= 0; --y) {
        for (int x = 0; x < m.w; ++x) {
            float f = static_cast<float>(m.at(y, x));
            std::memcpy(row.data() + static_cast<size_t>(x) * 4, &f, 4);
        }
        out.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw IoError("write failed: " + path);
}

// ---- processing ------------------------------------------------------------------------

GradientImage sobel(const IntensityImage& im) {
    if (im.h < 3 || im.w < 3) throw ContractViolation("sobel: image smaller than 3x3");
    GradientImage g;
    g.h = im.h;
    g.w = im.w;
    size_t n = static_cast<size_t>(im.h) * im.w;
    g.gx.resize(n);
    g.gy.resize(n);
    g.mag.resize(n);
    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    for (int y = 0; y < im.h; ++y) {
        for (int x = 0; x < im.w; ++x) {
            double p[3][3];
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    p[dy + 1][dx + 1] =
                        im.at(clampi(y + dy, 0, im.h - 1), clampi(x + dx, 0, im.w - 1));
            double gx = (p[0][2] + 2 * p[1][2] + p[2][2]) - (p[0][0] + 2 * p[1][0] + p[2][0]);
            double gy = (p[2][0] + 2 * p[2][1] + p[2][2]) - (p[0][0] + 2 * p[0][1] + p[0][2]);
            size_t i = static_cast<size_t>(y) * im.w + x;
            g.gx[i] = gx;
            g.gy[i] = gy;
            g.mag[i] = std::sqrt(gx * gx + gy * gy);
        }
    }
    return g;
}

IntensityImage normalize(const IntensityImage& im) {
    if (im.range == ValueRange::normalized) return im;
    IntensityImage out = im;
    out.range = ValueRange::normalized;
    for (double& v : out.px) v = v / 127.5 - 1.0;
    return out;
}

int round_up_32(int v) { return ((v + 31) / 32) * 32; }

PaddedFrame pad_to_32(const std::vector<double>& data, int h, int w) {
    if (static_cast<size_t>(h) * w != data.size())
        throw ContractViolation("pad_to_32: data size mismatch");
    PaddedFrame f;
    f.orig_h = h;
    f.orig_w = w;
    f.h = round_up_32(h);
    f.w = round_up_32(w);
    f.content.assign(static_cast<size_t>(f.h) * f.w, 0.0);
    f.mask.assign(static_cast<size_t>(f.h) * f.w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            f.content[static_cast<size_t>(y) * f.w + x] = data[static_cast<size_t>(y) * w + x];
            f.mask[static_cast<size_t>(y) * f.w + x] = 1.0;
        }
    return f;
}

} // namespace dispfuse::img
