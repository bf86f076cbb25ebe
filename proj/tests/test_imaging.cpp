#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "dispfuse/imaging.hpp"
#include "dispfuse/rng.hpp"

using namespace dispfuse;
using namespace dispfuse::img;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("dispfuse_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace

TEST_CASE("PGM: 2x2 pixel values map directly to floats") {
    TempDir tmp;
    std::string p = tmp.file("a.pgm");
    {
        std::ofstream out(p, std::ios::binary);
        out << "P5\n2 2\n255\n";
        unsigned char bytes[4] = {0, 255, 128, 64};
        out.write(reinterpret_cast<char*>(bytes), 4);
    }
    IntensityImage im = load_pgm(p);
    REQUIRE(im.h == 2);
    REQUIRE(im.w == 2);
    CHECK(im.at(0, 0) == 0.0);
    CHECK(im.at(0, 1) == 255.0);
    CHECK(im.at(1, 0) == 128.0);
    CHECK(im.at(1, 1) == 64.0);
}

TEST_CASE("PGM and PNG: save/load round trip is exact after 8-bit quantization") {
    TempDir tmp;
    Rng rng(4);
    IntensityImage im;
    im.h = 16;
    im.w = 16;
    im.range = ValueRange::raw255;
    im.px.resize(256);
    for (auto& v : im.px) v = static_cast<double>(rng.below(256));

    for (const char* name : {"r.pgm", "r.png"}) {
        std::string p = tmp.file(name);
        save_image(p, im);
        IntensityImage back = load_image(p);
        REQUIRE(back.h == im.h);
        REQUIRE(back.w == im.w);
        for (size_t i = 0; i < im.px.size(); ++i) CHECK(back.px[i] == im.px[i]);
    }
}

TEST_CASE("PGM: truncated file raises a format error with byte offset") {
    TempDir tmp;
    std::string p = tmp.file("t.pgm");
    {
        std::ofstream out(p, std::ios::binary);
        out << "P5\n4 4\n255\n";
        unsigned char bytes[3] = {1, 2, 3};
        out.write(reinterpret_cast<char*>(bytes), 3);
    }
    CHECK_THROWS_AS(load_pgm(p), FormatError);
    try {
        load_pgm(p);
    } catch (const FormatError& e) {
        CHECK(e.offset >= 0);
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
}

TEST_CASE("PGM: bad magic names the problem") {
    TempDir tmp;
    std::string p = tmp.file("m.pgm");
    std::ofstream(p) << "P6\n1 1\n255\nx";
    CHECK_THROWS_AS(load_pgm(p), FormatError);
}

TEST_CASE("PFM: 1x1 value and float-exact round trip") {
    TempDir tmp;
    DisparityMap m;
    m.h = 1;
    m.w = 1;
    m.d = {3.5};
    std::string p = tmp.file("a.pfm");
    save_pfm(p, m);
    DisparityMap back = load_pfm(p);
    REQUIRE(back.h == 1);
    REQUIRE(back.w == 1);
    CHECK(back.d[0] == 3.5);

    Rng rng(9);
    DisparityMap r;
    r.h = 8;
    r.w = 8;
    r.d.resize(64);
    for (auto& v : r.d) v = static_cast<double>(static_cast<float>(rng.normal(5.0, 2.0)));
    std::string p2 = tmp.file("b.pfm");
    save_pfm(p2, r);
    DisparityMap back2 = load_pfm(p2);
    for (size_t i = 0; i < r.d.size(); ++i) CHECK(back2.d[i] == r.d[i]);
}

TEST_CASE("PFM: little- and big-endian encodings of the same data load equal") {
    // Independent writer: emit both byte orders by hand.
    TempDir tmp;
    const float vals[4] = {1.25f, -2.5f, 1e-3f, 77.0f}; // 2x2, exact in f32
    auto write = [&](const std::string& path, bool little) {
        std::ofstream out(path, std::ios::binary);
        out << "Pf\n2 2\n" << (little ? "-1.0" : "1.0") << "\n";
        for (int i = 0; i < 4; ++i) {
            unsigned char b[4];
            std::memcpy(b, &vals[i], 4);
            // Host is assumed little-endian x86 in this suite.
            if (!little) std::swap(b[0], b[3]), std::swap(b[1], b[2]);
            out.write(reinterpret_cast<char*>(b), 4);
        }
    };
    std::string pl = tmp.file("le.pfm"), pb = tmp.file("be.pfm");
    write(pl, true);
    write(pb, false);
    DisparityMap a = load_pfm(pl), b = load_pfm(pb);
    REQUIRE(a.d.size() == b.d.size());
    for (size_t i = 0; i < a.d.size(); ++i) CHECK(a.d[i] == b.d[i]);
}

TEST_CASE("PFM: color 'PF' header is rejected as unsupported") {
    TempDir tmp;
    std::string p = tmp.file("c.pfm");
    std::ofstream(p, std::ios::binary) << "PF\n1 1\n-1.0\n############";
    CHECK_THROWS_AS(load_pfm(p), FormatError);
}

TEST_CASE("sobel: flat field has zero gradient everywhere") {
    IntensityImage im;
    im.h = 5;
    im.w = 7;
    im.px.assign(35, 42.0);
    GradientImage g = sobel(im);
    for (size_t i = 0; i < g.mag.size(); ++i) {
        CHECK(g.gx[i] == 0.0);
        CHECK(g.gy[i] == 0.0);
        CHECK(g.mag[i] == 0.0);
    }
}

TEST_CASE("sobel: vertical step edge gives 4*255 on adjacent columns") {
    // Hand-applied 3x3 kernel on a 0|255 step with replicate borders:
    // both columns touching the edge see (255+2*255+255) - 0 = 1020.
    IntensityImage im;
    im.h = 6;
    im.w = 8;
    im.px.resize(48);
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 8; ++x) im.at(y, x) = x < 4 ? 0.0 : 255.0;
    GradientImage g = sobel(im);
    for (int y = 0; y < 6; ++y) {
        for (int x = 0; x < 8; ++x) {
            double expect = (x == 3 || x == 4) ? 1020.0 : 0.0;
            CHECK(g.gx[static_cast<size_t>(y) * 8 + x] == expect);
            CHECK(g.gy[static_cast<size_t>(y) * 8 + x] == 0.0);
        }
    }
}

TEST_CASE("sobel: transpose swaps gx and gy") {
    Rng rng(31);
    IntensityImage im;
    im.h = 6;
    im.w = 9;
    im.px.resize(54);
    for (auto& v : im.px) v = rng.uniform(0, 255);
    IntensityImage imt;
    imt.h = im.w;
    imt.w = im.h;
    imt.px.resize(54);
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x) imt.at(x, y) = im.at(y, x);

    GradientImage g = sobel(im), gt = sobel(imt);
    for (int y = 0; y < im.h; ++y)
        for (int x = 0; x < im.w; ++x) {
            size_t i = static_cast<size_t>(y) * im.w + x;
            size_t j = static_cast<size_t>(x) * imt.w + y;
            CHECK(g.gx[i] == doctest::Approx(gt.gy[j]).epsilon(1e-12));
            CHECK(g.gy[i] == doctest::Approx(gt.gx[j]).epsilon(1e-12));
        }
}

TEST_CASE("sobel: linearity in the input") {
    Rng rng(77);
    IntensityImage im;
    im.h = 5;
    im.w = 5;
    im.px.resize(25);
    for (auto& v : im.px) v = rng.uniform(0, 255);
    IntensityImage im3 = im;
    for (auto& v : im3.px) v *= 3.0;
    GradientImage g = sobel(im), g3 = sobel(im3);
    for (size_t i = 0; i < g.mag.size(); ++i) {
        CHECK(g3.gx[i] == doctest::Approx(3.0 * g.gx[i]).epsilon(1e-12));
        CHECK(g3.mag[i] == doctest::Approx(3.0 * g.mag[i]).epsilon(1e-12));
    }
}

TEST_CASE("normalize endpoints") {
    IntensityImage im;
    im.h = 1;
    im.w = 3;
    im.px = {0.0, 255.0, 127.5};
    IntensityImage n = normalize(im);
    CHECK(n.px[0] == -1.0);
    CHECK(n.px[1] == 1.0);
    CHECK(n.px[2] == 0.0);
    CHECK(n.range == ValueRange::normalized);
}

TEST_CASE("pad_to_32: 375x1242 pads to 384x1248; exact multiples are a no-op") {
    std::vector<double> big(static_cast<size_t>(375) * 1242, 1.0);
    PaddedFrame f = pad_to_32(big, 375, 1242);
    CHECK(f.h == 384);
    CHECK(f.w == 1248);
    double mask_sum = 0, content_sum = 0;
    for (double v : f.mask) mask_sum += v;
    for (double v : f.content) content_sum += v;
    CHECK(mask_sum == static_cast<double>(375) * 1242);
    CHECK(content_sum == static_cast<double>(375) * 1242); // padded region holds exactly 0

    std::vector<double> fit(static_cast<size_t>(480) * 640, 2.0);
    PaddedFrame f2 = pad_to_32(fit, 480, 640);
    CHECK(f2.h == 480);
    CHECK(f2.w == 640);
    for (double v : f2.mask) CHECK(v == 1.0);
}
