#include "dispfuse/warp.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "dispfuse/threading.hpp"

namespace dispfuse::warp {

using ad::Tensor;

namespace {

struct SplatSaved {
    // Per target pixel, flattened [b,1,h,w]: renormalization state the
    // backward rule needs.
    std::vector<double> wsum;
    std::vector<double> recon;
    std::vector<char> covered;
    std::vector<double> dmax; // per sample
};

void check_pair(const Tensor& left, const Tensor& disp, const char* op) {
    const auto& ls = left.shape();
    const auto& ds = disp.shape();
    if (ls.size() != 4 || ds.size() != 4 || ls[1] != 1 || ds[1] != 1)
        throw ContractViolation(std::string(op) + ": expects [b,1,h,w] tensors");
    if (ls != ds) throw ConfigError(std::string(op) + ": left/disparity shape mismatch");
    if (left.dtype() != disp.dtype()) throw ConfigError(std::string(op) + ": mixed dtypes");
}

} // namespace

Reconstruction reconstruct_right(const Tensor& left, const Tensor& disp, const WarpConfig& cfg) {
    check_pair(left, disp, "reconstruct_right");
    const int b = left.dim(0), h = left.dim(2), w = left.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const double inv_h = 1.0 / static_cast<double>(h);

    Tensor image = Tensor::zeros(left.shape(), left.dtype());
    Tensor validity = Tensor::zeros(left.shape(), left.dtype());
    Tensor occl = Tensor::zeros(left.shape(), left.dtype());

    auto saved = std::make_shared<SplatSaved>();
    saved->wsum.assign(static_cast<size_t>(b) * hw, 0.0);
    saved->recon.assign(static_cast<size_t>(b) * hw, 0.0);
    saved->covered.assign(static_cast<size_t>(b) * hw, 0);
    saved->dmax.assign(static_cast<size_t>(b), 0.0);

    // Weights use exp(kappa*(d - dmax)/H): mathematically identical to
    // exp(kappa*d/H) after renormalization but overflow-safe for any kappa.
    for (int bi = 0; bi < b; ++bi) {
        double m = 0.0;
        for (std::int64_t i = 0; i < hw; ++i) m = std::max(m, disp.at(bi * hw + i));
        saved->dmax[static_cast<size_t>(bi)] = m;
    }

    parallel_for(static_cast<std::int64_t>(b) * h, static_cast<std::int64_t>(b) * hw * 64,
                 [&](std::int64_t row) {
        const int bi = static_cast<int>(row / h);
        const int y = static_cast<int>(row % h);
        const std::int64_t base = bi * hw + static_cast<std::int64_t>(y) * w;
        const double dmax = saved->dmax[static_cast<size_t>(bi)];
        std::vector<double> si(static_cast<size_t>(w), 0.0);
        std::vector<double> sw(static_cast<size_t>(w), 0.0);
        std::vector<double> scov(static_cast<size_t>(w), 0.0);
        for (int x = 0; x < w; ++x) {
            const double d = disp.at(base + x);
            const double intensity = left.at(base + x);
            const double t = static_cast<double>(x) - d;
            const double fl = std::floor(t);
            const double a = t - fl;
            const double e = std::exp(cfg.kappa * (d - dmax) * inv_h);
            const int f = static_cast<int>(fl);
            if (f >= 0 && f < w) {
                si[static_cast<size_t>(f)] += e * (1.0 - a) * intensity;
                sw[static_cast<size_t>(f)] += e * (1.0 - a);
                scov[static_cast<size_t>(f)] += (1.0 - a);
            }
            if (a > 0.0 && f + 1 >= 0 && f + 1 < w) {
                si[static_cast<size_t>(f + 1)] += e * a * intensity;
                sw[static_cast<size_t>(f + 1)] += e * a;
                scov[static_cast<size_t>(f + 1)] += a;
            }
        }
        for (int x = 0; x < w; ++x) {
            const bool cov = scov[static_cast<size_t>(x)] > cfg.eps;
            const double r = cov ? si[static_cast<size_t>(x)] / sw[static_cast<size_t>(x)] : 0.0;
            image.node->set(base + x, r);
            validity.node->set(base + x, std::min(1.0, scov[static_cast<size_t>(x)]));
            occl.node->set(base + x, cov ? 0.0 : 1.0);
            saved->wsum[static_cast<size_t>(base + x)] = sw[static_cast<size_t>(x)];
            saved->recon[static_cast<size_t>(base + x)] = r;
            saved->covered[static_cast<size_t>(base + x)] = cov ? 1 : 0;
        }
    });

    const double kappa = cfg.kappa;
    ad::attach_graph(
        image, "splat", {left, disp},
        [left, disp, saved, kappa, b, h, w, hw, inv_h](
            const Tensor&, const Tensor& gout, const std::vector<char>& need,
            std::vector<Tensor>& gs) {
            Tensor gleft = Tensor::zeros(left.shape(), left.dtype());
            Tensor gdisp = Tensor::zeros(disp.shape(), disp.dtype());
            for (int bi = 0; bi < b; ++bi) {
                const double dmax = saved->dmax[static_cast<size_t>(bi)];
                for (int y = 0; y < h; ++y) {
                    const std::int64_t base = bi * hw + static_cast<std::int64_t>(y) * w;
                    for (int x = 0; x < w; ++x) {
                        const double d = disp.at(base + x);
                        const double intensity = left.at(base + x);
                        const double t = static_cast<double>(x) - d;
                        const double fl = std::floor(t);
                        const double a = t - fl;
                        const double e = std::exp(kappa * (d - dmax) * inv_h);
                        const double de = kappa * inv_h * e;
                        const int f = static_cast<int>(fl);
                        double gl = 0.0, gd = 0.0;
                        // Weight derivatives w.r.t. d: the bilinear split
                        // shifts mass (da/dd = -1) while the z-buffer factor
                        // rescales it.
                        if (f >= 0 && f < w && saved->covered[static_cast<size_t>(base + f)]) {
                            const double g = gout.at(base + f);
                            const double sw = saved->wsum[static_cast<size_t>(base + f)];
                            const double rec = saved->recon[static_cast<size_t>(base + f)];
                            const double wv = e * (1.0 - a);
                            const double dw = de * (1.0 - a) + e;
                            gl += g * wv / sw;
                            gd += g * (intensity - rec) * dw / sw;
                        }
                        if (f + 1 >= 0 && f + 1 < w &&
                            saved->covered[static_cast<size_t>(base + f + 1)]) {
                            const double g = gout.at(base + f + 1);
                            const double sw = saved->wsum[static_cast<size_t>(base + f + 1)];
                            const double rec = saved->recon[static_cast<size_t>(base + f + 1)];
                            const double wv = e * a;
                            const double dw = de * a - e;
                            gl += g * wv / sw;
                            gd += g * (intensity - rec) * dw / sw;
                        }
                        gleft.node->set(base + x, gl);
                        gdisp.node->set(base + x, gd);
                    }
                }
            }
            if (need[0]) gs[0] = gleft;
            if (need[1]) gs[1] = gdisp;
        });

    return Reconstruction{image, validity, occl};
}

Reconstruction reconstruct_right_backward_sampling(const Tensor& left, const Tensor& disp) {
    check_pair(left, disp, "reconstruct_right_backward_sampling");
    const int b = left.dim(0), h = left.dim(2), w = left.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;

    Tensor image = Tensor::zeros(left.shape(), left.dtype());
    Tensor validity = Tensor::zeros(left.shape(), left.dtype());
    Tensor occl = Tensor::zeros(left.shape(), left.dtype());

    auto sample_at = [&](std::int64_t base, int x, double& out, int& f, double& a) -> bool {
        const double s = static_cast<double>(x) + disp.at(base + x);
        if (s < 0.0 || s > static_cast<double>(w - 1)) return false;
        f = static_cast<int>(std::floor(s));
        if (f >= w - 1) f = w - 2;
        a = s - f;
        out = (1.0 - a) * left.at(base + f) + a * left.at(base + f + 1);
        return true;
    };

    for (int bi = 0; bi < b; ++bi)
        for (int y = 0; y < h; ++y) {
            const std::int64_t base = bi * hw + static_cast<std::int64_t>(y) * w;
            for (int x = 0; x < w; ++x) {
                double v;
                int f;
                double a;
                if (sample_at(base, x, v, f, a)) {
                    image.node->set(base + x, v);
                    validity.node->set(base + x, 1.0);
                } else {
                    occl.node->set(base + x, 1.0);
                }
            }
        }

    ad::attach_graph(
        image, "bilinear_sample_x", {left, disp},
        [left, disp, b, h, w, hw](const Tensor&, const Tensor& gout,
                                  const std::vector<char>& need, std::vector<Tensor>& gs) {
            Tensor gleft = Tensor::zeros(left.shape(), left.dtype());
            Tensor gdisp = Tensor::zeros(disp.shape(), disp.dtype());
            for (int bi = 0; bi < b; ++bi)
                for (int y = 0; y < h; ++y) {
                    const std::int64_t base = bi * hw + static_cast<std::int64_t>(y) * w;
                    for (int x = 0; x < w; ++x) {
                        const double s = static_cast<double>(x) + disp.at(base + x);
                        if (s < 0.0 || s > static_cast<double>(w - 1)) continue;
                        int f = static_cast<int>(std::floor(s));
                        if (f >= w - 1) f = w - 2;
                        const double a = s - f;
                        const double g = gout.at(base + x);
                        gleft.node->set(base + f, gleft.at(base + f) + (1.0 - a) * g);
                        gleft.node->set(base + f + 1, gleft.at(base + f + 1) + a * g);
                        gdisp.node->set(base + x,
                                        (left.at(base + f + 1) - left.at(base + f)) * g);
                    }
                }
            if (need[0]) gs[0] = gleft;
            if (need[1]) gs[1] = gdisp;
        });

    return Reconstruction{image, validity, occl};
}

Tensor photometric_region_mask(const Reconstruction& recon, const Tensor& frame_mask,
                               double eps) {
    if (recon.validity.shape() != frame_mask.shape())
        throw ConfigError("photometric_region_mask: mask shape mismatch");
    ad::NoGradGuard ng;
    return ad::mul(ad::greater_than(recon.validity, eps),
                   ad::greater_than(frame_mask, 0.5));
}

} // namespace dispfuse::warp
