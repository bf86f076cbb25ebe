#pragma once

#include "dispfuse/tensor.hpp"

namespace dispfuse::warp {

/// Right-view image synthesized from the left image and a left-registered
/// disparity map. `image` is differentiable w.r.t. both inputs; `validity`
/// (bilinear coverage clamped to [0,1]) and `occlusion_mask` (1 where no
/// source pixel lands) are detached constants.
struct Reconstruction {
    ad::Tensor image;
    ad::Tensor validity;
    ad::Tensor occlusion_mask;
};

struct WarpConfig {
    /// Soft z-buffer sharpness: contributions are weighted by
    /// exp(kappa * d / H) so larger disparities (nearer surfaces) dominate.
    double kappa = 10.0;
    /// Coverage below this threshold counts as a hole.
    double eps = 1e-3;
};

/// Forward bilinear splatting: left pixel (x,y) deposits its intensity at
/// (x - d(x,y), y), accumulated with soft z-buffer weights and renormalized.
/// Inputs are [b,1,h,w]; out-of-frame targets are dropped.
Reconstruction reconstruct_right(const ad::Tensor& left, const ad::Tensor& disp,
                                 const WarpConfig& cfg = {});

/// Comparison variant: samples the left image at (x + d(x,y), y), treating
/// the map as if it were right-registered. Ignores occlusion ordering.
Reconstruction reconstruct_right_backward_sampling(const ad::Tensor& left,
                                                   const ad::Tensor& disp);

/// 1 where the reconstruction is covered and the frame mask is set.
ad::Tensor photometric_region_mask(const Reconstruction& recon, const ad::Tensor& frame_mask,
                                   double eps = 1e-3);

} // namespace dispfuse::warp
