#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "ct/tensor.hpp"

namespace ct::metrics {

// PSNR of identical inputs returns this sentinel.
inline constexpr double kPsnrInf = std::numeric_limits<double>::infinity();

// Mean local SSIM over luminance; 11-tap Gaussian window (sigma 1.5),
// K1=0.01, K2=0.03, dynamic range 1. Inputs are [3,H,W] or [H,W] in [0,1].
double ssim(const Tensor& a, const Tensor& b);

// Mean of the SSIM map restricted to windows whose center lies in the mask.
double ssim_masked(const Tensor& a, const Tensor& b, const Tensor& mask);

// 10*log10(1/MSE) for unit-range inputs; identical inputs -> kPsnrInf.
double psnr(const Tensor& a, const Tensor& b);

// | motion(gen) - motion(ref) | where motion(v) is the mean absolute
// consecutive-frame difference. Needs at least two frames.
double flicker(const std::vector<Tensor>& generated, const std::vector<Tensor>& reference);
double motion_magnitude(const std::vector<Tensor>& frames);

// Frechet distance between Gaussian fits of two feature sets (rows =
// observations). Needs >= 2 rows per side.
double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b);

using FeatureExtractor = std::function<std::vector<double>(const Tensor& frame)>;

// Per-frame features through `extractor`, then the Frechet distance.
double feature_distance(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                        const FeatureExtractor& extractor);

// Symmetric-matrix eigendecomposition (cyclic Jacobi); exposed for tests.
void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs);

}  // namespace ct::metrics
