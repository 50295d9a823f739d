#pragma once

#include <utility>
#include <vector>

#include "ct/nn.hpp"

namespace ct::atff {

using ag::Var;

struct AttentionConfig {
    int d_k = 32;
    int num_groups = 8;
};

struct FusionWeights {
    Tensor w_j, w_k;  // [H,W], sum to 1 elementwise
};

struct FusionWeightsVar {
    Var w_j, w_k;
};

// Picks two companion frames for frame i. Degenerate clips resolve to the
// only legal choices: N=1 -> (i,i); N=2 -> the other frame twice.
std::pair<int, int> sample_frame_pair(int i, int n, Rng& rng);

// Per-location channel dot products against z_j and z_k, softmaxed over the
// two candidates.
FusionWeights fusion_weights(const Tensor& z_i, const Tensor& z_j, const Tensor& z_k);
FusionWeightsVar fusion_weights(const Var& z_i, const Var& z_j, const Var& z_k);

// Projection weights of the cross-space attention, shared across frames.
struct CrossSpaceProj {
    Var w_q, w_k, w_v;  // [C,d_k]
    Var w_o;            // [d_k,C], zero-init so the block starts as identity
};

// Temporal fusion layer: score-weighted three-frame sum, group
// normalization, then cross-space attention with the current frame as
// queries and the fused frame as keys/values (residual).
struct AtffLayer {
    nn::GroupNorm norm;
    CrossSpaceProj proj;
    AttentionConfig cfg;
    int channels = 0;

    static AtffLayer make(nn::ParamStore& ps, const std::string& prefix, int channels,
                          const AttentionConfig& cfg, Rng& rng);

    // GroupNorm(w_j*z_j + z_i + w_k*z_k) with this layer's learnable affine.
    Var fuse(const Var& z_i, const Var& z_j, const Var& z_k, const FusionWeightsVar& w) const;
    // z_i + W_o(softmax(Q Kbar^T / sqrt(d_k)) Vbar)
    Var cross_space_attention(const Var& z_i, const Var& z_bar) const;

    // Full block over a clip; every frame fuses with a sampled pair.
    std::vector<Var> forward(const std::vector<Var>& frames, Rng& rng) const;
};

// Pure functional forms used by tests/oracles (no parameter store needed).
Var fuse_temporal(const Var& z_i, const Var& z_j, const Var& z_k, const FusionWeightsVar& w,
                  const Var& gamma, const Var& beta, int num_groups, double eps = 1e-6);
Var cross_space_attention(const Var& z_i, const Var& z_bar, const Var& w_q, const Var& w_k,
                          const Var& w_v, const Var& w_o, int d_k);

}  // namespace ct::atff
