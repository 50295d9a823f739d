#pragma once

#include <array>

#include "ct/nn.hpp"

namespace ct::amfe {

using ag::Var;

// Raw encoder features (finest to coarsest), their standardized forms at
// latent resolution, and the fused result.
struct GarmentPyramid {
    std::array<Tensor, 3> raw;
    std::array<Tensor, 3> standardized;
    Tensor fused;
};

struct FusionAlpha {
    Var raw_params;  // [3], unconstrained; initialized (0,0,1)
    std::array<double, 3> effective() const {
        return {raw_params->val.data[0], raw_params->val.data[1], raw_params->val.data[2]};
    }
};

// Standardizing transform: space-to-depth by 2^(3-level), 1x1 conv to the
// latent channel count, group normalization, SiLU.
struct Standardize {
    nn::Conv2d conv;  // 1x1
    nn::GroupNorm norm;
    int level = 0;

    static Standardize make(nn::ParamStore& ps, const std::string& prefix, int level,
                            int in_channels, int latent_channels, Rng& rng);
    Var operator()(const Var& f) const;
};

int stage_factor(int level);  // 2^(3-level) for level in {1,2,3}

// Functional form: alpha1*F1(f1) + alpha2*F2(f2) + alpha3*f3 where F1 is a
// 3x3 and F2 a 7x7 same-padding convolution.
Var adaptive_fuse(const Var& f1, const Var& f2, const Var& f3, const Var& alpha,
                  const nn::Conv2d& conv3, const nn::Conv2d& conv7);

// Three-level strided-conv autoencoder. The encoder exposes its per-level
// features for the multi-scale pyramid; the final latent is group-normalized
// (no affine) so its scale suits the diffusion process.
struct Autoencoder {
    nn::Conv2d e1a, e1b, e2a, e2b, e3a, e3b;
    nn::Conv2d d0, d1, d2, d3, d_out;
    int latent_channels = 4;

    static Autoencoder make(nn::ParamStore& ps, const std::string& prefix, int latent_channels,
                            Rng& rng);
    // returns {f1, f2, f3}; f3 is the latent
    std::array<Var, 3> encode_pyramid(const Var& image) const;
    Var encode(const Var& image) const { return encode_pyramid(image)[2]; }
    Var decode(const Var& latent) const;
};

// The full multi-scale garment feature module. At init alpha = (0,0,1) and
// fused output equals the raw encoder latent exactly.
struct AmfeModule {
    Standardize std1, std2, std3;
    nn::Conv2d conv3, conv7;
    FusionAlpha alpha;
    bool enabled = true;

    static AmfeModule make(nn::ParamStore& ps, const std::string& prefix, int f1_channels,
                           int f2_channels, int latent_channels, Rng& rng);
    // fused garment latent from an encoder pyramid {f1,f2,f3}
    Var forward(const std::array<Var, 3>& pyramid) const;
};

}  // namespace ct::amfe
