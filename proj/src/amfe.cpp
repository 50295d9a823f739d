#include "ct/amfe.hpp"

namespace ct::amfe {

int stage_factor(int level) {
    if (level < 1 || level > 3) throw ValidationError("standardize: level must be in {1,2,3}");
    return 1 << (3 - level);
}

Standardize Standardize::make(nn::ParamStore& ps, const std::string& prefix, int level,
                              int in_channels, int latent_channels, Rng& rng) {
    Standardize s;
    s.level = level;
    int factor = stage_factor(level);
    int mixed_in = in_channels * factor * factor;
    s.conv = nn::Conv2d::make(ps, prefix + ".conv", mixed_in, latent_channels, 1, 1, 0, rng);
    s.norm = nn::GroupNorm::make(ps, prefix + ".gn", latent_channels,
                                 nn::default_groups(latent_channels), 1e-8);
    return s;
}

Var Standardize::operator()(const Var& f) const {
    Var x = ag::space_to_depth(f, stage_factor(level));
    x = conv(x);
    x = norm(x);
    return ag::silu(x);
}

Var adaptive_fuse(const Var& f1, const Var& f2, const Var& f3, const Var& alpha,
                  const nn::Conv2d& conv3, const nn::Conv2d& conv7) {
    require_same_shape(f1->val, f3->val, "adaptive_fuse");
    require_same_shape(f2->val, f3->val, "adaptive_fuse");
    if (alpha->val.numel() != 3) throw ValidationError("adaptive_fuse: alpha must have 3 entries");
    Var b1 = ag::scale_by(conv3(f1), ag::select_index(alpha, 0));
    Var b2 = ag::scale_by(conv7(f2), ag::select_index(alpha, 1));
    Var b3 = ag::scale_by(f3, ag::select_index(alpha, 2));
    return ag::add(ag::add(b1, b2), b3);
}

Autoencoder Autoencoder::make(nn::ParamStore& ps, const std::string& prefix, int latent_channels,
                              Rng& rng) {
    Autoencoder ae;
    ae.latent_channels = latent_channels;
    ae.e1a = nn::Conv2d::make(ps, prefix + ".e1a", 3, 16, 3, 2, 1, rng);
    ae.e1b = nn::Conv2d::make(ps, prefix + ".e1b", 16, 16, 3, 1, 1, rng);
    ae.e2a = nn::Conv2d::make(ps, prefix + ".e2a", 16, 24, 3, 2, 1, rng);
    ae.e2b = nn::Conv2d::make(ps, prefix + ".e2b", 24, 24, 3, 1, 1, rng);
    ae.e3a = nn::Conv2d::make(ps, prefix + ".e3a", 24, 48, 3, 2, 1, rng);
    ae.e3b = nn::Conv2d::make(ps, prefix + ".e3b", 48, latent_channels, 3, 1, 1, rng);
    ae.d0 = nn::Conv2d::make(ps, prefix + ".d0", latent_channels, 48, 3, 1, 1, rng);
    ae.d1 = nn::Conv2d::make(ps, prefix + ".d1", 48, 24, 3, 1, 1, rng);
    ae.d2 = nn::Conv2d::make(ps, prefix + ".d2", 24, 16, 3, 1, 1, rng);
    ae.d3 = nn::Conv2d::make(ps, prefix + ".d3", 16, 12, 3, 1, 1, rng);
    ae.d_out = nn::Conv2d::make(ps, prefix + ".dout", 12, 3, 3, 1, 1, rng);
    return ae;
}

std::array<Var, 3> Autoencoder::encode_pyramid(const Var& image) const {
    const Tensor& img = image->val;
    if (img.rank() != 3 || img.shape[0] != 3)
        throw ValidationError("encode: expected a [3,H,W] image");
    if (img.shape[1] % 8 || img.shape[2] % 8)
        throw ValidationError("encode: image size must be divisible by 8");
    Var f1 = ag::silu(e1b(ag::silu(e1a(image))));
    Var f2 = ag::silu(e2b(ag::silu(e2a(f1))));
    Var pre = e3b(ag::silu(e3a(f2)));
    // non-affine normalization pins the latent scale for the noise schedule
    Var f3 = ag::group_norm(pre, nullptr, nullptr, nn::default_groups(latent_channels), 1e-6);
    return {f1, f2, f3};
}

Var Autoencoder::decode(const Var& latent) const {
    Var h = ag::silu(d0(latent));
    h = ag::silu(d1(ag::upsample_nearest(h, 2)));
    h = ag::silu(d2(ag::upsample_nearest(h, 2)));
    h = ag::silu(d3(ag::upsample_nearest(h, 2)));
    return d_out(h);
}

AmfeModule AmfeModule::make(nn::ParamStore& ps, const std::string& prefix, int f1_channels,
                            int f2_channels, int latent_channels, Rng& rng) {
    AmfeModule m;
    m.std1 = Standardize::make(ps, prefix + ".std1", 1, f1_channels, latent_channels, rng);
    m.std2 = Standardize::make(ps, prefix + ".std2", 2, f2_channels, latent_channels, rng);
    m.std3 = Standardize::make(ps, prefix + ".std3", 3, latent_channels, latent_channels, rng);
    m.conv3 = nn::Conv2d::make(ps, prefix + ".f1", latent_channels, latent_channels, 3, 1, 1, rng);
    m.conv7 = nn::Conv2d::make(ps, prefix + ".f2", latent_channels, latent_channels, 7, 1, 3, rng);
    Tensor a0({3});
    a0.data = {0.0, 0.0, 1.0};
    m.alpha.raw_params = ps.create(prefix + ".alpha", std::move(a0));
    return m;
}

Var AmfeModule::forward(const std::array<Var, 3>& pyramid) const {
    Var f1_bar = std1(pyramid[0]);
    Var f2_bar = std2(pyramid[1]);
    // The identity branch of the fusion is the raw encoder latent itself, so
    // alpha=(0,0,1) reproduces the no-AMFE reference input bit for bit.
    return adaptive_fuse(f1_bar, f2_bar, pyramid[2], alpha.raw_params, conv3, conv7);
}

}  // namespace ct::amfe
