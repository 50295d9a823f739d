#include "ct/model.hpp"

#include <cmath>

namespace ct::model {

namespace {

// Per-module init stream: parameter values depend on (init_seed, prefix)
// only, so enabling or disabling sibling modules never shifts them.
Rng module_rng(std::uint64_t init_seed, const std::string& prefix) {
    return Rng(init_seed ^ fnv1a(prefix));
}

}  // namespace

void ModelConfig::validate() const {
    if (frame_h % 8 || frame_w % 8) throw ConfigError("frame size must be divisible by 8");
    if (latent_channels < 1 || base_width < 1) throw ConfigError("bad channel configuration");
    if (channel_mult.empty()) throw ConfigError("channel_mult must be nonempty");
    if (clip_length < 1) throw ConfigError("clip_length must be >= 1");
    for (int l : attn_levels)
        if (l < 0 || l >= levels() - 1)
            throw ConfigError("attention level " + std::to_string(l) +
                              " out of range (no attention at the innermost level)");
    if (d_k < 1 || time_dim < 2 || embed_dim < 1) throw ConfigError("bad attention dims");
}

Tensor sinusoidal_embedding(int t, int dim) {
    Tensor e({1, dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        e.data[i] = std::sin(t * freq);
        e.data[half + i] = std::cos(t * freq);
    }
    return e;
}

Tensor downsample_mask_to_latent(const Tensor& mask, int lh, int lw) {
    Tensor m2 = rasg::resample_mask_nearest(mask, lh, lw);
    return m2.reshaped({1, lh, lw});
}

SelfAttn SelfAttn::make(nn::ParamStore& ps, const std::string& prefix, int channels, int d_k,
                        Rng& rng) {
    SelfAttn a;
    a.d_k = d_k;
    a.norm = nn::GroupNorm::make(ps, prefix + ".gn", channels, nn::default_groups(channels));
    a.w_q = ps.create(prefix + ".wq", nn::kaiming_linear(channels, d_k, rng));
    a.w_k = ps.create(prefix + ".wk", nn::kaiming_linear(channels, d_k, rng));
    a.w_v = ps.create(prefix + ".wv", nn::kaiming_linear(channels, d_k, rng));
    a.w_o = ps.create(prefix + ".wo", Tensor::zeros({d_k, channels}));
    return a;
}

SelfAttn::Result SelfAttn::forward(const Var& x, const Var& ref_tokens, bool capture) const {
    int c = x->val.shape[0], h = x->val.shape[1], w = x->val.shape[2];
    Var tok = ag::chw_to_tokens(norm(x));
    Var src = ref_tokens ? ag::concat_rows(tok, ref_tokens) : tok;
    Var q = ag::matmul(tok, w_q);
    Var k = ag::matmul(src, w_k);
    Var v = ag::matmul(src, w_v);
    Var probs = ag::softmax_rows(
        ag::affine(ag::matmul(q, ag::transpose(k)), 1.0 / std::sqrt(double(d_k)), 0.0));

    Result r;
    if (capture && ref_tokens) {
        int t_self = h * w;
        int t_total = src->val.shape[0];
        r.garment_probs = ag::reshape(ag::row_segment_sum(probs, t_self, t_total), {h, w});
    }
    Var out_tok = ag::matmul(ag::matmul(probs, v), w_o);
    r.out = ag::add(x, ag::tokens_to_chw(out_tok, c, h, w));
    r.tokens = tok;
    return r;
}

ResBlock ResBlock::make(nn::ParamStore& ps, const std::string& prefix, int c_in, int c_out,
                        int time_dim, Rng& rng) {
    ResBlock rb;
    rb.gn1 = nn::GroupNorm::make(ps, prefix + ".gn1", c_in, nn::default_groups(c_in));
    rb.conv1 = nn::Conv2d::make(ps, prefix + ".conv1", c_in, c_out, 3, 1, 1, rng);
    rb.gn2 = nn::GroupNorm::make(ps, prefix + ".gn2", c_out, nn::default_groups(c_out));
    rb.conv2 = nn::Conv2d::make(ps, prefix + ".conv2", c_out, c_out, 3, 1, 1, rng,
                                /*zero_init=*/true);
    if (c_in != c_out) {
        rb.skip = nn::Conv2d::make(ps, prefix + ".skip", c_in, c_out, 1, 1, 0, rng);
        rb.has_skip = true;
    }
    if (time_dim > 0) {
        rb.temb_proj = nn::Linear::make(ps, prefix + ".emb", time_dim, c_out, rng);
        rb.has_temb = true;
    }
    return rb;
}

Var ResBlock::forward(const Var& x, const Var& temb) const {
    Var h = conv1(ag::silu(gn1(x)));
    if (has_temb && temb) {
        Var bias = ag::reshape(temb_proj(temb), {h->val.shape[0]});
        h = ag::add_channel_bias(h, bias);
    }
    h = conv2(ag::silu(gn2(h)));
    Var base = has_skip ? skip(x) : x;
    return ag::add(base, h);
}

const AttnSite* UNetBranch::site(const std::string& id) const {
    for (const auto& s : sites)
        if (s.id == id) return &s;
    return nullptr;
}

UNetBranch TryOnModel::build_branch(bool reference) {
    const std::string bp = reference ? "ref" : "den";
    UNetBranch b;
    b.is_reference = reference;
    int lc = cfg_.latent_channels;
    int in_ch = reference ? lc : (2 * lc + 1);
    int time_dim = reference ? 0 : cfg_.time_dim;

    {
        Rng r = module_rng(cfg_.init_seed, bp + ".in");
        b.in_conv = nn::Conv2d::make(params_, bp + ".in_conv", in_ch, cfg_.width(0), 3, 1, 1, r);
    }

    auto make_site = [&](int level, const std::string& id) {
        AttnSite s;
        s.id = id;
        s.level = level;
        int c = cfg_.width(level);
        {
            Rng r = module_rng(cfg_.init_seed, bp + "." + id + ".attn");
            s.self = SelfAttn::make(params_, bp + "." + id + ".attn", c, cfg_.d_k, r);
        }
        if (cfg_.enable_gpfa) {
            if (!shared_.count(id)) {
                Rng r = module_rng(cfg_.init_seed, "shared." + id);
                shared_.emplace(id, gpfa::SharedAttentionWeights::make(
                                        params_, "shared." + id, c, cfg_.embed_dim, cfg_.d_k, r));
            }
            Rng r = module_rng(cfg_.init_seed, bp + "." + id + ".xattn");
            s.cross = gpfa::BranchCrossAttention::make(
                params_, bp + "." + id + ".xattn", shared_.at(id), c, cfg_.d_k,
                reference ? gpfa::EmbeddingSource::garment : gpfa::EmbeddingSource::pose, r);
            s.has_cross = true;
        }
        if (!reference && cfg_.enable_atff) {
            Rng r = module_rng(cfg_.init_seed, bp + "." + id + ".atff");
            atff::AttentionConfig ac;
            ac.d_k = cfg_.d_k;
            ac.num_groups = std::min(cfg_.atff_num_groups, nn::default_groups(c));
            while (ac.num_groups > 1 && c % ac.num_groups) --ac.num_groups;
            s.temporal = atff::AtffLayer::make(params_, bp + "." + id + ".atff", c, ac, r);
            s.has_temporal = true;
        }
        b.sites.push_back(std::move(s));
    };

    int levels = cfg_.levels();
    for (int l = 0; l < levels; ++l) {
        Rng r = module_rng(cfg_.init_seed, bp + ".enc" + std::to_string(l));
        int c_in = l == 0 ? cfg_.width(0) : cfg_.width(l);
        b.enc_rb.push_back(ResBlock::make(params_, bp + ".enc" + std::to_string(l) + ".rb", c_in,
                                          cfg_.width(l), time_dim, r));
        for (int al : cfg_.attn_levels)
            if (al == l) make_site(l, "enc" + std::to_string(l));
        if (l < levels - 1) {
            Rng rd = module_rng(cfg_.init_seed, bp + ".down" + std::to_string(l));
            b.downs.push_back(nn::Conv2d::make(params_, bp + ".down" + std::to_string(l),
                                               cfg_.width(l), cfg_.width(l + 1), 3, 2, 1, rd));
        }
    }
    {
        Rng r = module_rng(cfg_.init_seed, bp + ".mid");
        b.mid = ResBlock::make(params_, bp + ".mid.rb", cfg_.width(levels - 1),
                               cfg_.width(levels - 1), time_dim, r);
    }
    b.up_convs.resize(levels - 1);
    b.dec_rb.reserve(levels - 1);
    for (int l = levels - 2; l >= 0; --l) {
        Rng r = module_rng(cfg_.init_seed, bp + ".dec" + std::to_string(l));
        b.up_convs[l] = nn::Conv2d::make(params_, bp + ".up" + std::to_string(l),
                                         cfg_.width(l + 1), cfg_.width(l), 3, 1, 1, r);
        b.dec_rb.push_back(ResBlock::make(params_, bp + ".dec" + std::to_string(l) + ".rb",
                                          2 * cfg_.width(l), cfg_.width(l), time_dim, r));
        for (int al : cfg_.attn_levels)
            if (al == l) make_site(l, "dec" + std::to_string(l));
    }
    {
        Rng r = module_rng(cfg_.init_seed, bp + ".out");
        b.out_norm = nn::GroupNorm::make(params_, bp + ".out.gn", cfg_.width(0),
                                         nn::default_groups(cfg_.width(0)));
        b.out_conv = nn::Conv2d::make(params_, bp + ".out_conv", cfg_.width(0), lc, 3, 1, 1, r,
                                      /*zero_init=*/true);
    }
    return b;
}

TryOnModel::TryOnModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    {
        Rng r = module_rng(cfg_.init_seed, "ae");
        ae_ = amfe::Autoencoder::make(params_, "ae", cfg_.latent_channels, r);
    }
    if (cfg_.enable_amfe) {
        Rng r = module_rng(cfg_.init_seed, "amfe");
        amfe_ = amfe::AmfeModule::make(params_, "amfe", 16, 24, cfg_.latent_channels, r);
    }
    if (cfg_.enable_gpfa) {
        Rng rg = module_rng(cfg_.init_seed, "emb.g");
        emb_garment_ = gpfa::GlobalEncoder::make(params_, "emb.g", 3, cfg_.embed_dim,
                                                 cfg_.embed_tokens,
                                                 gpfa::EmbeddingSource::garment, rg);
        Rng rp = module_rng(cfg_.init_seed, "emb.p");
        emb_pose_ = gpfa::GlobalEncoder::make(params_, "emb.p", cfg_.pose_channels, cfg_.embed_dim,
                                              cfg_.embed_tokens, gpfa::EmbeddingSource::pose, rp);
    }
    if (cfg_.enable_pose_embed) {
        Rng r = module_rng(cfg_.init_seed, "pose");
        pose_embed_ = gpfa::PoseEmbed::make(params_, "pose", cfg_.pose_channels,
                                            cfg_.latent_channels, r);
    }
    {
        Rng r = module_rng(cfg_.init_seed, "den.temb");
        temb_l1_ = nn::Linear::make(params_, "den.temb.l1", cfg_.time_dim, cfg_.time_dim, r);
        temb_l2_ = nn::Linear::make(params_, "den.temb.l2", cfg_.time_dim, cfg_.time_dim, r);
    }
    ref_ = build_branch(true);
    den_ = build_branch(false);
}

const gpfa::SharedAttentionWeights& TryOnModel::shared_attention(const std::string& site) const {
    auto it = shared_.find(site);
    if (it == shared_.end()) throw StateError("no shared attention weights for site " + site);
    return it->second;
}

Var TryOnModel::encode_frame(const Tensor& frame) const {
    return ae_.encode(ag::constant(frame));
}

Tensor TryOnModel::decode_latent(const Tensor& latent) const {
    ag::NoGradGuard ng;
    return ae_.decode(ag::constant(latent))->val;
}

Var TryOnModel::garment_latent(const Var& garment_image) const {
    auto pyr = ae_.encode_pyramid(garment_image);
    if (cfg_.enable_amfe) return amfe_.forward(pyr);
    return pyr[2];
}

Var TryOnModel::time_embedding(int t) const {
    Var e = ag::constant(sinusoidal_embedding(t, cfg_.time_dim));
    return temb_l2_(ag::silu(temb_l1_(e)));
}

ReferenceCache TryOnModel::run_reference(const Var& garment_lat, const Var& garment_image) const {
    ReferenceCache cache;
    std::optional<gpfa::GlobalEmbedding> f_g;
    if (cfg_.enable_gpfa) f_g = emb_garment_(garment_image);

    auto run_site = [&](const AttnSite& s, Var h) {
        SelfAttn::Result r = s.self.forward(h, nullptr, false);
        cache.tokens[s.id] = r.tokens;
        h = r.out;
        if (s.has_cross && f_g) {
            int c = h->val.shape[0], hh = h->val.shape[1], ww = h->val.shape[2];
            Var tok = ag::chw_to_tokens(h);
            tok = s.cross.forward(tok, *f_g, shared_.at(s.id));
            h = ag::tokens_to_chw(tok, c, hh, ww);
        }
        return h;
    };

    int levels = cfg_.levels();
    Var h = ref_.in_conv(garment_lat);
    std::vector<Var> skips(levels);
    std::vector<std::pair<int, int>> sizes(levels);
    for (int l = 0; l < levels; ++l) {
        h = ref_.enc_rb[l].forward(h, nullptr);
        if (const AttnSite* s = ref_.site("enc" + std::to_string(l))) h = run_site(*s, h);
        skips[l] = h;
        sizes[l] = {h->val.shape[1], h->val.shape[2]};
        if (l < levels - 1) h = ref_.downs[l](h);
    }
    h = ref_.mid.forward(h, nullptr);
    int rb = 0;
    for (int l = levels - 2; l >= 0; --l, ++rb) {
        h = ref_.up_convs[l](ag::upsample_nearest_to(h, sizes[l].first, sizes[l].second));
        h = ag::concat_channels(h, skips[l]);
        h = ref_.dec_rb[rb].forward(h, nullptr);
        if (const AttnSite* s = ref_.site("dec" + std::to_string(l))) h = run_site(*s, h);
    }
    return cache;
}

DenoiseOutput TryOnModel::forward(const std::vector<Var>& latents, int t, const ClipCond& cond,
                                  bool capture_attention, Rng& atff_rng) const {
    int n = static_cast<int>(latents.size());
    if (n < 1) throw ValidationError("forward: empty clip");
    if (cond.agnostic.size() != static_cast<std::size_t>(n) ||
        cond.masks.size() != static_cast<std::size_t>(n) ||
        cond.poses.size() != static_cast<std::size_t>(n))
        throw ValidationError("forward: conditioning frame count mismatch");
    int lh = cfg_.latent_h(), lw = cfg_.latent_w();

    // garment / reference branch (once per clip)
    Var garment_img = ag::constant(cond.garment);
    Var f_hat = garment_latent(garment_img);
    ReferenceCache ref_cache = run_reference(f_hat, garment_img);

    std::vector<gpfa::GlobalEmbedding> f_p(n);
    std::vector<Var> inputs(n);
    for (int i = 0; i < n; ++i) {
        Var z = latents[i];
        if (z->val.rank() != 3 || z->val.shape[0] != cfg_.latent_channels ||
            z->val.shape[1] != lh || z->val.shape[2] != lw)
            throw ValidationError("forward: latent shape mismatch " + z->val.shape_str());
        Var pose = ag::constant(cond.poses[i]);
        if (cfg_.enable_pose_embed) z = gpfa::inject_pose(z, pose_embed_(pose));
        if (cfg_.enable_gpfa) f_p[i] = emb_pose_(pose);
        Var agn = ae_.encode(ag::constant(cond.agnostic[i]));
        Var m = ag::constant(downsample_mask_to_latent(cond.masks[i], lh, lw));
        inputs[i] = ag::concat_channels(ag::concat_channels(z, agn), m);
    }

    Var temb = time_embedding(t);
    DenoiseOutput out;

    auto run_site = [&](const AttnSite& s, std::vector<Var>& h) {
        auto rit = ref_cache.tokens.find(s.id);
        Var ref_tok = rit == ref_cache.tokens.end() ? nullptr : rit->second;
        for (int i = 0; i < n; ++i) {
            SelfAttn::Result r = s.self.forward(h[i], ref_tok, capture_attention);
            if (r.garment_probs)
                out.records.push_back({s.id, i, r.garment_probs});
            h[i] = r.out;
            if (s.has_cross) {
                int c = h[i]->val.shape[0], hh = h[i]->val.shape[1], ww = h[i]->val.shape[2];
                Var tok = ag::chw_to_tokens(h[i]);
                tok = s.cross.forward(tok, f_p[i], shared_.at(s.id));
                h[i] = ag::tokens_to_chw(tok, c, hh, ww);
            }
        }
        if (s.has_temporal) h = s.temporal.forward(h, atff_rng);
    };

    int levels = cfg_.levels();
    std::vector<Var> h(n);
    for (int i = 0; i < n; ++i) h[i] = den_.in_conv(inputs[i]);
    std::vector<std::vector<Var>> skips(levels);
    std::vector<std::pair<int, int>> sizes(levels);
    for (int l = 0; l < levels; ++l) {
        for (int i = 0; i < n; ++i) h[i] = den_.enc_rb[l].forward(h[i], temb);
        if (const AttnSite* s = den_.site("enc" + std::to_string(l))) run_site(*s, h);
        skips[l] = h;
        sizes[l] = {h[0]->val.shape[1], h[0]->val.shape[2]};
        if (l < levels - 1)
            for (int i = 0; i < n; ++i) h[i] = den_.downs[l](h[i]);
    }
    for (int i = 0; i < n; ++i) h[i] = den_.mid.forward(h[i], temb);
    int rb = 0;
    for (int l = levels - 2; l >= 0; --l, ++rb) {
        for (int i = 0; i < n; ++i) {
            Var u = den_.up_convs[l](
                ag::upsample_nearest_to(h[i], sizes[l].first, sizes[l].second));
            h[i] = den_.dec_rb[rb].forward(ag::concat_channels(u, skips[l][i]), temb);
        }
        if (const AttnSite* s = den_.site("dec" + std::to_string(l))) run_site(*s, h);
    }
    out.eps_pred.resize(n);
    for (int i = 0; i < n; ++i)
        out.eps_pred[i] = den_.out_conv(ag::silu(den_.out_norm(h[i])));
    return out;
}

std::vector<Tensor> TryOnModel::generate(const ClipCond& cond,
                                         const std::vector<Tensor>& source_frames, int steps,
                                         const diffusion::NoiseSchedule& sched, std::uint64_t seed,
                                         bool composite) const {
    if (steps < 1) throw ValidationError("generate: steps must be >= 1");
    ag::NoGradGuard ng;
    int n = static_cast<int>(cond.agnostic.size());
    if (composite && source_frames.size() != static_cast<std::size_t>(n))
        throw ValidationError("generate: composite requires one source frame per clip frame");
    int lh = cfg_.latent_h(), lw = cfg_.latent_w();

    Rng noise_rng(seed);
    Rng atff_rng(seed ^ 0x9e3779b97f4a7c15ull);

    std::vector<Tensor> z(n);
    for (int i = 0; i < n; ++i)
        z[i] = Tensor::randn({cfg_.latent_channels, lh, lw}, noise_rng);

    // evenly spaced timestep subsequence, descending
    std::vector<int> taus(steps);
    for (int s = 0; s < steps; ++s)
        taus[s] = static_cast<int>((static_cast<std::int64_t>(s + 1) * sched.num_steps) / steps) - 1;

    for (int s = steps - 1; s >= 0; --s) {
        int t = taus[s];
        std::vector<Var> zv(n);
        for (int i = 0; i < n; ++i) zv[i] = ag::constant(z[i]);
        DenoiseOutput den = forward(zv, t, cond, /*capture_attention=*/false, atff_rng);

        double abar = sched.alpha_bars[t];
        double sqrt_ab = std::sqrt(abar);
        double sqrt_1mab = std::sqrt(1.0 - abar);
        double next_ab = s > 0 ? sched.alpha_bars[taus[s - 1]] : 1.0;
        double a = std::sqrt(next_ab);
        double b = std::sqrt(1.0 - next_ab);
        for (int i = 0; i < n; ++i) {
            const Tensor& eps = den.eps_pred[i]->val;
            Tensor x0(z[i].shape);
            for (std::size_t p = 0; p < x0.numel(); ++p)
                x0.data[p] = (z[i].data[p] - sqrt_1mab * eps.data[p]) / sqrt_ab;
            if (s > 0) {
                for (std::size_t p = 0; p < x0.numel(); ++p)
                    z[i].data[p] = a * x0.data[p] + b * eps.data[p];
            } else {
                z[i] = x0;
            }
        }
    }

    std::vector<Tensor> frames(n);
    for (int i = 0; i < n; ++i) {
        Tensor img = decode_latent(z[i]);
        for (double& v : img.data) v = std::min(1.0, std::max(0.0, v));
        if (composite) {
            const Tensor& src = source_frames[i];
            const Tensor& mask = cond.masks[i];
            require_same_shape(img, src, "generate/composite");
            int plane = cfg_.frame_h * cfg_.frame_w;
            for (int c = 0; c < 3; ++c)
                for (int p = 0; p < plane; ++p) {
                    std::size_t idx = static_cast<std::size_t>(c) * plane + p;
                    if (mask.data[p] == 0.0) img.data[idx] = src.data[idx];
                }
        }
        frames[i] = std::move(img);
    }
    return frames;
}

}  // namespace ct::model
