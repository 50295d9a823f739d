#include "ct/atff.hpp"

#include <cmath>

namespace ct::atff {

std::pair<int, int> sample_frame_pair(int i, int n, Rng& rng) {
    if (n < 1) throw ValidationError("sample_frame_pair: clip length must be >= 1");
    if (i < 0 || i >= n) throw ValidationError("sample_frame_pair: frame index out of range");
    if (n == 1) return {i, i};
    if (n == 2) {
        int other = 1 - i;
        return {other, other};
    }
    // j, k uniform over frames != i, j != k
    int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 1)));
    if (j >= i) ++j;
    int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 2)));
    for (int skip : {std::min(i, j), std::max(i, j)})
        if (k >= skip) ++k;
    return {j, k};
}

FusionWeightsVar fusion_weights(const Var& z_i, const Var& z_j, const Var& z_k) {
    require_same_shape(z_i->val, z_j->val, "fusion_weights");
    require_same_shape(z_i->val, z_k->val, "fusion_weights");
    Var s_j = ag::channel_dot(z_i, z_j);
    Var s_k = ag::channel_dot(z_i, z_k);
    // softmax over the two candidates == sigmoid of the score difference
    Var w_j = ag::sigmoid(ag::sub(s_j, s_k));
    Var w_k = ag::affine(w_j, -1.0, 1.0);
    return {w_j, w_k};
}

FusionWeights fusion_weights(const Tensor& z_i, const Tensor& z_j, const Tensor& z_k) {
    ag::NoGradGuard ng;
    FusionWeightsVar w = fusion_weights(ag::constant(z_i), ag::constant(z_j), ag::constant(z_k));
    return {w.w_j->val, w.w_k->val};
}

Var fuse_temporal(const Var& z_i, const Var& z_j, const Var& z_k, const FusionWeightsVar& w,
                  const Var& gamma, const Var& beta, int num_groups, double eps) {
    require_same_shape(z_i->val, z_j->val, "fuse_temporal");
    require_same_shape(z_i->val, z_k->val, "fuse_temporal");
    int channels = z_i->val.shape[0];
    if (num_groups < 1 || channels % num_groups)
        throw ConfigError("fuse_temporal: num_groups " + std::to_string(num_groups) +
                          " must divide channels " + std::to_string(channels));
    Var pre = ag::add(ag::add(ag::scale_spatial(z_j, w.w_j), z_i), ag::scale_spatial(z_k, w.w_k));
    return ag::group_norm(pre, gamma, beta, num_groups, eps);
}

Var cross_space_attention(const Var& z_i, const Var& z_bar, const Var& w_q, const Var& w_k,
                          const Var& w_v, const Var& w_o, int d_k) {
    const Tensor& zi = z_i->val;
    if (zi.rank() != 3 || z_bar->val.rank() != 3)
        throw ValidationError("cross_space_attention: rank-3 feature maps required");
    if (w_q->val.shape[0] != zi.shape[0] || w_q->val.shape[1] != d_k)
        throw ValidationError("cross_space_attention: projection dims incompatible with d_k");
    int c = zi.shape[0], h = zi.shape[1], w = zi.shape[2];

    Var q_tok = ag::chw_to_tokens(z_i);
    Var kv_tok = ag::chw_to_tokens(z_bar);
    Var q = ag::matmul(q_tok, w_q);
    Var k = ag::matmul(kv_tok, w_k);
    Var v = ag::matmul(kv_tok, w_v);
    Var scores = ag::affine(ag::matmul(q, ag::transpose(k)), 1.0 / std::sqrt(double(d_k)), 0.0);
    Var probs = ag::softmax_rows(scores);
    Var out_tok = ag::matmul(ag::matmul(probs, v), w_o);
    return ag::add(z_i, ag::tokens_to_chw(out_tok, c, h, w));
}

AtffLayer AtffLayer::make(nn::ParamStore& ps, const std::string& prefix, int channels,
                          const AttentionConfig& cfg, Rng& rng) {
    AtffLayer l;
    l.cfg = cfg;
    l.channels = channels;
    l.norm = nn::GroupNorm::make(ps, prefix + ".gn", channels, cfg.num_groups);
    l.proj.w_q = ps.create(prefix + ".wq", nn::kaiming_linear(channels, cfg.d_k, rng));
    l.proj.w_k = ps.create(prefix + ".wk", nn::kaiming_linear(channels, cfg.d_k, rng));
    l.proj.w_v = ps.create(prefix + ".wv", nn::kaiming_linear(channels, cfg.d_k, rng));
    l.proj.w_o = ps.create(prefix + ".wo", Tensor::zeros({cfg.d_k, channels}));
    return l;
}

Var AtffLayer::fuse(const Var& z_i, const Var& z_j, const Var& z_k,
                    const FusionWeightsVar& w) const {
    return fuse_temporal(z_i, z_j, z_k, w, norm.gamma, norm.beta, cfg.num_groups, norm.eps);
}

Var AtffLayer::cross_space_attention(const Var& z_i, const Var& z_bar) const {
    return atff::cross_space_attention(z_i, z_bar, proj.w_q, proj.w_k, proj.w_v, proj.w_o,
                                       cfg.d_k);
}

std::vector<Var> AtffLayer::forward(const std::vector<Var>& frames, Rng& rng) const {
    int n = static_cast<int>(frames.size());
    std::vector<Var> out;
    out.reserve(frames.size());
    for (int i = 0; i < n; ++i) {
        auto [j, k] = sample_frame_pair(i, n, rng);
        FusionWeightsVar w = fusion_weights(frames[i], frames[j], frames[k]);
        Var fused = fuse(frames[i], frames[j], frames[k], w);
        out.push_back(cross_space_attention(frames[i], fused));
    }
    return out;
}

}  // namespace ct::atff
