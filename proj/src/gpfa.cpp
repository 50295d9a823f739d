#include "ct/gpfa.hpp"

#include <cmath>

namespace ct::gpfa {

SharedAttentionWeights SharedAttentionWeights::make(nn::ParamStore& ps, const std::string& prefix,
                                                    int channels, int embed_dim, int attn_dim,
                                                    Rng& rng) {
    SharedAttentionWeights w;
    w.w_q = ps.create(prefix + ".wq", nn::kaiming_linear(channels, attn_dim, rng));
    w.w_k = ps.create(prefix + ".wk", nn::kaiming_linear(embed_dim, attn_dim, rng));
    w.w_v = ps.create(prefix + ".wv", nn::kaiming_linear(embed_dim, attn_dim, rng));
    return w;
}

BranchCrossAttention BranchCrossAttention::make(nn::ParamStore& ps, const std::string& prefix,
                                                const SharedAttentionWeights& shared, int channels,
                                                int attn_dim, EmbeddingSource expected, Rng& rng) {
    (void)rng;
    BranchCrossAttention b;
    b.shared = &shared;
    b.expected_source = expected;
    b.d_a = attn_dim;
    b.w_o = ps.create(prefix + ".wo", Tensor::zeros({attn_dim, channels}));
    return b;
}

Var BranchCrossAttention::forward(const Var& tokens, const GlobalEmbedding& emb,
                                  const SharedAttentionWeights& w) const {
    if (emb.source != expected_source)
        throw ValidationError("cross_attention: embedding source does not match this branch");
    // Weight sharing is a contract: the caller must hand us the one shared
    // parameter set, not a copy with equal values.
    if (!shared || w.w_q.get() != shared->w_q.get() || w.w_k.get() != shared->w_k.get() ||
        w.w_v.get() != shared->w_v.get())
        throw ConfigError("cross_attention: weights must alias the shared parameter set");
    if (tokens->val.rank() != 2 || tokens->val.shape[1] != w.w_q->val.shape[0])
        throw ValidationError("cross_attention: latent token dim mismatch");
    if (emb.tokens->val.rank() != 2 || emb.tokens->val.shape[1] != w.w_k->val.shape[0])
        throw ValidationError("cross_attention: embedding dim mismatch");

    Var q = ag::matmul(tokens, w.w_q);
    Var k = ag::matmul(emb.tokens, w.w_k);
    last_k_node = k;
    Var v = ag::matmul(emb.tokens, w.w_v);
    Var scores = ag::affine(ag::matmul(q, ag::transpose(k)), 1.0 / std::sqrt(double(d_a)), 0.0);
    Var probs = ag::softmax_rows(scores);
    Var out = ag::matmul(ag::matmul(probs, v), w_o);
    return ag::add(tokens, out);
}

PoseEmbed PoseEmbed::make(nn::ParamStore& ps, const std::string& prefix, int pose_channels,
                          int latent_channels, Rng& rng) {
    PoseEmbed p;
    p.c1 = nn::Conv2d::make(ps, prefix + ".c1", pose_channels, 16, 3, 2, 1, rng);
    p.c2 = nn::Conv2d::make(ps, prefix + ".c2", 16, 24, 3, 2, 1, rng);
    p.c3 = nn::Conv2d::make(ps, prefix + ".c3", 24, 32, 3, 2, 1, rng);
    p.c4 = nn::Conv2d::make(ps, prefix + ".c4", 32, latent_channels, 3, 1, 1, rng,
                            /*zero_init=*/true);
    return p;
}

Var PoseEmbed::operator()(const Var& pose_map) const {
    const Tensor& x = pose_map->val;
    if (x.rank() != 3) throw ValidationError("pose_embed: rank-3 pose map required");
    if (x.shape[1] % 8 || x.shape[2] % 8)
        throw ValidationError("pose_embed: spatial size must be divisible by 8");
    Var h = ag::silu(c1(pose_map));
    h = ag::silu(c2(h));
    h = ag::silu(c3(h));
    return c4(h);
}

Var inject_pose(const Var& z, const Var& pose_feature) {
    require_same_shape(z->val, pose_feature->val, "inject_pose");
    return ag::add(z, pose_feature);
}

Tensor inject_pose(const Tensor& z, const Tensor& pose_feature) {
    require_same_shape(z, pose_feature, "inject_pose");
    Tensor out = z;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += pose_feature.data[i];
    return out;
}

std::pair<int, int> token_grid(int tokens, int grid_h, int grid_w) {
    if (tokens < 1) throw ConfigError("gpfa.tokens must be >= 1");
    int rows = static_cast<int>(std::lround(std::sqrt(double(tokens) * grid_h / grid_w)));
    rows = std::max(1, std::min(rows, tokens));
    while (rows > 1 && tokens % rows) --rows;
    int cols = tokens / rows;
    if (rows > grid_h || cols > grid_w)
        throw ConfigError("gpfa.tokens " + std::to_string(tokens) +
                          " exceeds the tokenizer grid " + std::to_string(grid_h) + "x" +
                          std::to_string(grid_w));
    return {rows, cols};
}

GlobalEncoder GlobalEncoder::make(nn::ParamStore& ps, const std::string& prefix, int in_channels,
                                  int embed_dim, int tokens, EmbeddingSource source, Rng& rng) {
    GlobalEncoder e;
    e.source = source;
    e.embed_dim = embed_dim;
    e.tokens = tokens;
    e.c1 = nn::Conv2d::make(ps, prefix + ".c1", in_channels, 12, 3, 2, 1, rng);
    e.c2 = nn::Conv2d::make(ps, prefix + ".c2", 12, 16, 3, 2, 1, rng);
    e.c3 = nn::Conv2d::make(ps, prefix + ".c3", 16, 24, 3, 2, 1, rng);
    e.c4 = nn::Conv2d::make(ps, prefix + ".c4", 24, embed_dim, 3, 2, 1, rng);
    return e;
}

GlobalEmbedding GlobalEncoder::operator()(const Var& image) const {
    const Tensor& x = image->val;
    if (x.rank() != 3) throw ValidationError("encode_global: rank-3 input required");
    if (x.shape[1] % 16 || x.shape[2] % 16)
        throw ValidationError("encode_global: spatial size must be divisible by 16");
    Var h = ag::silu(c1(image));
    h = ag::silu(c2(h));
    h = ag::silu(c3(h));
    h = c4(h);
    auto [rows, cols] = token_grid(tokens, h->val.shape[1], h->val.shape[2]);
    if (rows != h->val.shape[1] || cols != h->val.shape[2]) h = ag::avg_pool_to(h, rows, cols);
    GlobalEmbedding emb;
    emb.tokens = ag::chw_to_tokens(h);  // [tokens, D_e]
    emb.source = source;
    return emb;
}

}  // namespace ct::gpfa
