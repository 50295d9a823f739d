#pragma once

#include <string>

#include "ct/nn.hpp"

namespace ct::gpfa {

using ag::Var;

enum class EmbeddingSource { garment, pose };

struct GlobalEmbedding {
    Var tokens;  // [T_e, D_e]
    EmbeddingSource source = EmbeddingSource::garment;
};

// Q/K/V projections shared by the reference- and denoising-branch
// cross-attention of one attention site. Both branches must reference the
// identical parameter objects; the forward asserts the aliasing.
struct SharedAttentionWeights {
    Var w_q;  // [C, d_a]
    Var w_k;  // [D_e, d_a]
    Var w_v;  // [D_e, d_a]

    static SharedAttentionWeights make(nn::ParamStore& ps, const std::string& prefix,
                                       int channels, int embed_dim, int attn_dim, Rng& rng);
};

// One branch's cross-attention over global embedding tokens; the output
// projection is per-branch and zero-init so the site starts as identity.
struct BranchCrossAttention {
    const SharedAttentionWeights* shared = nullptr;
    Var w_o;  // [d_a, C]
    EmbeddingSource expected_source = EmbeddingSource::garment;
    int d_a = 0;

    static BranchCrossAttention make(nn::ParamStore& ps, const std::string& prefix,
                                     const SharedAttentionWeights& shared, int channels,
                                     int attn_dim, EmbeddingSource expected, Rng& rng);

    // tokens: [T, C] latent tokens; returns tokens + attn (residual).
    Var forward(const Var& tokens, const GlobalEmbedding& emb,
                const SharedAttentionWeights& w) const;

    // Last K projection node of forward(), for gradient attribution probes.
    mutable ag::Var last_k_node;
};

// Four-layer convolutional pose encoder mapping a pose map to the latent
// shape; the final layer is zero-init so injection starts as a no-op.
struct PoseEmbed {
    nn::Conv2d c1, c2, c3, c4;

    static PoseEmbed make(nn::ParamStore& ps, const std::string& prefix, int pose_channels,
                          int latent_channels, Rng& rng);
    Var operator()(const Var& pose_map) const;
};

Var inject_pose(const Var& z, const Var& pose_feature);
Tensor inject_pose(const Tensor& z, const Tensor& pose_feature);

// Small deterministic convolutional tokenizer standing in for a pretrained
// image encoder. Produces [tokens, embed_dim].
struct GlobalEncoder {
    nn::Conv2d c1, c2, c3, c4;
    EmbeddingSource source = EmbeddingSource::garment;
    int embed_dim = 32;
    int tokens = 12;  // pooled token count; factored into a near-square grid

    static GlobalEncoder make(nn::ParamStore& ps, const std::string& prefix, int in_channels,
                              int embed_dim, int tokens, EmbeddingSource source, Rng& rng);
    GlobalEmbedding operator()(const Var& image) const;
};

// (rows, cols) with rows*cols == tokens, aspect close to grid_h:grid_w.
std::pair<int, int> token_grid(int tokens, int grid_h, int grid_w);

}  // namespace ct::gpfa
