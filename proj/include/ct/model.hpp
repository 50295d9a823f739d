#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ct/amfe.hpp"
#include "ct/atff.hpp"
#include "ct/diffusion.hpp"
#include "ct/gpfa.hpp"
#include "ct/nn.hpp"
#include "ct/rasg.hpp"

namespace ct::model {

using ag::Var;

struct ModelConfig {
    int frame_h = 48, frame_w = 64;  // divisible by 8
    int latent_channels = 4;
    int base_width = 32;
    std::vector<int> channel_mult = {1, 2, 3};
    std::vector<int> attn_levels = {0, 1};
    int clip_length = 8;
    int d_k = 32;
    int time_dim = 64;
    int embed_dim = 32;       // global embedding token dim
    int embed_tokens = 12;    // global embedding token count
    int pose_channels = 8;
    int atff_num_groups = 8;
    bool enable_atff = true;
    bool enable_gpfa = true;        // dual cross-attention over global embeddings
    bool enable_pose_embed = true;  // local pose injection into the latent
    bool enable_amfe = true;
    std::vector<std::string> rasg_layers = {"enc0", "enc1", "dec1", "dec0"};
    std::uint64_t init_seed = 1234;

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int latent_h() const { return frame_h / 8; }
    int latent_w() const { return frame_w / 8; }
    int width(int level) const { return base_width * channel_mult[level]; }
    void validate() const;
};

// Conditioning for one clip. Frame counts must match across vectors.
struct ClipCond {
    Tensor garment;               // [3,H,W]
    std::vector<Tensor> agnostic; // [3,H,W] per frame
    std::vector<Tensor> masks;    // [H,W] binary per frame
    std::vector<Tensor> poses;    // [P,H,W] per frame
};

struct DenoiseOutput {
    std::vector<Var> eps_pred;                          // per frame, latent shape
    std::vector<rasg::AttentionRecordVar> records;      // empty unless captured
};

// Spatial self-attention with optional key/value concatenation of
// reference-branch tokens; garment attention mass is captured from the
// concatenated segment.
struct SelfAttn {
    nn::GroupNorm norm;
    Var w_q, w_k, w_v, w_o;  // w_o zero-init
    int d_k = 32;

    static SelfAttn make(nn::ParamStore& ps, const std::string& prefix, int channels, int d_k,
                         Rng& rng);

    struct Result {
        Var out;
        Var tokens;         // post-norm tokens (reference cache source)
        Var garment_probs;  // [h,w] aggregated mass on reference keys, or null
    };
    Result forward(const Var& x, const Var& ref_tokens, bool capture) const;
};

struct ResBlock {
    nn::GroupNorm gn1, gn2;
    nn::Conv2d conv1, conv2;  // conv2 zero-init
    nn::Conv2d skip;
    bool has_skip = false;
    nn::Linear temb_proj;
    bool has_temb = false;

    static ResBlock make(nn::ParamStore& ps, const std::string& prefix, int c_in, int c_out,
                         int time_dim, Rng& rng);
    Var forward(const Var& x, const Var& temb) const;
};

struct AttnSite {
    std::string id;
    int level = 0;
    SelfAttn self;
    gpfa::BranchCrossAttention cross;
    bool has_cross = false;
    atff::AtffLayer temporal;
    bool has_temporal = false;
};

struct UNetBranch {
    bool is_reference = false;
    nn::Conv2d in_conv;
    std::vector<ResBlock> enc_rb;
    std::vector<nn::Conv2d> downs;
    ResBlock mid;
    std::vector<nn::Conv2d> up_convs;  // index by level
    std::vector<ResBlock> dec_rb;
    nn::GroupNorm out_norm;
    nn::Conv2d out_conv;  // zero-init
    std::vector<AttnSite> sites;  // lookup by id

    const AttnSite* site(const std::string& id) const;
};

// Reference-branch activations consumed by the denoising branch.
struct ReferenceCache {
    std::map<std::string, Var> tokens;  // site id -> [T_ref, C]
};

class TryOnModel {
public:
    explicit TryOnModel(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    // Garment latent: AMFE-fused when enabled, otherwise the raw encoder latent.
    Var garment_latent(const Var& garment_image) const;
    ReferenceCache run_reference(const Var& garment_latent, const Var& garment_image) const;

    Var time_embedding(int t) const;  // [1, time_dim]

    // Full dual-branch forward over a clip of noisy latents.
    DenoiseOutput forward(const std::vector<Var>& latents, int t, const ClipCond& cond,
                          bool capture_attention, Rng& atff_rng) const;

    // Deterministic sampler; returns N decoded frames in [0,1].
    std::vector<Tensor> generate(const ClipCond& cond, const std::vector<Tensor>& source_frames,
                                 int steps, const diffusion::NoiseSchedule& sched,
                                 std::uint64_t seed, bool composite) const;

    Var encode_frame(const Tensor& frame) const;
    Tensor decode_latent(const Tensor& latent) const;

    const amfe::Autoencoder& autoencoder() const { return ae_; }
    const amfe::AmfeModule& amfe() const { return amfe_; }
    const gpfa::GlobalEncoder& garment_encoder() const { return emb_garment_; }
    const gpfa::GlobalEncoder& pose_encoder() const { return emb_pose_; }
    const gpfa::PoseEmbed& pose_embed() const { return pose_embed_; }
    const UNetBranch& reference_branch() const { return ref_; }
    const UNetBranch& denoise_branch() const { return den_; }
    const gpfa::SharedAttentionWeights& shared_attention(const std::string& site) const;

private:
    Var branch_forward_frame_prelude(const Var& z, const ClipCond& cond, int frame) const;
    UNetBranch build_branch(bool reference);

    ModelConfig cfg_;
    nn::ParamStore params_;
    amfe::Autoencoder ae_;
    amfe::AmfeModule amfe_;
    gpfa::GlobalEncoder emb_garment_, emb_pose_;
    gpfa::PoseEmbed pose_embed_;
    nn::Linear temb_l1_, temb_l2_;
    std::map<std::string, gpfa::SharedAttentionWeights> shared_;
    UNetBranch ref_, den_;
};

Tensor sinusoidal_embedding(int t, int dim);
Tensor downsample_mask_to_latent(const Tensor& mask, int lh, int lw);

}  // namespace ct::model
