#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ct/checkpoint.hpp"
#include "ct/metrics.hpp"
#include "ct/model.hpp"
#include "ct/synthdata.hpp"

namespace ct::train {

struct TrainConfig {
    std::string stage = "image";  // image | video
    int steps = 2000;
    int batch = 4;           // frames per step (image) / clips per step (video)
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999;
    double gamma = 5.0;      // min-SNR clamp
    double lambda_n = 0.5;
    double lambda_r = 0.1;
    bool rasg_enabled = true;
    double recon_weight = 1.0;
    std::string atff_seed_policy = "per_step";  // per_step | fixed
    std::uint64_t seed = 0;
    std::string data_dir;
    std::string out_dir;
    int ckpt_every = 500;
    int num_steps_T = 1000;  // diffusion T
    double beta_start = 1e-4, beta_end = 2e-2;
    std::string resume;  // continue an interrupted run of the same stage
    std::string init;    // stage-image checkpoint seeding a video run

    void validate() const;
};

// 8-bit in-memory copy of a sample directory; tensors are materialized on
// demand so a 200-sample set stays tens of megabytes.
class CachedDataset {
public:
    explicit CachedDataset(const std::string& root);
    std::size_t size() const { return samples_.size(); }
    int frames() const { return frames_; }
    int frame_h() const { return height_; }
    int frame_w() const { return width_; }

    Tensor source(std::size_t sample, int frame) const;
    Tensor agnostic(std::size_t sample, int frame) const;
    Tensor mask(std::size_t sample, int frame) const;
    Tensor pose(std::size_t sample, int frame) const;
    Tensor garment(std::size_t sample) const;

    model::ClipCond clip_cond(std::size_t sample) const;
    model::ClipCond frame_cond(std::size_t sample, int frame) const;
    std::vector<Tensor> source_frames(std::size_t sample) const;

private:
    struct Blob {
        std::vector<unsigned char> bytes;
        std::vector<int> shape;
    };
    struct Sample {
        std::vector<Blob> source, agnostic, mask, pose;
        Blob garment;
    };
    static Blob pack(const Tensor& t);
    static Tensor unpack(const Blob& b);

    std::vector<Sample> samples_;
    int frames_ = 0, height_ = 0, width_ = 0, pose_channels_ = 0;
};

struct StepStats {
    std::int64_t step = 0;
    double loss = 0, ldm = 0, rasg = 0, recon = 0;
    std::vector<std::pair<int, double>> snr_weights;  // (t, weight) per element
    double millis = 0;
};

class Trainer {
public:
    // Builds the model fresh, from cfg.init (video stage) or from cfg.resume.
    Trainer(const model::ModelConfig& mc, const TrainConfig& tc);

    // Runs until the configured step count; returns the final checkpoint path.
    std::string run();
    StepStats step();  // single optimization step (exposed for tests)

    model::TryOnModel& model() { return *model_; }
    const diffusion::NoiseSchedule& schedule() const { return sched_; }
    nn::Adam& optimizer() { return adam_; }
    std::int64_t current_step() const { return step_; }
    Rng& rng() { return rng_; }
    const TrainConfig& config() const { return cfg_; }

    bool is_trainable(const std::string& param_name) const;
    void save_checkpoint(const std::string& path) const;
    const std::vector<StepStats>& history() const { return history_; }

private:
    StepStats image_step();
    StepStats video_step();
    Rng& atff_rng();

    TrainConfig cfg_;
    Rng atff_fixed_rng_{0};
    std::unique_ptr<model::TryOnModel> model_;
    std::unique_ptr<CachedDataset> data_;
    diffusion::NoiseSchedule sched_;
    nn::Adam adam_;
    Rng rng_;
    std::int64_t step_ = 0;
    std::vector<StepStats> history_;
};

// source frames with the canonical garment image pasted into each frame's
// mask bounding box (scaled, unrotated) — the no-deformation baseline.
std::vector<Tensor> naive_paste_baseline(const model::ClipCond& cond,
                                         const std::vector<Tensor>& source, const Tensor& garment);

struct SampleMetrics {
    double ssim = 0, ssim_edit = 0, psnr = 0, flicker = 0, feature_dist = 0;
    double naive_ssim_edit = 0;
};

struct EvalReport {
    std::vector<SampleMetrics> per_sample;
    double mean_ssim = 0, mean_ssim_edit = 0, mean_psnr = 0, mean_flicker = 0;
    double mean_feature_dist = 0, mean_naive_ssim_edit = 0;
    std::string to_json() const;
};

// Generates every sample of `valset` with the checkpointed model and scores
// it against the ground truth and the naive paste baseline.
EvalReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& valset_dir,
                               int sampler_steps, std::uint64_t seed);
EvalReport evaluate_model(const model::TryOnModel& model, const diffusion::NoiseSchedule& sched,
                          const CachedDataset& ds, int sampler_steps, std::uint64_t seed);

// Mean IoU between thresholded (0.5) aggregated attention maps and the
// ground-truth masks resampled to each map's grid.
double attention_mask_iou(const model::TryOnModel& model, const CachedDataset& ds,
                          const std::vector<std::size_t>& samples, int t,
                          const diffusion::NoiseSchedule& sched, std::uint64_t seed);

metrics::FeatureExtractor latent_feature_extractor(const model::TryOnModel& model);

}  // namespace ct::train
