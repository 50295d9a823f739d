#include "ct/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>
#include <algorithm>

#include "ct/rasg.hpp"

namespace ct::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Only sites listed in the model's supervised-layer list feed the loss.
std::vector<rasg::AttentionRecordVar> supervised_records(
    const model::TryOnModel& m, const std::vector<rasg::AttentionRecordVar>& records) {
    const auto& layers = m.config().rasg_layers;
    std::vector<rasg::AttentionRecordVar> out;
    for (const auto& r : records)
        if (std::find(layers.begin(), layers.end(), r.layer_id) != layers.end()) out.push_back(r);
    return out;
}

}  // namespace

void TrainConfig::validate() const {
    if (stage != "image" && stage != "video")
        throw ConfigError("train.stage must be 'image' or 'video'");
    if (atff_seed_policy != "per_step" && atff_seed_policy != "fixed")
        throw ConfigError("atff.seed_policy must be 'per_step' or 'fixed'");
    if (steps < 1 || batch < 1) throw ConfigError("train.steps and train.batch must be positive");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (stage == "video" && init.empty() && resume.empty())
        throw ConfigError("video stage requires an image-stage checkpoint (train.init)");
}

// --------------------------------------------------------------- dataset

CachedDataset::Blob CachedDataset::pack(const Tensor& t) {
    Blob b;
    b.shape = t.shape;
    b.bytes.resize(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) {
        double v = t.data[i];
        b.bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    return b;
}

Tensor CachedDataset::unpack(const Blob& b) {
    Tensor t(b.shape);
    for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = b.bytes[i] / 255.0;
    return t;
}

CachedDataset::CachedDataset(const std::string& root) {
    synthdata::Dataset ds(root);
    samples_.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        synthdata::SampleTuple t = ds.load(i);
        if (i == 0) {
            frames_ = t.frames();
            height_ = t.source[0].shape[1];
            width_ = t.source[0].shape[2];
            pose_channels_ = t.poses[0].shape[0];
        } else if (t.frames() != frames_) {
            throw LoadError("dataset: inconsistent frame count at " + ds.sample_dir(i));
        }
        Sample s;
        for (int f = 0; f < frames_; ++f) {
            s.source.push_back(pack(t.source[f]));
            s.agnostic.push_back(pack(t.agnostic[f]));
            s.mask.push_back(pack(t.masks[f]));
            s.pose.push_back(pack(t.poses[f]));
        }
        s.garment = pack(t.garment);
        samples_.push_back(std::move(s));
    }
}

Tensor CachedDataset::source(std::size_t sample, int frame) const {
    return unpack(samples_.at(sample).source.at(frame));
}
Tensor CachedDataset::agnostic(std::size_t sample, int frame) const {
    return unpack(samples_.at(sample).agnostic.at(frame));
}
Tensor CachedDataset::mask(std::size_t sample, int frame) const {
    return unpack(samples_.at(sample).mask.at(frame));
}
Tensor CachedDataset::pose(std::size_t sample, int frame) const {
    return unpack(samples_.at(sample).pose.at(frame));
}
Tensor CachedDataset::garment(std::size_t sample) const {
    return unpack(samples_.at(sample).garment);
}

model::ClipCond CachedDataset::clip_cond(std::size_t sample) const {
    model::ClipCond c;
    c.garment = garment(sample);
    for (int f = 0; f < frames_; ++f) {
        c.agnostic.push_back(agnostic(sample, f));
        c.masks.push_back(mask(sample, f));
        c.poses.push_back(pose(sample, f));
    }
    return c;
}

model::ClipCond CachedDataset::frame_cond(std::size_t sample, int frame) const {
    model::ClipCond c;
    c.garment = garment(sample);
    c.agnostic.push_back(agnostic(sample, frame));
    c.masks.push_back(mask(sample, frame));
    c.poses.push_back(pose(sample, frame));
    return c;
}

std::vector<Tensor> CachedDataset::source_frames(std::size_t sample) const {
    std::vector<Tensor> out;
    for (int f = 0; f < frames_; ++f) out.push_back(source(sample, f));
    return out;
}

// --------------------------------------------------------------- trainer

Trainer::Trainer(const model::ModelConfig& mc, const TrainConfig& tc)
    : cfg_(tc), adam_(tc.lr, tc.beta1, tc.beta2), rng_(tc.seed) {
    cfg_.validate();
    model::ModelConfig use_cfg = mc;

    std::optional<checkpoint::Checkpoint> start;
    if (!cfg_.resume.empty()) {
        start = checkpoint::load(cfg_.resume);
        if (start->trainer.stage != cfg_.stage)
            throw StateError("resume checkpoint stage '" + start->trainer.stage +
                             "' does not match requested stage '" + cfg_.stage + "'");
        use_cfg = start->config;
    } else if (cfg_.stage == "video") {
        start = checkpoint::load(cfg_.init);
        if (start->trainer.stage != "image")
            throw StateError("video stage init must be an image-stage checkpoint");
        use_cfg = start->config;
    }

    model_ = std::make_unique<model::TryOnModel>(use_cfg);
    sched_ = diffusion::make_schedule(cfg_.num_steps_T, cfg_.beta_start, cfg_.beta_end);
    if (start) {
        checkpoint::restore_params(*model_, *start);
        if (!cfg_.resume.empty()) {
            if (start->trainer.has_adam) checkpoint::restore_adam(adam_, *start);
            if (!start->trainer.rng_state.empty()) rng_.set_state(start->trainer.rng_state);
            step_ = start->trainer.step;
        }
    }
    data_ = std::make_unique<CachedDataset>(cfg_.data_dir);
    if (cfg_.stage == "video" && data_->frames() < 2)
        throw StateError("video stage needs clips with at least 2 frames");
}

Rng& Trainer::atff_rng() {
    if (cfg_.atff_seed_policy == "fixed") {
        atff_fixed_rng_ = Rng(cfg_.seed);
        return atff_fixed_rng_;
    }
    return rng_;
}

bool Trainer::is_trainable(const std::string& name) const {
    bool is_atff = name.find(".atff.") != std::string::npos;
    return cfg_.stage == "video" ? is_atff : !is_atff;
}

void Trainer::save_checkpoint(const std::string& path) const {
    checkpoint::TrainerState ts;
    ts.step = step_;
    ts.stage = cfg_.stage;
    ts.rng_state = rng_.state_string();
    checkpoint::save(path, *model_, sched_, cfg_.beta_start, cfg_.beta_end, cfg_.gamma, ts,
                     &adam_);
}

StepStats Trainer::image_step() {
    StepStats st;
    model_->params().zero_grad();

    std::vector<ag::Var> eps_preds;
    std::vector<Tensor> eps_targets;
    std::vector<double> weights;
    std::vector<ag::Var> rasg_terms, recon_terms;

    for (int b = 0; b < cfg_.batch; ++b) {
        std::size_t s = rng_.below(data_->size());
        int f = static_cast<int>(rng_.below(static_cast<std::uint64_t>(data_->frames())));
        int t = static_cast<int>(rng_.below(static_cast<std::uint64_t>(sched_.num_steps)));

        Tensor src = data_->source(s, f);
        model::ClipCond cond = data_->frame_cond(s, f);

        ag::Var z0 = model_->encode_frame(src);
        Tensor eps = Tensor::randn(z0->val.shape, rng_);
        ag::Var z_t = diffusion::q_sample(z0, t, eps, sched_);

        model::DenoiseOutput out =
            model_->forward({z_t}, t, cond, /*capture_attention=*/cfg_.rasg_enabled, atff_rng());

        double w = diffusion::minsnr_weight(t, sched_, cfg_.gamma);
        st.snr_weights.push_back({t, w});
        eps_preds.push_back(out.eps_pred[0]);
        eps_targets.push_back(eps);
        weights.push_back(w);

        if (cfg_.rasg_enabled) {
            std::vector<rasg::AttentionRecordVar> recs = supervised_records(*model_, out.records);
            if (!recs.empty()) {
                std::vector<rasg::SegmentationMask> masks{{cond.masks[0], 0}};
                rasg_terms.push_back(rasg::rasg_loss(recs, masks, cfg_.lambda_n));
            }
        }
        if (cfg_.recon_weight > 0.0)
            recon_terms.push_back(ag::mse_mean(model_->autoencoder().decode(z0),
                                               ag::constant(src)));
    }

    ag::Var ldm = diffusion::ldm_loss(eps_preds, eps_targets, weights);
    ag::Var total = ldm;
    ag::Var rasg_mean;
    if (!rasg_terms.empty()) {
        rasg_mean = ag::affine(ag::vsum(rasg_terms), 1.0 / rasg_terms.size(), 0.0);
        total = ag::add(total, ag::affine(rasg_mean, cfg_.lambda_r, 0.0));
    }
    ag::Var recon_mean;
    if (!recon_terms.empty()) {
        recon_mean = ag::affine(ag::vsum(recon_terms), 1.0 / recon_terms.size(), 0.0);
        total = ag::add(total, ag::affine(recon_mean, cfg_.recon_weight, 0.0));
    }

    st.loss = total->val.data[0];
    st.ldm = ldm->val.data[0];
    st.rasg = rasg_mean ? rasg_mean->val.data[0] : 0.0;
    st.recon = recon_mean ? recon_mean->val.data[0] : 0.0;
    if (!std::isfinite(st.loss)) {
        save_checkpoint((fs::path(cfg_.out_dir) / "nan_abort.ckpt").string());
        throw StateError("training aborted: non-finite loss at step " + std::to_string(step_ + 1) +
                         " (diagnostic snapshot written)");
    }
    ag::backward(total);
    adam_.step(model_->params(), [this](const std::string& n) { return is_trainable(n); });
    return st;
}

StepStats Trainer::video_step() {
    StepStats st;
    model_->params().zero_grad();

    std::vector<ag::Var> eps_preds;
    std::vector<Tensor> eps_targets;
    std::vector<double> weights;
    std::vector<ag::Var> rasg_terms;

    for (int b = 0; b < cfg_.batch; ++b) {
        std::size_t s = rng_.below(data_->size());
        int t = static_cast<int>(rng_.below(static_cast<std::uint64_t>(sched_.num_steps)));
        model::ClipCond cond = data_->clip_cond(s);
        int n = data_->frames();

        std::vector<ag::Var> latents(n);
        std::vector<Tensor> eps_clip(n);
        for (int f = 0; f < n; ++f) {
            ag::Var z0 = model_->encode_frame(data_->source(s, f));
            eps_clip[f] = Tensor::randn(z0->val.shape, rng_);
            latents[f] = diffusion::q_sample(z0, t, eps_clip[f], sched_);
        }
        model::DenoiseOutput out =
            model_->forward(latents, t, cond, /*capture_attention=*/cfg_.rasg_enabled, atff_rng());

        double w = diffusion::minsnr_weight(t, sched_, cfg_.gamma);
        st.snr_weights.push_back({t, w});
        for (int f = 0; f < n; ++f) {
            eps_preds.push_back(out.eps_pred[f]);
            eps_targets.push_back(eps_clip[f]);
            weights.push_back(w);
        }
        if (cfg_.rasg_enabled) {
            std::vector<rasg::AttentionRecordVar> recs = supervised_records(*model_, out.records);
            if (!recs.empty()) {
                std::vector<rasg::SegmentationMask> masks;
                for (int f = 0; f < n; ++f) masks.push_back({cond.masks[f], f});
                rasg_terms.push_back(rasg::rasg_loss(recs, masks, cfg_.lambda_n));
            }
        }
    }

    ag::Var ldm = diffusion::ldm_loss(eps_preds, eps_targets, weights);
    ag::Var total = ldm;
    ag::Var rasg_mean;
    if (!rasg_terms.empty()) {
        rasg_mean = ag::affine(ag::vsum(rasg_terms), 1.0 / rasg_terms.size(), 0.0);
        total = ag::add(total, ag::affine(rasg_mean, cfg_.lambda_r, 0.0));
    }
    st.loss = total->val.data[0];
    st.ldm = ldm->val.data[0];
    st.rasg = rasg_mean ? rasg_mean->val.data[0] : 0.0;
    if (!std::isfinite(st.loss)) {
        save_checkpoint((fs::path(cfg_.out_dir) / "nan_abort.ckpt").string());
        throw StateError("training aborted: non-finite loss at step " + std::to_string(step_ + 1) +
                         " (diagnostic snapshot written)");
    }
    ag::backward(total);
    adam_.step(model_->params(), [this](const std::string& n) { return is_trainable(n); });
    return st;
}

StepStats Trainer::step() {
    auto t0 = std::chrono::steady_clock::now();
    StepStats st = cfg_.stage == "image" ? image_step() : video_step();
    ++step_;
    st.step = step_;
    st.millis =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    history_.push_back(st);
    return st;
}

std::string Trainer::run() {
    if (!cfg_.out_dir.empty()) fs::create_directories(cfg_.out_dir);
    std::ofstream log;
    if (!cfg_.out_dir.empty())
        log.open((fs::path(cfg_.out_dir) / "metrics.jsonl").string(), std::ios::app);

    while (step_ < cfg_.steps) {
        StepStats st = step();
        if (log) {
            json j{{"step", st.step}, {"loss", st.loss},   {"ldm", st.ldm},
                   {"rasg", st.rasg}, {"recon", st.recon}, {"ms", st.millis}};
            json sw = json::array();
            for (auto& [t, w] : st.snr_weights) sw.push_back({t, w});
            j["snr_weights"] = sw;
            log << j.dump() << "\n";
            log.flush();
        }
        if (!cfg_.out_dir.empty() && cfg_.ckpt_every > 0 && st.step % cfg_.ckpt_every == 0 &&
            st.step < cfg_.steps) {
            char name[40];
            std::snprintf(name, sizeof(name), "step_%06lld.ckpt",
                          static_cast<long long>(st.step));
            save_checkpoint((fs::path(cfg_.out_dir) / name).string());
        }
    }
    std::string final_path = (fs::path(cfg_.out_dir.empty() ? "." : cfg_.out_dir) /
                              (cfg_.stage + "_final.ckpt"))
                                 .string();
    save_checkpoint(final_path);
    return final_path;
}

// --------------------------------------------------------------- evaluation

std::vector<Tensor> naive_paste_baseline(const model::ClipCond& cond,
                                         const std::vector<Tensor>& source,
                                         const Tensor& garment) {
    std::vector<Tensor> out;
    int gh = garment.shape[1], gw = garment.shape[2];
    for (std::size_t f = 0; f < source.size(); ++f) {
        Tensor frame = source[f];
        const Tensor& mask = cond.masks[f];
        int h = mask.shape[0], w = mask.shape[1];
        int y0 = h, y1 = -1, x0 = w, x1 = -1;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (mask.at2(y, x) != 0.0) {
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                }
        if (y1 < y0) {
            out.push_back(std::move(frame));
            continue;
        }
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                if (mask.at2(y, x) == 0.0) continue;
                int gy = (y - y0) * gh / (y1 - y0 + 1);
                int gx = (x - x0) * gw / (x1 - x0 + 1);
                for (int c = 0; c < 3; ++c) frame.at3(c, y, x) = garment.at3(c, gy, gx);
            }
        out.push_back(std::move(frame));
    }
    return out;
}

metrics::FeatureExtractor latent_feature_extractor(const model::TryOnModel& model) {
    return [&model](const Tensor& frame) {
        ag::NoGradGuard ng;
        Tensor z = model.encode_frame(frame)->val;
        int c = z.shape[0], h = z.shape[1], w = z.shape[2];
        int h2 = std::max(1, h / 2), w2 = std::max(1, w / 2);
        std::vector<double> feat;
        feat.reserve(static_cast<std::size_t>(c) * h2 * w2);
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h2; ++y)
                for (int x = 0; x < w2; ++x) {
                    double acc = 0.0;
                    int cnt = 0;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            int yy = 2 * y + dy, xx = 2 * x + dx;
                            if (yy < h && xx < w) {
                                acc += z.at3(ci, yy, xx);
                                ++cnt;
                            }
                        }
                    feat.push_back(acc / cnt);
                }
        return feat;
    };
}

EvalReport evaluate_model(const model::TryOnModel& model, const diffusion::NoiseSchedule& sched,
                          const CachedDataset& ds, int sampler_steps, std::uint64_t seed) {
    EvalReport rep;
    metrics::FeatureExtractor extractor = latent_feature_extractor(model);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        model::ClipCond cond = ds.clip_cond(i);
        std::vector<Tensor> source = ds.source_frames(i);
        std::vector<Tensor> gen =
            model.generate(cond, source, sampler_steps, sched, seed + i, /*composite=*/true);
        std::vector<Tensor> naive = naive_paste_baseline(cond, source, cond.garment);

        SampleMetrics m;
        double s_full = 0, s_edit = 0, s_naive = 0, s_psnr = 0;
        int n = static_cast<int>(source.size());
        for (int f = 0; f < n; ++f) {
            s_full += metrics::ssim(gen[f], source[f]);
            s_edit += metrics::ssim_masked(gen[f], source[f], cond.masks[f]);
            s_naive += metrics::ssim_masked(naive[f], source[f], cond.masks[f]);
            double p = metrics::psnr(gen[f], source[f]);
            s_psnr += std::isinf(p) ? 99.0 : p;
        }
        m.ssim = s_full / n;
        m.ssim_edit = s_edit / n;
        m.naive_ssim_edit = s_naive / n;
        m.psnr = s_psnr / n;
        m.flicker = n >= 2 ? metrics::flicker(gen, source) : 0.0;
        m.feature_dist = n >= 2 ? metrics::feature_distance(gen, source, extractor) : 0.0;
        rep.per_sample.push_back(m);
    }
    std::size_t n = rep.per_sample.size();
    for (const auto& m : rep.per_sample) {
        rep.mean_ssim += m.ssim / n;
        rep.mean_ssim_edit += m.ssim_edit / n;
        rep.mean_psnr += m.psnr / n;
        rep.mean_flicker += m.flicker / n;
        rep.mean_feature_dist += m.feature_dist / n;
        rep.mean_naive_ssim_edit += m.naive_ssim_edit / n;
    }
    return rep;
}

EvalReport evaluate_checkpoint(const std::string& ckpt_path, const std::string& valset_dir,
                               int sampler_steps, std::uint64_t seed) {
    checkpoint::Checkpoint ck = checkpoint::load(ckpt_path);
    model::TryOnModel model(ck.config);
    checkpoint::restore_params(model, ck);
    CachedDataset ds(valset_dir);
    return evaluate_model(model, ck.schedule_echo, ds, sampler_steps, seed);
}

std::string EvalReport::to_json() const {
    json j;
    json arr = json::array();
    for (const auto& m : per_sample)
        arr.push_back({{"ssim", m.ssim},
                       {"ssim_edit", m.ssim_edit},
                       {"naive_ssim_edit", m.naive_ssim_edit},
                       {"psnr", m.psnr},
                       {"flicker", m.flicker},
                       {"feature_distance", m.feature_dist}});
    j["samples"] = arr;
    j["aggregate"] = {{"ssim", mean_ssim},
                      {"ssim_edit", mean_ssim_edit},
                      {"naive_ssim_edit", mean_naive_ssim_edit},
                      {"psnr", mean_psnr},
                      {"flicker", mean_flicker},
                      {"feature_distance", mean_feature_dist}};
    return j.dump(2);
}

double attention_mask_iou(const model::TryOnModel& model, const CachedDataset& ds,
                          const std::vector<std::size_t>& samples, int t,
                          const diffusion::NoiseSchedule& sched, std::uint64_t seed) {
    ag::NoGradGuard ng;
    Rng rng(seed);
    double iou_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t s : samples) {
        model::ClipCond cond = ds.clip_cond(s);
        int n = ds.frames();
        std::vector<ag::Var> latents(n);
        for (int f = 0; f < n; ++f) {
            ag::Var z0 = model.encode_frame(ds.source(s, f));
            Tensor eps = Tensor::randn(z0->val.shape, rng);
            latents[f] = ag::constant(diffusion::q_sample(z0->val, t, eps, sched));
        }
        model::DenoiseOutput out = model.forward(latents, t, cond, /*capture=*/true, rng);
        for (const auto& rec : out.records) {
            const Tensor& probs = rec.probs->val;
            Tensor m = rasg::resample_mask_nearest(cond.masks[rec.frame_index], probs.shape[0],
                                                   probs.shape[1]);
            double inter = 0, uni = 0;
            for (std::size_t i = 0; i < m.numel(); ++i) {
                bool a = probs.data[i] > 0.5;
                bool b = m.data[i] != 0.0;
                inter += (a && b) ? 1 : 0;
                uni += (a || b) ? 1 : 0;
            }
            iou_sum += uni == 0.0 ? 1.0 : inter / uni;
            ++count;
        }
    }
    return count == 0 ? 0.0 : iou_sum / count;
}

}  // namespace ct::train
