#include "ct/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ct/checkpoint.hpp"
#include "ct/config.hpp"
#include "ct/train.hpp"

namespace ct::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
    std::string config_file;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--config", c.config_file, "Flat key-value config file");
    cmd->add_option("--set", c.sets, "Override a config key, e.g. --set rasg.lambda_r=0.2")
        ->take_all();
}

config::Config build_config(const CommonOpts& c) {
    config::Config cfg;
    if (!c.config_file.empty()) cfg.load_file(c.config_file);
    for (const std::string& kv : c.sets) {
        std::size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw ValidationError("--set expects key=value, got: " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

std::uint64_t default_seed() {
    if (const char* s = std::getenv("CHRONOTAILOR_SEED")) {
        try {
            return std::stoull(s);
        } catch (const std::exception&) {
            throw ValidationError("CHRONOTAILOR_SEED is not an unsigned integer");
        }
    }
    return 0;
}

void parse_res(const std::string& res, int& w, int& h) {
    std::size_t x = res.find('x');
    if (x == std::string::npos) throw ValidationError("--res expects WxH, got: " + res);
    try {
        w = std::stoi(res.substr(0, x));
        h = std::stoi(res.substr(x + 1));
    } catch (const std::exception&) {
        throw ValidationError("--res expects WxH, got: " + res);
    }
}

void write_echo(const config::Config& cfg, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream out((fs::path(dir) / "effective.config").string());
    out << cfg.echo();
}

model::ModelConfig model_config_from(const config::Config& cfg, int frame_w, int frame_h,
                                     int clip_length) {
    model::ModelConfig mc;
    mc.frame_w = frame_w;
    mc.frame_h = frame_h;
    mc.clip_length = clip_length;
    mc.latent_channels = cfg.get_int("amfe.latent_channels", 4);
    mc.base_width = cfg.get_int("model.base_width", 32);
    mc.channel_mult.clear();
    for (const std::string& s : cfg.get_list("model.channel_mult", {"1", "2", "3"}))
        mc.channel_mult.push_back(std::stoi(s));
    mc.attn_levels.clear();
    for (const std::string& s : cfg.get_list("model.attn_levels", {"0", "1"}))
        mc.attn_levels.push_back(std::stoi(s));
    mc.d_k = cfg.get_int("atff.d_k", 32);
    mc.time_dim = cfg.get_int("model.time_dim", 64);
    mc.embed_dim = cfg.get_int("gpfa.embed_dim", 32);
    mc.embed_tokens = cfg.get_int("gpfa.tokens", 12);
    mc.atff_num_groups = cfg.get_int("atff.num_groups", 8);
    mc.enable_atff = cfg.get_bool("atff.enabled", true);
    bool gpfa_on = cfg.get_bool("gpfa.enabled", true);
    mc.enable_gpfa = gpfa_on;
    mc.enable_pose_embed = gpfa_on;
    mc.enable_amfe = cfg.get_bool("amfe.enabled", true);
    mc.rasg_layers = cfg.get_list("rasg.layers", {"enc0", "enc1", "dec1", "dec0"});
    mc.init_seed = cfg.get_u64("model.init_seed", 1234);
    return mc;
}

const std::vector<config::KeyDoc> kGenDataKeys = {
    {"data.motion", "motion amplitude multiplier (default 1.0)"},
    {"data.mask_min", "minimum garment mask area fraction (default 0.10)"},
    {"data.mask_max", "maximum garment mask area fraction (default 0.25)"},
    {"data.texture", "texture family: stripes|checker|dots|mixed (default mixed)"},
};

const std::vector<config::KeyDoc> kModelKeys = {
    {"diffusion.T", "number of diffusion steps (default 1000)"},
    {"diffusion.beta_start", "first beta of the linear schedule (default 1e-4)"},
    {"diffusion.beta_end", "last beta of the linear schedule (default 2e-2)"},
    {"diffusion.gamma", "min-SNR clamp gamma (default 5.0)"},
    {"rasg.enabled", "attention-guidance loss on/off (default true)"},
    {"rasg.lambda_n", "non-edit-region regularization weight (default 0.5)"},
    {"rasg.lambda_r", "guidance loss weight in the total loss (default 0.1)"},
    {"rasg.layers", "supervised attention sites (default enc0,enc1,dec1,dec0)"},
    {"atff.enabled", "temporal fusion layers on/off (default true)"},
    {"atff.num_groups", "group count of the fusion normalization (default 8)"},
    {"atff.d_k", "attention key dimensionality (default 32)"},
    {"atff.seed_policy", "pair sampling: per_step|fixed (default per_step)"},
    {"amfe.enabled", "multi-scale garment features on/off (default true)"},
    {"amfe.latent_channels", "autoencoder latent channels (default 4)"},
    {"gpfa.enabled", "pose conditioning (injection + cross-attention) on/off (default true)"},
    {"gpfa.embed_dim", "global embedding token dimension (default 32)"},
    {"gpfa.tokens", "global embedding token count (default 12)"},
    {"model.base_width", "UNet base channel width (default 32)"},
    {"model.channel_mult", "per-level width multipliers (default 1,2,3)"},
    {"model.attn_levels", "UNet levels with attention blocks (default 0,1)"},
    {"model.time_dim", "timestep embedding width (default 64)"},
    {"model.init_seed", "weight initialization seed (default 1234)"},
};

const std::vector<config::KeyDoc> kTrainKeys = {
    {"train.steps", "total optimization steps (default 2000)"},
    {"train.batch", "frames (image stage) or clips (video stage) per step (default 4)"},
    {"train.lr", "Adam learning rate (default 1e-3; paper-scale reference 1e-5)"},
    {"train.beta1", "Adam beta1 (default 0.9)"},
    {"train.beta2", "Adam beta2 (default 0.999)"},
    {"train.recon_weight", "autoencoder reconstruction loss weight (default 1.0)"},
    {"train.ckpt_every", "checkpoint cadence in steps (default 500)"},
    // Paper-scale reference values, not defaults here: batch 8, lr 1e-5,
    // 60000 image steps + 30000 video steps, 24-frame clips.
};

std::string keys_footer(std::initializer_list<const std::vector<config::KeyDoc>*> groups) {
    std::vector<config::KeyDoc> all;
    for (const auto* g : groups) all.insert(all.end(), g->begin(), g->end());
    return config::format_key_docs(all);
}

// ------------------------------------------------------------- subcommands

int cmd_gen_data(const CommonOpts& common, const std::string& out, int count,
                 std::uint64_t seed, int frames, const std::string& res) {
    config::Config cfg = build_config(common);
    synthdata::SceneConfig sc;
    parse_res(res, sc.width, sc.height);
    sc.frames = frames;
    sc.seed = seed;
    sc.motion_amplitude = cfg.get_double("data.motion", 1.0);
    sc.mask_area_min = cfg.get_double("data.mask_min", 0.10);
    sc.mask_area_max = cfg.get_double("data.mask_max", 0.25);
    std::string tex = cfg.get_str("data.texture", "mixed");
    if (tex == "mixed") {
        sc.mixed_textures = true;
    } else {
        sc.mixed_textures = false;
        sc.texture = synthdata::texture_from_string(tex);
    }
    synthdata::generate_dataset(out, count, sc);
    write_echo(cfg, out);
    std::cout << "wrote " << count << " samples to " << out << "\n";
    return 0;
}

train::TrainConfig train_config_from(const config::Config& cfg) {
    train::TrainConfig tc;
    tc.steps = cfg.get_int("train.steps", 2000);
    tc.batch = cfg.get_int("train.batch", 4);
    tc.lr = cfg.get_double("train.lr", 1e-3);
    tc.beta1 = cfg.get_double("train.beta1", 0.9);
    tc.beta2 = cfg.get_double("train.beta2", 0.999);
    tc.gamma = cfg.get_double("diffusion.gamma", 5.0);
    tc.lambda_n = cfg.get_double("rasg.lambda_n", 0.5);
    tc.lambda_r = cfg.get_double("rasg.lambda_r", 0.1);
    tc.rasg_enabled = cfg.get_bool("rasg.enabled", true);
    tc.recon_weight = cfg.get_double("train.recon_weight", 1.0);
    tc.ckpt_every = cfg.get_int("train.ckpt_every", 500);
    tc.num_steps_T = cfg.get_int("diffusion.T", 1000);
    tc.beta_start = cfg.get_double("diffusion.beta_start", 1e-4);
    tc.beta_end = cfg.get_double("diffusion.beta_end", 2e-2);
    tc.atff_seed_policy = cfg.get_str("atff.seed_policy", "per_step");
    return tc;
}

int cmd_train(const CommonOpts& common, const std::string& stage, const std::string& data,
              const std::string& out, int steps_flag, std::uint64_t seed,
              const std::string& resume, const std::string& init) {
    config::Config cfg = build_config(common);
    train::TrainConfig tc = train_config_from(cfg);
    tc.stage = stage;
    tc.data_dir = data;
    tc.out_dir = out;
    tc.seed = seed;
    tc.resume = resume;
    tc.init = init;
    if (steps_flag > 0) tc.steps = steps_flag;

    train::CachedDataset probe(data);
    int clip = tc.stage == "image" ? 1 : probe.frames();
    model::ModelConfig mc = model_config_from(cfg, probe.frame_w(), probe.frame_h(),
                                              std::max(clip, probe.frames()));
    write_echo(cfg, out);
    train::Trainer trainer(mc, tc);
    std::string final_path = trainer.run();
    std::cout << "final checkpoint: " << final_path << "\n";
    return 0;
}

int cmd_tryon(const std::string& ckpt, const std::string& sample_dir, const std::string& out,
              int steps, std::uint64_t seed, bool no_composite, const CommonOpts& common) {
    config::Config cfg = build_config(common);
    checkpoint::Checkpoint ck = checkpoint::load(ckpt);
    model::TryOnModel model(ck.config);
    checkpoint::restore_params(model, ck);

    synthdata::SampleTuple tup = synthdata::read_sample(sample_dir);
    model::ClipCond cond;
    cond.garment = tup.garment;
    cond.agnostic = tup.agnostic;
    cond.masks = tup.masks;
    cond.poses = tup.poses;
    std::vector<Tensor> frames =
        model.generate(cond, tup.source, steps, ck.schedule_echo, seed, !no_composite);

    fs::create_directories(out);
    for (std::size_t i = 0; i < frames.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04zu.ppm", i);
        synthdata::write_ppm((fs::path(out) / name).string(), frames[i]);
    }
    json meta{{"checkpoint", ckpt}, {"sample", sample_dir},      {"steps", steps},
              {"seed", seed},       {"composite", !no_composite}, {"frames", frames.size()}};
    std::ofstream((fs::path(out) / "tryon.json").string()) << meta.dump(2);
    write_echo(cfg, out);
    std::cout << "wrote " << frames.size() << " frames to " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out,
             const std::string& csv, int steps, std::uint64_t seed, const CommonOpts& common) {
    config::Config cfg = build_config(common);
    train::EvalReport rep = train::evaluate_checkpoint(ckpt, data, steps, seed);
    fs::path out_path(out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    std::ofstream(out) << rep.to_json();
    if (!csv.empty()) {
        std::ofstream c(csv);
        c << "sample,ssim,ssim_edit,naive_ssim_edit,psnr,flicker,feature_distance\n";
        for (std::size_t i = 0; i < rep.per_sample.size(); ++i) {
            const auto& m = rep.per_sample[i];
            c << i << "," << m.ssim << "," << m.ssim_edit << "," << m.naive_ssim_edit << ","
              << m.psnr << "," << m.flicker << "," << m.feature_dist << "\n";
        }
    }
    std::ofstream(out + ".config") << cfg.echo();
    std::cout << "mean ssim_edit " << rep.mean_ssim_edit << " vs naive "
              << rep.mean_naive_ssim_edit << "; report: " << out << "\n";
    return 0;
}

int cmd_inspect_attn(const std::string& ckpt, const std::string& sample_dir,
                     const std::string& out, int t, std::uint64_t seed,
                     const CommonOpts& common) {
    config::Config cfg = build_config(common);
    checkpoint::Checkpoint ck = checkpoint::load(ckpt);
    model::TryOnModel model(ck.config);
    checkpoint::restore_params(model, ck);
    if (t < 0) t = ck.schedule_echo.num_steps / 2;

    synthdata::SampleTuple tup = synthdata::read_sample(sample_dir);
    model::ClipCond cond;
    cond.garment = tup.garment;
    cond.agnostic = tup.agnostic;
    cond.masks = tup.masks;
    cond.poses = tup.poses;

    ag::NoGradGuard ng;
    Rng rng(seed);
    std::vector<ag::Var> latents(tup.frames());
    for (int f = 0; f < tup.frames(); ++f) {
        Tensor z0 = model.encode_frame(tup.source[f])->val;
        Tensor eps = Tensor::randn(z0.shape, rng);
        latents[f] = ag::constant(diffusion::q_sample(z0, t, eps, ck.schedule_echo));
    }
    model::DenoiseOutput den = model.forward(latents, t, cond, /*capture=*/true, rng);

    const auto& layers = model.config().rasg_layers;
    fs::create_directories(out);
    json index = json::array();
    for (const auto& rec : den.records) {
        if (std::find(layers.begin(), layers.end(), rec.layer_id) == layers.end()) continue;
        char name[64];
        std::snprintf(name, sizeof(name), "attn_%s_frame_%04d.pgm", rec.layer_id.c_str(),
                      rec.frame_index);
        synthdata::write_pgm((fs::path(out) / name).string(), rec.probs->val);
        index.push_back({{"layer", rec.layer_id}, {"frame", rec.frame_index}, {"file", name}});
    }
    json top{{"t", t}, {"seed", seed}, {"maps", index}};
    std::ofstream((fs::path(out) / "index.json").string()) << top.dump(2);
    write_echo(cfg, out);
    std::cout << "wrote " << index.size() << " attention maps to " << out << "\n";
    return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"chronotailor: desk-scale video try-on diffusion sandbox"};
    app.require_subcommand(1);

    CommonOpts common;
    std::uint64_t seed_env = 0;
    try {
        seed_env = default_seed();
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic five-tuple dataset");
    add_common(gen, common);
    std::string gen_out, gen_res = "64x48";
    int gen_count = 16, gen_frames = 8;
    std::uint64_t gen_seed = seed_env;
    gen->add_option("--out", gen_out, "Output dataset directory")->required();
    gen->add_option("--count", gen_count, "Number of samples");
    gen->add_option("--seed", gen_seed, "Base seed (sample i uses seed+i)");
    gen->add_option("--frames", gen_frames, "Frames per clip");
    gen->add_option("--res", gen_res, "Resolution WxH");
    gen->footer(keys_footer({&kGenDataKeys}));

    // train
    auto* tr = app.add_subcommand("train", "Train a stage (image or video)");
    CommonOpts tr_common;
    add_common(tr, tr_common);
    std::string tr_stage = "image", tr_data, tr_out, tr_resume, tr_init;
    int tr_steps = 0;
    std::uint64_t tr_seed = seed_env;
    tr->add_option("--stage", tr_stage, "image | video")->check(CLI::IsMember({"image", "video"}));
    tr->add_option("--data", tr_data, "Training dataset directory")->required();
    tr->add_option("--out", tr_out, "Run output directory")->required();
    tr->add_option("--steps", tr_steps, "Override train.steps");
    tr->add_option("--seed", tr_seed, "Trainer seed");
    tr->add_option("--resume", tr_resume, "Checkpoint to resume (same stage)");
    tr->add_option("--init", tr_init, "Image-stage checkpoint to start video stage from");
    tr->footer(keys_footer({&kTrainKeys, &kModelKeys}));

    // tryon
    auto* ty = app.add_subcommand("tryon", "Generate a try-on video for one sample");
    CommonOpts ty_common;
    add_common(ty, ty_common);
    std::string ty_ckpt, ty_sample, ty_out;
    int ty_steps = 20;
    std::uint64_t ty_seed = seed_env;
    bool ty_nocomp = false;
    ty->add_option("--ckpt", ty_ckpt, "Model checkpoint")->required();
    ty->add_option("--sample", ty_sample, "Sample directory")->required();
    ty->add_option("--out", ty_out, "Output directory")->required();
    ty->add_option("--steps", ty_steps, "Sampler steps");
    ty->add_option("--seed", ty_seed, "Sampler seed");
    ty->add_flag("--no-composite", ty_nocomp, "Skip source compositing outside the mask");
    ty->footer("Reads the model configuration from the checkpoint.");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    CommonOpts ev_common;
    add_common(ev, ev_common);
    std::string ev_ckpt, ev_data, ev_out, ev_csv;
    int ev_steps = 20;
    std::uint64_t ev_seed = seed_env;
    ev->add_option("--ckpt", ev_ckpt, "Model checkpoint")->required();
    ev->add_option("--data", ev_data, "Evaluation dataset directory")->required();
    ev->add_option("--out", ev_out, "JSON report path")->required();
    ev->add_option("--csv", ev_csv, "Optional CSV export path");
    ev->add_option("--steps", ev_steps, "Sampler steps");
    ev->add_option("--seed", ev_seed, "Sampler seed");
    ev->footer("Metrics: ssim, masked ssim, psnr, flicker, feature distance, naive baseline.");

    // inspect-attn
    auto* ia = app.add_subcommand("inspect-attn", "Dump aggregated attention maps");
    CommonOpts ia_common;
    add_common(ia, ia_common);
    std::string ia_ckpt, ia_sample, ia_out;
    int ia_t = -1;
    std::uint64_t ia_seed = seed_env;
    ia->add_option("--ckpt", ia_ckpt, "Model checkpoint")->required();
    ia->add_option("--sample", ia_sample, "Sample directory")->required();
    ia->add_option("--out", ia_out, "Output directory")->required();
    ia->add_option("--t", ia_t, "Diffusion timestep of the probe (default T/2)");
    ia->add_option("--seed", ia_seed, "Noise seed");
    ia->footer("Writes one grayscale map per supervised layer per frame plus index.json.\n" +
               keys_footer({&kModelKeys}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(common, gen_out, gen_count, gen_seed, gen_frames,
                                               gen_res);
        if (tr->parsed())
            return cmd_train(tr_common, tr_stage, tr_data, tr_out, tr_steps, tr_seed, tr_resume,
                             tr_init);
        if (ty->parsed())
            return cmd_tryon(ty_ckpt, ty_sample, ty_out, ty_steps, ty_seed, ty_nocomp, ty_common);
        if (ev->parsed())
            return cmd_eval(ev_ckpt, ev_data, ev_out, ev_csv, ev_steps, ev_seed, ev_common);
        if (ia->parsed())
            return cmd_inspect_attn(ia_ckpt, ia_sample, ia_out, ia_t, ia_seed, ia_common);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace ct::cli
