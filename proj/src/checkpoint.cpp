#include "ct/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace ct::checkpoint {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'T', 'C', 'K', 'P', 'T', '0', '1'};

json config_to_json(const model::ModelConfig& c) {
    return json{{"frame_h", c.frame_h},
                {"frame_w", c.frame_w},
                {"latent_channels", c.latent_channels},
                {"base_width", c.base_width},
                {"channel_mult", c.channel_mult},
                {"attn_levels", c.attn_levels},
                {"clip_length", c.clip_length},
                {"d_k", c.d_k},
                {"time_dim", c.time_dim},
                {"embed_dim", c.embed_dim},
                {"embed_tokens", c.embed_tokens},
                {"pose_channels", c.pose_channels},
                {"atff_num_groups", c.atff_num_groups},
                {"enable_atff", c.enable_atff},
                {"enable_gpfa", c.enable_gpfa},
                {"enable_pose_embed", c.enable_pose_embed},
                {"enable_amfe", c.enable_amfe},
                {"rasg_layers", c.rasg_layers},
                {"init_seed", c.init_seed}};
}

model::ModelConfig config_from_json(const json& j) {
    model::ModelConfig c;
    c.frame_h = j.at("frame_h");
    c.frame_w = j.at("frame_w");
    c.latent_channels = j.at("latent_channels");
    c.base_width = j.at("base_width");
    c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
    c.attn_levels = j.at("attn_levels").get<std::vector<int>>();
    c.clip_length = j.at("clip_length");
    c.d_k = j.at("d_k");
    c.time_dim = j.at("time_dim");
    c.embed_dim = j.at("embed_dim");
    c.embed_tokens = j.at("embed_tokens");
    c.pose_channels = j.at("pose_channels");
    c.atff_num_groups = j.at("atff_num_groups");
    c.enable_atff = j.at("enable_atff");
    c.enable_gpfa = j.at("enable_gpfa");
    c.enable_pose_embed = j.at("enable_pose_embed");
    c.enable_amfe = j.at("enable_amfe");
    c.rasg_layers = j.at("rasg_layers").get<std::vector<std::string>>();
    c.init_seed = j.at("init_seed");
    return c;
}

}  // namespace

void save(const std::string& path, const model::TryOnModel& model,
          const diffusion::NoiseSchedule& sched, double beta_start, double beta_end, double gamma,
          const TrainerState& trainer, const nn::Adam* adam) {
    json header;
    header["format"] = kFormatTag;
    header["config"] = config_to_json(model.config());
    header["schedule"] = {{"num_steps", sched.num_steps},
                          {"beta_start", beta_start},
                          {"beta_end", beta_end},
                          {"gamma", gamma}};
    header["trainer"] = {{"step", trainer.step},
                         {"stage", trainer.stage},
                         {"rng_state", trainer.rng_state},
                         {"adam_t", adam ? adam->t() : 0},
                         {"has_adam", adam != nullptr}};

    json entries = json::array();
    std::uint64_t offset = 0;
    auto add_entry = [&](const std::string& name, const Tensor& t) {
        entries.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
        offset += t.numel() * sizeof(double);
    };
    for (const auto& p : model.params().all()) add_entry(p->name, p->val);
    if (adam) {
        for (const auto& [name, st] : adam->state()) {
            add_entry("adam.m/" + name, st.m);
            add_entry("adam.v/" + name, st.v);
        }
    }
    header["tensors"] = entries;

    std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw StateError("checkpoint: cannot open for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    auto write_tensor = [&](const Tensor& t) {
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.numel() * sizeof(double)));
    };
    for (const auto& p : model.params().all()) write_tensor(p->val);
    if (adam)
        for (const auto& [name, st] : adam->state()) {
            write_tensor(st.m);
            write_tensor(st.v);
        }
    if (!out) throw StateError("checkpoint: write failed: " + path);
}

Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StateError("checkpoint: cannot open: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw LoadError("checkpoint: bad magic in " + path);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw LoadError("checkpoint: truncated header in " + path);

    json header = json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw LoadError("checkpoint: corrupt header in " + path);
    if (header.value("format", "") != kFormatTag)
        throw LoadError("checkpoint: unsupported format tag in " + path);

    Checkpoint ck;
    ck.config = config_from_json(header.at("config"));
    const json& s = header.at("schedule");
    ck.num_steps = s.at("num_steps");
    ck.beta_start = s.at("beta_start");
    ck.beta_end = s.at("beta_end");
    ck.gamma = s.at("gamma");
    ck.schedule_echo = diffusion::make_schedule(ck.num_steps, ck.beta_start, ck.beta_end);
    const json& tr = header.at("trainer");
    ck.trainer.step = tr.at("step");
    ck.trainer.stage = tr.at("stage");
    ck.trainer.rng_state = tr.at("rng_state");
    ck.trainer.adam_t = tr.at("adam_t");
    ck.trainer.has_adam = tr.at("has_adam");

    for (const auto& e : header.at("tensors")) {
        std::string name = e.at("name");
        std::vector<int> shape = e.at("shape").get<std::vector<int>>();
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
        if (!in) throw LoadError("checkpoint: truncated tensor '" + name + "' in " + path);
        ck.tensors.emplace(std::move(name), std::move(t));
    }
    return ck;
}

void restore_params(model::TryOnModel& model, const Checkpoint& ckpt) {
    for (const auto& p : model.params().all()) {
        auto it = ckpt.tensors.find(p->name);
        if (it == ckpt.tensors.end())
            throw LoadError("checkpoint: missing parameter '" + p->name + "'");
        if (it->second.shape != p->val.shape)
            throw LoadError("checkpoint: shape mismatch for '" + p->name + "'");
        p->val = it->second;
    }
}

void restore_adam(nn::Adam& adam, const Checkpoint& ckpt) {
    if (!ckpt.trainer.has_adam) throw LoadError("checkpoint: no optimizer state stored");
    adam.set_t(ckpt.trainer.adam_t);
    adam.state().clear();
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind("adam.m/", 0) == 0) {
            adam.state()[name.substr(7)].m = t;
        } else if (name.rfind("adam.v/", 0) == 0) {
            adam.state()[name.substr(7)].v = t;
        }
    }
}

model::ModelConfig config_from_checkpoint(const Checkpoint& ckpt) { return ckpt.config; }

}  // namespace ct::checkpoint
