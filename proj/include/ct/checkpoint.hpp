#pragma once

#include <map>
#include <optional>
#include <string>

#include "ct/diffusion.hpp"
#include "ct/model.hpp"
#include "ct/nn.hpp"

namespace ct::checkpoint {

inline constexpr char kFormatTag[] = "ctckpt/1";

struct TrainerState {
    std::int64_t step = 0;
    std::string stage = "image";  // "image" | "video"
    std::string rng_state;        // trainer rng, empty when absent
    std::int64_t adam_t = 0;
    bool has_adam = false;
};

struct Checkpoint {
    model::ModelConfig config;
    diffusion::NoiseSchedule schedule_echo;  // rebuilt from stored scalars
    double beta_start = 1e-4, beta_end = 2e-2, gamma = 5.0;
    int num_steps = 1000;
    TrainerState trainer;
    std::map<std::string, Tensor> tensors;  // params + optimizer moments
};

// Writes params (and optionally Adam moments under "adam.m/<name>",
// "adam.v/<name>") with exact IEEE-754 bytes; the header JSON carries the
// config echo, schedule scalars, step counter and rng state.
void save(const std::string& path, const model::TryOnModel& model,
          const diffusion::NoiseSchedule& sched, double beta_start, double beta_end, double gamma,
          const TrainerState& trainer, const nn::Adam* adam);

Checkpoint load(const std::string& path);

// Restores parameter values into an already-built model; shapes must match.
void restore_params(model::TryOnModel& model, const Checkpoint& ckpt);
void restore_adam(nn::Adam& adam, const Checkpoint& ckpt);

model::ModelConfig config_from_checkpoint(const Checkpoint& ckpt);

}  // namespace ct::checkpoint
