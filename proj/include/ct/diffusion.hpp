#pragma once

#include <optional>
#include <vector>

#include "ct/autograd.hpp"
#include "ct/tensor.hpp"

namespace ct::diffusion {

// Forward-process variance schedule: betas in (0,1), alpha_bars the running
// product of (1 - beta). alpha_bars is strictly decreasing.
struct NoiseSchedule {
    int num_steps = 0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;
};

NoiseSchedule make_schedule(int num_steps, double beta_start, double beta_end);

// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
ag::Var q_sample(const ag::Var& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Mean over batch of w_b * mean((eps_b - eps_pred_b)^2). Weights default to 1.
double ldm_loss(const std::vector<Tensor>& eps_pred, const std::vector<Tensor>& eps,
                const std::vector<double>& weights = {});
ag::Var ldm_loss(const std::vector<ag::Var>& eps_pred, const std::vector<Tensor>& eps,
                 const std::vector<double>& weights = {});

// min(SNR(t), gamma) / SNR(t) with SNR = abar/(1-abar); <= 1 everywhere.
double minsnr_weight(int t, const NoiseSchedule& sched, double gamma);

void check_timestep(int t, const NoiseSchedule& sched);

}  // namespace ct::diffusion
