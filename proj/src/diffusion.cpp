#include "ct/diffusion.hpp"

#include <cmath>
#include <string>

namespace ct::diffusion {

NoiseSchedule make_schedule(int num_steps, double beta_start, double beta_end) {
    if (num_steps < 1) throw ValidationError("make_schedule: num_steps must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw ValidationError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.num_steps = num_steps;
    s.betas.resize(num_steps);
    s.alpha_bars.resize(num_steps);
    double abar = 1.0;
    for (int t = 0; t < num_steps; ++t) {
        double frac = num_steps == 1 ? 0.0 : static_cast<double>(t) / (num_steps - 1);
        double beta = beta_start + (beta_end - beta_start) * frac;
        abar *= (1.0 - beta);
        s.betas[t] = beta;
        s.alpha_bars[t] = abar;
    }
    return s;
}

void check_timestep(int t, const NoiseSchedule& sched) {
    if (t < 0 || t >= sched.num_steps)
        throw ValidationError("timestep " + std::to_string(t) + " out of range [0, " +
                              std::to_string(sched.num_steps) + ")");
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    check_timestep(t, sched);
    require_same_shape(x0, eps, "q_sample");
    double abar = sched.alpha_bars[t];
    double a = std::sqrt(abar);
    double b = std::sqrt(1.0 - abar);
    Tensor out = x0;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

ag::Var q_sample(const ag::Var& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    check_timestep(t, sched);
    require_same_shape(x0->val, eps, "q_sample");
    double abar = sched.alpha_bars[t];
    double b = std::sqrt(1.0 - abar);
    Tensor noise = eps;
    for (double& v : noise.data) v *= b;
    return ag::add(ag::affine(x0, std::sqrt(abar), 0.0), ag::constant(std::move(noise)));
}

double ldm_loss(const std::vector<Tensor>& eps_pred, const std::vector<Tensor>& eps,
                const std::vector<double>& weights) {
    if (eps_pred.empty() || eps_pred.size() != eps.size())
        throw ValidationError("ldm_loss: batch size mismatch");
    if (!weights.empty() && weights.size() != eps.size())
        throw ValidationError("ldm_loss: weight count mismatch");
    double total = 0.0;
    for (std::size_t b = 0; b < eps.size(); ++b) {
        require_same_shape(eps_pred[b], eps[b], "ldm_loss");
        double mse = 0.0;
        for (std::size_t i = 0; i < eps[b].numel(); ++i) {
            double d = eps[b].data[i] - eps_pred[b].data[i];
            mse += d * d;
        }
        mse /= static_cast<double>(eps[b].numel());
        total += (weights.empty() ? 1.0 : weights[b]) * mse;
    }
    return total / static_cast<double>(eps.size());
}

ag::Var ldm_loss(const std::vector<ag::Var>& eps_pred, const std::vector<Tensor>& eps,
                 const std::vector<double>& weights) {
    if (eps_pred.empty() || eps_pred.size() != eps.size())
        throw ValidationError("ldm_loss: batch size mismatch");
    if (!weights.empty() && weights.size() != eps.size())
        throw ValidationError("ldm_loss: weight count mismatch");
    std::vector<ag::Var> terms;
    terms.reserve(eps.size());
    for (std::size_t b = 0; b < eps.size(); ++b) {
        ag::Var mse = ag::mse_mean(eps_pred[b], ag::constant(eps[b]));
        double w = weights.empty() ? 1.0 : weights[b];
        terms.push_back(ag::affine(mse, w, 0.0));
    }
    return ag::affine(ag::vsum(terms), 1.0 / static_cast<double>(eps.size()), 0.0);
}

double minsnr_weight(int t, const NoiseSchedule& sched, double gamma) {
    check_timestep(t, sched);
    if (!(gamma > 0.0)) throw ValidationError("minsnr_weight: gamma must be positive");
    double abar = sched.alpha_bars[t];
    if (abar >= 1.0)
        throw ValidationError("minsnr_weight: degenerate timestep, alpha_bar(t) = 1 makes SNR undefined");
    double snr = abar / (1.0 - abar);
    return std::min(snr, gamma) / snr;
}

}  // namespace ct::diffusion
