#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ct/diffusion.hpp"

using namespace ct;
using diffusion::make_schedule;

TEST_CASE("single-step schedule") {
    auto s = make_schedule(1, 0.5, 0.5);
    CHECK(s.betas == std::vector<double>{0.5});
    CHECK(s.alpha_bars == std::vector<double>{0.5});
}

TEST_CASE("constant-beta cumulative product") {
    auto s = make_schedule(3, 0.1, 0.1);
    // independent loop oracle
    double expect[3];
    double run = 1.0;
    for (int t = 0; t < 3; ++t) {
        run *= 0.9;
        expect[t] = run;
    }
    for (int t = 0; t < 3; ++t) CHECK(s.alpha_bars[t] == doctest::Approx(expect[t]).epsilon(1e-14));
    CHECK(s.alpha_bars[0] == doctest::Approx(0.9));
    CHECK(s.alpha_bars[1] == doctest::Approx(0.81));
    CHECK(s.alpha_bars[2] == doctest::Approx(0.729));
}

TEST_CASE("default schedule: extended-precision oracle, monotone, small tail") {
    auto s = make_schedule(1000, 1e-4, 2e-2);
    long double abar = 1.0L;
    for (int t = 0; t < 1000; ++t) {
        long double beta = 1e-4L + (2e-2L - 1e-4L) * t / 999.0L;
        abar *= (1.0L - beta);
        CHECK(std::fabs(static_cast<double>(abar) - s.alpha_bars[t]) < 1e-12);
        if (t > 0) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    }
    CHECK(s.alpha_bars.back() < 0.01);
}

TEST_CASE("schedule recurrence invariant on random schedules") {
    Rng rng(3);
    for (int it = 0; it < 50; ++it) {
        int T = 2 + static_cast<int>(rng.below(200));
        double b0 = rng.uniform(1e-5, 0.3);
        double b1 = b0 + rng.uniform(0.0, 0.5);
        auto s = make_schedule(T, b0, std::min(b1, 0.95));
        for (int t = 1; t < T; ++t) {
            double expect = s.alpha_bars[t - 1] * (1.0 - s.betas[t]);
            CHECK(std::fabs(s.alpha_bars[t] - expect) <= 1e-12 * std::fabs(expect));
            CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
            CHECK(s.betas[t] > 0.0);
            CHECK(s.betas[t] < 1.0);
        }
    }
}

TEST_CASE("schedule validation") {
    CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), ValidationError);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), ValidationError);
    CHECK_THROWS_AS(make_schedule(10, 0.2, 1.0), ValidationError);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), ValidationError);
}

TEST_CASE("q_sample zero-noise and identity cases") {
    auto s = make_schedule(10, 1e-3, 1e-2);
    Rng rng(5);
    Tensor x0 = Tensor::randn({2, 3, 4}, rng);
    Tensor zero(x0.shape);
    Tensor out = diffusion::q_sample(x0, 4, zero, s);
    double a = std::sqrt(s.alpha_bars[4]);
    for (std::size_t i = 0; i < x0.numel(); ++i)
        CHECK(out.data[i] == doctest::Approx(a * x0.data[i]).epsilon(1e-15));

    // a degenerate schedule with alpha_bar ~= 1 keeps x0 nearly unchanged
    auto s1 = make_schedule(1, 1e-12, 1e-12);
    Tensor eps = Tensor::randn(x0.shape, rng);
    Tensor out1 = diffusion::q_sample(x0, 0, eps, s1);
    for (std::size_t i = 0; i < x0.numel(); ++i)
        CHECK(out1.data[i] == doctest::Approx(x0.data[i]).epsilon(1e-5));
}

TEST_CASE("q_sample forward-process moments (Monte Carlo oracle)") {
    auto s = make_schedule(100, 1e-3, 5e-2);
    int t = 60;
    Rng rng(11);
    Tensor x0({1, 1, 1});  // x0 = 0
    const int n = 10000;
    double sum = 0, sum2 = 0;
    for (int i = 0; i < n; ++i) {
        Tensor eps = Tensor::randn(x0.shape, rng);
        double v = diffusion::q_sample(x0, t, eps, s).data[0];
        sum += v;
        sum2 += v * v;
    }
    double mean = sum / n;
    double var = sum2 / n - mean * mean;
    double expect = 1.0 - s.alpha_bars[t];
    double sigma_var = expect * std::sqrt(2.0 / n);
    CHECK(std::fabs(var - expect) < 3 * sigma_var);
    CHECK(std::fabs(mean) < 3 * std::sqrt(expect / n));
}

TEST_CASE("q_sample validation") {
    auto s = make_schedule(10, 1e-3, 1e-2);
    Tensor x0({2, 2, 2});
    Tensor eps({2, 2, 2});
    CHECK_THROWS_AS(diffusion::q_sample(x0, 10, eps, s), ValidationError);
    CHECK_THROWS_AS(diffusion::q_sample(x0, -1, eps, s), ValidationError);
    Tensor bad({2, 2, 3});
    CHECK_THROWS_AS(diffusion::q_sample(x0, 1, bad, s), ValidationError);
}

TEST_CASE("ldm_loss trivial cases") {
    Rng rng(13);
    Tensor eps = Tensor::randn({3, 4, 4}, rng);
    CHECK(diffusion::ldm_loss({eps}, {eps}) == 0.0);
    Tensor off = eps;
    for (double& v : off.data) v += 1.0;
    CHECK(diffusion::ldm_loss({off}, {eps}) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ldm_loss matches scalar-loop oracle with weights") {
    Rng rng(17);
    for (int it = 0; it < 100; ++it) {
        int b = 1 + static_cast<int>(rng.below(4));
        std::vector<Tensor> pred, target;
        std::vector<double> w;
        for (int i = 0; i < b; ++i) {
            pred.push_back(Tensor::randn({2, 3, 2}, rng));
            target.push_back(Tensor::randn({2, 3, 2}, rng));
            w.push_back(it % 3 == 0 ? 0.2 : rng.uniform(0.05, 2.0));
        }
        double oracle = 0.0;
        for (int i = 0; i < b; ++i) {
            double mse = 0.0;
            for (std::size_t k = 0; k < pred[i].numel(); ++k) {
                double d = target[i].data[k] - pred[i].data[k];
                mse += d * d;
            }
            oracle += w[i] * (mse / pred[i].numel());
        }
        oracle /= b;
        double got = diffusion::ldm_loss(pred, target, w);
        CHECK(std::fabs(got - oracle) <= 1e-10 * std::max(1.0, std::fabs(oracle)));
    }
}

TEST_CASE("minsnr weight") {
    // alpha_bar such that SNR = 25 -> abar = 25/26
    diffusion::NoiseSchedule s;
    s.num_steps = 2;
    s.betas = {0.1, 0.1};
    s.alpha_bars = {25.0 / 26.0, 0.5};
    CHECK(diffusion::minsnr_weight(0, s, 5.0) == doctest::Approx(0.2).epsilon(1e-12));
    // SNR(t)=1 <= gamma -> weight 1
    CHECK(diffusion::minsnr_weight(1, s, 5.0) == 1.0);

    diffusion::NoiseSchedule degenerate;
    degenerate.num_steps = 1;
    degenerate.betas = {0.5};
    degenerate.alpha_bars = {1.0};
    CHECK_THROWS_AS(diffusion::minsnr_weight(0, degenerate, 5.0), ValidationError);
    CHECK_THROWS_AS(diffusion::minsnr_weight(0, s, 0.0), ValidationError);
}

TEST_CASE("minsnr weight is <=1 and ==1 iff SNR <= gamma") {
    auto s = make_schedule(200, 1e-4, 5e-2);
    double gamma = 5.0;
    for (int t = 0; t < 200; ++t) {
        double w = diffusion::minsnr_weight(t, s, gamma);
        double snr = s.alpha_bars[t] / (1.0 - s.alpha_bars[t]);
        CHECK(w <= 1.0 + 1e-15);
        if (snr <= gamma)
            CHECK(w == 1.0);
        else
            CHECK(w < 1.0);
    }
}

TEST_CASE("ldm_loss graph version matches tensor version") {
    Rng rng(23);
    std::vector<ag::Var> preds;
    std::vector<Tensor> targets;
    std::vector<double> w;
    for (int i = 0; i < 3; ++i) {
        preds.push_back(ag::make_param(Tensor::randn({2, 2, 2}, rng), "p" + std::to_string(i)));
        targets.push_back(Tensor::randn({2, 2, 2}, rng));
        w.push_back(rng.uniform(0.1, 1.0));
    }
    std::vector<Tensor> pred_vals;
    for (auto& p : preds) pred_vals.push_back(p->val);
    double expect = diffusion::ldm_loss(pred_vals, targets, w);
    ag::Var got = diffusion::ldm_loss(preds, targets, w);
    CHECK(got->val.data[0] == doctest::Approx(expect).epsilon(1e-12));
}
