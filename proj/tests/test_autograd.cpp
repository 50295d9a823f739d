#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ct/autograd.hpp"
#include "ct/nn.hpp"
#include "support/gradcheck.hpp"

using namespace ct;
using ct::testsupport::max_grad_rel_err;

namespace {

ag::Var leaf(Tensor t) { return ag::make_param(std::move(t), "leaf"); }

Tensor randn(std::vector<int> shape, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    ag::Var x = leaf(randn({3, 4, 5}, 1));
    ag::Var y = leaf(randn({3, 4, 5}, 2));
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::mul(x, y)); }, x) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::sum_all(ag::sub(x, y)); }, y) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::silu(x)); }, x) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::sigmoid(x)); }, x) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mse_mean(x, y); }, x) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::affine(x, 2.5, -1.0)); }, x) < 1e-6);
}

TEST_CASE("matmul and softmax gradients") {
    ag::Var a = leaf(randn({4, 6}, 3));
    ag::Var b = leaf(randn({6, 5}, 4));
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::matmul(a, b)); }, a) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::matmul(a, b)); }, b) < 1e-6);
    ag::Var s = leaf(randn({5, 7}, 5));
    CHECK(max_grad_rel_err(
              [&] { return ag::mse_mean(ag::softmax_rows(s), ag::constant(randn({5, 7}, 6))); },
              s) < 1e-5);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::row_segment_sum(s, 2, 5)); }, s) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::transpose(s)); }, s) < 1e-6);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(9);
    for (int it = 0; it < 50; ++it) {
        ag::Var s = ag::constant(Tensor::randn({6, 9}, rng, 3.0));
        Tensor p = ag::softmax_rows(s)->val;
        for (int r = 0; r < 6; ++r) {
            double sum = 0;
            for (int c = 0; c < 9; ++c) sum += p.at2(r, c);
            CHECK(std::fabs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("conv2d matches finite differences (stride and padding)") {
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
        ag::Var x = leaf(randn({3, 6, 5}, 10 + stride));
        ag::Var w = leaf(randn({4, 3, 3, 3}, 20 + pad));
        ag::Var b = leaf(randn({4}, 30));
        auto f = [&] { return ag::mean_all(ag::conv2d(x, w, b, stride, pad)); };
        CHECK(max_grad_rel_err(f, x) < 1e-5);
        CHECK(max_grad_rel_err(f, w) < 1e-5);
        CHECK(max_grad_rel_err(f, b) < 1e-5);
    }
}

TEST_CASE("conv2d against a direct scalar-loop oracle") {
    Rng rng(77);
    Tensor x = Tensor::randn({2, 5, 6}, rng);
    Tensor w = Tensor::randn({3, 2, 3, 3}, rng);
    Tensor b = Tensor::randn({3}, rng);
    Tensor y = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(b), 1, 1)->val;
    for (int o = 0; o < 3; ++o)
        for (int yo = 0; yo < 5; ++yo)
            for (int xo = 0; xo < 6; ++xo) {
                double acc = b.data[o];
                for (int c = 0; c < 2; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            int yi = yo - 1 + ky, xi = xo - 1 + kx;
                            if (yi < 0 || yi >= 5 || xi < 0 || xi >= 6) continue;
                            acc += x.at3(c, yi, xi) *
                                   w.data[((o * 2 + c) * 3 + ky) * 3 + kx];
                        }
                CHECK(std::fabs(acc - y.at3(o, yo, xo)) < 1e-12);
            }
}

TEST_CASE("group_norm gradients (affine and plain)") {
    ag::Var x = leaf(randn({4, 3, 4}, 40));
    ag::Var g = leaf(Tensor::full({4}, 1.3));
    ag::Var b = leaf(randn({4}, 41));
    auto f = [&] { return ag::mse_mean(ag::group_norm(x, g, b, 2, 1e-6),
                                       ag::constant(randn({4, 3, 4}, 42))); };
    CHECK(max_grad_rel_err(f, x) < 1e-4);
    CHECK(max_grad_rel_err(f, g) < 1e-5);
    CHECK(max_grad_rel_err(f, b) < 1e-5);
    auto f2 = [&] { return ag::mean_all(ag::group_norm(x, nullptr, nullptr, 4, 1e-6)); };
    CHECK(max_grad_rel_err(f2, x) < 1e-4);
}

TEST_CASE("shape ops round-trip gradients") {
    ag::Var x = leaf(randn({3, 4, 6}, 50));
    CHECK(max_grad_rel_err(
              [&] { return ag::mean_all(ag::tokens_to_chw(ag::chw_to_tokens(x), 3, 4, 6)); }, x) <
          1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::space_to_depth(x, 2)); }, x) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::upsample_nearest(x, 2)); }, x) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::upsample_nearest_to(x, 7, 9)); }, x) <
          1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::avg_pool_to(x, 2, 3)); }, x) < 1e-6);
    ag::Var y = leaf(randn({2, 4, 6}, 51));
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::concat_channels(x, y)); }, y) < 1e-6);
    ag::Var t1 = leaf(randn({3, 5}, 52));
    ag::Var t2 = leaf(randn({2, 5}, 53));
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::concat_rows(t1, t2)); }, t2) < 1e-6);
}

TEST_CASE("broadcast helpers") {
    ag::Var x = leaf(randn({3, 4, 5}, 60));
    ag::Var b = leaf(randn({3}, 61));
    ag::Var w = leaf(randn({4, 5}, 62));
    ag::Var s = leaf(randn({1}, 63));
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::add_channel_bias(x, b)); }, b) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::scale_spatial(x, w)); }, w) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::scale_spatial(x, w)); }, x) < 1e-6);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::channel_dot(x, x)); }, x) < 1e-5);
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::scale_by(x, s)); }, s) < 1e-6);
    ag::Var rows = leaf(randn({4, 3}, 64));
    ag::Var rb = leaf(randn({3}, 65));
    CHECK(max_grad_rel_err([&] { return ag::mean_all(ag::add_row_bias(rows, rb)); }, rb) < 1e-6);
}

TEST_CASE("gradient accumulates over reuse") {
    ag::Var x = leaf(Tensor::full({2, 2}, 1.5));
    ag::Var y = ag::add(ag::mul(x, x), x);  // d/dx = 2x + 1 = 4
    ag::backward(ag::sum_all(y));
    for (double g : x->grad.data) CHECK(g == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("no-grad mode builds leaf nodes only") {
    ag::Var x = leaf(randn({2, 3}, 70));
    ag::NoGradGuard guard;
    ag::Var y = ag::mul(x, x);
    CHECK_FALSE(y->requires_grad);
    CHECK(y->parents.empty());
}

TEST_CASE("backward requires scalar root") {
    ag::Var x = leaf(randn({2, 2}, 80));
    CHECK_THROWS_AS(ag::backward(ag::mul(x, x)), ValidationError);
}

TEST_CASE("adam step moves parameters toward lower loss") {
    nn::ParamStore ps;
    Rng rng(7);
    ag::Var p = ps.create("p", Tensor::randn({8}, rng));
    nn::Adam adam(0.1, 0.9, 0.999);
    double first = 0.0;
    for (int i = 0; i < 50; ++i) {
        ps.zero_grad();
        ag::Var loss = ag::mse_mean(p, ag::constant(Tensor::full({8}, 3.0)));
        if (i == 0) first = loss->val.data[0];
        ag::backward(loss);
        adam.step(ps, [](const std::string&) { return true; });
    }
    ag::Var final_loss = ag::mse_mean(p, ag::constant(Tensor::full({8}, 3.0)));
    CHECK(final_loss->val.data[0] < first * 0.2);
}
