#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ct/rasg.hpp"
#include "support/gradcheck.hpp"

using namespace ct;
using rasg::AttentionRecord;
using rasg::SegmentationMask;

namespace {

// independent scalar-loop oracle for the guidance loss
double rasg_oracle(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks,
                   double lambda_n) {
    double total = 0.0;
    for (std::size_t r = 0; r < maps.size(); ++r) {
        const Tensor& a = maps[r];
        const Tensor& m = masks[r];
        double edit = 0, edit_n = 0, rest = 0, rest_n = 0;
        for (std::size_t i = 0; i < a.numel(); ++i) {
            if (m.data[i] == 1.0) {
                edit += (1.0 - a.data[i]) * (1.0 - a.data[i]);
                edit_n += 1;
            } else {
                rest += a.data[i] * a.data[i];
                rest_n += 1;
            }
        }
        double term = 0.0;
        if (edit_n > 0) term += edit / edit_n;
        if (rest_n > 0) term += lambda_n * rest / rest_n;
        total += term;
    }
    return total / maps.size();
}

}  // namespace

TEST_CASE("aggregate_attention trivial mass cases") {
    // 1 head, 4 queries (2x2), 3 keys; garment keys {1,2}
    Tensor raw({1, 4, 3});
    for (int q = 0; q < 4; ++q) {
        raw.data[q * 3 + 1] = 0.4;
        raw.data[q * 3 + 2] = 0.6;
    }
    auto rec = rasg::aggregate_attention(raw, {1, 2}, 2, 2);
    for (double v : rec.probs.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

    Tensor raw0({1, 4, 3});
    for (int q = 0; q < 4; ++q) raw0.data[q * 3 + 0] = 1.0;
    auto rec0 = rasg::aggregate_attention(raw0, {1, 2}, 2, 2);
    for (double v : rec0.probs.data) CHECK(v == 0.0);
}

TEST_CASE("aggregate_attention averages heads (scalar oracle)") {
    // 2 heads; head masses on garment key set {2}: 0.2 and 0.6 at query 0
    Tensor raw({2, 1, 3});
    raw.data = {0.5, 0.3, 0.2,   // head 0
                0.1, 0.3, 0.6};  // head 1
    auto rec = rasg::aggregate_attention(raw, {2}, 1, 1);
    CHECK(rec.probs.data[0] == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("aggregate_attention validates stochastic rows and key set") {
    Tensor raw({1, 2, 2});
    raw.data = {0.5, 0.5, 0.9, 0.3};
    CHECK_THROWS_AS(rasg::aggregate_attention(raw, {0}, 1, 2), ValidationError);
    Tensor ok({1, 2, 2});
    ok.data = {0.5, 0.5, 0.5, 0.5};
    CHECK_THROWS_AS(rasg::aggregate_attention(ok, {}, 1, 2), ValidationError);
    CHECK_THROWS_AS(rasg::aggregate_attention(ok, {5}, 1, 2), ValidationError);
}

TEST_CASE("rasg_loss perfect alignment is zero") {
    Tensor m({2, 2});
    m.data = {1, 0, 0, 1};
    AttentionRecord rec{"l", 0, m};
    CHECK(rasg::rasg_loss({rec}, {{m, 0}}, 0.5) == 0.0);
}

TEST_CASE("rasg_loss hand-computed 2x2 example") {
    Tensor m({2, 2});
    m.data = {1, 0, 0, 0};
    Tensor a({2, 2});
    a.data = {0.5, 0.5, 0, 0};
    double got = rasg::rasg_loss({AttentionRecord{"l", 0, a}}, {{m, 0}}, 0.5);
    double expect = 0.25 + 0.5 * (0.25 / 3.0);
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    CHECK(got == doctest::Approx(0.2916666667).epsilon(1e-8));
}

TEST_CASE("rasg_loss with all-ones mask drops the lambda term") {
    Rng rng(5);
    Tensor m = Tensor::full({3, 3}, 1.0);
    Tensor a({3, 3});
    for (double& v : a.data) v = rng.uniform();
    double got = rasg::rasg_loss({AttentionRecord{"l", 0, a}}, {{m, 0}}, 7.0);
    double expect = 0.0;
    for (double v : a.data) expect += (1 - v) * (1 - v);
    expect /= 9.0;
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("rasg_loss matches scalar-loop oracle on random instances") {
    Rng rng(17);
    for (int it = 0; it < 100; ++it) {
        int n_rec = 1 + static_cast<int>(rng.below(4));
        std::vector<AttentionRecord> recs;
        std::vector<SegmentationMask> masks;
        std::vector<Tensor> maps, rmasks;
        int h = 2 + static_cast<int>(rng.below(5));
        int w = 2 + static_cast<int>(rng.below(5));
        for (int r = 0; r < n_rec; ++r) {
            Tensor a({h, w}), m({h, w});
            for (std::size_t i = 0; i < a.numel(); ++i) {
                a.data[i] = rng.uniform();
                m.data[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
            }
            recs.push_back({"l", r, a});
            masks.push_back({m, r});
            maps.push_back(a);
            rmasks.push_back(m);
        }
        double lambda_n = rng.uniform(0.0, 2.0);
        double got = rasg::rasg_loss(recs, masks, lambda_n);
        double expect = rasg_oracle(maps, rmasks, lambda_n);
        CHECK(std::fabs(got - expect) <= 1e-10 * std::max(1.0, std::fabs(expect)));
    }
}

TEST_CASE("rasg_loss analytic gradient matches finite differences") {
    Rng rng(23);
    Tensor a({3, 4});
    for (double& v : a.data) v = rng.uniform(0.05, 0.95);
    Tensor m({3, 4});
    for (double& v : m.data) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    m.data[0] = 1.0;
    m.data[1] = 0.0;
    ag::Var probs = ag::make_param(a, "probs");
    auto builder = [&] {
        std::vector<rasg::AttentionRecordVar> recs{{"l", 0, probs}};
        return rasg::rasg_loss(recs, {{m, 0}}, 0.7);
    };
    CHECK(testsupport::max_grad_rel_err(builder, probs) < 1e-4);
}

TEST_CASE("monotone response around the mask partition") {
    Tensor m({2, 2});
    m.data = {1, 0, 0, 0};
    Tensor a({2, 2});
    a.data = {0.6, 0.3, 0.2, 0.1};
    double base = rasg::rasg_loss({AttentionRecord{"l", 0, a}}, {{m, 0}}, 0.5);
    Tensor up = a;
    up.data[1] += 0.05;  // non-edit location: loss must strictly increase
    CHECK(rasg::rasg_loss({AttentionRecord{"l", 0, up}}, {{m, 0}}, 0.5) > base);
    Tensor edit_up = a;
    edit_up.data[0] += 0.05;  // toward 1 at an edit location: strictly decreases
    CHECK(rasg::rasg_loss({AttentionRecord{"l", 0, edit_up}}, {{m, 0}}, 0.5) < base);
}

TEST_CASE("mask resampling is nearest-neighbor and binary-preserving") {
    Tensor m({4, 4});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) m.at2(y, x) = (x < 2) ? 1.0 : 0.0;
    Tensor r = rasg::resample_mask_nearest(m, 2, 2);
    CHECK(r.at2(0, 0) == 1.0);
    CHECK(r.at2(0, 1) == 0.0);
    for (double v : r.data) CHECK((v == 0.0 || v == 1.0));
}

TEST_CASE("rasg_loss rejects non-binary masks") {
    Tensor m = Tensor::full({2, 2}, 0.5);
    Tensor a({2, 2});
    CHECK_THROWS_AS(rasg::rasg_loss({AttentionRecord{"l", 0, a}}, {{m, 0}}, 0.5),
                    ValidationError);
}

TEST_CASE("rasg_loss requires a mask for the record frame") {
    Tensor m({2, 2});
    Tensor a({2, 2});
    CHECK_THROWS_AS(rasg::rasg_loss({AttentionRecord{"l", 3, a}}, {{m, 0}}, 0.5),
                    ValidationError);
}

TEST_CASE("total_loss composition") {
    CHECK(rasg::total_loss(1.0, 0.5, 0.0) == 1.0);
    CHECK(rasg::total_loss(1.0, 0.5, 0.1) == doctest::Approx(1.05).epsilon(1e-12));
    Rng rng(29);
    for (int it = 0; it < 100; ++it) {
        double a = rng.uniform(-5, 5), b = rng.uniform(0, 5), c = rng.uniform(0, 2);
        CHECK(std::fabs(rasg::total_loss(a, b, c) - (a + c * b)) < 1e-12);
    }
    CHECK_THROWS_AS(rasg::total_loss(std::nan(""), 0.0, 0.1), ValidationError);
}

TEST_CASE("eval counter increments on every evaluation") {
    Tensor m({2, 2});
    m.data = {1, 0, 0, 1};
    std::uint64_t before = rasg::eval_count();
    rasg::rasg_loss({AttentionRecord{"l", 0, m}}, {{m, 0}}, 0.5);
    CHECK(rasg::eval_count() == before + 1);
}
