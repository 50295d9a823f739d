#pragma once

#include <cmath>
#include <functional>

#include "ct/autograd.hpp"

namespace ct::testsupport {

inline double rel_err(double a, double b, double guard = 1e-6) {
    return std::fabs(a - b) / std::max({guard, std::fabs(a), std::fabs(b)});
}

// Central finite differences of a scalar-valued graph builder w.r.t. one
// leaf tensor. `builder` must rebuild the graph from current leaf values.
inline double max_grad_rel_err(const std::function<ag::Var()>& builder, const ag::Var& leaf,
                               double step = 1e-5) {
    ag::zero_grad({leaf});
    ag::Var out = builder();
    ag::backward(out);
    Tensor analytic = leaf->grad.numel() ? leaf->grad : Tensor(leaf->val.shape);

    double worst = 0.0;
    for (std::size_t i = 0; i < leaf->val.numel(); ++i) {
        double orig = leaf->val.data[i];
        leaf->val.data[i] = orig + step;
        double fp = builder()->val.data[0];
        leaf->val.data[i] = orig - step;
        double fm = builder()->val.data[0];
        leaf->val.data[i] = orig;
        double fd = (fp - fm) / (2.0 * step);
        worst = std::max(worst, rel_err(analytic.data[i], fd));
    }
    return worst;
}

}  // namespace ct::testsupport
