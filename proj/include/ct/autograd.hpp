#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ct/tensor.hpp"

namespace ct::ag {

struct Node;
using Var = std::shared_ptr<Node>;

// Reverse-mode tape node. Graphs are built eagerly; backward() walks the
// tape in reverse topological order. Edges point child -> parent, so there
// are no ownership cycles and releasing the root frees the step's graph.
struct Node {
    Tensor val;
    Tensor grad;            // allocated lazily during backward
    bool requires_grad = false;
    std::string name;       // nonempty for parameters
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

    Tensor& ensure_grad();
};

Var constant(Tensor v);
Var make_param(Tensor v, std::string name);

// Runs backward from a scalar root (shape [1]); seeds d(root)/d(root) = 1.
void backward(const Var& root);
void zero_grad(const std::vector<Var>& params);

// While a guard is alive, ops produce leaf nodes (no tape is recorded).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
bool grad_enabled();

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var affine(const Var& x, double scale, double shift);      // scale*x + shift
Var scale_by(const Var& x, const Var& s);                   // s is shape [1]
Var silu(const Var& x);
Var sigmoid(const Var& x);

// ---- reductions / losses ----
Var mean_all(const Var& x);
Var sum_all(const Var& x);
Var mse_mean(const Var& a, const Var& b);                   // mean((a-b)^2)
Var vsum(const std::vector<Var>& scalars);                  // sum of [1] vars

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                     // [m,k]x[k,n]
Var add_row_bias(const Var& x, const Var& b);               // [m,n] + [n]
Var transpose(const Var& a);                                // [m,n]->[n,m]
Var softmax_rows(const Var& x);                             // [m,n], per-row
Var row_segment_sum(const Var& x, int col_begin, int col_end);  // [m,n]->[m]

// ---- shape ----
Var reshape(const Var& x, std::vector<int> shape);
Var select_index(const Var& x, int flat_index);             // -> [1]
Var concat_rows(const Var& a, const Var& b);                // [m1,n]+[m2,n]
Var concat_channels(const Var& a, const Var& b);            // [C1,H,W]+[C2,H,W]
Var chw_to_tokens(const Var& x);                            // [C,H,W]->[H*W,C]
Var tokens_to_chw(const Var& x, int c, int h, int w);

// ---- spatial ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);  // b may be null
Var space_to_depth(const Var& x, int factor);
Var upsample_nearest(const Var& x, int factor);
Var upsample_nearest_to(const Var& x, int out_h, int out_w);
Var avg_pool_to(const Var& x, int out_h, int out_w);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps);
Var add_channel_bias(const Var& x, const Var& b);           // [C,H,W] + [C]
Var scale_spatial(const Var& z, const Var& w);              // [C,H,W] * [H,W]
Var channel_dot(const Var& a, const Var& b);                // sum_c a*b -> [H,W]

}  // namespace ct::ag
