#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ct/autograd.hpp"

namespace ct::nn {

using ag::Var;

// Ordered registry of named parameters. Iteration order is registration
// order, which fixes optimizer update order and checkpoint layout.
class ParamStore {
public:
    Var create(const std::string& name, Tensor init);
    Var get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const std::vector<Var>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    void zero_grad() const;
    // FNV-1a over raw value bytes of every param matching the predicate.
    std::uint64_t hash(const std::function<bool(const std::string&)>& pred) const;

private:
    std::vector<Var> params_;
    std::map<std::string, std::size_t> index_;
};

// ---- initializers ----
Tensor kaiming_conv(int out_ch, int in_ch, int kh, int kw, Rng& rng);
Tensor kaiming_linear(int in_dim, int out_dim, Rng& rng);  // shape [in_dim, out_dim]

// ---- layers (thin param bundles over autograd ops) ----
struct Conv2d {
    Var w, b;  // b may be null
    int stride = 1, pad = 0;

    static Conv2d make(ParamStore& ps, const std::string& prefix, int in_ch, int out_ch, int k,
                       int stride, int pad, Rng& rng, bool zero_init = false, bool bias = true);
    Var operator()(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

struct Linear {
    Var w, b;  // w: [in,out]; b may be null

    static Linear make(ParamStore& ps, const std::string& prefix, int in_dim, int out_dim,
                       Rng& rng, bool zero_init = false, bool bias = true);
    Var operator()(const Var& x) const;  // x: [tokens,in]
};

struct GroupNorm {
    Var gamma, beta;
    int groups = 1;
    double eps = 1e-6;

    static GroupNorm make(ParamStore& ps, const std::string& prefix, int channels, int groups,
                          double eps = 1e-6);
    Var operator()(const Var& x) const { return ag::group_norm(x, gamma, beta, groups, eps); }
};

int default_groups(int channels);  // min(8, C), reduced until it divides C

// ---- optimizer ----
struct AdamState {
    Tensor m, v;
};

class Adam {
public:
    Adam(double lr, double beta1, double beta2, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Updates every param matching `trainable`; skips params with no grad.
    void step(const ParamStore& ps, const std::function<bool(const std::string&)>& trainable);

    std::int64_t t() const { return t_; }
    double lr() const { return lr_; }
    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }
    std::map<std::string, AdamState>& state() { return state_; }
    const std::map<std::string, AdamState>& state() const { return state_; }
    void set_t(std::int64_t t) { t_ = t; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<std::string, AdamState> state_;
};

}  // namespace ct::nn
