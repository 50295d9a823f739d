#include "ct/nn.hpp"

#include <cmath>
#include <cstring>

namespace ct::nn {

Var ParamStore::create(const std::string& name, Tensor init) {
    if (index_.count(name)) throw StateError("duplicate parameter name: " + name);
    Var p = ag::make_param(std::move(init), name);
    index_[name] = params_.size();
    params_.push_back(p);
    return p;
}

Var ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter: " + name);
    return params_[it->second];
}

void ParamStore::zero_grad() const {
    for (const Var& p : params_) p->grad = Tensor();
}

std::uint64_t ParamStore::hash(const std::function<bool(const std::string&)>& pred) const {
    std::uint64_t h = 1469598103934665603ull;
    for (const Var& p : params_) {
        if (!pred(p->name)) continue;
        for (double v : p->val.data) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof(bits));
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xffu;
                h *= 1099511628211ull;
            }
        }
    }
    return h;
}

Tensor kaiming_conv(int out_ch, int in_ch, int kh, int kw, Rng& rng) {
    double std = std::sqrt(2.0 / (static_cast<double>(in_ch) * kh * kw));
    return Tensor::randn({out_ch, in_ch, kh, kw}, rng, std);
}

Tensor kaiming_linear(int in_dim, int out_dim, Rng& rng) {
    double std = std::sqrt(2.0 / static_cast<double>(in_dim));
    return Tensor::randn({in_dim, out_dim}, rng, std);
}

Conv2d Conv2d::make(ParamStore& ps, const std::string& prefix, int in_ch, int out_ch, int k,
                    int stride, int pad, Rng& rng, bool zero_init, bool bias) {
    Conv2d c;
    c.stride = stride;
    c.pad = pad;
    Tensor w = zero_init ? Tensor::zeros({out_ch, in_ch, k, k}) : kaiming_conv(out_ch, in_ch, k, k, rng);
    c.w = ps.create(prefix + ".w", std::move(w));
    if (bias) c.b = ps.create(prefix + ".b", Tensor::zeros({out_ch}));
    return c;
}

Linear Linear::make(ParamStore& ps, const std::string& prefix, int in_dim, int out_dim, Rng& rng,
                    bool zero_init, bool bias) {
    Linear l;
    Tensor w = zero_init ? Tensor::zeros({in_dim, out_dim}) : kaiming_linear(in_dim, out_dim, rng);
    l.w = ps.create(prefix + ".w", std::move(w));
    if (bias) l.b = ps.create(prefix + ".b", Tensor::zeros({out_dim}));
    return l;
}

Var Linear::operator()(const Var& x) const {
    Var y = ag::matmul(x, w);
    return b ? ag::add_row_bias(y, b) : y;
}

GroupNorm GroupNorm::make(ParamStore& ps, const std::string& prefix, int channels, int groups,
                          double eps) {
    GroupNorm g;
    g.groups = groups;
    g.eps = eps;
    g.gamma = ps.create(prefix + ".g", Tensor::full({channels}, 1.0));
    g.beta = ps.create(prefix + ".b", Tensor::zeros({channels}));
    return g;
}

int default_groups(int channels) {
    int g = std::min(8, channels);
    while (g > 1 && channels % g) --g;
    return g;
}

void Adam::step(const ParamStore& ps, const std::function<bool(const std::string&)>& trainable) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const Var& p : ps.all()) {
        if (!trainable(p->name)) continue;
        if (p->grad.numel() != p->val.numel()) continue;  // no grad this step
        AdamState& st = state_[p->name];
        if (st.m.numel() != p->val.numel()) {
            st.m = Tensor(p->val.shape);
            st.v = Tensor(p->val.shape);
        }
        for (std::size_t i = 0; i < p->val.numel(); ++i) {
            double g = p->grad.data[i];
            st.m.data[i] = beta1_ * st.m.data[i] + (1.0 - beta1_) * g;
            st.v.data[i] = beta2_ * st.v.data[i] + (1.0 - beta2_) * g * g;
            double mhat = st.m.data[i] / bc1;
            double vhat = st.v.data[i] / bc2;
            p->val.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace ct::nn
