#include "ct/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ct::ag {

namespace {

thread_local int g_no_grad_depth = 0;

bool tape_active(const std::vector<Var>& parents) {
    if (g_no_grad_depth > 0) return false;
    for (const Var& p : parents)
        if (p && p->requires_grad) return true;
    return false;
}

Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    if (tape_active(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

void accum(Node& p, const Tensor& g) {
    Tensor& pg = p.ensure_grad();
    for (std::size_t i = 0; i < g.numel(); ++i) pg.data[i] += g.data[i];
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (grad.numel() != val.numel()) grad = Tensor(val.shape);
    return grad;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    return n;
}

Var make_param(Tensor v, std::string name) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = true;
    n->name = std::move(name);
    return n;
}

void backward(const Var& root) {
    if (!root) throw ValidationError("backward: null root");
    if (root->val.numel() != 1) throw ValidationError("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Iterative post-order topological sort.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.push_back({root.get(), 0});
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad().data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
}

void zero_grad(const std::vector<Var>& params) {
    for (const Var& p : params)
        if (p) p->grad = Tensor();
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "add");
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b->val.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) accum(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) accum(*n.parents[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "sub");
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b->val.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) accum(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor& pg = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < n.grad.numel(); ++i) pg.data[i] -= n.grad.data[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "mul");
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b->val.data[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            Tensor& g = pa.ensure_grad();
            for (std::size_t i = 0; i < n.grad.numel(); ++i)
                g.data[i] += n.grad.data[i] * pb.val.data[i];
        }
        if (pb.requires_grad) {
            Tensor& g = pb.ensure_grad();
            for (std::size_t i = 0; i < n.grad.numel(); ++i)
                g.data[i] += n.grad.data[i] * pa.val.data[i];
        }
    });
}

Var affine(const Var& x, double scale, double shift) {
    Tensor out = x->val;
    for (double& v : out.data) v = scale * v + shift;
    return make_node(std::move(out), {x}, [scale](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) g.data[i] += scale * n.grad.data[i];
    });
}

Var scale_by(const Var& x, const Var& s) {
    if (s->val.numel() != 1) throw ValidationError("scale_by: scale must be shape [1]");
    Tensor out = x->val;
    double sv = s->val.data[0];
    for (double& v : out.data) v *= sv;
    return make_node(std::move(out), {x, s}, [](Node& n) {
        Node& px = *n.parents[0];
        Node& ps = *n.parents[1];
        if (px.requires_grad) {
            Tensor& g = px.ensure_grad();
            double sv = ps.val.data[0];
            for (std::size_t i = 0; i < n.grad.numel(); ++i) g.data[i] += sv * n.grad.data[i];
        }
        if (ps.requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n.grad.numel(); ++i)
                acc += n.grad.data[i] * px.val.data[i];
            ps.ensure_grad().data[0] += acc;
        }
    });
}

Var silu(const Var& x) {
    Tensor out = x->val;
    for (double& v : out.data) {
        double s = 1.0 / (1.0 + std::exp(-v));
        v = v * s;
    }
    return make_node(std::move(out), {x}, [](Node& n) {
        Node& p = *n.parents[0];
        Tensor& g = p.ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            double v = p.val.data[i];
            double s = 1.0 / (1.0 + std::exp(-v));
            g.data[i] += n.grad.data[i] * s * (1.0 + v * (1.0 - s));
        }
    });
}

Var sigmoid(const Var& x) {
    Tensor out = x->val;
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return make_node(std::move(out), {x}, [](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) {
            double y = n.val.data[i];
            g.data[i] += n.grad.data[i] * y * (1.0 - y);
        }
    });
}

// ---------------------------------------------------------------- reductions

Var mean_all(const Var& x) {
    double s = 0.0;
    for (double v : x->val.data) s += v;
    std::size_t cnt = x->val.numel();
    return make_node(Tensor::scalar(s / cnt), {x}, [cnt](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        double gv = n.grad.data[0] / static_cast<double>(cnt);
        for (double& v : g.data) v += gv;
    });
}

Var sum_all(const Var& x) {
    double s = 0.0;
    for (double v : x->val.data) s += v;
    return make_node(Tensor::scalar(s), {x}, [](Node& n) {
        Tensor& g = n.parents[0]->ensure_grad();
        double gv = n.grad.data[0];
        for (double& v : g.data) v += gv;
    });
}

Var mse_mean(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "mse_mean");
    double s = 0.0;
    std::size_t cnt = a->val.numel();
    for (std::size_t i = 0; i < cnt; ++i) {
        double d = a->val.data[i] - b->val.data[i];
        s += d * d;
    }
    return make_node(Tensor::scalar(s / cnt), {a, b}, [cnt](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        double c = 2.0 * n.grad.data[0] / static_cast<double>(cnt);
        if (pa.requires_grad) {
            Tensor& g = pa.ensure_grad();
            for (std::size_t i = 0; i < cnt; ++i)
                g.data[i] += c * (pa.val.data[i] - pb.val.data[i]);
        }
        if (pb.requires_grad) {
            Tensor& g = pb.ensure_grad();
            for (std::size_t i = 0; i < cnt; ++i)
                g.data[i] -= c * (pa.val.data[i] - pb.val.data[i]);
        }
    });
}

Var vsum(const std::vector<Var>& scalars) {
    if (scalars.empty()) return constant(Tensor::scalar(0.0));
    double s = 0.0;
    for (const Var& v : scalars) {
        if (v->val.numel() != 1) throw ValidationError("vsum: all inputs must be scalars");
        s += v->val.data[0];
    }
    return make_node(Tensor::scalar(s), scalars, [](Node& n) {
        for (Var& p : n.parents)
            if (p->requires_grad) p->ensure_grad().data[0] += n.grad.data[0];
    });
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b) {
    const Tensor& A = a->val;
    const Tensor& B = b->val;
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
        throw ValidationError("matmul: incompatible shapes " + A.shape_str() + " x " +
                              B.shape_str());
    int m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* arow = &A.data[static_cast<std::size_t>(i) * k];
        double* orow = &out.data[static_cast<std::size_t>(i) * n];
        for (int kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            const double* brow = &B.data[static_cast<std::size_t>(kk) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return make_node(std::move(out), {a, b}, [m, k, n](Node& nd) {
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (pa.requires_grad) {  // gA = g . B^T
            Tensor& g = pa.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* grow = &nd.grad.data[static_cast<std::size_t>(i) * n];
                    const double* brow = &pb.val.data[static_cast<std::size_t>(kk) * n];
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    g.data[static_cast<std::size_t>(i) * k + kk] += acc;
                }
        }
        if (pb.requires_grad) {  // gB = A^T . g
            Tensor& g = pb.ensure_grad();
            for (int kk = 0; kk < k; ++kk) {
                double* grow_out = &g.data[static_cast<std::size_t>(kk) * n];
                for (int i = 0; i < m; ++i) {
                    double av = pa.val.data[static_cast<std::size_t>(i) * k + kk];
                    const double* grow = &nd.grad.data[static_cast<std::size_t>(i) * n];
                    for (int j = 0; j < n; ++j) grow_out[j] += av * grow[j];
                }
            }
        }
    });
}

Var add_row_bias(const Var& x, const Var& b) {
    const Tensor& X = x->val;
    if (X.rank() != 2 || b->val.numel() != static_cast<std::size_t>(X.shape[1]))
        throw ValidationError("add_row_bias: shape mismatch");
    int m = X.shape[0], n = X.shape[1];
    Tensor out = X;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(i) * n + j] += b->val.data[j];
    return make_node(std::move(out), {x, b}, [m, n](Node& nd) {
        if (nd.parents[0]->requires_grad) accum(*nd.parents[0], nd.grad);
        if (nd.parents[1]->requires_grad) {
            Tensor& gb = nd.parents[1]->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gb.data[j] += nd.grad.data[static_cast<std::size_t>(i) * n + j];
        }
    });
}

Var transpose(const Var& a) {
    const Tensor& A = a->val;
    if (A.rank() != 2) throw ValidationError("transpose: rank-2 input required");
    int m = A.shape[0], n = A.shape[1];
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at2(j, i) = A.at2(i, j);
    return make_node(std::move(out), {a}, [m, n](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                g.data[static_cast<std::size_t>(i) * n + j] +=
                    nd.grad.data[static_cast<std::size_t>(j) * m + i];
    });
}

Var softmax_rows(const Var& x) {
    const Tensor& X = x->val;
    if (X.rank() != 2) throw ValidationError("softmax_rows: rank-2 input required");
    int m = X.shape[0], n = X.shape[1];
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* row = &X.data[static_cast<std::size_t>(i) * n];
        double* orow = &out.data[static_cast<std::size_t>(i) * n];
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= z;
    }
    return make_node(std::move(out), {x}, [m, n](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double* y = &nd.val.data[static_cast<std::size_t>(i) * n];
            const double* gy = &nd.grad.data[static_cast<std::size_t>(i) * n];
            double dotv = 0.0;
            for (int j = 0; j < n; ++j) dotv += y[j] * gy[j];
            double* gx = &g.data[static_cast<std::size_t>(i) * n];
            for (int j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dotv);
        }
    });
}

Var row_segment_sum(const Var& x, int col_begin, int col_end) {
    const Tensor& X = x->val;
    if (X.rank() != 2) throw ValidationError("row_segment_sum: rank-2 input required");
    int m = X.shape[0], n = X.shape[1];
    if (col_begin < 0 || col_end > n || col_begin >= col_end)
        throw ValidationError("row_segment_sum: bad column range");
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        const double* row = &X.data[static_cast<std::size_t>(i) * n];
        for (int j = col_begin; j < col_end; ++j) s += row[j];
        out.data[i] = s;
    }
    return make_node(std::move(out), {x}, [m, n, col_begin, col_end](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (int i = 0; i < m; ++i) {
            double gv = nd.grad.data[i];
            double* row = &g.data[static_cast<std::size_t>(i) * n];
            for (int j = col_begin; j < col_end; ++j) row[j] += gv;
        }
    });
}

// ----------------------------------------------------------------- reshaping

Var reshape(const Var& x, std::vector<int> shape) {
    Tensor out = x->val.reshaped(std::move(shape));
    return make_node(std::move(out), {x}, [](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += nd.grad.data[i];
    });
}

Var select_index(const Var& x, int flat_index) {
    if (flat_index < 0 || static_cast<std::size_t>(flat_index) >= x->val.numel())
        throw ValidationError("select_index: index out of range");
    return make_node(Tensor::scalar(x->val.data[flat_index]), {x}, [flat_index](Node& nd) {
        nd.parents[0]->ensure_grad().data[flat_index] += nd.grad.data[0];
    });
}

Var concat_rows(const Var& a, const Var& b) {
    const Tensor& A = a->val;
    const Tensor& B = b->val;
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[1])
        throw ValidationError("concat_rows: column mismatch");
    int m1 = A.shape[0], m2 = B.shape[0], n = A.shape[1];
    Tensor out({m1 + m2, n});
    std::copy(A.data.begin(), A.data.end(), out.data.begin());
    std::copy(B.data.begin(), B.data.end(), out.data.begin() + A.numel());
    return make_node(std::move(out), {a, b}, [m1, m2, n](Node& nd) {
        std::size_t split = static_cast<std::size_t>(m1) * n;
        if (nd.parents[0]->requires_grad) {
            Tensor& g = nd.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < split; ++i) g.data[i] += nd.grad.data[i];
        }
        if (nd.parents[1]->requires_grad) {
            Tensor& g = nd.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < static_cast<std::size_t>(m2) * n; ++i)
                g.data[i] += nd.grad.data[split + i];
        }
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const Tensor& A = a->val;
    const Tensor& B = b->val;
    if (A.rank() != 3 || B.rank() != 3 || A.shape[1] != B.shape[1] || A.shape[2] != B.shape[2])
        throw ValidationError("concat_channels: spatial mismatch");
    Tensor out({A.shape[0] + B.shape[0], A.shape[1], A.shape[2]});
    std::copy(A.data.begin(), A.data.end(), out.data.begin());
    std::copy(B.data.begin(), B.data.end(), out.data.begin() + A.numel());
    std::size_t na = A.numel(), nb = B.numel();
    return make_node(std::move(out), {a, b}, [na, nb](Node& nd) {
        if (nd.parents[0]->requires_grad) {
            Tensor& g = nd.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < na; ++i) g.data[i] += nd.grad.data[i];
        }
        if (nd.parents[1]->requires_grad) {
            Tensor& g = nd.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < nb; ++i) g.data[i] += nd.grad.data[na + i];
        }
    });
}

Var chw_to_tokens(const Var& x) {
    const Tensor& X = x->val;
    if (X.rank() != 3) throw ValidationError("chw_to_tokens: rank-3 input required");
    int c = X.shape[0], h = X.shape[1], w = X.shape[2];
    int t = h * w;
    Tensor out({t, c});
    for (int ci = 0; ci < c; ++ci)
        for (int p = 0; p < t; ++p)
            out.data[static_cast<std::size_t>(p) * c + ci] =
                X.data[static_cast<std::size_t>(ci) * t + p];
    return make_node(std::move(out), {x}, [c, t](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int p = 0; p < t; ++p)
                g.data[static_cast<std::size_t>(ci) * t + p] +=
                    nd.grad.data[static_cast<std::size_t>(p) * c + ci];
    });
}

Var tokens_to_chw(const Var& x, int c, int h, int w) {
    const Tensor& X = x->val;
    if (X.rank() != 2 || X.shape[0] != h * w || X.shape[1] != c)
        throw ValidationError("tokens_to_chw: shape mismatch");
    int t = h * w;
    Tensor out({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int p = 0; p < t; ++p)
            out.data[static_cast<std::size_t>(ci) * t + p] =
                X.data[static_cast<std::size_t>(p) * c + ci];
    return make_node(std::move(out), {x}, [c, t](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int p = 0; p < t; ++p)
                g.data[static_cast<std::size_t>(p) * c + ci] +=
                    nd.grad.data[static_cast<std::size_t>(ci) * t + p];
    });
}

// ------------------------------------------------------------------- spatial

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& X = x->val;
    const Tensor& W = w->val;
    if (X.rank() != 3 || W.rank() != 4 || W.shape[1] != X.shape[0])
        throw ValidationError("conv2d: shape mismatch " + X.shape_str() + " w " + W.shape_str());
    if (stride < 1) throw ValidationError("conv2d: stride must be >= 1");
    int C = X.shape[0], H = X.shape[1], Wd = X.shape[2];
    int O = W.shape[0], kh = W.shape[2], kw = W.shape[3];
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (Wd + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ValidationError("conv2d: output would be empty");
    if (b && b->val.numel() != static_cast<std::size_t>(O))
        throw ValidationError("conv2d: bias size mismatch");

    Tensor out({O, Ho, Wo});
    for (int o = 0; o < O; ++o) {
        double* oplane = &out.data[static_cast<std::size_t>(o) * Ho * Wo];
        if (b) {
            double bv = b->val.data[o];
            for (int i = 0; i < Ho * Wo; ++i) oplane[i] = bv;
        }
        for (int c = 0; c < C; ++c) {
            const double* xplane = &X.data[static_cast<std::size_t>(c) * H * Wd];
            const double* wk = &W.data[((static_cast<std::size_t>(o) * C + c) * kh) * kw];
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    double wv = wk[ky * kw + kx];
                    if (wv == 0.0) continue;
                    for (int yo = 0; yo < Ho; ++yo) {
                        int yi = yo * stride - pad + ky;
                        if (yi < 0 || yi >= H) continue;
                        const double* xrow = &xplane[static_cast<std::size_t>(yi) * Wd];
                        double* orow = &oplane[static_cast<std::size_t>(yo) * Wo];
                        for (int xo = 0; xo < Wo; ++xo) {
                            int xi = xo * stride - pad + kx;
                            if (xi < 0 || xi >= Wd) continue;
                            orow[xo] += wv * xrow[xi];
                        }
                    }
                }
            }
        }
    }

    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(out), std::move(parents),
                     [C, H, Wd, O, kh, kw, Ho, Wo, stride, pad](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pw = *nd.parents[1];
        if (px.requires_grad) {
            Tensor& gx = px.ensure_grad();
            for (int c = 0; c < C; ++c) {
                double* gxplane = &gx.data[static_cast<std::size_t>(c) * H * Wd];
                for (int o = 0; o < O; ++o) {
                    const double* gplane = &nd.grad.data[static_cast<std::size_t>(o) * Ho * Wo];
                    const double* wk =
                        &pw.val.data[((static_cast<std::size_t>(o) * C + c) * kh) * kw];
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            double wv = wk[ky * kw + kx];
                            if (wv == 0.0) continue;
                            for (int yo = 0; yo < Ho; ++yo) {
                                int yi = yo * stride - pad + ky;
                                if (yi < 0 || yi >= H) continue;
                                double* gxrow = &gxplane[static_cast<std::size_t>(yi) * Wd];
                                const double* grow = &gplane[static_cast<std::size_t>(yo) * Wo];
                                for (int xo = 0; xo < Wo; ++xo) {
                                    int xi = xo * stride - pad + kx;
                                    if (xi < 0 || xi >= Wd) continue;
                                    gxrow[xi] += wv * grow[xo];
                                }
                            }
                        }
                    }
                }
            }
        }
        if (pw.requires_grad) {
            Tensor& gw = pw.ensure_grad();
            for (int o = 0; o < O; ++o) {
                const double* gplane = &nd.grad.data[static_cast<std::size_t>(o) * Ho * Wo];
                for (int c = 0; c < C; ++c) {
                    const double* xplane = &px.val.data[static_cast<std::size_t>(c) * H * Wd];
                    double* gwk = &gw.data[((static_cast<std::size_t>(o) * C + c) * kh) * kw];
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            double acc = 0.0;
                            for (int yo = 0; yo < Ho; ++yo) {
                                int yi = yo * stride - pad + ky;
                                if (yi < 0 || yi >= H) continue;
                                const double* xrow = &xplane[static_cast<std::size_t>(yi) * Wd];
                                const double* grow = &gplane[static_cast<std::size_t>(yo) * Wo];
                                for (int xo = 0; xo < Wo; ++xo) {
                                    int xi = xo * stride - pad + kx;
                                    if (xi < 0 || xi >= Wd) continue;
                                    acc += xrow[xi] * grow[xo];
                                }
                            }
                            gwk[ky * kw + kx] += acc;
                        }
                    }
                }
            }
        }
        if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
            Tensor& gb = nd.parents[2]->ensure_grad();
            for (int o = 0; o < O; ++o) {
                const double* gplane = &nd.grad.data[static_cast<std::size_t>(o) * Ho * Wo];
                double acc = 0.0;
                for (int i = 0; i < Ho * Wo; ++i) acc += gplane[i];
                gb.data[o] += acc;
            }
        }
    });
}

Var space_to_depth(const Var& x, int factor) {
    const Tensor& X = x->val;
    if (X.rank() != 3) throw ValidationError("space_to_depth: rank-3 input required");
    if (factor < 1) throw ValidationError("space_to_depth: factor must be >= 1");
    int C = X.shape[0], H = X.shape[1], W = X.shape[2];
    if (H % factor || W % factor)
        throw ValidationError("space_to_depth: spatial size " + X.shape_str() +
                              " not divisible by factor " + std::to_string(factor));
    if (factor == 1) {
        return make_node(X, {x}, [](Node& nd) {
            Tensor& g = nd.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += nd.grad.data[i];
        });
    }
    int Ho = H / factor, Wo = W / factor;
    Tensor out({C * factor * factor, Ho, Wo});
    for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) {
                int oc = (c * factor + dy) * factor + dx;
                for (int y = 0; y < Ho; ++y)
                    for (int xw = 0; xw < Wo; ++xw)
                        out.at3(oc, y, xw) = X.at3(c, y * factor + dy, xw * factor + dx);
            }
    return make_node(std::move(out), {x}, [C, Ho, Wo, factor](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx) {
                    int oc = (c * factor + dy) * factor + dx;
                    for (int y = 0; y < Ho; ++y)
                        for (int xw = 0; xw < Wo; ++xw)
                            g.at3(c, y * factor + dy, xw * factor + dx) += nd.grad.at3(oc, y, xw);
                }
    });
}

Var upsample_nearest(const Var& x, int factor) {
    const Tensor& X = x->val;
    if (X.rank() != 3) throw ValidationError("upsample_nearest: rank-3 input required");
    int C = X.shape[0], H = X.shape[1], W = X.shape[2];
    Tensor out({C, H * factor, W * factor});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H * factor; ++y)
            for (int xw = 0; xw < W * factor; ++xw)
                out.at3(c, y, xw) = X.at3(c, y / factor, xw / factor);
    return make_node(std::move(out), {x}, [C, H, W, factor](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H * factor; ++y)
                for (int xw = 0; xw < W * factor; ++xw)
                    g.at3(c, y / factor, xw / factor) += nd.grad.at3(c, y, xw);
    });
}

Var upsample_nearest_to(const Var& x, int out_h, int out_w) {
    const Tensor& X = x->val;
    if (X.rank() != 3) throw ValidationError("upsample_nearest_to: rank-3 input required");
    if (out_h < 1 || out_w < 1) throw ValidationError("upsample_nearest_to: bad target size");
    int C = X.shape[0], H = X.shape[1], W = X.shape[2];
    Tensor out({C, out_h, out_w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < out_h; ++y) {
            int sy = y * H / out_h;
            for (int xw = 0; xw < out_w; ++xw) out.at3(c, y, xw) = X.at3(c, sy, xw * W / out_w);
        }
    return make_node(std::move(out), {x}, [C, H, W, out_h, out_w](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < out_h; ++y) {
                int sy = y * H / out_h;
                for (int xw = 0; xw < out_w; ++xw)
                    g.at3(c, sy, xw * W / out_w) += nd.grad.at3(c, y, xw);
            }
    });
}

Var avg_pool_to(const Var& x, int out_h, int out_w) {
    const Tensor& X = x->val;
    if (X.rank() != 3) throw ValidationError("avg_pool_to: rank-3 input required");
    int C = X.shape[0], H = X.shape[1], W = X.shape[2];
    if (out_h < 1 || out_w < 1 || out_h > H || out_w > W)
        throw ValidationError("avg_pool_to: bad target size");
    Tensor out({C, out_h, out_w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < out_h; ++y) {
            int y0 = y * H / out_h, y1 = (y + 1) * H / out_h;
            for (int xw = 0; xw < out_w; ++xw) {
                int x0 = xw * W / out_w, x1 = (xw + 1) * W / out_w;
                double acc = 0.0;
                for (int yy = y0; yy < y1; ++yy)
                    for (int xx = x0; xx < x1; ++xx) acc += X.at3(c, yy, xx);
                out.at3(c, y, xw) = acc / ((y1 - y0) * (x1 - x0));
            }
        }
    return make_node(std::move(out), {x}, [C, H, W, out_h, out_w](Node& nd) {
        Tensor& g = nd.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < out_h; ++y) {
                int y0 = y * H / out_h, y1 = (y + 1) * H / out_h;
                for (int xw = 0; xw < out_w; ++xw) {
                    int x0 = xw * W / out_w, x1 = (xw + 1) * W / out_w;
                    double gv = nd.grad.at3(c, y, xw) / ((y1 - y0) * (x1 - x0));
                    for (int yy = y0; yy < y1; ++yy)
                        for (int xx = x0; xx < x1; ++xx) g.at3(c, yy, xx) += gv;
                }
            }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const Tensor& X = x->val;
    if (X.rank() != 3) throw ValidationError("group_norm: rank-3 input required");
    int C = X.shape[0], H = X.shape[1], W = X.shape[2];
    if (groups < 1 || C % groups)
        throw ConfigError("group_norm: groups " + std::to_string(groups) +
                          " must divide channels " + std::to_string(C));
    if (gamma && gamma->val.numel() != static_cast<std::size_t>(C))
        throw ValidationError("group_norm: gamma size mismatch");
    if (beta && beta->val.numel() != static_cast<std::size_t>(C))
        throw ValidationError("group_norm: beta size mismatch");
    int cg = C / groups;
    std::size_t plane = static_cast<std::size_t>(H) * W;
    std::size_t gsz = static_cast<std::size_t>(cg) * plane;

    Tensor out(X.shape);
    std::vector<double> mu(groups), istd(groups);
    for (int g = 0; g < groups; ++g) {
        const double* base = &X.data[static_cast<std::size_t>(g) * gsz];
        double m = 0.0;
        for (std::size_t i = 0; i < gsz; ++i) m += base[i];
        m /= static_cast<double>(gsz);
        double v = 0.0;
        for (std::size_t i = 0; i < gsz; ++i) {
            double d = base[i] - m;
            v += d * d;
        }
        v /= static_cast<double>(gsz);
        mu[g] = m;
        istd[g] = 1.0 / std::sqrt(v + eps);
    }
    for (int c = 0; c < C; ++c) {
        int g = c / cg;
        double gm = gamma ? gamma->val.data[c] : 1.0;
        double bt = beta ? beta->val.data[c] : 0.0;
        const double* xp = &X.data[static_cast<std::size_t>(c) * plane];
        double* op = &out.data[static_cast<std::size_t>(c) * plane];
        for (std::size_t i = 0; i < plane; ++i) op[i] = (xp[i] - mu[g]) * istd[g] * gm + bt;
    }

    std::vector<Var> parents{x};
    int gamma_idx = -1, beta_idx = -1;
    if (gamma) { gamma_idx = static_cast<int>(parents.size()); parents.push_back(gamma); }
    if (beta) { beta_idx = static_cast<int>(parents.size()); parents.push_back(beta); }

    return make_node(std::move(out), std::move(parents),
                     [C, cg, plane, gsz, groups, mu, istd, gamma_idx, beta_idx](Node& nd) {
        Node& px = *nd.parents[0];
        const Tensor& X = px.val;
        const Node* pg = gamma_idx >= 0 ? nd.parents[gamma_idx].get() : nullptr;

        if (pg && nd.parents[gamma_idx]->requires_grad) {
            Tensor& gg = nd.parents[gamma_idx]->ensure_grad();
            for (int c = 0; c < C; ++c) {
                int g = c / cg;
                const double* xp = &X.data[static_cast<std::size_t>(c) * plane];
                const double* gp = &nd.grad.data[static_cast<std::size_t>(c) * plane];
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) acc += gp[i] * (xp[i] - mu[g]) * istd[g];
                gg.data[c] += acc;
            }
        }
        if (beta_idx >= 0 && nd.parents[beta_idx]->requires_grad) {
            Tensor& gb = nd.parents[beta_idx]->ensure_grad();
            for (int c = 0; c < C; ++c) {
                const double* gp = &nd.grad.data[static_cast<std::size_t>(c) * plane];
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
                gb.data[c] += acc;
            }
        }
        if (px.requires_grad) {
            Tensor& gx = px.ensure_grad();
            // dL/dxhat = g * gamma; dL/dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            for (int g = 0; g < groups; ++g) {
                double sum_d = 0.0, sum_dx = 0.0;
                for (int cc = 0; cc < cg; ++cc) {
                    int c = g * cg + cc;
                    double gm = pg ? pg->val.data[c] : 1.0;
                    const double* xp = &X.data[static_cast<std::size_t>(c) * plane];
                    const double* gp = &nd.grad.data[static_cast<std::size_t>(c) * plane];
                    for (std::size_t i = 0; i < plane; ++i) {
                        double xhat = (xp[i] - mu[g]) * istd[g];
                        double d = gp[i] * gm;
                        sum_d += d;
                        sum_dx += d * xhat;
                    }
                }
                double mean_d = sum_d / static_cast<double>(gsz);
                double mean_dx = sum_dx / static_cast<double>(gsz);
                for (int cc = 0; cc < cg; ++cc) {
                    int c = g * cg + cc;
                    double gm = pg ? pg->val.data[c] : 1.0;
                    const double* xp = &X.data[static_cast<std::size_t>(c) * plane];
                    const double* gp = &nd.grad.data[static_cast<std::size_t>(c) * plane];
                    double* gxp = &gx.data[static_cast<std::size_t>(c) * plane];
                    for (std::size_t i = 0; i < plane; ++i) {
                        double xhat = (xp[i] - mu[g]) * istd[g];
                        double d = gp[i] * gm;
                        gxp[i] += istd[g] * (d - mean_d - xhat * mean_dx);
                    }
                }
            }
        }
    });
}

Var add_channel_bias(const Var& x, const Var& b) {
    const Tensor& X = x->val;
    if (X.rank() != 3 || b->val.numel() != static_cast<std::size_t>(X.shape[0]))
        throw ValidationError("add_channel_bias: shape mismatch");
    int C = X.shape[0];
    std::size_t plane = static_cast<std::size_t>(X.shape[1]) * X.shape[2];
    Tensor out = X;
    for (int c = 0; c < C; ++c) {
        double bv = b->val.data[c];
        double* op = &out.data[static_cast<std::size_t>(c) * plane];
        for (std::size_t i = 0; i < plane; ++i) op[i] += bv;
    }
    return make_node(std::move(out), {x, b}, [C, plane](Node& nd) {
        if (nd.parents[0]->requires_grad) accum(*nd.parents[0], nd.grad);
        if (nd.parents[1]->requires_grad) {
            Tensor& gb = nd.parents[1]->ensure_grad();
            for (int c = 0; c < C; ++c) {
                const double* gp = &nd.grad.data[static_cast<std::size_t>(c) * plane];
                double acc = 0.0;
                for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
                gb.data[c] += acc;
            }
        }
    });
}

Var scale_spatial(const Var& z, const Var& w) {
    const Tensor& Z = z->val;
    const Tensor& W = w->val;
    if (Z.rank() != 3 || W.rank() != 2 || Z.shape[1] != W.shape[0] || Z.shape[2] != W.shape[1])
        throw ValidationError("scale_spatial: shape mismatch");
    int C = Z.shape[0];
    std::size_t plane = static_cast<std::size_t>(Z.shape[1]) * Z.shape[2];
    Tensor out = Z;
    for (int c = 0; c < C; ++c) {
        double* op = &out.data[static_cast<std::size_t>(c) * plane];
        for (std::size_t i = 0; i < plane; ++i) op[i] *= W.data[i];
    }
    return make_node(std::move(out), {z, w}, [C, plane](Node& nd) {
        Node& pz = *nd.parents[0];
        Node& pw = *nd.parents[1];
        if (pz.requires_grad) {
            Tensor& g = pz.ensure_grad();
            for (int c = 0; c < C; ++c) {
                double* gp = &g.data[static_cast<std::size_t>(c) * plane];
                const double* ndp = &nd.grad.data[static_cast<std::size_t>(c) * plane];
                for (std::size_t i = 0; i < plane; ++i) gp[i] += ndp[i] * pw.val.data[i];
            }
        }
        if (pw.requires_grad) {
            Tensor& g = pw.ensure_grad();
            for (int c = 0; c < C; ++c) {
                const double* zp = &pz.val.data[static_cast<std::size_t>(c) * plane];
                const double* ndp = &nd.grad.data[static_cast<std::size_t>(c) * plane];
                for (std::size_t i = 0; i < plane; ++i) g.data[i] += ndp[i] * zp[i];
            }
        }
    });
}

Var channel_dot(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "channel_dot");
    const Tensor& A = a->val;
    if (A.rank() != 3) throw ValidationError("channel_dot: rank-3 input required");
    int C = A.shape[0];
    std::size_t plane = static_cast<std::size_t>(A.shape[1]) * A.shape[2];
    Tensor out({A.shape[1], A.shape[2]});
    for (int c = 0; c < C; ++c) {
        const double* ap = &A.data[static_cast<std::size_t>(c) * plane];
        const double* bp = &b->val.data[static_cast<std::size_t>(c) * plane];
        for (std::size_t i = 0; i < plane; ++i) out.data[i] += ap[i] * bp[i];
    }
    return make_node(std::move(out), {a, b}, [C, plane](Node& nd) {
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (pa.requires_grad) {
            Tensor& g = pa.ensure_grad();
            for (int c = 0; c < C; ++c) {
                double* gp = &g.data[static_cast<std::size_t>(c) * plane];
                const double* bp = &pb.val.data[static_cast<std::size_t>(c) * plane];
                for (std::size_t i = 0; i < plane; ++i) gp[i] += nd.grad.data[i] * bp[i];
            }
        }
        if (pb.requires_grad) {
            Tensor& g = pb.ensure_grad();
            for (int c = 0; c < C; ++c) {
                double* gp = &g.data[static_cast<std::size_t>(c) * plane];
                const double* ap = &pa.val.data[static_cast<std::size_t>(c) * plane];
                for (std::size_t i = 0; i < plane; ++i) gp[i] += nd.grad.data[i] * ap[i];
            }
        }
    });
}

}  // namespace ct::ag
