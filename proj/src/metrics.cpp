#include "ct/metrics.hpp"

#include <cmath>

namespace ct::metrics {

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01, kK2 = 0.03;

Tensor luminance(const Tensor& img) {
    if (img.rank() == 2) return img;
    if (img.rank() == 3 && img.shape[0] == 3) {
        Tensor y({img.shape[1], img.shape[2]});
        for (int r = 0; r < img.shape[1]; ++r)
            for (int c = 0; c < img.shape[2]; ++c)
                y.at2(r, c) = 0.299 * img.at3(0, r, c) + 0.587 * img.at3(1, r, c) +
                              0.114 * img.at3(2, r, c);
        return y;
    }
    throw ValidationError("ssim: expected [H,W] or [3,H,W] input");
}

const std::vector<double>& gaussian_window() {
    static const std::vector<double> w = [] {
        std::vector<double> k(kWin * kWin);
        double sum = 0.0;
        for (int y = 0; y < kWin; ++y)
            for (int x = 0; x < kWin; ++x) {
                double dy = y - kWin / 2, dx = x - kWin / 2;
                k[y * kWin + x] = std::exp(-(dx * dx + dy * dy) / (2 * kSigma * kSigma));
                sum += k[y * kWin + x];
            }
        for (double& v : k) v /= sum;
        return k;
    }();
    return w;
}

// SSIM map over all fully-supported window centers; `centers` receives the
// (y,x) of each map entry.
std::vector<double> ssim_map(const Tensor& a, const Tensor& b,
                             std::vector<std::pair<int, int>>* centers) {
    require_same_shape(a, b, "ssim");
    Tensor ya = luminance(a), yb = luminance(b);
    int h = ya.shape[0], w = ya.shape[1];
    if (h < kWin || w < kWin)
        throw ValidationError("ssim: image smaller than the 11x11 window");
    const std::vector<double>& win = gaussian_window();
    const double c1 = kK1 * kK1, c2 = kK2 * kK2;

    std::vector<double> out;
    for (int cy = kWin / 2; cy < h - kWin / 2; ++cy)
        for (int cx = kWin / 2; cx < w - kWin / 2; ++cx) {
            double mu_a = 0, mu_b = 0;
            for (int y = 0; y < kWin; ++y)
                for (int x = 0; x < kWin; ++x) {
                    double wt = win[y * kWin + x];
                    mu_a += wt * ya.at2(cy + y - kWin / 2, cx + x - kWin / 2);
                    mu_b += wt * yb.at2(cy + y - kWin / 2, cx + x - kWin / 2);
                }
            double va = 0, vb = 0, cov = 0;
            for (int y = 0; y < kWin; ++y)
                for (int x = 0; x < kWin; ++x) {
                    double wt = win[y * kWin + x];
                    double da = ya.at2(cy + y - kWin / 2, cx + x - kWin / 2) - mu_a;
                    double db = yb.at2(cy + y - kWin / 2, cx + x - kWin / 2) - mu_b;
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            double s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                       ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
            out.push_back(s);
            if (centers) centers->push_back({cy, cx});
        }
    return out;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    std::vector<double> map = ssim_map(a, b, nullptr);
    double s = 0.0;
    for (double v : map) s += v;
    return s / map.size();
}

double ssim_masked(const Tensor& a, const Tensor& b, const Tensor& mask) {
    if (mask.rank() != 2) throw ValidationError("ssim_masked: rank-2 mask required");
    std::vector<std::pair<int, int>> centers;
    std::vector<double> map = ssim_map(a, b, &centers);
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < map.size(); ++i)
        if (mask.at2(centers[i].first, centers[i].second) != 0.0) {
            s += map[i];
            ++n;
        }
    if (n == 0) throw ValidationError("ssim_masked: mask selects no window centers");
    return s / n;
}

double psnr(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "psnr");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= a.numel();
    if (mse == 0.0) return kPsnrInf;
    return 10.0 * std::log10(1.0 / mse);
}

double motion_magnitude(const std::vector<Tensor>& frames) {
    if (frames.size() < 2) throw ValidationError("motion: at least two frames required");
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < frames.size(); ++i) {
        require_same_shape(frames[i], frames[i + 1], "motion");
        double m = 0.0;
        for (std::size_t p = 0; p < frames[i].numel(); ++p)
            m += std::fabs(frames[i + 1].data[p] - frames[i].data[p]);
        acc += m / frames[i].numel();
    }
    return acc / (frames.size() - 1);
}

double flicker(const std::vector<Tensor>& generated, const std::vector<Tensor>& reference) {
    return std::fabs(motion_magnitude(generated) - motion_magnitude(reference));
}

void jacobi_eigen(std::vector<double>& a, int n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
    eigvecs.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) eigvecs[static_cast<std::size_t>(i) * n + i] = 1.0;
    auto A = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * n + j]; };
    auto V = [&](int i, int j) -> double& { return eigvecs[static_cast<std::size_t>(i) * n + j]; };

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += A(i, j) * A(i, j);
        if (off < 1e-24) break;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::fabs(A(p, q)) < 1e-300) continue;
                double theta = (A(q, q) - A(p, p)) / (2 * A(p, q));
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1));
                double c = 1.0 / std::sqrt(t * t + 1);
                double s = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = A(k, p), akq = A(k, q);
                    A(k, p) = c * akp - s * akq;
                    A(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = A(p, k), aqk = A(q, k);
                    A(p, k) = c * apk - s * aqk;
                    A(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = V(k, p), vkq = V(k, q);
                    V(k, p) = c * vkp - s * vkq;
                    V(k, q) = s * vkp + c * vkq;
                }
            }
    }
    eigvals.resize(n);
    for (int i = 0; i < n; ++i) eigvals[i] = A(i, i);
}

namespace {

// Symmetric PSD square root via eigendecomposition; eigenvalues slightly
// below zero (>= -1e-8) are clamped to zero.
std::vector<double> sqrt_sym(std::vector<double> a, int n) {
    std::vector<double> evals, evecs;
    jacobi_eigen(a, n, evals, evecs);
    for (double& v : evals) v = v > 0.0 ? std::sqrt(v) : 0.0;
    std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int k = 0; k < n; ++k)
                s += evecs[static_cast<std::size_t>(i) * n + k] * evals[k] *
                     evecs[static_cast<std::size_t>(j) * n + k];
            out[static_cast<std::size_t>(i) * n + j] = s;
        }
    return out;
}

void mean_cov(const std::vector<std::vector<double>>& feats, std::vector<double>& mu,
              std::vector<double>& cov) {
    std::size_t m = feats.size();
    std::size_t d = feats[0].size();
    mu.assign(d, 0.0);
    for (const auto& f : feats) {
        if (f.size() != d) throw ValidationError("feature_distance: inconsistent feature dims");
        for (std::size_t i = 0; i < d; ++i) mu[i] += f[i];
    }
    for (double& v : mu) v /= m;
    cov.assign(d * d, 0.0);
    for (const auto& f : feats)
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                cov[i * d + j] += (f[i] - mu[i]) * (f[j] - mu[j]);
    for (double& v : cov) v /= (m - 1);
}

}  // namespace

double frechet_distance(const std::vector<std::vector<double>>& feats_a,
                        const std::vector<std::vector<double>>& feats_b) {
    if (feats_a.size() < 2 || feats_b.size() < 2)
        throw ValidationError("feature_distance: need at least 2 feature vectors per side");
    std::vector<double> mu_a, mu_b, cov_a, cov_b;
    mean_cov(feats_a, mu_a, cov_a);
    mean_cov(feats_b, mu_b, cov_b);
    if (mu_a.size() != mu_b.size())
        throw ValidationError("feature_distance: dimension mismatch between sides");
    int n = static_cast<int>(mu_a.size());

    double mean_term = 0.0;
    for (int i = 0; i < n; ++i) {
        double d = mu_a[i] - mu_b[i];
        mean_term += d * d;
    }
    double tr_a = 0.0, tr_b = 0.0;
    for (int i = 0; i < n; ++i) {
        tr_a += cov_a[static_cast<std::size_t>(i) * n + i];
        tr_b += cov_b[static_cast<std::size_t>(i) * n + i];
    }

    // Tr((Sa Sb)^(1/2)) = Tr((sqrt(Sa) Sb sqrt(Sa))^(1/2)), the inner matrix
    // being symmetric PSD.
    std::vector<double> sa = sqrt_sym(cov_a, n);
    std::vector<double> inner(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> tmp(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            double v = sa[static_cast<std::size_t>(i) * n + k];
            if (v == 0.0) continue;
            for (int j = 0; j < n; ++j)
                tmp[static_cast<std::size_t>(i) * n + j] +=
                    v * cov_b[static_cast<std::size_t>(k) * n + j];
        }
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            double v = tmp[static_cast<std::size_t>(i) * n + k];
            if (v == 0.0) continue;
            for (int j = 0; j < n; ++j)
                inner[static_cast<std::size_t>(i) * n + j] +=
                    v * sa[static_cast<std::size_t>(k) * n + j];
        }
    // symmetrize against round-off before the eigensolve
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double m = 0.5 * (inner[static_cast<std::size_t>(i) * n + j] +
                              inner[static_cast<std::size_t>(j) * n + i]);
            inner[static_cast<std::size_t>(i) * n + j] = m;
            inner[static_cast<std::size_t>(j) * n + i] = m;
        }
    std::vector<double> evals, evecs;
    jacobi_eigen(inner, n, evals, evecs);
    double tr_cross = 0.0;
    for (double v : evals) {
        if (v < 0.0) v = 0.0;
        tr_cross += std::sqrt(v);
    }
    double dist = mean_term + tr_a + tr_b - 2.0 * tr_cross;
    return dist < 0.0 ? 0.0 : dist;
}

double feature_distance(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                        const FeatureExtractor& extractor) {
    if (!extractor) throw ValidationError("feature_distance: extractor required");
    std::vector<std::vector<double>> fa, fb;
    for (const Tensor& f : a) fa.push_back(extractor(f));
    for (const Tensor& f : b) fb.push_back(extractor(f));
    return frechet_distance(fa, fb);
}

}  // namespace ct::metrics
