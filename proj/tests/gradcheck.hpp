#pragma once

// Central finite-difference oracle for scalar functions of one tensor.

#include <functional>

#include <torch/torch.h>

namespace longalign::testing {

// Numerical gradient of f at x (double precision, central differences).
inline torch::Tensor numeric_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                      const torch::Tensor& x, double step = 1e-3) {
    torch::NoGradGuard guard;
    auto base = x.detach().to(torch::kFloat64).contiguous().clone();
    auto grad = torch::zeros_like(base);
    auto flat = base.view(-1);
    auto gflat = grad.view(-1);
    for (int64_t i = 0; i < flat.numel(); ++i) {
        const double orig = flat[i].item<double>();
        flat[i] = orig + step;
        const double up = f(base).item<double>();
        flat[i] = orig - step;
        const double down = f(base).item<double>();
        flat[i] = orig;
        gflat[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

inline torch::Tensor analytic_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                       const torch::Tensor& x) {
    auto v = x.detach().to(torch::kFloat64).clone().requires_grad_(true);
    f(v).backward();
    return v.grad().detach();
}

// Random displacement whose sample coordinates avoid the bilinear kinks
// (integer positions) by at least `margin` pixels, so central differences with
// a small step never straddle a kink.
inline torch::Tensor off_grid_displacement(torch::IntArrayRef shape, double scale, double margin = 0.05) {
    auto d = torch::randn(shape, torch::kFloat64) * scale;
    auto frac = torch::rand(shape, torch::kFloat64) * (1.0 - 2.0 * margin) + margin;
    return torch::floor(d) + frac;
}

// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
    const double denom = std::max(a.norm().item<double>(), b.norm().item<double>());
    if (denom < 1e-12) return 0.0;
    return (a - b).norm().item<double>() / denom;
}

inline double gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                             const torch::Tensor& x, double step = 1e-3) {
    return relative_error(analytic_gradient(f, x), numeric_gradient(f, x, step));
}

}  // namespace longalign::testing
