#include "longalign/warpkit.hpp"

#include <algorithm>
#include <cmath>

#include "longalign/errors.hpp"

namespace longalign::warpkit {

namespace {

using torch::autograd::AutogradContext;
using torch::autograd::tensor_list;

// Clamped sample coordinate along one axis plus the bilinear footprint.
template <typename T>
struct Axis {
    int64_t lo;
    int64_t hi;
    T frac;
    T inside;  // derivative of the clamp: 1 inside the valid range, else 0

    static Axis make(T coord, int64_t size) {
        const T max_coord = static_cast<T>(size - 1);
        Axis a{};
        a.inside = (coord > T(0) && coord < max_coord) ? T(1) : T(0);
        const T c = std::clamp(coord, T(0), max_coord);
        a.lo = static_cast<int64_t>(std::floor(c));
        a.hi = std::min(a.lo + 1, size - 1);
        a.frac = c - static_cast<T>(a.lo);
        return a;
    }
};

template <typename T>
void warp_forward_kernel(const T* img, const T* disp, T* out, int64_t batch, int64_t channels,
                         int64_t h, int64_t w) {
    const int64_t plane = h * w;
    for (int64_t b = 0; b < batch; ++b) {
        const T* dr = disp + (b * 2) * plane;
        const T* dc = dr + plane;
        const T* src = img + b * channels * plane;
        T* dst = out + b * channels * plane;
        for (int64_t i = 0; i < h; ++i) {
            for (int64_t j = 0; j < w; ++j) {
                const int64_t p = i * w + j;
                const auto ay = Axis<T>::make(static_cast<T>(i) + dr[p], h);
                const auto ax = Axis<T>::make(static_cast<T>(j) + dc[p], w);
                const T w00 = (1 - ay.frac) * (1 - ax.frac);
                const T w01 = (1 - ay.frac) * ax.frac;
                const T w10 = ay.frac * (1 - ax.frac);
                const T w11 = ay.frac * ax.frac;
                const int64_t o00 = ay.lo * w + ax.lo;
                const int64_t o01 = ay.lo * w + ax.hi;
                const int64_t o10 = ay.hi * w + ax.lo;
                const int64_t o11 = ay.hi * w + ax.hi;
                for (int64_t c = 0; c < channels; ++c) {
                    const T* s = src + c * plane;
                    dst[c * plane + p] = w00 * s[o00] + w01 * s[o01] + w10 * s[o10] + w11 * s[o11];
                }
            }
        }
    }
}

template <typename T>
void warp_backward_kernel(const T* img, const T* disp, const T* grad_out, T* grad_img,
                          T* grad_disp, int64_t batch, int64_t channels, int64_t h, int64_t w) {
    const int64_t plane = h * w;
    for (int64_t b = 0; b < batch; ++b) {
        const T* dr = disp + (b * 2) * plane;
        const T* dc = dr + plane;
        T* gdr = grad_disp + (b * 2) * plane;
        T* gdc = gdr + plane;
        const T* src = img + b * channels * plane;
        const T* go = grad_out + b * channels * plane;
        T* gi = grad_img + b * channels * plane;
        for (int64_t i = 0; i < h; ++i) {
            for (int64_t j = 0; j < w; ++j) {
                const int64_t p = i * w + j;
                const auto ay = Axis<T>::make(static_cast<T>(i) + dr[p], h);
                const auto ax = Axis<T>::make(static_cast<T>(j) + dc[p], w);
                const T w00 = (1 - ay.frac) * (1 - ax.frac);
                const T w01 = (1 - ay.frac) * ax.frac;
                const T w10 = ay.frac * (1 - ax.frac);
                const T w11 = ay.frac * ax.frac;
                const int64_t o00 = ay.lo * w + ax.lo;
                const int64_t o01 = ay.lo * w + ax.hi;
                const int64_t o10 = ay.hi * w + ax.lo;
                const int64_t o11 = ay.hi * w + ax.hi;
                T sum_r = 0;
                T sum_c = 0;
                for (int64_t c = 0; c < channels; ++c) {
                    const T g = go[c * plane + p];
                    if (g == T(0)) continue;
                    const T* s = src + c * plane;
                    T* gs = gi + c * plane;
                    gs[o00] += g * w00;
                    gs[o01] += g * w01;
                    gs[o10] += g * w10;
                    gs[o11] += g * w11;
                    const T v00 = s[o00], v01 = s[o01], v10 = s[o10], v11 = s[o11];
                    sum_r += g * ((v10 - v00) * (1 - ax.frac) + (v11 - v01) * ax.frac);
                    sum_c += g * ((v01 - v00) * (1 - ay.frac) + (v11 - v10) * ay.frac);
                }
                gdr[p] = sum_r * ay.inside;
                gdc[p] = sum_c * ax.inside;
            }
        }
    }
}

class BilinearWarp : public torch::autograd::Function<BilinearWarp> {
public:
    static torch::Tensor forward(AutogradContext* ctx, const torch::Tensor& image,
                                 const torch::Tensor& disp) {
        auto img = image.contiguous();
        auto d = disp.contiguous();
        ctx->save_for_backward({img, d});
        auto out = torch::empty_like(img);
        const auto sizes = img.sizes();
        AT_DISPATCH_FLOATING_TYPES(img.scalar_type(), "warp_forward", [&] {
            warp_forward_kernel<scalar_t>(img.data_ptr<scalar_t>(), d.data_ptr<scalar_t>(),
                                          out.data_ptr<scalar_t>(), sizes[0], sizes[1], sizes[2],
                                          sizes[3]);
        });
        return out;
    }

    static tensor_list backward(AutogradContext* ctx, tensor_list grad_outputs) {
        const auto saved = ctx->get_saved_variables();
        const auto& img = saved[0];
        const auto& d = saved[1];
        auto go = grad_outputs[0].contiguous();
        auto grad_img = torch::zeros_like(img);
        auto grad_disp = torch::zeros_like(d);
        const auto sizes = img.sizes();
        AT_DISPATCH_FLOATING_TYPES(img.scalar_type(), "warp_backward", [&] {
            warp_backward_kernel<scalar_t>(img.data_ptr<scalar_t>(), d.data_ptr<scalar_t>(),
                                           go.data_ptr<scalar_t>(), grad_img.data_ptr<scalar_t>(),
                                           grad_disp.data_ptr<scalar_t>(), sizes[0], sizes[1],
                                           sizes[2], sizes[3]);
        });
        return {grad_img, grad_disp};
    }
};

void require_field(const torch::Tensor& disp, const char* what) {
    const bool ok = (disp.dim() == 3 && disp.size(0) == 2) || (disp.dim() == 4 && disp.size(1) == 2);
    if (!ok) {
        throw DataError(std::string(what) + ": displacement must have shape (2,H,W) or (B,2,H,W), got " +
                        c10::str(disp.sizes()));
    }
}

torch::Tensor as_batched(const torch::Tensor& t) { return t.dim() == 3 ? t.unsqueeze(0) : t; }

// Difference along `dim`: central in the interior, one-sided at both ends.
torch::Tensor gradient_along(const torch::Tensor& x, int64_t dim) {
    const int64_t n = x.size(dim);
    if (n < 2) throw DataError("spatial_gradient: every spatial side must be >= 2");
    auto first = x.narrow(dim, 1, 1) - x.narrow(dim, 0, 1);
    auto last = x.narrow(dim, n - 1, 1) - x.narrow(dim, n - 2, 1);
    if (n == 2) return torch::cat({first, last}, dim);
    auto interior = (x.narrow(dim, 2, n - 2) - x.narrow(dim, 0, n - 2)) * 0.5;
    return torch::cat({first, interior, last}, dim);
}

}  // namespace

DeformationField DeformationField::zeros(int64_t height, int64_t width) {
    return {torch::zeros({2, height, width}, torch::kFloat32)};
}

DeformationField DeformationField::from_tensor(const torch::Tensor& t) {
    auto d = t.detach();
    if (d.dim() == 4 && d.size(0) == 1) d = d.squeeze(0);
    DeformationField f{d.to(torch::kFloat32).contiguous().clone()};
    f.validate();
    return f;
}

float DeformationField::max_abs() const { return disp.abs().max().item<float>(); }

void DeformationField::validate() const {
    if (!disp.defined() || disp.dim() != 3 || disp.size(0) != 2) {
        throw DataError("DeformationField must have shape (2,H,W)");
    }
    if (!torch::isfinite(disp).all().item<bool>()) {
        throw DataError("DeformationField contains non-finite entries");
    }
}

torch::Tensor affine_to_dense(const AffineParams& params, int64_t height, int64_t width) {
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto matrix = torch::tensor({params.matrix[0], params.matrix[1], params.matrix[2], params.matrix[3]}, opts)
                      .view({1, 2, 2});
    auto translation = torch::tensor({params.translation[0], params.translation[1]}, opts).view({1, 2});
    return affine_to_dense(matrix, translation, height, width).squeeze(0).to(torch::kFloat32);
}

torch::Tensor affine_to_dense(const torch::Tensor& matrix, const torch::Tensor& translation,
                              int64_t height, int64_t width) {
    if (height < 1 || width < 1) throw DataError("affine_to_dense: empty grid");
    const auto opts = matrix.options();
    const double cr = static_cast<double>(height - 1) / 2.0;
    const double cc = static_cast<double>(width - 1) / 2.0;
    auto rows = torch::arange(height, opts).sub(cr).view({height, 1}).expand({height, width});
    auto cols = torch::arange(width, opts).sub(cc).view({1, width}).expand({height, width});
    auto coords = torch::stack({rows.reshape(-1), cols.reshape(-1)}, 0);  // (2, HW)
    auto delta = matrix - torch::eye(2, opts).unsqueeze(0);
    auto disp = torch::matmul(delta, coords) + translation.unsqueeze(-1);
    return disp.view({matrix.size(0), 2, height, width});
}

torch::Tensor warp(const torch::Tensor& image, const torch::Tensor& disp) {
    require_field(disp, "warp");
    if (image.dim() != disp.dim()) {
        throw DataError("warp: image and displacement must both be batched or both unbatched");
    }
    auto img = as_batched(image);
    auto d = as_batched(disp);
    if (img.size(-2) != d.size(-2) || img.size(-1) != d.size(-1)) {
        throw DataError("warp: spatial shape mismatch " + c10::str(image.sizes()) + " vs " +
                        c10::str(disp.sizes()));
    }
    if (d.size(0) != img.size(0)) {
        if (d.size(0) != 1) throw DataError("warp: batch size mismatch");
        d = d.expand({img.size(0), 2, d.size(2), d.size(3)});
    }
    if (img.scalar_type() != d.scalar_type()) d = d.to(img.scalar_type());
    auto out = BilinearWarp::apply(img, d);
    return image.dim() == 3 ? out.squeeze(0) : out;
}

torch::Tensor compose(const torch::Tensor& outer, const torch::Tensor& inner) {
    require_field(outer, "compose");
    require_field(inner, "compose");
    if (outer.sizes() != inner.sizes()) {
        throw DataError("compose: shape mismatch " + c10::str(outer.sizes()) + " vs " +
                        c10::str(inner.sizes()));
    }
    return inner + warp(outer, inner);
}

torch::Tensor resize_field(const torch::Tensor& disp, int64_t height, int64_t width) {
    require_field(disp, "resize_field");
    auto d = as_batched(disp);
    const double sr = static_cast<double>(height) / static_cast<double>(d.size(2));
    const double sc = static_cast<double>(width) / static_cast<double>(d.size(3));
    namespace F = torch::nn::functional;
    auto r = F::interpolate(d, F::InterpolateFuncOptions()
                                   .size(std::vector<int64_t>{height, width})
                                   .mode(torch::kBilinear)
                                   .align_corners(false));
    auto scale = torch::tensor({sr, sc}, r.options()).view({1, 2, 1, 1});
    r = r * scale;
    return disp.dim() == 3 ? r.squeeze(0) : r;
}

torch::Tensor upsample_field(const torch::Tensor& disp) {
    return resize_field(disp, disp.size(-2) * 2, disp.size(-1) * 2);
}

std::pair<torch::Tensor, torch::Tensor> spatial_gradient(const torch::Tensor& disp) {
    return {gradient_along(disp, -2), gradient_along(disp, -1)};
}

torch::Tensor jacobian_det(const torch::Tensor& disp) {
    require_field(disp, "jacobian_det");
    auto [grow, gcol] = spatial_gradient(disp);
    const int64_t ch = disp.dim() - 3;
    auto drr = grow.select(ch, 0);  // d u_row / d row
    auto drc = gcol.select(ch, 0);  // d u_row / d col
    auto dcr = grow.select(ch, 1);
    auto dcc = gcol.select(ch, 1);
    return (drr + 1) * (dcc + 1) - drc * dcr;
}

double njd_percent(const torch::Tensor& disp) {
    auto det = jacobian_det(disp.detach());
    return 100.0 * det.lt(0).sum().item<double>() / static_cast<double>(det.numel());
}

namespace {

torch::Tensor pearson(const torch::Tensor& a, const torch::Tensor& b) {
    // a, b: (B, N)
    auto am = a - a.mean(1, true);
    auto bm = b - b.mean(1, true);
    auto num = (am * bm).sum(1);
    auto va = (am * am).sum(1);
    auto vb = (bm * bm).sum(1);
    // A constant input leaves only rounding residue in its centred energy.
    auto tol_a = (a * a).sum(1) * 1e-10 + 1e-30;
    auto tol_b = (b * b).sum(1) * 1e-10 + 1e-30;
    auto valid = va.gt(tol_a).logical_and(vb.gt(tol_b));
    auto den = torch::sqrt(torch::where(valid, va * vb, torch::ones_like(va)));
    return torch::where(valid, num / den, torch::zeros_like(num));
}

torch::Tensor local_ncc(const torch::Tensor& a, const torch::Tensor& b, int64_t window) {
    if (window % 2 == 0) throw DataError("ncc: window size must be odd");
    if (a.dim() < 3) throw DataError("ncc: windowed NCC needs (C,H,W) or (B,C,H,W) inputs");
    auto x = a.dim() == 3 ? a.unsqueeze(0) : a;
    auto y = b.dim() == 3 ? b.unsqueeze(0) : b;
    namespace F = torch::nn::functional;
    auto pool = [&](const torch::Tensor& t) {
        return F::avg_pool2d(t, F::AvgPool2dFuncOptions(window).stride(1).padding(window / 2).count_include_pad(false));
    };
    auto mx = pool(x), my = pool(y);
    auto cov = pool(x * y) - mx * my;
    auto vx = (pool(x * x) - mx * mx).clamp_min(0);
    auto vy = (pool(y * y) - my * my).clamp_min(0);
    return (cov / torch::sqrt(vx * vy + 1e-8)).mean();
}

}  // namespace

torch::Tensor ncc(const torch::Tensor& a, const torch::Tensor& b, int64_t window) {
    if (a.sizes() != b.sizes()) {
        throw DataError("ncc: shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
    }
    if (a.numel() < 2) throw DataError("ncc: need at least two elements");
    if (window > 0) return local_ncc(a, b, window);
    return pearson(a.reshape({1, -1}), b.reshape({1, -1})).squeeze(0);
}

torch::Tensor ncc_batch(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.sizes() != b.sizes()) {
        throw DataError("ncc_batch: shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
    }
    return pearson(a.reshape({a.size(0), -1}), b.reshape({b.size(0), -1}));
}

torch::Tensor smoothness_penalty(const torch::Tensor& disp) {
    require_field(disp, "smoothness_penalty");
    auto d = as_batched(disp);
    const int64_t h = d.size(2), w = d.size(3);
    if (h < 2 || w < 2) throw DataError("smoothness_penalty: every spatial side must be >= 2");
    auto dr = d.narrow(2, 1, h - 1) - d.narrow(2, 0, h - 1);
    auto dc = d.narrow(3, 1, w - 1) - d.narrow(3, 0, w - 1);
    const double pixels = static_cast<double>(d.size(0) * h * w);
    return (dr.square().sum() + dc.square().sum()) / pixels;
}

torch::Tensor jd_penalty(const torch::Tensor& disp) {
    return torch::relu(-jacobian_det(disp)).square().mean();
}

}  // namespace longalign::warpkit
