#pragma once

// Dense displacement-field mathematics shared by the registration network and
// the feature-level alignment block.
//
// Conventions:
//   * a displacement tensor has shape (2, H, W) or (B, 2, H, W), in pixels;
//     channel 0 is the row displacement, channel 1 the column displacement;
//   * the induced map is T(p) = p + disp(p) and resampling is backward:
//     warp(I, disp)(p) = I(T(p));
//   * out-of-bounds samples replicate the border.

#include <array>
#include <cstdint>

#include <torch/torch.h>

namespace longalign::warpkit {

// Owning (2, H, W) float32 displacement field in pixel units.
struct DeformationField {
    torch::Tensor disp;

    static DeformationField zeros(int64_t height, int64_t width);
    // Takes a (2, H, W) or (1, 2, H, W) tensor; converts to contiguous float32.
    static DeformationField from_tensor(const torch::Tensor& t);

    int64_t height() const { return disp.size(1); }
    int64_t width() const { return disp.size(2); }
    float max_abs() const;

    // Throws DataError on wrong rank, channel count or non-finite entries.
    void validate() const;
};

// T(p) = A (p - c) + c + t with c the image center ((H-1)/2, (W-1)/2).
struct AffineParams {
    std::array<double, 4> matrix{1.0, 0.0, 0.0, 1.0};  // row-major 2x2
    std::array<double, 2> translation{0.0, 0.0};       // (row, col) pixels

    static AffineParams identity() { return {}; }
    double det() const { return matrix[0] * matrix[3] - matrix[1] * matrix[2]; }
};

// Dense (2, H, W) displacement of an affine transform.
torch::Tensor affine_to_dense(const AffineParams& params, int64_t height, int64_t width);

// Batched, differentiable form. matrix (B, 2, 2), translation (B, 2) in pixels of
// the target grid. Returns (B, 2, H, W). Computed as (A - I)(p - c) + t so the
// identity transform yields an exactly zero field.
torch::Tensor affine_to_dense(const torch::Tensor& matrix, const torch::Tensor& translation,
                              int64_t height, int64_t width);

// Bilinear backward warp with border replication. Accepts (C,H,W)+(2,H,W) or
// (B,C,H,W)+(B,2,H,W). Differentiable in both arguments.
torch::Tensor warp(const torch::Tensor& image, const torch::Tensor& disp);

// Field of T_outer o T_inner: inner(p) + outer(p + inner(p)).
torch::Tensor compose(const torch::Tensor& outer, const torch::Tensor& inner);

// Bilinear resize of a displacement field to (height, width) using pixel-center
// alignment; row and column displacements are rescaled by the size ratios.
torch::Tensor resize_field(const torch::Tensor& disp, int64_t height, int64_t width);

// resize_field to twice the size; displacements are multiplied by exactly 2.
torch::Tensor upsample_field(const torch::Tensor& disp);

// Spatial derivatives of every channel along rows and columns: central
// differences in the interior, one-sided on the borders. Shapes match input.
std::pair<torch::Tensor, torch::Tensor> spatial_gradient(const torch::Tensor& disp);

// Determinant of the Jacobian of p + disp(p). Returns (H,W) or (B,H,W).
torch::Tensor jacobian_det(const torch::Tensor& disp);

// Percentage of pixels with negative Jacobian determinant, pooled over a batch.
double njd_percent(const torch::Tensor& disp);

// Global Pearson correlation over all elements; 0 when either side has zero
// variance. With window > 0 the mean of local NCC over window x window
// neighbourhoods is returned instead (inputs must then be (C,H,W) or (B,C,H,W)).
torch::Tensor ncc(const torch::Tensor& a, const torch::Tensor& b, int64_t window = 0);

// Per-sample global NCC of (B, ...) tensors, shape (B).
torch::Tensor ncc_batch(const torch::Tensor& a, const torch::Tensor& b);

// Mean over pixels (and batch) of the squared Frobenius norm of the forward
// difference gradient; the last row/column difference is zero.
torch::Tensor smoothness_penalty(const torch::Tensor& disp);

// Mean over pixels of max(0, -det J)^2.
torch::Tensor jd_penalty(const torch::Tensor& disp);

}  // namespace longalign::warpkit
