#pragma once

// Procedural longitudinal mammogram phantoms with known deformations.
//
// A phantom is a continuous breast-like texture T (silhouette, smooth
// background, density-dependent fibroglandular structure, optional lesion).
// The prior image samples T on the pixel grid; the current image samples T at
// p + phi_gt(p). Hence warp(prior, phi_gt) ~= current and phi_gt is the field a
// registration of prior onto current should recover.
//
// phi_gt = translation + linear part about the image center + a sum of three
// plane-wave sinusoids. With amplitude A the three parts are bounded by 0.4A,
// 0.2A and 0.4A pixels, so |phi_gt| <= A everywhere. The sinusoid wavelengths
// lie in [smoothness, 2 * smoothness] pixels, which bounds the spectral norm of
// the displacement gradient by gradient_bound(); when that bound is below 1 the
// map has no folds.
//
// Labels: lesion_growth < kGrowthThreshold is a cancer-free control. Otherwise
// cancer_year = clamp(5.5 - 4 * min(growth, 1.25), 0.5, 5.5), so faster growth
// means earlier diagnosis (growth >= 1.25 is diagnosed within year 1). Follow-up
// for controls is drawn uniformly from [3, 8] years from the seed; cases are
// followed at least until diagnosis.

#include <array>
#include <cstdint>
#include <optional>

#include <torch/torch.h>

#include "longalign/dataman.hpp"
#include "longalign/warpkit.hpp"

namespace longalign::phantom {

inline constexpr double kGrowthThreshold = 0.1;

struct PhantomSpec {
    int64_t height = 256;
    int64_t width = 128;
    dataman::DensityLevel density_level = dataman::DensityLevel::Med;
    double lesion_growth = 0.0;
    double deform_amplitude = 4.0;    // pixels
    double deform_smoothness = 64.0;  // minimum sinusoid wavelength, pixels
    uint64_t seed = 0;
    // When set, phi_gt is exactly this constant (row, col) translation.
    std::optional<std::array<double, 2>> fixed_translation;

    void validate() const;
};

struct PhantomPair {
    torch::Tensor prior;    // (1, H, W) in [0, 1]
    torch::Tensor current;  // (1, H, W) in [0, 1]
    warpkit::DeformationField phi_gt;
    dataman::ScreeningPair pair;
    dataman::RiskTarget label;
    torch::Tensor foreground;  // (1, H, W) breast mask of the current image, {0, 1}
};

PhantomPair generate_phantom_pair(const PhantomSpec& spec);

// Upper bound on the spectral norm of grad(phi_gt) for `spec`.
double gradient_bound(const PhantomSpec& spec);

// Smallest deform_smoothness for which gradient_bound() < 1 at this amplitude
// and image size.
double smoothness_threshold(const PhantomSpec& spec);

// Diagnosis time implied by the label rule above; empty for controls.
std::optional<double> cancer_year_for_growth(double lesion_growth);

}  // namespace longalign::phantom
