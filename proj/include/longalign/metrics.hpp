#pragma once

// Risk metrics: censoring-aware C-index, per-year AUC and percentile bootstrap.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "longalign/dataman.hpp"

namespace longalign::evalkit {

struct EvalRecord {
    std::string exam_id;
    std::array<double, dataman::kRiskDims> risk{};  // fused prediction
    dataman::RiskTarget target;
    std::optional<dataman::DensityLevel> density_category;
    std::optional<double> event_time;  // years from exam to diagnosis
    double followup_years = 0.0;
};

enum class CIndexScore {
    YearMatched,  // score of the event case's year ceil(t_i), clamped to 1..5
    FixedYear,    // the same cumulative risk for every pair
};

struct CIndexOptions {
    CIndexScore score = CIndexScore::YearMatched;
    int fixed_year = 5;
};

// Pair (i, j) is comparable when i has an event at t_i < min(t_j, followup_j).
// It is concordant when i's score exceeds j's; equal scores count one half.
// Throws UndefinedMetric without comparable pairs.
double c_index(std::span<const EvalRecord> records, CIndexOptions options = {});

// Mann-Whitney AUC of risk[year-1] against target[year-1] over records with
// mask[year-1] = 1. Throws UndefinedMetric when only one class is present.
double auc_year(std::span<const EvalRecord> records, int year);

struct CIResult {
    double point = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    double level = 0.95;
    int iterations = 1000;
    int redraws = 0;  // resamples discarded because the metric was undefined
};

using Metric = std::function<double(std::span<const EvalRecord>)>;

// Percentile bootstrap over records resampled with replacement. Iteration i
// draws from its own stream derived from (seed, i), so results do not depend on
// evaluation order. Undefined resamples are redrawn, at most 10 * iterations
// times in total.
CIResult bootstrap_ci(const Metric& metric, std::span<const EvalRecord> records, int iterations = 1000,
                      double level = 0.95, uint64_t seed = 0);

// The same percentile bootstrap for the mean of plain values (one per pair).
CIResult bootstrap_mean_ci(std::span<const double> values, int iterations = 1000, double level = 0.95,
                           uint64_t seed = 0);

// Linear-interpolation percentile (q in [0, 1]) of an ascending sample.
double percentile(std::span<const double> sorted, double q);

}  // namespace longalign::evalkit
