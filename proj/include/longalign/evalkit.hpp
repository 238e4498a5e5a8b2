#pragma once

// Evaluation reports built on the metric primitives: registration quality,
// density-stratified risk discrimination, metrics files and weight sweeps.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "longalign/metrics.hpp"
#include "longalign/regnet.hpp"

namespace longalign::evalkit {

// Mean Euclidean distance between two (2, H, W) or (1, 2, H, W) fields over
// pixels where mask (H, W) or (1, H, W) is nonzero; all pixels without a mask.
double endpoint_error(const torch::Tensor& phi, const torch::Tensor& reference,
                      const torch::Tensor& mask = torch::Tensor());

struct RegEvalPair {
    std::string id;
    torch::Tensor current;  // (1, H, W)
    torch::Tensor prior;
    torch::Tensor phi_gt;      // optional (2, H, W)
    torch::Tensor foreground;  // optional (1, H, W), restricts the endpoint error
};

struct RegPairReport {
    std::string id;
    double ncc_before = 0.0;
    double ncc_affine = 0.0;
    double ncc_final = 0.0;
    double njd_percent = 0.0;
    std::optional<double> epe;
};

struct RegReport {
    std::vector<RegPairReport> pairs;
    double ncc_before = 0.0;
    double ncc_affine = 0.0;
    double ncc_final = 0.0;
    double njd_percent = 0.0;  // pooled over all pixels of all pairs
    std::optional<double> epe;
    // Bootstrap intervals for the means, resampling pairs.
    CIResult ci_before, ci_affine, ci_final, ci_njd;
    std::optional<CIResult> ci_epe;
};

struct BootstrapOptions {
    int iterations = 1000;
    double level = 0.95;
    uint64_t seed = 0;
};

RegReport registration_report(regnet::MammoRegNet& model, const std::vector<RegEvalPair>& pairs,
                              int64_t batch_size = 8, BootstrapOptions boot = {});
RegReport registration_report(const regnet::RegCheckpoint& ckpt, const std::vector<RegEvalPair>& pairs,
                              int64_t batch_size = 8, BootstrapOptions boot = {});

nlohmann::json to_json(const RegReport& r);
// Columns metric,point,lo,hi in the order ncc_before, ncc_affine, ncc_final,
// njd_percent (then epe when known).
std::string registration_csv(const RegReport& r);

// ------------------------------------------------------------------ risk metrics

struct MetricRow {
    std::string metric;  // c_index, auc_1 .. auc_5
    std::optional<CIResult> ci;  // empty when undefined on this set
};

// C-index and per-year AUC with bootstrap intervals. Undefined metrics keep
// their row with an empty interval so the table shape never changes.
std::vector<MetricRow> risk_metrics(const std::vector<EvalRecord>& records, BootstrapOptions boot = {},
                                    CIndexOptions cindex = {});

// `{variant}_{dataset}_{seed}.metrics.csv`, plus a `.metrics.json` mirror.
struct MetricsFileInfo {
    std::string variant;
    std::string dataset;
    uint64_t seed = 0;
    std::string stem() const;
};

inline constexpr const char* kMetricsHeader = "variant,dataset,seed,metric,point,lo,hi,level,iterations,redraws";
std::string metrics_csv(const MetricsFileInfo& info, const std::vector<MetricRow>& rows);
nlohmann::json metrics_json(const MetricsFileInfo& info, const std::vector<MetricRow>& rows);
// Writes both files into `dir`; returns the CSV path.
std::filesystem::path write_metrics(const std::filesystem::path& dir, const MetricsFileInfo& info,
                                    const std::vector<MetricRow>& rows);

inline constexpr const char* kPredictionHeader =
    "exam_id,risk_1,risk_2,risk_3,risk_4,risk_5,cancer_free_5y,variant,seed";
std::string predictions_csv(const std::vector<EvalRecord>& records, const std::string& variant, uint64_t seed);

// ------------------------------------------------------------------ density strata

struct StratumResult {
    dataman::DensityLevel level = dataman::DensityLevel::Low;
    size_t records = 0;
    CIResult c_index;
};

// C-index with interval inside each density category present in the records.
// Categories without comparable pairs are skipped with a warning; records
// without a category are ignored.
std::vector<StratumResult> stratified_report(const std::vector<EvalRecord>& records, BootstrapOptions boot = {},
                                             CIndexOptions cindex = {});
nlohmann::json to_json(const std::vector<StratumResult>& strata);

// ------------------------------------------------------------------ weight sweep

struct SweepOutcome {
    std::vector<EvalRecord> records;  // test-set predictions of the model trained at this alpha
    torch::Tensor phi_feat;           // its feature-grid fields, (N, 2, h, w)
};

struct SweepRow {
    double alpha = 0.0;
    double c_index = 0.0;  // NaN when undefined
    std::array<double, dataman::kRiskYears> auc{};  // NaN when undefined
    double njd_percent = 0.0;
};

// One training run per alpha through `train_fn`, then point metrics and the
// NJD percentage of the feature field.
std::vector<SweepRow> weight_sweep(const std::function<SweepOutcome(double alpha)>& train_fn,
                                   const std::vector<double>& alphas, CIndexOptions cindex = {});
inline constexpr const char* kSweepHeader = "alpha,c_index,auc_1,auc_2,auc_3,auc_4,auc_5,njd_percent";
std::string sweep_csv(const std::vector<SweepRow>& rows);
nlohmann::json to_json(const std::vector<SweepRow>& rows);

// Fixed-precision number formatting shared by the CSV writers ("nan" for NaN).
std::string format_number(double v);

}  // namespace longalign::evalkit
