#pragma once

// Longitudinal risk prediction over a shared residual encoder, in five
// alignment variants:
//   NoAlign       fused level sees concat(f_cur, f_pri)
//   FeatAlign     learned feature-space field, similarity term only (beta = 0)
//   FeatAlignReg  learned feature-space field with regularisation (beta = 0.2)
//   ImgFeatAlign  registration field resized to the feature grid, applied to f_pri
//   ImgAlign      prior image registered before encoding
// The aligned variants fuse concat(f_cur, f_pri_aligned, f_diff). Every variant
// also predicts from f_cur and f_pri alone.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "longalign/dataman.hpp"
#include "longalign/metrics.hpp"
#include "longalign/regnet.hpp"

namespace longalign::riskmodel {

enum class VariantKind { NoAlign, FeatAlign, FeatAlignReg, ImgFeatAlign, ImgAlign };

std::string to_string(VariantKind k);
VariantKind parse_variant(const std::string& s);  // throws ConfigError
const std::array<VariantKind, 5>& all_variants();
bool learns_alignment(VariantKind k);   // FeatAlign, FeatAlignReg
bool needs_registration(VariantKind k);  // ImgFeatAlign, ImgAlign
double default_beta(VariantKind k);      // 0.2 for FeatAlignReg, else 0

struct RiskConfig {
    std::vector<int64_t> encoder_widths{16, 32, 64, 128};  // one residual stage each
    int64_t blocks_per_stage = 1;
    double alpha = 1e-2;
    std::optional<double> beta;  // defaults to default_beta(kind)
    double lambda_jd = 1e-5;
    double learning_rate = 1e-4;
    double weight_decay = 1e-5;
    int64_t batch_size = 12;
    int64_t max_epochs = 100;
    int64_t lr_halve_patience = 5;
    int64_t early_stop_patience = 15;
    bool separate_alignment = false;  // pre-train the alignment block alone, then freeze it
    int64_t align_pretrain_epochs = 5;
    uint64_t seed = 0;

    void validate() const;  // throws ConfigError
    int64_t feature_channels() const { return encoder_widths.back(); }
    double beta_for(VariantKind k) const { return beta.value_or(default_beta(k)); }
};

void to_json(nlohmann::json& j, const RiskConfig& c);
void from_json(const nlohmann::json& j, RiskConfig& c);

// Encoder stride: the input sides must be multiples of this.
inline constexpr int64_t kEncoderStride = 32;

// ------------------------------------------------------------------ blocks

class EncoderImpl : public torch::nn::Module {
public:
    explicit EncoderImpl(const RiskConfig& config);
    // (B, 1, H, W) -> (B, C, H/32, W/32). Throws DataError on indivisible sides.
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Sequential stem_{nullptr};
    torch::nn::Sequential stages_{nullptr};
};
TORCH_MODULE(Encoder);

// conv3x3 + BN + ReLU + conv3x3 on concat(f_cur, f_pri), producing a (B, 2, h, w)
// field in feature-grid pixels. The last convolution starts at zero.
class FeatAlignImpl : public torch::nn::Module {
public:
    explicit FeatAlignImpl(int64_t channels);
    // Returns (phi_feat, f_pri_aligned).
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& f_cur, const torch::Tensor& f_pri);
    void zero_output();

private:
    torch::nn::Sequential body_{nullptr};
    torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(FeatAlign);

// alpha * mean((f_pri_aligned - f_cur)^2) + beta * (smoothness(phi) + lambda_jd * JD(phi)).
torch::Tensor feat_loss(const torch::Tensor& f_pri_aligned, const torch::Tensor& f_cur, const torch::Tensor& phi_feat,
                        double alpha, double beta, double lambda_jd);

// Additive sinusoidal encoding of the interval (months) over channels:
// channel 2i carries sin(dt / 10000^(2i/C)), channel 2i+1 the cosine. Returns
// (B, C, 1, 1) for broadcasting.
torch::Tensor positional_encoding(const torch::Tensor& delta_t_months, int64_t channels);

// f_cur - f_pri_aligned + positional_encoding. Throws DataError for delta <= 0.
torch::Tensor diff_features(const torch::Tensor& f_cur, const torch::Tensor& f_pri_aligned,
                            const torch::Tensor& delta_t_months);

// Linear map to a base logit b and five increments h_k >= 0 (softplus);
// risk_k = sigmoid(b + h_1 + ... + h_k), and the sixth entry is 1 - risk_5.
class CumulativeHeadImpl : public torch::nn::Module {
public:
    explicit CumulativeHeadImpl(int64_t in_features);
    torch::Tensor forward(const torch::Tensor& pooled);  // (B, in) -> (B, 6)
    torch::nn::Linear linear{nullptr};
};
TORCH_MODULE(CumulativeHead);

// ------------------------------------------------------------------ model

struct FeatureBundle {
    torch::Tensor f_cur;
    torch::Tensor f_pri;
    torch::Tensor f_pri_aligned;  // undefined for NoAlign
    torch::Tensor f_diff;         // undefined for NoAlign
    torch::Tensor phi_feat;       // feature-grid field; undefined for NoAlign and ImgAlign
};

struct RiskOutput {
    torch::Tensor fused;         // (B, 6)
    torch::Tensor current_only;  // (B, 6)
    torch::Tensor prior_only;    // (B, 6)
};

struct RiskBatch {
    torch::Tensor current;          // (B, 1, H, W)
    torch::Tensor prior;            // (B, 1, H, W)
    torch::Tensor delta_t_months;   // (B)
    torch::Tensor phi_reg;          // (B, 2, H, W) registration field; image variants only
    torch::Tensor target;           // (B, 6)
    torch::Tensor mask;             // (B, 6)
};

class RiskNetImpl : public torch::nn::Module {
public:
    RiskNetImpl(VariantKind kind, const RiskConfig& config);

    std::pair<RiskOutput, FeatureBundle> forward(const RiskBatch& batch);

    VariantKind kind() const { return kind_; }
    const RiskConfig& config() const { return config_; }
    Encoder encoder{nullptr};
    FeatAlign align{nullptr};  // only for FeatAlign / FeatAlignReg
    CumulativeHead fused_head{nullptr}, current_head{nullptr}, prior_head{nullptr};

private:
    VariantKind kind_;
    RiskConfig config_;
};
TORCH_MODULE(RiskNet);

int64_t parameter_count(const torch::nn::Module& m);

// Mean over the three levels of masked BCE; per level
// sum(mask * BCE(pred, target)) / sum(mask) over batch and years. Probabilities
// are clamped to [eps, 1 - eps]. An all-masked batch gives 0.
inline constexpr double kProbEps = 1e-6;
torch::Tensor masked_bce(const torch::Tensor& pred, const torch::Tensor& target, const torch::Tensor& mask);
torch::Tensor risk_loss(const RiskOutput& out, const torch::Tensor& target, const torch::Tensor& mask);

// ------------------------------------------------------------------ data and training

struct RiskSample {
    std::string exam_id;  // current exam
    std::string patient_id;
    torch::Tensor current;  // (1, H, W)
    torch::Tensor prior;    // (1, H, W)
    double delta_t_months = 12.0;
    torch::Tensor phi_reg;  // (2, H, W) precomputed registration field, when needed
    dataman::RiskTarget target;
    std::optional<dataman::DensityLevel> density_category;
    std::optional<double> event_time;
    double followup_years = 0.0;
};

RiskBatch make_batch(const std::vector<RiskSample>& samples, const std::vector<size_t>& idx, size_t from, size_t to);

struct RiskCheckpoint {
    VariantKind kind = VariantKind::NoAlign;
    RiskConfig config;
    std::vector<std::pair<std::string, torch::Tensor>> parameters;
    int64_t epoch = 0;
    double val_cindex = 0.5;

    static RiskCheckpoint capture(RiskNet& model);
    RiskNet build() const;
    void save(const std::string& path) const;
    static RiskCheckpoint load(const std::string& path);
};

struct RiskEpochLog {
    int64_t epoch = 0;
    double train_loss = 0.0;
    double val_cindex = 0.5;
    bool val_defined = true;  // false when the C-index fell back to 0.5
    double learning_rate = 0.0;
};

struct RiskTrainOptions {
    std::function<void(const RiskEpochLog&)> on_epoch;
};

struct RiskTrainResult {
    RiskCheckpoint best;
    std::vector<RiskEpochLog> history;
    int64_t pretrain_epochs = 0;  // separate mode only
};

// Fill sample.phi_reg with the frozen registration network's phi_final.
void attach_registration(std::vector<RiskSample>& samples, regnet::MammoRegNet& reg, int64_t batch_size = 8);

// Image variants need sample.phi_reg filled (see attach_registration).
RiskTrainResult train_risk(const std::vector<RiskSample>& train, const std::vector<RiskSample>& val, VariantKind kind,
                           const RiskConfig& config, const RiskTrainOptions& options = {});

// Fused predictions as evaluation records, in sample order. When phi_feat is
// given it receives the stacked feature-grid fields (undefined if the variant
// has none).
std::vector<evalkit::EvalRecord> predict(RiskNet& model, const std::vector<RiskSample>& samples,
                                         torch::Tensor* phi_feat = nullptr, int64_t batch_size = 16);

}  // namespace longalign::riskmodel
