#pragma once

// Coarse-to-fine registration network: a two-path convolutional encoder and a
// decoder that predicts an affine transform at the coarsest level, then four
// residual displacement fields at successively doubled resolution. Three of the
// refinement modules use shifted-window attention; the last is convolutional.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "longalign/rng.hpp"
#include "longalign/warpkit.hpp"

namespace longalign::regnet {

inline constexpr int kLevels = 5;
inline constexpr int kRefinements = 4;

struct RegConfig {
    std::array<int64_t, kLevels> encoder_channels{8, 16, 32, 64, 128};
    int64_t attention_blocks = 4;
    int64_t window_size = 4;
    int64_t heads = 4;
    double mlp_ratio = 2.0;
    bool share_encoder = false;
    bool regularize_stages = false;  // also penalise every intermediate stage field
    // Training-time augmentation: shared random flips, random role swap and a
    // random integer shift of the prior of up to augment_shift pixels.
    bool augment = false;
    int64_t augment_shift = 4;
    double learning_rate = 1e-4;
    double weight_decay = 1e-6;
    int64_t batch_size = 20;
    int64_t epochs = 100;
    int64_t pairs_per_epoch = 1500;
    double gamma = 1.0;
    double lambda_jd = 1e-5;
    uint64_t seed = 0;

    // Throws ConfigError.
    void validate() const;
    // Throws DataError when an input of this size cannot be processed.
    void check_input(int64_t height, int64_t width) const;
};

void to_json(nlohmann::json& j, const RegConfig& c);
void from_json(const nlohmann::json& j, RegConfig& c);

// Per-level features, index 0 = full resolution.
struct Pyramid {
    std::array<torch::Tensor, kLevels> current;
    std::array<torch::Tensor, kLevels> prior;
};

// All fields are batched (B, 2, h, w) tensors in pixels of their own grid.
struct RegOutput {
    torch::Tensor affine_matrix;       // (B, 2, 2)
    torch::Tensor affine_translation;  // (B, 2), full-resolution pixels
    torch::Tensor phi_affine;          // full resolution
    std::vector<torch::Tensor> residuals;   // kRefinements, coarse to fine
    std::vector<torch::Tensor> phi_stages;  // composed field after each refinement
    torch::Tensor phi_final;                // phi_stages.back()
    torch::Tensor warped_affine;
    torch::Tensor warped_final;

    warpkit::AffineParams affine(int64_t b = 0) const;
};

class MammoRegNetImpl : public torch::nn::Module {
public:
    explicit MammoRegNetImpl(const RegConfig& config);

    // current, prior: (B, 1, H, W).
    Pyramid encode(const torch::Tensor& current, const torch::Tensor& prior);
    RegOutput decode(const Pyramid& pyramid, const torch::Tensor& prior);
    RegOutput forward(const torch::Tensor& current, const torch::Tensor& prior);

    // Zero the affine and field heads so the network predicts the identity.
    void zero_heads();

    const RegConfig& config() const { return config_; }

private:
    RegConfig config_;
    std::vector<torch::nn::Sequential> current_path_;
    std::vector<torch::nn::Sequential> prior_path_;
    std::vector<torch::nn::AnyModule> stages_;
    std::vector<torch::nn::AnyModule> expanders_;
    torch::nn::Linear affine_head_{nullptr};
    std::vector<torch::nn::Conv2d> field_heads_;
};
TORCH_MODULE(MammoRegNet);

struct RegLossTerms {
    torch::Tensor total;
    torch::Tensor ncc_affine;  // batch mean
    torch::Tensor ncc_final;   // batch mean
    torch::Tensor smoothness;
    torch::Tensor jd;
};

// (1 - NCC_affine) + (1 - NCC_final) + gamma * (smoothness + lambda_jd * JD),
// NCC averaged over the batch and the penalties taken on phi_final (plus every
// stage field when regularize_stages is set).
RegLossTerms reg_loss_terms(const RegOutput& out, const torch::Tensor& current, const torch::Tensor& prior,
                            double gamma, double lambda_jd, bool regularize_stages = false);
torch::Tensor reg_loss(const RegOutput& out, const torch::Tensor& current, const torch::Tensor& prior, double gamma,
                       double lambda_jd, bool regularize_stages = false);

struct RegCheckpoint {
    RegConfig config;
    std::vector<std::pair<std::string, torch::Tensor>> parameters;  // float32, CPU
    std::string optimizer_state;  // opaque, empty unless captured for resuming
    int64_t epoch = 0;            // completed epochs
    double val_ncc = 0.0;         // validation NCC_final of these weights
    std::vector<double> train_loss_history;
    std::vector<double> val_ncc_history;

    static RegCheckpoint capture(MammoRegNet& model);
    MammoRegNet build() const;

    void save(const std::string& path) const;
    static RegCheckpoint load(const std::string& path);  // throws FormatError
};

struct ImagePair {
    torch::Tensor current;  // (1, H, W)
    torch::Tensor prior;
};

// Pair indices drawn for one epoch: without replacement when the pool covers the
// request, otherwise with replacement. Depends only on (seed, epoch).
std::vector<size_t> sample_epoch(size_t pool, int64_t count, uint64_t seed, int64_t epoch);

// The augmentation applied to one training pair; `rng` decides flips, swap and
// shift. Returns (current, prior), both (1, H, W).
std::pair<torch::Tensor, torch::Tensor> augment_pair(const torch::Tensor& current, const torch::Tensor& prior,
                                                     int64_t max_shift, Rng& rng);

struct EpochLog {
    int64_t epoch = 0;
    double train_loss = 0.0;  // mean over steps
    double val_ncc = 0.0;
    std::vector<double> step_losses;
};

struct TrainOptions {
    const RegCheckpoint* resume = nullptr;  // continue from a captured state
    std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
    RegCheckpoint best;  // highest validation NCC_final
    RegCheckpoint last;  // includes optimizer state
    std::vector<EpochLog> history;
};

TrainResult train_registration(const std::vector<ImagePair>& train, const std::vector<ImagePair>& val,
                               const RegConfig& config, const TrainOptions& options = {});

// Deterministic forward pass without gradients. Images (1, H, W) or (B, 1, H, W).
RegOutput register_pair(MammoRegNet& model, const torch::Tensor& current, const torch::Tensor& prior);
RegOutput register_pair(const RegCheckpoint& ckpt, const torch::Tensor& current, const torch::Tensor& prior);

// Mean NCC(warp(prior, phi_final), current) over pairs, evaluated in batches.
double validation_ncc(MammoRegNet& model, const std::vector<ImagePair>& pairs, int64_t batch_size);

}  // namespace longalign::regnet
