#include "longalign/regnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "longalign/archive.hpp"
#include "longalign/errors.hpp"
#include "longalign/rng.hpp"
#include "longalign/warpkit.hpp"

namespace longalign::regnet {

namespace nn = torch::nn;
using torch::Tensor;
namespace F = torch::nn::functional;

// ---------------------------------------------------------------- config

void RegConfig::validate() const {
    for (auto c : encoder_channels) {
        if (c <= 0) throw ConfigError("encoder_channels must be positive");
    }
    if (window_size <= 0) throw ConfigError("window_size must be positive");
    if (heads <= 0) throw ConfigError("heads must be positive");
    for (int l = 1; l < kLevels; ++l) {
        if (encoder_channels[l] % heads != 0) {
            throw ConfigError("attention stage channels (" + std::to_string(encoder_channels[l]) +
                              ") must be divisible by heads");
        }
    }
    if (attention_blocks <= 0) throw ConfigError("attention_blocks must be positive");
    if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (pairs_per_epoch <= 0) throw ConfigError("pairs_per_epoch must be positive");
    if (gamma < 0 || lambda_jd < 0) throw ConfigError("gamma and lambda_jd must be non-negative");
    if (augment_shift < 0) throw ConfigError("augment_shift must be non-negative");
}

void RegConfig::check_input(int64_t height, int64_t width) const {
    const int64_t div = int64_t{1} << (kLevels - 1);
    if (height % div != 0 || width % div != 0) {
        throw DataError("image sides must be divisible by " + std::to_string(div) + ", got " +
                        std::to_string(height) + "x" + std::to_string(width));
    }
    for (int l = 1; l < kLevels; ++l) {
        const int64_t h = height >> l, w = width >> l;
        if (h % window_size != 0 || w % window_size != 0) {
            throw DataError("window_size " + std::to_string(window_size) + " does not divide the " +
                            std::to_string(h) + "x" + std::to_string(w) + " attention stage");
        }
    }
}

void to_json(nlohmann::json& j, const RegConfig& c) {
    j = nlohmann::json{{"encoder_channels", c.encoder_channels},
                       {"attention_blocks", c.attention_blocks},
                       {"window_size", c.window_size},
                       {"heads", c.heads},
                       {"mlp_ratio", c.mlp_ratio},
                       {"share_encoder", c.share_encoder},
                       {"regularize_stages", c.regularize_stages},
                       {"augment", c.augment},
                       {"augment_shift", c.augment_shift},
                       {"learning_rate", c.learning_rate},
                       {"weight_decay", c.weight_decay},
                       {"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"pairs_per_epoch", c.pairs_per_epoch},
                       {"gamma", c.gamma},
                       {"lambda_jd", c.lambda_jd},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RegConfig& c) {
    static const char* known[] = {"encoder_channels", "attention_blocks", "window_size",   "heads",
                                  "mlp_ratio",        "share_encoder",    "regularize_stages", "augment", "augment_shift", "learning_rate",
                                  "weight_decay",     "batch_size",       "epochs",        "pairs_per_epoch",
                                  "gamma",            "lambda_jd",        "seed"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
            throw ConfigError("unknown registration option '" + key + "'");
        }
    }
    try {
        if (j.contains("encoder_channels")) {
            auto v = j.at("encoder_channels").get<std::vector<int64_t>>();
            if (v.size() != kLevels) throw ConfigError("encoder_channels must have 5 entries");
            std::copy(v.begin(), v.end(), c.encoder_channels.begin());
        }
        auto opt = [&](const char* k, auto& field) {
            if (j.contains(k)) j.at(k).get_to(field);
        };
        opt("attention_blocks", c.attention_blocks);
        opt("window_size", c.window_size);
        opt("heads", c.heads);
        opt("mlp_ratio", c.mlp_ratio);
        opt("share_encoder", c.share_encoder);
        opt("regularize_stages", c.regularize_stages);
        opt("augment", c.augment);
        opt("augment_shift", c.augment_shift);
        opt("learning_rate", c.learning_rate);
        opt("weight_decay", c.weight_decay);
        opt("batch_size", c.batch_size);
        opt("epochs", c.epochs);
        opt("pairs_per_epoch", c.pairs_per_epoch);
        opt("gamma", c.gamma);
        opt("lambda_jd", c.lambda_jd);
        opt("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("registration config: ") + e.what());
    }
}

// ---------------------------------------------------------------- blocks

namespace {

nn::Conv2d conv3x3(int64_t in, int64_t out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)); }

nn::LeakyReLU lrelu() { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); }

nn::InstanceNorm2d inorm(int64_t ch) { return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(ch)); }

// (B, H, W, C) -> (B * nW, w * w, C)
Tensor window_partition(const Tensor& x, int64_t w) {
    const auto B = x.size(0), H = x.size(1), W = x.size(2), C = x.size(3);
    return x.view({B, H / w, w, W / w, w, C}).permute({0, 1, 3, 2, 4, 5}).reshape({-1, w * w, C});
}

Tensor window_reverse(const Tensor& windows, int64_t w, int64_t B, int64_t H, int64_t W) {
    const auto C = windows.size(-1);
    return windows.view({B, H / w, W / w, w, w, C}).permute({0, 1, 3, 2, 4, 5}).reshape({B, H, W, C});
}

// Additive mask keeping attention inside the regions a cyclic shift brought
// together. (nW, N, N)
Tensor shift_mask(int64_t H, int64_t W, int64_t w, int64_t s) {
    auto img = torch::zeros({1, H, W, 1});
    auto acc = img.accessor<float, 4>();
    auto region = [](int64_t i, int64_t n, int64_t w, int64_t s) { return i < n - w ? 0 : (i < n - s ? 1 : 2); };
    for (int64_t r = 0; r < H; ++r) {
        for (int64_t c = 0; c < W; ++c) acc[0][r][c][0] = static_cast<float>(region(r, H, w, s) * 3 + region(c, W, w, s));
    }
    auto win = window_partition(img, w).squeeze(-1);  // (nW, N)
    auto diff = win.unsqueeze(1) - win.unsqueeze(2);
    return torch::zeros_like(diff).masked_fill(diff != 0, -100.0);
}

struct WindowAttentionImpl : nn::Module {
    WindowAttentionImpl(int64_t dim, int64_t heads, int64_t window) : heads_(heads), window_(window) {
        scale_ = 1.0 / std::sqrt(static_cast<double>(dim / heads));
        qkv = register_module("qkv", nn::Linear(dim, 3 * dim));
        proj = register_module("proj", nn::Linear(dim, dim));
        const int64_t span = 2 * window - 1;
        bias_table = register_parameter("bias_table", torch::zeros({span * span, heads}));
        {
            torch::NoGradGuard g;
            bias_table.normal_(0.0, 0.02).clamp_(-0.04, 0.04);
        }
        const int64_t n = window * window;
        rel_index_ = torch::empty({n * n}, torch::kLong);
        auto idx = rel_index_.accessor<int64_t, 1>();
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                const int64_t dr = i / window - j / window + window - 1;
                const int64_t dc = i % window - j % window + window - 1;
                idx[i * n + j] = dr * span + dc;
            }
        }
    }

    // x: (Bw, N, C); mask: (nW, N, N) or undefined.
    Tensor forward(const Tensor& x, const Tensor& mask) {
        const auto Bw = x.size(0), N = x.size(1), C = x.size(2);
        auto qkv_t = qkv->forward(x).reshape({Bw, N, 3, heads_, C / heads_}).permute({2, 0, 3, 1, 4});
        auto q = qkv_t[0] * scale_, k = qkv_t[1], v = qkv_t[2];
        auto attn = torch::matmul(q, k.transpose(-2, -1));  // (Bw, heads, N, N)
        auto bias = bias_table.index_select(0, rel_index_).view({N, N, heads_}).permute({2, 0, 1});
        attn = attn + bias.unsqueeze(0);
        if (mask.defined()) {
            const auto nW = mask.size(0);
            attn = attn.view({Bw / nW, nW, heads_, N, N}) + mask.unsqueeze(1).unsqueeze(0);
            attn = attn.view({Bw, heads_, N, N});
        }
        attn = torch::softmax(attn, -1);
        auto out = torch::matmul(attn, v).transpose(1, 2).reshape({Bw, N, C});
        return proj->forward(out);
    }

    int64_t heads_, window_;
    double scale_;
    nn::Linear qkv{nullptr}, proj{nullptr};
    Tensor bias_table;
    Tensor rel_index_;
};
TORCH_MODULE(WindowAttention);

struct SwinBlockImpl : nn::Module {
    SwinBlockImpl(int64_t dim, int64_t heads, int64_t window, bool shifted, double mlp_ratio)
        : window_(window), shifted_(shifted) {
        norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
        attn = register_module("attn", WindowAttention(dim, heads, window));
        norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
        const auto hidden = static_cast<int64_t>(std::lround(dim * mlp_ratio));
        mlp = register_module("mlp", nn::Sequential(nn::Linear(dim, hidden), nn::GELU(), nn::Linear(hidden, dim)));
    }

    // x: (B, H, W, C)
    Tensor forward(const Tensor& x) {
        const auto B = x.size(0), H = x.size(1), W = x.size(2);
        const int64_t s = (shifted_ && H > window_ && W > window_) ? window_ / 2 : 0;
        auto h = norm1->forward(x);
        if (s > 0) h = torch::roll(h, {-s, -s}, {1, 2});
        Tensor mask;
        if (s > 0) mask = shift_mask(H, W, window_, s).to(x.dtype());
        auto a = attn->forward(window_partition(h, window_), mask);
        h = window_reverse(a, window_, B, H, W);
        if (s > 0) h = torch::roll(h, {s, s}, {1, 2});
        auto y = x + h;
        return y + mlp->forward(norm2->forward(y));
    }

    int64_t window_;
    bool shifted_;
    nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    WindowAttention attn{nullptr};
    nn::Sequential mlp{nullptr};
};
TORCH_MODULE(SwinBlock);

// Convolutional entry followed by alternating regular and shifted window blocks.
struct AttentionStageImpl : nn::Module {
    AttentionStageImpl(int64_t in, int64_t dim, const RegConfig& cfg) {
        conv = register_module("conv", conv3x3(in, dim));
        act = register_module("act", lrelu());
        for (int64_t b = 0; b < cfg.attention_blocks; ++b) {
            blocks.push_back(register_module("block" + std::to_string(b),
                                             SwinBlock(dim, cfg.heads, cfg.window_size, b % 2 == 1, cfg.mlp_ratio)));
        }
    }
    Tensor forward(const Tensor& x) {
        auto h = act->forward(conv->forward(x)).permute({0, 2, 3, 1});
        for (auto& b : blocks) h = b->forward(h);
        return h.permute({0, 3, 1, 2}).contiguous();
    }
    nn::Conv2d conv{nullptr};
    nn::LeakyReLU act{nullptr};
    std::vector<SwinBlock> blocks;
};
TORCH_MODULE(AttentionStage);

struct ConvStageImpl : nn::Module {
    ConvStageImpl(int64_t in, int64_t dim) {
        body = register_module("body", nn::Sequential(conv3x3(in, dim), inorm(dim), lrelu(), conv3x3(dim, dim),
                                                      inorm(dim), lrelu()));
    }
    Tensor forward(const Tensor& x) { return body->forward(x); }
    nn::Sequential body{nullptr};
};
TORCH_MODULE(ConvStage);

// (B, Cin, H, W) -> (B, Cout, 2H, 2W): a linear map to 4 * Cout channels
// rearranged into 2x2 sub-pixels, then layer norm.
struct PatchExpandImpl : nn::Module {
    PatchExpandImpl(int64_t in, int64_t out) : out_(out) {
        expand = register_module("expand", nn::Linear(nn::LinearOptions(in, 4 * out).bias(false)));
        norm = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({out})));
    }
    Tensor forward(const Tensor& x) {
        const auto B = x.size(0), H = x.size(2), W = x.size(3);
        auto h = expand->forward(x.permute({0, 2, 3, 1}));  // (B, H, W, 4 * out)
        h = h.view({B, H, W, 2, 2, out_}).permute({0, 1, 3, 2, 4, 5}).reshape({B, 2 * H, 2 * W, out_});
        return norm->forward(h).permute({0, 3, 1, 2}).contiguous();
    }
    int64_t out_;
    nn::Linear expand{nullptr};
    nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(PatchExpand);

nn::Sequential encoder_module(int64_t in, int64_t out, bool downsample) {
    nn::Sequential s;
    if (downsample) s->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(2)));
    s->push_back(conv3x3(in, out));
    s->push_back(inorm(out));
    s->push_back(lrelu());
    s->push_back(conv3x3(out, out));
    s->push_back(inorm(out));
    s->push_back(lrelu());
    return s;
}

// Translation is predicted in coarsest-level pixels.
constexpr double kTranslationScale = double(1 << (kLevels - 1));

}  // namespace

// ---------------------------------------------------------------- network

warpkit::AffineParams RegOutput::affine(int64_t b) const {
    auto m = affine_matrix[b].detach().to(torch::kCPU, torch::kFloat64).contiguous();
    auto t = affine_translation[b].detach().to(torch::kCPU, torch::kFloat64).contiguous();
    warpkit::AffineParams p;
    for (int i = 0; i < 4; ++i) p.matrix[i] = m.view(-1)[i].item<double>();
    for (int i = 0; i < 2; ++i) p.translation[i] = t[i].item<double>();
    return p;
}

MammoRegNetImpl::MammoRegNetImpl(const RegConfig& config) : config_(config) {
    config_.validate();
    const auto& ch = config_.encoder_channels;
    for (int l = 0; l < kLevels; ++l) {
        const int64_t in = l == 0 ? 1 : ch[l - 1];
        current_path_.push_back(register_module("current" + std::to_string(l), encoder_module(in, ch[l], l > 0)));
        if (config_.share_encoder) {
            prior_path_.push_back(current_path_.back());
        } else {
            prior_path_.push_back(register_module("prior" + std::to_string(l), encoder_module(in, ch[l], l > 0)));
        }
    }
    // Stage s works on level kLevels-1-s. Stage 0 sees both coarsest maps; later
    // stages also see the expanded output of the stage before.
    for (int s = 0; s <= kRefinements; ++s) {
        const int l = kLevels - 1 - s;
        const int64_t in = s == 0 ? 2 * ch[l] : 3 * ch[l];
        nn::AnyModule stage;
        if (s < kRefinements) {
            stage = nn::AnyModule(register_module("stage" + std::to_string(s), AttentionStage(in, ch[l], config_)));
        } else {
            stage = nn::AnyModule(register_module("stage" + std::to_string(s), ConvStage(in, ch[l])));
        }
        stages_.push_back(stage);
        if (s > 0) {
            expanders_.push_back(nn::AnyModule(
                register_module("expand" + std::to_string(s), PatchExpand(ch[l + 1], ch[l]))));
            field_heads_.push_back(register_module("field_head" + std::to_string(s), nn::Conv2d(
                nn::Conv2dOptions(ch[l], 2, 3).padding(1))));
        }
    }
    affine_head_ = register_module("affine_head", nn::Linear(ch[kLevels - 1], 6));
    zero_heads();
}

void MammoRegNetImpl::zero_heads() {
    torch::NoGradGuard g;
    affine_head_->weight.zero_();
    affine_head_->bias.zero_();
    for (auto& h : field_heads_) {
        h->weight.zero_();
        h->bias.zero_();
    }
}

Pyramid MammoRegNetImpl::encode(const Tensor& current, const Tensor& prior) {
    if (current.dim() != 4 || current.size(1) != 1 || current.sizes() != prior.sizes()) {
        throw DataError("encode: expected matching (B, 1, H, W) images");
    }
    config_.check_input(current.size(2), current.size(3));
    Pyramid p;
    Tensor c = current, q = prior;
    for (int l = 0; l < kLevels; ++l) {
        c = current_path_[l]->forward(c);
        q = prior_path_[l]->forward(q);
        p.current[l] = c;
        p.prior[l] = q;
    }
    return p;
}

RegOutput MammoRegNetImpl::decode(const Pyramid& pyr, const Tensor& prior) {
    using warpkit::affine_to_dense;
    const int top = kLevels - 1;
    const auto B = prior.size(0), H = prior.size(2), W = prior.size(3);
    RegOutput out;

    auto feat = stages_[0].forward(torch::cat({pyr.current[top], pyr.prior[top]}, 1));
    auto params = affine_head_->forward(feat.mean({2, 3}));  // (B, 6)
    out.affine_matrix = torch::eye(2, params.options()).unsqueeze(0) + params.slice(1, 0, 4).view({B, 2, 2});
    out.affine_translation = params.slice(1, 4, 6) * kTranslationScale;
    out.phi_affine = affine_to_dense(out.affine_matrix, out.affine_translation, H, W);

    Tensor running;
    for (int s = 1; s <= kRefinements; ++s) {
        const int l = top - s;
        const auto h = pyr.current[l].size(2), w = pyr.current[l].size(3);
        if (s == 1) {
            // Affine map expressed on this grid: same matrix, translation rescaled.
            running = affine_to_dense(out.affine_matrix, out.affine_translation / double(1 << l), h, w);
        } else {
            running = warpkit::upsample_field(out.phi_stages.back());
        }
        auto warped_prior = warpkit::warp(pyr.prior[l], running);
        auto up = expanders_[s - 1].forward(feat);
        feat = stages_[s].forward(torch::cat({pyr.current[l], warped_prior, up}, 1));
        auto residual = field_heads_[s - 1]->forward(feat);
        out.residuals.push_back(residual);
        out.phi_stages.push_back(warpkit::compose(running, residual));
    }
    out.phi_final = out.phi_stages.back();
    if (out.phi_final.size(2) != H || out.phi_final.size(3) != W) {
        out.phi_final = warpkit::resize_field(out.phi_final, H, W);
    }
    out.warped_affine = warpkit::warp(prior, out.phi_affine);
    out.warped_final = warpkit::warp(prior, out.phi_final);
    return out;
}

RegOutput MammoRegNetImpl::forward(const Tensor& current, const Tensor& prior) {
    return decode(encode(current, prior), prior);
}

// ---------------------------------------------------------------- loss

RegLossTerms reg_loss_terms(const RegOutput& out, const Tensor& current, const Tensor& prior, double gamma,
                            double lambda_jd, bool regularize_stages) {
    if (current.sizes() != prior.sizes() || out.warped_final.sizes() != current.sizes()) {
        throw DataError("reg_loss: inconsistent shapes");
    }
    RegLossTerms t;
    t.ncc_affine = warpkit::ncc_batch(warpkit::warp(prior, out.phi_affine), current).mean();
    t.ncc_final = warpkit::ncc_batch(warpkit::warp(prior, out.phi_final), current).mean();
    t.smoothness = warpkit::smoothness_penalty(out.phi_final);
    t.jd = warpkit::jd_penalty(out.phi_final);
    if (regularize_stages) {
        for (size_t i = 0; i + 1 < out.phi_stages.size(); ++i) {
            t.smoothness = t.smoothness + warpkit::smoothness_penalty(out.phi_stages[i]);
            t.jd = t.jd + warpkit::jd_penalty(out.phi_stages[i]);
        }
    }
    t.total = (1.0 - t.ncc_affine) + (1.0 - t.ncc_final);
    if (gamma != 0.0) t.total = t.total + gamma * (t.smoothness + lambda_jd * t.jd);
    return t;
}

Tensor reg_loss(const RegOutput& out, const Tensor& current, const Tensor& prior, double gamma, double lambda_jd,
                bool regularize_stages) {
    return reg_loss_terms(out, current, prior, gamma, lambda_jd, regularize_stages).total;
}

// ---------------------------------------------------------------- checkpoint

RegCheckpoint RegCheckpoint::capture(MammoRegNet& model) {
    RegCheckpoint c;
    c.config = model->config();
    c.parameters = archive::capture_parameters(*model);
    return c;
}

MammoRegNet RegCheckpoint::build() const {
    MammoRegNet model(config);
    archive::load_parameters(*model, parameters);
    model->eval();
    return model;
}

void RegCheckpoint::save(const std::string& path) const {
    archive::Archive a;
    a.meta = {{"kind", "registration"},
              {"config", config},
              {"epoch", epoch},
              {"val_ncc", val_ncc},
              {"train_loss_history", train_loss_history},
              {"val_ncc_history", val_ncc_history}};
    a.tensors = parameters;
    if (!optimizer_state.empty()) a.blobs["optimizer"] = optimizer_state;
    archive::write(path, a);
}

RegCheckpoint RegCheckpoint::load(const std::string& path) {
    auto a = archive::read(path);
    RegCheckpoint c;
    try {
        if (a.meta.at("kind") != "registration") throw FormatError(path + ": not a registration checkpoint");
        c.config = a.meta.at("config").get<RegConfig>();
        c.epoch = a.meta.at("epoch").get<int64_t>();
        c.val_ncc = a.meta.at("val_ncc").get<double>();
        c.train_loss_history = a.meta.at("train_loss_history").get<std::vector<double>>();
        c.val_ncc_history = a.meta.at("val_ncc_history").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(path + ": " + e.what());
    }
    c.parameters = std::move(a.tensors);
    if (auto it = a.blobs.find("optimizer"); it != a.blobs.end()) c.optimizer_state = it->second;
    return c;
}

// ---------------------------------------------------------------- training

std::vector<size_t> sample_epoch(size_t pool, int64_t count, uint64_t seed, int64_t epoch) {
    if (pool == 0) throw DataError("sample_epoch: empty pool");
    Rng rng(derive_seed(seed, static_cast<uint64_t>(epoch)));
    std::vector<size_t> out;
    if (static_cast<size_t>(count) <= pool) {
        std::vector<size_t> all(pool);
        std::iota(all.begin(), all.end(), size_t{0});
        rng.shuffle(all.begin(), all.end());
        out.assign(all.begin(), all.begin() + count);
    } else {
        out.resize(static_cast<size_t>(count));
        for (auto& i : out) i = rng.index(pool);
    }
    return out;
}

std::pair<Tensor, Tensor> augment_pair(const Tensor& current, const Tensor& prior, int64_t max_shift, Rng& rng) {
    Tensor c = current, p = prior;
    std::vector<int64_t> dims;
    if (rng.uniform() < 0.5) dims.push_back(-2);
    if (rng.uniform() < 0.5) dims.push_back(-1);
    if (!dims.empty()) {
        c = c.flip(dims);
        p = p.flip(dims);
    }
    if (rng.uniform() < 0.5) std::swap(c, p);
    if (max_shift > 0) {
        const auto span = static_cast<size_t>(2 * max_shift + 1);
        const double dr = static_cast<double>(static_cast<int64_t>(rng.index(span)) - max_shift);
        const double dc = static_cast<double>(static_cast<int64_t>(rng.index(span)) - max_shift);
        if (dr != 0.0 || dc != 0.0) {
            // Integer displacements sample grid points exactly; borders replicate.
            auto field = torch::stack({torch::full({p.size(-2), p.size(-1)}, dr, p.options()),
                                       torch::full({p.size(-2), p.size(-1)}, dc, p.options())});
            p = warpkit::warp(p, field);
        }
    }
    return {c.contiguous(), p.contiguous()};
}

namespace {

Tensor batch_images(const std::vector<ImagePair>& pairs, const std::vector<size_t>& idx, size_t from, size_t to,
                    bool current) {
    std::vector<Tensor> v;
    for (size_t i = from; i < to; ++i) v.push_back(current ? pairs[idx[i]].current : pairs[idx[i]].prior);
    return torch::stack(v).to(torch::kFloat32);
}

Tensor as_batch(const Tensor& t) { return t.dim() == 3 ? t.unsqueeze(0) : t; }

}  // namespace

double validation_ncc(MammoRegNet& model, const std::vector<ImagePair>& pairs, int64_t batch_size) {
    if (pairs.empty()) throw DataError("validation_ncc: no pairs");
    torch::NoGradGuard g;
    const bool was_training = model->is_training();
    model->eval();
    std::vector<size_t> idx(pairs.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    double sum = 0.0;
    for (size_t from = 0; from < idx.size(); from += static_cast<size_t>(batch_size)) {
        const size_t to = std::min(idx.size(), from + static_cast<size_t>(batch_size));
        auto cur = batch_images(pairs, idx, from, to, true);
        auto pri = batch_images(pairs, idx, from, to, false);
        auto out = model->forward(cur, pri);
        sum += warpkit::ncc_batch(out.warped_final, cur).sum().item<double>();
    }
    model->train(was_training);
    return sum / static_cast<double>(pairs.size());
}

TrainResult train_registration(const std::vector<ImagePair>& train, const std::vector<ImagePair>& val,
                               const RegConfig& config, const TrainOptions& options) {
    config.validate();
    if (train.empty()) throw DataError("train_registration: empty training set");
    if (val.empty()) throw DataError("train_registration: empty validation set");
    for (const auto* set : {&train, &val}) {
        for (const auto& p : *set) {
            if (p.current.dim() != 3 || p.current.sizes() != train.front().current.sizes() ||
                p.prior.sizes() != p.current.sizes()) {
                throw DataError("train_registration: all images must share one (1, H, W) shape");
            }
        }
    }
    config.check_input(train.front().current.size(1), train.front().current.size(2));

    torch::manual_seed(config.seed);
    MammoRegNet model(config);
    torch::optim::Adam opt(model->parameters(),
                           torch::optim::AdamOptions(config.learning_rate).weight_decay(config.weight_decay));

    TrainResult result;
    int64_t start = 0;
    if (options.resume != nullptr) {
        archive::load_parameters(*model, options.resume->parameters);
        if (!options.resume->optimizer_state.empty()) archive::load_optimizer(opt, options.resume->optimizer_state);
        start = options.resume->epoch;
        result.last = *options.resume;
    }
    result.best = RegCheckpoint::capture(model);
    result.best.epoch = start;
    if (options.resume != nullptr) {
        result.best.val_ncc = options.resume->val_ncc;
        result.best.train_loss_history = options.resume->train_loss_history;
        result.best.val_ncc_history = options.resume->val_ncc_history;
    } else {
        result.best.val_ncc = validation_ncc(model, val, config.batch_size);
    }
    result.last.config = config;
    auto loss_hist = result.best.train_loss_history;
    auto val_hist = result.best.val_ncc_history;

    model->train();
    for (int64_t epoch = start; epoch < config.epochs; ++epoch) {
        const auto idx = sample_epoch(train.size(), config.pairs_per_epoch, config.seed, epoch);
        EpochLog log;
        log.epoch = epoch;
        for (size_t from = 0; from < idx.size(); from += static_cast<size_t>(config.batch_size)) {
            const size_t to = std::min(idx.size(), from + static_cast<size_t>(config.batch_size));
            auto cur = batch_images(train, idx, from, to, true);
            auto pri = batch_images(train, idx, from, to, false);
            if (config.augment) {
                Rng rng(derive_seed(derive_seed(config.seed ^ 0x5eedULL, static_cast<uint64_t>(epoch)), from));
                std::vector<Tensor> cs, ps;
                for (int64_t b = 0; b < cur.size(0); ++b) {
                    auto [c, p] = augment_pair(cur[b], pri[b], config.augment_shift, rng);
                    cs.push_back(c);
                    ps.push_back(p);
                }
                cur = torch::stack(cs);
                pri = torch::stack(ps);
            }
            auto out = model->forward(cur, pri);
            auto loss = reg_loss(out, cur, pri, config.gamma, config.lambda_jd, config.regularize_stages);
            opt.zero_grad();
            loss.backward();
            opt.step();
            const double v = loss.item<double>();
            if (!std::isfinite(v)) throw std::runtime_error("registration loss diverged at epoch " + std::to_string(epoch));
            log.step_losses.push_back(v);
        }
        double total = 0.0;
        for (double v : log.step_losses) total += v;
        log.train_loss = total / static_cast<double>(log.step_losses.size());
        log.val_ncc = validation_ncc(model, val, config.batch_size);
        loss_hist.push_back(log.train_loss);
        val_hist.push_back(log.val_ncc);

        if (log.val_ncc > result.best.val_ncc) {
            result.best = RegCheckpoint::capture(model);
            result.best.val_ncc = log.val_ncc;
            result.best.epoch = epoch + 1;
        }
        result.last = RegCheckpoint::capture(model);
        result.last.optimizer_state = archive::save_optimizer(opt);
        result.last.epoch = epoch + 1;
        result.last.val_ncc = log.val_ncc;
        result.last.train_loss_history = loss_hist;
        result.last.val_ncc_history = val_hist;
        if (options.on_epoch) options.on_epoch(log);
        result.history.push_back(std::move(log));
    }
    result.best.train_loss_history = loss_hist;
    result.best.val_ncc_history = val_hist;
    if (result.last.parameters.empty()) {
        result.last = RegCheckpoint::capture(model);
        result.last.optimizer_state = archive::save_optimizer(opt);
        result.last.epoch = start;
        result.last.val_ncc = result.best.val_ncc;
    }
    return result;
}

RegOutput register_pair(MammoRegNet& model, const Tensor& current, const Tensor& prior) {
    torch::NoGradGuard g;
    const bool was_training = model->is_training();
    model->eval();
    auto out = model->forward(as_batch(current).to(torch::kFloat32), as_batch(prior).to(torch::kFloat32));
    model->train(was_training);
    return out;
}

RegOutput register_pair(const RegCheckpoint& ckpt, const Tensor& current, const Tensor& prior) {
    auto model = ckpt.build();
    return register_pair(model, current, prior);
}

}  // namespace longalign::regnet
