#include "longalign/riskmodel.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

#include "longalign/archive.hpp"
#include "longalign/errors.hpp"
#include "longalign/rng.hpp"
#include "longalign/warpkit.hpp"

namespace longalign::riskmodel {

namespace nn = torch::nn;
using torch::Tensor;

// ---------------------------------------------------------------- variants

std::string to_string(VariantKind k) {
    switch (k) {
        case VariantKind::NoAlign: return "NoAlign";
        case VariantKind::FeatAlign: return "FeatAlign";
        case VariantKind::FeatAlignReg: return "FeatAlignReg";
        case VariantKind::ImgFeatAlign: return "ImgFeatAlign";
        case VariantKind::ImgAlign: return "ImgAlign";
    }
    return "?";
}

const std::array<VariantKind, 5>& all_variants() {
    static const std::array<VariantKind, 5> v = {VariantKind::NoAlign, VariantKind::FeatAlign,
                                                 VariantKind::FeatAlignReg, VariantKind::ImgFeatAlign,
                                                 VariantKind::ImgAlign};
    return v;
}

VariantKind parse_variant(const std::string& s) {
    for (auto k : all_variants()) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unknown variant '" + s + "' (expected NoAlign, FeatAlign, FeatAlignReg, ImgFeatAlign or ImgAlign)");
}

bool learns_alignment(VariantKind k) { return k == VariantKind::FeatAlign || k == VariantKind::FeatAlignReg; }
bool needs_registration(VariantKind k) { return k == VariantKind::ImgFeatAlign || k == VariantKind::ImgAlign; }
double default_beta(VariantKind k) { return k == VariantKind::FeatAlignReg ? 0.2 : 0.0; }

// ---------------------------------------------------------------- config

void RiskConfig::validate() const {
    if (encoder_widths.size() != 4) throw ConfigError("encoder_widths must list 4 stage widths (total stride 32)");
    for (auto w : encoder_widths) {
        if (w <= 0) throw ConfigError("encoder_widths must be positive");
    }
    if (feature_channels() % 2 != 0) throw ConfigError("the last encoder width must be even (positional encoding)");
    if (blocks_per_stage <= 0) throw ConfigError("blocks_per_stage must be positive");
    if (alpha < 0) throw ConfigError("alpha must be >= 0");
    if (beta && *beta < 0) throw ConfigError("beta must be >= 0");
    if (lambda_jd < 0) throw ConfigError("lambda_jd must be >= 0");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
    if (lr_halve_patience <= 0 || early_stop_patience <= 0) throw ConfigError("patience values must be positive");
    if (align_pretrain_epochs < 0) throw ConfigError("align_pretrain_epochs must be >= 0");
}

void to_json(nlohmann::json& j, const RiskConfig& c) {
    j = nlohmann::json{{"encoder_widths", c.encoder_widths},
                       {"blocks_per_stage", c.blocks_per_stage},
                       {"alpha", c.alpha},
                       {"beta", c.beta ? nlohmann::json(*c.beta) : nlohmann::json(nullptr)},
                       {"lambda_jd", c.lambda_jd},
                       {"learning_rate", c.learning_rate},
                       {"weight_decay", c.weight_decay},
                       {"batch_size", c.batch_size},
                       {"max_epochs", c.max_epochs},
                       {"lr_halve_patience", c.lr_halve_patience},
                       {"early_stop_patience", c.early_stop_patience},
                       {"separate_alignment", c.separate_alignment},
                       {"align_pretrain_epochs", c.align_pretrain_epochs},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RiskConfig& c) {
    static const std::vector<std::string> known = {
        "encoder_widths", "blocks_per_stage",    "alpha",              "beta",
        "lambda_jd",      "learning_rate",       "weight_decay",       "batch_size",
        "max_epochs",     "lr_halve_patience",   "early_stop_patience", "separate_alignment",
        "align_pretrain_epochs", "seed"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown risk option '" + key + "'");
        }
    }
    try {
        auto opt = [&](const char* k, auto& field) {
            if (j.contains(k)) j.at(k).get_to(field);
        };
        opt("encoder_widths", c.encoder_widths);
        opt("blocks_per_stage", c.blocks_per_stage);
        opt("alpha", c.alpha);
        if (j.contains("beta")) {
            if (j.at("beta").is_null()) c.beta.reset();
            else c.beta = j.at("beta").get<double>();
        }
        opt("lambda_jd", c.lambda_jd);
        opt("learning_rate", c.learning_rate);
        opt("weight_decay", c.weight_decay);
        opt("batch_size", c.batch_size);
        opt("max_epochs", c.max_epochs);
        opt("lr_halve_patience", c.lr_halve_patience);
        opt("early_stop_patience", c.early_stop_patience);
        opt("separate_alignment", c.separate_alignment);
        opt("align_pretrain_epochs", c.align_pretrain_epochs);
        opt("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("risk config: ") + e.what());
    }
}

// ---------------------------------------------------------------- encoder

namespace {

struct BasicBlockImpl : nn::Module {
    BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
        conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
        bn1 = register_module("bn1", nn::BatchNorm2d(out));
        conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
        bn2 = register_module("bn2", nn::BatchNorm2d(out));
        if (stride != 1 || in != out) {
            shortcut = register_module(
                "shortcut", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
                                           nn::BatchNorm2d(out)));
        }
    }
    Tensor forward(const Tensor& x) {
        auto h = torch::relu(bn1->forward(conv1->forward(x)));
        h = bn2->forward(conv2->forward(h));
        return torch::relu(h + (shortcut ? shortcut->forward(x) : x));
    }
    nn::Conv2d conv1{nullptr}, conv2{nullptr};
    nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
    nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(BasicBlock);

}  // namespace

EncoderImpl::EncoderImpl(const RiskConfig& config) {
    config.validate();
    const auto& w = config.encoder_widths;
    stem_ = register_module(
        "stem", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(1, w[0], 7).stride(2).padding(3).bias(false)),
                               nn::BatchNorm2d(w[0]), nn::ReLU(),
                               nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1))));
    stages_ = register_module("stages", nn::Sequential());
    int64_t in = w[0];
    for (size_t s = 0; s < w.size(); ++s) {
        for (int64_t b = 0; b < config.blocks_per_stage; ++b) {
            const int64_t stride = (s > 0 && b == 0) ? 2 : 1;
            stages_->push_back(BasicBlock(in, w[s], stride));
            in = w[s];
        }
    }
}

Tensor EncoderImpl::forward(const Tensor& x) {
    if (x.dim() != 4 || x.size(1) != 1) throw DataError("encoder expects (B, 1, H, W) images");
    if (x.size(2) % kEncoderStride != 0 || x.size(3) % kEncoderStride != 0) {
        throw DataError("encoder input sides must be multiples of 32, got " + std::to_string(x.size(2)) + "x" +
                        std::to_string(x.size(3)));
    }
    return stages_->forward(stem_->forward(x));
}

// ---------------------------------------------------------------- alignment

FeatAlignImpl::FeatAlignImpl(int64_t channels) {
    body_ = register_module(
        "body", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(2 * channels, channels, 3).padding(1)),
                               nn::BatchNorm2d(channels), nn::ReLU()));
    out_ = register_module("out", nn::Conv2d(nn::Conv2dOptions(channels, 2, 3).padding(1)));
    zero_output();
}

void FeatAlignImpl::zero_output() {
    torch::NoGradGuard g;
    out_->weight.zero_();
    out_->bias.zero_();
}

std::pair<Tensor, Tensor> FeatAlignImpl::forward(const Tensor& f_cur, const Tensor& f_pri) {
    if (f_cur.sizes() != f_pri.sizes()) throw DataError("feat_align: feature maps differ in shape");
    auto phi = out_->forward(body_->forward(torch::cat({f_cur, f_pri}, 1)));
    return {phi, warpkit::warp(f_pri, phi)};
}

Tensor feat_loss(const Tensor& f_pri_aligned, const Tensor& f_cur, const Tensor& phi_feat, double alpha, double beta,
                 double lambda_jd) {
    if (f_pri_aligned.sizes() != f_cur.sizes()) throw DataError("feat_loss: feature maps differ in shape");
    auto loss = alpha * (f_pri_aligned - f_cur).pow(2).mean();
    if (beta != 0.0) {
        loss = loss + beta * (warpkit::smoothness_penalty(phi_feat) + lambda_jd * warpkit::jd_penalty(phi_feat));
    }
    return loss;
}

Tensor positional_encoding(const Tensor& delta_t_months, int64_t channels) {
    auto dt = delta_t_months.reshape({-1, 1});
    auto idx = torch::arange(channels, dt.options());
    auto pair = torch::floor(idx / 2.0) * 2.0;  // 2i for channels 2i and 2i+1
    auto denom = torch::pow(10000.0, pair / static_cast<double>(channels));
    auto angle = dt / denom;  // (B, C)
    auto even = (torch::remainder(idx, 2) == 0);
    auto pe = torch::where(even, torch::sin(angle), torch::cos(angle));
    return pe.view({dt.size(0), channels, 1, 1});
}

Tensor diff_features(const Tensor& f_cur, const Tensor& f_pri_aligned, const Tensor& delta_t_months) {
    if (f_cur.sizes() != f_pri_aligned.sizes()) throw DataError("diff_features: feature maps differ in shape");
    if ((delta_t_months <= 0).any().item<bool>()) throw DataError("diff_features: time gap must be positive");
    return f_cur - f_pri_aligned + positional_encoding(delta_t_months.to(f_cur.dtype()), f_cur.size(1));
}

CumulativeHeadImpl::CumulativeHeadImpl(int64_t in_features) {
    linear = register_module("linear", nn::Linear(in_features, dataman::kRiskDims));
}

Tensor CumulativeHeadImpl::forward(const Tensor& pooled) {
    auto z = linear->forward(pooled);
    auto base = z.slice(1, 0, 1);
    auto inc = torch::softplus(z.slice(1, 1, dataman::kRiskDims));
    auto risk = torch::sigmoid(base + torch::cumsum(inc, 1));  // (B, 5)
    return torch::cat({risk, 1.0 - risk.slice(1, 4, 5)}, 1);
}

// ---------------------------------------------------------------- model

RiskNetImpl::RiskNetImpl(VariantKind kind, const RiskConfig& config) : kind_(kind), config_(config) {
    config_.validate();
    const int64_t c = config_.feature_channels();
    encoder = register_module("encoder", Encoder(config_));
    if (learns_alignment(kind_)) align = register_module("align", FeatAlign(c));
    fused_head = register_module("fused_head", CumulativeHead(kind_ == VariantKind::NoAlign ? 2 * c : 3 * c));
    current_head = register_module("current_head", CumulativeHead(c));
    prior_head = register_module("prior_head", CumulativeHead(c));
}

std::pair<RiskOutput, FeatureBundle> RiskNetImpl::forward(const RiskBatch& batch) {
    FeatureBundle fb;
    fb.f_cur = encoder->forward(batch.current);
    fb.f_pri = encoder->forward(batch.prior);
    Tensor fused_in;
    if (kind_ == VariantKind::NoAlign) {
        fused_in = torch::cat({fb.f_cur, fb.f_pri}, 1);
    } else {
        if (needs_registration(kind_) && !batch.phi_reg.defined()) {
            throw ConfigError(to_string(kind_) + " needs registration fields (phi_reg)");
        }
        switch (kind_) {
            case VariantKind::FeatAlign:
            case VariantKind::FeatAlignReg: std::tie(fb.phi_feat, fb.f_pri_aligned) = align->forward(fb.f_cur, fb.f_pri); break;
            case VariantKind::ImgFeatAlign:
                fb.phi_feat = warpkit::resize_field(batch.phi_reg, fb.f_pri.size(2), fb.f_pri.size(3));
                fb.f_pri_aligned = warpkit::warp(fb.f_pri, fb.phi_feat);
                break;
            case VariantKind::ImgAlign: fb.f_pri_aligned = encoder->forward(warpkit::warp(batch.prior, batch.phi_reg)); break;
            case VariantKind::NoAlign: break;
        }
        fb.f_diff = diff_features(fb.f_cur, fb.f_pri_aligned, batch.delta_t_months);
        fused_in = torch::cat({fb.f_cur, fb.f_pri_aligned, fb.f_diff}, 1);
    }
    RiskOutput out;
    out.fused = fused_head->forward(fused_in.mean({2, 3}));
    out.current_only = current_head->forward(fb.f_cur.mean({2, 3}));
    out.prior_only = prior_head->forward(fb.f_pri.mean({2, 3}));
    return {out, fb};
}

int64_t parameter_count(const torch::nn::Module& m) {
    int64_t n = 0;
    for (const auto& p : m.parameters()) n += p.numel();
    return n;
}

// ---------------------------------------------------------------- loss

Tensor masked_bce(const Tensor& pred, const Tensor& target, const Tensor& mask) {
    auto p = pred.clamp(kProbEps, 1.0 - kProbEps);
    auto bce = -(target * torch::log(p) + (1.0 - target) * torch::log(1.0 - p));
    auto on = mask > 0;
    auto denom = mask.sum();
    if (denom.item<double>() <= 0.0) return torch::zeros({}, pred.options());
    return torch::where(on, mask * bce, torch::zeros_like(bce)).sum() / denom;
}

Tensor risk_loss(const RiskOutput& out, const Tensor& target, const Tensor& mask) {
    if (mask.sum().item<double>() <= 0.0) {
        std::cerr << "warning: risk_loss on an all-masked batch is defined as 0\n";
    }
    return (masked_bce(out.fused, target, mask) + masked_bce(out.current_only, target, mask) +
            masked_bce(out.prior_only, target, mask)) /
           3.0;
}

// ---------------------------------------------------------------- data

RiskBatch make_batch(const std::vector<RiskSample>& samples, const std::vector<size_t>& idx, size_t from, size_t to) {
    std::vector<Tensor> cur, pri, phi, tgt, msk;
    std::vector<float> dt;
    bool have_phi = true;
    for (size_t i = from; i < to; ++i) {
        const auto& s = samples[idx[i]];
        cur.push_back(s.current);
        pri.push_back(s.prior);
        dt.push_back(static_cast<float>(s.delta_t_months));
        if (s.phi_reg.defined()) phi.push_back(s.phi_reg);
        else have_phi = false;
        tgt.push_back(torch::tensor(std::vector<float>(s.target.target.begin(), s.target.target.end())));
        msk.push_back(torch::tensor(std::vector<float>(s.target.mask.begin(), s.target.mask.end())));
    }
    RiskBatch b;
    b.current = torch::stack(cur).to(torch::kFloat32);
    b.prior = torch::stack(pri).to(torch::kFloat32);
    b.delta_t_months = torch::tensor(dt);
    if (have_phi && !phi.empty()) b.phi_reg = torch::stack(phi).to(torch::kFloat32);
    b.target = torch::stack(tgt);
    b.mask = torch::stack(msk);
    return b;
}

void attach_registration(std::vector<RiskSample>& samples, regnet::MammoRegNet& reg, int64_t batch_size) {
    for (size_t from = 0; from < samples.size(); from += static_cast<size_t>(batch_size)) {
        const size_t to = std::min(samples.size(), from + static_cast<size_t>(batch_size));
        std::vector<Tensor> cur, pri;
        for (size_t i = from; i < to; ++i) {
            cur.push_back(samples[i].current);
            pri.push_back(samples[i].prior);
        }
        auto out = regnet::register_pair(reg, torch::stack(cur), torch::stack(pri));
        for (size_t i = from; i < to; ++i) samples[i].phi_reg = out.phi_final[static_cast<int64_t>(i - from)].clone();
    }
}

// ---------------------------------------------------------------- checkpoint

RiskCheckpoint RiskCheckpoint::capture(RiskNet& model) {
    RiskCheckpoint c;
    c.kind = model->kind();
    c.config = model->config();
    c.parameters = archive::capture_parameters(*model);
    return c;
}

RiskNet RiskCheckpoint::build() const {
    RiskNet model(kind, config);
    archive::load_parameters(*model, parameters);
    model->eval();
    return model;
}

void RiskCheckpoint::save(const std::string& path) const {
    archive::Archive a;
    a.meta = {{"kind", "risk"}, {"variant", to_string(kind)}, {"config", config}, {"epoch", epoch}, {"val_cindex", val_cindex}};
    a.tensors = parameters;
    archive::write(path, a);
}

RiskCheckpoint RiskCheckpoint::load(const std::string& path) {
    auto a = archive::read(path);
    RiskCheckpoint c;
    try {
        if (a.meta.at("kind") != "risk") throw FormatError(path + ": not a risk checkpoint");
        c.kind = parse_variant(a.meta.at("variant").get<std::string>());
        c.config = a.meta.at("config").get<RiskConfig>();
        c.epoch = a.meta.at("epoch").get<int64_t>();
        c.val_cindex = a.meta.at("val_cindex").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(path + ": " + e.what());
    }
    c.parameters = std::move(a.tensors);
    return c;
}

// ---------------------------------------------------------------- training

std::vector<evalkit::EvalRecord> predict(RiskNet& model, const std::vector<RiskSample>& samples, Tensor* phi_feat,
                                         int64_t batch_size) {
    torch::NoGradGuard g;
    const bool was_training = model->is_training();
    model->eval();
    std::vector<size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::vector<evalkit::EvalRecord> out;
    std::vector<Tensor> fields;
    for (size_t from = 0; from < samples.size(); from += static_cast<size_t>(batch_size)) {
        const size_t to = std::min(samples.size(), from + static_cast<size_t>(batch_size));
        auto [res, fb] = model->forward(make_batch(samples, idx, from, to));
        auto fused = res.fused.to(torch::kFloat64).contiguous();
        if (fb.phi_feat.defined()) fields.push_back(fb.phi_feat);
        for (size_t i = from; i < to; ++i) {
            const auto& s = samples[i];
            evalkit::EvalRecord r;
            r.exam_id = s.exam_id;
            auto row = fused[static_cast<int64_t>(i - from)];
            for (int k = 0; k < dataman::kRiskDims; ++k) r.risk[k] = row[k].item<double>();
            r.target = s.target;
            r.density_category = s.density_category;
            r.event_time = s.event_time;
            r.followup_years = s.followup_years;
            out.push_back(std::move(r));
        }
    }
    if (phi_feat != nullptr) *phi_feat = fields.empty() ? Tensor() : torch::cat(fields, 0);
    model->train(was_training);
    return out;
}

namespace {

double validation_cindex(RiskNet& model, const std::vector<RiskSample>& val, bool& defined) {
    auto recs = predict(model, val);
    try {
        defined = true;
        return evalkit::c_index(recs);
    } catch (const UndefinedMetric&) {
        defined = false;
        return 0.5;
    }
}

void set_lr(torch::optim::Adam& opt, double lr) {
    for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

void check_samples(const std::vector<RiskSample>& set, VariantKind kind, const char* name) {
    if (set.empty()) throw DataError(std::string("train_risk: empty ") + name + " split");
    for (const auto& s : set) {
        if (needs_registration(kind) && !s.phi_reg.defined()) {
            throw ConfigError(to_string(kind) + " requires registration fields for every sample");
        }
        if (!(s.delta_t_months > 0)) throw DataError("train_risk: non-positive time gap for " + s.exam_id);
    }
}

// Alignment block alone on frozen encoder features, feature loss only.
int64_t pretrain_alignment(RiskNet& model, const std::vector<RiskSample>& train, const RiskConfig& config) {
    auto kind = model->kind();
    torch::optim::Adam opt(model->align->parameters(),
                           torch::optim::AdamOptions(config.learning_rate).weight_decay(config.weight_decay));
    model->encoder->eval();
    model->align->train();
    std::vector<size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (int64_t epoch = 0; epoch < config.align_pretrain_epochs; ++epoch) {
        Rng rng(derive_seed(config.seed ^ 0xa11a11ULL, static_cast<uint64_t>(epoch)));
        rng.shuffle(idx.begin(), idx.end());
        for (size_t from = 0; from < idx.size(); from += static_cast<size_t>(config.batch_size)) {
            const size_t to = std::min(idx.size(), from + static_cast<size_t>(config.batch_size));
            auto batch = make_batch(train, idx, from, to);
            Tensor f_cur, f_pri;
            {
                torch::NoGradGuard g;
                f_cur = model->encoder->forward(batch.current);
                f_pri = model->encoder->forward(batch.prior);
            }
            auto [phi, aligned] = model->align->forward(f_cur, f_pri);
            auto loss = feat_loss(aligned, f_cur, phi, config.alpha, config.beta_for(kind), config.lambda_jd);
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    for (auto& p : model->align->parameters()) p.set_requires_grad(false);
    return config.align_pretrain_epochs;
}

}  // namespace

RiskTrainResult train_risk(const std::vector<RiskSample>& train, const std::vector<RiskSample>& val, VariantKind kind,
                           const RiskConfig& config, const RiskTrainOptions& options) {
    config.validate();
    check_samples(train, kind, "training");
    check_samples(val, kind, "validation");

    torch::manual_seed(config.seed);
    RiskNet model(kind, config);
    RiskTrainResult result;
    const bool separate = config.separate_alignment && learns_alignment(kind);
    if (separate) result.pretrain_epochs = pretrain_alignment(model, train, config);

    std::vector<Tensor> trainable;
    for (auto& p : model->parameters()) {
        if (p.requires_grad()) trainable.push_back(p);
    }
    torch::optim::Adam opt(trainable,
                           torch::optim::AdamOptions(config.learning_rate).weight_decay(config.weight_decay));
    double lr = config.learning_rate;
    double best = -std::numeric_limits<double>::infinity();
    int64_t lr_stagnant = 0, stop_stagnant = 0;
    std::vector<size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    result.best = RiskCheckpoint::capture(model);

    for (int64_t epoch = 0; epoch < config.max_epochs; ++epoch) {
        model->train();
        if (separate) model->align->eval();
        Rng rng(derive_seed(config.seed, static_cast<uint64_t>(epoch)));
        rng.shuffle(idx.begin(), idx.end());
        double loss_sum = 0.0;
        int64_t steps = 0;
        for (size_t from = 0; from < idx.size(); from += static_cast<size_t>(config.batch_size)) {
            const size_t to = std::min(idx.size(), from + static_cast<size_t>(config.batch_size));
            auto batch = make_batch(train, idx, from, to);
            auto [out, fb] = model->forward(batch);
            auto loss = risk_loss(out, batch.target, batch.mask);
            if (learns_alignment(kind) && !separate) {
                loss = loss + feat_loss(fb.f_pri_aligned, fb.f_cur, fb.phi_feat, config.alpha, config.beta_for(kind),
                                        config.lambda_jd);
            }
            opt.zero_grad();
            loss.backward();
            opt.step();
            const double v = loss.item<double>();
            if (!std::isfinite(v)) throw std::runtime_error("risk loss diverged at epoch " + std::to_string(epoch));
            loss_sum += v;
            ++steps;
        }

        RiskEpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / static_cast<double>(std::max<int64_t>(steps, 1));
        log.val_cindex = validation_cindex(model, val, log.val_defined);
        log.learning_rate = lr;
        if (log.val_cindex > best) {
            best = log.val_cindex;
            result.best = RiskCheckpoint::capture(model);
            result.best.epoch = epoch + 1;
            result.best.val_cindex = log.val_cindex;
            lr_stagnant = stop_stagnant = 0;
        } else {
            ++lr_stagnant;
            ++stop_stagnant;
            if (lr_stagnant >= config.lr_halve_patience) {
                lr *= 0.5;
                set_lr(opt, lr);
                lr_stagnant = 0;
            }
        }
        if (options.on_epoch) options.on_epoch(log);
        result.history.push_back(log);
        if (stop_stagnant >= config.early_stop_patience) break;
    }
    return result;
}

}  // namespace longalign::riskmodel
