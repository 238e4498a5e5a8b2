#include "doctest_torch.hpp"

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "longalign/errors.hpp"
#include "longalign/phantom.hpp"
#include "longalign/riskmodel.hpp"

using namespace longalign;
using namespace longalign::riskmodel;
using torch::Tensor;

namespace {

RiskConfig small_config() {
    RiskConfig c;
    c.encoder_widths = {4, 4, 8, 8};
    c.batch_size = 4;
    c.learning_rate = 1e-3;
    c.max_epochs = 2;
    c.seed = 5;
    return c;
}

// Loop oracles on a single (2, H, W) field.
double fd(const Tensor& d, int64_t ch, int64_t r, int64_t c, int axis) {
    const int64_t n = d.size(axis + 1);
    const int64_t i = axis == 0 ? r : c;
    auto at = [&](int64_t k) { return axis == 0 ? d[ch][k][c].item<double>() : d[ch][r][k].item<double>(); };
    if (n == 1) return 0.0;
    if (i == 0) return at(1) - at(0);
    if (i == n - 1) return at(n - 1) - at(n - 2);
    return 0.5 * (at(i + 1) - at(i - 1));
}

double smooth_oracle(const Tensor& d) {
    const int64_t h = d.size(1), w = d.size(2);
    double s = 0.0;
    for (int64_t ch = 0; ch < 2; ++ch) {
        for (int64_t r = 0; r < h; ++r) {
            for (int64_t c = 0; c < w; ++c) {
                const double v = d[ch][r][c].item<double>();
                if (r + 1 < h) s += std::pow(d[ch][r + 1][c].item<double>() - v, 2);
                if (c + 1 < w) s += std::pow(d[ch][r][c + 1].item<double>() - v, 2);
            }
        }
    }
    return s / static_cast<double>(h * w);
}

double jd_oracle(const Tensor& d) {
    const int64_t h = d.size(1), w = d.size(2);
    double s = 0.0;
    for (int64_t r = 0; r < h; ++r) {
        for (int64_t c = 0; c < w; ++c) {
            const double det = (1.0 + fd(d, 0, r, c, 0)) * (1.0 + fd(d, 1, r, c, 1)) - fd(d, 0, r, c, 1) * fd(d, 1, r, c, 0);
            s += std::pow(std::max(0.0, -det), 2);
        }
    }
    return s / static_cast<double>(h * w);
}

std::vector<RiskSample> phantom_samples(int n, uint64_t seed0, int64_t side = 64) {
    std::vector<RiskSample> out;
    for (int i = 0; i < n; ++i) {
        phantom::PhantomSpec spec;
        spec.height = side;
        spec.width = side;
        spec.seed = seed0 + static_cast<uint64_t>(i);
        spec.deform_amplitude = 2.0;
        spec.lesion_growth = (i % 2 == 0) ? 0.0 : 0.4 + 0.2 * (i % 5);
        auto p = phantom::generate_phantom_pair(spec);
        RiskSample s;
        s.exam_id = "e" + std::to_string(seed0 + static_cast<uint64_t>(i));
        s.patient_id = "p" + std::to_string(seed0 + static_cast<uint64_t>(i));
        s.current = p.current;
        s.prior = p.prior;
        s.delta_t_months = p.pair.delta_t_months;
        s.target = p.label;
        s.event_time = p.pair.current.cancer_year;
        s.followup_years = p.pair.current.followup_years;
        out.push_back(std::move(s));
    }
    return out;
}

// Controls only: no comparable pairs, so the validation C-index is undefined.
std::vector<RiskSample> control_samples(int n, uint64_t seed0) {
    auto s = phantom_samples(2 * n, seed0);
    std::vector<RiskSample> out;
    for (auto& x : s) {
        if (!x.event_time) out.push_back(x);
    }
    out.resize(static_cast<size_t>(n));
    return out;
}

RiskBatch random_batch(int64_t b, int64_t side, bool with_phi) {
    RiskBatch batch;
    batch.current = torch::rand({b, 1, side, side});
    batch.prior = torch::rand({b, 1, side, side});
    batch.delta_t_months = torch::full({b}, 12.0);
    if (with_phi) batch.phi_reg = torch::zeros({b, 2, side, side});
    batch.target = torch::zeros({b, 6});
    batch.mask = torch::ones({b, 6});
    return batch;
}

void copy_shared(RiskNet& from, RiskNet& to) {
    torch::NoGradGuard g;
    auto src = from->named_parameters();
    for (auto& p : to->named_parameters()) {
        if (auto* s = src.find(p.key())) p.value().copy_(*s);
    }
    auto sb = from->named_buffers();
    for (auto& b : to->named_buffers()) {
        if (auto* s = sb.find(b.key())) b.value().copy_(*s);
    }
}

}  // namespace

TEST_CASE("positional encoding follows the sinusoid table") {
    auto pe = positional_encoding(torch::tensor({12.0}, torch::kFloat64), 4).view(-1);
    CHECK(pe[0].item<double>() == doctest::Approx(std::sin(12.0)).epsilon(1e-12));
    CHECK(pe[1].item<double>() == doctest::Approx(std::cos(12.0)).epsilon(1e-12));
    CHECK(pe[2].item<double>() == doctest::Approx(std::sin(0.12)).epsilon(1e-12));
    CHECK(pe[3].item<double>() == doctest::Approx(std::cos(0.12)).epsilon(1e-12));

    auto multi = positional_encoding(torch::tensor({1.0, 6.0, 24.0}, torch::kFloat64), 8);
    CHECK(multi.sizes() == torch::IntArrayRef({3, 8, 1, 1}));
    for (int64_t b = 0; b < 3; ++b) {
        const double dt = std::array<double, 3>{1.0, 6.0, 24.0}[static_cast<size_t>(b)];
        for (int64_t i = 0; i < 4; ++i) {
            const double f = std::pow(10000.0, 2.0 * static_cast<double>(i) / 8.0);
            CHECK(multi[b][2 * i][0][0].item<double>() == doctest::Approx(std::sin(dt / f)).epsilon(1e-12));
            CHECK(multi[b][2 * i + 1][0][0].item<double>() == doctest::Approx(std::cos(dt / f)).epsilon(1e-12));
        }
    }
}

TEST_CASE("diff features add the encoding to the difference and reject bad gaps") {
    auto a = torch::rand({2, 4, 3, 3}, torch::kFloat64);
    auto b = torch::rand({2, 4, 3, 3}, torch::kFloat64);
    auto dt = torch::tensor({12.0, 3.0}, torch::kFloat64);
    auto d = diff_features(a, b, dt);
    CHECK(torch::allclose(d, a - b + positional_encoding(dt, 4)));
    CHECK_THROWS_AS(diff_features(a, b, torch::tensor({12.0, 0.0}, torch::kFloat64)), DataError);
    CHECK_THROWS_AS(diff_features(a, b.slice(1, 0, 2), dt), DataError);
}

TEST_CASE("cumulative head closed form at zero weights") {
    CumulativeHead head(5);
    {
        torch::NoGradGuard g;
        head->linear->weight.zero_();
        head->linear->bias.zero_();
    }
    // b = 0 and every increment is softplus(0) = ln 2, so risk_k = 2^k / (1 + 2^k).
    auto r = head->forward(torch::rand({3, 5})).to(torch::kFloat64);
    for (int64_t b = 0; b < 3; ++b) {
        for (int k = 1; k <= 5; ++k) {
            const double p = std::pow(2.0, k);
            CHECK(r[b][k - 1].item<double>() == doctest::Approx(p / (1.0 + p)).epsilon(1e-6));
        }
        CHECK(r[b][0].item<double>() == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
        CHECK(r[b][4].item<double>() == doctest::Approx(32.0 / 33.0).epsilon(1e-6));
        CHECK(r[b][5].item<double>() == doctest::Approx(1.0 / 33.0).epsilon(1e-6));
    }
}

TEST_CASE("cumulative head is monotone and complementary for any weights") {
    torch::manual_seed(11);
    for (int trial = 0; trial < 20; ++trial) {
        CumulativeHead head(7);
        {
            torch::NoGradGuard g;
            head->linear->weight.normal_(0.0, 3.0);
            head->linear->bias.normal_(0.0, 3.0);
        }
        auto r = head->forward(torch::randn({16, 7}) * 4.0);
        auto steps = r.slice(1, 1, 5) - r.slice(1, 0, 4);
        CHECK(steps.min().item<double>() >= 0.0);
        CHECK(r.slice(1, 0, 5).min().item<double>() >= 0.0);
        CHECK(r.slice(1, 0, 5).max().item<double>() <= 1.0);
        CHECK(torch::allclose(r.select(1, 5), 1.0 - r.select(1, 4)));
    }
}

TEST_CASE("masked BCE on a hand-worked instance") {
    auto pred = torch::tensor({{0.8, 0.5, 0.3}}, torch::kFloat64);
    auto target = torch::tensor({{1.0, 0.0, 1.0}}, torch::kFloat64);
    auto mask = torch::tensor({{1.0, 1.0, 0.0}}, torch::kFloat64);
    const double expected = (-std::log(0.8) - std::log(0.5)) / 2.0;
    CHECK(masked_bce(pred, target, mask).item<double>() == doctest::Approx(expected).epsilon(1e-12));

    // Clamping keeps saturated predictions finite.
    auto sat = torch::tensor({{0.0, 1.0}}, torch::kFloat64);
    auto v = masked_bce(sat, torch::tensor({{1.0, 0.0}}, torch::kFloat64), torch::ones({1, 2}, torch::kFloat64));
    CHECK(v.item<double>() == doctest::Approx(-std::log(kProbEps)).epsilon(1e-6));

    CHECK(masked_bce(pred, target, torch::zeros_like(mask)).item<double>() == 0.0);
}

TEST_CASE("risk loss ignores masked entries") {
    torch::manual_seed(2);
    auto mk = [] { return torch::rand({4, 6}, torch::kFloat64) * 0.98 + 0.01; };
    RiskOutput out{mk(), mk(), mk()};
    auto target = (torch::rand({4, 6}, torch::kFloat64) > 0.5).to(torch::kFloat64);
    auto mask = (torch::rand({4, 6}, torch::kFloat64) > 0.4).to(torch::kFloat64);
    mask[0][0] = 1.0;
    const double base = risk_loss(out, target, mask).item<double>();

    RiskOutput perturbed{out.fused.clone(), out.current_only.clone(), out.prior_only.clone()};
    auto off = mask == 0;
    for (auto* t : {&perturbed.fused, &perturbed.current_only, &perturbed.prior_only}) {
        *t = torch::where(off, torch::rand_like(*t), *t);
    }
    CHECK(std::abs(risk_loss(perturbed, target, mask).item<double>() - base) < 1e-8);

    // Non-finite predictions in masked slots neither change the loss nor leak gradient.
    auto fused = torch::where(off, torch::full_like(out.fused, NAN), out.fused).requires_grad_(true);
    RiskOutput with_nan{fused, out.current_only, out.prior_only};
    auto loss = risk_loss(with_nan, target, mask);
    CHECK(std::abs(loss.item<double>() - base) < 1e-8);
    loss.backward();
    CHECK(fused.grad().masked_select(off).abs().max().item<double>() == 0.0);

    // Pooled per level, averaged over levels.
    const double manual = (masked_bce(out.fused, target, mask) + masked_bce(out.current_only, target, mask) +
                           masked_bce(out.prior_only, target, mask))
                              .item<double>() /
                          3.0;
    CHECK(base == doctest::Approx(manual).epsilon(1e-12));
    CHECK(risk_loss(out, target, torch::zeros_like(mask)).item<double>() == 0.0);
}

TEST_CASE("feature loss matches its formula on a 4x4 grid") {
    torch::manual_seed(4);
    auto f_cur = torch::randn({1, 3, 4, 4}, torch::kFloat64);
    auto f_al = torch::randn({1, 3, 4, 4}, torch::kFloat64);
    auto phi = torch::randn({1, 2, 4, 4}, torch::kFloat64) * 0.8;
    double mse = 0.0;
    for (int64_t i = 0; i < f_cur.numel(); ++i) {
        mse += std::pow(f_al.view(-1)[i].item<double>() - f_cur.view(-1)[i].item<double>(), 2);
    }
    mse /= static_cast<double>(f_cur.numel());
    const double alpha = 0.03, beta = 0.2, lambda = 0.5;
    const double expected = alpha * mse + beta * (smooth_oracle(phi[0]) + lambda * jd_oracle(phi[0]));
    CHECK(jd_oracle(phi[0]) > 0.0);  // the instance exercises the folding term
    CHECK(feat_loss(f_al, f_cur, phi, alpha, beta, lambda).item<double>() == doctest::Approx(expected).epsilon(1e-10));
    CHECK(feat_loss(f_al, f_cur, phi, alpha, 0.0, lambda).item<double>() == doctest::Approx(alpha * mse).epsilon(1e-10));
}

TEST_CASE("feature loss gradient agrees with finite differences") {
    torch::manual_seed(8);
    auto f_cur = torch::randn({1, 4, 8, 8}, torch::kFloat64);
    auto f_pri = torch::randn({1, 4, 8, 8}, torch::kFloat64);
    auto phi0 = testing::off_grid_displacement({1, 2, 8, 8}, 0.7);
    auto f = [&](const Tensor& phi) {
        return feat_loss(warpkit::warp(f_pri, phi), f_cur, phi, 0.05, 0.2, 1e-1);
    };
    CHECK(testing::gradient_error(f, phi0, 1e-4) < 1e-3);
}

TEST_CASE("variants differ only where the contract says") {
    auto cfg = small_config();
    const int64_t c = cfg.feature_channels();
    RiskNet no(VariantKind::NoAlign, cfg), fa(VariantKind::FeatAlign, cfg), far(VariantKind::FeatAlignReg, cfg),
        ifa(VariantKind::ImgFeatAlign, cfg), ia(VariantKind::ImgAlign, cfg);
    CHECK(no->align.is_empty());
    CHECK(ifa->align.is_empty());
    CHECK(ia->align.is_empty());
    CHECK_FALSE(fa->align.is_empty());
    CHECK(no->fused_head->linear->weight.size(1) == 2 * c);
    CHECK(fa->fused_head->linear->weight.size(1) == 3 * c);

    const int64_t adapter = parameter_count(*ifa) - parameter_count(*no);
    CHECK(adapter == 6 * c);
    CHECK(parameter_count(*ia) == parameter_count(*ifa));
    CHECK(parameter_count(*fa) == parameter_count(*far));
    CHECK(parameter_count(*fa) - parameter_count(*ifa) == parameter_count(*fa->align));

    CHECK(default_beta(VariantKind::FeatAlignReg) == 0.2);
    CHECK(default_beta(VariantKind::FeatAlign) == 0.0);
    for (auto k : all_variants()) CHECK(parse_variant(to_string(k)) == k);
    CHECK_THROWS_AS(parse_variant("Align"), ConfigError);

    no->eval();
    auto [out, fb] = no->forward(random_batch(2, 64, false));
    CHECK(out.fused.sizes() == torch::IntArrayRef({2, 6}));
    CHECK(fb.f_cur.sizes() == torch::IntArrayRef({2, c, 2, 2}));
    CHECK_FALSE(fb.phi_feat.defined());
    CHECK_THROWS_AS(ia->forward(random_batch(2, 64, false)), ConfigError);
    CHECK_THROWS_AS(no->forward(random_batch(1, 48, false)), DataError);
}

TEST_CASE("aligned variants coincide at identity alignment") {
    auto cfg = small_config();
    torch::manual_seed(21);
    RiskNet fa(VariantKind::FeatAlign, cfg), ifa(VariantKind::ImgFeatAlign, cfg), ia(VariantKind::ImgAlign, cfg);
    copy_shared(fa, ifa);
    copy_shared(fa, ia);
    for (auto* m : {&fa, &ifa, &ia}) (*m)->eval();
    auto batch = random_batch(3, 64, true);
    torch::NoGradGuard g;
    auto [o1, b1] = fa->forward(batch);
    auto [o2, b2] = ifa->forward(batch);
    auto [o3, b3] = ia->forward(batch);
    CHECK(b1.phi_feat.abs().max().item<double>() == 0.0);
    CHECK(torch::allclose(b1.f_pri_aligned, b1.f_pri, 0.0, 1e-6));
    CHECK(torch::allclose(o1.fused, o2.fused, 0.0, 1e-6));
    CHECK(torch::allclose(o1.fused, o3.fused, 0.0, 1e-5));
    CHECK(torch::allclose(o1.prior_only, o3.prior_only, 0.0, 1e-6));
}

TEST_CASE("image alignment warps the prior before encoding") {
    auto cfg = small_config();
    torch::manual_seed(22);
    RiskNet ia(VariantKind::ImgAlign, cfg);
    ia->eval();
    auto batch = random_batch(2, 64, true);
    batch.phi_reg = torch::full({2, 2, 64, 64}, 3.0);
    torch::NoGradGuard g;
    auto [out, fb] = ia->forward(batch);
    auto expected = ia->encoder->forward(warpkit::warp(batch.prior, batch.phi_reg));
    CHECK(torch::allclose(fb.f_pri_aligned, expected));
    // The prior-only level always reads the unwarped prior.
    CHECK(torch::allclose(fb.f_pri, ia->encoder->forward(batch.prior)));
}

TEST_CASE("registration fields stay frozen during risk training") {
    regnet::RegConfig rc;
    rc.encoder_channels = {4, 8, 8, 8, 16};
    rc.attention_blocks = 2;
    rc.heads = 2;
    rc.window_size = 2;
    rc.seed = 1;
    torch::manual_seed(1);
    regnet::MammoRegNet reg(rc);
    {
        torch::NoGradGuard g;
        for (auto& p : reg->named_parameters()) {
            if (p.key().find("head") != std::string::npos) p.value().normal_(0.0, 1e-2);
        }
    }
    std::vector<Tensor> before;
    for (auto& p : reg->parameters()) before.push_back(p.detach().clone());

    auto train = phantom_samples(4, 100);
    auto val = phantom_samples(4, 200);
    attach_registration(train, reg);
    attach_registration(val, reg);
    auto direct = regnet::register_pair(reg, train[1].current.unsqueeze(0), train[1].prior.unsqueeze(0));
    // Batched and single-pair passes differ only by float32 accumulation order.
    CHECK(torch::allclose(train[1].phi_reg, direct.phi_final[0], 1e-5, 1e-5));
    CHECK(train[1].phi_reg.abs().max().item<double>() > 0.0);
    auto stored = train[1].phi_reg.clone();

    auto cfg = small_config();
    train_risk(train, val, VariantKind::ImgAlign, cfg);
    train_risk(train, val, VariantKind::ImgFeatAlign, cfg);
    auto params = reg->parameters();
    for (size_t i = 0; i < params.size(); ++i) CHECK(torch::equal(params[i], before[i]));
    CHECK(torch::equal(train[1].phi_reg, stored));

    auto missing = phantom_samples(4, 100);
    CHECK_THROWS_AS(train_risk(missing, val, VariantKind::ImgAlign, cfg), ConfigError);
}

TEST_CASE("learning rate halves on stagnation and training stops early") {
    auto train = phantom_samples(4, 300);
    auto val = control_samples(3, 400);
    auto cfg = small_config();
    cfg.max_epochs = 100;
    std::vector<RiskEpochLog> seen;
    RiskTrainOptions opts;
    opts.on_epoch = [&](const RiskEpochLog& l) { seen.push_back(l); };
    auto res = train_risk(train, val, VariantKind::NoAlign, cfg, opts);
    // Undefined C-index falls back to 0.5: epoch 0 is the best, then 15 stagnant epochs.
    REQUIRE(res.history.size() == 16);
    CHECK(seen.size() == 16);
    for (const auto& l : res.history) {
        CHECK_FALSE(l.val_defined);
        CHECK(l.val_cindex == 0.5);
        const double expected = cfg.learning_rate * std::pow(0.5, static_cast<double>((l.epoch - 1) / 5));
        CHECK(l.learning_rate == doctest::Approx(l.epoch == 0 ? cfg.learning_rate : expected));
    }
    CHECK(res.best.epoch == 1);
}

TEST_CASE("separate mode freezes the pre-trained alignment block") {
    auto train = phantom_samples(6, 500);
    auto val = phantom_samples(4, 600);
    auto cfg = small_config();
    cfg.separate_alignment = true;
    cfg.align_pretrain_epochs = 2;
    cfg.alpha = 1.0;
    cfg.max_epochs = 1;
    auto short_run = train_risk(train, val, VariantKind::FeatAlign, cfg);
    cfg.max_epochs = 3;
    auto long_run = train_risk(train, val, VariantKind::FeatAlign, cfg);
    CHECK(short_run.pretrain_epochs == 2);

    auto a = short_run.best.build();
    auto b = long_run.best.build();
    RiskNet init(VariantKind::FeatAlign, cfg);
    auto pa = a->align->named_parameters();
    auto pb = b->align->named_parameters();
    bool moved = false;
    for (auto& p : pa) {
        CHECK(torch::equal(p.value(), *pb.find(p.key())));
        moved = moved || !torch::equal(p.value(), *init->align->named_parameters().find(p.key()));
    }
    CHECK(moved);

    // Joint training moves the alignment block with the risk loss.
    cfg.separate_alignment = false;
    auto joint = train_risk(train, val, VariantKind::FeatAlign, cfg);
    CHECK(joint.pretrain_epochs == 0);
    auto j = joint.best.build();
    bool differs = false;
    for (auto& p : j->align->named_parameters()) differs = differs || !torch::equal(p.value(), *pa.find(p.key()));
    CHECK(differs);
}

TEST_CASE("risk checkpoints round trip") {
    auto cfg = small_config();
    cfg.beta = 0.3;
    RiskNet m(VariantKind::FeatAlignReg, cfg);
    auto ck = RiskCheckpoint::capture(m);
    ck.epoch = 7;
    ck.val_cindex = 0.61;
    auto path = std::filesystem::temp_directory_path() / "risk_roundtrip.lalg";
    ck.save(path.string());
    auto back = RiskCheckpoint::load(path.string());
    std::filesystem::remove(path);
    CHECK(back.kind == VariantKind::FeatAlignReg);
    CHECK(back.epoch == 7);
    CHECK(back.val_cindex == 0.61);
    CHECK(back.config.beta == std::optional<double>(0.3));
    auto rebuilt = back.build();
    m->eval();
    auto batch = random_batch(2, 64, false);
    torch::NoGradGuard g;
    CHECK(torch::equal(m->forward(batch).first.fused, rebuilt->forward(batch).first.fused));

    nlohmann::json j = cfg;
    j["dropout"] = 0.1;
    CHECK_THROWS_AS(j.get<RiskConfig>(), ConfigError);
    RiskConfig bad = cfg;
    bad.encoder_widths = {4, 8};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("prediction records follow sample order") {
    auto samples = phantom_samples(5, 700);
    RiskNet m(VariantKind::FeatAlign, small_config());
    Tensor phi;
    auto recs = predict(m, samples, &phi, 2);
    REQUIRE(recs.size() == 5);
    for (size_t i = 0; i < 5; ++i) {
        CHECK(recs[i].exam_id == samples[i].exam_id);
        CHECK(recs[i].event_time == samples[i].event_time);
        CHECK(recs[i].risk[5] == doctest::Approx(1.0 - recs[i].risk[4]).epsilon(1e-6));
    }
    CHECK(phi.sizes() == torch::IntArrayRef({5, 2, 2, 2}));
}
