#include "longalign/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include "longalign/errors.hpp"
#include "longalign/rng.hpp"

namespace longalign::phantom {

namespace {

using dataman::DensityLevel;

constexpr double kPi = std::numbers::pi;
constexpr double kTranslationShare = 0.4;
constexpr double kLinearShare = 0.2;
constexpr double kWaveShare = 0.4;
constexpr int kWaves = 3;

enum Stream : uint64_t { kAnatomy = 1, kDeformation = 2, kLesion = 3, kPerturbation = 4, kMeta = 5 };

// Improved Perlin gradient noise with a seeded permutation table.
class Perlin {
public:
    explicit Perlin(uint64_t seed) {
        std::array<int, 256> p{};
        std::iota(p.begin(), p.end(), 0);
        Rng rng(seed);
        rng.shuffle(p.begin(), p.end());
        for (int i = 0; i < 512; ++i) perm_[i] = p[i & 255];
    }

    // Roughly in [-1, 1].
    double operator()(double x, double y) const {
        const double fx = std::floor(x);
        const double fy = std::floor(y);
        const int xi = static_cast<int>(fx) & 255;
        const int yi = static_cast<int>(fy) & 255;
        const double xf = x - fx;
        const double yf = y - fy;
        const double u = fade(xf);
        const double v = fade(yf);
        const int aa = perm_[perm_[xi] + yi];
        const int ab = perm_[perm_[xi] + yi + 1];
        const int ba = perm_[perm_[xi + 1] + yi];
        const int bb = perm_[perm_[xi + 1] + yi + 1];
        const double x1 = lerp(grad(aa, xf, yf), grad(ba, xf - 1, yf), u);
        const double x2 = lerp(grad(ab, xf, yf - 1), grad(bb, xf - 1, yf - 1), u);
        return lerp(x1, x2, v);
    }

    double fbm(double x, double y, int octaves) const {
        double sum = 0.0, amp = 1.0, norm = 0.0, freq = 1.0;
        for (int o = 0; o < octaves; ++o) {
            sum += amp * (*this)(x * freq, y * freq);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        return sum / norm;
    }

private:
    static double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }
    static double lerp(double a, double b, double t) { return a + t * (b - a); }
    static double grad(int hash, double x, double y) {
        switch (hash & 7) {
            case 0: return x + y;
            case 1: return -x + y;
            case 2: return x - y;
            case 3: return -x - y;
            case 4: return x;
            case 5: return -x;
            case 6: return y;
            default: return -y;
        }
    }

    std::array<int, 512> perm_{};
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Lesion {
    double row = 0.0, col = 0.0, sigma = 1.0;
    double amp_current = 0.0, amp_prior = 0.0;
};

// Continuous breast texture in prior-image coordinates.
class Texture {
public:
    Texture(const PhantomSpec& spec, dataman::Laterality lat)
        : h_(static_cast<double>(spec.height)),
          w_(static_cast<double>(spec.width)),
          left_(lat == dataman::Laterality::L),
          gland_(derive_seed(spec.seed, 101)),
          fine_(derive_seed(spec.seed, 102)),
          background_(derive_seed(spec.seed, 103)) {
        Rng rng(derive_seed(spec.seed, kAnatomy));
        center_row_ = h_ * (0.5 + rng.uniform(-0.05, 0.05));
        axis_row_ = h_ * rng.uniform(0.40, 0.47);
        axis_col_ = w_ * rng.uniform(0.78, 0.90);
        noise_offset_ = {rng.uniform(0.0, 64.0), rng.uniform(0.0, 64.0)};
        switch (spec.density_level) {
            case DensityLevel::Low: threshold_ = 0.25, contrast_ = 0.20; break;
            case DensityLevel::Med: threshold_ = 0.0, contrast_ = 0.30; break;
            case DensityLevel::High: threshold_ = -0.25, contrast_ = 0.40; break;
        }
    }

    double radius(double r, double c) const {
        const double u = left_ ? c : (w_ - 1.0 - c);
        const double dr = (r - center_row_) / axis_row_;
        const double dc = u / axis_col_;
        return std::sqrt(dr * dr + dc * dc);
    }

    double foreground(double r, double c) const { return sigmoid((1.0 - radius(r, c)) * 30.0); }

    // Returns (intensity, foreground weight).
    std::pair<double, double> sample(double r, double c) const {
        const double rn = radius(r, c);
        const double fg = sigmoid((1.0 - rn) * 30.0);
        const double inner = std::sqrt(std::max(0.0, 1.0 - rn * rn));
        const double tissue = 0.25 + 0.15 * inner;
        const double n = gland_.fbm(r / 16.0 + noise_offset_[0], c / 16.0 + noise_offset_[1], 4);
        const double gland = sigmoid((n - threshold_) * 6.0) * contrast_ * (0.5 + 0.5 * inner);
        const double fine = 0.5 * fine_.fbm(r / 8.0, c / 8.0, 3);
        const double bg = 0.03 + 0.02 * background_.fbm(r / 16.0, c / 16.0, 2);
        return {fg * (tissue + gland + fine) + (1.0 - fg) * bg, fg};
    }

    double center_row() const { return center_row_; }
    double axis_row() const { return axis_row_; }
    double axis_col() const { return axis_col_; }
    bool left() const { return left_; }

private:
    double h_, w_;
    bool left_;
    Perlin gland_, fine_, background_;
    double center_row_ = 0.0, axis_row_ = 1.0, axis_col_ = 1.0;
    std::array<double, 2> noise_offset_{};
    double threshold_ = 0.0, contrast_ = 0.3;
};

struct Wave {
    std::array<double, 2> amp{};  // displacement direction * magnitude
    std::array<double, 2> k{};    // wave vector (rad / px)
    double phase = 0.0;
};

struct GroundTruth {
    std::array<double, 2> translation{};
    std::array<double, 4> linear{};  // displacement = linear * (p - c)
    std::array<Wave, kWaves> waves{};
    std::optional<std::array<double, 2>> fixed;

    std::array<double, 2> at(double r, double c, double cr, double cc) const {
        if (fixed) return *fixed;
        const double pr = r - cr, pc = c - cc;
        std::array<double, 2> d = {translation[0] + linear[0] * pr + linear[1] * pc,
                                   translation[1] + linear[2] * pr + linear[3] * pc};
        for (const auto& wv : waves) {
            const double s = std::sin(wv.k[0] * r + wv.k[1] * c + wv.phase);
            d[0] += wv.amp[0] * s;
            d[1] += wv.amp[1] * s;
        }
        return d;
    }
};

double half_diagonal(const PhantomSpec& spec) {
    const double hr = static_cast<double>(spec.height - 1) / 2.0;
    const double hc = static_cast<double>(spec.width - 1) / 2.0;
    return std::max(1.0, std::sqrt(hr * hr + hc * hc));
}

GroundTruth draw_ground_truth(const PhantomSpec& spec) {
    GroundTruth gt;
    gt.fixed = spec.fixed_translation;
    if (gt.fixed) return gt;
    const double a = spec.deform_amplitude;
    Rng rng(derive_seed(spec.seed, kDeformation));

    const double theta = rng.uniform(0.0, 2.0 * kPi);
    gt.translation = {kTranslationShare * a * std::cos(theta), kTranslationShare * a * std::sin(theta)};

    // Random 2x2 matrix rescaled to spectral norm 1, then to 0.2A at the corners.
    std::array<double, 4> m{};
    for (auto& v : m) v = rng.uniform(-1.0, 1.0);
    const double t1 = m[0] * m[0] + m[1] * m[1] + m[2] * m[2] + m[3] * m[3];
    const double det = m[0] * m[3] - m[1] * m[2];
    const double spectral = std::sqrt((t1 + std::sqrt(std::max(0.0, t1 * t1 - 4.0 * det * det))) / 2.0);
    const double lin_scale = spectral > 0 ? kLinearShare * a / (half_diagonal(spec) * spectral) : 0.0;
    for (int i = 0; i < 4; ++i) gt.linear[i] = m[i] * lin_scale;

    std::array<double, kWaves> weights{};
    double wsum = 0.0;
    for (auto& v : weights) wsum += (v = rng.uniform(0.2, 1.0));
    for (int j = 0; j < kWaves; ++j) {
        auto& wv = gt.waves[j];
        const double mag = kWaveShare * a * weights[j] / wsum;
        const double dir = rng.uniform(0.0, 2.0 * kPi);
        wv.amp = {mag * std::cos(dir), mag * std::sin(dir)};
        const double wavelength = spec.deform_smoothness * rng.uniform(1.0, 2.0);
        const double kdir = rng.uniform(0.0, 2.0 * kPi);
        wv.k = {2.0 * kPi / wavelength * std::cos(kdir), 2.0 * kPi / wavelength * std::sin(kdir)};
        wv.phase = rng.uniform(0.0, 2.0 * kPi);
    }
    return gt;
}

Lesion draw_lesion(const PhantomSpec& spec, const Texture& tex) {
    Lesion les;
    const double g = std::max(0.0, spec.lesion_growth);
    const double saturation = g / (1.0 + g);
    Rng rng(derive_seed(spec.seed, kLesion));
    // Position inside the inner part of the breast.
    const double rad = 0.6 * std::sqrt(rng.uniform());
    const double ang = rng.uniform(-0.5 * kPi, 0.5 * kPi);
    les.row = tex.center_row() + rad * std::sin(ang) * tex.axis_row();
    const double u = rad * std::cos(ang) * tex.axis_col();
    les.col = tex.left() ? u : static_cast<double>(spec.width - 1) - u;
    les.sigma = 3.0 + 3.0 * saturation;
    les.amp_current = 0.4 * saturation;
    les.amp_prior = 0.25 * les.amp_current;
    return les;
}

double lesion_at(const Lesion& les, double amp, double r, double c) {
    if (amp <= 0.0) return 0.0;
    const double dr = r - les.row, dc = c - les.col;
    return amp * std::exp(-(dr * dr + dc * dc) / (2.0 * les.sigma * les.sigma));
}

}  // namespace

void PhantomSpec::validate() const {
    if (height < 64 || width < 64) throw ConfigError("PhantomSpec: height and width must be >= 64");
    if (!(deform_amplitude >= 0.0)) throw ConfigError("PhantomSpec: deform_amplitude must be >= 0");
    if (!(deform_smoothness > 0.0)) throw ConfigError("PhantomSpec: deform_smoothness must be > 0");
    if (!(lesion_growth >= 0.0)) throw ConfigError("PhantomSpec: lesion_growth must be >= 0");
}

double gradient_bound(const PhantomSpec& spec) {
    if (spec.fixed_translation) return 0.0;
    const double a = spec.deform_amplitude;
    return kLinearShare * a / half_diagonal(spec) + kWaveShare * a * 2.0 * kPi / spec.deform_smoothness;
}

double smoothness_threshold(const PhantomSpec& spec) {
    const double a = spec.deform_amplitude;
    const double linear = kLinearShare * a / half_diagonal(spec);
    if (linear >= 1.0) return std::numeric_limits<double>::infinity();
    return kWaveShare * a * 2.0 * kPi / (1.0 - linear);
}

std::optional<double> cancer_year_for_growth(double lesion_growth) {
    if (lesion_growth < kGrowthThreshold) return std::nullopt;
    return std::clamp(5.5 - 4.0 * std::min(lesion_growth, 1.25), 0.5, 5.5);
}

PhantomPair generate_phantom_pair(const PhantomSpec& spec) {
    spec.validate();
    const int64_t h = spec.height, w = spec.width;

    Rng meta(derive_seed(spec.seed, kMeta));
    const auto lat = meta.index(2) == 0 ? dataman::Laterality::L : dataman::Laterality::R;
    const auto view = meta.index(2) == 0 ? dataman::View::CC : dataman::View::MLO;
    const auto prior_day = std::chrono::sys_days{dataman::Date{std::chrono::year{2012}, std::chrono::January,
                                                               std::chrono::day{1}}} +
                           std::chrono::days{static_cast<int>(meta.index(730))};
    const double gap_months = meta.uniform(12.0, 36.0);
    const auto current_day = prior_day + std::chrono::days{static_cast<int>(std::lround(gap_months * dataman::kDaysPerMonth))};
    const double control_followup = meta.uniform(3.0, 8.0);
    double density_value = 0.0;
    switch (spec.density_level) {
        case DensityLevel::Low: density_value = meta.uniform(5.0, 20.0); break;
        case DensityLevel::Med: density_value = meta.uniform(25.0, 45.0); break;
        case DensityLevel::High: density_value = meta.uniform(50.0, 75.0); break;
    }

    const Texture tex(spec, lat);
    const GroundTruth gt = draw_ground_truth(spec);
    const Lesion les = draw_lesion(spec, tex);

    Rng perturb(derive_seed(spec.seed, kPerturbation));
    const double gain = perturb.uniform(0.92, 1.08);
    const double offset = perturb.uniform(-0.03, 0.03);

    auto prior = torch::empty({1, h, w}, torch::kFloat32);
    auto current = torch::empty({1, h, w}, torch::kFloat32);
    auto fgmask = torch::empty({1, h, w}, torch::kFloat32);
    auto phi = torch::empty({2, h, w}, torch::kFloat32);
    float* pp = prior.data_ptr<float>();
    float* pc = current.data_ptr<float>();
    float* pf = fgmask.data_ptr<float>();
    float* pd = phi.data_ptr<float>();
    const double cr = static_cast<double>(h - 1) / 2.0;
    const double cc = static_cast<double>(w - 1) / 2.0;
    const int64_t plane = h * w;

    for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
            const int64_t p = i * w + j;
            const double r = static_cast<double>(i), c = static_cast<double>(j);
            const auto d = gt.at(r, c, cr, cc);
            pd[p] = static_cast<float>(d[0]);
            pd[plane + p] = static_cast<float>(d[1]);

            const auto [vp, fgp] = tex.sample(r, c);
            const double prior_v = gain * (vp + fgp * lesion_at(les, les.amp_prior, r, c)) + offset +
                                   0.005 * perturb.normal();
            pp[p] = static_cast<float>(std::clamp(prior_v, 0.0, 1.0));

            const double rr = r + d[0], rc = c + d[1];
            const auto [vc, fgc] = tex.sample(rr, rc);
            const double cur_v = vc + fgc * lesion_at(les, les.amp_current, rr, rc);
            pc[p] = static_cast<float>(std::clamp(cur_v, 0.0, 1.0));
            pf[p] = fgc > 0.5 ? 1.0f : 0.0f;
        }
    }

    const std::string pid = "ph" + std::to_string(spec.seed);
    dataman::ExamRecord prior_exam;
    prior_exam.patient_id = pid;
    prior_exam.exam_id = pid + "-e0";
    prior_exam.laterality = lat;
    prior_exam.view = view;
    prior_exam.acquisition_date = dataman::Date{prior_day};
    prior_exam.density_value = density_value;

    dataman::ExamRecord current_exam = prior_exam;
    current_exam.exam_id = pid + "-e1";
    current_exam.acquisition_date = dataman::Date{current_day};

    const auto cancer = cancer_year_for_growth(spec.lesion_growth);
    current_exam.cancer_year = cancer;
    current_exam.followup_years = cancer ? std::max(*cancer, control_followup) : control_followup;
    const double gap_years = static_cast<double>((current_day - prior_day).count()) / 365.25;
    prior_exam.followup_years = current_exam.followup_years + gap_years;
    if (cancer) prior_exam.cancer_year = *cancer + gap_years;

    PhantomPair out;
    out.prior = prior;
    out.current = current;
    out.phi_gt = warpkit::DeformationField{phi};
    out.pair = dataman::make_pair(prior_exam, current_exam);
    out.label = dataman::build_risk_target(current_exam);
    out.foreground = fgmask;
    return out;
}

}  // namespace longalign::phantom
