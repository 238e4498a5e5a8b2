#include "doctest_torch.hpp"

#include <algorithm>
#include <filesystem>
#include <set>

#include "longalign/dataman.hpp"
#include "longalign/errors.hpp"
#include "longalign/io.hpp"
#include "longalign/phantom.hpp"
#include "longalign/rng.hpp"

using namespace longalign;
using namespace longalign::dataman;

namespace {

const std::string kHeader = std::string(kManifestHeader) + "\n";

ExamRecord exam(std::optional<double> cancer, double followup) {
    ExamRecord r;
    r.patient_id = "p";
    r.exam_id = "e";
    r.cancer_year = cancer;
    r.followup_years = followup;
    return r;
}

std::vector<ExamRecord> patients(int n, int exams_each) {
    std::vector<ExamRecord> out;
    for (int p = 0; p < n; ++p) {
        for (int e = 0; e < exams_each; ++e) {
            ExamRecord r;
            r.patient_id = "p" + std::to_string(p);
            r.exam_id = "e" + std::to_string(e);
            out.push_back(r);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("load_manifest: header only, field mapping and errors") {
    CHECK(parse_manifest(kHeader).empty());

    auto recs = parse_manifest(kHeader + "p1,e1,L,CC,2013-05-01,img/p1_e1.png,35.2,6.0,\n");
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].patient_id == "p1");
    CHECK(recs[0].laterality == Laterality::L);
    CHECK(recs[0].view == View::CC);
    CHECK(format_date(recs[0].acquisition_date) == "2013-05-01");
    CHECK(recs[0].image_path == "img/p1_e1.png");
    CHECK(recs[0].density_value.value() == doctest::Approx(35.2));
    CHECK(recs[0].followup_years == doctest::Approx(6.0));
    CHECK_FALSE(recs[0].cancer_year.has_value());

    CHECK_THROWS_AS(parse_manifest(kHeader + "p1,e1,L,CC,2013-05-01,a.png,,6,\np1,e1,R,CC,2014-05-01,b.png,,5,\n"),
                    IntegrityError);

    try {
        parse_manifest("patient_id,exam_id,laterality,view,date,image_path,density,followup_years\n");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("cancer_year") != std::string::npos);
    }

    try {
        parse_manifest(kHeader + "p1,e1,L,CC,2013-05-01,a.png,,6,\np2,e1,L,CC,2013-02-30,a.png,,6,\n");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(parse_manifest(kHeader + "p1,e1,L,CC,2013-05-01,a.png,abc,6,\n"), FormatError);
    CHECK_THROWS_AS(parse_manifest(kHeader + "p1,e1,L,CC,2013-05-01,a.png,,3,4\n"), FormatError);
}

TEST_CASE("manifest round trip through text") {
    auto recs = parse_manifest(kHeader + "p1,e1,R,MLO,2013-05-01,img/a.png,12.5,6.25,2.5\n"
                                         "p1,e2,R,MLO,2015-01-10,img/b.png,,4,\n");
    CHECK(parse_manifest(format_manifest(recs)).size() == 2);
    CHECK(format_manifest(parse_manifest(format_manifest(recs))) == format_manifest(recs));
}

TEST_CASE("build_risk_target examples") {
    auto a = build_risk_target(exam(2.5, 7.0));
    CHECK((a.target == std::array<float, 6>{0, 0, 1, 1, 1, 0}));
    CHECK((a.mask == std::array<float, 6>{1, 1, 1, 1, 1, 1}));

    auto b = build_risk_target(exam(std::nullopt, 3.2));
    CHECK((b.mask == std::array<float, 6>{1, 1, 1, 0, 0, 0}));
    CHECK(b.target[0] == 0);
    CHECK(b.target[1] == 0);
    CHECK(b.target[2] == 0);

    auto c = build_risk_target(exam(std::nullopt, 5.0));
    CHECK((c.target == std::array<float, 6>{0, 0, 0, 0, 0, 1}));
    CHECK((c.mask == std::array<float, 6>{1, 1, 1, 1, 1, 1}));

    CHECK_THROWS_AS(build_risk_target(exam(std::nullopt, 5.0), 4), ConfigError);
}

TEST_CASE("build_risk_target properties over random exams") {
    Rng rng(11);
    for (int i = 0; i < 500; ++i) {
        const double followup = rng.uniform(0.0, 8.0);
        std::optional<double> cancer;
        if (rng.uniform() < 0.5) cancer = rng.uniform(0.0, followup);
        const auto t = build_risk_target(exam(cancer, followup));
        for (int k = 0; k < 6; ++k) {
            if (t.target[k] == 1.0f) CHECK(t.mask[k] == 1.0f);
        }
        for (int k = 0; k + 1 < 5; ++k) {
            if (t.mask[k] == 1 && t.mask[k + 1] == 1) CHECK(t.target[k] <= t.target[k + 1]);
        }
        if (t.mask[5] == 1) CHECK(t.target[5] == 1.0f - t.target[4]);
        // Longer follow-up never hides a previously observed year.
        const auto longer = build_risk_target(exam(cancer, followup + rng.uniform(0.0, 3.0)));
        for (int k = 0; k < 6; ++k) CHECK(longer.mask[k] >= t.mask[k]);
    }
}

TEST_CASE("split_patients: sizes, determinism, patient level") {
    auto ten = patients(10, 1);
    auto s = split_patients(ten, {}, 0);
    std::map<Split, int> counts;
    for (const auto& [p, g] : s) counts[g]++;
    CHECK(counts[Split::Train] == 5);
    CHECK(counts[Split::Val] == 2);
    CHECK(counts[Split::Test] == 3);
    CHECK((split_patients(ten, {}, 0) == s));

    auto twice = patients(10, 2);
    auto s2 = split_patients(twice, {}, 3);
    CHECK(s2.size() == 10);
    for (int n : {1, 3, 7, 11, 23, 101}) {
        auto split = split_patients(patients(n, 1), {}, 5);
        std::map<Split, int> c;
        for (const auto& [p, g] : split) c[g]++;
        CHECK(std::abs(c[Split::Train] - 0.5 * n) <= 1.0);
        CHECK(std::abs(c[Split::Val] - 0.2 * n) <= 1.0);
        CHECK(std::abs(c[Split::Test] - 0.3 * n) <= 1.0);
    }
    CHECK_THROWS_AS(split_patients({}, {}, 0), DataError);
}

TEST_CASE("density_categories tertiles") {
    auto d = density_categories({1, 2, 3, 4, 5, 6});
    CHECK((d == std::vector<DensityLevel>{DensityLevel::Low, DensityLevel::Low, DensityLevel::Med,
                                          DensityLevel::Med, DensityLevel::High, DensityLevel::High}));
    auto eq = density_categories(std::vector<double>(7, 2.0));
    CHECK(eq[0] == DensityLevel::Low);
    CHECK(eq[6] == DensityLevel::High);

    Rng rng(4);
    std::vector<double> v(100);
    for (auto& x : v) x = rng.uniform();
    auto cats = density_categories(v);
    // Brute-force oracle: a value's group is fixed by how many values precede it.
    for (size_t i = 0; i < v.size(); ++i) {
        size_t rank = 0;
        for (size_t j = 0; j < v.size(); ++j) rank += (v[j] < v[i] || (v[j] == v[i] && j < i));
        CHECK(static_cast<int>(cats[i]) == static_cast<int>(rank * 3 / 100));
    }
    for (auto lvl : {DensityLevel::Low, DensityLevel::Med, DensityLevel::High}) {
        const auto n = std::count(cats.begin(), cats.end(), lvl);
        CHECK((n == 33 || n == 34));
    }
    CHECK_THROWS_AS(density_categories({}), DataError);
}

TEST_CASE("pair_exams pairs each exam with its latest predecessor") {
    auto recs = parse_manifest(kHeader +
                               "p1,a,L,CC,2012-01-01,a.png,,8,\n"
                               "p1,b,L,CC,2014-01-01,b.png,,6,\n"
                               "p1,c,L,CC,2013-01-01,c.png,,7,\n"
                               "p1,d,R,CC,2013-06-01,d.png,,7,\n");
    auto pairs = pair_exams(recs);
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].prior.exam_id == "a");
    CHECK(pairs[0].current.exam_id == "c");
    CHECK(pairs[1].prior.exam_id == "c");
    CHECK(pairs[1].current.exam_id == "b");
    CHECK(pairs[1].delta_t_months == doctest::Approx(365.0 / kDaysPerMonth));
    CHECK_THROWS_AS(make_pair(recs[1], recs[0]), IntegrityError);
    CHECK_THROWS_AS(make_pair(recs[0], recs[3]), IntegrityError);
}

TEST_CASE("phantom: zero deformation, determinism, fold-free ground truth") {
    phantom::PhantomSpec spec;
    spec.deform_amplitude = 0.0;
    spec.seed = 9;
    auto z = phantom::generate_phantom_pair(spec);
    CHECK(z.phi_gt.disp.abs().max().item<float>() == 0.0f);
    CHECK(z.prior.sizes() == torch::IntArrayRef({1, 256, 128}));
    // Only the intensity perturbation separates the images.
    CHECK(warpkit::ncc(z.prior, z.current).item<float>() > 0.97f);

    spec.deform_amplitude = 8.0;
    spec.deform_smoothness = 64.0;
    spec.lesion_growth = 0.8;
    auto a = phantom::generate_phantom_pair(spec);
    auto b = phantom::generate_phantom_pair(spec);
    CHECK(torch::equal(a.prior, b.prior));
    CHECK(torch::equal(a.current, b.current));
    CHECK(torch::equal(a.phi_gt.disp, b.phi_gt.disp));
    CHECK((a.label.target == b.label.target));
    CHECK(a.pair.delta_t_months == b.pair.delta_t_months);
    CHECK(a.phi_gt.max_abs() <= 8.0f);
    CHECK(a.phi_gt.max_abs() > 2.0f);
    CHECK(phantom::gradient_bound(spec) < 1.0);
    CHECK(warpkit::njd_percent(a.phi_gt.disp) == 0.0);
    CHECK(a.label.target[4] == 1.0f);

    // The ground truth aligns the prior onto the current image.
    const double before = warpkit::ncc(a.prior, a.current).item<double>();
    const double after = warpkit::ncc(warpkit::warp(a.prior, a.phi_gt.disp), a.current).item<double>();
    CHECK(after > before);
    CHECK(after > 0.95);

    for (uint64_t seed = 0; seed < 20; ++seed) {
        spec.seed = seed;
        spec.deform_smoothness = phantom::smoothness_threshold(spec) * 1.01;
        CHECK(warpkit::njd_percent(phantom::generate_phantom_pair(spec).phi_gt.disp) == 0.0);
    }
}

TEST_CASE("phantom: translation mode and label rule") {
    phantom::PhantomSpec spec;
    spec.fixed_translation = std::array<double, 2>{6.0, -4.0};
    auto p = phantom::generate_phantom_pair(spec);
    CHECK(torch::allclose(p.phi_gt.disp[0], torch::full({256, 128}, 6.0f)));
    CHECK(torch::allclose(p.phi_gt.disp[1], torch::full({256, 128}, -4.0f)));

    CHECK_FALSE(phantom::cancer_year_for_growth(0.0).has_value());
    CHECK(phantom::cancer_year_for_growth(1.0).value() == doctest::Approx(1.5));
    spec.lesion_growth = 0.0;
    CHECK(phantom::generate_phantom_pair(spec).label.target[4] == 0.0f);

    spec.height = 32;
    CHECK_THROWS_AS(phantom::generate_phantom_pair(spec), ConfigError);
}

TEST_CASE("image and field files round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "longalign_test_io";
    std::filesystem::create_directories(dir);
    auto img = torch::rand({1, 20, 12});
    io::save_image(dir / "img.png", img);
    auto back = io::load_image(dir / "img.png");
    CHECK((back - img).abs().max().item<float>() < 1e-4f);

    auto field = warpkit::DeformationField::from_tensor(torch::randn({2, 9, 7}));
    io::save_field(dir / "phi.bin", field);
    CHECK(std::filesystem::exists(dir / "phi.json"));
    CHECK(std::filesystem::file_size(dir / "phi.bin") == 2 * 9 * 7 * 4);
    auto loaded = io::load_field(dir / "phi");
    CHECK(torch::equal(loaded.disp, field.disp));
    CHECK_THROWS_AS(io::load_field(dir / "missing.bin"), DataError);
    std::filesystem::remove_all(dir);
}
