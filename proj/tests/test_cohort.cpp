#include "doctest_torch.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "longalign/cohort.hpp"
#include "longalign/errors.hpp"
#include "longalign/warpkit.hpp"

using namespace longalign;
namespace fs = std::filesystem;

namespace {

cohort::CohortSpec small(int n, uint64_t seed = 1) {
    cohort::CohortSpec s;
    s.n_patients = n;
    s.height = 128;
    s.width = 64;
    s.deform_amplitude = 3.0;
    s.deform_smoothness = 32.0;
    s.seed = seed;
    return s;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("longalign_cohort_" + name);
    fs::remove_all(p);
    return p;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::ifstream f(e.path(), std::ios::binary);
        std::ostringstream os;
        os << f.rdbuf();
        out[fs::relative(e.path(), dir).string()] = os.str();
    }
    return out;
}

}  // namespace

TEST_CASE("cohort generation is a function of the spec") {
    auto a = cohort::generate_cohort(small(3));
    auto b = cohort::generate_cohort(small(3));
    auto c = cohort::generate_cohort(small(3, 2));
    REQUIRE(a.size() == 3);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(torch::equal(a[i].current, b[i].current));
        CHECK(torch::equal(a[i].phi_gt.disp, b[i].phi_gt.disp));
        CHECK(a[i].pair.current.exam_id == b[i].pair.current.exam_id);
    }
    CHECK_FALSE(torch::equal(a[0].current, c[0].current));
    CHECK(a[1].pair.prior.patient_id == "P0001");
    CHECK(a[1].pair.prior.exam_id == "P0001-e0");
    CHECK(a[1].pair.current.exam_id == "P0001-e1");
}

TEST_CASE("an empty cohort is a configuration error") {
    CHECK_THROWS_AS(cohort::generate_cohort(small(0)), ConfigError);
    auto bad = small(2);
    bad.case_fraction = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(nlohmann::json::parse(R"({"n_patients": 2, "colour": 1})").get<cohort::CohortSpec>(), ConfigError);
}

TEST_CASE("spec JSON round trip") {
    auto s = small(7, 9);
    s.ratios = {3, 1, 1};
    auto back = nlohmann::json(s).get<cohort::CohortSpec>();
    CHECK(nlohmann::json(back) == nlohmann::json(s));
}

TEST_CASE("writing a cohort is deterministic and idempotent") {
    const auto a = scratch("a"), b = scratch("b");
    cohort::write_cohort(a, small(10));
    cohort::write_cohort(b, small(10));
    const auto first = snapshot(a);
    CHECK(first == snapshot(b));
    cohort::write_cohort(a, small(10));
    CHECK(first == snapshot(a));
    CHECK(first.count("manifest.csv") == 1);
    CHECK(first.count("splits.csv") == 1);
    CHECK(first.count("fields/P0009-e1.bin") == 1);
    CHECK(first.count("fields/P0009-e1.json") == 1);
    CHECK(first.count("images/P0009-e0.png") == 1);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("a written cohort loads back into pairs, splits and samples") {
    const auto dir = scratch("load");
    cohort::write_cohort(dir, small(10));
    auto ds = cohort::load_dataset(dir);
    REQUIRE(ds.pairs.size() == 10);

    // Every patient sits in exactly one split; 5:2:3 over ten patients.
    std::map<dataman::Split, std::set<std::string>> by_split;
    for (const auto& e : ds.pairs) by_split[e.split].insert(e.pair.current.patient_id);
    CHECK(by_split[dataman::Split::Train].size() == 5);
    CHECK(by_split[dataman::Split::Val].size() == 2);
    CHECK(by_split[dataman::Split::Test].size() == 3);

    int with_density = 0;
    for (const auto& e : ds.pairs) with_density += e.density.has_value();
    CHECK(with_density == 10);

    auto reg = cohort::registration_eval_pairs(ds, dataman::Split::Test);
    REQUIRE(reg.size() == 3);
    for (const auto& p : reg) {
        REQUIRE(p.phi_gt.defined());
        REQUIRE(p.foreground.defined());
        // The stored field registers the prior onto the current image.
        const double before = warpkit::ncc(p.prior, p.current).item<double>();
        const double after = warpkit::ncc(warpkit::warp(p.prior, p.phi_gt), p.current).item<double>();
        CHECK(after > before);
    }

    auto samples = cohort::risk_samples(ds, dataman::Split::Train);
    REQUIRE(samples.size() == 5);
    for (const auto& s : samples) {
        CHECK(s.delta_t_months > 0.0);
        CHECK(s.current.sizes() == std::vector<int64_t>{1, 128, 64});
        const auto* entry = &ds.pairs.front();
        for (const auto& e : ds.pairs) {
            if (e.pair.current.exam_id == s.exam_id) entry = &e;
        }
        const auto expected = dataman::build_risk_target(entry->pair.current);
        CHECK(s.target.target == expected.target);
        CHECK(s.target.mask == expected.mask);
    }
    fs::remove_all(dir);
}

TEST_CASE("loading reports missing files and unassigned patients") {
    const auto dir = scratch("broken");
    CHECK_THROWS_AS(cohort::load_dataset(dir), DataError);
    cohort::write_cohort(dir, small(4));
    {
        std::ofstream f(dir / "splits.csv");
        f << "patient_id,split\nP0000,train\n";
    }
    CHECK_THROWS_AS(cohort::load_dataset(dir), DataError);
    fs::remove_all(dir);
}
