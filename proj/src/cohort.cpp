#include "longalign/cohort.hpp"

#include <cstdio>
#include <fstream>
#include <map>

#include "longalign/errors.hpp"
#include "longalign/io.hpp"
#include "longalign/rng.hpp"

namespace longalign::cohort {

namespace fs = std::filesystem;
using dataman::DensityLevel;

void CohortSpec::validate() const {
    if (n_patients <= 0) throw ConfigError("n_patients must be positive");
    if (!(case_fraction >= 0.0 && case_fraction <= 1.0)) throw ConfigError("case_fraction must lie in [0, 1]");
    if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 || ratios.train + ratios.val + ratios.test == 0) {
        throw ConfigError("split ratios must be non-negative and not all zero");
    }
    phantom::PhantomSpec p;
    p.height = height;
    p.width = width;
    p.deform_amplitude = deform_amplitude;
    p.deform_smoothness = deform_smoothness;
    try {
        p.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

void to_json(nlohmann::json& j, const CohortSpec& c) {
    j = nlohmann::json{{"n_patients", c.n_patients},
                       {"height", c.height},
                       {"width", c.width},
                       {"deform_amplitude", c.deform_amplitude},
                       {"deform_smoothness", c.deform_smoothness},
                       {"case_fraction", c.case_fraction},
                       {"ratios", {c.ratios.train, c.ratios.val, c.ratios.test}},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, CohortSpec& c) {
    static const char* known[] = {"n_patients",        "height",        "width",  "deform_amplitude",
                                  "deform_smoothness", "case_fraction", "ratios", "seed"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
            throw ConfigError("unknown synth option '" + key + "'");
        }
    }
    try {
        auto opt = [&](const char* k, auto& field) {
            if (j.contains(k)) j.at(k).get_to(field);
        };
        opt("n_patients", c.n_patients);
        opt("height", c.height);
        opt("width", c.width);
        opt("deform_amplitude", c.deform_amplitude);
        opt("deform_smoothness", c.deform_smoothness);
        opt("case_fraction", c.case_fraction);
        opt("seed", c.seed);
        if (j.contains("ratios")) {
            auto r = j.at("ratios").get<std::vector<int>>();
            if (r.size() != 3) throw ConfigError("ratios must list train, val and test weights");
            c.ratios = {r[0], r[1], r[2]};
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synth config: ") + e.what());
    }
}

namespace {

std::string patient_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "P%04d", i);
    return buf;
}

}  // namespace

std::vector<phantom::PhantomPair> generate_cohort(const CohortSpec& spec) {
    spec.validate();
    std::vector<phantom::PhantomPair> out;
    for (int i = 0; i < spec.n_patients; ++i) {
        Rng rng(derive_seed(spec.seed, static_cast<uint64_t>(i)));
        phantom::PhantomSpec p;
        p.height = spec.height;
        p.width = spec.width;
        p.deform_amplitude = spec.deform_amplitude;
        p.deform_smoothness = spec.deform_smoothness;
        p.density_level = static_cast<DensityLevel>(rng.index(3));
        const bool cancer = rng.uniform() < spec.case_fraction;
        const double growth = rng.uniform();
        p.lesion_growth = cancer ? 0.15 + 1.1 * growth : 0.05 * growth;
        p.seed = rng.next();
        auto pair = phantom::generate_phantom_pair(p);

        const auto pid = patient_name(i);
        for (auto* exam : {&pair.pair.prior, &pair.pair.current}) {
            exam->patient_id = pid;
            exam->exam_id = pid + (exam == &pair.pair.prior ? "-e0" : "-e1");
            exam->image_path = fs::path("images") / (exam->exam_id + ".png");
        }
        out.push_back(std::move(pair));
    }
    return out;
}

void write_cohort(const fs::path& dir, const CohortSpec& spec) {
    auto pairs = generate_cohort(spec);
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "fields");
    std::vector<dataman::ExamRecord> records;
    for (const auto& p : pairs) {
        io::save_image(dir / p.pair.prior.image_path, p.prior);
        io::save_image(dir / p.pair.current.image_path, p.current);
        io::save_field(dir / "fields" / (p.pair.current.exam_id + ".bin"), p.phi_gt);
        io::save_image(dir / "fields" / (p.pair.current.exam_id + "_fg.png"), p.foreground);
        records.push_back(p.pair.prior);
        records.push_back(p.pair.current);
    }
    dataman::save_manifest(dir / "manifest.csv", records);
    dataman::save_splits(dir / "splits.csv", dataman::split_patients(records, spec.ratios, spec.seed));
    std::ofstream(dir / "cohort.json") << nlohmann::json(spec).dump(2) << "\n";
}

Dataset load_dataset(const fs::path& dir) {
    for (const char* f : {"manifest.csv", "splits.csv"}) {
        if (!fs::exists(dir / f)) throw DataError("dataset " + dir.string() + " has no " + f);
    }
    Dataset ds;
    ds.root = dir;
    auto records = dataman::load_manifest(dir / "manifest.csv");
    auto splits = dataman::load_splits(dir / "splits.csv");

    std::vector<double> values;
    std::vector<std::string> ids;
    for (const auto& r : records) {
        if (r.density_value) {
            values.push_back(*r.density_value);
            ids.push_back(r.patient_id + "/" + r.exam_id);
        }
    }
    std::map<std::string, DensityLevel> density;
    if (!values.empty()) {
        auto cats = dataman::density_categories(values);
        for (size_t i = 0; i < ids.size(); ++i) density[ids[i]] = cats[i];
    }

    for (auto& pair : dataman::pair_exams(records)) {
        auto it = splits.find(pair.current.patient_id);
        if (it == splits.end()) throw DataError("patient " + pair.current.patient_id + " is missing from splits.csv");
        PairEntry e;
        e.split = it->second;
        if (auto d = density.find(pair.current.patient_id + "/" + pair.current.exam_id); d != density.end()) {
            e.density = d->second;
        }
        e.pair = std::move(pair);
        ds.pairs.push_back(std::move(e));
    }
    if (ds.pairs.empty()) throw DataError("dataset " + dir.string() + " has no prior/current pairs");
    return ds;
}

std::vector<const PairEntry*> select(const Dataset& ds, dataman::Split split) {
    std::vector<const PairEntry*> out;
    for (const auto& e : ds.pairs) {
        if (e.split == split) out.push_back(&e);
    }
    return out;
}

namespace {

torch::Tensor load(const Dataset& ds, const fs::path& p) {
    const auto path = p.is_absolute() ? p : ds.root / p;
    if (!fs::exists(path)) throw DataError("missing image " + path.string());
    return io::load_image(path);
}

}  // namespace

std::vector<regnet::ImagePair> registration_pairs(const Dataset& ds, dataman::Split split) {
    std::vector<regnet::ImagePair> out;
    for (const auto* e : select(ds, split)) {
        out.push_back({load(ds, e->pair.current.image_path), load(ds, e->pair.prior.image_path)});
    }
    return out;
}

std::vector<evalkit::RegEvalPair> registration_eval_pairs(const Dataset& ds, dataman::Split split) {
    std::vector<evalkit::RegEvalPair> out;
    for (const auto* e : select(ds, split)) {
        evalkit::RegEvalPair p;
        p.id = e->pair.current.exam_id;
        p.current = load(ds, e->pair.current.image_path);
        p.prior = load(ds, e->pair.prior.image_path);
        const auto field = ds.root / "fields" / (p.id + ".bin");
        if (fs::exists(field)) {
            p.phi_gt = io::load_field(field).disp;
            const auto mask = ds.root / "fields" / (p.id + "_fg.png");
            if (fs::exists(mask)) p.foreground = (io::load_image(mask) > 0.5).to(torch::kFloat32);
        }
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<riskmodel::RiskSample> risk_samples(const Dataset& ds, dataman::Split split) {
    std::vector<riskmodel::RiskSample> out;
    for (const auto* e : select(ds, split)) {
        riskmodel::RiskSample s;
        s.exam_id = e->pair.current.exam_id;
        s.patient_id = e->pair.current.patient_id;
        s.current = load(ds, e->pair.current.image_path);
        s.prior = load(ds, e->pair.prior.image_path);
        s.delta_t_months = e->pair.delta_t_months;
        s.target = dataman::build_risk_target(e->pair.current);
        s.density_category = e->density;
        s.event_time = e->pair.current.cancer_year;
        s.followup_years = e->pair.current.followup_years;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace longalign::cohort
