#include "app.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "longalign/errors.hpp"
#include "longalign/evalkit.hpp"
#include "longalign/io.hpp"
#include "longalign/warpkit.hpp"
#include "plots.hpp"

namespace longalign::app {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ config

namespace {

void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
    std::set<std::string> names(known.begin(), known.end());
    for (const auto& [key, _] : j.items()) {
        if (!names.count(key)) throw ConfigError("unknown " + section + " option '" + key + "'");
    }
}

template <class T>
void opt(const json& j, const char* key, T& field) {
    if (j.contains(key)) j.at(key).get_to(field);
}

void opt_path(const json& j, const char* key, std::optional<std::string>& field) {
    if (!j.contains(key)) return;
    if (j.at(key).is_null()) {
        field.reset();
    } else {
        field = j.at(key).get<std::string>();
    }
}

json nullable(const std::optional<std::string>& s) { return s ? json(*s) : json(nullptr); }

evalkit::CIndexOptions cindex_options(const EvalOptions& e) {
    evalkit::CIndexOptions o;
    o.score = e.cindex == "fixed_year" ? evalkit::CIndexScore::FixedYear : evalkit::CIndexScore::YearMatched;
    o.fixed_year = e.fixed_year;
    return o;
}

evalkit::BootstrapOptions boot_options(const ExperimentConfig& c) {
    return {c.eval.bootstrap_iterations, c.eval.level, c.seed};
}

}  // namespace

void ExperimentConfig::propagate_seed() {
    synth.seed = seed;
    reg.seed = seed;
    risk.seed = seed;
}

void ExperimentConfig::validate() const {
    synth.validate();
    reg.validate();
    risk.validate();
    riskmodel::parse_variant(variant);
    if (eval.split != "train" && eval.split != "val" && eval.split != "test") {
        throw ConfigError("eval.split must be train, val or test");
    }
    if (eval.cindex != "year_matched" && eval.cindex != "fixed_year") {
        throw ConfigError("eval.cindex must be year_matched or fixed_year");
    }
    if (eval.fixed_year < 1 || eval.fixed_year > dataman::kRiskYears) throw ConfigError("eval.fixed_year must be 1..5");
    if (eval.bootstrap_iterations <= 0) throw ConfigError("eval.bootstrap_iterations must be positive");
    if (!(eval.level > 0.0 && eval.level < 1.0)) throw ConfigError("eval.level must lie in (0, 1)");
    if (eval.batch_size <= 0) throw ConfigError("eval.batch_size must be positive");
    if (sweep.alphas.empty()) throw ConfigError("sweep.alphas must not be empty");
    for (double a : sweep.alphas) {
        if (!(a >= 0.0)) throw ConfigError("sweep.alphas must be non-negative");
    }
    if (plot.quiver_step <= 0 || plot.scale <= 0) throw ConfigError("plot.quiver_step and plot.scale must be positive");
    if (out.empty()) throw ConfigError("out must not be empty");
}

json to_json(const ExperimentConfig& c) {
    return json{{"seed", c.seed},
                {"out", c.out},
                {"dataset", nullable(c.dataset)},
                {"dataset_name", nullable(c.dataset_name)},
                {"variant", c.variant},
                {"reg_ckpt", nullable(c.reg_ckpt)},
                {"risk_ckpt", nullable(c.risk_ckpt)},
                {"resume", nullable(c.resume)},
                {"synth", json(c.synth)},
                {"reg", json(c.reg)},
                {"risk", json(c.risk)},
                {"eval",
                 {{"split", c.eval.split},
                  {"bootstrap_iterations", c.eval.bootstrap_iterations},
                  {"level", c.eval.level},
                  {"cindex", c.eval.cindex},
                  {"fixed_year", c.eval.fixed_year},
                  {"batch_size", c.eval.batch_size}}},
                {"sweep", {{"alphas", c.sweep.alphas}}},
                {"plot",
                 {{"field", nullable(c.plot.field)},
                  {"background", nullable(c.plot.background)},
                  {"strata", nullable(c.plot.strata)},
                  {"sweep", nullable(c.plot.sweep)},
                  {"quiver_step", c.plot.quiver_step},
                  {"scale", c.plot.scale}}}};
}

ExperimentConfig config_from_json(const json& j) {
    check_keys(j, "top-level",
               {"seed", "out", "dataset", "dataset_name", "variant", "reg_ckpt", "risk_ckpt", "resume", "synth", "reg",
                "risk", "eval", "sweep", "plot"});
    ExperimentConfig c;
    try {
        opt(j, "seed", c.seed);
        opt(j, "out", c.out);
        opt(j, "variant", c.variant);
        opt_path(j, "dataset", c.dataset);
        opt_path(j, "dataset_name", c.dataset_name);
        opt_path(j, "reg_ckpt", c.reg_ckpt);
        opt_path(j, "risk_ckpt", c.risk_ckpt);
        opt_path(j, "resume", c.resume);
        if (j.contains("synth")) c.synth = j.at("synth").get<cohort::CohortSpec>();
        if (j.contains("reg")) c.reg = j.at("reg").get<regnet::RegConfig>();
        if (j.contains("risk")) c.risk = j.at("risk").get<riskmodel::RiskConfig>();
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            check_keys(e, "eval", {"split", "bootstrap_iterations", "level", "cindex", "fixed_year", "batch_size"});
            opt(e, "split", c.eval.split);
            opt(e, "bootstrap_iterations", c.eval.bootstrap_iterations);
            opt(e, "level", c.eval.level);
            opt(e, "cindex", c.eval.cindex);
            opt(e, "fixed_year", c.eval.fixed_year);
            opt(e, "batch_size", c.eval.batch_size);
        }
        if (j.contains("sweep")) {
            check_keys(j.at("sweep"), "sweep", {"alphas"});
            opt(j.at("sweep"), "alphas", c.sweep.alphas);
        }
        if (j.contains("plot")) {
            const auto& p = j.at("plot");
            check_keys(p, "plot", {"field", "background", "strata", "sweep", "quiver_step", "scale"});
            opt_path(p, "field", c.plot.field);
            opt_path(p, "background", c.plot.background);
            opt_path(p, "strata", c.plot.strata);
            opt_path(p, "sweep", c.plot.sweep);
            opt(p, "quiver_step", c.plot.quiver_step);
            opt(p, "scale", c.plot.scale);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
    const auto key = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;

    json* node = &j;
    std::stringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) {
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
        path.push_back(part);
    }
    for (size_t i = 0; i + 1 < path.size(); ++i) {
        auto& next = (*node)[path[i]];
        if (next.is_null()) next = json::object();
        if (!next.is_object()) throw ConfigError("override key '" + key + "': '" + path[i] + "' is not a section");
        node = &next;
    }
    (*node)[path.back()] = std::move(value);
}

ExperimentConfig resolve_config(const std::optional<fs::path>& config_path, const std::vector<std::string>& overrides,
                                std::optional<uint64_t> seed, std::optional<std::string> out) {
    json j = json::object();
    if (config_path) {
        std::ifstream in(*config_path);
        if (!in) throw ConfigError("cannot read config " + config_path->string());
        j = json::parse(in, nullptr, false);
        if (j.is_discarded()) throw ConfigError("config " + config_path->string() + " is not valid JSON");
        if (!j.is_object()) throw ConfigError("config " + config_path->string() + " must hold a JSON object");
    }
    for (const auto& o : overrides) apply_override(j, o);
    if (seed) j["seed"] = *seed;
    if (out) j["out"] = *out;
    auto c = config_from_json(j);
    c.propagate_seed();
    c.validate();
    return c;
}

// ------------------------------------------------------------------ shared helpers

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    if (!f) throw std::runtime_error("write failed: " + path.string());
}

void write_resolved(const ExperimentConfig& c) {
    write_text(fs::path(c.out) / "resolved-config.json", to_json(c).dump(2) + "\n");
}

const fs::path& require_file(const fs::path& p) {
    if (!fs::exists(p)) throw DataError("missing input: " + p.string());
    return p;
}

std::string dataset_path(const ExperimentConfig& c) {
    if (!c.dataset) throw ConfigError("this command needs 'dataset'");
    return *c.dataset;
}

std::string dataset_name(const ExperimentConfig& c) {
    if (c.dataset_name) return *c.dataset_name;
    auto p = fs::path(dataset_path(c)).lexically_normal();
    auto name = p.filename().string();
    if (name.empty()) name = p.parent_path().filename().string();
    return name.empty() ? "dataset" : name;
}

dataman::Split eval_split(const ExperimentConfig& c) { return dataman::split_from_string(c.eval.split); }

// "reg checkpoint present iff required"; checked before anything is loaded.
void check_registration_pairing(riskmodel::VariantKind kind, const std::optional<std::string>& reg_ckpt) {
    const auto name = riskmodel::to_string(kind);
    if (riskmodel::needs_registration(kind) && !reg_ckpt) {
        throw ConfigError("variant " + name + " needs reg_ckpt (a trained registration checkpoint)");
    }
    if (!riskmodel::needs_registration(kind) && reg_ckpt) {
        throw ConfigError("variant " + name + " does not use a registration network; remove reg_ckpt");
    }
}

void save_field(const fs::path& path, const torch::Tensor& disp) {
    fs::create_directories(path.parent_path());
    io::save_field(path, warpkit::DeformationField::from_tensor(disp.detach().to(torch::kCPU)));
}

std::string read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

// Registration fields for image-level variants. With LONGALIGN_CACHE set they
// are stored per checkpoint content and exam, and reused on later runs.
void attach_registration_cached(std::vector<riskmodel::RiskSample>& samples, const fs::path& ckpt_path,
                                regnet::MammoRegNet& reg, int64_t batch_size) {
    const char* env = std::getenv("LONGALIGN_CACHE");
    if (!env || !*env) {
        riskmodel::attach_registration(samples, reg, batch_size);
        return;
    }
    std::ostringstream key;
    key << std::hex << std::hash<std::string>{}(read_bytes(ckpt_path));
    const auto dir = fs::path(env) / "phi_reg" / key.str();

    std::vector<size_t> missing;
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto f = dir / (samples[i].exam_id + ".bin");
        if (fs::exists(f)) {
            samples[i].phi_reg = io::load_field(f).disp;
        } else {
            missing.push_back(i);
        }
    }
    if (missing.empty()) return;
    std::vector<riskmodel::RiskSample> todo;
    for (size_t i : missing) todo.push_back(samples[i]);
    riskmodel::attach_registration(todo, reg, batch_size);
    for (size_t k = 0; k < missing.size(); ++k) {
        samples[missing[k]].phi_reg = todo[k].phi_reg;
        save_field(dir / (todo[k].exam_id + ".bin"), todo[k].phi_reg);
    }
}

void require_nonempty(const std::vector<riskmodel::RiskSample>& s, const std::string& split) {
    if (s.empty()) throw DataError("the " + split + " split has no pairs");
}

std::string density_csv(const std::vector<evalkit::StratumResult>& strata) {
    std::ostringstream os;
    os << "density,records,point,lo,hi,level,iterations,redraws\n";
    for (const auto& s : strata) {
        os << dataman::to_string(s.level) << ',' << s.records << ',' << evalkit::format_number(s.c_index.point) << ','
           << evalkit::format_number(s.c_index.lo) << ',' << evalkit::format_number(s.c_index.hi) << ','
           << evalkit::format_number(s.c_index.level) << ',' << s.c_index.iterations << ',' << s.c_index.redraws
           << '\n';
    }
    return os.str();
}

// Metrics, predictions, density strata and field quality of a risk model on
// the evaluation split.
void write_risk_outputs(const ExperimentConfig& c, riskmodel::RiskNet& model,
                        const std::vector<riskmodel::RiskSample>& samples) {
    const auto variant = riskmodel::to_string(model->kind());
    const fs::path out(c.out);
    torch::Tensor phi_feat;
    auto records = riskmodel::predict(model, samples, &phi_feat, c.eval.batch_size);
    const auto boot = boot_options(c);
    const auto cidx = cindex_options(c.eval);

    const evalkit::MetricsFileInfo info{variant, dataset_name(c), c.seed};
    const auto csv = evalkit::write_metrics(out, info, evalkit::risk_metrics(records, boot, cidx));
    write_text(out / (info.stem() + ".predictions.csv"), evalkit::predictions_csv(records, variant, c.seed));

    const auto strata = evalkit::stratified_report(records, boot, cidx);
    write_text(out / (info.stem() + ".density.csv"), density_csv(strata));
    write_text(out / (info.stem() + ".density.json"), evalkit::to_json(strata).dump(2) + "\n");

    json fields{{"variant", variant}, {"samples", samples.size()}};
    fields["feature_njd_percent"] = nullptr;
    fields["image_njd_percent"] = nullptr;
    if (phi_feat.defined()) {
        fields["feature_njd_percent"] = warpkit::njd_percent(phi_feat);
        fields["feature_grid"] = {phi_feat.size(2), phi_feat.size(3)};
        save_field(out / "fields" / (samples.front().exam_id + "_feat.bin"), phi_feat[0]);
    }
    if (!samples.empty() && samples.front().phi_reg.defined()) {
        std::vector<torch::Tensor> regs;
        for (const auto& s : samples) regs.push_back(s.phi_reg);
        fields["image_njd_percent"] = warpkit::njd_percent(torch::stack(regs));
        save_field(out / "fields" / (samples.front().exam_id + "_reg.bin"), samples.front().phi_reg);
    }
    write_text(out / (info.stem() + ".fields.json"), fields.dump(2) + "\n");
    std::cerr << "metrics: " << csv.string() << "\n";
}

void write_registration_outputs(const ExperimentConfig& c, const regnet::RegCheckpoint& ckpt,
                                const std::vector<evalkit::RegEvalPair>& pairs) {
    const fs::path out(c.out);
    auto report = evalkit::registration_report(ckpt, pairs, c.eval.batch_size, boot_options(c));
    write_text(out / "registration_report.json", evalkit::to_json(report).dump(2) + "\n");
    write_text(out / "registration_report.csv", evalkit::registration_csv(report));
    auto first = regnet::register_pair(ckpt, pairs.front().current, pairs.front().prior);
    save_field(out / "fields" / (pairs.front().id + "_reg.bin"), first.phi_final[0]);
    std::cerr << "registration: ncc " << report.ncc_before << " -> " << report.ncc_affine << " -> " << report.ncc_final
              << ", njd " << report.njd_percent << "%\n";
}

std::vector<riskmodel::RiskSample> load_samples(const cohort::Dataset& ds, dataman::Split split) {
    return cohort::risk_samples(ds, split);
}

std::string risk_log_csv(const std::vector<riskmodel::RiskEpochLog>& history) {
    std::ostringstream os;
    os << "epoch,train_loss,val_cindex,val_defined,learning_rate\n";
    for (const auto& h : history) {
        os << h.epoch << ',' << evalkit::format_number(h.train_loss) << ',' << evalkit::format_number(h.val_cindex)
           << ',' << (h.val_defined ? 1 : 0) << ',' << h.learning_rate << '\n';
    }
    return os.str();
}

struct RiskData {
    std::vector<riskmodel::RiskSample> train, val, eval;
};

RiskData prepare_risk_data(const ExperimentConfig& c, riskmodel::VariantKind kind) {
    auto ds = cohort::load_dataset(dataset_path(c));
    RiskData d{load_samples(ds, dataman::Split::Train), load_samples(ds, dataman::Split::Val),
               load_samples(ds, eval_split(c))};
    require_nonempty(d.train, "train");
    require_nonempty(d.val, "val");
    require_nonempty(d.eval, c.eval.split);
    if (riskmodel::needs_registration(kind)) {
        const fs::path ckpt_path = require_file(*c.reg_ckpt);
        auto reg = regnet::RegCheckpoint::load(ckpt_path.string()).build();
        for (auto* part : {&d.train, &d.val, &d.eval}) {
            attach_registration_cached(*part, ckpt_path, reg, c.eval.batch_size);
        }
    }
    return d;
}

riskmodel::RiskTrainOptions progress() {
    riskmodel::RiskTrainOptions o;
    o.on_epoch = [](const riskmodel::RiskEpochLog& e) {
        std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << " val_cindex " << e.val_cindex
                  << (e.val_defined ? "" : " (undefined)") << "\n";
    };
    return o;
}

}  // namespace

// ------------------------------------------------------------------ commands

int cmd_synth(const ExperimentConfig& c) {
    write_resolved(c);
    cohort::write_cohort(c.out, c.synth);
    std::cerr << "wrote " << c.synth.n_patients << " patients to " << c.out << "\n";
    return kOk;
}

int cmd_train_reg(const ExperimentConfig& c) {
    const auto path = dataset_path(c);
    write_resolved(c);
    auto ds = cohort::load_dataset(path);
    auto train = cohort::registration_pairs(ds, dataman::Split::Train);
    auto val = cohort::registration_pairs(ds, dataman::Split::Val);
    if (train.empty() || val.empty()) throw DataError("registration needs train and val pairs");

    std::optional<regnet::RegCheckpoint> resume;
    regnet::TrainOptions options;
    if (c.resume) {
        resume = regnet::RegCheckpoint::load(require_file(*c.resume).string());
        options.resume = &*resume;
    }
    options.on_epoch = [](const regnet::EpochLog& e) {
        std::cerr << "epoch " << e.epoch << " loss " << e.train_loss << " val_ncc " << e.val_ncc << "\n";
    };
    auto result = regnet::train_registration(train, val, c.reg, options);

    const fs::path out(c.out);
    result.best.save((out / "reg_best.lalg").string());
    result.last.save((out / "reg_last.lalg").string());
    std::ostringstream log;
    log << "epoch,train_loss,val_ncc\n";
    for (const auto& h : result.history) {
        log << h.epoch << ',' << evalkit::format_number(h.train_loss) << ',' << evalkit::format_number(h.val_ncc)
            << '\n';
    }
    write_text(out / "reg_log.csv", log.str());

    auto pairs = cohort::registration_eval_pairs(ds, eval_split(c));
    if (pairs.empty()) {
        std::cerr << "warning: the " << c.eval.split << " split has no pairs; no registration report\n";
    } else {
        write_registration_outputs(c, result.best, pairs);
    }
    return kOk;
}

int cmd_train_risk(const ExperimentConfig& c) {
    const auto kind = riskmodel::parse_variant(c.variant);
    check_registration_pairing(kind, c.reg_ckpt);
    dataset_path(c);
    write_resolved(c);
    auto data = prepare_risk_data(c, kind);

    auto result = riskmodel::train_risk(data.train, data.val, kind, c.risk, progress());
    const fs::path out(c.out);
    result.best.save((out / "risk_best.lalg").string());
    write_text(out / "risk_log.csv", risk_log_csv(result.history));

    auto model = result.best.build();
    write_risk_outputs(c, model, data.eval);
    return kOk;
}

int cmd_evaluate(const ExperimentConfig& c) {
    if (c.risk_ckpt) {
        auto ckpt = riskmodel::RiskCheckpoint::load(require_file(*c.risk_ckpt).string());
        check_registration_pairing(ckpt.kind, c.reg_ckpt);
        dataset_path(c);
        write_resolved(c);
        auto ds = cohort::load_dataset(dataset_path(c));
        auto samples = load_samples(ds, eval_split(c));
        require_nonempty(samples, c.eval.split);
        if (riskmodel::needs_registration(ckpt.kind)) {
            const fs::path reg_path = require_file(*c.reg_ckpt);
            auto reg = regnet::RegCheckpoint::load(reg_path.string()).build();
            attach_registration_cached(samples, reg_path, reg, c.eval.batch_size);
        }
        auto model = ckpt.build();
        write_risk_outputs(c, model, samples);
        return kOk;
    }
    if (c.reg_ckpt) {
        auto ckpt = regnet::RegCheckpoint::load(require_file(*c.reg_ckpt).string());
        dataset_path(c);
        write_resolved(c);
        auto pairs = cohort::registration_eval_pairs(cohort::load_dataset(dataset_path(c)), eval_split(c));
        if (pairs.empty()) throw DataError("the " + c.eval.split + " split has no pairs");
        write_registration_outputs(c, ckpt, pairs);
        return kOk;
    }
    throw ConfigError("evaluate needs risk_ckpt or reg_ckpt");
}

int cmd_sweep(const ExperimentConfig& c) {
    const auto kind = riskmodel::parse_variant(c.variant);
    if (!riskmodel::learns_alignment(kind)) {
        throw ConfigError("sweep varies the feature-alignment weight; variant must be FeatAlign or FeatAlignReg");
    }
    check_registration_pairing(kind, c.reg_ckpt);
    dataset_path(c);
    write_resolved(c);
    auto data = prepare_risk_data(c, kind);

    auto train_fn = [&](double alpha) {
        auto config = c.risk;
        config.alpha = alpha;
        std::cerr << "alpha " << alpha << "\n";
        auto result = riskmodel::train_risk(data.train, data.val, kind, config, progress());
        auto model = result.best.build();
        evalkit::SweepOutcome o;
        o.records = riskmodel::predict(model, data.eval, &o.phi_feat, c.eval.batch_size);
        return o;
    };
    auto rows = evalkit::weight_sweep(train_fn, c.sweep.alphas, cindex_options(c.eval));
    write_text(fs::path(c.out) / "sweep.csv", evalkit::sweep_csv(rows));
    write_text(fs::path(c.out) / "sweep.json", evalkit::to_json(rows).dump(2) + "\n");
    return kOk;
}

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::string& expected_header) {
    std::ifstream in(require_file(path));
    std::string line;
    if (!std::getline(in, line) || line.rfind(expected_header, 0) != 0) {
        throw FormatError(path.string() + ": expected header '" + expected_header + "'", 1);
    }
    std::vector<std::vector<std::string>> rows;
    long n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
        if (rows.back().size() < 2) throw FormatError(path.string() + ": too few columns", n);
    }
    return rows;
}

double number(const std::string& s, const fs::path& path) {
    try {
        return std::stod(s);
    } catch (const std::exception&) {
        throw FormatError(path.string() + ": '" + s + "' is not a number");
    }
}

}  // namespace

int cmd_plot(const ExperimentConfig& c) {
    const auto& p = c.plot;
    if (!p.field && !p.strata && !p.sweep) throw ConfigError("plot needs plot.field, plot.strata or plot.sweep");
    // Every input is checked before anything is drawn.
    for (const auto* input : {&p.field, &p.background, &p.strata, &p.sweep}) {
        if (*input) require_file(**input);
    }
    write_resolved(c);
    const fs::path out(c.out);

    if (p.field) {
        auto disp = io::load_field(*p.field).disp;
        torch::Tensor background;
        if (p.background) background = io::load_image(*p.background);
        const auto stem = fs::path(*p.field).stem().string();
        plots::save_png(out / (stem + "_quiver.png"), plots::quiver(disp, background, p.quiver_step, p.scale));
        plots::save_png(out / (stem + "_jacobian.png"), plots::jacobian_map(disp));
    }
    if (p.strata) {
        std::vector<plots::Bar> bars;
        for (const auto& row : read_csv(*p.strata, "density,records,point,lo,hi")) {
            if (row.size() < 5) throw FormatError(*p.strata + ": too few columns");
            bars.push_back({row[0], number(row[2], *p.strata), number(row[3], *p.strata), number(row[4], *p.strata)});
        }
        plots::save_png(out / "density_cindex.png", plots::bar_chart(bars, "C-index by breast density"));
    }
    if (p.sweep) {
        std::vector<double> alphas;
        std::vector<plots::Series> auc(dataman::kRiskYears);
        plots::Series cindex{"C-index", {}}, njd{"NJD %", {}};
        for (int y = 0; y < dataman::kRiskYears; ++y) auc[y].label = std::to_string(y + 1) + "-year AUC";
        for (const auto& row : read_csv(*p.sweep, evalkit::kSweepHeader)) {
            if (row.size() != 8) throw FormatError(*p.sweep + ": expected 8 columns");
            alphas.push_back(number(row[0], *p.sweep));
            cindex.y.push_back(number(row[1], *p.sweep));
            for (int y = 0; y < dataman::kRiskYears; ++y) auc[y].y.push_back(number(row[2 + y], *p.sweep));
            njd.y.push_back(number(row[7], *p.sweep));
        }
        plots::save_png(out / "alpha_cindex.png", plots::line_chart(alphas, {cindex}, "C-index by weighting", "alpha"));
        plots::save_png(out / "alpha_auc.png", plots::line_chart(alphas, auc, "AUC by weighting", "alpha"));
        plots::save_png(out / "alpha_njd.png", plots::line_chart(alphas, {njd}, "Feature-field NJD by weighting", "alpha"));
    }
    return kOk;
}

// ------------------------------------------------------------------ entry point

int main(const std::vector<std::string>& args) {
    CLI::App cli{"Longitudinal mammogram alignment and risk prediction experiments"};
    cli.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    uint64_t seed = 0;
    std::string out;
    std::map<std::string, std::function<int(const ExperimentConfig&)>> commands{
        {"synth", cmd_synth},       {"train-reg", cmd_train_reg}, {"train-risk", cmd_train_risk},
        {"evaluate", cmd_evaluate}, {"plot", cmd_plot},           {"sweep", cmd_sweep}};
    const std::map<std::string, std::string> help{
        {"synth", "Write a synthetic phantom cohort"},
        {"train-reg", "Train the registration network"},
        {"train-risk", "Train and evaluate one risk-model variant"},
        {"evaluate", "Evaluate a risk or registration checkpoint"},
        {"plot", "Render quiver, Jacobian, density and weighting figures"},
        {"sweep", "Train one model per alignment weight"}};
    std::map<std::string, CLI::Option*> seed_opts, out_opts, config_opts;
    for (const auto& [name, _] : commands) {
        auto* sub = cli.add_subcommand(name, help.at(name));
        config_opts[name] = sub->add_option("--config", config_path, "JSON config file");
        seed_opts[name] = sub->add_option("--seed", seed, "Seed for every random stream");
        out_opts[name] = sub->add_option("--out", out, "Output directory");
        sub->add_option("--override", overrides, "KEY=VALUE with a dotted key; repeatable")->allow_extra_args(false);
    }

    std::vector<std::string> argv_rev(args.rbegin(), args.rend() - 1);
    try {
        cli.parse(argv_rev);
    } catch (const CLI::ParseError& e) {
        const int code = cli.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    const auto* sub = cli.get_subcommands().front();
    const auto name = sub->get_name();
    try {
        auto config = resolve_config(
            config_opts[name]->count() ? std::optional<fs::path>(config_path) : std::nullopt, overrides,
            seed_opts[name]->count() ? std::optional<uint64_t>(seed) : std::nullopt,
            out_opts[name]->count() ? std::optional<std::string>(out) : std::nullopt);
        return commands.at(name)(config);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kConfigError;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataError;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
}

int main(int argc, const char* const* argv) { return main(std::vector<std::string>(argv, argv + argc)); }

}  // namespace longalign::app
