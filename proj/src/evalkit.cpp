#include "longalign/evalkit.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "longalign/errors.hpp"
#include "longalign/warpkit.hpp"

namespace longalign::evalkit {

using torch::Tensor;

double endpoint_error(const Tensor& phi, const Tensor& reference, const Tensor& mask) {
    auto a = phi.dim() == 4 ? phi.squeeze(0) : phi;
    auto b = reference.dim() == 4 ? reference.squeeze(0) : reference;
    if (a.sizes() != b.sizes() || a.dim() != 3 || a.size(0) != 2) {
        throw DataError("endpoint_error: fields must share a (2, H, W) shape");
    }
    auto dist = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).sum(0).sqrt();
    if (!mask.defined()) return dist.mean().item<double>();
    auto m = (mask.dim() == 3 ? mask.squeeze(0) : mask).to(torch::kFloat64);
    if (m.sizes() != dist.sizes()) throw DataError("endpoint_error: mask shape mismatch");
    const double n = m.sum().item<double>();
    if (n <= 0) throw DataError("endpoint_error: empty mask");
    return (dist * m).sum().item<double>() / n;
}

RegReport registration_report(regnet::MammoRegNet& model, const std::vector<RegEvalPair>& pairs,
                              int64_t batch_size, BootstrapOptions boot) {
    if (pairs.empty()) throw DataError("registration_report: no pairs");
    RegReport rep;
    double negative = 0.0, total = 0.0, epe_sum = 0.0;
    bool all_epe = true;
    for (size_t from = 0; from < pairs.size(); from += static_cast<size_t>(batch_size)) {
        const size_t to = std::min(pairs.size(), from + static_cast<size_t>(batch_size));
        std::vector<Tensor> cur, pri;
        for (size_t i = from; i < to; ++i) {
            cur.push_back(pairs[i].current);
            pri.push_back(pairs[i].prior);
        }
        auto c = torch::stack(cur).to(torch::kFloat32);
        auto p = torch::stack(pri).to(torch::kFloat32);
        auto out = regnet::register_pair(model, c, p);
        auto before = warpkit::ncc_batch(p, c);
        auto affine = warpkit::ncc_batch(out.warped_affine, c);
        auto final_ = warpkit::ncc_batch(out.warped_final, c);
        auto det = warpkit::jacobian_det(out.phi_final);
        for (size_t i = from; i < to; ++i) {
            const auto b = static_cast<int64_t>(i - from);
            RegPairReport r;
            r.id = pairs[i].id;
            r.ncc_before = before[b].item<double>();
            r.ncc_affine = affine[b].item<double>();
            r.ncc_final = final_[b].item<double>();
            r.njd_percent = warpkit::njd_percent(out.phi_final[b]);
            negative += (det[b] < 0).sum().item<double>();
            total += static_cast<double>(det[b].numel());
            if (pairs[i].phi_gt.defined()) {
                r.epe = endpoint_error(out.phi_final[b], pairs[i].phi_gt, pairs[i].foreground);
                epe_sum += *r.epe;
            } else {
                all_epe = false;
            }
            rep.ncc_before += r.ncc_before;
            rep.ncc_affine += r.ncc_affine;
            rep.ncc_final += r.ncc_final;
            rep.pairs.push_back(std::move(r));
        }
    }
    const double n = static_cast<double>(pairs.size());
    rep.ncc_before /= n;
    rep.ncc_affine /= n;
    rep.ncc_final /= n;
    rep.njd_percent = 100.0 * negative / total;
    if (all_epe) rep.epe = epe_sum / n;

    auto ci = [&](auto field) {
        std::vector<double> v;
        for (const auto& r : rep.pairs) v.push_back(field(r));
        return bootstrap_mean_ci(v, boot.iterations, boot.level, boot.seed);
    };
    rep.ci_before = ci([](const RegPairReport& r) { return r.ncc_before; });
    rep.ci_affine = ci([](const RegPairReport& r) { return r.ncc_affine; });
    rep.ci_final = ci([](const RegPairReport& r) { return r.ncc_final; });
    rep.ci_njd = ci([](const RegPairReport& r) { return r.njd_percent; });
    if (all_epe) rep.ci_epe = ci([](const RegPairReport& r) { return *r.epe; });
    return rep;
}

RegReport registration_report(const regnet::RegCheckpoint& ckpt, const std::vector<RegEvalPair>& pairs,
                              int64_t batch_size, BootstrapOptions boot) {
    auto model = ckpt.build();
    return registration_report(model, pairs, batch_size, boot);
}

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

namespace {

nlohmann::json ci_json(const CIResult& c) {
    return {{"point", c.point}, {"lo", c.lo}, {"hi", c.hi}, {"level", c.level}, {"iterations", c.iterations},
            {"redraws", c.redraws}};
}

nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

nlohmann::json to_json(const RegReport& r) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& p : r.pairs) {
        nlohmann::json j = {{"pair_id", p.id},
                            {"ncc_before", p.ncc_before},
                            {"ncc_affine", p.ncc_affine},
                            {"ncc_final", p.ncc_final},
                            {"njd_percent", p.njd_percent}};
        if (p.epe) j["epe"] = *p.epe;
        pairs.push_back(j);
    }
    nlohmann::json summary = {{"ncc_before", ci_json(r.ci_before)},
                              {"ncc_affine", ci_json(r.ci_affine)},
                              {"ncc_final", ci_json(r.ci_final)},
                              {"njd_percent", ci_json(r.ci_njd)}};
    summary["njd_percent"]["point"] = r.njd_percent;  // pooled over pixels
    if (r.ci_epe) summary["epe"] = ci_json(*r.ci_epe);
    return {{"summary", summary}, {"bootstrap_unit", "pair"}, {"pairs", pairs}};
}

std::string registration_csv(const RegReport& r) {
    std::ostringstream os;
    os << "metric,point,lo,hi\n";
    auto row = [&](const char* name, double point, const CIResult& c) {
        os << name << ',' << format_number(point) << ',' << format_number(c.lo) << ',' << format_number(c.hi) << '\n';
    };
    row("ncc_before", r.ncc_before, r.ci_before);
    row("ncc_affine", r.ncc_affine, r.ci_affine);
    row("ncc_final", r.ncc_final, r.ci_final);
    row("njd_percent", r.njd_percent, r.ci_njd);
    if (r.epe && r.ci_epe) row("epe", *r.epe, *r.ci_epe);
    return os.str();
}

// ---------------------------------------------------------------- risk metrics

std::vector<MetricRow> risk_metrics(const std::vector<EvalRecord>& records, BootstrapOptions boot,
                                    CIndexOptions cindex) {
    std::vector<MetricRow> rows;
    auto add = [&](std::string name, const Metric& m) {
        MetricRow row{std::move(name), std::nullopt};
        try {
            row.ci = bootstrap_ci(m, records, boot.iterations, boot.level, boot.seed);
        } catch (const UndefinedMetric& e) {
            std::cerr << "warning: " << row.metric << " undefined: " << e.what() << "\n";
        }
        rows.push_back(std::move(row));
    };
    add("c_index", [cindex](std::span<const EvalRecord> r) { return c_index(r, cindex); });
    for (int k = 1; k <= dataman::kRiskYears; ++k) {
        add("auc_" + std::to_string(k), [k](std::span<const EvalRecord> r) { return auc_year(r, k); });
    }
    return rows;
}

std::string MetricsFileInfo::stem() const { return variant + "_" + dataset + "_" + std::to_string(seed); }

std::string metrics_csv(const MetricsFileInfo& info, const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        os << info.variant << ',' << info.dataset << ',' << info.seed << ',' << r.metric << ',';
        if (r.ci) {
            os << format_number(r.ci->point) << ',' << format_number(r.ci->lo) << ',' << format_number(r.ci->hi) << ','
               << format_number(r.ci->level) << ',' << r.ci->iterations << ',' << r.ci->redraws;
        } else {
            os << "nan,nan,nan,,,";
        }
        os << '\n';
    }
    return os.str();
}

nlohmann::json metrics_json(const MetricsFileInfo& info, const std::vector<MetricRow>& rows) {
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& r : rows) metrics[r.metric] = r.ci ? ci_json(*r.ci) : nlohmann::json(nullptr);
    return {{"variant", info.variant},
            {"dataset", info.dataset},
            {"seed", info.seed},
            {"bootstrap_unit", "exam"},
            {"metrics", metrics}};
}

std::filesystem::path write_metrics(const std::filesystem::path& dir, const MetricsFileInfo& info,
                                    const std::vector<MetricRow>& rows) {
    std::filesystem::create_directories(dir);
    auto csv = dir / (info.stem() + ".metrics.csv");
    write_text(csv, metrics_csv(info, rows));
    write_text(dir / (info.stem() + ".metrics.json"), metrics_json(info, rows).dump(2) + "\n");
    return csv;
}

std::string predictions_csv(const std::vector<EvalRecord>& records, const std::string& variant, uint64_t seed) {
    std::ostringstream os;
    os << kPredictionHeader << '\n';
    for (const auto& r : records) {
        os << r.exam_id;
        for (double v : r.risk) os << ',' << format_number(v);
        os << ',' << variant << ',' << seed << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------- density strata

std::vector<StratumResult> stratified_report(const std::vector<EvalRecord>& records, BootstrapOptions boot,
                                             CIndexOptions cindex) {
    std::vector<StratumResult> out;
    for (auto level : {dataman::DensityLevel::Low, dataman::DensityLevel::Med, dataman::DensityLevel::High}) {
        std::vector<EvalRecord> subset;
        for (const auto& r : records) {
            if (r.density_category == level) subset.push_back(r);
        }
        if (subset.empty()) continue;
        try {
            StratumResult s;
            s.level = level;
            s.records = subset.size();
            s.c_index = bootstrap_ci([cindex](std::span<const EvalRecord> r) { return c_index(r, cindex); }, subset,
                                     boot.iterations, boot.level, boot.seed);
            out.push_back(s);
        } catch (const UndefinedMetric&) {
            std::cerr << "warning: density stratum " << dataman::to_string(level)
                      << " has no comparable pairs; skipped\n";
        }
    }
    return out;
}

nlohmann::json to_json(const std::vector<StratumResult>& strata) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& s : strata) {
        auto c = ci_json(s.c_index);
        j.push_back({{"density", dataman::to_string(s.level)}, {"records", s.records}, {"c_index", c}});
    }
    return j;
}

// ---------------------------------------------------------------- weight sweep

std::vector<SweepRow> weight_sweep(const std::function<SweepOutcome(double alpha)>& train_fn,
                                   const std::vector<double>& alphas, CIndexOptions cindex) {
    if (alphas.empty()) throw ConfigError("weight_sweep: no alpha values");
    std::vector<SweepRow> rows;
    for (double alpha : alphas) {
        if (!(alpha >= 0.0)) throw ConfigError("weight_sweep: alpha must be >= 0");
        auto outcome = train_fn(alpha);
        if (!outcome.phi_feat.defined()) throw ConfigError("weight_sweep: the variant produced no feature field");
        SweepRow row;
        row.alpha = alpha;
        try {
            row.c_index = c_index(outcome.records, cindex);
        } catch (const UndefinedMetric&) {
            row.c_index = kNaN;
        }
        for (int k = 1; k <= dataman::kRiskYears; ++k) {
            try {
                row.auc[static_cast<size_t>(k - 1)] = auc_year(outcome.records, k);
            } catch (const UndefinedMetric&) {
                row.auc[static_cast<size_t>(k - 1)] = kNaN;
            }
        }
        row.njd_percent = warpkit::njd_percent(outcome.phi_feat);
        rows.push_back(row);
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << kSweepHeader << '\n';
    for (const auto& r : rows) {
        char a[64];
        std::snprintf(a, sizeof(a), "%g", r.alpha);
        os << a << ',' << format_number(r.c_index);
        for (double v : r.auc) os << ',' << format_number(v);
        os << ',' << format_number(r.njd_percent) << '\n';
    }
    return os.str();
}

nlohmann::json to_json(const std::vector<SweepRow>& rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json auc = nlohmann::json::array();
        for (double v : r.auc) auc.push_back(number_or_null(v));
        j.push_back({{"alpha", r.alpha}, {"c_index", number_or_null(r.c_index)}, {"auc", auc}, {"njd_percent", r.njd_percent}});
    }
    return j;
}

}  // namespace longalign::evalkit
