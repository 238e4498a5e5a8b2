#include <cmath>
#include <cstring>
#include <optional>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <torch/torch.h>

#include "longalign/errors.hpp"
#include "longalign/evalkit.hpp"
#include "longalign/phantom.hpp"
#include "longalign/warpkit.hpp"
#ifdef LONGALIGN_WITH_CLI
#include "app.hpp"
#endif

namespace py = pybind11;
using namespace longalign;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

torch::Tensor to_tensor(const Array& a) {
    std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
    return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

Array to_array(const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat64).contiguous();
    Array out(std::vector<py::ssize_t>(c.sizes().begin(), c.sizes().end()));
    std::memcpy(out.mutable_data(), c.data_ptr<double>(), sizeof(double) * c.numel());
    return out;
}

// Records from columns: risk (N, 6), event time in years (NaN for none) and
// follow-up in years. Targets and masks follow the label rule of the data layer.
std::vector<evalkit::EvalRecord> records(const Array& risk, const Array& event, const Array& followup) {
    if (risk.ndim() != 2 || risk.shape(1) != dataman::kRiskDims) throw DataError("risk must be (N, 6)");
    const auto n = risk.shape(0);
    if (event.size() != n || followup.size() != n) throw DataError("event and followup need one entry per record");
    std::vector<evalkit::EvalRecord> out(static_cast<size_t>(n));
    for (py::ssize_t i = 0; i < n; ++i) {
        auto& r = out[static_cast<size_t>(i)];
        for (int k = 0; k < dataman::kRiskDims; ++k) r.risk[k] = risk.at(i, k);
        dataman::ExamRecord exam;
        exam.followup_years = followup.data()[i];
        if (!std::isnan(event.data()[i])) exam.cancer_year = event.data()[i];
        r.event_time = exam.cancer_year;
        r.followup_years = exam.followup_years;
        r.target = dataman::build_risk_target(exam);
    }
    return out;
}

evalkit::CIndexOptions cindex_options(const std::string& score, int year) {
    if (score == "year_matched") return {evalkit::CIndexScore::YearMatched, year};
    if (score == "fixed_year") return {evalkit::CIndexScore::FixedYear, year};
    throw ConfigError("score must be year_matched or fixed_year");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Deformation-field kernels, risk metrics and phantom generation";

    // Translators run newest first, so the derived metric error comes last.
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    auto data_error = py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<UndefinedMetric>(m, "UndefinedMetric", data_error.ptr());

    m.def("warp", [](const Array& image, const Array& disp) {
        return to_array(warpkit::warp(to_tensor(image), to_tensor(disp)));
    }, py::arg("image"), py::arg("disp"), "Bilinear backward warp with border replication.");
    m.def("compose", [](const Array& outer, const Array& inner) {
        return to_array(warpkit::compose(to_tensor(outer), to_tensor(inner)));
    }, py::arg("outer"), py::arg("inner"));
    m.def("jacobian_det", [](const Array& disp) { return to_array(warpkit::jacobian_det(to_tensor(disp))); });
    m.def("njd_percent", [](const Array& disp) { return warpkit::njd_percent(to_tensor(disp)); });
    m.def("ncc", [](const Array& a, const Array& b) { return warpkit::ncc(to_tensor(a), to_tensor(b)).item<double>(); });
    m.def("affine_to_dense", [](std::array<double, 4> matrix, std::array<double, 2> translation, int64_t h, int64_t w) {
        return to_array(warpkit::affine_to_dense(warpkit::AffineParams{matrix, translation}, h, w));
    }, py::arg("matrix"), py::arg("translation"), py::arg("height"), py::arg("width"));

    m.def("c_index", [](const Array& risk, const Array& event, const Array& followup, const std::string& score,
                        int year) {
        return evalkit::c_index(records(risk, event, followup), cindex_options(score, year));
    }, py::arg("risk"), py::arg("event_time"), py::arg("followup"), py::arg("score") = "year_matched",
       py::arg("fixed_year") = 5);
    m.def("auc_year", [](const Array& risk, const Array& event, const Array& followup, int year) {
        return evalkit::auc_year(records(risk, event, followup), year);
    }, py::arg("risk"), py::arg("event_time"), py::arg("followup"), py::arg("year"));
    m.def("c_index_ci", [](const Array& risk, const Array& event, const Array& followup, int iterations, double level,
                           uint64_t seed) {
        const auto recs = records(risk, event, followup);
        auto r = evalkit::bootstrap_ci([](std::span<const evalkit::EvalRecord> s) { return evalkit::c_index(s); },
                                       recs, iterations, level, seed);
        return py::dict(py::arg("point") = r.point, py::arg("lo") = r.lo, py::arg("hi") = r.hi,
                        py::arg("level") = r.level, py::arg("iterations") = r.iterations,
                        py::arg("redraws") = r.redraws);
    }, py::arg("risk"), py::arg("event_time"), py::arg("followup"), py::arg("iterations") = 1000,
       py::arg("level") = 0.95, py::arg("seed") = 0);

    m.def("phantom_pair", [](int64_t height, int64_t width, double amplitude, double smoothness, double growth,
                             uint64_t seed) {
        phantom::PhantomSpec s;
        s.height = height;
        s.width = width;
        s.deform_amplitude = amplitude;
        s.deform_smoothness = smoothness;
        s.lesion_growth = growth;
        s.seed = seed;
        auto p = phantom::generate_phantom_pair(s);
        return py::dict(py::arg("prior") = to_array(p.prior), py::arg("current") = to_array(p.current),
                        py::arg("phi_gt") = to_array(p.phi_gt.disp), py::arg("foreground") = to_array(p.foreground));
    }, py::arg("height") = 256, py::arg("width") = 128, py::arg("amplitude") = 4.0, py::arg("smoothness") = 64.0,
       py::arg("lesion_growth") = 0.0, py::arg("seed") = 0);

#ifdef LONGALIGN_WITH_CLI
    m.def("main", [](std::vector<std::string> args) {
        args.insert(args.begin(), "longalign");
        py::gil_scoped_release release;
        return app::main(args);
    }, py::arg("args"), "Run a command-line invocation in process; returns the exit code.");
#endif
}
