#pragma once

// The longalign command line: synth, train-reg, train-risk, evaluate, plot and
// sweep, driven by one JSON config plus dotted-key overrides.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "longalign/cohort.hpp"
#include "longalign/metrics.hpp"
#include "longalign/regnet.hpp"
#include "longalign/riskmodel.hpp"

namespace longalign::app {

enum ExitCode { kOk = 0, kConfigError = 2, kDataError = 3, kRuntimeError = 4 };

struct EvalOptions {
    std::string split = "test";
    int bootstrap_iterations = 1000;
    double level = 0.95;
    std::string cindex = "year_matched";  // or "fixed_year"
    int fixed_year = 5;
    int64_t batch_size = 8;
};

struct SweepOptions {
    // Four log-spaced weights over one decade either side of 1e-2.
    std::vector<double> alphas{1e-3, 4.641588833612779e-3, 2.1544346900318843e-2, 1e-1};
};

struct PlotOptions {
    std::optional<std::string> field;       // deformation field (.bin with .json sidecar)
    std::optional<std::string> background;  // image drawn under the quiver
    std::optional<std::string> strata;      // *.density.csv
    std::optional<std::string> sweep;       // sweep.csv
    int quiver_step = 8;
    int scale = 2;
};

struct ExperimentConfig {
    uint64_t seed = 0;
    std::string out = "runs/out";
    std::optional<std::string> dataset;
    std::optional<std::string> dataset_name;  // defaults to the dataset directory name
    std::string variant = "NoAlign";
    std::optional<std::string> reg_ckpt;
    std::optional<std::string> risk_ckpt;
    std::optional<std::string> resume;  // train-reg: continue from a last checkpoint
    cohort::CohortSpec synth;
    regnet::RegConfig reg;
    riskmodel::RiskConfig risk;
    EvalOptions eval;
    SweepOptions sweep;
    PlotOptions plot;

    // The top-level seed replaces the seeds of synth, reg and risk and seeds
    // the bootstrap.
    void propagate_seed();
    void validate() const;  // throws ConfigError
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig config_from_json(const nlohmann::json& j);  // rejects unknown keys

// Sets a dotted key ("reg.epochs") to a value parsed as JSON, or taken as a
// plain string when it does not parse.
void apply_override(nlohmann::json& j, const std::string& assignment);

// File-backed config + overrides + flags -> validated config with seeds
// propagated.
ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& config_path,
                                const std::vector<std::string>& overrides, std::optional<uint64_t> seed,
                                std::optional<std::string> out);

int cmd_synth(const ExperimentConfig& c);
int cmd_train_reg(const ExperimentConfig& c);
int cmd_train_risk(const ExperimentConfig& c);
int cmd_evaluate(const ExperimentConfig& c);
int cmd_plot(const ExperimentConfig& c);
int cmd_sweep(const ExperimentConfig& c);

// Full command line entry point; maps exceptions to exit codes.
int main(int argc, const char* const* argv);
int main(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace longalign::app
