#pragma once

// Synthetic screening cohorts on disk, and loading any manifest-based dataset
// into registration pairs and risk samples.
//
// Dataset directory:
//   manifest.csv          dataman manifest, image paths relative to the directory
//   splits.csv            patient -> train/val/test
//   images/<exam>.png     16-bit images
//   fields/<exam>.bin     ground-truth field of the pair ending at <exam> (+ .json)
//   fields/<exam>_fg.png  breast mask of that current image
//   cohort.json           the CohortSpec that produced the directory
// Only manifest.csv and splits.csv are required when loading.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "longalign/dataman.hpp"
#include "longalign/evalkit.hpp"
#include "longalign/phantom.hpp"
#include "longalign/regnet.hpp"
#include "longalign/riskmodel.hpp"

namespace longalign::cohort {

struct CohortSpec {
    int n_patients = 20;
    int64_t height = 256;
    int64_t width = 128;
    double deform_amplitude = 4.0;
    double deform_smoothness = 64.0;
    double case_fraction = 0.4;  // share of patients whose lesion grows into a cancer
    dataman::SplitRatios ratios;
    uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

void to_json(nlohmann::json& j, const CohortSpec& c);
void from_json(const nlohmann::json& j, CohortSpec& c);

// Patient i is one phantom pair (two exams). Patient IDs are P0000, P0001, ...
std::vector<phantom::PhantomPair> generate_cohort(const CohortSpec& spec);

// Writes the directory layout above. Output depends only on spec.
void write_cohort(const std::filesystem::path& dir, const CohortSpec& spec);

struct PairEntry {
    dataman::ScreeningPair pair;
    dataman::Split split = dataman::Split::Train;
    std::optional<dataman::DensityLevel> density;  // tertile of the current exam over all exams
};

struct Dataset {
    std::filesystem::path root;
    std::vector<PairEntry> pairs;  // most recent prior for every exam that has one
};

Dataset load_dataset(const std::filesystem::path& dir);

std::vector<const PairEntry*> select(const Dataset& ds, dataman::Split split);

std::vector<regnet::ImagePair> registration_pairs(const Dataset& ds, dataman::Split split);
// With ground-truth fields and masks when the directory has them.
std::vector<evalkit::RegEvalPair> registration_eval_pairs(const Dataset& ds, dataman::Split split);
std::vector<riskmodel::RiskSample> risk_samples(const Dataset& ds, dataman::Split split);

}  // namespace longalign::cohort
