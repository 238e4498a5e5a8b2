#pragma once

// Manifest ingestion, risk labels, patient-level splits and density strata.

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace longalign::dataman {

enum class Laterality { L, R };
enum class View { CC, MLO };
enum class Split { Train, Val, Test };
enum class DensityLevel { Low, Med, High };

using Date = std::chrono::year_month_day;

struct ExamRecord {
    std::string patient_id;
    std::string exam_id;
    Laterality laterality = Laterality::L;
    View view = View::CC;
    Date acquisition_date{};
    std::filesystem::path image_path;
    std::optional<double> density_value;
    double followup_years = 0.0;
    std::optional<double> cancer_year;  // years from this exam to diagnosis
};

inline constexpr double kDaysPerMonth = 30.44;

struct ScreeningPair {
    ExamRecord prior;
    ExamRecord current;
    double delta_t_months = 0.0;
};

// Validates the pairing invariants and derives delta_t_months from the dates.
ScreeningPair make_pair(const ExamRecord& prior, const ExamRecord& current);

// Pairs every exam with the most recent earlier exam of the same patient,
// laterality and view. Exams without a predecessor produce no pair.
std::vector<ScreeningPair> pair_exams(const std::vector<ExamRecord>& records);

inline constexpr int kRiskYears = 5;
inline constexpr int kRiskDims = kRiskYears + 1;

// target[k] (k < 5): cancer by year k+1; target[5]: cancer free through year 5.
// mask[k] = 1 where the status is known given follow-up.
struct RiskTarget {
    std::array<float, kRiskDims> target{};
    std::array<float, kRiskDims> mask{};
};

RiskTarget build_risk_target(const ExamRecord& exam, int horizon = kRiskYears);

using SplitAssignment = std::map<std::string, Split>;

struct SplitRatios {
    int train = 5;
    int val = 2;
    int test = 3;
};

// Patient-level split. Group sizes use the largest-remainder rule so each is
// within one patient of its target fraction.
SplitAssignment split_patients(const std::vector<ExamRecord>& records, SplitRatios ratios,
                               uint64_t seed);

// Equal-size groups by empirical rank; ties keep input order.
std::vector<DensityLevel> density_categories(const std::vector<double>& values, int k = 3);

// CSV manifest. Header row must be exactly kManifestHeader.
inline constexpr const char* kManifestHeader =
    "patient_id,exam_id,laterality,view,date,image_path,density,followup_years,cancer_year";

std::vector<ExamRecord> load_manifest(const std::filesystem::path& path);
std::vector<ExamRecord> parse_manifest(const std::string& text);
std::string format_manifest(const std::vector<ExamRecord>& records);
void save_manifest(const std::filesystem::path& path, const std::vector<ExamRecord>& records);

void save_splits(const std::filesystem::path& path, const SplitAssignment& splits);
SplitAssignment load_splits(const std::filesystem::path& path);

Date parse_date(const std::string& text);
std::string format_date(const Date& d);

std::string to_string(Laterality v);
std::string to_string(View v);
std::string to_string(Split v);
std::string to_string(DensityLevel v);
Split split_from_string(const std::string& s);
DensityLevel density_from_string(const std::string& s);

}  // namespace longalign::dataman
