#include "longalign/dataman.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "longalign/errors.hpp"
#include "longalign/rng.hpp"

namespace longalign::dataman {

namespace {

constexpr std::array<const char*, 9> kColumns = {"patient_id", "exam_id",  "laterality",
                                                 "view",       "date",     "image_path",
                                                 "density",    "followup_years", "cancer_year"};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') {
            quoted = !quoted;
        } else if (ch == ',' && !quoted) {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return lines;
}

double parse_number(const std::string& s, const char* column, long line) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
        throw FormatError(std::string("cannot parse ") + column + " value '" + s + "'", line);
    }
    return v;
}

std::string format_number(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << content;
}

}  // namespace

Date parse_date(const std::string& text) {
    int y = 0;
    unsigned m = 0;
    unsigned d = 0;
    if (text.size() != 10 || text[4] != '-' || text[7] != '-') {
        throw FormatError("date '" + text + "' is not YYYY-MM-DD");
    }
    auto parse_int = [&](size_t pos, size_t len, auto& out) {
        auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + pos + len, out);
        if (ec != std::errc() || ptr != text.data() + pos + len) {
            throw FormatError("date '" + text + "' is not YYYY-MM-DD");
        }
    };
    parse_int(0, 4, y);
    parse_int(5, 2, m);
    parse_int(8, 2, d);
    Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!date.ok()) throw FormatError("date '" + text + "' does not exist");
    return date;
}

std::string format_date(const Date& d) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(d.year()),
                  static_cast<unsigned>(d.month()), static_cast<unsigned>(d.day()));
    return buf;
}

std::string to_string(Laterality v) { return v == Laterality::L ? "L" : "R"; }
std::string to_string(View v) { return v == View::CC ? "CC" : "MLO"; }

std::string to_string(Split v) {
    switch (v) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

std::string to_string(DensityLevel v) {
    switch (v) {
        case DensityLevel::Low: return "low";
        case DensityLevel::Med: return "med";
        case DensityLevel::High: return "high";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw FormatError("unknown split '" + s + "'");
}

DensityLevel density_from_string(const std::string& s) {
    if (s == "low") return DensityLevel::Low;
    if (s == "med") return DensityLevel::Med;
    if (s == "high") return DensityLevel::High;
    throw FormatError("unknown density level '" + s + "'");
}

ScreeningPair make_pair(const ExamRecord& prior, const ExamRecord& current) {
    if (prior.patient_id != current.patient_id || prior.laterality != current.laterality ||
        prior.view != current.view) {
        throw IntegrityError("screening pair " + prior.exam_id + "/" + current.exam_id +
                             " mixes patients, lateralities or views");
    }
    const auto days = (std::chrono::sys_days{current.acquisition_date} -
                       std::chrono::sys_days{prior.acquisition_date})
                          .count();
    if (days <= 0) {
        throw IntegrityError("prior exam " + prior.exam_id + " does not precede " + current.exam_id);
    }
    return {prior, current, static_cast<double>(days) / kDaysPerMonth};
}

std::vector<ScreeningPair> pair_exams(const std::vector<ExamRecord>& records) {
    using Key = std::tuple<std::string, Laterality, View>;
    std::map<Key, std::vector<const ExamRecord*>> groups;
    for (const auto& r : records) groups[{r.patient_id, r.laterality, r.view}].push_back(&r);

    std::vector<ScreeningPair> pairs;
    for (auto& [key, exams] : groups) {
        std::stable_sort(exams.begin(), exams.end(), [](const ExamRecord* a, const ExamRecord* b) {
            return std::chrono::sys_days{a->acquisition_date} < std::chrono::sys_days{b->acquisition_date};
        });
        for (size_t i = 1; i < exams.size(); ++i) {
            // Same-day duplicates have no usable predecessor.
            if (exams[i - 1]->acquisition_date == exams[i]->acquisition_date) continue;
            pairs.push_back(make_pair(*exams[i - 1], *exams[i]));
        }
    }
    return pairs;
}

RiskTarget build_risk_target(const ExamRecord& exam, int horizon) {
    if (horizon != kRiskYears) {
        throw ConfigError("build_risk_target: only the five-year horizon is supported");
    }
    RiskTarget t;
    for (int k = 1; k <= kRiskYears; ++k) {
        const bool diagnosed = exam.cancer_year && *exam.cancer_year <= k;
        t.target[k - 1] = diagnosed ? 1.0f : 0.0f;
        t.mask[k - 1] = (diagnosed || exam.followup_years >= k) ? 1.0f : 0.0f;
    }
    t.mask[5] = t.mask[4];
    // The cancer-free complement only carries a positive label where observed.
    t.target[5] = t.mask[5] > 0 ? 1.0f - t.target[4] : 0.0f;
    return t;
}

SplitAssignment split_patients(const std::vector<ExamRecord>& records, SplitRatios ratios,
                               uint64_t seed) {
    if (records.empty()) throw DataError("split_patients: no records");
    if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
        ratios.train + ratios.val + ratios.test <= 0) {
        throw ConfigError("split_patients: invalid ratios");
    }
    std::set<std::string> unique;
    for (const auto& r : records) unique.insert(r.patient_id);
    std::vector<std::string> patients(unique.begin(), unique.end());
    Rng rng(derive_seed(seed, 0x5911));
    rng.shuffle(patients.begin(), patients.end());

    const std::array<int, 3> weights = {ratios.train, ratios.val, ratios.test};
    const int total_weight = ratios.train + ratios.val + ratios.test;
    const auto n = static_cast<long>(patients.size());
    std::array<long, 3> sizes{};
    std::array<double, 3> remainders{};
    long assigned = 0;
    for (int g = 0; g < 3; ++g) {
        const double exact = static_cast<double>(n) * weights[g] / total_weight;
        sizes[g] = static_cast<long>(std::floor(exact));
        remainders[g] = exact - static_cast<double>(sizes[g]);
        assigned += sizes[g];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return remainders[a] > remainders[b]; });
    for (long i = 0; assigned < n; ++i, ++assigned) sizes[order[i % 3]] += 1;

    SplitAssignment out;
    long idx = 0;
    const std::array<Split, 3> labels = {Split::Train, Split::Val, Split::Test};
    for (int g = 0; g < 3; ++g) {
        for (long i = 0; i < sizes[g]; ++i) out[patients[idx++]] = labels[g];
    }
    return out;
}

std::vector<DensityLevel> density_categories(const std::vector<double>& values, int k) {
    if (values.empty()) throw DataError("density_categories: empty input");
    if (k != 3) throw ConfigError("density_categories: only tertiles (k = 3) are supported");
    std::vector<size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return values[a] < values[b]; });
    const size_t n = values.size();
    std::vector<DensityLevel> out(n);
    for (size_t rank = 0; rank < n; ++rank) {
        out[order[rank]] = static_cast<DensityLevel>((rank * 3) / n);
    }
    return out;
}

std::vector<ExamRecord> parse_manifest(const std::string& text) {
    const auto lines = split_lines(text);
    if (lines.empty()) throw FormatError("manifest is empty; expected header row", 1);

    const auto header = split_csv_line(lines[0]);
    for (const char* col : kColumns) {
        if (std::find(header.begin(), header.end(), col) == header.end()) {
            throw FormatError(std::string("missing required column '") + col + "'", 1);
        }
    }
    if (header.size() != kColumns.size() || !std::equal(header.begin(), header.end(), kColumns.begin())) {
        throw FormatError(std::string("header must be exactly: ") + kManifestHeader, 1);
    }

    std::vector<ExamRecord> out;
    std::set<std::pair<std::string, std::string>> seen;
    for (size_t i = 1; i < lines.size(); ++i) {
        const long line_no = static_cast<long>(i + 1);
        if (lines[i].empty()) continue;
        const auto f = split_csv_line(lines[i]);
        if (f.size() != kColumns.size()) {
            throw FormatError("expected " + std::to_string(kColumns.size()) + " fields, got " +
                                  std::to_string(f.size()),
                              line_no);
        }
        ExamRecord r;
        r.patient_id = f[0];
        r.exam_id = f[1];
        if (r.patient_id.empty() || r.exam_id.empty()) {
            throw FormatError("patient_id and exam_id must be non-empty", line_no);
        }
        if (f[2] == "L") {
            r.laterality = Laterality::L;
        } else if (f[2] == "R") {
            r.laterality = Laterality::R;
        } else {
            throw FormatError("laterality must be L or R, got '" + f[2] + "'", line_no);
        }
        if (f[3] == "CC") {
            r.view = View::CC;
        } else if (f[3] == "MLO") {
            r.view = View::MLO;
        } else {
            throw FormatError("view must be CC or MLO, got '" + f[3] + "'", line_no);
        }
        try {
            r.acquisition_date = parse_date(f[4]);
        } catch (const FormatError& e) {
            throw FormatError(e.what(), line_no);
        }
        r.image_path = f[5];
        if (!f[6].empty()) r.density_value = parse_number(f[6], "density", line_no);
        if (f[7].empty()) throw FormatError("followup_years is required", line_no);
        r.followup_years = parse_number(f[7], "followup_years", line_no);
        if (r.followup_years < 0) throw FormatError("followup_years must be >= 0", line_no);
        if (!f[8].empty()) {
            r.cancer_year = parse_number(f[8], "cancer_year", line_no);
            if (*r.cancer_year < 0 || *r.cancer_year > r.followup_years) {
                throw FormatError("cancer_year must lie in [0, followup_years]", line_no);
            }
        }
        if (!seen.emplace(r.patient_id, r.exam_id).second) {
            throw IntegrityError("line " + std::to_string(line_no) + ": duplicate (patient_id, exam_id) (" +
                                 r.patient_id + ", " + r.exam_id + ")");
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<ExamRecord> load_manifest(const std::filesystem::path& path) {
    return parse_manifest(read_file(path));
}

std::string format_manifest(const std::vector<ExamRecord>& records) {
    std::string out = kManifestHeader;
    out += '\n';
    for (const auto& r : records) {
        out += r.patient_id + ',' + r.exam_id + ',' + to_string(r.laterality) + ',' + to_string(r.view) + ',' +
               format_date(r.acquisition_date) + ',' + r.image_path.generic_string() + ',' +
               (r.density_value ? format_number(*r.density_value) : "") + ',' +
               format_number(r.followup_years) + ',' + (r.cancer_year ? format_number(*r.cancer_year) : "") +
               '\n';
    }
    return out;
}

void save_manifest(const std::filesystem::path& path, const std::vector<ExamRecord>& records) {
    write_file(path, format_manifest(records));
}

void save_splits(const std::filesystem::path& path, const SplitAssignment& splits) {
    std::string out = "patient_id,split\n";
    for (const auto& [pid, s] : splits) out += pid + ',' + to_string(s) + '\n';
    write_file(path, out);
}

SplitAssignment load_splits(const std::filesystem::path& path) {
    const auto lines = split_lines(read_file(path));
    if (lines.empty() || lines[0] != "patient_id,split") {
        throw FormatError("split file must start with 'patient_id,split'", 1);
    }
    SplitAssignment out;
    for (size_t i = 1; i < lines.size(); ++i) {
        const auto f = split_csv_line(lines[i]);
        if (f.size() != 2) throw FormatError("expected 2 fields", static_cast<long>(i + 1));
        if (!out.emplace(f[0], split_from_string(f[1])).second) {
            throw IntegrityError("patient " + f[0] + " listed twice in split file");
        }
    }
    return out;
}

}  // namespace longalign::dataman
