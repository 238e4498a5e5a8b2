#include "longalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "longalign/errors.hpp"
#include "longalign/rng.hpp"

namespace longalign::evalkit {

namespace {

class Fenwick {
public:
    explicit Fenwick(size_t n) : tree_(n + 1, 0) {}
    void add(size_t i) {
        for (++i; i < tree_.size(); i += i & (~i + 1)) tree_[i] += 1;
    }
    // Count of inserted ranks < i.
    long prefix(size_t i) const {
        long s = 0;
        for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
        return s;
    }

private:
    std::vector<long> tree_;
};

double censor_time(const EvalRecord& r) {
    return r.event_time ? std::min(*r.event_time, r.followup_years) : r.followup_years;
}

int score_year(const EvalRecord& event, const CIndexOptions& opt) {
    if (opt.score == CIndexScore::FixedYear) return opt.fixed_year;
    return std::clamp(static_cast<int>(std::ceil(*event.event_time)), 1, dataman::kRiskYears);
}

}  // namespace

double c_index(std::span<const EvalRecord> records, CIndexOptions options) {
    if (options.fixed_year < 1 || options.fixed_year > dataman::kRiskYears) {
        throw ConfigError("c_index: fixed_year must be in 1..5");
    }
    double concordant = 0.0;
    long comparable = 0;
    const size_t n = records.size();

    // Events are swept by decreasing time; every record whose censoring time
    // exceeds the current event time is in the Fenwick tree keyed by score rank.
    for (int year = 1; year <= dataman::kRiskYears; ++year) {
        std::vector<size_t> events;
        for (size_t i = 0; i < n; ++i) {
            if (records[i].event_time && score_year(records[i], options) == year) events.push_back(i);
        }
        if (events.empty()) continue;

        std::vector<double> scores(n);
        for (size_t i = 0; i < n; ++i) scores[i] = records[i].risk[year - 1];
        std::vector<double> ranks_sorted = scores;
        std::sort(ranks_sorted.begin(), ranks_sorted.end());
        ranks_sorted.erase(std::unique(ranks_sorted.begin(), ranks_sorted.end()), ranks_sorted.end());
        auto rank_of = [&](double s) {
            return static_cast<size_t>(std::lower_bound(ranks_sorted.begin(), ranks_sorted.end(), s) -
                                       ranks_sorted.begin());
        };

        std::vector<size_t> by_censor(n);
        std::iota(by_censor.begin(), by_censor.end(), 0);
        std::sort(by_censor.begin(), by_censor.end(),
                  [&](size_t a, size_t b) { return censor_time(records[a]) > censor_time(records[b]); });
        std::sort(events.begin(), events.end(),
                  [&](size_t a, size_t b) { return *records[a].event_time > *records[b].event_time; });

        Fenwick tree(ranks_sorted.size());
        long inserted = 0;
        size_t next = 0;
        for (size_t i : events) {
            const double t = *records[i].event_time;
            while (next < n && censor_time(records[by_censor[next]]) > t) {
                tree.add(rank_of(scores[by_censor[next]]));
                ++inserted;
                ++next;
            }
            const size_t r = rank_of(scores[i]);
            const long below = tree.prefix(r);
            const long ties = tree.prefix(r + 1) - below;
            concordant += static_cast<double>(below) + 0.5 * static_cast<double>(ties);
            comparable += inserted;
        }
    }
    if (comparable == 0) throw UndefinedMetric("c_index: no comparable pairs");
    return concordant / static_cast<double>(comparable);
}

double auc_year(std::span<const EvalRecord> records, int year) {
    if (year < 1 || year > dataman::kRiskYears) throw ConfigError("auc_year: year must be in 1..5");
    const int k = year - 1;
    std::vector<std::pair<double, bool>> obs;
    for (const auto& r : records) {
        if (r.target.mask[k] > 0) obs.emplace_back(r.risk[k], r.target.target[k] > 0);
    }
    std::sort(obs.begin(), obs.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum = 0.0;
    long positives = 0;
    for (size_t i = 0; i < obs.size();) {
        size_t j = i;
        while (j < obs.size() && obs[j].first == obs[i].first) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (size_t m = i; m < j; ++m) {
            if (obs[m].second) {
                rank_sum += avg_rank;
                ++positives;
            }
        }
        i = j;
    }
    const long negatives = static_cast<long>(obs.size()) - positives;
    if (positives == 0 || negatives == 0) {
        throw UndefinedMetric("auc_year: year " + std::to_string(year) + " has a single class");
    }
    const double p = static_cast<double>(positives);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

double percentile(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw DataError("percentile of an empty sample");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace {

// Shared resampling loop: `eval` scores one resample given as record indices.
CIResult bootstrap_indices(size_t n, double point, const std::function<double(const std::vector<size_t>&)>& eval,
                           int iterations, double level, uint64_t seed) {
    if (iterations < 1) throw ConfigError("bootstrap_ci: iterations must be positive");
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap_ci: level must lie in (0, 1)");
    CIResult out;
    out.level = level;
    out.iterations = iterations;
    out.point = point;

    const long budget = 10L * iterations;
    std::vector<double> values;
    values.reserve(static_cast<size_t>(iterations));
    std::vector<size_t> sample(n);
    for (int it = 0; it < iterations; ++it) {
        Rng rng(derive_seed(seed, static_cast<uint64_t>(it)));
        while (true) {
            for (auto& s : sample) s = rng.index(n);
            try {
                values.push_back(eval(sample));
                break;
            } catch (const UndefinedMetric&) {
                if (++out.redraws > budget) {
                    throw UndefinedMetric("bootstrap_ci: metric undefined on too many resamples");
                }
            }
        }
    }
    std::sort(values.begin(), values.end());
    const double tail = (1.0 - level) / 2.0;
    out.lo = percentile(values, tail);
    out.hi = percentile(values, 1.0 - tail);
    return out;
}

}  // namespace

CIResult bootstrap_ci(const Metric& metric, std::span<const EvalRecord> records, int iterations, double level,
                      uint64_t seed) {
    const double point = metric(records);  // throws if undefined on the full set
    std::vector<EvalRecord> sample(records.size());
    return bootstrap_indices(
        records.size(), point,
        [&](const std::vector<size_t>& idx) {
            for (size_t i = 0; i < idx.size(); ++i) sample[i] = records[idx[i]];
            return metric(sample);
        },
        iterations, level, seed);
}

CIResult bootstrap_mean_ci(std::span<const double> values, int iterations, double level, uint64_t seed) {
    if (values.empty()) throw UndefinedMetric("bootstrap_mean_ci: no values");
    auto mean = [&](const std::vector<size_t>& idx) {
        double s = 0.0;
        for (auto i : idx) s += values[i];
        return s / static_cast<double>(idx.size());
    };
    std::vector<size_t> all(values.size());
    std::iota(all.begin(), all.end(), size_t{0});
    return bootstrap_indices(values.size(), mean(all), mean, iterations, level, seed);
}

}  // namespace longalign::evalkit
