#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "hierf/covariance.hpp"
#include "hierf/learner.hpp"
#include "hierf/matrix.hpp"
#include "hierf/metrics.hpp"
#include "hierf/reconcile.hpp"
#include "hierf/summation.hpp"
#include "hierf/tree.hpp"
#include "hierf/treebuild.hpp"

namespace hierf {

// --- timestamps -----------------------------------------------------------
// Epoch seconds, UTC, no zone handling. Accepts "YYYY-MM-DD HH:MM[:SS]",
// the 'T' separator variant, a bare date, or a raw integer.

namespace timeutil {

inline std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    y = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y += (m <= 2);
}

}  // namespace timeutil

inline std::int64_t parse_timestamp(const std::string& text) {
    if (text.empty()) throw std::invalid_argument("empty timestamp");
    if (text.find_first_not_of("-0123456789") == std::string::npos &&
        text.find('-', 1) == std::string::npos)
        return std::stoll(text);  // raw epoch seconds
    int year = 0, month = 0, day = 0, hour = 0, minute = 0, second = 0;
    char sep = 0;
    int fields = std::sscanf(text.c_str(), "%d-%d-%d%c%d:%d:%d", &year, &month, &day, &sep, &hour,
                             &minute, &second);
    if (fields < 3 || month < 1 || month > 12 || day < 1 || day > 31)
        throw std::invalid_argument("unparsable timestamp '" + text + "'");
    return timeutil::days_from_civil(year, static_cast<unsigned>(month), static_cast<unsigned>(day)) *
               86400 +
           hour * 3600 + minute * 60 + second;
}

inline std::string format_timestamp(std::int64_t stamp) {
    std::int64_t days = stamp / 86400;
    std::int64_t rem = stamp % 86400;
    if (rem < 0) {
        rem += 86400;
        days -= 1;
    }
    std::int64_t year = 0;
    unsigned month = 0, day = 0;
    timeutil::civil_from_days(days, year, month, day);
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "%04lld-%02u-%02u %02lld:%02lld:%02lld",
                  static_cast<long long>(year), month, day,
                  static_cast<long long>(rem / 3600), static_cast<long long>((rem / 60) % 60),
                  static_cast<long long>(rem % 60));
    return buffer;
}

// --- series table -----------------------------------------------------------

/// Long-format records in deterministic (label, timestamp) order. After
/// resampling, timestamps are whole hours.
struct SeriesTable {
    std::map<std::string, std::map<std::int64_t, double>> series;
    bool hourly = false;

    std::size_t record_count() const {
        std::size_t count = 0;
        for (const auto& [label, points] : series) count += points.size();
        return count;
    }

    std::vector<std::string> labels() const {
        std::vector<std::string> out;
        for (const auto& [label, points] : series) out.push_back(label);
        return out;
    }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) {
        while (!field.empty() && (field.back() == '\r' || field.back() == ' ')) field.pop_back();
        std::size_t lead = field.find_first_not_of(' ');
        out.push_back(lead == std::string::npos ? "" : field.substr(lead));
    }
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

}  // namespace detail

/**
 * Reads a long (series,timestamp,value) or wide (timestamp plus one column
 * per series) CSV into a SeriesTable. "auto" sniffs the header. Duplicate
 * (series, timestamp) pairs and unparsable rows are reported with their
 * line number.
 */
inline SeriesTable ingest(const std::string& path, const std::string& format = "auto") {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("ingest: cannot open '" + path + "'");
    std::string header_line;
    if (!std::getline(is, header_line)) throw std::runtime_error("ingest: empty file '" + path + "'");
    const std::vector<std::string> header = detail::split_csv(header_line);

    std::string kind = format;
    if (kind == "auto") {
        std::set<std::string> names(header.begin(), header.end());
        kind = (names.count("series") && names.count("timestamp") && names.count("value")) ? "long"
                                                                                           : "wide";
    }

    SeriesTable table;
    std::string line;
    std::size_t line_no = 1;
    auto fail = [&](const std::string& what) {
        throw std::runtime_error("ingest: " + what + " at " + path + ":" + std::to_string(line_no));
    };

    if (kind == "long") {
        std::size_t si = header.size(), ti = header.size(), vi = header.size();
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == "series") si = i;
            if (header[i] == "timestamp") ti = i;
            if (header[i] == "value") vi = i;
        }
        if (si >= header.size() || ti >= header.size() || vi >= header.size())
            throw std::runtime_error("ingest: long format needs series,timestamp,value columns");
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty() || line == "\r") continue;
            const auto fields = detail::split_csv(line);
            if (fields.size() <= std::max({si, ti, vi})) fail("short row");
            std::int64_t stamp = 0;
            double value = 0.0;
            try {
                stamp = parse_timestamp(fields[ti]);
                value = std::stod(fields[vi]);
            } catch (const std::exception& e) {
                fail(std::string("parse failure (") + e.what() + ")");
            }
            auto& points = table.series[fields[si]];
            if (!points.emplace(stamp, value).second)
                fail("duplicate record for series '" + fields[si] + "' at " + format_timestamp(stamp));
        }
    } else if (kind == "wide") {
        if (header.size() < 2 || header[0] != "timestamp")
            throw std::runtime_error("ingest: wide format needs a leading timestamp column");
        while (std::getline(is, line)) {
            ++line_no;
            if (line.empty() || line == "\r") continue;
            const auto fields = detail::split_csv(line);
            if (fields.empty()) continue;
            std::int64_t stamp = 0;
            try {
                stamp = parse_timestamp(fields[0]);
            } catch (const std::exception& e) {
                fail(std::string("parse failure (") + e.what() + ")");
            }
            for (std::size_t i = 1; i < header.size() && i < fields.size(); ++i) {
                if (fields[i].empty()) continue;  // missing cell
                double value = 0.0;
                try {
                    value = std::stod(fields[i]);
                } catch (const std::exception& e) {
                    fail(std::string("parse failure (") + e.what() + ")");
                }
                auto& points = table.series[header[i]];
                if (!points.emplace(stamp, value).second)
                    fail("duplicate record for series '" + header[i] + "' at " +
                         format_timestamp(stamp));
            }
        }
    } else {
        throw std::invalid_argument("ingest: unknown format '" + format + "'");
    }
    return table;
}

inline void write_table_csv(std::ostream& os, const SeriesTable& table) {
    os << "series,timestamp,value\n";
    char buffer[64];
    for (const auto& [label, points] : table.series)
        for (const auto& [stamp, value] : points) {
            std::snprintf(buffer, sizeof(buffer), "%.17g", value);
            os << label << ',' << format_timestamp(stamp) << ',' << buffer << '\n';
        }
}

/// Averages sub-hourly records into their hour bucket.
inline SeriesTable resample_hourly(const SeriesTable& table) {
    SeriesTable out;
    out.hourly = true;
    for (const auto& [label, points] : table.series) {
        std::map<std::int64_t, std::pair<double, int>> buckets;
        for (const auto& [stamp, value] : points) {
            std::int64_t hour = stamp - (stamp % 3600 + 3600) % 3600;
            auto& slot = buckets[hour];
            slot.first += value;
            slot.second += 1;
        }
        auto& dest = out.series[label];
        for (const auto& [hour, slot] : buckets) dest[hour] = slot.first / slot.second;
    }
    return out;
}

struct CleanReport {
    std::vector<std::pair<std::string, std::string>> dropped;  // label, reason
    std::size_t filled = 0;
};

/**
 * Gap policy on the hourly grid: series whose gaps exceed max_gap_hours
 * (each contiguous run under the per-gap rule, the overall total under the
 * total rule) are dropped with a reason; smaller gaps are filled with the
 * centered window_hours-hour moving average of available neighbors.
 */
inline SeriesTable clean(const SeriesTable& table, CleanReport* report, int max_gap_hours = 2,
                         int window_hours = 8, bool per_gap_rule = true) {
    if (!table.hourly) throw std::invalid_argument("clean: resample to hourly first");
    SeriesTable out;
    out.hourly = true;
    const int half = window_hours / 2;

    for (const auto& [label, points] : table.series) {
        if (points.empty()) {
            if (report) report->dropped.emplace_back(label, "empty series");
            continue;
        }
        const std::int64_t first = points.begin()->first;
        const std::int64_t last = points.rbegin()->first;
        const std::size_t total_hours = static_cast<std::size_t>((last - first) / 3600) + 1;

        std::vector<double> grid(total_hours, std::numeric_limits<double>::quiet_NaN());
        for (const auto& [stamp, value] : points) grid[(stamp - first) / 3600] = value;

        std::size_t longest_run = 0, current_run = 0, total_missing = 0;
        for (double v : grid) {
            if (std::isnan(v)) {
                ++current_run;
                ++total_missing;
                longest_run = std::max(longest_run, current_run);
            } else {
                current_run = 0;
            }
        }
        const bool too_gappy = per_gap_rule ? longest_run > static_cast<std::size_t>(max_gap_hours)
                                            : total_missing > static_cast<std::size_t>(max_gap_hours);
        if (too_gappy) {
            if (report)
                report->dropped.emplace_back(
                    label, (per_gap_rule ? "gap of " + std::to_string(longest_run)
                                         : "total missing " + std::to_string(total_missing)) +
                               " hours exceeds " + std::to_string(max_gap_hours));
            continue;
        }

        std::vector<double> filled = grid;
        bool ok = true;
        for (std::size_t t = 0; t < total_hours && ok; ++t) {
            if (!std::isnan(grid[t])) continue;
            double acc = 0.0;
            int found = 0;
            for (int off = -half; off <= half; ++off) {
                if (off == 0) continue;
                const std::int64_t at = static_cast<std::int64_t>(t) + off;
                if (at < 0 || at >= static_cast<std::int64_t>(total_hours)) continue;
                if (std::isnan(grid[at])) continue;
                acc += grid[at];
                ++found;
            }
            if (found == 0) {
                if (report) report->dropped.emplace_back(label, "gap with no fillable neighbors");
                ok = false;
                break;
            }
            filled[t] = acc / found;
            if (report) ++report->filled;
        }
        if (!ok) continue;

        auto& dest = out.series[label];
        for (std::size_t t = 0; t < total_hours; ++t)
            dest[first + static_cast<std::int64_t>(t) * 3600] = filled[t];
    }
    return out;
}

// --- feature selection -------------------------------------------------------

/// Selected inputs per target node: lag offsets per temporal block size
/// plus exogenous labels passing the correlation filter.
struct FeatureSpec {
    struct NodeFeatures {
        std::map<std::size_t, std::vector<std::size_t>> lags_per_level;  // block size -> lags
        std::vector<std::string> exogenous;
    };
    std::map<std::string, NodeFeatures> per_node;
    double acf_threshold = 0.25;
    double corr_threshold = 0.25;
    std::size_t max_lag = 48;
    std::size_t top_k = 3;
    std::int64_t fit_end = 0;  // last timestamp the selection read
};

namespace detail {

inline double pearson(const Vec& x, const Vec& y) {
    const std::size_t n = std::min(x.size(), y.size());
    if (n < 2) return 0.0;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

/// Sample autocorrelation at lags 1..max_lag.
inline Vec acf(const Vec& x, std::size_t max_lag) {
    Vec out(max_lag + 1, 0.0);
    const std::size_t n = x.size();
    if (n < 3) return out;
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= n;
    double denom = 0.0;
    for (double v : x) denom += (v - mean) * (v - mean);
    if (denom == 0.0) return out;  // constant series: undefined, stays zero
    out[0] = 1.0;
    for (std::size_t lag = 1; lag <= max_lag && lag < n; ++lag) {
        double acc = 0.0;
        for (std::size_t t = 0; t + lag < n; ++t) acc += (x[t] - mean) * (x[t + lag] - mean);
        out[lag] = acc / denom;
    }
    return out;
}

/// Up to top_k lags with ACF above the threshold, strongest first; lag 1 as
/// the fallback when none qualifies.
inline std::vector<std::size_t> select_lags(const Vec& series, std::size_t max_lag, double threshold,
                                            std::size_t top_k) {
    const Vec correlations = acf(series, max_lag);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t lag = 1; lag < correlations.size(); ++lag)
        if (correlations[lag] > threshold) ranked.emplace_back(correlations[lag], lag);
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<std::size_t> lags;
    for (std::size_t i = 0; i < ranked.size() && i < top_k; ++i) lags.push_back(ranked[i].second);
    if (lags.empty()) lags.push_back(1);
    std::sort(lags.begin(), lags.end());
    return lags;
}

/// Sum the series into blocks of `block` consecutive samples.
inline Vec block_sums(const Vec& x, std::size_t block) {
    Vec out;
    for (std::size_t start = 0; start + block <= x.size(); start += block) {
        double acc = 0.0;
        for (std::size_t i = 0; i < block; ++i) acc += x[start + i];
        out.push_back(acc);
    }
    return out;
}

}  // namespace detail

/**
 * Lag and exogenous-feature selection over a training range: per node and
 * per temporal aggregation level, the top-k autocorrelation lags above the
 * threshold (most recent block as fallback), plus exogenous series whose
 * absolute correlation with the node's series passes the filter.
 */
inline FeatureSpec build_features(const std::map<std::string, Vec>& node_series,
                                  const std::vector<std::size_t>& temporal_ks,
                                  const std::map<std::string, Vec>& exogenous_series,
                                  double acf_threshold = 0.25, double corr_threshold = 0.25,
                                  std::size_t max_lag = 48, std::size_t top_k = 3,
                                  std::int64_t fit_end = 0) {
    FeatureSpec spec;
    spec.acf_threshold = acf_threshold;
    spec.corr_threshold = corr_threshold;
    spec.max_lag = max_lag;
    spec.top_k = top_k;
    spec.fit_end = fit_end;
    for (const auto& [label, series] : node_series) {
        FeatureSpec::NodeFeatures node;
        for (std::size_t k : temporal_ks) {
            const Vec blocked = k == 1 ? series : detail::block_sums(series, k);
            node.lags_per_level[k] = detail::select_lags(blocked, max_lag, acf_threshold, top_k);
        }
        for (const auto& [exo_label, exo] : exogenous_series)
            if (std::fabs(detail::pearson(series, exo)) > corr_threshold)
                node.exogenous.push_back(exo_label);
        spec.per_node[label] = std::move(node);
    }
    return spec;
}

inline nlohmann::json to_json(const FeatureSpec& spec) {
    nlohmann::json doc;
    doc["acf_threshold"] = spec.acf_threshold;
    doc["corr_threshold"] = spec.corr_threshold;
    doc["max_lag"] = spec.max_lag;
    doc["top_k"] = spec.top_k;
    doc["fit_end"] = spec.fit_end;
    doc["selection"] = "autocorrelation lags; exogenous by absolute Pearson correlation";
    nlohmann::json nodes;
    for (const auto& [label, node] : spec.per_node) {
        nlohmann::json entry;
        for (const auto& [block, lags] : node.lags_per_level)
            entry["lags"][std::to_string(block)] = lags;
        entry["exogenous"] = node.exogenous;
        nodes[label] = entry;
    }
    doc["nodes"] = nodes;
    return doc;
}

// --- rolling windows ---------------------------------------------------------

/// Expanding training ranges with equal, disjoint, chronological test ranges.
struct WindowPlan {
    struct Split {
        std::size_t train_begin = 0;
        std::size_t train_end = 0;  // exclusive
        std::size_t test_begin = 0;
        std::size_t test_end = 0;  // exclusive
    };
    std::vector<Split> splits;
};

inline WindowPlan plan_windows(std::size_t total, std::size_t n_batches, std::size_t test_size) {
    if (n_batches == 0 || test_size == 0)
        throw std::invalid_argument("plan_windows: batches and test size must be positive");
    if (n_batches * test_size >= total)
        throw std::invalid_argument("plan_windows: not enough data for " + std::to_string(n_batches) +
                                    " test ranges of " + std::to_string(test_size));
    WindowPlan plan;
    for (std::size_t b = 0; b < n_batches; ++b) {
        WindowPlan::Split split;
        split.train_begin = 0;
        split.train_end = total - (n_batches - b) * test_size;
        split.test_begin = split.train_end;
        split.test_end = split.test_begin + test_size;
        plan.splits.push_back(split);
    }
    return plan;
}

inline WindowPlan plan_windows(const SeriesTable& table, std::size_t n_batches, std::size_t test_size) {
    std::size_t shortest = std::numeric_limits<std::size_t>::max();
    for (const auto& [label, points] : table.series) shortest = std::min(shortest, points.size());
    if (table.series.empty()) throw std::invalid_argument("plan_windows: empty table");
    return plan_windows(shortest, n_batches, test_size);
}

}  // namespace hierf

#include "hierf/experiment.hpp"
