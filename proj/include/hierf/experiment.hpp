#pragma once

// Experiment orchestration over the pipeline pieces: config parsing, mode
// specific dataset assembly, the (forecasting x reconciliation) grid, and
// report emission. Included from pipeline.hpp.

#include <atomic>
#include <cstdio>
#include <memory>
#include <mutex>

namespace hierf {

// --- configuration -----------------------------------------------------------

/// Flat key-value configuration with [section] headers; every default is
/// echoed into the report header for replayability.
struct Config {
    std::map<std::string, std::string> values;

    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> table = {
            {"data.input", ""},
            {"data.format", "auto"},
            {"data.exogenous", ""},
            {"clean.max_gap_hours", "2"},
            {"clean.window_hours", "8"},
            {"clean.gap_rule", "per_gap"},
            {"tree.mode", "spatial"},
            {"tree.threshold", "auto"},
            {"tree.max_leaves", "50"},
            {"tree.temporal_ks", "24,6,3,1"},
            {"tree.series", ""},
            {"tree.file", ""},
            {"features.acf_threshold", "0.25"},
            {"features.corr_threshold", "0.25"},
            {"features.max_lag", "48"},
            {"features.max_lag_blocks", "7"},
            {"features.top_k", "3"},
            {"windows.n_batches", "4"},
            {"windows.test_size", "24"},
            {"learner.alpha", "0.75"},
            {"learner.layers", "3"},
            {"learner.dropout", "0.2"},
            {"learner.learning_rate", "0.001"},
            {"learner.epochs", "80"},
            {"learner.batch_size", "32"},
            {"learner.seed", "1"},
            {"learner.momentum", "0.9"},
            {"learner.grad_clip", "5"},
            {"learner.schedule", "hvar"},
            {"learner.clamp", "off"},
            {"learner.clamp_quantile", "0"},
            {"grid.forecasting", "base,multi-task,hierarchical"},
            {"grid.reconciliation", "none,id,str,svar,hvar,cov,kcov"},
            {"run.output_dir", "out"},
            {"run.workers", "1"},
        };
        return table;
    }

    static Config from_string(const std::string& text) {
        Config cfg;
        std::istringstream is(text);
        std::string line, section;
        std::size_t line_no = 0;
        while (std::getline(is, line)) {
            ++line_no;
            while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
            std::size_t lead = line.find_first_not_of(" \t");
            if (lead == std::string::npos) continue;
            line = line.substr(lead);
            if (line[0] == '#' || line[0] == ';') continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw std::invalid_argument("config: malformed section at line " +
                                                std::to_string(line_no));
                section = line.substr(1, line.size() - 2);
                continue;
            }
            std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config: expected key = value at line " +
                                            std::to_string(line_no));
            std::string key = line.substr(0, eq);
            std::string value = line.substr(eq + 1);
            while (!key.empty() && key.back() == ' ') key.pop_back();
            std::size_t vlead = value.find_first_not_of(' ');
            value = vlead == std::string::npos ? "" : value.substr(vlead);
            const std::string full = section.empty() ? key : section + "." + key;
            if (!defaults().count(full))
                throw std::invalid_argument("config: unknown key '" + full + "'");
            cfg.values[full] = value;
        }
        return cfg;
    }

    static Config from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
        std::ostringstream buffer;
        buffer << is.rdbuf();
        return from_string(buffer.str());
    }

    std::string get(const std::string& key) const {
        auto it = values.find(key);
        if (it != values.end()) return it->second;
        auto def = defaults().find(key);
        if (def == defaults().end()) throw std::invalid_argument("config: unknown key '" + key + "'");
        return def->second;
    }

    double get_double(const std::string& key) const { return std::stod(get(key)); }
    std::int64_t get_int(const std::string& key) const { return std::stoll(get(key)); }
    bool get_flag(const std::string& key) const {
        const std::string v = get(key);
        return v == "on" || v == "true" || v == "1" || v == "yes";
    }

    std::vector<std::string> get_list(const std::string& key) const {
        std::vector<std::string> out;
        std::istringstream ss(get(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            std::size_t a = item.find_first_not_of(' ');
            std::size_t b = item.find_last_not_of(' ');
            if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
        }
        return out;
    }

    std::vector<std::size_t> get_sizes(const std::string& key) const {
        std::vector<std::size_t> out;
        for (const auto& item : get_list(key)) out.push_back(std::stoull(item));
        return out;
    }

    /// Every known key with the effective value, sorted.
    std::map<std::string, std::string> echo() const {
        std::map<std::string, std::string> out = defaults();
        for (const auto& [key, value] : values) out[key] = value;
        return out;
    }
};

namespace detail {

inline std::string fmt17(double v) {
    char buffer[64];
    std::snprintf(buffer, sizeof(buffer), "%.17g", v);
    return buffer;
}

}  // namespace detail

// --- assembled experiment inputs -------------------------------------------

struct HierarchyArtifacts {
    std::string mode;
    SummationMatrix s;
    std::map<std::string, int> level_of;
    std::optional<Tree> spatial;
    std::optional<Tree> temporal;
    std::optional<Dendrogram> dendrogram;
    std::vector<std::size_t> temporal_ks;
};

struct AssembledExperiment {
    HierarchyArtifacts hierarchy;
    FeatureSpec features;
    WindowedDataset base_view;    // per-node feature subsets for independent models
    WindowedDataset shared_view;  // bottom-layer (and temporal-level) features
    Mat truth;                    // concatenated test targets, forecast order
    std::vector<std::int64_t> test_origins;
};

namespace detail {

struct FeatureColumn {
    std::string source;    // node label or exogenous series
    std::size_t block = 1;  // temporal block size in hours
    std::size_t lag = 1;    // in block units; 0 marks a contemporaneous exogenous value
    bool exogenous = false;

    std::string name() const {
        if (exogenous)
            return source + "~exo" + (lag == 0 ? "" : "_lag" + std::to_string(lag) + "x" +
                                                          std::to_string(block));
        return source + "~k" + std::to_string(block) + "_lag" + std::to_string(lag);
    }
};

/// Hourly values of every hierarchy node over the aligned grid.
struct NodeGrid {
    std::vector<std::string> labels;  // y-layout order
    std::vector<Vec> values;          // per label, length T
    std::int64_t start = 0;           // first hour stamp
    std::size_t hours = 0;

    const Vec& of(const std::string& label) const {
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == label) return values[i];
        throw std::invalid_argument("node grid: unknown label '" + label + "'");
    }
};

inline NodeGrid node_grid(const SummationMatrix& s, const std::map<std::string, Vec>& leaf_series,
                          std::int64_t start, std::size_t hours) {
    NodeGrid grid;
    grid.labels = s.row_layout;
    grid.start = start;
    grid.hours = hours;
    std::vector<const Vec*> leaves;
    for (const auto& label : s.col_layout) leaves.push_back(&leaf_series.at(label));
    for (std::size_t i = 0; i < s.n; ++i) {
        Vec acc(hours, 0.0);
        for (auto j : s.rows[i]) {
            const Vec& leaf = *leaves[j];
            for (std::size_t t = 0; t < hours; ++t) acc[t] += leaf[t];
        }
        grid.values.push_back(std::move(acc));
    }
    return grid;
}

/// Lagged block sum of an hourly series: the block of `block` hours ending
/// lag blocks before the anchor index.
inline double lagged_block(const Vec& hourly, std::size_t anchor, std::size_t block, std::size_t lag) {
    const std::size_t offset = lag * block;
    double acc = 0.0;
    for (std::size_t i = 0; i < block; ++i) acc += hourly[anchor - offset + i];
    return acc;
}

}  // namespace detail

/**
 * Builds the mode-specific experiment inputs: hierarchy, feature spec
 * (fitted on the first training range only), rolling batches, and the
 * aligned truth matrix.
 */
inline AssembledExperiment assemble_experiment(const Config& cfg, const SeriesTable& cleaned) {
    const std::string mode = cfg.get("tree.mode");
    const std::set<std::string> exo_labels = [&] {
        std::set<std::string> out;
        for (const auto& label : cfg.get_list("data.exogenous")) out.insert(label);
        return out;
    }();

    std::map<std::string, Vec> hier_hourly, exo_hourly;
    std::int64_t start = std::numeric_limits<std::int64_t>::min();
    std::int64_t stop = std::numeric_limits<std::int64_t>::max();
    for (const auto& [label, points] : cleaned.series) {
        if (points.empty()) continue;
        start = std::max(start, points.begin()->first);
        stop = std::min(stop, points.rbegin()->first);
    }
    if (cleaned.series.empty() || start > stop)
        throw std::runtime_error("assemble: no overlapping data across the retained series");
    const std::size_t hours = static_cast<std::size_t>((stop - start) / 3600) + 1;
    for (const auto& [label, points] : cleaned.series) {
        Vec grid(hours);
        for (std::size_t t = 0; t < hours; ++t) {
            auto it = points.find(start + static_cast<std::int64_t>(t) * 3600);
            if (it == points.end())
                throw std::runtime_error("assemble: series '" + label + "' missing hour inside grid");
            grid[t] = it->second;
        }
        if (exo_labels.count(label)) exo_hourly[label] = std::move(grid);
        else hier_hourly[label] = std::move(grid);
    }
    if (hier_hourly.empty()) throw std::runtime_error("assemble: no hierarchy series after cleaning");

    AssembledExperiment out;
    HierarchyArtifacts& hier = out.hierarchy;
    hier.mode = mode;
    hier.temporal_ks = cfg.get_sizes("tree.temporal_ks");

    // spatial tree via Ward clustering + threshold cut + leaf cap, unless an
    // explicit tree file is given
    auto build_spatial = [&]() -> Tree {
        const std::string tree_file = cfg.get("tree.file");
        if (!tree_file.empty()) return read_tree_file(tree_file);
        std::vector<std::string> labels;
        for (const auto& [label, series] : hier_hourly) labels.push_back(label);
        if (labels.size() == 1) return build_tree({}, labels);
        Mat matrix(labels.size(), hours);
        for (std::size_t i = 0; i < labels.size(); ++i)
            for (std::size_t t = 0; t < hours; ++t) matrix(i, t) = hier_hourly.at(labels[i])[t];
        Dendrogram dendro = ward_cluster(matrix, labels);
        double threshold = 0.0;
        const std::string requested = cfg.get("tree.threshold");
        if (requested == "auto") {
            // collapse until the cluster count reaches ceil(sqrt(N))
            const std::size_t n = labels.size();
            const std::size_t target = static_cast<std::size_t>(std::ceil(std::sqrt(double(n))));
            const std::size_t collapse = n > target ? n - target : 0;
            if (collapse > 0) {
                const double lo = dendro.merges[collapse - 1].distance;
                const double hi = collapse < dendro.merges.size() ? dendro.merges[collapse].distance
                                                                  : lo * 2.0 + 1.0;
                threshold = 0.5 * (lo + hi);
            }
        } else {
            threshold = std::stod(requested);
        }
        Tree tree = cut(dendro, threshold);
        tree = cap_leaves(tree, static_cast<std::size_t>(cfg.get_int("tree.max_leaves")));
        hier.dendrogram = std::move(dendro);
        return tree;
    };

    std::vector<std::size_t> feature_ks;  // block sizes used for lag selection
    if (mode == "spatial") {
        hier.spatial = build_spatial();
        hier.s = summation_matrix(*hier.spatial);
        hier.level_of = hier.spatial->level;
        feature_ks = {1};
    } else if (mode == "temporal") {
        std::string series = cfg.get("tree.series");
        if (series.empty()) series = hier_hourly.begin()->first;
        if (!hier_hourly.count(series))
            throw std::invalid_argument("assemble: unknown temporal series '" + series + "'");
        hier_hourly = {{series, hier_hourly.at(series)}};
        hier.temporal = temporal_tree(hier.temporal_ks.front(), hier.temporal_ks);
        hier.s = temporal_summation(hier.temporal_ks.front(), hier.temporal_ks);
        hier.level_of = hier.temporal->level;
        feature_ks = hier.temporal_ks;
    } else if (mode == "spatiotemporal") {
        hier.spatial = build_spatial();
        hier.temporal = temporal_tree(hier.temporal_ks.front(), hier.temporal_ks);
        SummationMatrix ss = summation_matrix(*hier.spatial);
        SummationMatrix st = temporal_summation(hier.temporal_ks.front(), hier.temporal_ks);
        auto [comp, layout] = compose(ss, st, ss.layout(), st.layout());
        hier.s = std::move(comp);
        const int kt = hier.temporal->depth();
        for (const auto& [sl, lv_s] : hier.spatial->level)
            for (const auto& [tl, lv_t] : hier.temporal->level)
                hier.level_of[compose_label(sl, tl)] = (lv_s - 1) * kt + lv_t;
        feature_ks = hier.temporal_ks;
    } else {
        throw std::invalid_argument("assemble: unknown tree.mode '" + mode + "'");
    }

    const bool day_mode = mode != "spatial";
    const std::size_t day = 24;

    // spatial node series over the grid (for features and targets)
    const SummationMatrix spatial_s =
        mode == "temporal" ? SummationMatrix{} : summation_matrix(*hier.spatial);
    std::map<std::string, Vec> node_hourly;
    if (mode == "temporal") {
        node_hourly = hier_hourly;  // the single building series
    } else {
        detail::NodeGrid grid = detail::node_grid(spatial_s, hier_hourly, start, hours);
        for (std::size_t i = 0; i < grid.labels.size(); ++i)
            node_hourly[grid.labels[i]] = std::move(grid.values[i]);
    }

    // history horizon in hours implied by the lag scan bounds
    const std::size_t max_lag = static_cast<std::size_t>(cfg.get_int("features.max_lag"));
    const std::size_t max_lag_blocks = static_cast<std::size_t>(cfg.get_int("features.max_lag_blocks"));
    std::size_t history = 0;
    for (std::size_t k : feature_ks)
        history = std::max(history, (k == 1 ? max_lag : max_lag_blocks * k));
    if (day_mode) history = std::max(history, day);

    // sample anchors: every hour (spatial) or every full day with history
    std::vector<std::size_t> anchors;  // grid index of each sample origin
    if (!day_mode) {
        for (std::size_t t = history; t < hours; ++t) anchors.push_back(t);
    } else {
        const std::int64_t first_day =
            (start + static_cast<std::int64_t>(history) * 3600 + (86400 - 1)) / 86400 * 86400;
        for (std::int64_t at = first_day; at + 86400 <= stop + 3600; at += 86400)
            anchors.push_back(static_cast<std::size_t>((at - start) / 3600));
    }
    const std::size_t n_batches = static_cast<std::size_t>(cfg.get_int("windows.n_batches"));
    const std::size_t test_size = static_cast<std::size_t>(cfg.get_int("windows.test_size"));
    if (anchors.size() < 8)
        throw std::runtime_error("assemble: only " + std::to_string(anchors.size()) +
                                 " usable sample origins; provide more data");
    const WindowPlan plan = plan_windows(anchors.size(), n_batches, test_size);

    // feature selection on the first training range only
    const std::size_t fit_anchor_count = plan.splits.front().train_end;
    const std::size_t fit_hours_end = anchors[fit_anchor_count - 1] + (day_mode ? day : 1);
    std::map<std::string, Vec> fit_series;
    for (const auto& [label, series] : node_hourly)
        fit_series[label] = Vec(series.begin(), series.begin() + static_cast<long>(fit_hours_end));
    std::map<std::string, Vec> fit_exo;
    for (const auto& [label, series] : exo_hourly)
        fit_exo[label] = Vec(series.begin(), series.begin() + static_cast<long>(fit_hours_end));
    out.features = build_features(
        fit_series, feature_ks, fit_exo, cfg.get_double("features.acf_threshold"),
        cfg.get_double("features.corr_threshold"),
        day_mode ? max_lag_blocks : max_lag, static_cast<std::size_t>(cfg.get_int("features.top_k")),
        start + static_cast<std::int64_t>(fit_hours_end - 1) * 3600);
    // hourly levels may scan further back than block levels
    if (day_mode)
        for (auto& [label, node] : out.features.per_node) {
            const Vec& series = fit_series.at(label);
            node.lags_per_level[1] =
                detail::select_lags(series, max_lag, out.features.acf_threshold, out.features.top_k);
        }

    // feature columns: per node, per level, the selected lags; exogenous after
    std::vector<detail::FeatureColumn> columns;
    std::set<std::string> leaf_set;
    if (mode == "temporal") leaf_set.insert(node_hourly.begin()->first);
    else
        leaf_set.insert(spatial_s.col_layout.begin(), spatial_s.col_layout.end());
    for (const auto& [label, node] : out.features.per_node)
        for (const auto& [block, lags] : node.lags_per_level)
            for (std::size_t lag : lags) columns.push_back({label, block, lag, false});
    std::set<std::string> exo_used;
    for (const auto& [label, node] : out.features.per_node)
        for (const auto& exo : node.exogenous) exo_used.insert(exo);
    for (const auto& exo : exo_used)
        columns.push_back({exo, day_mode ? day : 1, day_mode ? std::size_t{1} : std::size_t{0}, true});

    // per-node and shared column subsets
    std::map<std::string, std::vector<std::size_t>> for_node;
    std::vector<std::size_t> shared_cols;
    for (std::size_t c = 0; c < columns.size(); ++c) {
        const auto& col = columns[c];
        if (col.exogenous) {
            for (const auto& [label, node] : out.features.per_node)
                if (std::find(node.exogenous.begin(), node.exogenous.end(), col.source) !=
                    node.exogenous.end())
                    for_node[label].push_back(c);
            shared_cols.push_back(c);
        } else {
            if (mode == "temporal") {
                // one building: every node shares the level-lag columns
                for (const auto& label : hier.s.row_layout) for_node[label].push_back(c);
                shared_cols.push_back(c);
            } else if (mode == "spatial") {
                for_node[col.source].push_back(c);
                if (leaf_set.count(col.source)) shared_cols.push_back(c);
            } else {
                // spatiotemporal: the spatial component's lag columns
                for (const auto& label : hier.s.row_layout) {
                    const auto bar = label.find('|');
                    if (label.substr(0, bar) == col.source) for_node[label].push_back(c);
                }
                if (leaf_set.count(col.source)) shared_cols.push_back(c);
            }
        }
    }

    // materialize features and targets for every anchor
    const std::size_t n = hier.s.n;
    Mat all_x(anchors.size(), columns.size());
    Mat all_y(anchors.size(), n);
    const std::string temporal_label = mode == "temporal" ? node_hourly.begin()->first : "";
    for (std::size_t row = 0; row < anchors.size(); ++row) {
        const std::size_t at = anchors[row];
        for (std::size_t c = 0; c < columns.size(); ++c) {
            const auto& col = columns[c];
            const Vec& series = col.exogenous ? exo_hourly.at(col.source) : node_hourly.at(col.source);
            all_x(row, c) = col.lag == 0 ? series[at] : detail::lagged_block(series, at, col.block, col.lag);
        }
        if (mode == "spatial") {
            for (std::size_t i = 0; i < n; ++i) all_y(row, i) = node_hourly.at(hier.s.row_layout[i])[at];
        } else if (mode == "temporal") {
            const Vec& series = node_hourly.at(temporal_label);
            Vec b(day);
            for (std::size_t h = 0; h < day; ++h) b[h] = series[at + h];
            const Vec y = aggregate(hier.s, b);
            for (std::size_t i = 0; i < n; ++i) all_y(row, i) = y[i];
        } else {
            Vec b(spatial_s.m * day);
            for (std::size_t j = 0; j < spatial_s.m; ++j) {
                const Vec& leaf = node_hourly.at(spatial_s.col_layout[j]);
                for (std::size_t h = 0; h < day; ++h) b[j * day + h] = leaf[at + h];
            }
            const Vec y = aggregate(hier.s, b);
            for (std::size_t i = 0; i < n; ++i) all_y(row, i) = y[i];
        }
    }

    // slice the plan into the two dataset views
    auto slice = [&](const std::vector<std::size_t>& cols,
                     const std::map<std::string, std::vector<std::size_t>>& node_map)
        -> WindowedDataset {
        WindowedDataset data;
        data.node_labels = hier.s.row_layout;
        std::map<std::size_t, std::size_t> remap;
        for (std::size_t i = 0; i < cols.size(); ++i) {
            data.feature_labels.push_back(columns[cols[i]].name());
            remap[cols[i]] = i;
        }
        for (const auto& [label, subset] : node_map) {
            std::vector<std::size_t> mapped;
            for (std::size_t c : subset)
                if (remap.count(c)) mapped.push_back(remap.at(c));
            data.features_for_node[label] = std::move(mapped);
        }
        const std::size_t span_hours = day_mode ? day : 1;
        for (const auto& split : plan.splits) {
            WindowBatch batch;
            batch.train_x = Mat(split.train_end, cols.size());
            batch.train_y = Mat(split.train_end, n);
            for (std::size_t r = 0; r < split.train_end; ++r) {
                for (std::size_t i = 0; i < cols.size(); ++i) batch.train_x(r, i) = all_x(r, cols[i]);
                for (std::size_t i = 0; i < n; ++i) batch.train_y(r, i) = all_y(r, i);
            }
            batch.test_x = Mat(split.test_end - split.test_begin, cols.size());
            batch.test_y = Mat(split.test_end - split.test_begin, n);
            for (std::size_t r = split.test_begin; r < split.test_end; ++r) {
                for (std::size_t i = 0; i < cols.size(); ++i)
                    batch.test_x(r - split.test_begin, i) = all_x(r, cols[i]);
                for (std::size_t i = 0; i < n; ++i) batch.test_y(r - split.test_begin, i) = all_y(r, i);
                batch.test_origins.push_back(start + static_cast<std::int64_t>(anchors[r]) * 3600);
            }
            batch.train_end = start + static_cast<std::int64_t>(anchors[split.train_end - 1] +
                                                                span_hours - 1) *
                                          3600;
            batch.test_start = start + static_cast<std::int64_t>(anchors[split.test_begin]) * 3600;
            data.batches.push_back(std::move(batch));
        }
        return data;
    };

    std::vector<std::size_t> all_cols(columns.size());
    for (std::size_t c = 0; c < columns.size(); ++c) all_cols[c] = c;
    out.base_view = slice(all_cols, for_node);
    out.shared_view = slice(shared_cols, {});

    // truth rows in forecast (concatenated test) order
    std::size_t total_test = 0;
    for (const auto& split : plan.splits) total_test += split.test_end - split.test_begin;
    out.truth = Mat(total_test, n);
    std::size_t cursor = 0;
    for (const auto& split : plan.splits)
        for (std::size_t r = split.test_begin; r < split.test_end; ++r, ++cursor) {
            for (std::size_t i = 0; i < n; ++i) out.truth(cursor, i) = all_y(r, i);
            out.test_origins.push_back(start + static_cast<std::int64_t>(anchors[r]) * 3600);
        }
    return out;
}

// --- the experiment grid ---------------------------------------------------

struct ExperimentResult {
    EvaluationReport report;
    bool all_ok = false;
    std::string output_dir;
};

namespace detail {

inline void write_bundles_tsv(const std::string& path, const std::vector<ForecastBundle>& bundles,
                              const std::vector<std::string>& labels) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "origin";
    for (const auto& label : labels) os << '\t' << label;
    os << '\n';
    for (const auto& bundle : bundles) {
        os << format_timestamp(bundle.origin);
        for (double v : bundle.values) os << '\t' << fmt17(v);
        os << '\n';
    }
}

inline std::vector<ForecastBundle> read_bundles_tsv(const std::string& path,
                                                    std::vector<std::string>* labels_out = nullptr) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("empty forecast file: " + path);
    std::vector<std::string> header;
    {
        std::istringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, '\t')) header.push_back(tok);
    }
    if (header.empty() || header[0] != "origin")
        throw std::runtime_error("forecast file must start with an origin column: " + path);
    if (labels_out) labels_out->assign(header.begin() + 1, header.end());
    std::vector<ForecastBundle> bundles;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tok;
        std::getline(ss, tok, '\t');
        ForecastBundle bundle;
        bundle.origin = parse_timestamp(tok);
        while (std::getline(ss, tok, '\t')) bundle.values.push_back(std::stod(tok));
        if (bundle.values.size() + 1 != header.size())
            throw std::runtime_error("ragged forecast row in " + path);
        bundles.push_back(std::move(bundle));
    }
    return bundles;
}

/// Reconciliation-time sigma schedule: batch 0 falls back to id (str and id
/// are residual-free and always available), later batches use the estimator
/// fitted on the strictly earlier test residuals of the same method.
inline CovarianceEstimate scheduled_sigma(CovMethod method, const SummationMatrix& s,
                                          const ResidualStore& history,
                                          const std::map<std::string, int>& level_of) {
    if (method == CovMethod::id || method == CovMethod::str)
        return estimate(method, s, ResidualStore{});
    const std::size_t need = (method == CovMethod::cov || method == CovMethod::kcov) ? 3 : 2;
    if (history.sample_count() < need) return estimate(CovMethod::id, s, ResidualStore{});
    return estimate(method, s, history, level_of);
}

}  // namespace detail

/**
 * Runs the full (forecasting x reconciliation) grid described by the
 * config: trains each forecasting method once, reconciles its forecasts
 * under every requested estimator with the adaptive sigma schedule, scores
 * every cell, and writes forecasts, sigma audits, and the report pair.
 * Deterministic under a fixed config and seed.
 */
inline ExperimentResult run_experiment(const Config& cfg) {
    namespace fs = std::filesystem;
    const fs::path out_dir = cfg.get("run.output_dir");
    fs::create_directories(out_dir / "forecasts");
    fs::create_directories(out_dir / "sigma");

    ExperimentResult result;
    result.output_dir = out_dir.string();
    EvaluationReport& report = result.report;
    for (const auto& [key, value] : cfg.echo()) report.header.push_back(key + " = " + value);

    // ingest -> hourly -> clean
    SeriesTable raw = ingest(cfg.get("data.input"), cfg.get("data.format"));
    const std::size_t ingested = raw.series.size();
    CleanReport clean_report;
    SeriesTable cleaned = clean(resample_hourly(raw), &clean_report,
                                static_cast<int>(cfg.get_int("clean.max_gap_hours")),
                                static_cast<int>(cfg.get_int("clean.window_hours")),
                                cfg.get("clean.gap_rule") == "per_gap");
    {
        std::ofstream drops(out_dir / "drops.log");
        for (const auto& [label, reason] : clean_report.dropped)
            drops << label << '\t' << reason << '\n';
    }
    if (cleaned.series.size() + clean_report.dropped.size() != ingested)
        throw std::runtime_error("run: retained + dropped series do not add up");

    AssembledExperiment assembled = assemble_experiment(cfg, cleaned);
    const SummationMatrix& s = assembled.hierarchy.s;
    const Vec kappa = structural_vector(s);
    const BottomExtractor g = bottom_extractor(s);

    // persist hierarchy artifacts
    if (assembled.hierarchy.mode == "spatiotemporal") {
        std::ofstream os(out_dir / "tree.txt");
        write_composed_tree(os, *assembled.hierarchy.spatial, *assembled.hierarchy.temporal, "SoT");
    } else if (assembled.hierarchy.spatial) {
        write_tree_file((out_dir / "tree.txt").string(), *assembled.hierarchy.spatial);
    } else {
        write_tree_file((out_dir / "tree.txt").string(), *assembled.hierarchy.temporal);
    }
    if (assembled.hierarchy.dendrogram) {
        std::ofstream os(out_dir / "dendrogram.txt");
        write_dendrogram(os, *assembled.hierarchy.dendrogram);
    }
    {
        std::ofstream os(out_dir / "features.json");
        os << to_json(assembled.features).dump(2) << '\n';
    }

    // learner configuration shared across methods
    const std::size_t n = s.n;
    NetConfig shared_cfg = NetConfig::standard(
        std::max<std::size_t>(1, assembled.shared_view.feature_labels.size()), n,
        static_cast<std::size_t>(cfg.get_int("learner.layers")), cfg.get_double("learner.dropout"));
    shared_cfg.alpha = cfg.get_double("learner.alpha");
    shared_cfg.learning_rate = cfg.get_double("learner.learning_rate");
    shared_cfg.epochs = static_cast<std::size_t>(cfg.get_int("learner.epochs"));
    shared_cfg.batch_size = static_cast<std::size_t>(cfg.get_int("learner.batch_size"));
    shared_cfg.seed = static_cast<std::uint64_t>(cfg.get_int("learner.seed"));
    shared_cfg.momentum = cfg.get_double("learner.momentum");
    shared_cfg.grad_clip = cfg.get_double("learner.grad_clip");

    const std::vector<std::string> fmethods = cfg.get_list("grid.forecasting");
    const std::vector<std::string> rmethods = cfg.get_list("grid.reconciliation");
    const CovMethod default_schedule = cov_method_from(cfg.get("learner.schedule"));

    struct MethodRun {
        std::string name;
        std::string error;
        TrainResult trained;
    };
    std::vector<MethodRun> runs(fmethods.size());

    auto train_one = [&](std::size_t index) {
        MethodRun& run = runs[index];
        run.name = fmethods[index];
        try {
            std::string token = run.name;
            CovMethod schedule = default_schedule;
            if (token.rfind("hierarchical:", 0) == 0) {
                schedule = cov_method_from(token.substr(13));
                token = "hierarchical";
            }
            if (token == "base") {
                run.trained = train(TrainMode::base, assembled.base_view, s,
                                    assembled.hierarchy.level_of, shared_cfg, schedule);
            } else if (token == "multi-task") {
                run.trained = train(TrainMode::multi_task, assembled.shared_view, s,
                                    assembled.hierarchy.level_of, shared_cfg, schedule);
            } else if (token == "hierarchical") {
                run.trained = train(TrainMode::hierarchical, assembled.shared_view, s,
                                    assembled.hierarchy.level_of, shared_cfg, schedule);
            } else {
                throw std::invalid_argument("unknown forecasting method '" + run.name + "'");
            }
        } catch (const std::exception& e) {
            run.error = e.what();
        }
    };

    const std::size_t workers =
        std::max<std::size_t>(1, static_cast<std::size_t>(cfg.get_int("run.workers")));
    if (workers <= 1 || fmethods.size() <= 1) {
        for (std::size_t i = 0; i < fmethods.size(); ++i) train_one(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(workers, fmethods.size()); ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < fmethods.size(); i = next.fetch_add(1))
                    train_one(i);
            });
        for (auto& t : pool) t.join();
    }

    // optional negative-domain clamp on emitted forecasts
    const bool clamp_on = cfg.get_flag("learner.clamp");
    Vec clamp_floor(n, 0.0);
    if (clamp_on) {
        const double q = cfg.get_double("learner.clamp_quantile");
        const Mat& train0 = assembled.shared_view.batches.front().train_y;
        for (std::size_t i = 0; i < n; ++i) {
            Vec column(train0.rows());
            for (std::size_t t = 0; t < train0.rows(); ++t) column[t] = train0(t, i);
            std::sort(column.begin(), column.end());
            const std::size_t at = std::min(column.size() - 1,
                                            static_cast<std::size_t>(q * (column.size() - 1)));
            clamp_floor[i] = column[at];
        }
    }

    const std::size_t batches = assembled.shared_view.batches.size();
    std::size_t anti_leakage_checks = 0;
    auto assert_before = [&anti_leakage_checks](std::int64_t read_end, std::int64_t test_start,
                                                const std::string& what) {
        if (read_end >= test_start)
            throw std::runtime_error("anti-leakage violation: " + what);
        ++anti_leakage_checks;
    };

    bool all_ok = true;
    for (std::size_t fi = 0; fi < fmethods.size(); ++fi) {
        MethodRun& run = runs[fi];
        if (!run.error.empty()) {
            for (const auto& rmethod : rmethods) {
                CellScores& cell = report.cell(run.name, rmethod);
                cell.ok = false;
                cell.error = run.error;
            }
            all_ok = false;
            continue;
        }

        // leakage provenance for the learner path
        for (std::size_t b = 0; b < batches; ++b) {
            assert_before(run.trained.scaler_fit_ends[b],
                          assembled.shared_view.batches[b].test_start, "scaler fit for " + run.name);
            assert_before(assembled.features.fit_end, assembled.shared_view.batches[b].test_start,
                          "feature selection for " + run.name);
        }

        std::vector<ForecastBundle> raw_bundles = run.trained.forecasts;
        if (clamp_on)
            for (auto& bundle : raw_bundles)
                for (std::size_t i = 0; i < n; ++i)
                    bundle.values[i] = std::max(bundle.values[i], clamp_floor[i]);

        // sigma audit of the training schedule
        for (std::size_t b = 0; b < run.trained.sigmas_used.size(); ++b) {
            std::ofstream os(out_dir / "sigma" /
                             (run.name + "__train__batch" + std::to_string(b) + ".txt"));
            write_covariance(os, run.trained.sigmas_used[b]);
        }

        // final-batch model checkpoints
        fs::create_directories(out_dir / "models");
        for (std::size_t m = 0; m < run.trained.models.size(); ++m) {
            std::ofstream os(out_dir / "models" /
                             (run.name + "__model" + std::to_string(m) + ".txt"));
            write_model(os, run.trained.models[m], shared_cfg.seed);
        }

        for (const auto& rmethod : rmethods) {
            CellScores& cell = report.cell(run.name, rmethod);
            try {
                std::vector<ForecastBundle> scored;
                if (rmethod == "none") {
                    scored = raw_bundles;
                } else {
                    const CovMethod method = cov_method_from(rmethod);
                    ResidualStore history;
                    std::size_t cursor = 0;
                    std::int64_t history_end = std::numeric_limits<std::int64_t>::min();
                    for (std::size_t b = 0; b < batches; ++b) {
                        const WindowBatch& batch = assembled.shared_view.batches[b];
                        if (b > 0 && history_end > std::numeric_limits<std::int64_t>::min())
                            assert_before(history_end, batch.test_start,
                                          "sigma schedule for " + run.name + "/" + rmethod);
                        CovarianceEstimate sigma =
                            detail::scheduled_sigma(method, s, history, assembled.hierarchy.level_of);
                        {
                            std::ofstream os(out_dir / "sigma" /
                                             (run.name + "__" + rmethod + "__batch" +
                                              std::to_string(b) + ".txt"));
                            write_covariance(os, sigma);
                        }
                        GlsProjector projector(s, sigma);
                        for (std::size_t t = 0; t < batch.test_origins.size(); ++t, ++cursor) {
                            ForecastBundle reconciled;
                            reconciled.origin = raw_bundles[cursor].origin;
                            reconciled.values = projector.apply(raw_bundles[cursor].values);
                            reconciled.tag = BundleTag::reconciled;
                            reconciled.provenance = rmethod;
                            scored.push_back(std::move(reconciled));
                            Vec residual(n);
                            for (std::size_t i = 0; i < n; ++i)
                                residual[i] = batch.test_y(t, i) - raw_bundles[cursor].values[i];
                            history.add_sample(s.row_layout, residual);
                            history_end = std::max(history_end, raw_bundles[cursor].origin);
                        }
                    }
                }
                detail::write_bundles_tsv((out_dir / "forecasts" / (run.name + "__" + rmethod + ".tsv"))
                                              .string(),
                                          scored, s.row_layout);

                // scores against the aligned truth
                Mat errors(scored.size(), n);
                for (std::size_t r = 0; r < scored.size(); ++r)
                    for (std::size_t i = 0; i < n; ++i)
                        errors(r, i) = assembled.truth(r, i) - scored[r].values[i];
                cell.hier_ms3e = ms3e(errors, kappa).overall;
                cell.coh_ms3e = coherency_ms3e(scored, s, g, kappa);
                for (std::size_t i = 0; i < n; ++i) {
                    Vec truth_col(scored.size()), pred_col(scored.size());
                    for (std::size_t r = 0; r < scored.size(); ++r) {
                        truth_col[r] = assembled.truth(r, i);
                        pred_col[r] = scored[r].values[i];
                    }
                    cell.mse_per_node[s.row_layout[i]] = mse(truth_col, pred_col);
                }
                if (rmethod != "none") {
                    double magnitude = 0.0;
                    for (const auto& bundle : scored) magnitude = std::max(magnitude, norm_inf(bundle.values));
                    if (cell.coh_ms3e > 1e-12 * (1.0 + magnitude * magnitude))
                        throw std::runtime_error("reconciled cell failed the coherency bound");
                }
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.ok = false;
                cell.error = e.what();
                all_ok = false;
            }
        }
    }

    // RelMSE per level against the base / none cell when available
    const auto base_cell = report.cells.find({"base", "none"});
    if (base_cell != report.cells.end() && base_cell->second.ok) {
        const auto base_levels =
            per_level_mse(base_cell->second.mse_per_node, assembled.hierarchy.level_of);
        for (auto& [key, cell] : report.cells) {
            if (!cell.ok) continue;
            const auto levels = per_level_mse(cell.mse_per_node, assembled.hierarchy.level_of);
            for (const auto& [level, value] : levels) {
                const double base_value = base_levels.at(level);
                if (base_value > 0.0) cell.relmse_per_level[level] = relmse(value, base_value);
            }
        }
    }

    report.header.push_back("anti_leakage = pass (" + std::to_string(anti_leakage_checks) +
                            " checks)");
    report.header.push_back("tree = mode:" + assembled.hierarchy.mode + " n:" + std::to_string(s.n) +
                            " m:" + std::to_string(s.m));

    // emit the report pair
    {
        std::ofstream os(out_dir / "report.txt");
        os << "# hierf experiment report\n# units: kWh^2\n";
        for (const auto& line : report.header) os << "# " << line << '\n';
        int max_level = 0;
        for (const auto& [label, level] : assembled.hierarchy.level_of)
            max_level = std::max(max_level, level);
        os << "forecasting\treconciliation\thier_ms3e\tcoh_ms3e";
        for (int k = 1; k <= max_level; ++k) os << "\trelmse_k" << k;
        os << '\n';
        for (const auto& fmethod : fmethods)
            for (const auto& rmethod : rmethods) {
                const CellScores& cell = report.cells.at({fmethod, rmethod});
                os << fmethod << '\t' << rmethod << '\t';
                if (!cell.ok) {
                    os << "ERROR\t" << cell.error << '\n';
                    continue;
                }
                os << detail::fmt17(cell.hier_ms3e) << '\t' << detail::fmt17(cell.coh_ms3e);
                for (int k = 1; k <= max_level; ++k) {
                    auto it = cell.relmse_per_level.find(k);
                    os << '\t' << (it == cell.relmse_per_level.end() ? "-" : detail::fmt17(it->second));
                }
                os << '\n';
            }
    }
    {
        nlohmann::json doc;
        doc["units"] = "kWh^2";
        for (const auto& line : report.header) doc["config"].push_back(line);
        doc["anti_leakage_checks"] = anti_leakage_checks;
        doc["hierarchy"] = {{"mode", assembled.hierarchy.mode}, {"n", s.n}, {"m", s.m}};
        for (const auto& [key, cell] : report.cells) {
            nlohmann::json entry;
            entry["ok"] = cell.ok;
            if (!cell.ok) entry["error"] = cell.error;
            else {
                entry["hier_ms3e"] = cell.hier_ms3e;
                entry["coh_ms3e"] = cell.coh_ms3e;
                for (const auto& [level, value] : cell.relmse_per_level)
                    entry["relmse"]["k" + std::to_string(level)] = value;
                for (const auto& [label, value] : cell.mse_per_node) entry["mse"][label] = value;
            }
            doc["cells"][key.first + "__" + key.second] = entry;
        }
        std::ofstream os(out_dir / "report.json");
        os << doc.dump(2) << '\n';
    }

    result.all_ok = all_ok;
    return result;
}

}  // namespace hierf
