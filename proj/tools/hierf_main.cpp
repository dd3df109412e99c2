// hierf: batch CLI over the hierarchical-forecasting toolkit.
//
// Subcommands: ingest, tree (build | cut | temporal | compose | prune),
// features, train, reconcile, evaluate, run.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "hierf/hierf.hpp"

namespace fs = std::filesystem;
using namespace hierf;

namespace {

struct TreeBundle {
    SummationMatrix s;
    std::map<std::string, int> level_of;
};

/// Loads a plain or composed tree file into its summation structure.
TreeBundle load_tree_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::string first_line;
    std::getline(is, first_line);
    is.seekg(0);
    TreeBundle out;
    if (first_line.rfind("#compose:", 0) == 0) {
        ComposedTreeFile comp = read_composed_tree(is);
        const Tree& a = comp.order == "SoT" ? comp.first : comp.second;
        const Tree& b = comp.order == "SoT" ? comp.second : comp.first;
        SummationMatrix sa = summation_matrix(comp.first);
        SummationMatrix sb = summation_matrix(comp.second);
        if (comp.order == "ToS") std::swap(sa, sb);
        auto [s, layout] = compose(sa, sb, sa.layout(), sb.layout());
        out.s = std::move(s);
        const int kb = b.depth();
        for (const auto& [la, lva] : a.level)
            for (const auto& [lb, lvb] : b.level)
                out.level_of[compose_label(la, lb)] = (lva - 1) * kb + lvb;
    } else {
        Tree tree = read_tree(is);
        out.s = summation_matrix(tree);
        out.level_of = tree.level;
    }
    return out;
}

void write_matrix_file(const std::string& path, const SummationMatrix& s) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "#smatrix " << s.n << ' ' << s.m << '\n';
    for (std::size_t i = 0; i < s.n; ++i) {
        os << s.row_layout[i] << ':';
        for (std::size_t k = 0; k < s.rows[i].size(); ++k) os << (k ? "," : " ") << s.rows[i][k];
        os << '\n';
    }
    os << "#leaves:";
    for (const auto& leaf : s.col_layout) os << ' ' << leaf;
    os << '\n';
}

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
    Config cfg = Config::from_file(path);
    for (const auto& item : overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("override must look like section.key=value: " + item);
        const std::string key = item.substr(0, eq);
        if (!Config::defaults().count(key)) throw std::invalid_argument("unknown config key: " + key);
        cfg.values[key] = item.substr(eq + 1);
    }
    return cfg;
}

SeriesTable load_cleaned(const Config& cfg, CleanReport* report) {
    SeriesTable raw = ingest(cfg.get("data.input"), cfg.get("data.format"));
    return clean(resample_hourly(raw), report, static_cast<int>(cfg.get_int("clean.max_gap_hours")),
                 static_cast<int>(cfg.get_int("clean.window_hours")),
                 cfg.get("clean.gap_rule") == "per_gap");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical forecasting toolkit"};
    app.require_subcommand(1);
    int exit_code = 0;

    // --- ingest ------------------------------------------------------------
    auto* ingest_cmd = app.add_subcommand("ingest", "parse, resample hourly, and clean a CSV");
    std::string in_path, in_format = "auto", out_path = "cleaned.csv", gap_rule = "per_gap";
    int max_gap = 2, window_hours = 8;
    ingest_cmd->add_option("--input", in_path, "long or wide CSV")->required();
    ingest_cmd->add_option("--format", in_format, "long | wide | auto");
    ingest_cmd->add_option("--output", out_path, "cleaned long CSV");
    ingest_cmd->add_option("--max-gap-hours", max_gap, "drop series with longer gaps");
    ingest_cmd->add_option("--window-hours", window_hours, "moving-average fill window");
    ingest_cmd->add_option("--gap-rule", gap_rule, "per_gap | total");
    ingest_cmd->callback([&] {
        CleanReport report;
        SeriesTable cleaned = clean(resample_hourly(ingest(in_path, in_format)), &report, max_gap,
                                    window_hours, gap_rule == "per_gap");
        std::ofstream os(out_path);
        write_table_csv(os, cleaned);
        std::cout << "retained " << cleaned.series.size() << " series, dropped "
                  << report.dropped.size() << ", filled " << report.filled << " gaps\n";
        for (const auto& [label, reason] : report.dropped)
            std::cout << "dropped " << label << ": " << reason << '\n';
    });

    // --- tree -------------------------------------------------------------
    auto* tree_cmd = app.add_subcommand("tree", "build, cut, compose, or prune hierarchies");
    tree_cmd->require_subcommand(1);

    auto* tb = tree_cmd->add_subcommand("build", "validate an edge-list tree file");
    std::string tb_edges, tb_out;
    tb->add_option("--edges", tb_edges, "tree file (parent<TAB>child lines + #leaves:)")->required();
    tb->add_option("--output", tb_out, "normalized tree file");
    tb->callback([&] {
        Tree tree = read_tree_file(tb_edges);
        std::cout << "n=" << tree.n() << " m=" << tree.m() << " levels=" << tree.depth() << '\n';
        const auto redundant = redundant_nodes(tree);
        if (!redundant.empty()) {
            std::cout << "redundant single-child nodes:";
            for (const auto& label : redundant) std::cout << ' ' << label;
            std::cout << '\n';
        }
        if (!tb_out.empty()) write_tree_file(tb_out, tree);
    });

    auto* tc = tree_cmd->add_subcommand("cut", "Ward-cluster a table and cut the dendrogram");
    std::string tc_input, tc_threshold = "auto", tc_out = "tree.txt", tc_dendro;
    std::size_t tc_cap = 50;
    tc->add_option("--input", tc_input, "cleaned CSV of target series")->required();
    tc->add_option("--threshold", tc_threshold, "cut distance, or 'auto'");
    tc->add_option("--max-leaves", tc_cap, "leaf cap after cutting");
    tc->add_option("--output", tc_out, "tree file");
    tc->add_option("--dendrogram", tc_dendro, "merge-list export");
    tc->callback([&] {
        SeriesTable table = ingest(tc_input, "auto");
        std::vector<std::string> labels = table.labels();
        std::size_t hours = std::numeric_limits<std::size_t>::max();
        for (const auto& [label, points] : table.series) hours = std::min(hours, points.size());
        Mat matrix(labels.size(), hours);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            std::size_t t = 0;
            for (const auto& [stamp, value] : table.series.at(labels[i])) {
                if (t >= hours) break;
                matrix(i, t++) = value;
            }
        }
        Dendrogram dendro = ward_cluster(matrix, labels);
        double threshold = 0.0;
        if (tc_threshold == "auto") {
            const std::size_t target =
                static_cast<std::size_t>(std::ceil(std::sqrt(double(labels.size()))));
            const std::size_t collapse = labels.size() > target ? labels.size() - target : 0;
            if (collapse > 0) {
                const double lo = dendro.merges[collapse - 1].distance;
                const double hi = collapse < dendro.merges.size() ? dendro.merges[collapse].distance
                                                                  : lo * 2.0 + 1.0;
                threshold = 0.5 * (lo + hi);
            }
        } else {
            threshold = std::stod(tc_threshold);
        }
        Tree tree = cap_leaves(cut(dendro, threshold), tc_cap);
        write_tree_file(tc_out, tree);
        if (!tc_dendro.empty()) {
            std::ofstream os(tc_dendro);
            write_dendrogram(os, dendro);
        }
        std::cout << "threshold=" << threshold << " n=" << tree.n() << " m=" << tree.m()
                  << " levels=" << tree.depth() << '\n';
    });

    auto* tt = tree_cmd->add_subcommand("temporal", "block-size temporal hierarchy");
    std::size_t tt_m = 24;
    std::string tt_ks = "24,6,3,1", tt_out = "temporal.txt";
    tt->add_option("--m", tt_m, "leaves per cycle");
    tt->add_option("--ks", tt_ks, "descending block sizes");
    tt->add_option("--output", tt_out, "tree file");
    tt->callback([&] {
        std::vector<std::size_t> ks;
        std::istringstream ss(tt_ks);
        std::string tok;
        while (std::getline(ss, tok, ',')) ks.push_back(std::stoull(tok));
        Tree tree = temporal_tree(tt_m, ks);
        write_tree_file(tt_out, tree);
        SummationMatrix s = temporal_summation(tt_m, ks);
        std::cout << "n=" << s.n << " m=" << s.m << '\n';
    });

    auto* tk = tree_cmd->add_subcommand("compose", "Kronecker-compose two tree files");
    std::string tk_first, tk_second, tk_order = "SoT", tk_out = "composed.txt", tk_matrix;
    tk->add_option("--first", tk_first, "spatial factor tree file")->required();
    tk->add_option("--second", tk_second, "temporal factor tree file")->required();
    tk->add_option("--order", tk_order, "SoT | ToS");
    tk->add_option("--output", tk_out, "composed tree file");
    tk->add_option("--matrix", tk_matrix, "also write the composed summation matrix");
    tk->callback([&] {
        Tree first = read_tree_file(tk_first);
        Tree second = read_tree_file(tk_second);
        {
            std::ofstream os(tk_out);
            write_composed_tree(os, first, second, tk_order);
        }
        TreeBundle bundle = load_tree_file(tk_out);
        std::cout << "n=" << bundle.s.n << " m=" << bundle.s.m << '\n';
        if (!tk_matrix.empty()) write_matrix_file(tk_matrix, bundle.s);
    });

    auto* tp = tree_cmd->add_subcommand("prune", "drop aggregate rows from a hierarchy");
    std::string tp_tree, tp_drop, tp_out = "pruned.txt";
    tp->add_option("--tree", tp_tree, "plain or composed tree file")->required();
    tp->add_option("--drop", tp_drop, "comma-separated non-leaf labels")->required();
    tp->add_option("--output", tp_out, "summation matrix file");
    tp->callback([&] {
        TreeBundle bundle = load_tree_file(tp_tree);
        std::set<std::string> drop;
        std::istringstream ss(tp_drop);
        std::string tok;
        while (std::getline(ss, tok, ',')) drop.insert(tok);
        YLayout layout{bundle.s.row_layout, {}};
        auto [pruned, kept] = prune(bundle.s, layout, drop);
        write_matrix_file(tp_out, pruned);
        std::cout << "n=" << pruned.n << " m=" << pruned.m << '\n';
    });

    // --- features -----------------------------------------------------------
    auto* feat_cmd = app.add_subcommand("features", "lag/exogenous selection for a config");
    std::string fc_config, fc_out = "features.json";
    std::vector<std::string> fc_set;
    feat_cmd->add_option("--config", fc_config, "experiment config file")->required();
    feat_cmd->add_option("--set", fc_set, "override section.key=value");
    feat_cmd->add_option("--output", fc_out, "feature spec JSON");
    feat_cmd->callback([&] {
        Config cfg = load_config(fc_config, fc_set);
        SeriesTable cleaned = load_cleaned(cfg, nullptr);
        AssembledExperiment assembled = assemble_experiment(cfg, cleaned);
        std::ofstream os(fc_out);
        os << to_json(assembled.features).dump(2) << '\n';
        std::cout << "nodes=" << assembled.features.per_node.size() << '\n';
    });

    // --- train ----------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train one forecasting method");
    std::string tr_config, tr_method = "hierarchical", tr_outdir = "trained";
    std::vector<std::string> tr_set;
    train_cmd->add_option("--config", tr_config, "experiment config file")->required();
    train_cmd->add_option("--method", tr_method, "base | multi-task | hierarchical[:sigma]");
    train_cmd->add_option("--output-dir", tr_outdir, "artifact directory");
    train_cmd->add_option("--set", tr_set, "override section.key=value");
    train_cmd->callback([&] {
        Config cfg = load_config(tr_config, tr_set);
        cfg.values["grid.forecasting"] = tr_method;
        cfg.values["grid.reconciliation"] = "none";
        cfg.values["run.output_dir"] = tr_outdir;
        ExperimentResult result = run_experiment(cfg);
        if (!result.all_ok) {
            std::cerr << "training failed; see " << tr_outdir << "/report.txt\n";
            exit_code = 1;
            return;
        }
        std::cout << "forecasts in " << tr_outdir << "/forecasts, report in " << tr_outdir
                  << "/report.txt\n";
    });

    // --- reconcile ----------------------------------------------------------
    auto* rec_cmd = app.add_subcommand("reconcile", "reconcile a forecast file against a tree");
    std::string rc_forecasts, rc_tree, rc_method = "id", rc_out = "reconciled.tsv";
    std::string rc_residuals, rc_sigma_out;
    rec_cmd->add_option("--forecasts", rc_forecasts, "origin + per-node TSV")->required();
    rec_cmd->add_option("--tree", rc_tree, "plain or composed tree file")->required();
    rec_cmd->add_option("--method", rc_method, "bu | id | str | svar | hvar | cov | kcov");
    rec_cmd->add_option("--residuals", rc_residuals, "residual TSV for variance methods");
    rec_cmd->add_option("--output", rc_out, "reconciled TSV");
    rec_cmd->add_option("--sigma-out", rc_sigma_out, "write the weight matrix used");
    rec_cmd->callback([&] {
        TreeBundle bundle = load_tree_file(rc_tree);
        std::vector<std::string> labels;
        std::vector<ForecastBundle> bundles = detail::read_bundles_tsv(rc_forecasts, &labels);
        if (labels != bundle.s.row_layout)
            throw std::runtime_error("forecast columns do not match the tree's y layout");
        std::vector<ForecastBundle> out;
        if (rc_method == "bu") {
            BottomExtractor g = bottom_extractor(bundle.s);
            for (const auto& b : bundles) out.push_back(reconcile_bottom_up(bundle.s, g, b));
        } else {
            const CovMethod method = cov_method_from(rc_method);
            ResidualStore residuals;
            if (!rc_residuals.empty()) {
                std::vector<std::string> rlabels;
                for (const auto& r : detail::read_bundles_tsv(rc_residuals, &rlabels))
                    residuals.add_sample(rlabels, r.values);
            }
            CovarianceEstimate sigma = estimate(method, bundle.s, residuals, bundle.level_of);
            if (!rc_sigma_out.empty()) {
                std::ofstream os(rc_sigma_out);
                write_covariance(os, sigma);
            }
            GlsProjector projector(bundle.s, sigma);
            for (const auto& b : bundles) {
                ForecastBundle r;
                r.origin = b.origin;
                r.values = projector.apply(b.values);
                r.tag = BundleTag::reconciled;
                r.provenance = rc_method;
                out.push_back(std::move(r));
            }
        }
        detail::write_bundles_tsv(rc_out, out, bundle.s.row_layout);
        std::cout << "reconciled " << out.size() << " origins -> " << rc_out << '\n';
    });

    // --- evaluate ----------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("evaluate", "score forecasts against truth");
    std::string ev_forecasts, ev_truth, ev_tree, ev_out, ev_json;
    eval_cmd->add_option("--forecasts", ev_forecasts, "forecast TSV")->required();
    eval_cmd->add_option("--truth", ev_truth, "truth TSV in the same layout")->required();
    eval_cmd->add_option("--tree", ev_tree, "plain or composed tree file")->required();
    eval_cmd->add_option("--output", ev_out, "text report (default stdout)");
    eval_cmd->add_option("--json", ev_json, "JSON report");
    eval_cmd->callback([&] {
        TreeBundle bundle = load_tree_file(ev_tree);
        std::vector<std::string> flabels, tlabels;
        std::vector<ForecastBundle> forecasts = detail::read_bundles_tsv(ev_forecasts, &flabels);
        std::vector<ForecastBundle> truth = detail::read_bundles_tsv(ev_truth, &tlabels);
        if (flabels != bundle.s.row_layout || tlabels != bundle.s.row_layout)
            throw std::runtime_error("columns do not match the tree's y layout");
        if (forecasts.size() != truth.size())
            throw std::runtime_error("forecast and truth horizons differ");
        const std::size_t n = bundle.s.n;
        const Vec kappa = structural_vector(bundle.s);
        const BottomExtractor g = bottom_extractor(bundle.s);
        Mat errors(forecasts.size(), n);
        std::map<std::string, double> node_mse;
        for (std::size_t i = 0; i < n; ++i) {
            Vec yt(forecasts.size()), yp(forecasts.size());
            for (std::size_t r = 0; r < forecasts.size(); ++r) {
                yt[r] = truth[r].values[i];
                yp[r] = forecasts[r].values[i];
                errors(r, i) = yt[r] - yp[r];
            }
            node_mse[bundle.s.row_layout[i]] = mse(yt, yp);
        }
        const double hier = ms3e(errors, kappa).overall;
        const double coh = coherency_ms3e(forecasts, bundle.s, g, kappa);
        const auto levels = per_level_mse(node_mse, bundle.level_of);
        std::ostringstream os;
        os << "hier_ms3e\t" << hier << "\ncoh_ms3e\t" << coh << '\n';
        for (const auto& [level, value] : levels) os << "mse_k" << level << '\t' << value << '\n';
        if (ev_out.empty()) std::cout << os.str();
        else {
            std::ofstream file(ev_out);
            file << os.str();
        }
        if (!ev_json.empty()) {
            nlohmann::json doc;
            doc["hier_ms3e"] = hier;
            doc["coh_ms3e"] = coh;
            for (const auto& [level, value] : levels) doc["mse"]["k" + std::to_string(level)] = value;
            for (const auto& [label, value] : node_mse) doc["mse_per_node"][label] = value;
            std::ofstream file(ev_json);
            file << doc.dump(2) << '\n';
        }
    });

    // --- run ---------------------------------------------------------------
    auto* run_cmd = app.add_subcommand("run", "full forecasting x reconciliation grid");
    std::string rn_config;
    std::vector<std::string> rn_set;
    std::string rn_outdir, rn_forecasting, rn_reconciliation;
    std::int64_t rn_seed = -1;
    double rn_alpha = -1.0;
    run_cmd->add_option("--config", rn_config, "experiment config file")->required();
    run_cmd->add_option("--set", rn_set, "override section.key=value (repeatable)");
    run_cmd->add_option("--output-dir", rn_outdir, "override run.output_dir");
    run_cmd->add_option("--seed", rn_seed, "override learner.seed");
    run_cmd->add_option("--alpha", rn_alpha, "override learner.alpha");
    run_cmd->add_option("--forecasting", rn_forecasting, "override grid.forecasting");
    run_cmd->add_option("--reconciliation", rn_reconciliation, "override grid.reconciliation");
    run_cmd->callback([&] {
        Config cfg = load_config(rn_config, rn_set);
        if (!rn_outdir.empty()) cfg.values["run.output_dir"] = rn_outdir;
        if (rn_seed >= 0) cfg.values["learner.seed"] = std::to_string(rn_seed);
        if (rn_alpha >= 0.0) cfg.values["learner.alpha"] = std::to_string(rn_alpha);
        if (!rn_forecasting.empty()) cfg.values["grid.forecasting"] = rn_forecasting;
        if (!rn_reconciliation.empty()) cfg.values["grid.reconciliation"] = rn_reconciliation;
        ExperimentResult result = run_experiment(cfg);
        std::size_t completed = 0;
        for (const auto& [key, cell] : result.report.cells)
            if (cell.ok) ++completed;
        std::cout << completed << "/" << result.report.cells.size() << " cells completed; report in "
                  << result.output_dir << "/report.txt\n";
        if (!result.all_ok) {
            std::cerr << "some cells failed; see the report for details\n";
            exit_code = 1;
        }
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return exit_code;
}
