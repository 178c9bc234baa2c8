// Command-line surface for the point-process library: simulation, fitting,
// prediction, graph and discrete models, and plot-ready exports.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "sttpp/predict.hpp"
#include "sttpp/sttpp.hpp"

namespace fs = std::filesystem;
using sttpp::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitSimulation = 3;
constexpr int kExitDiverged = 4;
constexpr int kExitIo = 5;

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct CommonArgs {
    std::string config_path;
    std::string out_dir = ".";
    long long seed = -1;  // -1: take the config value
    bool overwrite = false;
};

ordered_json load_config(const CommonArgs& args, const std::string& command) {
    if (args.config_path.empty()) throw ConfigError("--config is required");
    ordered_json j;
    try {
        j = ordered_json::parse(sttpp::read_file(args.config_path));
    } catch (const std::exception& e) {
        throw ConfigError(std::string("cannot parse config: ") + e.what());
    }
    if (j.contains(command)) return j.at(command);
    return j;
}

std::uint64_t config_seed(const ordered_json& cfg, const CommonArgs& args) {
    if (args.seed >= 0) return static_cast<std::uint64_t>(args.seed);
    return cfg.value("seed", 1ull);
}

std::string out_path(const CommonArgs& args, const ordered_json& cfg, const std::string& key,
                     const std::string& fallback) {
    const std::string name = cfg.value(key, fallback);
    fs::path p = fs::path(args.out_dir) / name;
    if (fs::exists(p) && !args.overwrite)
        throw ConfigError("output " + p.string() + " exists; pass --overwrite to replace it");
    return p.string();
}

std::string in_path(const ordered_json& cfg, const std::string& key) {
    if (!cfg.contains(key)) throw ConfigError("config is missing \"" + key + "\"");
    const std::string p = cfg.at(key).get<std::string>();
    if (!fs::exists(p)) throw ConfigError("input " + p + " does not exist");
    return p;
}

sttpp::SpatialDomain domain_from(const ordered_json& cfg) {
    const auto d = cfg.value("domain", std::vector<double>{-1.0, 1.0, -1.0, 1.0});
    if (d.size() != 4) throw ConfigError("domain needs [x_lo, x_hi, y_lo, y_hi]");
    return {d[0], d[1], d[2], d[3]};
}

sttpp::GridSpec grid_from(const ordered_json& cfg, const sttpp::TimeWindow& w,
                          const sttpp::SpatialDomain& dom, double tau_max, double a_max) {
    sttpp::GridSpec g = sttpp::GridSpec::make_default(w, dom, tau_max, a_max);
    if (cfg.contains("grid")) {
        const auto& gc = cfg.at("grid");
        g.time.n = gc.value("time", g.time.n);
        g.x.n = gc.value("x", g.x.n);
        g.y.n = gc.value("y", g.y.n);
        g.lag.n = gc.value("lag", g.lag.n);
        const int disp = gc.value("disp", g.dx.n);
        g.dx.n = disp;
        g.dy.n = disp;
    }
    return g;
}

sttpp::FitOptions fit_options_from(const ordered_json& cfg) {
    sttpp::FitOptions o;
    if (!cfg.contains("options")) return o;
    const auto& oc = cfg.at("options");
    const std::string obj = oc.value("objective", std::string("mle_barrier"));
    if (obj == "mle_barrier")
        o.objective = sttpp::FitOptions::Objective::mle_barrier;
    else if (obj == "least_squares")
        o.objective = sttpp::FitOptions::Objective::least_squares;
    else
        throw ConfigError("unknown objective " + obj);
    o.max_epochs = oc.value("max_epochs", o.max_epochs);
    o.learning_rate = oc.value("learning_rate", o.learning_rate);
    o.beta1 = oc.value("beta1", o.beta1);
    o.beta2 = oc.value("beta2", o.beta2);
    o.barrier_w0 = oc.value("barrier_w0", o.barrier_w0);
    o.barrier_decay = oc.value("barrier_decay", o.barrier_decay);
    o.barrier_stage_epochs = oc.value("barrier_stage_epochs", o.barrier_stage_epochs);
    o.barrier_stages = oc.value("barrier_stages", o.barrier_stages);
    o.barrier_threshold = oc.value("barrier_threshold", o.barrier_threshold);
    o.grad_clip_norm = oc.value("grad_clip_norm", o.grad_clip_norm);
    o.tol = oc.value("tol", o.tol);
    o.seed = oc.value("seed", o.seed);
    return o;
}

sttpp::SttpModel model_from_checkpoint(const std::string& path) {
    ordered_json j = sttpp::load_checkpoint(path);
    const std::string kind = j.value("kind", std::string());
    if (kind == "deep_sttp") return sttpp::deep_model_from_json(j);
    if (kind == "parametric_sttp") {
        sttpp::SttpModel m;
        m.window = {j.at("window_T").get<double>()};
        const auto d = j.at("domain").get<std::vector<double>>();
        m.domain = {d.at(0), d.at(1), d.at(2), d.at(3)};
        m.mu = j.at("mu").get<double>();
        if (!j.at("kernel").is_null())
            m.kernel = sttpp::parametric_spec_from_json(j.at("kernel")).realize(m.window, m.domain);
        return m;
    }
    throw ConfigError("checkpoint " + path + " is not a planar model");
}

void write_json(const std::string& path, const ordered_json& j) {
    sttpp::write_file_atomic(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

int cmd_simulate(const CommonArgs& args) {
    ordered_json cfg = load_config(args, "simulate");
    const std::uint64_t seed = config_seed(cfg, args);
    const double T = cfg.value("T", 10.0);
    const int M = cfg.value("M", 1);
    const double bound_factor = cfg.value("bound_factor", 1.5);
    sttpp::SpatialDomain dom = domain_from(cfg);

    sttpp::SttpModel model;
    ordered_json kernel_echo;
    if (cfg.contains("kernel") && cfg.at("kernel").contains("checkpoint")) {
        model = model_from_checkpoint(in_path(cfg.at("kernel"), "checkpoint"));
        dom = model.domain;
        kernel_echo["checkpoint"] = cfg.at("kernel").at("checkpoint");
    } else {
        model.window = {T};
        model.domain = dom;
        model.mu = cfg.value("mu", 1.0);
        if (cfg.contains("kernel")) {
            const auto spec = sttpp::parametric_spec_from_json(cfg.at("kernel"));
            model.kernel = spec.realize(model.window, model.domain);
            kernel_echo = sttpp::parametric_spec_to_json(spec);
        } else {
            kernel_echo = nullptr;  // homogeneous baseline
        }
    }
    model.window = {T};

    const std::string corpus_path = out_path(args, cfg, "corpus", "corpus.csv");
    const std::string manifest_path = out_path(args, cfg, "manifest", "manifest.json");

    std::vector<sttpp::EventSequence> seqs;
    try {
        seqs = sttpp::simulate_many(model, M, T, dom, seed, bound_factor);
    } catch (const std::exception& e) {
        std::cerr << "simulation error: " << e.what() << "\n";
        return kExitSimulation;
    }
    const std::string corpus_text = sttpp::corpus_to_text(seqs, T);
    sttpp::write_file_atomic(corpus_path, corpus_text);

    std::size_t total = 0;
    for (const auto& s : seqs) total += s.size();
    ordered_json manifest;
    manifest["command"] = "simulate";
    manifest["seed"] = seed;
    manifest["M"] = M;
    manifest["T"] = T;
    manifest["domain"] = std::vector<double>{dom.x_lo, dom.x_hi, dom.y_lo, dom.y_hi};
    manifest["mu"] = model.mu;
    manifest["kernel"] = kernel_echo;
    manifest["bound_factor"] = bound_factor;
    manifest["total_events"] = total;
    manifest["corpus"] = fs::path(corpus_path).filename().string();
    manifest["corpus_checksum"] = sttpp::checksum_hex(corpus_text);
    write_json(manifest_path, manifest);
    std::cout << "wrote " << total << " events over " << M << " sequences to " << corpus_path
              << "\n";
    return kExitOk;
}

int cmd_fit(const CommonArgs& args) {
    ordered_json cfg = load_config(args, "fit");
    sttpp::Corpus corpus = sttpp::read_corpus(in_path(cfg, "corpus"));
    sttpp::SpatialDomain dom = domain_from(cfg);
    for (std::size_t si = 0; si < corpus.sequences.size(); ++si) {
        const auto viol = sttpp::validate_sequence(corpus.sequences[si], dom);
        if (!viol.empty())
            throw ConfigError("corpus sequence " + std::to_string(si) +
                              " invalid: " + viol.front().detail);
    }

    const ordered_json mc = cfg.contains("model") ? cfg.at("model") : ordered_json::object();
    sttpp::ModelConfig model_cfg;
    model_cfg.temporal_rank = mc.value("L", 2);
    model_cfg.spatial_rank = mc.value("R", 2);
    model_cfg.hidden_widths = mc.value("hidden", std::vector<int>{32, 32});
    model_cfg.tau_max = mc.value("tau_max", 1.0);
    model_cfg.a_max = mc.value("a_max", 1.0);
    model_cfg.mu = mc.value("mu_init", 1.0);
    sttpp::TimeWindow window{corpus.T};
    model_cfg.require_valid(window, dom);

    sttpp::SttpModel init;
    init.window = window;
    init.domain = dom;
    init.mu = model_cfg.mu;
    init.kernel = std::make_shared<sttpp::DeepKernel>(sttpp::DeepKernel::init(
        model_cfg, mc.value("init_seed", 1ull), mc.value("alpha_init", 0.1)));

    sttpp::GridSpec grid = grid_from(cfg, window, dom, model_cfg.tau_max, model_cfg.a_max);
    sttpp::FitOptions opts = fit_options_from(cfg);

    const std::string model_path = out_path(args, cfg, "model_out", "model.json");
    const std::string report_path = out_path(args, cfg, "report_out", "report.json");

    auto [fitted, report] = sttpp::fit(init, corpus.sequences, grid, opts);

    const auto& dk = dynamic_cast<const sttpp::DeepKernel&>(*fitted.kernel);
    sttpp::write_file_atomic(model_path,
                             sttpp::finalize_checkpoint(sttpp::deep_model_to_json(fitted, dk)));
    ordered_json rep;
    rep["termination"] = sttpp::to_string(report.termination);
    rep["epochs"] = report.trace.size();
    rep["final_objective"] = report.final_objective;
    rep["final_min_intensity"] = report.final_min_intensity;
    rep["grad_norm_exit"] = report.grad_norm_exit;
    rep["wall_seconds"] = report.wall_seconds;
    rep["trace"] = report.trace;
    write_json(report_path, rep);
    std::cout << "fit " << sttpp::to_string(report.termination) << " after "
              << report.trace.size() << " epochs; objective " << report.final_objective << "\n";
    return report.termination == sttpp::Termination::diverged ? kExitDiverged : kExitOk;
}

int cmd_evaluate(const CommonArgs& args) {
    ordered_json cfg = load_config(args, "evaluate");
    sttpp::Corpus corpus = sttpp::read_corpus(in_path(cfg, "corpus"));
    sttpp::SttpModel model = model_from_checkpoint(in_path(cfg, "model"));
    model.window = {corpus.T};
    sttpp::GridSpec grid = grid_from(cfg, model.window, model.domain,
                                     model.kernel ? model.kernel->tau_max : 1.0,
                                     model.kernel ? model.kernel->a_max : 1.0);
    auto metrics = sttpp::evaluate(model, corpus.sequences, grid);
    ordered_json j;
    j["loglik_per_seq"] = metrics.loglik_per_seq;
    j["loglik_per_event"] = metrics.loglik_per_event;
    j["ls_per_seq"] = metrics.ls_per_seq;
    j["evaluated"] = metrics.evaluated;
    j["flagged"] = metrics.flagged;
    j["total_events"] = metrics.total_events;
    const std::string path = out_path(args, cfg, "metrics_out", "metrics.json");
    write_json(path, j);
    std::cout << "loglik/event " << metrics.loglik_per_event << " over " << metrics.evaluated
              << " sequences (" << metrics.flagged << " flagged)\n";
    return kExitOk;
}

int cmd_predict(const CommonArgs& args) {
    ordered_json cfg = load_config(args, "predict");
    sttpp::Corpus corpus = sttpp::read_corpus(in_path(cfg, "corpus"));
    sttpp::SttpModel model = model_from_checkpoint(in_path(cfg, "model"));
    sttpp::PredictOptions opts;
    if (cfg.contains("options")) {
        const auto& oc = cfg.at("options");
        opts.time_cells = oc.value("time_cells", opts.time_cells);
        opts.x_cells = oc.value("x_cells", opts.x_cells);
        opts.y_cells = oc.value("y_cells", opts.y_cells);
        opts.horizon_factor = oc.value("horizon_factor", opts.horizon_factor);
        opts.tail_tolerance = oc.value("tail_tolerance", opts.tail_tolerance);
        opts.max_extensions = oc.value("max_extensions", opts.max_extensions);
    }
    const std::string pred_path = out_path(args, cfg, "predictions_out", "predictions.csv");
    const std::string summary_path =
        out_path(args, cfg, "summary_out", "prediction_summary.json");

    std::ostringstream rows;
    rows << "seq_id,pred_t,pred_x,pred_y,actual_t,actual_x,actual_y,time_err,loc_err,status\n";
    double terr = 0.0, serr = 0.0;
    int evaluated = 0, excluded = 0;
    for (std::size_t si = 0; si < corpus.sequences.size(); ++si) {
        const auto& seq = corpus.sequences[si];
        if (seq.size() < 2) continue;
        sttpp::EventSequence hist;
        hist.window = seq.window;
        hist.events.assign(seq.events.begin(), seq.events.end() - 1);
        const sttpp::Event& target = seq.events.back();
        try {
            auto p = sttpp::predict_next(model, hist, opts);
            const double te = std::abs(p.t - target.t);
            const double se = (p.s - *target.s).norm();
            terr += te;
            serr += se;
            ++evaluated;
            rows << si << ',' << sttpp::format_double(p.t) << ',' << sttpp::format_double(p.s.x)
                 << ',' << sttpp::format_double(p.s.y) << ',' << sttpp::format_double(target.t)
                 << ',' << sttpp::format_double(target.s->x) << ','
                 << sttpp::format_double(target.s->y) << ',' << sttpp::format_double(te) << ','
                 << sttpp::format_double(se) << ",ok\n";
        } catch (const sttpp::TailMassTooLarge&) {
            ++excluded;
            rows << si << ",,,,,,,,,excluded\n";
        }
    }
    sttpp::write_file_atomic(pred_path, rows.str());
    ordered_json summary;
    summary["time_mae"] = evaluated ? terr / evaluated : 0.0;
    summary["loc_mae"] = evaluated ? serr / evaluated : 0.0;
    summary["evaluated"] = evaluated;
    summary["excluded"] = excluded;
    write_json(summary_path, summary);
    std::cout << "time MAE " << (evaluated ? terr / evaluated : 0.0) << ", location MAE "
              << (evaluated ? serr / evaluated : 0.0) << " over " << evaluated << " sequences\n";
    return kExitOk;
}

int cmd_rank_demo(const CommonArgs& args) {
    ordered_json cfg =
        args.config_path.empty() ? ordered_json::object() : load_config(args, "rank_demo");
    const int n = cfg.value("n", 200);
    const double rel_tol = cfg.value("rel_tol", 1e-10);
    auto [orig, repar] = sttpp::discretize_pair_forms(sttpp::rank_demo_kernel, n);
    const int rank_orig = sttpp::effective_rank(orig, rel_tol);
    const int rank_repar = sttpp::effective_rank(repar, rel_tol);
    const std::string orig_path = out_path(args, cfg, "orig_out", "rank_original.txt");
    const std::string repar_path = out_path(args, cfg, "repar_out", "rank_reparam.txt");
    sttpp::write_matrix(orig_path, orig);
    sttpp::write_matrix(repar_path, repar);
    std::cout << "rank_original=" << rank_orig << " rank_reparam=" << rank_repar << "\n";
    return kExitOk;
}

int cmd_graph_fit(const CommonArgs& args) {
    ordered_json cfg = load_config(args, "graph_fit");
    sttpp::Corpus corpus = sttpp::read_corpus(in_path(cfg, "corpus"));
    if (!corpus.graph_schema) throw ConfigError("graph-fit needs a (t, node) corpus");

    Eigen::MatrixXd adjacency;
    int n_nodes = cfg.value("n_nodes", 0);
    if (cfg.contains("adjacency")) {
        adjacency = sttpp::read_matrix(in_path(cfg, "adjacency"));
        n_nodes = static_cast<int>(adjacency.rows());
    }
    if (n_nodes <= 0) throw ConfigError("need n_nodes or an adjacency matrix");

    const ordered_json mc = cfg.contains("model") ? cfg.at("model") : ordered_json::object();
    sttpp::GraphFilterKernel kernel = sttpp::GraphFilterKernel::init(
        n_nodes, mc.value("L", 1), mc.value("R", 1), mc.value("tau_max", 1.0),
        mc.value("hidden", std::vector<int>{16, 16}), mc.value("init_seed", 1ull),
        mc.value("alpha_init", 0.2), mc.value("filter_init", 0.1));
    if (mc.value("filter_form", std::string("free")) == "polynomial") {
        if (adjacency.size() == 0) throw ConfigError("polynomial filters need an adjacency");
        kernel.form = sttpp::GraphFilterKernel::FilterForm::polynomial;
        sttpp::Graph g{n_nodes, adjacency};
        kernel.shift = mc.value("shift", std::string("adjacency")) == "laplacian" ? g.laplacian()
                                                                                  : adjacency;
        const int degree = mc.value("poly_degree", 2);
        kernel.poly_coeffs.assign(kernel.R, Eigen::VectorXd::Constant(degree, 0.1));
        kernel.realize_filters();
    }
    sttpp::GraphModel init;
    init.kernel = kernel;
    init.mu = Eigen::VectorXd::Constant(n_nodes, mc.value("mu_init", 0.5));
    init.window = {corpus.T};

    sttpp::FitOptions opts = fit_options_from(cfg);
    if (!cfg.contains("options")) opts.objective = sttpp::FitOptions::Objective::least_squares;
    const std::string model_path = out_path(args, cfg, "model_out", "graph_model.json");
    const std::string report_path = out_path(args, cfg, "report_out", "graph_report.json");

    auto [fitted, report] =
        sttpp::fit_graph(init, corpus.sequences, opts, cfg.value("time_cells", 64),
                         cfg.value("lag_cells", 100));
    sttpp::write_file_atomic(model_path,
                             sttpp::finalize_checkpoint(sttpp::graph_model_to_json(fitted)));
    ordered_json rep;
    rep["termination"] = sttpp::to_string(report.termination);
    rep["epochs"] = report.trace.size();
    rep["final_objective"] = report.final_objective;
    rep["final_min_intensity"] = report.final_min_intensity;
    rep["wall_seconds"] = report.wall_seconds;
    rep["trace"] = report.trace;
    write_json(report_path, rep);
    std::cout << "graph fit " << sttpp::to_string(report.termination) << ", objective "
              << report.final_objective << "\n";
    return report.termination == sttpp::Termination::diverged ? kExitDiverged : kExitOk;
}

int cmd_graph_snapshots(const CommonArgs& args) {
    ordered_json cfg = load_config(args, "graph_snapshots");
    ordered_json j = sttpp::load_checkpoint(in_path(cfg, "model"));
    if (j.value("kind", std::string()) != "graph_sttp")
        throw ConfigError("graph-snapshots needs a graph checkpoint");
    sttpp::GraphModel model = sttpp::graph_model_from_json(j);
    const double t = cfg.value("t", model.window.T);
    const auto lags = cfg.value("lags", std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
    auto snaps = sttpp::influence_snapshots(model, t, lags);
    const std::string prefix = cfg.value("out_prefix", std::string("snapshot"));
    for (std::size_t i = 0; i < snaps.size(); ++i) {
        fs::path p = fs::path(args.out_dir) / (prefix + "_" + std::to_string(i) + ".txt");
        if (fs::exists(p) && !args.overwrite)
            throw ConfigError("output " + p.string() + " exists; pass --overwrite");
        sttpp::write_matrix(p.string(), snaps[i]);
    }
    std::cout << "wrote " << snaps.size() << " snapshots\n";
    return kExitOk;
}

int cmd_discrete_fit(const CommonArgs& args) {
    ordered_json cfg = load_config(args, "discrete_fit");
    // panel: header row of location ids, then 0/1 rows
    const std::string text = sttpp::read_file(in_path(cfg, "panel"));
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("panel file is empty");
    const int K = static_cast<int>(std::count(line.begin(), line.end(), ',')) + 1;
    std::vector<std::vector<int>> data;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<int> row;
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            row.push_back(std::atoi(line.substr(start, comma - start).c_str()));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (static_cast<int>(row.size()) != K) throw ConfigError("ragged panel row");
        data.push_back(std::move(row));
    }
    sttpp::BinaryPanel panel;
    panel.omega.resize(static_cast<Eigen::Index>(data.size()), K);
    for (std::size_t j = 0; j < data.size(); ++j)
        for (int k = 0; k < K; ++k) panel.omega(static_cast<Eigen::Index>(j), k) = data[j][k];

    sttpp::DiscreteFitOptions opts;
    if (cfg.contains("options")) {
        const auto& oc = cfg.at("options");
        opts.max_iters = oc.value("max_iters", opts.max_iters);
        opts.learning_rate = oc.value("learning_rate", opts.learning_rate);
        opts.tol = oc.value("tol", opts.tol);
    }
    const int d = cfg.value("d", 2);
    const double threshold = cfg.value("threshold", 0.02);
    auto result = sttpp::fit_discrete(panel, d, opts);

    ordered_json pj;
    pj["schema_version"] = 1;
    pj["kind"] = "discrete_glm";
    pj["K"] = result.params.K;
    pj["d"] = result.params.d;
    pj["beta0"] = result.params.beta0;
    pj["beta"] = std::vector<double>(result.params.beta.data(),
                                     result.params.beta.data() + result.params.beta.size());
    pj["degenerate"] = result.degenerate;
    pj["final_mse"] = result.final_mse;
    const std::string params_path = out_path(args, cfg, "params_out", "discrete_params.json");
    sttpp::write_file_atomic(params_path, sttpp::finalize_checkpoint(pj));

    const Eigen::MatrixXi adj = sttpp::granger_adjacency(result.params, threshold);
    const std::string adj_path = out_path(args, cfg, "adjacency_out", "granger_adjacency.txt");
    sttpp::write_matrix(adj_path, adj.cast<double>());
    std::cout << "beta0 " << result.params.beta0 << ", " << adj.sum() << " edges at threshold "
              << threshold << "\n";
    return kExitOk;
}

int cmd_export(const CommonArgs& args) {
    ordered_json cfg = load_config(args, "export");
    sttpp::SttpModel model = model_from_checkpoint(in_path(cfg, "model"));
    const std::string what = cfg.value("what", std::string("kernel"));
    const std::string path = out_path(args, cfg, "out", "export.csv");
    if (what == "kernel") {
        if (!model.kernel) throw ConfigError("model has no kernel to export");
        sttpp::GridSpec grid = grid_from(cfg, model.window, model.domain, model.kernel->tau_max,
                                         model.kernel->a_max);
        const double tprime = cfg.value("tprime", 0.0);
        const auto sp = cfg.value("sprime", std::vector<double>{0.0, 0.0});
        Eigen::MatrixXd table =
            sttpp::kernel_lag_grid(*model.kernel, tprime, {sp.at(0), sp.at(1)}, grid);
        sttpp::write_file_atomic(path, sttpp::kernel_table_to_long_text(table, grid));
    } else if (what == "intensity") {
        sttpp::Corpus corpus = sttpp::read_corpus(in_path(cfg, "corpus"));
        const std::size_t si = cfg.value("sequence", 0ull);
        if (si >= corpus.sequences.size()) throw ConfigError("sequence index out of range");
        model.window = {corpus.T};
        sttpp::GridSpec grid = grid_from(cfg, model.window, model.domain,
                                         model.kernel ? model.kernel->tau_max : 1.0,
                                         model.kernel ? model.kernel->a_max : 1.0);
        sttpp::GridTable table = sttpp::intensity_on_grid(model, corpus.sequences[si], grid);
        sttpp::export_grid(table, path);
    } else {
        throw ConfigError("unknown export target " + what);
    }
    std::cout << "exported " << what << " to " << path << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"deep low-rank kernel spatio-temporal point processes"};
    app.require_subcommand(1);

    CommonArgs args;
    std::map<std::string, std::function<int(const CommonArgs&)>> handlers{
        {"simulate", cmd_simulate},         {"fit", cmd_fit},
        {"predict", cmd_predict},           {"rank-demo", cmd_rank_demo},
        {"graph-fit", cmd_graph_fit},       {"graph-snapshots", cmd_graph_snapshots},
        {"discrete-fit", cmd_discrete_fit}, {"evaluate", cmd_evaluate},
        {"export", cmd_export}};
    std::vector<CLI::App*> subs;
    for (const auto& [name, fn] : handlers) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", args.config_path, "configuration file (JSON)");
        sub->add_option("--seed", args.seed, "override the config seed");
        sub->add_option("--out", args.out_dir, "output directory");
        sub->add_flag("--overwrite", args.overwrite, "replace existing outputs");
        subs.push_back(sub);
    }

    CLI11_PARSE(app, argc, argv);

    for (CLI::App* sub : subs) {
        if (!sub->parsed()) continue;
        try {
            return handlers.at(sub->get_name())(args);
        } catch (const ConfigError& e) {
            std::cerr << "config error: " << e.what() << "\n";
            return kExitConfig;
        } catch (const sttpp::IoError& e) {
            std::cerr << "io error: " << e.what() << "\n";
            return kExitIo;
        } catch (const sttpp::BoundViolationLoop& e) {
            std::cerr << "simulation error: " << e.what() << "\n";
            return kExitSimulation;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return kExitConfig;
        }
    }
    return kExitConfig;
}
