#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "sttpp/discrete.hpp"
#include "sttpp/graph.hpp"
#include "sttpp/model.hpp"

namespace sttpp {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Low-level helpers: bit-exact doubles, atomic writes, checksums.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// temp-file-plus-rename so readers never observe partial output
inline void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out << content;
        if (!out) throw IoError("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed for " + path + ": " + ec.message());
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string checksum_hex(const std::string& s) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(s)));
    return buf;
}

// ---------------------------------------------------------------------------
// Event corpus: one event per line, `seq_id,t,x,y` (planar) or `seq_id,t,node`
// (graph), optional mark columns; a metadata comment carries the window.
// ---------------------------------------------------------------------------

inline std::string corpus_to_text(std::span<const EventSequence> seqs, double T) {
    std::ostringstream out;
    out << "# window_T=" << format_double(T) << "\n";
    bool graph = false;
    std::size_t mark_dim = 0;
    for (const auto& s : seqs)
        if (!s.empty()) {
            graph = s.events.front().node.has_value();
            mark_dim = s.events.front().mark.size();
            break;
        }
    out << (graph ? "seq_id,t,node" : "seq_id,t,x,y");
    for (std::size_t m = 0; m < mark_dim; ++m) out << ",m" << m;
    out << "\n";
    for (std::size_t si = 0; si < seqs.size(); ++si) {
        for (const auto& e : seqs[si].events) {
            out << si << ',' << format_double(e.t);
            if (graph)
                out << ',' << *e.node;
            else
                out << ',' << format_double(e.s->x) << ',' << format_double(e.s->y);
            for (double m : e.mark) out << ',' << format_double(m);
            out << "\n";
        }
    }
    return out.str();
}

inline void write_corpus(const std::string& path, std::span<const EventSequence> seqs, double T) {
    write_file_atomic(path, corpus_to_text(seqs, T));
}

struct Corpus {
    std::vector<EventSequence> sequences;
    double T = 0.0;
    bool graph_schema = false;
};

inline Corpus parse_corpus(const std::string& text) {
    Corpus out;
    std::istringstream in(text);
    std::string line;
    bool header_seen = false;
    std::size_t expected_cols = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto pos = line.find("window_T=");
            if (pos != std::string::npos) out.T = std::strtod(line.c_str() + pos + 9, nullptr);
            continue;
        }
        if (!header_seen) {
            header_seen = true;
            out.graph_schema = line.find("node") != std::string::npos;
            expected_cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
            continue;
        }
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            const auto comma = line.find(',', start);
            cols.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (cols.size() != expected_cols)
            throw IoError("corpus row has " + std::to_string(cols.size()) + " columns, expected " +
                          std::to_string(expected_cols));
        const std::size_t si = std::strtoull(cols[0].c_str(), nullptr, 10);
        while (out.sequences.size() <= si) out.sequences.emplace_back();
        Event e;
        e.t = std::strtod(cols[1].c_str(), nullptr);
        std::size_t mark_start;
        if (out.graph_schema) {
            e.node = static_cast<int>(std::strtol(cols[2].c_str(), nullptr, 10));
            mark_start = 3;
        } else {
            e.s = Vec2{std::strtod(cols[2].c_str(), nullptr), std::strtod(cols[3].c_str(), nullptr)};
            mark_start = 4;
        }
        for (std::size_t m = mark_start; m < cols.size(); ++m)
            e.mark.push_back(std::strtod(cols[m].c_str(), nullptr));
        out.sequences[si].events.push_back(std::move(e));
    }
    if (out.T <= 0.0) throw IoError("corpus is missing the window metadata");
    for (auto& s : out.sequences) s.window = {out.T};
    return out;
}

inline Corpus read_corpus(const std::string& path) { return parse_corpus(read_file(path)); }

// ---------------------------------------------------------------------------
// Dense matrix text format: `rows cols` then one row per line.
// ---------------------------------------------------------------------------

inline std::string matrix_to_text(const Eigen::MatrixXd& M) {
    std::ostringstream out;
    out << M.rows() << ' ' << M.cols() << "\n";
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        for (Eigen::Index j = 0; j < M.cols(); ++j) {
            if (j) out << ' ';
            out << format_double(M(i, j));
        }
        out << "\n";
    }
    return out.str();
}

inline void write_matrix(const std::string& path, const Eigen::MatrixXd& M) {
    write_file_atomic(path, matrix_to_text(M));
}

inline Eigen::MatrixXd read_matrix(const std::string& path) {
    std::istringstream in(read_file(path));
    Eigen::Index rows, cols;
    if (!(in >> rows >> cols)) throw IoError("matrix header missing in " + path);
    Eigen::MatrixXd M(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j)
            if (!(in >> M(i, j))) throw IoError("matrix data truncated in " + path);
    return M;
}

// ---------------------------------------------------------------------------
// Plot-ready long-format export: coordinates then value, axis-major order.
// ---------------------------------------------------------------------------

inline std::string grid_table_to_long_text(const GridTable& table) {
    std::ostringstream out;
    out << "t,x,y,value\n";
    for (int it = 0; it < table.time.n; ++it)
        for (int ix = 0; ix < table.x.n; ++ix)
            for (int iy = 0; iy < table.y.n; ++iy)
                out << format_double(table.time.mid(it)) << ',' << format_double(table.x.mid(ix))
                    << ',' << format_double(table.y.mid(iy)) << ','
                    << format_double(table.at(it, ix, iy)) << "\n";
    return out.str();
}

inline void export_grid(const GridTable& table, const std::string& path) {
    for (int i = 0; i < table.values.size(); ++i)
        if (!std::isfinite(table.values(i))) throw IoError("grid export needs finite values");
    write_file_atomic(path, grid_table_to_long_text(table));
}

// lag x displacement kernel table in the same long format
inline std::string kernel_table_to_long_text(const Eigen::MatrixXd& table, const GridSpec& grid) {
    std::ostringstream out;
    out << "lag,dx,dy,value\n";
    for (int it = 0; it < grid.lag.n; ++it)
        for (int ix = 0; ix < grid.dx.n; ++ix)
            for (int iy = 0; iy < grid.dy.n; ++iy)
                out << format_double(grid.lag.mid(it)) << ',' << format_double(grid.dx.mid(ix))
                    << ',' << format_double(grid.dy.mid(iy)) << ','
                    << format_double(table(it, ix * grid.dy.n + iy)) << "\n";
    return out.str();
}

// ---------------------------------------------------------------------------
// Checkpoints. A single ordered JSON document with a schema version, all
// parameter arrays in row-major order and a content checksum.
// ---------------------------------------------------------------------------

inline ordered_json mlp_to_json(const Mlp& net) {
    ordered_json j;
    j["input_dim"] = net.spec.input_dim;
    j["hidden"] = net.spec.hidden;
    j["output_dim"] = net.spec.output_dim;
    j["output"] = net.spec.output == OutputActivation::softplus ? "softplus" : "linear";
    std::vector<double> params(net.num_params());
    net.get_params(params.data());
    j["params"] = params;
    return j;
}

inline Mlp mlp_from_json(const ordered_json& j) {
    MlpSpec spec;
    spec.input_dim = j.at("input_dim").get<int>();
    spec.hidden = j.at("hidden").get<std::vector<int>>();
    spec.output_dim = j.at("output_dim").get<int>();
    spec.output = j.at("output").get<std::string>() == "softplus" ? OutputActivation::softplus
                                                                  : OutputActivation::linear;
    Mlp net(spec);
    const auto params = j.at("params").get<std::vector<double>>();
    if (static_cast<int>(params.size()) != net.num_params())
        throw IoError("mlp parameter count mismatch in checkpoint");
    net.set_params(params.data());
    return net;
}

inline std::vector<double> to_vec(const Eigen::MatrixXd& M) {
    std::vector<double> v;
    v.reserve(M.size());
    for (Eigen::Index i = 0; i < M.rows(); ++i)
        for (Eigen::Index j = 0; j < M.cols(); ++j) v.push_back(M(i, j));
    return v;
}

inline Eigen::MatrixXd from_vec(const std::vector<double>& v, Eigen::Index rows,
                                Eigen::Index cols) {
    if (static_cast<Eigen::Index>(v.size()) != rows * cols)
        throw IoError("array size mismatch in checkpoint");
    Eigen::MatrixXd M(rows, cols);
    std::size_t idx = 0;
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) M(i, j) = v[idx++];
    return M;
}

inline ordered_json parametric_spec_to_json(const ParametricKernelSpec& spec) {
    ordered_json j;
    if (spec.family == ParametricKernelSpec::Family::synthetic_lowrank) {
        j["family"] = "synthetic_lowrank";
        const auto& p = spec.synthetic;
        j["a_s"] = p.a_s;
        j["b_s"] = p.b_s;
        j["a_t"] = p.a_t;
        j["b_t"] = p.b_t;
        j["sigma1"] = p.sigma1;
        j["sigma2"] = p.sigma2;
        j["beta"] = p.beta;
        j["alpha"] = std::vector<double>{p.alpha11, p.alpha12, p.alpha21, p.alpha22};
        j["offset"] = std::vector<double>{p.offset.x, p.offset.y};
        j["phi2_cut"] = p.phi2_cut;
        j["tau_max"] = p.tau_max;
        j["a_max"] = p.a_max;
    } else {
        j["family"] = "exp_hawkes";
        j["a"] = spec.hawkes_a;
        j["b"] = spec.hawkes_b;
        j["tau_max"] = spec.hawkes_tau_max;
    }
    return j;
}

inline ParametricKernelSpec parametric_spec_from_json(const ordered_json& j) {
    ParametricKernelSpec spec;
    const std::string family = j.at("family").get<std::string>();
    if (family == "synthetic_lowrank") {
        spec.family = ParametricKernelSpec::Family::synthetic_lowrank;
        auto& p = spec.synthetic;
        p.a_s = j.value("a_s", p.a_s);
        p.b_s = j.value("b_s", p.b_s);
        p.a_t = j.value("a_t", p.a_t);
        p.b_t = j.value("b_t", p.b_t);
        p.sigma1 = j.value("sigma1", p.sigma1);
        p.sigma2 = j.value("sigma2", p.sigma2);
        p.beta = j.value("beta", p.beta);
        if (j.contains("alpha")) {
            const auto a = j.at("alpha").get<std::vector<double>>();
            if (a.size() != 4) throw IoError("alpha needs four entries");
            p.alpha11 = a[0];
            p.alpha12 = a[1];
            p.alpha21 = a[2];
            p.alpha22 = a[3];
        }
        if (j.contains("offset")) {
            const auto o = j.at("offset").get<std::vector<double>>();
            p.offset = {o.at(0), o.at(1)};
        }
        p.phi2_cut = j.value("phi2_cut", p.phi2_cut);
        p.tau_max = j.value("tau_max", p.tau_max);
        p.a_max = j.value("a_max", p.a_max);
    } else if (family == "exp_hawkes") {
        spec.family = ParametricKernelSpec::Family::exp_hawkes;
        spec.hawkes_a = j.value("a", spec.hawkes_a);
        spec.hawkes_b = j.value("b", spec.hawkes_b);
        spec.hawkes_tau_max = j.value("tau_max", spec.hawkes_tau_max);
    } else {
        throw IoError("unknown kernel family " + family);
    }
    return spec;
}

inline ordered_json deep_model_to_json(const SttpModel& model, const DeepKernel& dk) {
    ordered_json j;
    j["schema_version"] = 1;
    j["kind"] = "deep_sttp";
    j["window_T"] = model.window.T;
    j["domain"] = std::vector<double>{model.domain.x_lo, model.domain.x_hi, model.domain.y_lo,
                                      model.domain.y_hi};
    j["mu"] = model.mu;
    j["L"] = dk.L;
    j["R"] = dk.R;
    j["tau_max"] = dk.tau_max;
    j["a_max"] = dk.a_max;
    j["alpha"] = to_vec(dk.alpha);
    ordered_json nets;
    auto pack = [](const std::vector<Mlp>& ms) {
        ordered_json arr = ordered_json::array();
        for (const auto& m : ms) arr.push_back(mlp_to_json(m));
        return arr;
    };
    nets["psi"] = pack(dk.psi_nets);
    nets["phi"] = pack(dk.phi_nets);
    nets["u"] = pack(dk.u_nets);
    nets["v"] = pack(dk.v_nets);
    j["nets"] = nets;
    return j;
}

inline SttpModel deep_model_from_json(const ordered_json& j) {
    SttpModel model;
    model.window = {j.at("window_T").get<double>()};
    const auto dom = j.at("domain").get<std::vector<double>>();
    model.domain = {dom.at(0), dom.at(1), dom.at(2), dom.at(3)};
    model.mu = j.at("mu").get<double>();
    auto dk = std::make_shared<DeepKernel>();
    dk->L = j.at("L").get<int>();
    dk->R = j.at("R").get<int>();
    dk->tau_max = j.at("tau_max").get<double>();
    dk->a_max = j.at("a_max").get<double>();
    dk->alpha = from_vec(j.at("alpha").get<std::vector<double>>(), dk->R, dk->L);
    auto unpack = [](const ordered_json& arr) {
        std::vector<Mlp> ms;
        for (const auto& item : arr) ms.push_back(mlp_from_json(item));
        return ms;
    };
    dk->psi_nets = unpack(j.at("nets").at("psi"));
    dk->phi_nets = unpack(j.at("nets").at("phi"));
    dk->u_nets = unpack(j.at("nets").at("u"));
    dk->v_nets = unpack(j.at("nets").at("v"));
    model.kernel = dk;
    return model;
}

inline ordered_json graph_model_to_json(const GraphModel& model) {
    if (!model.kernel.all_mlp())
        throw IoError("graph checkpoints cover mlp temporal bases only");
    ordered_json j;
    j["schema_version"] = 1;
    j["kind"] = "graph_sttp";
    j["window_T"] = model.window.T;
    j["n_nodes"] = model.kernel.n_nodes;
    j["mu"] = std::vector<double>(model.mu.data(), model.mu.data() + model.mu.size());
    j["L"] = model.kernel.L;
    j["R"] = model.kernel.R;
    j["tau_max"] = model.kernel.tau_max;
    j["alpha"] = to_vec(model.kernel.alpha);
    ordered_json nets;
    ordered_json psi = ordered_json::array(), phi = ordered_json::array();
    for (const auto& m : model.kernel.psi_nets) psi.push_back(mlp_to_json(m));
    for (const auto& m : model.kernel.phi_nets) phi.push_back(mlp_to_json(m));
    nets["psi"] = psi;
    nets["phi"] = phi;
    j["nets"] = nets;
    j["filter_form"] =
        model.kernel.form == GraphFilterKernel::FilterForm::free ? "free" : "polynomial";
    if (model.kernel.form == GraphFilterKernel::FilterForm::free) {
        ordered_json filters = ordered_json::array();
        for (const auto& B : model.kernel.filters) filters.push_back(to_vec(B));
        j["filters"] = filters;
    } else {
        ordered_json coeffs = ordered_json::array();
        for (const auto& h : model.kernel.poly_coeffs)
            coeffs.push_back(std::vector<double>(h.data(), h.data() + h.size()));
        j["poly_coeffs"] = coeffs;
        j["shift"] = to_vec(model.kernel.shift);
    }
    return j;
}

inline GraphModel graph_model_from_json(const ordered_json& j) {
    GraphModel model;
    model.window = {j.at("window_T").get<double>()};
    const int n = j.at("n_nodes").get<int>();
    const auto mu = j.at("mu").get<std::vector<double>>();
    model.mu = Eigen::Map<const Eigen::VectorXd>(mu.data(), mu.size());
    auto& k = model.kernel;
    k.n_nodes = n;
    k.L = j.at("L").get<int>();
    k.R = j.at("R").get<int>();
    k.tau_max = j.at("tau_max").get<double>();
    k.alpha = from_vec(j.at("alpha").get<std::vector<double>>(), k.R, k.L);
    for (const auto& item : j.at("nets").at("psi")) k.psi_nets.push_back(mlp_from_json(item));
    for (const auto& item : j.at("nets").at("phi")) k.phi_nets.push_back(mlp_from_json(item));
    if (j.at("filter_form").get<std::string>() == "free") {
        k.form = GraphFilterKernel::FilterForm::free;
        for (const auto& item : j.at("filters"))
            k.filters.push_back(from_vec(item.get<std::vector<double>>(), n, n));
    } else {
        k.form = GraphFilterKernel::FilterForm::polynomial;
        for (const auto& item : j.at("poly_coeffs")) {
            const auto h = item.get<std::vector<double>>();
            k.poly_coeffs.push_back(Eigen::Map<const Eigen::VectorXd>(h.data(), h.size()));
        }
        k.shift = from_vec(j.at("shift").get<std::vector<double>>(), n, n);
        k.realize_filters();
    }
    return model;
}

// Serialize with the checksum of the payload; loading verifies it.
inline std::string finalize_checkpoint(ordered_json j) {
    j.erase("checksum");
    const std::string payload = j.dump(2);
    j["checksum"] = checksum_hex(payload);
    return j.dump(2) + "\n";
}

inline ordered_json load_checkpoint(const std::string& path) {
    ordered_json j = ordered_json::parse(read_file(path));
    if (j.contains("checksum")) {
        ordered_json payload = j;
        payload.erase("checksum");
        if (checksum_hex(payload.dump(2)) != j.at("checksum").get<std::string>())
            throw IoError("checkpoint checksum mismatch in " + path);
    }
    return j;
}

}  // namespace sttpp
