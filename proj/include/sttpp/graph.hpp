#pragma once

#include "sttpp/optimizer.hpp"
#include "sttpp/rng.hpp"

namespace sttpp {

struct Graph {
    int n = 0;
    Eigen::MatrixXd adjacency;  // nonnegative weights
    bool allow_self_loops = false;

    void require_valid() const {
        if (adjacency.rows() != n || adjacency.cols() != n)
            throw NonSquare("adjacency must be n x n");
        for (int i = 0; i < n; ++i) {
            if (!allow_self_loops && adjacency(i, i) != 0.0)
                throw std::invalid_argument("self loops are disabled");
            for (int j = 0; j < n; ++j)
                if (adjacency(i, j) < 0.0)
                    throw std::invalid_argument("adjacency weights must be nonnegative");
        }
    }

    Eigen::VectorXd degrees() const { return adjacency.rowwise().sum(); }
    Eigen::MatrixXd laplacian() const {
        Eigen::MatrixXd L = -adjacency;
        L.diagonal() += degrees();
        return L;
    }
};

// B = sum_{j=1..J} h_j S^j by iterated multiplication.
inline Eigen::MatrixXd graph_filter_poly(const Eigen::MatrixXd& S, const Eigen::VectorXd& h) {
    if (S.rows() != S.cols()) throw NonSquare("shift matrix must be square");
    if (h.size() < 1) throw std::invalid_argument("polynomial needs degree >= 1");
    Eigen::MatrixXd power = S;
    Eigen::MatrixXd B = h(0) * S;
    for (int j = 1; j < h.size(); ++j) {
        power = power * S;
        B += h(j) * power;
    }
    return B;
}

// Temporal-graph kernel: k(t', t, v', v) = sum_{r,l} alpha(r,l) psi_l(t')
// phi_l(t - t') B_r(v', v). Filters are either free matrices or polynomials
// in a shift matrix; B(v', v) is the influence of v' on v.
class GraphFilterKernel {
  public:
    enum class FilterForm { free, polynomial };
    // closed-form temporal bases for ground-truth kernels; fitted kernels
    // always use the mlp kind
    enum class BasisKind { mlp, constant, exp_decay };

    int L = 1, R = 1, n_nodes = 1;
    Eigen::MatrixXd alpha;  // R x L
    std::vector<Mlp> psi_nets, phi_nets;
    std::vector<BasisKind> psi_kind, phi_kind;  // empty = all mlp
    std::vector<double> psi_c0;                 // constant value per l
    std::vector<double> phi_a, phi_b;           // a e^{-b lag} per l
    FilterForm form = FilterForm::free;
    std::vector<Eigen::MatrixXd> filters;      // realized B_r, n x n
    std::vector<Eigen::VectorXd> poly_coeffs;  // h_r when polynomial
    Eigen::MatrixXd shift;                     // S for the polynomial form
    double tau_max = 1.0;

    BasisKind kind_psi(int l) const {
        return psi_kind.empty() ? BasisKind::mlp : psi_kind[l];
    }
    BasisKind kind_phi(int l) const {
        return phi_kind.empty() ? BasisKind::mlp : phi_kind[l];
    }
    bool all_mlp() const {
        for (int l = 0; l < L; ++l)
            if (kind_psi(l) != BasisKind::mlp || kind_phi(l) != BasisKind::mlp) return false;
        return true;
    }

    static GraphFilterKernel init(int n_nodes, int L, int R, double tau_max,
                                  const std::vector<int>& hidden, std::uint64_t seed,
                                  double alpha_scale = 0.1, double filter_scale = 0.1) {
        GraphFilterKernel k;
        k.n_nodes = n_nodes;
        k.L = L;
        k.R = R;
        k.tau_max = tau_max;
        Rng rng(seed);
        k.alpha.resize(R, L);
        for (int r = 0; r < R; ++r)
            for (int l = 0; l < L; ++l) k.alpha(r, l) = alpha_scale * rng.uniform(0.5, 1.5);
        MlpSpec temporal{1, hidden, 1, OutputActivation::linear};
        for (int l = 0; l < L; ++l) k.psi_nets.push_back(Mlp::init(temporal, rng.next_u64()));
        for (int l = 0; l < L; ++l) k.phi_nets.push_back(Mlp::init(temporal, rng.next_u64()));
        k.filters.resize(R);
        for (int r = 0; r < R; ++r) {
            k.filters[r].resize(n_nodes, n_nodes);
            for (int i = 0; i < n_nodes; ++i)
                for (int j = 0; j < n_nodes; ++j)
                    k.filters[r](i, j) = filter_scale * rng.uniform(0.0, 1.0);
        }
        return k;
    }

    void realize_filters() {
        if (form != FilterForm::polynomial) return;
        filters.resize(R);
        for (int r = 0; r < R; ++r) filters[r] = graph_filter_poly(shift, poly_coeffs[r]);
    }

    double psi(int l, double tprime) const {
        switch (kind_psi(l)) {
            case BasisKind::constant: return psi_c0[l];
            case BasisKind::exp_decay: return std::exp(-phi_b[l] * tprime);
            case BasisKind::mlp: break;
        }
        return psi_nets[l].scalar(tprime);
    }
    double phi(int l, double lag) const {
        switch (kind_phi(l)) {
            case BasisKind::constant: return phi_a.empty() ? 1.0 : phi_a[l];
            case BasisKind::exp_decay: return phi_a[l] * std::exp(-phi_b[l] * lag);
            case BasisKind::mlp: break;
        }
        return phi_nets[l].scalar(lag);
    }

    // stationary ground-truth kernel: psi = 1, phi = a e^{-b lag}
    static GraphFilterKernel stationary_truth(const Eigen::MatrixXd& B, double a, double b,
                                              double tau_max) {
        GraphFilterKernel k;
        k.n_nodes = static_cast<int>(B.rows());
        k.L = 1;
        k.R = 1;
        k.tau_max = tau_max;
        k.alpha = Eigen::MatrixXd::Ones(1, 1);
        k.filters = {B};
        k.psi_kind = {BasisKind::constant};
        k.psi_c0 = {1.0};
        k.phi_kind = {BasisKind::exp_decay};
        k.phi_a = {a};
        k.phi_b = {b};
        k.psi_nets.resize(1);
        k.phi_nets.resize(1);
        return k;
    }

    double eval(double tprime, double t, int vprime, int v) const {
        if (t <= tprime) throw NonCausalPair("graph kernel queried with t <= t'");
        if (vprime < 0 || vprime >= n_nodes || v < 0 || v >= n_nodes)
            throw NodeOutOfRange("node index outside the graph");
        const double lag = t - tprime;
        if (lag > tau_max) return 0.0;
        double acc = 0.0;
        for (int r = 0; r < R; ++r) {
            double tsum = 0.0;
            for (int l = 0; l < L; ++l) tsum += alpha(r, l) * psi(l, tprime) * phi(l, lag);
            acc += tsum * filters[r](vprime, v);
        }
        return acc;
    }

    // flat layout: [alpha, psi nets, phi nets, filter entries (free, row
    // major per r) or poly coefficients per r]
    int num_filter_params() const {
        if (form == FilterForm::free) return R * n_nodes * n_nodes;
        int n = 0;
        for (const auto& h : poly_coeffs) n += static_cast<int>(h.size());
        return n;
    }
    int num_params() const {
        int n = R * L + num_filter_params();
        for (int l = 0; l < L; ++l)
            if (kind_psi(l) == BasisKind::mlp) n += psi_nets[l].num_params();
        for (int l = 0; l < L; ++l)
            if (kind_phi(l) == BasisKind::mlp) n += phi_nets[l].num_params();
        return n;
    }
    void get_params(double* out) const {
        for (int r = 0; r < R; ++r)
            for (int l = 0; l < L; ++l) *out++ = alpha(r, l);
        for (int l = 0; l < L; ++l)
            if (kind_psi(l) == BasisKind::mlp) { psi_nets[l].get_params(out); out += psi_nets[l].num_params(); }
        for (int l = 0; l < L; ++l)
            if (kind_phi(l) == BasisKind::mlp) { phi_nets[l].get_params(out); out += phi_nets[l].num_params(); }
        if (form == FilterForm::free) {
            for (const auto& B : filters)
                for (int i = 0; i < n_nodes; ++i)
                    for (int j = 0; j < n_nodes; ++j) *out++ = B(i, j);
        } else {
            for (const auto& h : poly_coeffs)
                for (int j = 0; j < h.size(); ++j) *out++ = h(j);
        }
    }
    void set_params(const double* in) {
        for (int r = 0; r < R; ++r)
            for (int l = 0; l < L; ++l) alpha(r, l) = *in++;
        for (int l = 0; l < L; ++l)
            if (kind_psi(l) == BasisKind::mlp) { psi_nets[l].set_params(in); in += psi_nets[l].num_params(); }
        for (int l = 0; l < L; ++l)
            if (kind_phi(l) == BasisKind::mlp) { phi_nets[l].set_params(in); in += phi_nets[l].num_params(); }
        if (form == FilterForm::free) {
            for (auto& B : filters)
                for (int i = 0; i < n_nodes; ++i)
                    for (int j = 0; j < n_nodes; ++j) B(i, j) = *in++;
        } else {
            for (auto& h : poly_coeffs)
                for (int j = 0; j < h.size(); ++j) h(j) = *in++;
            realize_filters();
        }
    }
};

struct GraphModel {
    Eigen::VectorXd mu;  // per-node baselines
    GraphFilterKernel kernel;
    TimeWindow window;

    void require_valid() const {
        if (mu.size() != kernel.n_nodes)
            throw DimensionMismatch("baseline vector does not match the node count");
        if (mu.minCoeff() < 0.0) throw std::invalid_argument("baselines must be nonnegative");
        if (!window.valid() || kernel.tau_max > window.T)
            throw std::invalid_argument("invalid window / tau_max");
    }
};

inline double graph_intensity(const GraphModel& model, const EventSequence& history, double t,
                              int v) {
    if (t > model.window.T) throw OutOfDomain("query beyond the window");
    if (v < 0 || v >= model.kernel.n_nodes) throw NodeOutOfRange("node index outside the graph");
    double acc = model.mu(v);
    const auto& ev = history.events;
    const std::size_t lo = history_window_begin(ev, t, model.kernel.tau_max);
    for (std::size_t j = lo; j < ev.size(); ++j) {
        if (ev[j].t >= t) break;
        if (!ev[j].node) throw DimensionMismatch("graph intensity needs node events");
        acc += model.kernel.eval(ev[j].t, t, *ev[j].node, v);
    }
    return acc;
}

// Influence of v' on v aggregated over lags: int_0^tau_max k(t_ref, t_ref +
// tau, v', v) dtau. Invariant to the sign/scale split between the temporal
// bases and the filters, which is the part of the parameterization the data
// identifies.
inline Eigen::MatrixXd time_integrated_influence(const GraphFilterKernel& k, double t_ref,
                                                 int cells = 200) {
    const int n = k.n_nodes;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
    const double h = k.tau_max / cells;
    for (int c = 0; c < cells; ++c) {
        const double lag = (c + 0.5) * h;
        for (int vp = 0; vp < n; ++vp)
            for (int v = 0; v < n; ++v) out(vp, v) += h * k.eval(t_ref, t_ref + lag, vp, v);
    }
    return out;
}

// Per-lag snapshots of the kernel at a fixed observation time t; signs kept.
inline std::vector<Eigen::MatrixXd> influence_snapshots(const GraphModel& model, double t,
                                                        std::span<const double> lags) {
    std::vector<Eigen::MatrixXd> out;
    const int n = model.kernel.n_nodes;
    for (double lag : lags) {
        if (!(lag > 0.0) || t - lag < 0.0)
            throw std::invalid_argument("lags must be positive with t - lag >= 0");
        Eigen::MatrixXd snap(n, n);
        for (int vp = 0; vp < n; ++vp)
            for (int v = 0; v < n; ++v) snap(vp, v) = model.kernel.eval(t - lag, t, vp, v);
        out.push_back(std::move(snap));
    }
    return out;
}

// Thinning on the graph: time proposals against an envelope of the total
// intensity, node proposals uniform.
inline EventSequence simulate_graph(const GraphModel& model, double T, std::uint64_t seed,
                                    double bound_factor = 1.5, int max_raises_per_event = 64) {
    model.require_valid();
    Rng rng(seed);
    const int N = model.kernel.n_nodes;
    EventSequence seq;
    seq.window = {T};
    GraphModel local = model;
    local.window = {T};

    // per-l decaying envelopes and per-source worst-case filter rows
    const int env_cells = 2048;
    Axis lag_axis(env_cells, 0.0, model.kernel.tau_max);
    Eigen::MatrixXd env(model.kernel.L, env_cells + 1);
    for (int l = 0; l < model.kernel.L; ++l) {
        double running = 0.0;
        env(l, env_cells) = 0.0;
        for (int c = env_cells - 1; c >= 0; --c) {
            running = std::max(running, std::abs(model.kernel.phi(l, lag_axis.mid(c))));
            env(l, c) = running;
        }
    }
    Eigen::MatrixXd row_max(model.kernel.R, N);
    for (int r = 0; r < model.kernel.R; ++r)
        for (int vp = 0; vp < N; ++vp)
            row_max(r, vp) = model.kernel.filters[r].row(vp).cwiseAbs().maxCoeff();

    std::vector<Eigen::VectorXd> weights;  // per event, per l
    auto event_weights = [&](const Event& e) {
        Eigen::VectorXd w = Eigen::VectorXd::Zero(model.kernel.L);
        for (int l = 0; l < model.kernel.L; ++l) {
            const double p = std::abs(model.kernel.psi(l, e.t));
            for (int r = 0; r < model.kernel.R; ++r)
                w(l) += p * std::abs(model.kernel.alpha(r, l)) * row_max(r, *e.node);
        }
        return w;
    };
    const double mu_max = model.mu.maxCoeff();
    auto current_bound = [&](double t_cur) {
        double acc = mu_max;
        const std::size_t lo = history_window_begin(seq.events, t_cur, model.kernel.tau_max);
        for (std::size_t j = lo; j < seq.events.size(); ++j) {
            const double age = t_cur - seq.events[j].t;
            if (age >= model.kernel.tau_max) continue;
            const int cell = std::max(lag_axis.cell(std::max(age, 0.0)) - 1, 0);
            for (int l = 0; l < model.kernel.L; ++l)
                acc += 1.15 * weights[j](l) * env(l, cell);
        }
        return bound_factor * N * acc;  // dominates N * max_v lambda(t, v)
    };

    double t_cur = 0.0;
    int raises = 0;
    double rate_bar = current_bound(0.0);
    while (true) {
        if (!(rate_bar > 0.0)) break;
        const double t_prop = t_cur + rng.exponential(rate_bar);
        if (t_prop > T) break;
        const int v_prop = rng.uniform_int(N);
        const double lam = std::max(graph_intensity(local, seq, t_prop, v_prop), 0.0);
        if (lam * N > rate_bar) {
            if (++raises > max_raises_per_event)
                throw BoundViolationLoop("graph thinning bound raised too often");
            rate_bar = bound_factor * std::max(rate_bar, lam * N);
            continue;
        }
        t_cur = t_prop;
        if (rng.uniform() < lam * N / rate_bar) {
            seq.events.push_back(Event(t_prop, v_prop));
            weights.push_back(event_weights(seq.events.back()));
            raises = 0;
            rate_bar = current_bound(t_cur);
        }
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Objectives and fitting. The least-squares loss is
//   sum_v int_0^T lambda(t, v)^2 dt - 2 sum_i lambda(t_i, v_i),
// the likelihood uses the decomposed integral; both averaged over sequences.
// ---------------------------------------------------------------------------

struct GraphEvalResult {
    double event_log_sum = 0.0;
    double integral_sum = 0.0;
    double ls_quad_sum = 0.0;
    double event_lin_sum = 0.0;
    double barrier_sum = 0.0;
    double min_node_intensity = std::numeric_limits<double>::infinity();
    Eigen::VectorXd grad;  // [mu (N), kernel params]
    bool events_positive = true;
    int bad_seq = -1, bad_idx = -1;
    double bad_val = 0.0;
    int total_events = 0;

    double loglik_sum() const { return event_log_sum - integral_sum; }
    double ls_sum() const { return ls_quad_sum - 2.0 * event_lin_sum; }
};

inline GraphEvalResult graph_evaluate(const GraphModel& model,
                                      std::span<const EventSequence> seqs, int n_time_cells,
                                      int n_lag_cells, const EvalRequest& req) {
    const GraphFilterKernel& k = model.kernel;
    if (!k.all_mlp())
        throw std::invalid_argument("graph objectives need mlp temporal bases");
    const int N = k.n_nodes, L = k.L, R = k.R;
    const double T = model.window.T;
    const Axis time_axis(n_time_cells, 0.0, T);
    const Axis lag_axis(n_lag_cells, 0.0, k.tau_max);
    const double bthr = req.barrier_threshold;
    const bool need_grid = req.want_grid || req.c_ls != 0.0 || req.c_bar != 0.0;
    const bool free_form = k.form == GraphFilterKernel::FilterForm::free;

    GraphEvalResult res;
    const int n_mu = N;
    const int n_kernel = k.num_params();
    res.grad = Eigen::VectorXd::Zero(n_mu + n_kernel);
    // offsets within the kernel slice
    const int off_alpha = n_mu;
    std::vector<int> off_psi(L), off_phi(L);
    {
        int off = off_alpha + R * L;
        for (int l = 0; l < L; ++l) { off_psi[l] = off; off += k.psi_nets[l].num_params(); }
        for (int l = 0; l < L; ++l) { off_phi[l] = off; off += k.phi_nets[l].num_params(); }
    }
    const int off_filters = off_alpha + n_kernel - k.num_filter_params();

    // phi on the lag grid for the decomposed integral (cumulative, edges)
    Eigen::MatrixXd lag_mids(n_lag_cells, 1);
    for (int c = 0; c < n_lag_cells; ++c) lag_mids(c, 0) = lag_axis.mid(c);
    Eigen::MatrixXd phi_mid(L, n_lag_cells);
    for (int l = 0; l < L; ++l) phi_mid.row(l) = k.phi_nets[l].forward_batch(lag_mids).transpose();
    Eigen::MatrixXd phi_cum(L, n_lag_cells + 1);
    for (int l = 0; l < L; ++l) {
        phi_cum(l, 0) = 0.0;
        for (int c = 0; c < n_lag_cells; ++c)
            phi_cum(l, c + 1) = phi_cum(l, c) + lag_axis.h() * phi_mid(l, c);
    }
    auto phi_int = [&](int l, double x) {
        const double xc = std::min(std::max(x, 0.0), k.tau_max);
        int m = static_cast<int>(xc / lag_axis.h());
        if (m > n_lag_cells - 1) m = n_lag_cells - 1;
        return phi_cum(l, m) + (xc - m * lag_axis.h()) * phi_mid(l, m);
    };
    std::vector<Eigen::VectorXd> d_phi_mid(L, Eigen::VectorXd::Zero(n_lag_cells));
    std::vector<Eigen::MatrixXd> dB(R, Eigen::MatrixXd::Zero(N, N));

    for (std::size_t si = 0; si < seqs.size(); ++si) {
        const EventSequence& seq = seqs[si];
        const int n = static_cast<int>(seq.size());
        res.total_events += n;
        Eigen::VectorXd t(n);
        std::vector<int> node(n);
        for (int i = 0; i < n; ++i) {
            if (!seq.events[i].node) throw DimensionMismatch("graph objective needs node events");
            t(i) = seq.events[i].t;
            node[i] = *seq.events[i].node;
            if (node[i] < 0 || node[i] >= N) throw NodeOutOfRange("event node outside the graph");
        }
        // causal pairs within truncation
        std::vector<int> pi, pj;
        std::vector<double> plag;
        for (int i = 0; i < n; ++i)
            for (int j = i - 1; j >= 0; --j) {
                const double lag = t(i) - t(j);
                if (lag > k.tau_max) break;
                if (lag <= 0.0) continue;
                pi.push_back(i);
                pj.push_back(j);
                plag.push_back(lag);
            }
        const int P = static_cast<int>(pi.size());

        // basis values
        Eigen::MatrixXd tcol(n, 1);
        for (int i = 0; i < n; ++i) tcol(i, 0) = t(i);
        Eigen::MatrixXd Psi(L, std::max(n, 1));
        for (int l = 0; l < L; ++l)
            if (n > 0) Psi.row(l) = k.psi_nets[l].forward_batch(tcol).transpose();
        Eigen::MatrixXd plag_col(P, 1);
        for (int p = 0; p < P; ++p) plag_col(p, 0) = plag[p];
        Eigen::MatrixXd PhiP(L, std::max(P, 1));
        for (int l = 0; l < L; ++l)
            if (P > 0) PhiP.row(l) = k.phi_nets[l].forward_batch(plag_col).transpose();

        // event intensities
        Eigen::VectorXd lam(n);
        for (int i = 0; i < n; ++i) lam(i) = model.mu(node[i]);
        for (int p = 0; p < P; ++p) {
            double add = 0.0;
            for (int r = 0; r < R; ++r) {
                double tsum = 0.0;
                for (int l = 0; l < L; ++l) tsum += k.alpha(r, l) * Psi(l, pj[p]) * PhiP(l, p);
                add += tsum * k.filters[r](node[pj[p]], node[pi[p]]);
            }
            lam(pi[p]) += add;
        }

        // decomposed integral: sum_v int lambda(t, v) dt
        double integral = model.mu.sum() * T;
        Eigen::MatrixXd TInt(L, std::max(n, 1));
        for (int i = 0; i < n; ++i)
            for (int l = 0; l < L; ++l) TInt(l, i) = phi_int(l, std::min(T - t(i), k.tau_max));
        Eigen::VectorXd row_sum(R);
        for (int i = 0; i < n; ++i) {
            for (int r = 0; r < R; ++r) row_sum(r) = k.filters[r].row(node[i]).sum();
            for (int r = 0; r < R; ++r) {
                double tsum = 0.0;
                for (int l = 0; l < L; ++l) tsum += k.alpha(r, l) * Psi(l, i) * TInt(l, i);
                integral += tsum * row_sum(r);
            }
        }
        res.integral_sum += integral;

        const double log_floor = req.guarded_event_log ? bthr : 1e-300;
        for (int i = 0; i < n; ++i) {
            res.event_lin_sum += lam(i);
            res.min_node_intensity = std::min(res.min_node_intensity, lam(i));
            if (lam(i) <= 0.0 && res.events_positive) {
                res.events_positive = false;
                res.bad_seq = static_cast<int>(si);
                res.bad_idx = i;
                res.bad_val = lam(i);
            }
            res.event_log_sum += guarded_log(lam(i), log_floor);
            if (req.c_bar != 0.0) res.barrier_sum -= guarded_log(lam(i), bthr);
        }

        // upstreams
        Eigen::VectorXd dlam = Eigen::VectorXd::Zero(n);
        Eigen::MatrixXd dPsi = Eigen::MatrixXd::Zero(L, std::max(n, 1));
        Eigen::MatrixXd dPhiP = Eigen::MatrixXd::Zero(L, std::max(P, 1));
        if (req.want_grad) {
            for (int i = 0; i < n; ++i) {
                double d_log;
                guarded_log(lam(i), log_floor, &d_log);
                double up = req.c_ll * d_log - 2.0 * req.c_ls;
                if (req.c_bar != 0.0) {
                    double d_glog;
                    guarded_log(lam(i), bthr, &d_glog);
                    up -= req.c_bar * d_glog;
                }
                dlam(i) = up;
                res.grad(node[i]) += up;
            }
            // pairs
            for (int p = 0; p < P; ++p) {
                const double dli = dlam(pi[p]);
                if (dli == 0.0) continue;
                const int j = pj[p];
                for (int r = 0; r < R; ++r) {
                    const double B = k.filters[r](node[j], node[pi[p]]);
                    double tsum = 0.0;
                    for (int l = 0; l < L; ++l) {
                        const double a = k.alpha(r, l);
                        tsum += a * Psi(l, j) * PhiP(l, p);
                        res.grad(off_alpha + r * L + l) += dli * B * Psi(l, j) * PhiP(l, p);
                        dPsi(l, j) += dli * B * a * PhiP(l, p);
                        dPhiP(l, p) += dli * B * a * Psi(l, j);
                    }
                    dB[r](node[j], node[pi[p]]) += dli * tsum;
                }
            }
            // integral, weight -c_ll
            const double q = -req.c_ll;
            if (q != 0.0) {
                for (int v = 0; v < N; ++v) res.grad(v) += q * T;
                for (int i = 0; i < n; ++i) {
                    for (int r = 0; r < R; ++r) row_sum(r) = k.filters[r].row(node[i]).sum();
                    for (int r = 0; r < R; ++r) {
                        double tsum = 0.0;
                        for (int l = 0; l < L; ++l) tsum += k.alpha(r, l) * Psi(l, i) * TInt(l, i);
                        for (int v = 0; v < N; ++v) dB[r](node[i], v) += q * tsum;
                        for (int l = 0; l < L; ++l) {
                            const double a = k.alpha(r, l);
                            res.grad(off_alpha + r * L + l) += q * row_sum(r) * Psi(l, i) * TInt(l, i);
                            dPsi(l, i) += q * row_sum(r) * a * TInt(l, i);
                            // TInt -> phi table
                            const double dT = q * row_sum(r) * a * Psi(l, i);
                            const double xc = std::min(std::max(std::min(T - t(i), k.tau_max), 0.0),
                                                       k.tau_max);
                            int m = static_cast<int>(xc / lag_axis.h());
                            if (m > n_lag_cells - 1) m = n_lag_cells - 1;
                            for (int c = 0; c < m; ++c) d_phi_mid[l](c) += dT * lag_axis.h();
                            d_phi_mid[l](m) += dT * (xc - m * lag_axis.h());
                        }
                    }
                }
            }
        }

        // grid pass over (time cell, node)
        if (need_grid) {
            Eigen::MatrixXd slice_lags;  // per (window event)
            for (int g = 0; g < n_time_cells; ++g) {
                const double tg = time_axis.mid(g);
                int lo = static_cast<int>(history_window_begin(seq.events, tg, k.tau_max));
                int hi = lo;
                while (hi < n && t(hi) < tg) ++hi;
                const int nwin = hi - lo;
                Eigen::VectorXd lamg = model.mu;
                Eigen::MatrixXd wr(R, std::max(nwin, 1));
                Eigen::VectorXd phis(std::max(nwin, 1) * L);
                if (nwin > 0) {
                    slice_lags.resize(nwin, 1);
                    for (int jj = 0; jj < nwin; ++jj) slice_lags(jj, 0) = tg - t(lo + jj);
                    Eigen::MatrixXd PhiS(L, nwin);
                    for (int l = 0; l < L; ++l)
                        PhiS.row(l) = k.phi_nets[l].forward_batch(slice_lags).transpose();
                    for (int jj = 0; jj < nwin; ++jj)
                        for (int l = 0; l < L; ++l) phis(jj * L + l) = PhiS(l, jj);
                    for (int jj = 0; jj < nwin; ++jj) {
                        const int j = lo + jj;
                        for (int r = 0; r < R; ++r) {
                            double tsum = 0.0;
                            for (int l = 0; l < L; ++l)
                                tsum += k.alpha(r, l) * Psi(l, j) * phis(jj * L + l);
                            wr(r, jj) = tsum;
                            lamg += tsum * k.filters[r].row(node[j]).transpose();
                        }
                    }
                }
                for (int v = 0; v < N; ++v) {
                    const double lg = lamg(v);
                    res.min_node_intensity = std::min(res.min_node_intensity, lg);
                    res.ls_quad_sum += lg * lg * time_axis.h();
                    if (req.c_bar != 0.0) res.barrier_sum -= guarded_log(lg, bthr);
                }
                if (req.want_grad) {
                    for (int v = 0; v < N; ++v) {
                        const double lg = lamg(v);
                        double up = req.c_ls * 2.0 * lg * time_axis.h();
                        if (req.c_bar != 0.0) {
                            double d_glog;
                            guarded_log(lg, bthr, &d_glog);
                            up -= req.c_bar * d_glog;
                        }
                        res.grad(v) += up;
                        if (up == 0.0 || nwin == 0) continue;
                        for (int jj = 0; jj < nwin; ++jj) {
                            const int j = lo + jj;
                            for (int r = 0; r < R; ++r) {
                                dB[r](node[j], v) += up * wr(r, jj);
                                const double dwr = up * k.filters[r](node[j], v);
                                for (int l = 0; l < L; ++l) {
                                    const double a = k.alpha(r, l);
                                    res.grad(off_alpha + r * L + l) +=
                                        dwr * Psi(l, j) * phis(jj * L + l);
                                    dPsi(l, j) += dwr * a * phis(jj * L + l);
                                }
                            }
                        }
                    }
                    // phi at slice lags: gather upstream then backprop
                    if (nwin > 0) {
                        Eigen::MatrixXd dPhiS = Eigen::MatrixXd::Zero(L, nwin);
                        for (int v = 0; v < N; ++v) {
                            const double lg = lamg(v);
                            double up = req.c_ls * 2.0 * lg * time_axis.h();
                            if (req.c_bar != 0.0) {
                                double d_glog;
                                guarded_log(lg, bthr, &d_glog);
                                up -= req.c_bar * d_glog;
                            }
                            if (up == 0.0) continue;
                            for (int jj = 0; jj < nwin; ++jj) {
                                const int j = lo + jj;
                                for (int r = 0; r < R; ++r) {
                                    const double dwr = up * k.filters[r](node[j], v);
                                    for (int l = 0; l < L; ++l)
                                        dPhiS(l, jj) += dwr * k.alpha(r, l) * Psi(l, j);
                                }
                            }
                        }
                        for (int l = 0; l < L; ++l)
                            detail::backward_chunked(k.phi_nets[l], slice_lags,
                                                     dPhiS.row(l).transpose(),
                                                     res.grad.data() + off_phi[l]);
                    }
                }
            }
        }

        if (req.want_grad) {
            for (int l = 0; l < L; ++l) {
                if (n > 0)
                    detail::backward_chunked(k.psi_nets[l], tcol, dPsi.row(l).transpose(),
                                             res.grad.data() + off_psi[l]);
                if (P > 0)
                    detail::backward_chunked(k.phi_nets[l], plag_col, dPhiP.row(l).transpose(),
                                             res.grad.data() + off_phi[l]);
            }
        }
    }

    if (req.want_grad) {
        for (int l = 0; l < L; ++l)
            if ((d_phi_mid[l].array() != 0.0).any())
                detail::backward_chunked(k.phi_nets[l], lag_mids, d_phi_mid[l],
                                         res.grad.data() + off_phi[l]);
        // filter gradients: free entries directly, polynomial via <dB, S^j>
        int off = off_filters;
        if (free_form) {
            for (int r = 0; r < R; ++r)
                for (int i = 0; i < N; ++i)
                    for (int j = 0; j < N; ++j) res.grad(off++) += dB[r](i, j);
        } else {
            for (int r = 0; r < R; ++r) {
                Eigen::MatrixXd power = k.shift;
                for (int j = 0; j < k.poly_coeffs[r].size(); ++j) {
                    res.grad(off++) += dB[r].cwiseProduct(power).sum();
                    power = power * k.shift;
                }
            }
        }
    }
    return res;
}

// Gradient fit of a graph model; least squares by default, MLE with barrier
// also selectable via the options.
inline std::pair<GraphModel, FitReport> fit_graph(const GraphModel& model_init,
                                                  std::span<const EventSequence> data,
                                                  const FitOptions& opts, int n_time_cells = 64,
                                                  int n_lag_cells = 100) {
    opts.require_valid();
    GraphModel model = model_init;
    model.require_valid();
    const int N = model.kernel.n_nodes;
    const double M = std::max<std::size_t>(data.size(), 1);
    const bool mle = opts.objective == FitOptions::Objective::mle_barrier;

    Eigen::VectorXd theta_nat(N + model.kernel.num_params());
    for (int v = 0; v < N; ++v) theta_nat(v) = model.mu(v);
    model.kernel.get_params(theta_nat.data() + N);
    Eigen::VectorXd theta_opt = theta_nat;
    for (int v = 0; v < N; ++v) theta_opt(v) = inv_softplus(std::max(theta_nat(v), 1e-8));

    detail::ProblemEval eval = [&](const Eigen::VectorXd& th, double w, Eigen::VectorXd& grad,
                                   double& raw, double& min_int) -> double {
        for (int v = 0; v < N; ++v) model.mu(v) = softplus(th(v));
        model.kernel.set_params(th.data() + N);
        EvalRequest req;
        req.want_grad = true;
        req.guarded_event_log = true;
        req.barrier_threshold = opts.barrier_threshold;
        if (mle) {
            req.c_ll = -1.0 / M;
            req.c_bar = w / M;
        } else {
            req.c_ls = 1.0 / M;
        }
        GraphEvalResult r = graph_evaluate(model, data, n_time_cells, n_lag_cells, req);
        double loss;
        if (mle) {
            raw = r.loglik_sum() / M;
            loss = -raw + w * r.barrier_sum / M;
        } else {
            raw = r.ls_sum() / M;
            loss = raw;
        }
        grad = r.grad;
        for (int v = 0; v < N; ++v) grad(v) *= softplus_prime(th(v));
        min_int = r.min_node_intensity;
        return loss;
    };

    FitReport report = detail::run_adam(eval, theta_opt, opts);
    Eigen::VectorXd nat = theta_opt;
    for (int v = 0; v < N; ++v) nat(v) = softplus(theta_opt(v));
    if (opts.max_epochs == 0) nat = theta_nat;
    for (int v = 0; v < N; ++v) model.mu(v) = nat(v);
    model.kernel.set_params(nat.data() + N);
    report.final_params = nat;
    return {model, report};
}

}  // namespace sttpp
