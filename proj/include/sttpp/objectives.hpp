#pragma once

#include <functional>
#include <span>

#include "sttpp/model.hpp"

namespace sttpp {

struct ObjectiveParts {
    double event_term = 0.0;
    double integral_term = 0.0;
    double barrier_term = 0.0;
};

// Scalar objective with its exact gradient for the discretized objective.
// Layout: [mu, kernel parameters...] for deep-kernel models, [mu] otherwise.
struct ObjectiveValue {
    double value = 0.0;
    Eigen::VectorXd gradient;
    ObjectiveParts parts;
};

// log(x) for x >= threshold, C1 quadratic extension below: stays finite for
// any x and its derivative keeps pushing the argument upward.
inline double guarded_log(double x, double threshold, double* deriv = nullptr) {
    if (x >= threshold) {
        if (deriv) *deriv = 1.0 / x;
        return std::log(x);
    }
    const double d = x - threshold;
    if (deriv) *deriv = 1.0 / threshold - d / (threshold * threshold);
    return std::log(threshold) + d / threshold - 0.5 * d * d / (threshold * threshold);
}

// ---------------------------------------------------------------------------
// Quadrature tables for the basis functions.
// ---------------------------------------------------------------------------

// Midpoint-rule tables of phi_l on the lag axis and v_r on the displacement
// grid, plus cumulative lag integrals at cell edges. The objectives evaluate
// all basis integrals and grid intensities through these tables; closed-form
// kernels can replace individual integrals with exact expressions.
struct BasisTables {
    Axis lag;
    Eigen::MatrixXd phi_mid;   // L x lag.n
    Eigen::MatrixXd phi_cum;   // L x (lag.n + 1)
    std::vector<bool> phi_exact;  // per l: kernel supplies exact integrals

    Axis dx, dy;
    std::vector<Eigen::VectorXd> v_tab;  // R entries of size dx.n * dy.n (x-major)
    std::vector<bool> v_exact;

    int disp_index(int ix, int iy) const { return ix * dy.n + iy; }
};

inline void finish_phi_cum(BasisTables& tb) {
    const int L = static_cast<int>(tb.phi_mid.rows());
    const double h = tb.lag.h();
    tb.phi_cum.resize(L, tb.lag.n + 1);
    for (int l = 0; l < L; ++l) {
        tb.phi_cum(l, 0) = 0.0;
        for (int c = 0; c < tb.lag.n; ++c)
            tb.phi_cum(l, c + 1) = tb.phi_cum(l, c) + h * tb.phi_mid(l, c);
    }
}

inline BasisTables build_tables_generic(const Kernel& k, const GridSpec& grid) {
    BasisTables tb;
    tb.lag = grid.lag;
    tb.dx = grid.dx;
    tb.dy = grid.dy;
    const int L = k.temporal_rank(), R = k.spatial_rank();
    tb.phi_mid.resize(L, grid.lag.n);
    tb.phi_exact.resize(L);
    for (int l = 0; l < L; ++l) {
        tb.phi_exact[l] = k.phi_integral(l, k.tau_max).has_value();
        for (int c = 0; c < grid.lag.n; ++c) tb.phi_mid(l, c) = k.phi(l, grid.lag.mid(c));
    }
    finish_phi_cum(tb);
    tb.v_tab.resize(R);
    tb.v_exact.resize(R);
    for (int r = 0; r < R; ++r) {
        tb.v_exact[r] =
            k.v_domain_integral(r, Vec2{0.0, 0.0}, SpatialDomain{0, 1, 0, 1}).has_value();
        tb.v_tab[r].resize(grid.dx.n * grid.dy.n);
        for (int ix = 0; ix < grid.dx.n; ++ix)
            for (int iy = 0; iy < grid.dy.n; ++iy)
                tb.v_tab[r](tb.disp_index(ix, iy)) =
                    k.v(r, Vec2{grid.dx.mid(ix), grid.dy.mid(iy)});
    }
    return tb;
}

// int_0^x phi_l by the midpoint rule: full cells from the cumulative array
// plus a partial cell at the midpoint value. Linear in the table entries.
inline double phi_table_integral(const BasisTables& tb, int l, double x) {
    const double h = tb.lag.h();
    double xc = std::min(std::max(x, 0.0), tb.lag.hi);
    int m = static_cast<int>(xc / h);
    if (m > tb.lag.n - 1) m = tb.lag.n - 1;
    const double frac = xc - m * h;
    return tb.phi_cum(l, m) + frac * tb.phi_mid(l, m);
}

// Masked displacement sum realizing int_{S ∩ ball(0, a_max)} v_r(d) 1[s+d in S] dd.
// visit(cell_index, weight) is called for each active cell; used both to
// compute the integral and to scatter its gradient. Domain clipping uses the
// fractional overlap of each cell with the box; the truncation ball is
// applied at cell centers.
template <typename Visit>
inline void visit_masked_disp_cells(const BasisTables& tb, const Vec2& s,
                                    const SpatialDomain& dom, double a_max, Visit&& visit) {
    const double a2 = a_max * a_max;
    for (int ix = 0; ix < tb.dx.n; ++ix) {
        const double ddx = tb.dx.mid(ix);
        const double over_x = std::min(tb.dx.edge(ix + 1) + s.x, dom.x_hi) -
                              std::max(tb.dx.edge(ix) + s.x, dom.x_lo);
        if (over_x <= 0.0) continue;
        const double rem = a2 - ddx * ddx;
        if (rem < 0.0) continue;
        for (int iy = 0; iy < tb.dy.n; ++iy) {
            const double ddy = tb.dy.mid(iy);
            if (ddy * ddy > rem) continue;
            const double over_y = std::min(tb.dy.edge(iy + 1) + s.y, dom.y_hi) -
                                  std::max(tb.dy.edge(iy) + s.y, dom.y_lo);
            if (over_y <= 0.0) continue;
            visit(tb.disp_index(ix, iy), over_x * over_y);
        }
    }
}

inline double v_spatial_integral(const BasisTables& tb, const Kernel& k, int r, const Vec2& s,
                                 const SpatialDomain& dom) {
    if (tb.v_exact[r]) return *k.v_domain_integral(r, s, dom);
    double acc = 0.0;
    visit_masked_disp_cells(tb, s, dom, k.a_max,
                            [&](int cell, double w) { acc += w * tb.v_tab[r](cell); });
    return acc;
}

// Bilinear interpolation of a displacement table between cell midpoints,
// zero outside the truncation ball, clamped at the outermost midpoints.
struct BilinearStencil {
    int c00, c01, c10, c11;
    double w00, w01, w10, w11;
    bool zero;
};

inline BilinearStencil disp_stencil(const BasisTables& tb, const Vec2& d, double a_max) {
    BilinearStencil st{};
    if (d.squared_norm() > a_max * a_max || d.x < tb.dx.lo || d.x > tb.dx.hi || d.y < tb.dy.lo ||
        d.y > tb.dy.hi) {
        st.zero = true;
        return st;
    }
    const double gx = (d.x - tb.dx.lo) / tb.dx.h() - 0.5;
    const double gy = (d.y - tb.dy.lo) / tb.dy.h() - 0.5;
    int ix = static_cast<int>(std::floor(gx));
    int iy = static_cast<int>(std::floor(gy));
    double fx = gx - ix, fy = gy - iy;
    if (ix < 0) { ix = 0; fx = 0.0; }
    if (ix > tb.dx.n - 2) { ix = tb.dx.n - 2; fx = 1.0; }
    if (iy < 0) { iy = 0; fy = 0.0; }
    if (iy > tb.dy.n - 2) { iy = tb.dy.n - 2; fy = 1.0; }
    st.c00 = tb.disp_index(ix, iy);
    st.c01 = tb.disp_index(ix, iy + 1);
    st.c10 = tb.disp_index(ix + 1, iy);
    st.c11 = tb.disp_index(ix + 1, iy + 1);
    st.w00 = (1 - fx) * (1 - fy);
    st.w01 = (1 - fx) * fy;
    st.w10 = fx * (1 - fy);
    st.w11 = fx * fy;
    st.zero = false;
    return st;
}

inline double disp_interp(const BasisTables& tb, int r, const BilinearStencil& st) {
    if (st.zero) return 0.0;
    const Eigen::VectorXd& v = tb.v_tab[r];
    return st.w00 * v(st.c00) + st.w01 * v(st.c01) + st.w10 * v(st.c10) + st.w11 * v(st.c11);
}

// ---------------------------------------------------------------------------
// Spec-facing precomputed integrals (cumulative lag integrals plus per-event
// spatial integrals for one sequence).
// ---------------------------------------------------------------------------

struct PrecomputedIntegrals {
    BasisTables tables;
    Eigen::MatrixXd spatial;   // R x n_events: int_S v_r(s - s_i) ds
    Eigen::VectorXd upper;     // per event: min(T - t_i, tau_max)
    GridSpec grid;
};

inline PrecomputedIntegrals precompute_integrals(const SttpModel& model,
                                                 const EventSequence& seq,
                                                 const GridSpec& grid) {
    if (!model.kernel) throw std::invalid_argument("precompute_integrals needs a kernel");
    const Kernel& k = *model.kernel;
    PrecomputedIntegrals pre;
    pre.grid = grid;
    pre.tables = build_tables_generic(k, grid);
    const int n = static_cast<int>(seq.size());
    pre.spatial.resize(k.spatial_rank(), n);
    pre.upper.resize(n);
    for (int i = 0; i < n; ++i) {
        const Event& e = seq.events[i];
        if (!e.s) throw DimensionMismatch("planar objective needs event locations");
        pre.upper(i) = std::min(model.window.T - e.t, k.tau_max);
        for (int r = 0; r < k.spatial_rank(); ++r)
            pre.spatial(r, i) = v_spatial_integral(pre.tables, k, r, *e.s, model.domain);
    }
    return pre;
}

// Decomposed value of int_0^T int_S lambda for one sequence.
inline double integral_term(const SttpModel& model, const EventSequence& seq,
                            const PrecomputedIntegrals& pre) {
    if (!model.kernel) return model.mu * model.domain.area() * model.window.T;
    const Kernel& k = *model.kernel;
    if (pre.spatial.cols() != static_cast<Eigen::Index>(seq.size()) ||
        pre.spatial.rows() != k.spatial_rank())
        throw GridMismatch("precomputed integrals built for a different sequence or kernel");
    double acc = model.mu * model.domain.area() * model.window.T;
    const int L = k.temporal_rank(), R = k.spatial_rank();
    for (int i = 0; i < static_cast<int>(seq.size()); ++i) {
        const Event& e = seq.events[i];
        const double x = pre.upper(i);
        for (int r = 0; r < R; ++r) {
            double tsum = 0.0;
            for (int l = 0; l < L; ++l) {
                const double integ = pre.tables.phi_exact[l]
                                         ? *k.phi_integral(l, x)
                                         : phi_table_integral(pre.tables, l, x);
                tsum += k.coeff(r, l) * k.psi(l, e.t) * integ;
            }
            acc += k.u(r, *e.s) * pre.spatial(r, i) * tsum;
        }
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Per-sequence geometry shared by every objective evaluation.
// ---------------------------------------------------------------------------

struct SeqWorkspace {
    const EventSequence* seq = nullptr;
    int n = 0;
    Eigen::VectorXd t;        // event times
    Eigen::MatrixXd s;        // n x 2 locations
    Eigen::VectorXd upper;    // min(T - t_i, tau_max)
    // causal pairs within truncation, j -> i
    std::vector<int> pair_i, pair_j;
    Eigen::MatrixXd pair_lag;   // P x 1
    Eigen::MatrixXd pair_disp;  // P x 2
    // per time-slice event windows [w_lo, w_hi)
    std::vector<int> w_lo, w_hi;
    // flattened (slice, event) pairs for phi at slice lags
    std::vector<int> sp_g, sp_j;
    Eigen::MatrixXd sp_lag;     // SP x 1
};

inline SeqWorkspace build_workspace(const EventSequence& seq, const SttpModel& model,
                                    const GridSpec& grid) {
    SeqWorkspace ws;
    ws.seq = &seq;
    ws.n = static_cast<int>(seq.size());
    ws.t.resize(ws.n);
    ws.s.resize(ws.n, 2);
    ws.upper.resize(ws.n);
    const double tau_max = model.kernel ? model.kernel->tau_max : 0.0;
    const double a_max = model.kernel ? model.kernel->a_max : 0.0;
    for (int i = 0; i < ws.n; ++i) {
        const Event& e = seq.events[i];
        if (!e.s) throw DimensionMismatch("planar objective needs event locations");
        ws.t(i) = e.t;
        ws.s(i, 0) = e.s->x;
        ws.s(i, 1) = e.s->y;
        ws.upper(i) = std::min(model.window.T - e.t, tau_max);
    }
    if (!model.kernel) {
        ws.w_lo.assign(grid.time.n, 0);
        ws.w_hi.assign(grid.time.n, 0);
        return ws;
    }
    std::vector<double> lags, dxs, dys;
    for (int i = 0; i < ws.n; ++i) {
        for (int j = i - 1; j >= 0; --j) {
            const double lag = ws.t(i) - ws.t(j);
            if (lag > tau_max) break;
            if (lag <= 0.0) continue;  // ties contribute nothing causal
            const double ddx = ws.s(i, 0) - ws.s(j, 0);
            const double ddy = ws.s(i, 1) - ws.s(j, 1);
            if (ddx * ddx + ddy * ddy > a_max * a_max) continue;
            ws.pair_i.push_back(i);
            ws.pair_j.push_back(j);
            lags.push_back(lag);
            dxs.push_back(ddx);
            dys.push_back(ddy);
        }
    }
    const int P = static_cast<int>(lags.size());
    ws.pair_lag.resize(P, 1);
    ws.pair_disp.resize(P, 2);
    for (int p = 0; p < P; ++p) {
        ws.pair_lag(p, 0) = lags[p];
        ws.pair_disp(p, 0) = dxs[p];
        ws.pair_disp(p, 1) = dys[p];
    }
    ws.w_lo.resize(grid.time.n);
    ws.w_hi.resize(grid.time.n);
    std::vector<double> sp_lags;
    for (int g = 0; g < grid.time.n; ++g) {
        const double tg = grid.time.mid(g);
        int lo = static_cast<int>(history_window_begin(seq.events, tg, tau_max));
        int hi = lo;
        while (hi < ws.n && ws.t(hi) < tg) ++hi;
        ws.w_lo[g] = lo;
        ws.w_hi[g] = hi;
        for (int j = lo; j < hi; ++j) {
            ws.sp_g.push_back(g);
            ws.sp_j.push_back(j);
            sp_lags.push_back(tg - ws.t(j));
        }
    }
    ws.sp_lag.resize(static_cast<int>(sp_lags.size()), 1);
    for (std::size_t q = 0; q < sp_lags.size(); ++q) ws.sp_lag(static_cast<int>(q), 0) = sp_lags[q];
    return ws;
}

// ---------------------------------------------------------------------------
// Combined evaluator. Computes, over a set of sequences,
//     event_log_sum, integral_sum, ls_quad_sum, event_lin_sum, barrier_sum
// and the gradient of  c_ll*(event_log - integral) + c_ls*(quad - 2*lin)
//                      + c_bar*barrier
// with respect to [mu, kernel params]. For non-deep kernels only d/dmu is
// produced. Event intensities are always evaluated exactly; grid intensities
// go through the displacement tables (exact phi evaluations at slice lags).
// ---------------------------------------------------------------------------

struct EvalRequest {
    double c_ll = 0.0;
    double c_ls = 0.0;
    double c_bar = 0.0;
    double barrier_threshold = 1e-6;
    bool want_grad = false;
    bool want_grid = false;       // forces the grid pass even if c_ls = c_bar = 0
    bool guarded_event_log = false;  // optimizer mode; public MLE is strict
};

struct EvalResult {
    double event_log_sum = 0.0;
    double integral_sum = 0.0;
    double ls_quad_sum = 0.0;
    double event_lin_sum = 0.0;
    double barrier_sum = 0.0;
    double min_node_intensity = std::numeric_limits<double>::infinity();
    Eigen::VectorXd grad;
    bool events_positive = true;
    int bad_seq = -1, bad_idx = -1;
    double bad_val = 0.0;
    int total_events = 0;

    double loglik_sum() const { return event_log_sum - integral_sum; }
    double ls_sum() const { return ls_quad_sum - 2.0 * event_lin_sum; }
};

namespace detail {

struct ParamLayout {
    int mu = 0;
    int alpha = 1;
    std::vector<int> psi, phi, u, v;
    int total = 1;

    static ParamLayout for_kernel(const DeepKernel* dk) {
        ParamLayout lay;
        if (!dk) return lay;
        int off = 1 + dk->R * dk->L;
        for (const auto& m : dk->psi_nets) { lay.psi.push_back(off); off += m.num_params(); }
        for (const auto& m : dk->phi_nets) { lay.phi.push_back(off); off += m.num_params(); }
        for (const auto& m : dk->u_nets) { lay.u.push_back(off); off += m.num_params(); }
        for (const auto& m : dk->v_nets) { lay.v.push_back(off); off += m.num_params(); }
        lay.total = off;
        return lay;
    }
};

// Chunked traced backward through one net: forward values were already used;
// re-runs the forward in blocks keeping activations, then backprops the
// supplied upstream rows.
inline void backward_chunked(const Mlp& net, const Eigen::MatrixXd& X,
                             const Eigen::VectorXd& upstream, double* grad_slice) {
    const int N = static_cast<int>(X.rows());
    const int block = 8192;
    MlpTrace trace;
    for (int lo = 0; lo < N; lo += block) {
        const int len = std::min(block, N - lo);
        net.forward_traced(X.middleRows(lo, len), trace);
        net.backward_batch(trace, upstream.segment(lo, len), grad_slice);
    }
}

}  // namespace detail

inline EvalResult evaluate_objectives(const SttpModel& model,
                                      std::span<const SeqWorkspace> workspaces,
                                      const GridSpec& grid, const EvalRequest& req) {
    const Kernel* kernel = model.kernel.get();
    const DeepKernel* dk = dynamic_cast<const DeepKernel*>(kernel);
    const detail::ParamLayout lay = detail::ParamLayout::for_kernel(dk);
    const int L = kernel ? kernel->temporal_rank() : 0;
    const int R = kernel ? kernel->spatial_rank() : 0;
    const double area = model.domain.area();
    const double Twin = model.window.T;
    const double mu = model.mu;
    const bool need_grid = req.want_grid || req.c_ls != 0.0 || req.c_bar != 0.0;

    EvalResult res;
    res.grad = Eigen::VectorXd::Zero(lay.total);
    double* grad = res.grad.data();

    // ---- global basis tables ----
    BasisTables tb;
    Eigen::MatrixXd lag_mids, disp_mids;
    std::vector<Eigen::VectorXd> d_phi_mid(L), d_v_tab(R);
    if (kernel) {
        if (dk) {
            tb.lag = grid.lag;
            tb.dx = grid.dx;
            tb.dy = grid.dy;
            lag_mids.resize(grid.lag.n, 1);
            for (int c = 0; c < grid.lag.n; ++c) lag_mids(c, 0) = grid.lag.mid(c);
            disp_mids.resize(grid.dx.n * grid.dy.n, 2);
            for (int ix = 0; ix < grid.dx.n; ++ix)
                for (int iy = 0; iy < grid.dy.n; ++iy) {
                    disp_mids(tb.disp_index(ix, iy), 0) = grid.dx.mid(ix);
                    disp_mids(tb.disp_index(ix, iy), 1) = grid.dy.mid(iy);
                }
            tb.phi_mid.resize(L, grid.lag.n);
            tb.phi_exact.assign(L, false);
            for (int l = 0; l < L; ++l)
                tb.phi_mid.row(l) = dk->phi_nets[l].forward_batch(lag_mids).transpose();
            finish_phi_cum(tb);
            tb.v_tab.resize(R);
            tb.v_exact.assign(R, false);
            for (int r = 0; r < R; ++r) tb.v_tab[r] = dk->v_nets[r].forward_batch(disp_mids);
        } else {
            tb = build_tables_generic(*kernel, grid);
        }
        for (int l = 0; l < L; ++l) d_phi_mid[l] = Eigen::VectorXd::Zero(grid.lag.n);
        for (int r = 0; r < R; ++r) d_v_tab[r] = Eigen::VectorXd::Zero(grid.dx.n * grid.dy.n);
    }

    const double cellvol = grid.cell_volume();
    const double bthr = req.barrier_threshold;

    // scratch buffers reused across sequences
    Eigen::MatrixXd Psi, U, PhiP, VP, PhiS;      // basis values
    Eigen::MatrixXd dPsi, dU, dPhiP, dVP, dPhiS; // upstreams
    Eigen::VectorXd lam, dlam;
    Eigen::MatrixXd lam_grid, dlam_grid;         // x.n * y.n per slice
    Eigen::MatrixXd wslice, dwslice;             // R x window

    for (std::size_t si = 0; si < workspaces.size(); ++si) {
        const SeqWorkspace& ws = workspaces[si];
        const int n = ws.n;
        const int P = static_cast<int>(ws.pair_i.size());
        const int SP = static_cast<int>(ws.sp_g.size());
        res.total_events += n;

        // ---- basis values at events, pairs, slice lags ----
        if (kernel) {
            Psi.resize(L, n);
            U.resize(R, n);
            PhiP.resize(L, P);
            VP.resize(R, P);
            PhiS.resize(L, SP);
            if (dk) {
                if (n > 0) {
                    Eigen::MatrixXd tcol = ws.t;
                    for (int l = 0; l < L; ++l)
                        Psi.row(l) = dk->psi_nets[l].forward_batch(tcol).transpose();
                    for (int r = 0; r < R; ++r)
                        U.row(r) = dk->u_nets[r].forward_batch(ws.s).transpose();
                }
                for (int l = 0; l < L; ++l) {
                    if (P > 0) PhiP.row(l) = dk->phi_nets[l].forward_batch(ws.pair_lag).transpose();
                    if (SP > 0) PhiS.row(l) = dk->phi_nets[l].forward_batch(ws.sp_lag).transpose();
                }
                for (int r = 0; r < R; ++r)
                    if (P > 0) VP.row(r) = dk->v_nets[r].forward_batch(ws.pair_disp).transpose();
            } else {
                for (int i = 0; i < n; ++i) {
                    for (int l = 0; l < L; ++l) Psi(l, i) = kernel->psi(l, ws.t(i));
                    for (int r = 0; r < R; ++r) U(r, i) = kernel->u(r, Vec2{ws.s(i, 0), ws.s(i, 1)});
                }
                for (int p = 0; p < P; ++p) {
                    for (int l = 0; l < L; ++l) PhiP(l, p) = kernel->phi(l, ws.pair_lag(p, 0));
                    for (int r = 0; r < R; ++r)
                        VP(r, p) = kernel->v(r, Vec2{ws.pair_disp(p, 0), ws.pair_disp(p, 1)});
                }
                for (int q = 0; q < SP; ++q)
                    for (int l = 0; l < L; ++l) PhiS(l, q) = kernel->phi(l, ws.sp_lag(q, 0));
            }
        }

        // ---- event intensities (exact) ----
        lam.setConstant(n, mu);
        for (int p = 0; p < P; ++p) {
            const int i = ws.pair_i[p], j = ws.pair_j[p];
            double add = 0.0;
            for (int r = 0; r < R; ++r) {
                double tsum = 0.0;
                for (int l = 0; l < L; ++l) tsum += kernel->coeff(r, l) * Psi(l, j) * PhiP(l, p);
                add += tsum * U(r, j) * VP(r, p);
            }
            lam(ws.pair_i[p]) += add;
            (void)i;
        }

        // ---- integral term (decomposed) ----
        double integral = mu * area * Twin;
        // cache per-event temporal integrals for the backward pass
        Eigen::MatrixXd TInt(L, std::max(n, 1));
        for (int i = 0; i < n; ++i) {
            const double x = ws.upper(i);
            for (int l = 0; l < L; ++l)
                TInt(l, i) = (kernel && tb.phi_exact[l]) ? *kernel->phi_integral(l, x)
                                                         : phi_table_integral(tb, l, x);
        }
        Eigen::MatrixXd SInt(R, std::max(n, 1));
        for (int i = 0; i < n; ++i) {
            const Vec2 si_loc{ws.s(i, 0), ws.s(i, 1)};
            for (int r = 0; r < R; ++r)
                SInt(r, i) = kernel ? v_spatial_integral(tb, *kernel, r, si_loc, model.domain) : 0.0;
        }
        for (int i = 0; i < n; ++i) {
            for (int r = 0; r < R; ++r) {
                double tsum = 0.0;
                for (int l = 0; l < L; ++l) tsum += kernel->coeff(r, l) * Psi(l, i) * TInt(l, i);
                integral += U(r, i) * SInt(r, i) * tsum;
            }
        }
        res.integral_sum += integral;

        // ---- event sums ----
        const double log_floor = req.guarded_event_log ? bthr : 1e-300;
        for (int i = 0; i < n; ++i) {
            const double li = lam(i);
            res.event_lin_sum += li;
            res.min_node_intensity = std::min(res.min_node_intensity, li);
            if (li <= 0.0 && res.events_positive) {
                res.events_positive = false;
                res.bad_seq = static_cast<int>(si);
                res.bad_idx = i;
                res.bad_val = li;
            }
            res.event_log_sum += guarded_log(li, log_floor);
            // barrier collocation includes observed events
            if (req.c_bar != 0.0) res.barrier_sum -= guarded_log(li, bthr);
        }

        // ---- upstream joints for the backward pass ----
        dlam.setZero(n);
        if (req.want_grad) {
            for (int i = 0; i < n; ++i) {
                const double li = lam(i);
                double d_log;
                guarded_log(li, log_floor, &d_log);
                double up = req.c_ll * d_log - 2.0 * req.c_ls;
                if (req.c_bar != 0.0) {
                    double d_glog;
                    guarded_log(li, bthr, &d_glog);
                    up -= req.c_bar * d_glog;
                }
                dlam(i) = up;
            }
            // d mu from event intensities and the baseline part of the integral
            grad[lay.mu] += dlam.sum();
            grad[lay.mu] += -req.c_ll * area * Twin;
        }

        if (kernel && req.want_grad) {
            dPsi.setZero(L, n);
            dU.setZero(R, n);
            dPhiP.setZero(L, P);
            dVP.setZero(R, P);
            dPhiS.setZero(L, SP);
        }

        // backward: event intensity pair terms
        if (req.want_grad && kernel) {
            for (int p = 0; p < P; ++p) {
                const double dli = dlam(ws.pair_i[p]);
                if (dli == 0.0) continue;
                const int j = ws.pair_j[p];
                for (int r = 0; r < R; ++r) {
                    double tsum = 0.0;
                    for (int l = 0; l < L; ++l) tsum += kernel->coeff(r, l) * Psi(l, j) * PhiP(l, p);
                    const double uv = U(r, j) * VP(r, p);
                    dVP(r, p) += dli * U(r, j) * tsum;
                    dU(r, j) += dli * VP(r, p) * tsum;
                    if (dk) {
                        for (int l = 0; l < L; ++l) {
                            const double c = kernel->coeff(r, l);
                            grad[lay.alpha + r * L + l] += dli * uv * Psi(l, j) * PhiP(l, p);
                            dPsi(l, j) += dli * uv * c * PhiP(l, p);
                            dPhiP(l, p) += dli * uv * c * Psi(l, j);
                        }
                    }
                }
            }
            // backward: integral term, weight -c_ll
            const double q = -req.c_ll;
            if (q != 0.0) {
                for (int i = 0; i < n; ++i) {
                    const Vec2 si_loc{ws.s(i, 0), ws.s(i, 1)};
                    for (int r = 0; r < R; ++r) {
                        double tsum = 0.0;
                        for (int l = 0; l < L; ++l)
                            tsum += kernel->coeff(r, l) * Psi(l, i) * TInt(l, i);
                        dU(r, i) += q * SInt(r, i) * tsum;
                        const double dSint = q * U(r, i) * tsum;
                        if (dk && !tb.v_exact[r] && dSint != 0.0) {
                            visit_masked_disp_cells(
                                tb, si_loc, model.domain, kernel->a_max,
                                [&](int cell, double w) { d_v_tab[r](cell) += dSint * w; });
                        }
                        const double dA = q * U(r, i) * SInt(r, i);
                        if (dk) {
                            for (int l = 0; l < L; ++l) {
                                const double c = kernel->coeff(r, l);
                                grad[lay.alpha + r * L + l] += dA * Psi(l, i) * TInt(l, i);
                                dPsi(l, i) += dA * c * TInt(l, i);
                                // d TInt -> phi table cells
                                if (!tb.phi_exact[l]) {
                                    const double dT = dA * c * Psi(l, i);
                                    const double h = tb.lag.h();
                                    double xc = std::min(std::max(ws.upper(i), 0.0), tb.lag.hi);
                                    int m = static_cast<int>(xc / h);
                                    if (m > tb.lag.n - 1) m = tb.lag.n - 1;
                                    for (int c2 = 0; c2 < m; ++c2) d_phi_mid[l](c2) += dT * h;
                                    d_phi_mid[l](m) += dT * (xc - m * h);
                                }
                            }
                        }
                    }
                }
            }
        }

        // ---- grid pass: ls quadratic term and barrier nodes ----
        if (need_grid) {
            const int nx = grid.x.n, ny = grid.y.n;
            lam_grid.resize(nx, ny);
            // locate the first sp index of each slice g: windows were emitted in order
            std::vector<int> sp_start(grid.time.n, 0);
            {
                int acc = 0;
                for (int g = 0; g < grid.time.n; ++g) {
                    sp_start[g] = acc;
                    acc += ws.w_hi[g] - ws.w_lo[g];
                }
            }
            for (int g = 0; g < grid.time.n; ++g) {
                const int wl = ws.w_lo[g], wh = ws.w_hi[g];
                const int nwin = wh - wl;
                lam_grid.setConstant(mu);
                if (kernel && nwin > 0) {
                    wslice.resize(R, nwin);
                    for (int jj = 0; jj < nwin; ++jj) {
                        const int j = wl + jj;
                        const int spq = sp_start[g] + jj;
                        for (int r = 0; r < R; ++r) {
                            double tsum = 0.0;
                            for (int l = 0; l < L; ++l)
                                tsum += kernel->coeff(r, l) * Psi(l, j) * PhiS(l, spq);
                            wslice(r, jj) = tsum * U(r, j);
                        }
                    }
                    for (int ix = 0; ix < nx; ++ix) {
                        const double nodex = grid.x.mid(ix);
                        for (int iy = 0; iy < ny; ++iy) {
                            const double nodey = grid.y.mid(iy);
                            double acc = 0.0;
                            for (int jj = 0; jj < nwin; ++jj) {
                                const int j = wl + jj;
                                const Vec2 d{nodex - ws.s(j, 0), nodey - ws.s(j, 1)};
                                const BilinearStencil st = disp_stencil(tb, d, kernel->a_max);
                                if (st.zero) continue;
                                for (int r = 0; r < R; ++r)
                                    acc += wslice(r, jj) * disp_interp(tb, r, st);
                            }
                            lam_grid(ix, iy) += acc;
                        }
                    }
                }
                // accumulate objective pieces and node upstreams
                for (int ix = 0; ix < nx; ++ix) {
                    for (int iy = 0; iy < ny; ++iy) {
                        const double lg = lam_grid(ix, iy);
                        res.min_node_intensity = std::min(res.min_node_intensity, lg);
                        res.ls_quad_sum += lg * lg * cellvol;
                        if (req.c_bar != 0.0) res.barrier_sum -= guarded_log(lg, bthr);
                    }
                }
                if (req.want_grad) {
                    dlam_grid.resize(nx, ny);
                    for (int ix = 0; ix < nx; ++ix)
                        for (int iy = 0; iy < ny; ++iy) {
                            const double lg = lam_grid(ix, iy);
                            double up = req.c_ls * 2.0 * lg * cellvol;
                            if (req.c_bar != 0.0) {
                                double d_glog;
                                guarded_log(lg, bthr, &d_glog);
                                up -= req.c_bar * d_glog;
                            }
                            dlam_grid(ix, iy) = up;
                            grad[lay.mu] += up;
                        }
                    if (kernel && nwin > 0) {
                        dwslice.setZero(R, nwin);
                        for (int ix = 0; ix < nx; ++ix) {
                            const double nodex = grid.x.mid(ix);
                            for (int iy = 0; iy < ny; ++iy) {
                                const double up = dlam_grid(ix, iy);
                                if (up == 0.0) continue;
                                const double nodey = grid.y.mid(iy);
                                for (int jj = 0; jj < nwin; ++jj) {
                                    const int j = wl + jj;
                                    const Vec2 d{nodex - ws.s(j, 0), nodey - ws.s(j, 1)};
                                    const BilinearStencil st = disp_stencil(tb, d, kernel->a_max);
                                    if (st.zero) continue;
                                    for (int r = 0; r < R; ++r) {
                                        dwslice(r, jj) += up * disp_interp(tb, r, st);
                                        if (dk) {
                                            const double c = up * wslice(r, jj);
                                            d_v_tab[r](st.c00) += c * st.w00;
                                            d_v_tab[r](st.c01) += c * st.w01;
                                            d_v_tab[r](st.c10) += c * st.w10;
                                            d_v_tab[r](st.c11) += c * st.w11;
                                        }
                                    }
                                }
                            }
                        }
                        for (int jj = 0; jj < nwin; ++jj) {
                            const int j = wl + jj;
                            const int spq = sp_start[g] + jj;
                            for (int r = 0; r < R; ++r) {
                                const double dw = dwslice(r, jj);
                                if (dw == 0.0) continue;
                                double tsum = 0.0;
                                for (int l = 0; l < L; ++l)
                                    tsum += kernel->coeff(r, l) * Psi(l, j) * PhiS(l, spq);
                                dU(r, j) += dw * tsum;
                                if (dk) {
                                    for (int l = 0; l < L; ++l) {
                                        const double c = kernel->coeff(r, l);
                                        grad[lay.alpha + r * L + l] +=
                                            dw * U(r, j) * Psi(l, j) * PhiS(l, spq);
                                        dPsi(l, j) += dw * U(r, j) * c * PhiS(l, spq);
                                        dPhiS(l, spq) += dw * U(r, j) * c * Psi(l, j);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        // ---- per-sequence MLP backward ----
        if (req.want_grad && dk) {
            for (int l = 0; l < L; ++l) {
                if (n > 0) {
                    Eigen::MatrixXd tcol = ws.t;
                    detail::backward_chunked(dk->psi_nets[l], tcol, dPsi.row(l).transpose(),
                                             grad + lay.psi[l]);
                }
                if (P > 0)
                    detail::backward_chunked(dk->phi_nets[l], ws.pair_lag,
                                             dPhiP.row(l).transpose(), grad + lay.phi[l]);
                if (SP > 0)
                    detail::backward_chunked(dk->phi_nets[l], ws.sp_lag, dPhiS.row(l).transpose(),
                                             grad + lay.phi[l]);
            }
            for (int r = 0; r < R; ++r) {
                if (n > 0)
                    detail::backward_chunked(dk->u_nets[r], ws.s, dU.row(r).transpose(),
                                             grad + lay.u[r]);
                if (P > 0)
                    detail::backward_chunked(dk->v_nets[r], ws.pair_disp, dVP.row(r).transpose(),
                                             grad + lay.v[r]);
            }
        }
    }

    // ---- table backward (phi lag table, v displacement tables) ----
    if (req.want_grad && dk) {
        for (int l = 0; l < L; ++l)
            if ((d_phi_mid[l].array() != 0.0).any())
                detail::backward_chunked(dk->phi_nets[l], lag_mids, d_phi_mid[l],
                                         res.grad.data() + lay.phi[l]);
        for (int r = 0; r < R; ++r)
            if ((d_v_tab[r].array() != 0.0).any())
                detail::backward_chunked(dk->v_nets[r], disp_mids, d_v_tab[r],
                                         res.grad.data() + lay.v[r]);
    }
    return res;
}

// Convenience: build workspaces for a set of sequences.
inline std::vector<SeqWorkspace> build_workspaces(std::span<const EventSequence> seqs,
                                                  const SttpModel& model, const GridSpec& grid) {
    std::vector<SeqWorkspace> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs) out.push_back(build_workspace(s, model, grid));
    return out;
}

// ---------------------------------------------------------------------------
// Public objectives.
// ---------------------------------------------------------------------------

// Average log-likelihood over sequences, Eq.-5 form with the decomposed
// integral; strict positivity at events.
inline ObjectiveValue log_likelihood(const SttpModel& model,
                                     std::span<const EventSequence> seqs, const GridSpec& grid) {
    grid.require_valid();
    const auto workspaces = build_workspaces(seqs, model, grid);
    EvalRequest req;
    const double M = std::max<std::size_t>(seqs.size(), 1);
    req.c_ll = 1.0 / M;
    req.want_grad = true;
    EvalResult r = evaluate_objectives(model, workspaces, grid, req);
    if (!r.events_positive)
        throw NonPositiveIntensityAtEvent(r.bad_seq, r.bad_idx, r.bad_val);
    ObjectiveValue out;
    out.parts.event_term = r.event_log_sum / M;
    out.parts.integral_term = -r.integral_sum / M;
    out.value = out.parts.event_term + out.parts.integral_term;
    out.gradient = std::move(r.grad);
    return out;
}

// Average empirical least-squares loss over sequences.
inline ObjectiveValue ls_loss(const SttpModel& model, std::span<const EventSequence> seqs,
                              const GridSpec& grid) {
    grid.require_valid();
    const auto workspaces = build_workspaces(seqs, model, grid);
    EvalRequest req;
    const double M = std::max<std::size_t>(seqs.size(), 1);
    req.c_ls = 1.0 / M;
    req.want_grad = true;
    EvalResult r = evaluate_objectives(model, workspaces, grid, req);
    ObjectiveValue out;
    out.parts.event_term = -2.0 * r.event_lin_sum / M;
    out.parts.integral_term = r.ls_quad_sum / M;
    out.value = out.parts.event_term + out.parts.integral_term;
    out.gradient = std::move(r.grad);
    return out;
}

// Log-barrier penalty -w * sum over collocation nodes (grid nodes of every
// sequence plus all observed events) of log lambda, with the guarded
// extension below the threshold.
inline ObjectiveValue barrier_penalty(const SttpModel& model,
                                      std::span<const EventSequence> seqs, const GridSpec& grid,
                                      double weight, double threshold) {
    if (!(weight > 0.0) || !(threshold > 0.0))
        throw std::invalid_argument("barrier weight and threshold must be positive");
    grid.require_valid();
    const auto workspaces = build_workspaces(seqs, model, grid);
    EvalRequest req;
    req.c_bar = weight;
    req.barrier_threshold = threshold;
    req.want_grad = true;
    EvalResult r = evaluate_objectives(model, workspaces, grid, req);
    ObjectiveValue out;
    out.parts.barrier_term = weight * r.barrier_sum;
    out.value = out.parts.barrier_term;
    out.gradient = std::move(r.grad);
    return out;
}

// Midpoint time cells aligned to the discontinuities of lambda: event times
// and truncation expiries. Within each segment lambda(., s) is smooth, so
// midpoint quadrature converges at its nominal rate.
inline void event_aligned_time_cells(const EventSequence& seq, double T, double tau_max,
                                     int n_total, std::vector<double>& mids,
                                     std::vector<double>& widths) {
    std::vector<double> brk{0.0, T};
    for (const auto& e : seq.events) {
        if (e.t > 0.0 && e.t < T) brk.push_back(e.t);
        const double expiry = e.t + tau_max;
        if (tau_max > 0.0 && expiry > 0.0 && expiry < T) brk.push_back(expiry);
    }
    std::sort(brk.begin(), brk.end());
    brk.erase(std::unique(brk.begin(), brk.end()), brk.end());
    mids.clear();
    widths.clear();
    for (std::size_t k = 0; k + 1 < brk.size(); ++k) {
        const double len = brk[k + 1] - brk[k];
        const int cells = std::max(1, static_cast<int>(std::floor(n_total * len / T + 0.5)));
        const double h = len / cells;
        for (int c = 0; c < cells; ++c) {
            mids.push_back(brk[k] + (c + 0.5) * h);
            widths.push_back(h);
        }
    }
}

// Direct tensor-product midpoint quadrature of lambda^power over [0,T] x S,
// with the time axis segmented at intensity discontinuities. Test oracle.
inline double brute_force_intensity_integral(const SttpModel& model, const EventSequence& seq,
                                             const GridSpec& fine_grid, int power = 1) {
    std::vector<double> mids, widths;
    const double tau_max = model.kernel ? model.kernel->tau_max : 0.0;
    event_aligned_time_cells(seq, model.window.T, tau_max, fine_grid.time.n, mids, widths);
    double integral = 0.0;
    const double cell_area = fine_grid.cell_area();
    for (std::size_t g = 0; g < mids.size(); ++g) {
        double slab = 0.0;
        for (int ix = 0; ix < fine_grid.x.n; ++ix)
            for (int iy = 0; iy < fine_grid.y.n; ++iy) {
                const double l = conditional_intensity(
                    model, seq, mids[g], {fine_grid.x.mid(ix), fine_grid.y.mid(iy)});
                slab += power == 1 ? l : std::pow(l, power);
            }
        integral += widths[g] * cell_area * slab;
    }
    return integral;
}

// Eq.-5 value with the integral done by brute-force quadrature; the
// independent oracle for the decomposition.
inline double brute_force_log_likelihood(const SttpModel& model, const EventSequence& seq,
                                         const GridSpec& fine_grid) {
    double event_sum = 0.0;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const Event& e = seq.events[i];
        if (!e.s) throw DimensionMismatch("planar objective needs event locations");
        const double li = conditional_intensity(model, seq, e.t, *e.s);
        if (li <= 0.0) throw NonPositiveIntensityAtEvent(0, static_cast<int>(i), li);
        event_sum += std::log(li);
    }
    return event_sum - brute_force_intensity_integral(model, seq, fine_grid, 1);
}

// Monte-Carlo estimate of the likelihood gap E[l(true) - l(perturbed)] over
// trajectories simulated from the true model.
struct GapEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::vector<double> per_trajectory;
};

inline GapEstimate perturbation_gap(const SttpModel& true_model, const SttpModel& perturbed,
                                    std::span<const EventSequence> seqs, const GridSpec& grid) {
    GapEstimate out;
    EvalRequest req;
    req.c_ll = 1.0;
    for (const auto& seq : seqs) {
        const EventSequence* one = &seq;
        auto ws_true = build_workspaces({one, 1}, true_model, grid);
        auto ws_pert = build_workspaces({one, 1}, perturbed, grid);
        EvalResult a = evaluate_objectives(true_model, ws_true, grid, req);
        if (!a.events_positive) throw NonPositiveIntensityAtEvent(a.bad_seq, a.bad_idx, a.bad_val);
        EvalResult b = evaluate_objectives(perturbed, ws_pert, grid, req);
        if (!b.events_positive) throw NonPositiveIntensityAtEvent(b.bad_seq, b.bad_idx, b.bad_val);
        out.per_trajectory.push_back(a.loglik_sum() - b.loglik_sum());
    }
    const double M = static_cast<double>(out.per_trajectory.size());
    for (double g : out.per_trajectory) out.mean += g;
    out.mean /= M;
    double var = 0.0;
    for (double g : out.per_trajectory) var += (g - out.mean) * (g - out.mean);
    var /= std::max(M - 1.0, 1.0);
    out.std_error = std::sqrt(var / M);
    return out;
}

// Block-diagonal concatenation of two kernels; used to add small smooth
// perturbations to a base kernel while keeping the separable interface.
class CompositeKernel : public Kernel {
  public:
    KernelPtr first, second;
    double scale_second = 1.0;

    CompositeKernel(KernelPtr a, KernelPtr b, double scale_b = 1.0)
        : first(std::move(a)), second(std::move(b)), scale_second(scale_b) {
        tau_max = std::max(first->tau_max, second->tau_max);
        a_max = std::max(first->a_max, second->a_max);
    }

    int temporal_rank() const override {
        return first->temporal_rank() + second->temporal_rank();
    }
    int spatial_rank() const override { return first->spatial_rank() + second->spatial_rank(); }

    double coeff(int r, int l) const override {
        const int R1 = first->spatial_rank(), L1 = first->temporal_rank();
        if (r < R1 && l < L1) return first->coeff(r, l);
        if (r >= R1 && l >= L1) return scale_second * second->coeff(r - R1, l - L1);
        return 0.0;
    }
    double psi(int l, double tp) const override {
        const int L1 = first->temporal_rank();
        return l < L1 ? first->psi(l, tp) : second->psi(l - L1, tp);
    }
    double phi(int l, double lag) const override {
        const int L1 = first->temporal_rank();
        if (l < L1) return lag <= first->tau_max ? first->phi(l, lag) : 0.0;
        return lag <= second->tau_max ? second->phi(l - L1, lag) : 0.0;
    }
    double u(int r, const Vec2& sp) const override {
        const int R1 = first->spatial_rank();
        return r < R1 ? first->u(r, sp) : second->u(r - R1, sp);
    }
    double v(int r, const Vec2& d) const override {
        const int R1 = first->spatial_rank();
        if (r < R1) return d.norm() <= first->a_max ? first->v(r, d) : 0.0;
        return d.norm() <= second->a_max ? second->v(r - R1, d) : 0.0;
    }
    std::optional<double> phi_integral(int l, double upper) const override {
        const int L1 = first->temporal_rank();
        if (l < L1) return first->phi_integral(l, std::min(upper, first->tau_max));
        return second->phi_integral(l - L1, std::min(upper, second->tau_max));
    }
    std::optional<double> v_domain_integral(int r, const Vec2& c,
                                            const SpatialDomain& dom) const override {
        const int R1 = first->spatial_rank();
        if (r < R1) return first->v_domain_integral(r, c, dom);
        return second->v_domain_integral(r - R1, c, dom);
    }
};

}  // namespace sttpp
