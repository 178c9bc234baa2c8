#pragma once

#include <Eigen/Core>
#include <Eigen/SVD>
#include <memory>
#include <optional>
#include <vector>

#include "sttpp/common.hpp"
#include "sttpp/event.hpp"
#include "sttpp/grid.hpp"
#include "sttpp/mlp.hpp"

namespace sttpp {

// Influence kernel in the reparameterized low-rank form
//
//   k(t', t, s', s) = sum_{r,l} alpha(r,l) psi_l(t') u_r(s') phi_l(t-t') v_r(s-s'),
//
// truncated to zero for lags beyond tau_max or displacements beyond a_max.
// Closed-form kernels may expose exact basis integrals; everything else is
// handled on quadrature tables by the objectives module.
class Kernel {
  public:
    double tau_max = 1.0;
    double a_max = 1.0;

    virtual ~Kernel() = default;

    virtual int temporal_rank() const = 0;  // L
    virtual int spatial_rank() const = 0;   // R
    virtual double coeff(int r, int l) const = 0;
    virtual double psi(int l, double tprime) const = 0;
    virtual double phi(int l, double lag) const = 0;
    virtual double u(int r, const Vec2& sprime) const = 0;
    virtual double v(int r, const Vec2& disp) const = 0;

    // Exact int_0^upper phi_l(tau) dtau for 0 <= upper <= tau_max, if known.
    virtual std::optional<double> phi_integral(int /*l*/, double /*upper*/) const {
        return std::nullopt;
    }
    // Exact int_S v_r(s - center) ds, if known.
    virtual std::optional<double> v_domain_integral(int /*r*/, const Vec2& /*center*/,
                                                    const SpatialDomain& /*dom*/) const {
        return std::nullopt;
    }

    virtual bool uses_marks() const { return false; }

    double eval(double tprime, double t, const Vec2& sprime, const Vec2& s) const {
        if (t <= tprime)
            throw NonCausalPair("kernel queried with t = " + std::to_string(t) +
                                " <= t' = " + std::to_string(tprime));
        const double lag = t - tprime;
        const Vec2 disp = s - sprime;
        if (lag > tau_max || disp.norm() > a_max) return 0.0;
        const int L = temporal_rank(), R = spatial_rank();
        double acc = 0.0;
        for (int r = 0; r < R; ++r) {
            const double ur = u(r, sprime);
            const double vr = v(r, disp);
            double tsum = 0.0;
            for (int l = 0; l < L; ++l) tsum += coeff(r, l) * psi(l, tprime) * phi(l, lag);
            acc += tsum * ur * vr;
        }
        return acc;
    }

    // Contribution of a past event to the point (t, s). Marked kernels
    // override this to consume the event and query marks.
    virtual double eval_event(const Event& past, double t, const Vec2& s,
                              const std::vector<double>* query_mark = nullptr) const {
        (void)query_mark;
        if (!past.s) throw DimensionMismatch("planar kernel needs event locations");
        return eval(past.t, t, *past.s, s);
    }
};

using KernelPtr = std::shared_ptr<const Kernel>;

// ---------------------------------------------------------------------------
// Deep kernel: every basis function is its own small MLP. Temporal bases have
// linear (sign-free) outputs, spatial bases softplus outputs.
// ---------------------------------------------------------------------------

class DeepKernel : public Kernel {
  public:
    int L = 1, R = 1;
    Eigen::MatrixXd alpha;          // R x L
    std::vector<Mlp> psi_nets;      // L, input t'
    std::vector<Mlp> phi_nets;      // L, input lag
    std::vector<Mlp> u_nets;        // R, input s'
    std::vector<Mlp> v_nets;        // R, input displacement

    DeepKernel() = default;

    static DeepKernel init(const ModelConfig& cfg, std::uint64_t seed, double alpha_scale = 0.1) {
        DeepKernel k;
        k.L = cfg.temporal_rank;
        k.R = cfg.spatial_rank;
        k.tau_max = cfg.tau_max;
        k.a_max = cfg.a_max;
        MlpSpec temporal{1, cfg.hidden_widths, 1, OutputActivation::linear};
        MlpSpec spatial{2, cfg.hidden_widths, 1, OutputActivation::softplus};
        Rng rng(seed);
        k.alpha.resize(k.R, k.L);
        for (int r = 0; r < k.R; ++r)
            for (int l = 0; l < k.L; ++l) k.alpha(r, l) = alpha_scale * rng.uniform(0.5, 1.5);
        for (int l = 0; l < k.L; ++l) k.psi_nets.push_back(Mlp::init(temporal, rng.next_u64()));
        for (int l = 0; l < k.L; ++l) k.phi_nets.push_back(Mlp::init(temporal, rng.next_u64()));
        for (int r = 0; r < k.R; ++r) k.u_nets.push_back(Mlp::init(spatial, rng.next_u64()));
        for (int r = 0; r < k.R; ++r) k.v_nets.push_back(Mlp::init(spatial, rng.next_u64()));
        return k;
    }

    int temporal_rank() const override { return L; }
    int spatial_rank() const override { return R; }
    double coeff(int r, int l) const override { return alpha(r, l); }
    double psi(int l, double tprime) const override { return psi_nets[l].scalar(tprime); }
    double phi(int l, double lag) const override { return phi_nets[l].scalar(lag); }
    double u(int r, const Vec2& sp) const override { return u_nets[r].scalar2(sp.x, sp.y); }
    double v(int r, const Vec2& d) const override { return v_nets[r].scalar2(d.x, d.y); }

    // Flat parameter layout: alpha (r-major), psi nets, phi nets, u nets, v nets.
    int num_params() const {
        int n = R * L;
        for (const auto& m : psi_nets) n += m.num_params();
        for (const auto& m : phi_nets) n += m.num_params();
        for (const auto& m : u_nets) n += m.num_params();
        for (const auto& m : v_nets) n += m.num_params();
        return n;
    }

    void get_params(double* out) const {
        for (int r = 0; r < R; ++r)
            for (int l = 0; l < L; ++l) *out++ = alpha(r, l);
        for (const auto& m : psi_nets) { m.get_params(out); out += m.num_params(); }
        for (const auto& m : phi_nets) { m.get_params(out); out += m.num_params(); }
        for (const auto& m : u_nets) { m.get_params(out); out += m.num_params(); }
        for (const auto& m : v_nets) { m.get_params(out); out += m.num_params(); }
    }

    void set_params(const double* in) {
        for (int r = 0; r < R; ++r)
            for (int l = 0; l < L; ++l) alpha(r, l) = *in++;
        for (auto& m : psi_nets) { m.set_params(in); in += m.num_params(); }
        for (auto& m : phi_nets) { m.set_params(in); in += m.num_params(); }
        for (auto& m : u_nets) { m.set_params(in); in += m.num_params(); }
        for (auto& m : v_nets) { m.set_params(in); in += m.num_params(); }
    }
};

// ---------------------------------------------------------------------------
// Marked deep kernel: adds mark basis pairs g_q, h_q and an L x R x Q
// coefficient tensor. Reduces to the embedded kernel when Q = 1 and
// g = h = 1.
// ---------------------------------------------------------------------------

class MarkedDeepKernel : public Kernel {
  public:
    DeepKernel base;                 // supplies psi/phi/u/v and truncation
    int Q = 1;
    int mark_dim = 1;
    Eigen::VectorXd alpha_t;         // flat L x R x Q, index (l*R + r)*Q + q
    std::vector<Mlp> g_nets, h_nets; // Q each, input mark vector

    double& a(int l, int r, int q) { return alpha_t((l * base.R + r) * Q + q); }
    double a(int l, int r, int q) const { return alpha_t((l * base.R + r) * Q + q); }

    int temporal_rank() const override { return base.L; }
    int spatial_rank() const override { return base.R; }
    double coeff(int r, int l) const override { return base.alpha(r, l); }
    double psi(int l, double tp) const override { return base.psi(l, tp); }
    double phi(int l, double lag) const override { return base.phi(l, lag); }
    double u(int r, const Vec2& sp) const override { return base.u(r, sp); }
    double v(int r, const Vec2& d) const override { return base.v(r, d); }
    bool uses_marks() const override { return true; }

    double eval_marked(double tprime, double t, const Vec2& sprime, const Vec2& s,
                       const std::vector<double>& mark_prime,
                       const std::vector<double>& mark) const {
        if (t <= tprime) throw NonCausalPair("marked kernel queried with t <= t'");
        if (static_cast<int>(mark_prime.size()) != mark_dim ||
            static_cast<int>(mark.size()) != mark_dim)
            throw DimensionMismatch("mark dimension mismatch");
        const double lag = t - tprime;
        const Vec2 disp = s - sprime;
        if (lag > tau_max || disp.norm() > a_max) return 0.0;
        Eigen::VectorXd mp = Eigen::Map<const Eigen::VectorXd>(mark_prime.data(), mark_dim);
        Eigen::VectorXd m = Eigen::Map<const Eigen::VectorXd>(mark.data(), mark_dim);
        double acc = 0.0;
        for (int q = 0; q < Q; ++q) {
            const double gq = g_nets[q].forward(mp)(0);
            const double hq = h_nets[q].forward(m)(0);
            for (int r = 0; r < base.R; ++r) {
                const double ur = u(r, sprime), vr = v(r, disp);
                for (int l = 0; l < base.L; ++l)
                    acc += a(l, r, q) * psi(l, tprime) * phi(l, lag) * ur * vr * gq * hq;
            }
        }
        return acc;
    }

    double eval_event(const Event& past, double t, const Vec2& s,
                      const std::vector<double>* query_mark = nullptr) const override {
        if (!past.s) throw DimensionMismatch("planar kernel needs event locations");
        if (!query_mark) throw DimensionMismatch("marked kernel needs a query mark");
        return eval_marked(past.t, t, *past.s, s, past.mark, *query_mark);
    }
};

// ---------------------------------------------------------------------------
// Closed-form kernels for experiments and simulator validation.
// ---------------------------------------------------------------------------

// Rank-2 nonstationary ground truth: linear-in-y initial effects, Gaussian
// propagation (the second mode offset from the source), linear-in-t' temporal
// modulation, exponential decay plus a shifted ramp cut at phi2_cut.
struct SyntheticKernelParams {
    double a_s = 0.3, b_s = 0.4;
    double a_t = 0.02, b_t = 0.02;
    double sigma1 = 0.2, sigma2 = 0.3;
    double beta = 2.0;
    double alpha11 = 0.6, alpha12 = 0.15, alpha21 = 0.225, alpha22 = 0.525;  // (r, l)
    Vec2 offset{0.8, 0.8};
    double phi2_cut = 3.0;
    double tau_max = 3.0;
    double a_max = 2.2;

    void require_valid() const {
        if (!(sigma1 > 0.0) || !(sigma2 > 0.0) || !(beta > 0.0))
            throw std::invalid_argument("sigma1, sigma2, beta must be positive");
    }
};

namespace detail {
inline double gauss2(const Vec2& d, double sigma) {
    return std::exp(-d.squared_norm() / (2.0 * sigma * sigma)) /
           (2.0 * 3.14159265358979323846 * sigma * sigma);
}
// int over [lo, hi] of the 1-d normal density centered at c
inline double gauss_box1(double lo, double hi, double c, double sigma) {
    const double inv = 1.0 / (sigma * 1.4142135623730950488);
    return 0.5 * (std::erf((hi - c) * inv) - std::erf((lo - c) * inv));
}
}  // namespace detail

class SyntheticKernel : public Kernel {
  public:
    SyntheticKernelParams p;

    explicit SyntheticKernel(const SyntheticKernelParams& params = {}) : p(params) {
        p.require_valid();
        tau_max = p.tau_max;
        a_max = p.a_max;
    }

    int temporal_rank() const override { return 2; }
    int spatial_rank() const override { return 2; }
    double coeff(int r, int l) const override {
        if (r == 0) return l == 0 ? p.alpha11 : p.alpha12;
        return l == 0 ? p.alpha21 : p.alpha22;
    }
    double psi(int l, double tp) const override {
        return 1.0 - (l == 0 ? p.a_t : p.b_t) * tp;
    }
    double phi(int l, double lag) const override {
        if (l == 0) return std::exp(-p.beta * lag);
        return lag < p.phi2_cut ? lag - 1.0 : 0.0;
    }
    double u(int r, const Vec2& sp) const override {
        return 1.0 - (r == 0 ? p.a_s : p.b_s) * (sp.y + 1.0);
    }
    double v(int r, const Vec2& d) const override {
        if (r == 0) return detail::gauss2(d, p.sigma1);
        return detail::gauss2(d - p.offset, p.sigma2);
    }

    std::optional<double> phi_integral(int l, double x) const override {
        if (l == 0) return (1.0 - std::exp(-p.beta * x)) / p.beta;
        const double c = std::min(x, p.phi2_cut);
        return 0.5 * c * c - c;
    }

    std::optional<double> v_domain_integral(int r, const Vec2& center,
                                            const SpatialDomain& dom) const override {
        const Vec2 c = (r == 0) ? center : center + p.offset;
        const double sigma = (r == 0) ? p.sigma1 : p.sigma2;
        return detail::gauss_box1(dom.x_lo, dom.x_hi, c.x, sigma) *
               detail::gauss_box1(dom.y_lo, dom.y_hi, c.y, sigma);
    }
};

// Stationary exponential Hawkes kernel a e^{-b lag}, spatially flat. With a
// unit-area domain the spatially integrated intensity reproduces the classic
// temporal Hawkes process (branching ratio a/b).
class ExpHawkesKernel : public Kernel {
  public:
    double a = 0.5, b = 1.0;

    ExpHawkesKernel(double a_, double b_, double tau_max_, double a_max_) : a(a_), b(b_) {
        tau_max = tau_max_;
        a_max = a_max_;
    }

    int temporal_rank() const override { return 1; }
    int spatial_rank() const override { return 1; }
    double coeff(int, int) const override { return 1.0; }
    double psi(int, double) const override { return 1.0; }
    double phi(int, double lag) const override { return a * std::exp(-b * lag); }
    double u(int, const Vec2&) const override { return 1.0; }
    double v(int, const Vec2&) const override { return 1.0; }

    std::optional<double> phi_integral(int, double x) const override {
        return (a / b) * (1.0 - std::exp(-b * x));
    }
    std::optional<double> v_domain_integral(int, const Vec2& center,
                                            const SpatialDomain& dom) const override {
        // flat propagation: mass is the covered area; a_max >= diameter means
        // the whole domain is covered from any interior source
        (void)center;
        return dom.area();
    }
};

// Tagged parameter set for the closed-form kernels, the unit used by configs
// and checkpoints.
struct ParametricKernelSpec {
    enum class Family { synthetic_lowrank, exp_hawkes };
    Family family = Family::synthetic_lowrank;
    SyntheticKernelParams synthetic;
    double hawkes_a = 0.5, hawkes_b = 1.0, hawkes_tau_max = 0.0;  // 0 = use T

    KernelPtr realize(const TimeWindow& w, const SpatialDomain& dom) const {
        if (family == Family::synthetic_lowrank) {
            return std::make_shared<SyntheticKernel>(synthetic);
        }
        const double tmax = hawkes_tau_max > 0.0 ? hawkes_tau_max : w.T;
        return std::make_shared<ExpHawkesKernel>(hawkes_a, hawkes_b, tmax, dom.diameter());
    }
};

// ---------------------------------------------------------------------------
// Grid evaluations and the rank demonstration.
// ---------------------------------------------------------------------------

// Dense table of k at fixed (t', s'): rows are lag cells, columns are
// displacement cells in x-major order (col = ix * dy.n + iy).
inline Eigen::MatrixXd kernel_lag_grid(const Kernel& k, double tprime, const Vec2& sprime,
                                       const GridSpec& grid) {
    Eigen::MatrixXd out(grid.lag.n, grid.dx.n * grid.dy.n);
    for (int it = 0; it < grid.lag.n; ++it) {
        const double lag = grid.lag.mid(it);
        for (int ix = 0; ix < grid.dx.n; ++ix) {
            for (int iy = 0; iy < grid.dy.n; ++iy) {
                const Vec2 d{grid.dx.mid(ix), grid.dy.mid(iy)};
                out(it, ix * grid.dy.n + iy) =
                    k.eval(tprime, tprime + lag, sprime, sprime + d);
            }
        }
    }
    return out;
}

// Count of singular values above rel_tol times the largest.
inline int effective_rank(const Eigen::MatrixXd& M, double rel_tol = 1e-10) {
    if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw std::invalid_argument("rel_tol must be in (0,1)");
    Eigen::BDCSVD<Eigen::MatrixXd> svd(M);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || !(sv(0) > 0.0)) return 0;
    int count = 0;
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > rel_tol * sv(0)) ++count;
    return count;
}

// Discretizes a temporal kernel given in reparameterized coordinates
// k_fn(t', lag) on the integer grid t, t' = 1..n. The original-form matrix
// K_orig[i, j] = k(t_i, t'_j) is only defined for t'_j < t_i and is
// zero-filled elsewhere; the reparameterized matrix K_repar[j, d] = k(t'_j,
// lag_d) is defined on the whole grid of positive lags 1..n.
template <typename F>
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> discretize_pair_forms(F&& k_fn, int n) {
    if (n < 2) throw std::invalid_argument("grid size must be >= 2");
    Eigen::MatrixXd K_orig = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd K_repar(n, n);
    for (int j = 0; j < n; ++j) {
        const double tp = j + 1.0;
        for (int i = 0; i < n; ++i) {
            const double t = i + 1.0;
            if (t > tp) K_orig(i, j) = k_fn(tp, t - tp);
            K_repar(j, i) = k_fn(tp, i + 1.0);
        }
    }
    return {std::move(K_orig), std::move(K_repar)};
}

// Separable demonstration kernel: a modulated oscillating decay with a
// logistic cut-off near lag 3.
inline double rank_demo_kernel(double tprime, double lag) {
    return 0.3 * std::sin(1.2 * tprime) * std::sin(2.0 * lag) * std::exp(-0.5 * lag) /
           (1.0 + std::exp(5.0 * (lag - 3.0)));
}

}  // namespace sttpp
