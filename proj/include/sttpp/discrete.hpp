#pragma once

#include <Eigen/Core>

#include "sttpp/common.hpp"

namespace sttpp {

// Binary event panel: omega(j, k) = 1 when location k fires in time bin j.
struct BinaryPanel {
    Eigen::MatrixXi omega;  // J x K
    double dt = 1.0;        // bin width, metadata only

    int J() const { return static_cast<int>(omega.rows()); }
    int K() const { return static_cast<int>(omega.cols()); }

    void require_valid() const {
        for (int j = 0; j < J(); ++j)
            for (int k = 0; k < K(); ++k)
                if (omega(j, k) != 0 && omega(j, k) != 1)
                    throw std::invalid_argument("panel entries must be 0/1");
    }
};

// Lagged linear Bernoulli model: P(omega_{jk} = 1 | history) = beta0 +
// sum_l sum_{i=1..d} beta(k, l, i) omega_{j-i, l}. Coefficients are a
// discretized influence kernel; feasibility means probabilities in [0, 1]
// on the observed histories.
struct DiscreteParams {
    double beta0 = 0.0;
    int K = 1;
    int d = 1;
    Eigen::VectorXd beta;  // flat, index (k, l, i) with lag index i in [0, d)

    int index(int k, int l, int i) const { return (k * K + l) * d + i; }
    double at(int k, int l, int i) const { return beta(index(k, l, i)); }
    double& at(int k, int l, int i) { return beta(index(k, l, i)); }

    static DiscreteParams zeros(int K, int d) {
        DiscreteParams p;
        p.K = K;
        p.d = d;
        p.beta = Eigen::VectorXd::Zero(K * K * d);
        return p;
    }
};

// Raw model probability for bin j, location k; never clipped. The optional
// flag reports whether the value lies in [0, 1].
inline double discrete_prob(const DiscreteParams& params, const BinaryPanel& panel, int j, int k,
                            bool* feasible = nullptr) {
    if (j < params.d)
        throw InsufficientHistory("bin " + std::to_string(j) + " has fewer than d = " +
                                  std::to_string(params.d) + " predecessors");
    if (k < 0 || k >= params.K || panel.K() != params.K)
        throw DimensionMismatch("location index or panel width mismatch");
    double p = params.beta0;
    for (int l = 0; l < params.K; ++l)
        for (int i = 0; i < params.d; ++i)
            p += params.at(k, l, i) * panel.omega(j - 1 - i, l);
    if (feasible) *feasible = p >= 0.0 && p <= 1.0;
    return p;
}

struct DiscreteFitOptions {
    int max_iters = 4000;
    double learning_rate = 0.4;
    double tol = 1e-12;  // absolute MSE change
    std::uint64_t seed = 0;
};

struct DiscreteFitResult {
    DiscreteParams params;
    bool degenerate = false;  // all-zero panel
    int iters = 0;
    double final_mse = 0.0;
};

namespace detail {

// Scale the beta rows so every training-history probability lies in [0, 1];
// beta0 itself is clamped first. Ratio scaling preserves the sign pattern.
inline void project_feasible(DiscreteParams& p, const BinaryPanel& panel) {
    p.beta0 = std::min(std::max(p.beta0, 0.0), 1.0);
    const int J = panel.J(), K = panel.K(), d = p.d;
    for (int k = 0; k < K; ++k) {
        double pmin = p.beta0, pmax = p.beta0;
        for (int j = d; j < J; ++j) {
            double val = p.beta0;
            for (int l = 0; l < K; ++l)
                for (int i = 0; i < d; ++i) val += p.at(k, l, i) * panel.omega(j - 1 - i, l);
            pmin = std::min(pmin, val);
            pmax = std::max(pmax, val);
        }
        double scale = 1.0;
        if (pmax > 1.0 && pmax > p.beta0)
            scale = std::min(scale, (1.0 - p.beta0) / (pmax - p.beta0));
        if (pmin < 0.0 && pmin < p.beta0)
            scale = std::min(scale, (0.0 - p.beta0) / (pmin - p.beta0));
        if (scale < 1.0) {
            for (int l = 0; l < K; ++l)
                for (int i = 0; i < d; ++i) p.at(k, l, i) *= scale;
        }
        if (!(scale >= 0.0) || !std::isfinite(scale))
            throw Infeasible("projection cannot restore feasibility");
    }
}

}  // namespace detail

// Least-squares estimation by projected gradient descent: minimize the mean
// squared residual over all (j >= d, k) and rescale any location row whose
// fitted probabilities leave [0, 1]. Deterministic for fixed inputs.
inline DiscreteFitResult fit_discrete(const BinaryPanel& panel, int d,
                                      const DiscreteFitOptions& opts = {}) {
    panel.require_valid();
    const int J = panel.J(), K = panel.K();
    if (d < 1) throw std::invalid_argument("memory depth must be >= 1");
    if (J <= d)
        throw InsufficientHistory("panel length " + std::to_string(J) +
                                  " does not exceed the memory depth");
    DiscreteFitResult out;
    out.params = DiscreteParams::zeros(K, d);
    out.params.beta0 = 0.0;

    if (panel.omega.sum() == 0) {
        out.degenerate = true;
        return out;
    }

    const int rows = J - d;
    const double norm = 1.0 / (static_cast<double>(rows) * K);
    out.params.beta0 =
        static_cast<double>(panel.omega.bottomRows(rows).sum()) * norm;  // mean occupancy start

    Eigen::VectorXd grad(K * K * d);
    double prev_mse = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < opts.max_iters; ++iter) {
        grad.setZero();
        double g0 = 0.0;
        double mse = 0.0;
        for (int j = d; j < J; ++j) {
            for (int k = 0; k < K; ++k) {
                double p = out.params.beta0;
                for (int l = 0; l < K; ++l)
                    for (int i = 0; i < d; ++i)
                        p += out.params.at(k, l, i) * panel.omega(j - 1 - i, l);
                const double r = p - panel.omega(j, k);
                mse += r * r;
                g0 += 2.0 * r;
                for (int l = 0; l < K; ++l)
                    for (int i = 0; i < d; ++i)
                        if (panel.omega(j - 1 - i, l)) grad(out.params.index(k, l, i)) += 2.0 * r;
            }
        }
        mse *= norm;
        out.final_mse = mse;
        out.iters = iter;
        if (std::abs(prev_mse - mse) <= opts.tol) break;
        prev_mse = mse;
        out.params.beta0 -= opts.learning_rate * g0 * norm;
        out.params.beta -= opts.learning_rate * norm * grad;
        detail::project_feasible(out.params, panel);
    }
    return out;
}

// Granger adjacency: entry (l, k) = 1 when location l's lagged coefficients
// into k exceed the threshold in magnitude.
inline Eigen::MatrixXi granger_adjacency(const DiscreteParams& params, double threshold) {
    if (threshold < 0.0) throw std::invalid_argument("threshold must be nonnegative");
    Eigen::MatrixXi adj = Eigen::MatrixXi::Zero(params.K, params.K);
    for (int l = 0; l < params.K; ++l)
        for (int k = 0; k < params.K; ++k) {
            double best = 0.0;
            for (int i = 0; i < params.d; ++i)
                best = std::max(best, std::abs(params.at(k, l, i)));
            adj(l, k) = best > threshold ? 1 : 0;
        }
    return adj;
}

}  // namespace sttpp
