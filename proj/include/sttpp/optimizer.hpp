#pragma once

#include <chrono>
#include <functional>

#include "sttpp/objectives.hpp"

namespace sttpp {

struct FitOptions {
    enum class Objective { mle_barrier, least_squares };
    Objective objective = Objective::mle_barrier;
    int max_epochs = 500;
    double learning_rate = 1e-2;
    double beta1 = 0.9, beta2 = 0.999;
    double adam_eps = 1e-8;
    double barrier_w0 = 1e-1;
    double barrier_decay = 0.5;
    int barrier_stage_epochs = 100;
    int barrier_stages = 5;
    double barrier_threshold = 1e-6;
    double grad_clip_norm = 10.0;
    std::uint64_t seed = 0;
    double tol = 1e-9;  // relative change of the smoothed objective

    void require_valid() const {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
        if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
            throw std::invalid_argument("moment decays must lie in (0,1)");
        if (!(tol > 0.0)) throw std::invalid_argument("tolerance must be positive");
        if (max_epochs < 0) throw std::invalid_argument("max_epochs must be >= 0");
    }

    double barrier_weight(int epoch) const {
        int stage = barrier_stage_epochs > 0 ? epoch / barrier_stage_epochs : 0;
        if (stage > barrier_stages - 1) stage = barrier_stages - 1;
        if (stage < 0) stage = 0;
        double w = barrier_w0;
        for (int s = 0; s < stage; ++s) w *= barrier_decay;
        return w;
    }
};

enum class Termination { converged, max_epochs, diverged };

inline const char* to_string(Termination t) {
    switch (t) {
        case Termination::converged: return "converged";
        case Termination::max_epochs: return "max_epochs";
        case Termination::diverged: return "diverged";
    }
    return "?";
}

struct FitReport {
    std::vector<double> trace;      // raw objective per epoch (pre-update)
    Eigen::VectorXd final_params;   // natural layout [mu, kernel...]
    double final_objective = 0.0;   // raw objective at the returned parameters
    double final_min_intensity = 0.0;
    double grad_norm_exit = 0.0;
    double wall_seconds = 0.0;
    Termination termination = Termination::max_epochs;
};

namespace detail {

// Loss evaluation callback: fills the gradient (same size as theta), reports
// the raw objective for the trace and the minimal grid/event intensity.
using ProblemEval = std::function<double(const Eigen::VectorXd& theta, double barrier_w,
                                         Eigen::VectorXd& grad, double& raw_objective,
                                         double& min_intensity)>;

// Adam descent with the staged barrier weight, gradient clipping and the
// smoothed-trace divergence guard. Deterministic for fixed inputs.
inline FitReport run_adam(const ProblemEval& eval, Eigen::VectorXd& theta,
                          const FitOptions& opts) {
    opts.require_valid();
    const auto t_start = std::chrono::steady_clock::now();
    FitReport report;
    const int dim = static_cast<int>(theta.size());
    Eigen::VectorXd m = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd grad(dim);

    const int window = 10;
    std::vector<double> smoothed;
    double best_smoothed = std::numeric_limits<double>::infinity();
    double first_smoothed = std::numeric_limits<double>::quiet_NaN();
    report.termination = Termination::max_epochs;

    for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
        const double w = opts.barrier_weight(epoch);
        grad.setZero();
        double raw = 0.0, min_int = 0.0;
        const double loss = eval(theta, w, grad, raw, min_int);
        report.trace.push_back(raw);
        report.final_min_intensity = min_int;

        if (!std::isfinite(loss) || !grad.allFinite()) {
            report.termination = Termination::diverged;
            break;
        }

        // smoothed raw objective, lower-is-better orientation via the loss:
        // raw follows the objective (ll for MLE, LS loss for LS); we track
        // divergence on the minimized loss to stay orientation-free.
        const int have = static_cast<int>(report.trace.size());
        double sm = 0.0;
        const int lo = std::max(0, have - window);
        for (int i = lo; i < have; ++i) sm += report.trace[i];
        sm /= (have - lo);
        smoothed.push_back(sm);

        const bool maximizing = opts.objective == FitOptions::Objective::mle_barrier;
        const double oriented = maximizing ? -sm : sm;
        const bool final_stage =
            epoch >= opts.barrier_stage_epochs * (opts.barrier_stages - 1) ||
            opts.objective == FitOptions::Objective::least_squares;
        if (std::isnan(first_smoothed)) first_smoothed = oriented;
        if (oriented < best_smoothed) best_smoothed = oriented;
        // trend guard: after a warmup that tolerates barrier transients, a
        // run that sits above its starting level and has stopped improving
        // has lost its progress and is treated as diverged
        if (have > 10 * window &&
            oriented > first_smoothed + 0.05 * std::abs(first_smoothed) + 1e-6) {
            const double prev_window =
                maximizing ? -smoothed[have - 1 - window] : smoothed[have - 1 - window];
            if (oriented >= prev_window - 1e-12) {
                report.termination = Termination::diverged;
                break;
            }
        }
        if (final_stage && smoothed.size() >= 2) {
            const double prev = smoothed[smoothed.size() - 2];
            if (std::abs(sm - prev) <= opts.tol * (std::abs(prev) + 1e-12)) {
                report.termination = Termination::converged;
                report.grad_norm_exit = grad.norm();
                break;
            }
        }

        // gradient clip at global norm
        const double gn = grad.norm();
        report.grad_norm_exit = gn;
        if (opts.grad_clip_norm > 0.0 && gn > opts.grad_clip_norm)
            grad *= opts.grad_clip_norm / gn;

        m = opts.beta1 * m + (1.0 - opts.beta1) * grad;
        v = opts.beta2 * v + (1.0 - opts.beta2) * grad.cwiseProduct(grad);
        const double bc1 = 1.0 - std::pow(opts.beta1, epoch + 1);
        const double bc2 = 1.0 - std::pow(opts.beta2, epoch + 1);
        for (int i = 0; i < dim; ++i)
            theta(i) -= opts.learning_rate * (m(i) / bc1) / (std::sqrt(v(i) / bc2) + opts.adam_eps);
    }

    // objective at the parameters actually returned (the trace holds
    // pre-update values)
    {
        grad.setZero();
        double raw = 0.0, min_int = 0.0;
        const int last = std::max(opts.max_epochs - 1, 0);
        eval(theta, opts.barrier_weight(last), grad, raw, min_int);
        report.final_objective = raw;
        report.final_min_intensity = min_int;
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

}  // namespace detail

// Natural parameter vector of a deep-kernel model: [mu, kernel params...].
inline Eigen::VectorXd pack_params(const SttpModel& model, const DeepKernel& dk) {
    Eigen::VectorXd theta(1 + dk.num_params());
    theta(0) = model.mu;
    dk.get_params(theta.data() + 1);
    return theta;
}

inline void unpack_params(const Eigen::VectorXd& theta, SttpModel& model, DeepKernel& dk) {
    model.mu = theta(0);
    dk.set_params(theta.data() + 1);
}

// Clone a deep-kernel model with new natural parameters; shared by the
// optimizer and the finite-difference tests.
inline SttpModel model_with_params(const SttpModel& model, const Eigen::VectorXd& theta) {
    const auto* dk = dynamic_cast<const DeepKernel*>(model.kernel.get());
    if (!dk) throw std::invalid_argument("model_with_params needs a deep kernel");
    auto copy = std::make_shared<DeepKernel>(*dk);
    SttpModel out = model;
    out.mu = theta(0);
    copy->set_params(theta.data() + 1);
    out.kernel = copy;
    return out;
}

// Gradient-based fit of a deep-kernel model: Adam ascent on the average
// log-likelihood with an annealed log-barrier, or descent on the LS loss.
// Full-batch and deterministic for a fixed seed and single worker.
inline std::pair<SttpModel, FitReport> fit(const SttpModel& model_init,
                                           std::span<const EventSequence> data,
                                           const GridSpec& grid, const FitOptions& opts) {
    opts.require_valid();
    grid.require_valid();
    const auto* dk_init = dynamic_cast<const DeepKernel*>(model_init.kernel.get());
    if (model_init.kernel && !dk_init)
        throw std::invalid_argument("fit requires a deep-kernel or baseline-only model");

    SttpModel model = model_init;
    std::shared_ptr<DeepKernel> dk;
    if (dk_init) {
        dk = std::make_shared<DeepKernel>(*dk_init);
        model.kernel = dk;
    }
    const auto workspaces = build_workspaces(data, model, grid);
    const double M = std::max<std::size_t>(data.size(), 1);
    const bool mle = opts.objective == FitOptions::Objective::mle_barrier;

    // optimizer space: mu is driven through softplus to stay nonnegative
    Eigen::VectorXd theta_nat(1 + (dk ? dk->num_params() : 0));
    theta_nat(0) = model.mu;
    if (dk) dk->get_params(theta_nat.data() + 1);
    Eigen::VectorXd theta_opt = theta_nat;
    theta_opt(0) = inv_softplus(std::max(theta_nat(0), 1e-8));

    detail::ProblemEval eval = [&](const Eigen::VectorXd& th, double w, Eigen::VectorXd& grad,
                                   double& raw, double& min_int) -> double {
        model.mu = softplus(th(0));
        if (dk) dk->set_params(th.data() + 1);
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
        EvalResult r = evaluate_objectives(model, workspaces, grid, req);
        double loss;
        if (mle) {
            raw = r.loglik_sum() / M;
            loss = -raw + w * r.barrier_sum / M;
        } else {
            raw = r.ls_sum() / M;
            loss = raw;
        }
        grad = r.grad;
        grad(0) *= softplus_prime(th(0));  // chain into the unconstrained baseline
        min_int = r.min_node_intensity;
        return loss;
    };

    FitReport report = detail::run_adam(eval, theta_opt, opts);

    Eigen::VectorXd nat = theta_opt;
    nat(0) = softplus(theta_opt(0));
    if (opts.max_epochs == 0) nat = theta_nat;  // untouched
    model.mu = nat(0);
    if (dk) dk->set_params(nat.data() + 1);
    report.final_params = nat;
    return {model, report};
}

// Held-out metrics without parameter mutation. Sequences on which an event
// has non-positive intensity are excluded from the likelihood averages and
// counted as flagged.
struct EvalMetrics {
    double loglik_per_seq = 0.0;
    double loglik_per_event = 0.0;
    double ls_per_seq = 0.0;
    int flagged = 0;
    int evaluated = 0;
    int total_events = 0;
};

inline EvalMetrics evaluate(const SttpModel& model, std::span<const EventSequence> data,
                            const GridSpec& grid) {
    EvalMetrics out;
    double ll_sum = 0.0, ls_sum = 0.0;
    int events = 0;
    for (const auto& seq : data) {
        const EventSequence* one = &seq;
        auto ws = build_workspaces({one, 1}, model, grid);
        EvalRequest req;
        req.c_ll = 1.0;
        req.c_ls = 1.0;
        EvalResult r = evaluate_objectives(model, ws, grid, req);
        if (!r.events_positive) {
            ++out.flagged;
            continue;
        }
        ll_sum += r.loglik_sum();
        ls_sum += r.ls_sum();
        events += r.total_events;
        ++out.evaluated;
    }
    if (out.evaluated > 0) {
        out.loglik_per_seq = ll_sum / out.evaluated;
        out.ls_per_seq = ls_sum / out.evaluated;
    }
    out.loglik_per_event = events > 0 ? ll_sum / events : 0.0;
    out.total_events = events;
    return out;
}

}  // namespace sttpp
