#pragma once

#include "sttpp/objectives.hpp"
#include "sttpp/rng.hpp"

namespace sttpp {

// Upper envelope of a kernel's influence, used for the thinning bound.
// env_phi[l](age) dominates max_{lag >= age} |phi_l|; v_max[r] dominates
// |v_r| over the truncation square. Both come from dense scans with a safety
// margin; the simulator additionally re-raises the bound whenever a proposal
// exceeds it, so the margin is a backstop rather than a proof obligation.
class KernelEnvelope {
  public:
    explicit KernelEnvelope(const Kernel& kernel, int lag_points = 4096, int disp_points = 128,
                            double margin = 1.15)
        : k_(&kernel), margin_(margin) {
        const int L = kernel.temporal_rank(), R = kernel.spatial_rank();
        lag_axis_ = Axis(lag_points, 0.0, kernel.tau_max);
        env_phi_.resize(L, lag_points + 1);
        for (int l = 0; l < L; ++l) {
            double running = 0.0;
            env_phi_(l, lag_points) = 0.0;
            for (int c = lag_points - 1; c >= 0; --c) {
                running = std::max(running, std::abs(kernel.phi(l, lag_axis_.mid(c))));
                env_phi_(l, c) = running;
            }
        }
        v_max_.resize(R);
        const double a = kernel.a_max;
        for (int r = 0; r < R; ++r) {
            double vm = 0.0;
            for (int ix = 0; ix < disp_points; ++ix)
                for (int iy = 0; iy < disp_points; ++iy) {
                    const Vec2 d{-a + (ix + 0.5) * 2 * a / disp_points,
                                 -a + (iy + 0.5) * 2 * a / disp_points};
                    if (d.norm() > a) continue;
                    vm = std::max(vm, std::abs(kernel.v(r, d)));
                }
            v_max_[r] = vm;
        }
    }

    // weight of one source event: per-l sums of |alpha psi u| v_max
    Eigen::VectorXd event_weights(const Event& e) const {
        const int L = k_->temporal_rank(), R = k_->spatial_rank();
        Eigen::VectorXd w = Eigen::VectorXd::Zero(L);
        for (int l = 0; l < L; ++l) {
            const double p = std::abs(k_->psi(l, e.t));
            for (int r = 0; r < R; ++r)
                w(l) += p * std::abs(k_->coeff(r, l)) * std::abs(k_->u(r, *e.s)) * v_max_[r];
        }
        return w;
    }

    // max future |contribution| of an event that is already `age` old; the
    // one-cell shift keeps the scan conservative within the cell holding age
    double bound(const Eigen::VectorXd& weights, double age) const {
        if (age >= k_->tau_max) return 0.0;
        const int cell = std::max(lag_axis_.cell(std::max(age, 0.0)) - 1, 0);
        double acc = 0.0;
        for (int l = 0; l < weights.size(); ++l) acc += weights(l) * env_phi_(l, cell);
        return margin_ * acc;
    }

  private:
    const Kernel* k_;
    double margin_;
    Axis lag_axis_;
    Eigen::MatrixXd env_phi_;  // L x (points + 1), nonincreasing rows
    std::vector<double> v_max_;
};

// Ogata-style thinning. The proposal rate comes from an envelope over the
// current history (recomputed after every acceptance; between acceptances
// the envelope only decays, so it stays an upper bound). A proposal above
// the bound raises it and is re-drawn, never clipped; a loop of raises
// signals a pathological kernel.
inline EventSequence simulate(const SttpModel& model, double T, const SpatialDomain& domain,
                              std::uint64_t seed, double bound_factor = 1.5,
                              int max_raises_per_event = 64) {
    if (!(bound_factor >= 1.0)) throw std::invalid_argument("bound factor must be >= 1");
    if (!(model.mu >= 0.0)) throw std::invalid_argument("mu must be nonnegative");
    Rng rng(seed);
    EventSequence seq;
    seq.window = {T};
    SttpModel local = model;
    local.window = {T};
    local.domain = domain;

    std::unique_ptr<KernelEnvelope> env;
    if (model.kernel) env = std::make_unique<KernelEnvelope>(*model.kernel);
    std::vector<Eigen::VectorXd> weights;  // per accepted event

    const double area = domain.area();
    double t_cur = 0.0;
    int raises = 0;

    auto current_bound = [&]() {
        double acc = model.mu;
        if (model.kernel) {
            const double tau_max = model.kernel->tau_max;
            const std::size_t lo = history_window_begin(seq.events, t_cur, tau_max);
            for (std::size_t j = lo; j < seq.events.size(); ++j)
                acc += env->bound(weights[j], t_cur - seq.events[j].t);
        }
        return bound_factor * acc;
    };

    double lam_bar = current_bound();
    while (true) {
        if (!(lam_bar > 0.0)) break;  // dead process
        const double gap = rng.exponential(lam_bar * area);
        const double t_prop = t_cur + gap;
        if (t_prop > T) break;
        const Vec2 s_prop{rng.uniform(domain.x_lo, domain.x_hi),
                          rng.uniform(domain.y_lo, domain.y_hi)};
        // A kernel with inhibitory components can dip below zero in small
        // pockets; the generated process follows the positive part, which is
        // the intensity the parameterization defines.
        const double lam =
            std::max(conditional_intensity(local, seq, t_prop, s_prop), 0.0);
        if (lam > lam_bar) {
            if (++raises > max_raises_per_event)
                throw BoundViolationLoop("thinning bound raised more than " +
                                         std::to_string(max_raises_per_event) +
                                         " times for one event");
            lam_bar = bound_factor * std::max(lam_bar, lam);
            continue;  // proposal re-drawn from the same anchor
        }
        const double accept = lam / lam_bar;
        // the raising rule keeps this a probability
        if (!(accept >= 0.0 && accept <= 1.0))
            throw std::logic_error("acceptance probability outside [0,1]");
        t_cur = t_prop;
        if (rng.uniform() < accept) {
            Event e(t_prop, s_prop);
            seq.events.push_back(e);
            if (env) weights.push_back(env->event_weights(e));
            raises = 0;
            lam_bar = current_bound();
        }
    }
    return seq;
}

// M independent trajectories with per-trajectory derived seeds seed + j.
inline std::vector<EventSequence> simulate_many(const SttpModel& model, int M, double T,
                                                const SpatialDomain& domain, std::uint64_t seed,
                                                double bound_factor = 1.5) {
    if (M < 1) throw std::invalid_argument("M must be >= 1");
    std::vector<EventSequence> out;
    out.reserve(M);
    for (int j = 0; j < M; ++j) {
        try {
            out.push_back(simulate(model, T, domain, seed + static_cast<std::uint64_t>(j),
                                   bound_factor));
        } catch (const std::exception& e) {
            throw std::runtime_error("trajectory " + std::to_string(j) + ": " + e.what());
        }
    }
    return out;
}

// Compensator Lambda(t) = int_0^t int_S lambda, via the decomposed basis
// integrals (exact ones when the kernel provides them).
class Compensator {
  public:
    Compensator(const SttpModel& model, const EventSequence& seq, const GridSpec& grid)
        : model_(&model), seq_(&seq) {
        if (model.kernel) {
            tables_ = build_tables_generic(*model.kernel, grid);
            const Kernel& k = *model.kernel;
            const int n = static_cast<int>(seq.size());
            spat_.resize(k.spatial_rank(), std::max(n, 1));
            psi_.resize(k.temporal_rank(), std::max(n, 1));
            for (int i = 0; i < n; ++i) {
                const Event& e = seq.events[i];
                for (int r = 0; r < k.spatial_rank(); ++r)
                    spat_(r, i) = v_spatial_integral(tables_, k, r, *e.s, model.domain);
                for (int l = 0; l < k.temporal_rank(); ++l) psi_(l, i) = k.psi(l, e.t);
            }
        }
    }

    double operator()(double t) const {
        double acc = model_->mu * model_->domain.area() * t;
        const Kernel* k = model_->kernel.get();
        if (!k) return acc;
        for (int i = 0; i < static_cast<int>(seq_->size()); ++i) {
            const Event& e = seq_->events[i];
            if (e.t >= t) break;
            const double x = std::min(t - e.t, k->tau_max);
            for (int r = 0; r < k->spatial_rank(); ++r) {
                double tsum = 0.0;
                for (int l = 0; l < k->temporal_rank(); ++l) {
                    const double integ = tables_.phi_exact[l] ? *k->phi_integral(l, x)
                                                              : phi_table_integral(tables_, l, x);
                    tsum += k->coeff(r, l) * psi_(l, i) * integ;
                }
                acc += spat_(r, i) * tsum;
            }
        }
        return acc;
    }

  private:
    const SttpModel* model_;
    const EventSequence* seq_;
    BasisTables tables_;
    Eigen::MatrixXd spat_, psi_;
};

// Asymptotic Kolmogorov distribution Q(x) = 2 sum (-1)^{k-1} e^{-2 k^2 x^2},
// with the Stephens small-sample adjustment applied by the caller.
inline double kolmogorov_pvalue(double x) {
    if (x <= 0.0) return 1.0;
    double p = 0.0;
    for (int k = 1; k <= 100; ++k) {
        const double term = 2.0 * std::exp(-2.0 * k * k * x * x);
        p += (k % 2 == 1) ? term : -term;
        if (term < 1e-12) break;
    }
    return std::min(1.0, std::max(0.0, p));
}

struct RescalingCheck {
    double ks_stat = 0.0;
    double p_value = 0.0;
    int n = 0;
};

// Time-rescaling goodness of fit: transformed interarrivals
// Lambda(t_i) - Lambda(t_{i-1}) are unit-rate exponential under the true
// model; tested with a one-sample Kolmogorov-Smirnov statistic.
inline RescalingCheck time_rescaling_check(const SttpModel& model, const EventSequence& seq,
                                           const GridSpec* grid_opt = nullptr) {
    if (seq.size() < 20)
        throw TooFewEvents("time rescaling needs >= 20 events, got " + std::to_string(seq.size()));
    GridSpec grid = grid_opt ? *grid_opt
                             : GridSpec::make_default(model.window, model.domain,
                                                      model.kernel ? model.kernel->tau_max : 1.0,
                                                      model.kernel ? model.kernel->a_max : 1.0);
    Compensator compensate(model, seq, grid);
    std::vector<double> q;  // exponential cdf values of the rescaled gaps
    double prev = 0.0;
    for (const auto& e : seq.events) {
        const double cum = compensate(e.t);
        q.push_back(-std::expm1(-(cum - prev)));
        prev = cum;
    }
    std::sort(q.begin(), q.end());
    const double n = static_cast<double>(q.size());
    double d = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        d = std::max(d, q[i] - static_cast<double>(i) / n);
        d = std::max(d, static_cast<double>(i + 1) / n - q[i]);
    }
    RescalingCheck out;
    out.ks_stat = d;
    out.n = static_cast<int>(q.size());
    const double x = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
    out.p_value = kolmogorov_pvalue(x);
    return out;
}

}  // namespace sttpp
