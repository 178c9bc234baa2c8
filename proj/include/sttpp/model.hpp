#pragma once

#include <algorithm>
#include <span>

#include "sttpp/kernel.hpp"

namespace sttpp {

// Self-exciting spatio-temporal model: lambda(t, s) = mu + sum over history
// of the kernel. A null kernel means a homogeneous baseline process. The
// baseline is stored directly; the optimizer owns the softplus
// reparameterization that keeps it nonnegative during fitting.
struct SttpModel {
    double mu = 1.0;
    KernelPtr kernel;  // may be null
    TimeWindow window;
    SpatialDomain domain;

    void require_valid() const {
        if (!(mu >= 0.0)) throw std::invalid_argument("mu must be nonnegative");
        if (!window.valid()) throw std::invalid_argument("invalid time window");
        if (!domain.valid()) throw std::invalid_argument("invalid spatial domain");
        if (kernel) {
            if (kernel->tau_max > window.T)
                throw std::invalid_argument("kernel tau_max exceeds the time window");
            if (kernel->a_max > domain.diameter() * (1.0 + 1e-12))
                throw std::invalid_argument("kernel a_max exceeds the domain diameter");
        }
    }
};

// First index into times of events with t_j > t - tau_max (binary search).
inline std::size_t history_window_begin(const std::vector<Event>& events, double t,
                                        double tau_max) {
    const double lo = t - tau_max;
    auto it = std::upper_bound(events.begin(), events.end(), lo,
                               [](double val, const Event& e) { return val < e.t; });
    return static_cast<std::size_t>(it - events.begin());
}

// lambda(t, s) given the history; only events with t_j < t and within the
// kernel truncation contribute. May be negative for an infeasible kernel.
inline double conditional_intensity(const SttpModel& model, const EventSequence& history,
                                    double t, const Vec2& s,
                                    const std::vector<double>* query_mark = nullptr) {
    if (t < 0.0 || t > model.window.T)
        throw OutOfDomain("query time " + std::to_string(t) + " outside [0, T]");
    if (!model.domain.contains(s)) throw OutOfDomain("query location outside the domain");
    double acc = model.mu;
    if (!model.kernel) return acc;
    const auto& ev = history.events;
    const std::size_t lo = history_window_begin(ev, t, model.kernel->tau_max);
    for (std::size_t j = lo; j < ev.size(); ++j) {
        if (ev[j].t >= t) break;
        acc += model.kernel->eval_event(ev[j], t, s, query_mark);
    }
    return acc;
}

// Dense table of values over a space-time grid, axis-major order
// (time, then x, then y).
struct GridTable {
    Axis time, x, y;
    Eigen::VectorXd values;

    int index(int it, int ix, int iy) const { return (it * x.n + ix) * y.n + iy; }
    double at(int it, int ix, int iy) const { return values(index(it, ix, iy)); }
    int size() const { return time.n * x.n * y.n; }
};

inline GridTable intensity_on_grid(const SttpModel& model, const EventSequence& history,
                                   const GridSpec& grid) {
    grid.require_valid();
    GridTable out;
    out.time = grid.time;
    out.x = grid.x;
    out.y = grid.y;
    out.values.resize(out.size());
    for (int it = 0; it < grid.time.n; ++it) {
        const double t = grid.time.mid(it);
        for (int ix = 0; ix < grid.x.n; ++ix) {
            for (int iy = 0; iy < grid.y.n; ++iy) {
                out.values(out.index(it, ix, iy)) = conditional_intensity(
                    model, history, t, {grid.x.mid(ix), grid.y.mid(iy)});
            }
        }
    }
    return out;
}

struct MinIntensityResult {
    double value;
    int sequence;       // -1 when no sequences were given
    int time_cell, x_cell, y_cell;
};

// Minimum of lambda over grid nodes across all provided histories. With no
// sequences the baseline is returned at the first node.
inline MinIntensityResult min_intensity(const SttpModel& model,
                                        std::span<const EventSequence> sequences,
                                        const GridSpec& grid) {
    MinIntensityResult best{model.mu, -1, 0, 0, 0};
    if (sequences.empty()) return best;
    best.value = std::numeric_limits<double>::infinity();
    for (std::size_t si = 0; si < sequences.size(); ++si) {
        GridTable table = intensity_on_grid(model, sequences[si], grid);
        for (int it = 0; it < table.time.n; ++it)
            for (int ix = 0; ix < table.x.n; ++ix)
                for (int iy = 0; iy < table.y.n; ++iy) {
                    const double val = table.at(it, ix, iy);
                    if (val < best.value)
                        best = {val, static_cast<int>(si), it, ix, iy};
                }
    }
    return best;
}

}  // namespace sttpp
