#pragma once

#include "sttpp/model.hpp"

namespace sttpp {

struct PredictOptions {
    int time_cells = 128;
    int x_cells = 24;
    int y_cells = 24;
    double horizon_factor = 5.0;     // times the empirical mean interarrival
    double tail_tolerance = 1e-3;    // acceptable mass beyond the horizon
    int max_extensions = 8;          // horizon growth steps before flagging
};

// Next-event density f(t, s) = lambda(t, s) exp(-int_{t_n}^t int_S lambda)
// on a (time x space) grid past the last event. The inner integral is
// accumulated cumulatively along the time axis with the trapezoidal rule.
struct DensityTable {
    Axis time;   // [t_n, t_n + horizon]
    Axis x, y;
    Eigen::VectorXd f;              // axis-major (time, x, y), cell midpoints
    Eigen::VectorXd survival;       // exp(-cum) at time cell midpoints
    Eigen::VectorXd rate;           // spatially integrated lambda at midpoints
    double t_n = 0.0;
    double captured_mass = 0.0;     // int f over the table

    int index(int it, int ix, int iy) const { return (it * x.n + ix) * y.n + iy; }
};

inline DensityTable next_event_density(const SttpModel& model_in, const EventSequence& history,
                                       double horizon, const PredictOptions& opts = {}) {
    const double t_n = history.empty() ? 0.0 : history.events.back().t;
    // the forecast may run past the data window; the intensity extends there
    SttpModel model = model_in;
    model.window.T = std::max(model.window.T, t_n + horizon);
    DensityTable out;
    out.t_n = t_n;
    out.time = Axis(opts.time_cells, t_n, t_n + horizon);
    out.x = Axis(opts.x_cells, model.domain.x_lo, model.domain.x_hi);
    out.y = Axis(opts.y_cells, model.domain.y_lo, model.domain.y_hi);
    out.f.resize(opts.time_cells * opts.x_cells * opts.y_cells);
    out.survival.resize(opts.time_cells);
    out.rate.resize(opts.time_cells);

    const double cell_area = out.x.h() * out.y.h();
    Eigen::MatrixXd lam(opts.x_cells, opts.y_cells);
    double cum = 0.0;       // trapezoidal integral of the spatial rate
    double prev_rate = 0.0; // rate at the previous midpoint
    for (int it = 0; it < opts.time_cells; ++it) {
        const double t = out.time.mid(it);
        double rate = 0.0;
        for (int ix = 0; ix < opts.x_cells; ++ix)
            for (int iy = 0; iy < opts.y_cells; ++iy) {
                const double l = conditional_intensity(model, history, t,
                                                       {out.x.mid(ix), out.y.mid(iy)});
                if (l < 0.0)
                    throw NegativeIntensity("negative intensity in the forecast window");
                lam(ix, iy) = l;
                rate += l * cell_area;
            }
        // first midpoint: half-cell from t_n treated as constant rate
        cum += (it == 0) ? rate * 0.5 * out.time.h()
                         : 0.5 * (rate + prev_rate) * out.time.h();
        prev_rate = rate;
        const double surv = std::exp(-cum);
        out.survival(it) = surv;
        out.rate(it) = rate;
        for (int ix = 0; ix < opts.x_cells; ++ix)
            for (int iy = 0; iy < opts.y_cells; ++iy)
                out.f(out.index(it, ix, iy)) = lam(ix, iy) * surv;
    }
    const double hvol = out.time.h() * cell_area;
    out.captured_mass = 0.0;
    for (int i = 0; i < out.f.size(); ++i) out.captured_mass += out.f(i) * hvol;
    return out;
}

struct Prediction {
    double t = 0.0;
    Vec2 s;
    double tail_mass = 0.0;
    double horizon = 0.0;
    bool flagged = false;
};

// Point forecast: expected next time and location by quadrature over the
// density table. The horizon starts at horizon_factor mean interarrivals and
// grows until the tail mass is within tolerance; the remaining tail gets an
// exponential correction from the end-of-horizon rate. The location
// expectation is normalized by the captured mass.
inline Prediction predict_next(const SttpModel& model, const EventSequence& history,
                               const PredictOptions& opts = {}) {
    const double t_n = history.empty() ? 0.0 : history.events.back().t;
    double mean_gap;
    if (history.size() >= 2)
        mean_gap = t_n / static_cast<double>(history.size() - 1);
    else
        mean_gap = 1.0 / std::max(model.mu * model.domain.area(), 1e-12);
    double horizon = opts.horizon_factor * mean_gap;

    DensityTable tab;
    double tail = 1.0;
    for (int attempt = 0;; ++attempt) {
        tab = next_event_density(model, history, horizon, opts);
        tail = tab.survival(tab.time.n - 1);
        if (tail <= opts.tail_tolerance || attempt >= opts.max_extensions) break;
        horizon *= 1.6;
    }

    Prediction out;
    out.horizon = horizon;
    out.tail_mass = tail;
    out.flagged = tail > opts.tail_tolerance;
    if (out.flagged) throw TailMassTooLarge(tail);

    const double cell_area = tab.x.h() * tab.y.h();
    const double hvol = tab.time.h() * cell_area;
    double et = 0.0, ex = 0.0, ey = 0.0, mass = 0.0;
    for (int it = 0; it < tab.time.n; ++it) {
        const double t = tab.time.mid(it);
        for (int ix = 0; ix < tab.x.n; ++ix)
            for (int iy = 0; iy < tab.y.n; ++iy) {
                const double w = tab.f(tab.index(it, ix, iy)) * hvol;
                mass += w;
                et += w * t;
                ex += w * tab.x.mid(ix);
                ey += w * tab.y.mid(iy);
            }
    }
    // exponential tail beyond the horizon at the end rate; exact for a
    // constant-rate model, O(tail mass) otherwise
    const double end_rate = tab.rate(tab.time.n - 1);
    const double t_end = tab.time.hi;
    if (end_rate > 0.0 && tail > 0.0) et += tail * (t_end + 1.0 / end_rate);
    out.t = et / (mass + tail);
    out.s = {ex / mass, ey / mass};
    return out;
}

struct MaeResult {
    double time_mae = 0.0;
    double loc_mae = 0.0;
    int evaluated = 0;
    int excluded = 0;
};

// Final-event prediction protocol: for every held-out sequence with at least
// two events, predict the last event from the preceding history. Sequences
// whose forecast is flagged are excluded and counted.
inline MaeResult mae_eval(const SttpModel& model, std::span<const EventSequence> sequences,
                          const PredictOptions& opts = {}) {
    MaeResult out;
    double terr = 0.0, serr = 0.0;
    for (const auto& seq : sequences) {
        if (seq.size() < 2) continue;
        EventSequence hist;
        hist.window = seq.window;
        hist.events.assign(seq.events.begin(), seq.events.end() - 1);
        const Event& target = seq.events.back();
        try {
            Prediction p = predict_next(model, hist, opts);
            terr += std::abs(p.t - target.t);
            serr += (p.s - *target.s).norm();
            ++out.evaluated;
        } catch (const TailMassTooLarge&) {
            ++out.excluded;
        }
    }
    if (out.evaluated > 0) {
        out.time_mae = terr / out.evaluated;
        out.loc_mae = serr / out.evaluated;
    }
    return out;
}

}  // namespace sttpp
