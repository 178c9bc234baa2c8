#pragma once

#include <stdexcept>

#include "sttpp/common.hpp"
#include "sttpp/event.hpp"

namespace sttpp {

// Uniform cell axis: n cells over [lo, hi], quadrature at cell midpoints.
struct Axis {
    int n = 2;
    double lo = 0.0;
    double hi = 1.0;

    Axis() = default;
    Axis(int n_, double lo_, double hi_) : n(n_), lo(lo_), hi(hi_) {}

    double h() const { return (hi - lo) / n; }
    double mid(int i) const { return lo + (i + 0.5) * h(); }
    double edge(int i) const { return lo + i * h(); }
    bool valid() const { return n >= 2 && hi > lo; }
    // cell index containing x, clamped to [0, n-1]
    int cell(double x) const {
        int c = static_cast<int>((x - lo) / h());
        if (c < 0) c = 0;
        if (c >= n) c = n - 1;
        return c;
    }
};

// Quadrature layout shared by the objectives, prediction and export paths:
// a space-time grid for intensity fields, a lag axis for temporal kernel
// integrals, and a square displacement grid for spatial kernel integrals.
struct GridSpec {
    Axis time;        // [0, T]
    Axis x, y;        // spatial domain
    Axis lag;         // [0, tau_max]
    Axis dx, dy;      // displacement, [-a_max, a_max] each

    double cell_volume() const { return time.h() * x.h() * y.h(); }
    double cell_area() const { return x.h() * y.h(); }
    double disp_cell_area() const { return dx.h() * dy.h(); }

    bool valid() const {
        return time.valid() && x.valid() && y.valid() && lag.valid() && dx.valid() && dy.valid() &&
               cell_volume() > 0.0;
    }

    void require_valid() const {
        if (!valid()) throw std::invalid_argument("invalid GridSpec (counts >= 2, bounds ordered)");
    }

    // Defaults used throughout: 50x32x32 space-time nodes, 200 lag cells,
    // 64x64 displacement cells.
    static GridSpec make_default(const TimeWindow& w, const SpatialDomain& d, double tau_max,
                                 double a_max) {
        GridSpec g;
        g.time = Axis(50, 0.0, w.T);
        g.x = Axis(32, d.x_lo, d.x_hi);
        g.y = Axis(32, d.y_lo, d.y_hi);
        g.lag = Axis(200, 0.0, tau_max);
        g.dx = Axis(64, -a_max, a_max);
        g.dy = Axis(64, -a_max, a_max);
        return g;
    }

    GridSpec refined(int factor) const {
        GridSpec g = *this;
        g.time.n *= factor;
        g.x.n *= factor;
        g.y.n *= factor;
        g.lag.n *= factor;
        g.dx.n *= factor;
        g.dy.n *= factor;
        return g;
    }
};

// Model hyper-parameters: kernel ranks, truncation radii and the layer
// widths of the basis networks.
struct ModelConfig {
    int temporal_rank = 2;   // L
    int spatial_rank = 2;    // R
    int mark_rank = 0;       // Q; 0 = unmarked
    double mu = 1.0;
    bool mu_fixed = false;
    double tau_max = 1.0;
    double a_max = 1.0;
    std::vector<int> hidden_widths = {32, 32};

    void require_valid(const TimeWindow& w, const SpatialDomain& d) const {
        if (temporal_rank < 1 || spatial_rank < 1 || mark_rank < 0)
            throw std::invalid_argument("ranks must be positive");
        if (!(tau_max > 0.0) || tau_max > w.T)
            throw std::invalid_argument("tau_max must lie in (0, T]");
        if (!(a_max > 0.0) || a_max > d.diameter())
            throw std::invalid_argument("a_max must lie in (0, diameter]");
        if (mu < 0.0) throw std::invalid_argument("mu must be nonnegative");
        for (int w_ : hidden_widths)
            if (w_ < 1) throw std::invalid_argument("hidden widths must be >= 1");
    }
};

}  // namespace sttpp
