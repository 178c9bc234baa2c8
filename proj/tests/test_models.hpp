#pragma once

#include "sttpp/model.hpp"
#include "sttpp/rng.hpp"

// Shared builders for small randomized models and sequences.

inline sttpp::SttpModel random_deep_model(std::uint64_t seed, int L = 2, int R = 2,
                                          double mu = 0.9, double alpha_scale = 0.15) {
    using namespace sttpp;
    SttpModel m;
    m.mu = mu;
    m.window = {3.0};
    m.domain = {-1, 1, -1, 1};
    ModelConfig cfg;
    cfg.temporal_rank = L;
    cfg.spatial_rank = R;
    cfg.tau_max = 1.2;
    // the truncation ball covers the whole domain from any source point, so
    // randomized (non-decaying) basis nets see no hard circular cut-off
    cfg.a_max = m.domain.diameter();
    cfg.hidden_widths = {4, 4};
    m.kernel = std::make_shared<DeepKernel>(DeepKernel::init(cfg, seed, alpha_scale));
    return m;
}

inline sttpp::EventSequence random_sequence(std::uint64_t seed, int n, double T,
                                            const sttpp::SpatialDomain& dom) {
    using namespace sttpp;
    Rng rng(seed);
    std::vector<double> times(n);
    for (auto& t : times) t = rng.uniform(0.0, T);
    std::sort(times.begin(), times.end());
    EventSequence seq;
    seq.window = {T};
    for (double t : times)
        seq.events.push_back(
            Event(t, Vec2{rng.uniform(dom.x_lo, dom.x_hi), rng.uniform(dom.y_lo, dom.y_hi)}));
    return seq;
}

inline sttpp::GridSpec test_grid(const sttpp::SttpModel& m, int nt = 6, int nx = 5, int ny = 5,
                                 int nlag = 24, int ndisp = 12) {
    sttpp::GridSpec g = sttpp::GridSpec::make_default(
        m.window, m.domain, m.kernel ? m.kernel->tau_max : 1.0, m.kernel ? m.kernel->a_max : 1.0);
    g.time.n = nt;
    g.x.n = nx;
    g.y.n = ny;
    g.lag.n = nlag;
    g.dx.n = ndisp;
    g.dy.n = ndisp;
    return g;
}
