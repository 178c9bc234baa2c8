#include <catch2/catch_amalgamated.hpp>

#include "sttpp/kernel.hpp"
#include "sttpp/rng.hpp"

using namespace sttpp;

namespace {

// Independent transcription of the rank-2 synthetic ground truth, written as
// one flat expression; the oracle for SyntheticKernel::eval.
double synthetic_reference(double tp, double t, Vec2 sp, Vec2 s) {
    const double tau = t - tp;
    const double dx = s.x - sp.x, dy = s.y - sp.y;
    const double pi = 3.14159265358979323846;
    const double u1 = 1.0 - 0.3 * (sp.y + 1.0);
    const double u2 = 1.0 - 0.4 * (sp.y + 1.0);
    const double v1 = std::exp(-(dx * dx + dy * dy) / (2 * 0.2 * 0.2)) / (2 * pi * 0.2 * 0.2);
    const double v2 = std::exp(-((dx - 0.8) * (dx - 0.8) + (dy - 0.8) * (dy - 0.8)) /
                               (2 * 0.3 * 0.3)) /
                      (2 * pi * 0.3 * 0.3);
    const double p1 = 1.0 - 0.02 * tp;
    const double p2 = 1.0 - 0.02 * tp;
    const double f1 = std::exp(-2.0 * tau);
    const double f2 = tau < 3.0 ? tau - 1.0 : 0.0;
    return 0.6 * u1 * v1 * p1 * f1 + 0.15 * u1 * v1 * p2 * f2 + 0.225 * u2 * v2 * p1 * f1 +
           0.525 * u2 * v2 * p2 * f2;
}

DeepKernel small_deep_kernel(std::uint64_t seed, int L = 2, int R = 2) {
    ModelConfig cfg;
    cfg.temporal_rank = L;
    cfg.spatial_rank = R;
    cfg.tau_max = 1.5;
    cfg.a_max = 1.2;
    cfg.hidden_widths = {6, 6};
    return DeepKernel::init(cfg, seed);
}

}  // namespace

TEST_CASE("zero coefficients give the zero kernel") {
    DeepKernel k = small_deep_kernel(1);
    k.alpha.setZero();
    Rng rng(5);
    for (int i = 0; i < 10; ++i) {
        const double tp = rng.uniform(0, 1), lag = rng.uniform(0.01, 1.0);
        const Vec2 sp{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const Vec2 s{sp.x + rng.uniform(-0.5, 0.5), sp.y + rng.uniform(-0.5, 0.5)};
        REQUIRE(k.eval(tp, tp + lag, sp, s) == 0.0);
    }
}

TEST_CASE("synthetic ground truth point value") {
    SyntheticKernel k;
    const double got = k.eval(0.0, 0.5, {0, 0}, {0, 0});
    // value recomputed term by term before being frozen here
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(0.4057267622520971, 1e-12));
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(0.406, 5e-4));
    Rng rng(17);
    for (int i = 0; i < 50; ++i) {
        const double tp = rng.uniform(0, 9), lag = rng.uniform(0.01, 2.9);
        const Vec2 sp{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const Vec2 s{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const double want = ((s - sp).norm() <= k.a_max) ? synthetic_reference(tp, tp + lag, sp, s)
                                                         : 0.0;
        REQUIRE_THAT(k.eval(tp, tp + lag, sp, s), Catch::Matchers::WithinAbs(want, 1e-12));
    }
}

TEST_CASE("truncation contract") {
    SyntheticKernel k;
    const double eps = 1e-9;
    REQUIRE(k.eval(0.0, k.tau_max + eps, {0, 0}, {0, 0}) == 0.0);
    REQUIRE(k.eval(0.0, 0.5, {0, 0}, {k.a_max + eps, 0}) == 0.0);
    // just inside is nonzero
    REQUIRE(k.eval(0.0, 0.5, {0, 0}, {0.1, 0.1}) != 0.0);
}

TEST_CASE("non-causal queries are rejected") {
    SyntheticKernel k;
    REQUIRE_THROWS_AS(k.eval(1.0, 1.0, {0, 0}, {0, 0}), NonCausalPair);
    REQUIRE_THROWS_AS(k.eval(1.0, 0.5, {0, 0}, {0, 0}), NonCausalPair);
}

TEST_CASE("marked kernel reduces to the base kernel") {
    MarkedDeepKernel mk;
    mk.base = small_deep_kernel(3);
    mk.tau_max = mk.base.tau_max;
    mk.a_max = mk.base.a_max;
    mk.Q = 1;
    mk.mark_dim = 1;
    mk.alpha_t.resize(mk.base.L * mk.base.R * 1);
    for (int l = 0; l < mk.base.L; ++l)
        for (int r = 0; r < mk.base.R; ++r) mk.a(l, r, 0) = mk.base.alpha(r, l);
    // constant-one mark bases: softplus(log(e - 1)) = 1
    MlpSpec mark_spec{1, {}, 1, OutputActivation::softplus};
    Mlp one(mark_spec);
    one.b[0](0) = std::log(std::exp(1.0) - 1.0);
    mk.g_nets = {one};
    mk.h_nets = {one};

    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
        const double tp = rng.uniform(0, 1), lag = rng.uniform(0.01, 1.4);
        const Vec2 sp{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
        const Vec2 s{sp.x + rng.uniform(-0.4, 0.4), sp.y + rng.uniform(-0.4, 0.4)};
        const double want = mk.base.eval(tp, tp + lag, sp, s);
        const double got = mk.eval_marked(tp, tp + lag, sp, s, {0.3}, {-1.2});
        REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-12));
    }
}

TEST_CASE("marked kernel matches the naive triple loop") {
    MarkedDeepKernel mk;
    mk.base = small_deep_kernel(4);
    mk.tau_max = mk.base.tau_max;
    mk.a_max = mk.base.a_max;
    mk.Q = 2;
    mk.mark_dim = 2;
    Rng rng(31);
    mk.alpha_t.resize(mk.base.L * mk.base.R * mk.Q);
    for (int i = 0; i < mk.alpha_t.size(); ++i) mk.alpha_t(i) = rng.uniform(-0.5, 0.5);
    MlpSpec mark_spec{2, {4}, 1, OutputActivation::softplus};
    for (int q = 0; q < mk.Q; ++q) {
        mk.g_nets.push_back(Mlp::init(mark_spec, rng.next_u64()));
        mk.h_nets.push_back(Mlp::init(mark_spec, rng.next_u64()));
    }

    for (int trial = 0; trial < 10; ++trial) {
        const double tp = rng.uniform(0, 1), lag = rng.uniform(0.01, 1.4);
        const Vec2 sp{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
        const Vec2 s{sp.x + rng.uniform(-0.4, 0.4), sp.y + rng.uniform(-0.4, 0.4)};
        std::vector<double> mp{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        std::vector<double> m{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        double want = 0.0;
        Eigen::VectorXd mpv(2), mv(2);
        mpv << mp[0], mp[1];
        mv << m[0], m[1];
        for (int q = 0; q < mk.Q; ++q)
            for (int r = 0; r < mk.base.R; ++r)
                for (int l = 0; l < mk.base.L; ++l)
                    want += mk.a(l, r, q) * mk.base.psi(l, tp) * mk.base.phi(l, lag) *
                            mk.base.u(r, sp) * mk.base.v(r, s - sp) * mk.g_nets[q].forward(mpv)(0) *
                            mk.h_nets[q].forward(mv)(0);
        REQUIRE_THAT(mk.eval_marked(tp, tp + lag, sp, s, mp, m),
                     Catch::Matchers::WithinAbs(want, 1e-10));
        REQUIRE(mk.eval_marked(tp, tp + lag, sp, s, mp, m) != 0.0);
    }
    REQUIRE_THROWS_AS(mk.eval_marked(0.0, 0.5, {0, 0}, {0, 0}, {0.1}, {0.1, 0.2}),
                      DimensionMismatch);
}

TEST_CASE("kernel lag grid") {
    GridSpec grid;
    grid.lag = Axis(8, 0.0, 2.0);
    grid.dx = Axis(6, -1.0, 1.0);
    grid.dy = Axis(6, -1.0, 1.0);

    SECTION("zero kernel gives a zero table") {
        DeepKernel k = small_deep_kernel(6);
        k.alpha.setZero();
        k.tau_max = 2.0;
        k.a_max = 1.0;
        REQUIRE(kernel_lag_grid(k, 0.1, {0, 0}, grid).isZero());
    }
    SECTION("entries equal pointwise evaluation") {
        DeepKernel k = small_deep_kernel(7);
        k.tau_max = 2.0;
        k.a_max = 1.0;
        Eigen::MatrixXd table = kernel_lag_grid(k, 0.3, {0.2, -0.1}, grid);
        for (int it : {0, 3, 7})
            for (int ix : {0, 2, 5})
                for (int iy : {1, 4}) {
                    const Vec2 d{grid.dx.mid(ix), grid.dy.mid(iy)};
                    const double want =
                        k.eval(0.3, 0.3 + grid.lag.mid(it), {0.2, -0.1}, {0.2 + d.x, -0.1 + d.y});
                    REQUIRE_THAT(table(it, ix * grid.dy.n + iy),
                                 Catch::Matchers::WithinAbs(want, 1e-12));
                }
    }
    SECTION("decaying kernel is nonincreasing along the lag axis") {
        ExpHawkesKernel k(1.0, 1.0, 2.0, 3.0);
        Eigen::MatrixXd table = kernel_lag_grid(k, 0.0, {0, 0}, grid);
        for (int col = 0; col < table.cols(); ++col)
            for (int it = 1; it < table.rows(); ++it)
                REQUIRE(table(it, col) <= table(it - 1, col) + 1e-15);
    }
}

TEST_CASE("effective rank basics") {
    REQUIRE(effective_rank(Eigen::MatrixXd::Zero(4, 4)) == 0);
    REQUIRE(effective_rank(Eigen::MatrixXd::Identity(5, 5)) == 5);

    Rng rng(12);
    Eigen::VectorXd a(20), b(20);
    for (int i = 0; i < 20; ++i) {
        a(i) = rng.uniform(-1, 1);
        b(i) = rng.uniform(-1, 1);
    }
    Eigen::MatrixXd outer = a * b.transpose();
    REQUIRE(effective_rank(outer) == 1);
    // invariance to positive scaling
    REQUIRE(effective_rank(3.7 * outer) == 1);
    Eigen::MatrixXd two = outer + Eigen::VectorXd::Ones(20) * b.transpose();
    REQUIRE(effective_rank(2.5 * two) == effective_rank(two));
    REQUIRE_THROWS_AS(effective_rank(outer, 0.0), std::invalid_argument);
}

TEST_CASE("discretized pair forms") {
    SECTION("zero kernel") {
        auto [orig, repar] = discretize_pair_forms([](double, double) { return 0.0; }, 16);
        REQUIRE(orig.isZero());
        REQUIRE(repar.isZero());
    }
    SECTION("separable kernel has reparameterized rank one") {
        auto sep = [](double tp, double lag) { return std::sin(tp) * std::exp(-0.3 * lag); };
        auto [orig, repar] = discretize_pair_forms(sep, 60);
        REQUIRE(effective_rank(repar) == 1);
        REQUIRE(effective_rank(orig) > 1);
    }
    SECTION("demo kernel ranks") {
        auto [orig, repar] = discretize_pair_forms(rank_demo_kernel, 200);
        REQUIRE(effective_rank(repar, 1e-10) == 1);
        // The zero-filled causal band structure pins the original-form rank
        // at n - 1: the submatrix dropping the first row and last column is
        // triangular with nonzero diagonal f(t') g(1).
        REQUIRE(effective_rank(orig, 1e-10) == 199);
    }
}

TEST_CASE("closed-form integrals match quadrature") {
    SECTION("temporal") {
        SyntheticKernel k;
        for (double x : {0.2, 0.9, 1.7, 2.4, 3.0}) {
            for (int l = 0; l < 2; ++l) {
                double quad = 0.0;
                const int n = 200000;
                const double h = x / n;
                for (int c = 0; c < n; ++c) quad += h * k.phi(l, (c + 0.5) * h);
                REQUIRE_THAT(*k.phi_integral(l, x), Catch::Matchers::WithinAbs(quad, 1e-8));
            }
        }
    }
    SECTION("spatial") {
        SyntheticKernel k;
        SpatialDomain dom{-1, 1, -1, 1};
        const Vec2 center{0.4, -0.2};
        for (int r = 0; r < 2; ++r) {
            double quad = 0.0;
            const int n = 600;
            const double hx = (dom.x_hi - dom.x_lo) / n, hy = (dom.y_hi - dom.y_lo) / n;
            for (int ix = 0; ix < n; ++ix)
                for (int iy = 0; iy < n; ++iy) {
                    const Vec2 s{dom.x_lo + (ix + 0.5) * hx, dom.y_lo + (iy + 0.5) * hy};
                    quad += hx * hy * k.v(r, s - center);
                }
            REQUIRE_THAT(*k.v_domain_integral(r, center, dom),
                         Catch::Matchers::WithinRel(quad, 1e-5));
        }
    }
}
