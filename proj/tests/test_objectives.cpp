#include <catch2/catch_amalgamated.hpp>

#include "sttpp/objectives.hpp"
#include "sttpp/optimizer.hpp"
#include "test_models.hpp"
#include "test_util.hpp"

using namespace sttpp;

namespace {

SttpModel baseline_model(double mu, double area_side, double T) {
    SttpModel m;
    m.mu = mu;
    m.window = {T};
    m.domain = {0, area_side, 0, 1};
    return m;
}

EventSequence events_at(std::vector<double> times, const SttpModel& m, Vec2 loc = {0.5, 0.5}) {
    EventSequence s;
    s.window = m.window;
    for (double t : times) s.events.push_back(Event(t, loc));
    return s;
}

}  // namespace

TEST_CASE("log-likelihood closed forms for the homogeneous baseline") {
    SECTION("no events, mu |S| T = 1") {
        SttpModel m = baseline_model(1.0, 1.0, 1.0);
        std::vector<EventSequence> seqs{events_at({}, m)};
        GridSpec grid = test_grid(m);
        auto obj = log_likelihood(m, seqs, grid);
        REQUIRE_THAT(obj.value, Catch::Matchers::WithinAbs(-1.0, 1e-12));
        REQUIRE_THAT(obj.parts.event_term + obj.parts.integral_term,
                     Catch::Matchers::WithinAbs(obj.value, 1e-15));
    }
    SECTION("n log mu - mu |S| T") {
        SttpModel m = baseline_model(2.0, 2.0, 3.0);
        std::vector<EventSequence> seqs{events_at({0.5, 1.0, 1.5, 2.0}, m)};
        GridSpec grid = test_grid(m);
        auto obj = log_likelihood(m, seqs, grid);
        REQUIRE_THAT(obj.value,
                     Catch::Matchers::WithinAbs(4.0 * std::log(2.0) - 12.0, 1e-12));
        // gradient wrt mu: n/mu - |S| T
        REQUIRE_THAT(obj.gradient(0), Catch::Matchers::WithinAbs(4.0 / 2.0 - 6.0, 1e-12));
    }
}

TEST_CASE("deep-kernel log-likelihood matches the brute-force oracle") {
    SttpModel m = random_deep_model(11);
    auto seq = random_sequence(21, 5, m.window.T, m.domain);
    std::vector<EventSequence> seqs{seq};
    GridSpec grid = test_grid(m, 8, 6, 6, 40, 24);

    const double fast = log_likelihood(m, seqs, grid).value;

    GridSpec fine = test_grid(m, 48, 36, 36);
    const double oracle = brute_force_log_likelihood(m, seq, fine);
    REQUIRE_THAT(fast, Catch::Matchers::WithinRel(oracle, 1e-3));

    SECTION("agreement tightens under oracle refinement") {
        // near-exact decomposed value so the oracle quadrature error dominates
        const double exact = log_likelihood(m, seqs, test_grid(m, 8, 6, 6, 400, 128)).value;
        double prev_err = std::abs(exact - brute_force_log_likelihood(m, seq, test_grid(m, 6, 4, 4)));
        double mid_err = std::abs(exact - brute_force_log_likelihood(m, seq, test_grid(m, 12, 8, 8)));
        double fine_err = std::abs(exact - brute_force_log_likelihood(m, seq, test_grid(m, 24, 16, 16)));
        REQUIRE(mid_err < prev_err);
        REQUIRE(fine_err < mid_err);
    }
}

TEST_CASE("single-event sequence: decomposed and brute-force paths agree") {
    SttpModel m = random_deep_model(31);
    auto seq = random_sequence(41, 1, m.window.T, m.domain);
    std::vector<EventSequence> seqs{seq};
    const double fast = log_likelihood(m, seqs, test_grid(m, 8, 6, 6, 64, 32)).value;
    const double oracle = brute_force_log_likelihood(m, seq, test_grid(m, 64, 48, 48));
    REQUIRE_THAT(fast, Catch::Matchers::WithinRel(oracle, 1e-4));
}

TEST_CASE("integral term") {
    SECTION("zero kernel gives mu |S| T") {
        SttpModel m = baseline_model(0.7, 2.0, 5.0);
        auto seq = events_at({1.0, 2.0}, m);
        GridSpec grid = test_grid(m);
        // null kernel: integral term is the baseline mass
        PrecomputedIntegrals pre;
        pre.grid = grid;
        REQUIRE_THAT(integral_term(m, seq, pre), Catch::Matchers::WithinAbs(7.0, 1e-12));
    }
    SECTION("event at t = T adds no future mass") {
        SttpModel m = random_deep_model(51);
        EventSequence seq;
        seq.window = m.window;
        seq.events.push_back(Event(m.window.T, Vec2{0.0, 0.0}));
        GridSpec grid = test_grid(m);
        auto pre = precompute_integrals(m, seq, grid);
        REQUIRE_THAT(integral_term(m, seq, pre),
                     Catch::Matchers::WithinAbs(m.mu * m.domain.area() * m.window.T, 1e-12));
    }
    SECTION("random rank-1 model matches tensor-product quadrature") {
        SttpModel m = random_deep_model(61, 1, 1);
        auto seq = random_sequence(62, 4, m.window.T, m.domain);
        GridSpec grid = test_grid(m, 6, 5, 5, 48, 48);
        auto pre = precompute_integrals(m, seq, grid);
        const double got = integral_term(m, seq, pre);

        GridSpec fine = test_grid(m, 64, 48, 48);
        const double oracle = brute_force_intensity_integral(m, seq, fine, 1);
        REQUIRE_THAT(got, Catch::Matchers::WithinRel(oracle, 1e-3));

        // refinement shrinks the decomposition error
        GridSpec coarse = test_grid(m, 6, 5, 5, 12, 8);
        const double coarse_val = integral_term(m, seq, precompute_integrals(m, seq, coarse));
        REQUIRE(std::abs(got - oracle) < std::abs(coarse_val - oracle));
    }
    SECTION("grid mismatch is detected") {
        SttpModel m = random_deep_model(71);
        auto seq = random_sequence(72, 4, m.window.T, m.domain);
        auto other = random_sequence(73, 6, m.window.T, m.domain);
        GridSpec grid = test_grid(m);
        auto pre = precompute_integrals(m, seq, grid);
        REQUIRE_THROWS_AS(integral_term(m, other, pre), GridMismatch);
    }
}

TEST_CASE("precomputed cumulative integrals are nondecreasing for nonnegative phi") {
    SttpModel m;
    m.mu = 1.0;
    m.window = {10.0};
    m.domain = {0, 1, 0, 1};
    m.kernel = std::make_shared<ExpHawkesKernel>(0.5, 1.0, 10.0, 2.0);
    auto seq = events_at({1.0, 4.0}, m);
    auto pre = precompute_integrals(m, seq, test_grid(m, 6, 5, 5, 50, 12));
    for (int c = 0; c < pre.tables.phi_cum.cols() - 1; ++c)
        REQUIRE(pre.tables.phi_cum(0, c + 1) >= pre.tables.phi_cum(0, c));
}

TEST_CASE("least-squares loss") {
    SECTION("constant intensity closed form") {
        SttpModel m = baseline_model(1.0, 4.0, 10.0);
        std::vector<EventSequence> seqs{events_at({1, 2, 3, 4, 5}, m, Vec2{0.5, 0.5})};
        auto obj = ls_loss(m, seqs, test_grid(m));
        REQUIRE_THAT(obj.value, Catch::Matchers::WithinAbs(40.0 - 10.0, 1e-10));
    }
    SECTION("zero baseline, zero kernel") {
        SttpModel m = baseline_model(0.0, 2.0, 4.0);
        std::vector<EventSequence> seqs{events_at({}, m)};
        REQUIRE(ls_loss(m, seqs, test_grid(m)).value == 0.0);
    }
    SECTION("rank-1 model matches a dense-grid oracle") {
        SttpModel m = random_deep_model(81, 1, 1, 0.9, 0.04);
        auto seq = random_sequence(82, 5, m.window.T, m.domain);
        std::vector<EventSequence> seqs{seq};
        const double got = ls_loss(m, seqs, test_grid(m, 50, 20, 20, 64, 48)).value;

        const double quad = brute_force_intensity_integral(m, seq, test_grid(m, 200, 48, 48), 2);
        double events = 0.0;
        for (const auto& e : seq.events) events += conditional_intensity(m, seq, e.t, *e.s);
        const double oracle = quad - 2.0 * events;
        REQUIRE_THAT(got, Catch::Matchers::WithinRel(oracle, 1e-3));
    }
    SECTION("invariant to relabeling basis indices") {
        SttpModel m = random_deep_model(91);
        auto dk = std::dynamic_pointer_cast<const DeepKernel>(m.kernel);
        auto permuted = std::make_shared<DeepKernel>(*dk);
        std::swap(permuted->psi_nets[0], permuted->psi_nets[1]);
        std::swap(permuted->phi_nets[0], permuted->phi_nets[1]);
        permuted->alpha.col(0).swap(permuted->alpha.col(1));
        std::swap(permuted->u_nets[0], permuted->u_nets[1]);
        std::swap(permuted->v_nets[0], permuted->v_nets[1]);
        permuted->alpha.row(0).swap(permuted->alpha.row(1));
        SttpModel mp = m;
        mp.kernel = permuted;
        auto seq = random_sequence(92, 6, m.window.T, m.domain);
        std::vector<EventSequence> seqs{seq};
        GridSpec grid = test_grid(m);
        REQUIRE_THAT(ls_loss(mp, seqs, grid).value,
                     Catch::Matchers::WithinRel(ls_loss(m, seqs, grid).value, 1e-12));
    }
}

TEST_CASE("barrier penalty") {
    SECTION("lambda = 1 everywhere gives zero penalty") {
        SttpModel m = baseline_model(1.0, 1.0, 1.0);
        std::vector<EventSequence> seqs{events_at({0.25, 0.5}, m)};
        auto obj = barrier_penalty(m, seqs, test_grid(m), 1.0, 1e-6);
        REQUIRE_THAT(obj.value, Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
    SECTION("lambda = e gives -M") {
        SttpModel m = baseline_model(std::exp(1.0), 1.0, 1.0);
        std::vector<EventSequence> seqs{events_at({0.25, 0.5, 0.75}, m)};
        GridSpec grid = test_grid(m);
        const int nodes = grid.time.n * grid.x.n * grid.y.n + 3;
        auto obj = barrier_penalty(m, seqs, grid, 1.0, 1e-6);
        REQUIRE_THAT(obj.value, Catch::Matchers::WithinAbs(-static_cast<double>(nodes), 1e-9));
    }
    SECTION("non-positive intensity gives a guarded finite value and gradient") {
        SttpModel m = baseline_model(0.0, 1.0, 1.0);
        std::vector<EventSequence> seqs{events_at({}, m)};
        auto obj = barrier_penalty(m, seqs, test_grid(m), 1.0, 1e-6);
        REQUIRE(std::isfinite(obj.value));
        REQUIRE(obj.value > 1e3);  // strongly penalized
        REQUIRE(std::isfinite(obj.gradient(0)));
        REQUIRE(obj.gradient(0) < 0.0);  // pushing mu upward lowers the penalty
    }
    SECTION("invalid arguments") {
        SttpModel m = baseline_model(1.0, 1.0, 1.0);
        std::vector<EventSequence> seqs;
        REQUIRE_THROWS_AS(barrier_penalty(m, seqs, test_grid(m), 0.0, 1e-6),
                          std::invalid_argument);
    }
}

TEST_CASE("strict positivity check reports the offending event") {
    SttpModel m = baseline_model(0.0, 1.0, 1.0);  // lambda = 0 at events
    std::vector<EventSequence> seqs{events_at({0.5}, m)};
    try {
        log_likelihood(m, seqs, test_grid(m));
        FAIL("expected NonPositiveIntensityAtEvent");
    } catch (const NonPositiveIntensityAtEvent& e) {
        REQUIRE(e.sequence == 0);
        REQUIRE(e.index == 0);
        REQUIRE(e.value <= 0.0);
    }
}

TEST_CASE("analytic gradients match central differences") {
    // the exactness contract: gradients of the discretized objectives
    double worst_ll = 0.0, worst_ls = 0.0, worst_bar = 0.0;
    int checked = 0;
    for (int trial = 0; checked < 20 && trial < 60; ++trial) {
        SttpModel m = random_deep_model(1000 + trial, 1 + trial % 2, 1 + (trial / 2) % 2, 1.1, 0.1);
        auto seq = random_sequence(2000 + trial, 4 + trial % 3, m.window.T, m.domain);
        // strict log-likelihood needs intensities clear of zero at events
        bool feasible = true;
        for (const auto& e : seq.events)
            feasible = feasible && conditional_intensity(m, seq, e.t, *e.s) > 0.05;
        if (!feasible) continue;
        ++checked;
        std::vector<EventSequence> seqs{seq};
        GridSpec grid = test_grid(m, 4, 4, 4, 10, 8);
        const auto& dk = dynamic_cast<const DeepKernel&>(*m.kernel);
        Eigen::VectorXd theta = pack_params(m, dk);

        auto check = [&](auto&& evalfn, double& worst) {
            Eigen::VectorXd analytic = evalfn(m).gradient;
            auto f = [&](const Eigen::VectorXd& th) {
                return evalfn(model_with_params(m, th)).value;
            };
            Eigen::VectorXd numeric = central_diff_gradient(f, theta, 1e-5);
            worst = std::max(worst, max_rel_error(analytic, numeric, 1e-6));
        };
        check([&](const SttpModel& mm) { return log_likelihood(mm, seqs, grid); }, worst_ll);
        check([&](const SttpModel& mm) { return ls_loss(mm, seqs, grid); }, worst_ls);
        check([&](const SttpModel& mm) { return barrier_penalty(mm, seqs, grid, 0.3, 1e-6); },
              worst_bar);
    }
    INFO("worst rel errors: ll " << worst_ll << " ls " << worst_ls << " barrier " << worst_bar);
    REQUIRE(checked >= 20);
    REQUIRE(worst_ll <= 1e-4);
    REQUIRE(worst_ls <= 1e-4);
    REQUIRE(worst_bar <= 1e-4);
}

TEST_CASE("perturbation gap is exactly zero for identical models") {
    SttpModel m = random_deep_model(111);
    std::vector<EventSequence> seqs{random_sequence(112, 5, m.window.T, m.domain),
                                    random_sequence(113, 4, m.window.T, m.domain)};
    auto gap = perturbation_gap(m, m, seqs, test_grid(m));
    REQUIRE(gap.mean == 0.0);
    REQUIRE(gap.std_error == 0.0);
}

TEST_CASE("composite kernel adds components") {
    auto base = std::make_shared<SyntheticKernel>();
    SttpModel m;
    m.mu = 1.0;
    m.window = {10.0};
    m.domain = {-1, 1, -1, 1};
    m.kernel = base;

    ModelConfig cfg;
    cfg.temporal_rank = 1;
    cfg.spatial_rank = 1;
    cfg.tau_max = 2.0;
    cfg.a_max = 1.0;
    cfg.hidden_widths = {4, 4};
    auto bump = std::make_shared<DeepKernel>(DeepKernel::init(cfg, 7, 0.05));

    auto comp = std::make_shared<CompositeKernel>(base, bump, 1.0);
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
        const double tp = rng.uniform(0, 5), lag = rng.uniform(0.01, 1.9);
        const Vec2 sp{rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const Vec2 s{sp.x + rng.uniform(-0.6, 0.6), sp.y + rng.uniform(-0.6, 0.6)};
        double want = bump->eval(tp, tp + lag, sp, s);
        if (lag <= base->tau_max && (s - sp).norm() <= base->a_max)
            want += base->eval(tp, tp + lag, sp, s);
        REQUIRE_THAT(comp->eval(tp, tp + lag, sp, s), Catch::Matchers::WithinAbs(want, 1e-12));
    }
}
