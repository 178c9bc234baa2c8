#include <catch2/catch_amalgamated.hpp>

#include "sttpp/graph.hpp"
#include "sttpp/simulate.hpp"

using namespace sttpp;

namespace {

Eigen::MatrixXd demo_adjacency() {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(4, 4);
    A(0, 1) = 1.0;
    A(1, 2) = 0.5;
    A(2, 0) = 0.25;
    A(2, 3) = 1.5;
    A(3, 0) = 0.75;
    return A;
}

GraphFilterKernel mlp_kernel(std::uint64_t seed, int n_nodes = 4, int L = 1, int R = 1) {
    return GraphFilterKernel::init(n_nodes, L, R, 2.0, {6, 6}, seed, 0.2, 0.15);
}

Eigen::MatrixXd truth_filter() {
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(5, 5);
    B(0, 1) = 0.7;
    B(1, 2) = 0.5;
    B(2, 3) = 0.6;
    B(3, 4) = 0.45;
    B(4, 0) = 0.55;
    B(1, 0) = 0.3;
    B(2, 0) = 0.2;
    return B;
}

}  // namespace

TEST_CASE("graph type invariants") {
    Graph g;
    g.n = 4;
    g.adjacency = demo_adjacency();
    REQUIRE_NOTHROW(g.require_valid());
    REQUIRE(g.degrees()(2) == 1.75);
    Eigen::MatrixXd L = g.laplacian();
    REQUIRE(L(2, 2) == 1.75);
    REQUIRE(L(2, 3) == -1.5);
    REQUIRE_THAT(L.rowwise().sum().cwiseAbs().maxCoeff(),
                 Catch::Matchers::WithinAbs(0.0, 1e-14));

    g.adjacency(0, 0) = 1.0;
    REQUIRE_THROWS_AS(g.require_valid(), std::invalid_argument);
}

TEST_CASE("polynomial graph filters") {
    Eigen::MatrixXd A = demo_adjacency();
    SECTION("identity coefficient returns the shift") {
        Eigen::VectorXd h(1);
        h << 1.0;
        REQUIRE(graph_filter_poly(A, h) == A);
    }
    SECTION("second unit coefficient returns the square") {
        Eigen::VectorXd h(2);
        h << 0.0, 1.0;
        REQUIRE(((graph_filter_poly(A, h) - A * A).cwiseAbs().maxCoeff()) < 1e-14);
    }
    SECTION("unit coefficients reproduce matrix powers up to J = 4") {
        Eigen::MatrixXd power = A;
        for (int j = 1; j <= 4; ++j) {
            Eigen::VectorXd h = Eigen::VectorXd::Zero(j);
            h(j - 1) = 1.0;
            REQUIRE(((graph_filter_poly(A, h) - power).cwiseAbs().maxCoeff()) < 1e-12);
            power = power * A;
        }
    }
    SECTION("matches a Horner-scheme evaluation") {
        Rng rng(3);
        Eigen::VectorXd h(3);
        h << rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1);
        Eigen::MatrixXd horner = Eigen::MatrixXd::Identity(4, 4) * h(2);
        horner = horner * A + Eigen::MatrixXd::Identity(4, 4) * h(1);
        horner = horner * A + Eigen::MatrixXd::Identity(4, 4) * h(0);
        horner = horner * A;  // sum over j >= 1 only
        REQUIRE(((graph_filter_poly(A, h) - horner).cwiseAbs().maxCoeff()) < 1e-12);
    }
    SECTION("non-square shifts are rejected") {
        Eigen::VectorXd h(1);
        h << 1.0;
        REQUIRE_THROWS_AS(graph_filter_poly(Eigen::MatrixXd::Zero(2, 3), h), NonSquare);
    }
}

TEST_CASE("graph kernel evaluation") {
    SECTION("zero coefficients") {
        GraphFilterKernel k = mlp_kernel(5);
        k.alpha.setZero();
        REQUIRE(k.eval(0.0, 1.0, 0, 1) == 0.0);
    }
    SECTION("stationary closed form") {
        Eigen::MatrixXd A = demo_adjacency();
        GraphFilterKernel k = GraphFilterKernel::stationary_truth(A, 1.0, 1.0, 5.0);
        for (int vp = 0; vp < 4; ++vp)
            for (int v = 0; v < 4; ++v)
                REQUIRE_THAT(k.eval(0.0, 1.0, vp, v),
                             Catch::Matchers::WithinAbs(std::exp(-1.0) * A(vp, v), 1e-14));
    }
    SECTION("random instance matches the naive double loop") {
        GraphFilterKernel k = mlp_kernel(7, 4, 2, 2);
        Rng rng(8);
        for (int trial = 0; trial < 10; ++trial) {
            const double tp = rng.uniform(0, 1), lag = rng.uniform(0.01, 1.9);
            const int vp = rng.uniform_int(4), v = rng.uniform_int(4);
            double want = 0.0;
            for (int r = 0; r < 2; ++r)
                for (int l = 0; l < 2; ++l)
                    want += k.alpha(r, l) * k.psi(l, tp) * k.phi(l, lag) * k.filters[r](vp, v);
            REQUIRE_THAT(k.eval(tp, tp + lag, vp, v), Catch::Matchers::WithinAbs(want, 1e-12));
        }
    }
    SECTION("errors") {
        GraphFilterKernel k = mlp_kernel(9);
        REQUIRE_THROWS_AS(k.eval(1.0, 0.5, 0, 1), NonCausalPair);
        REQUIRE_THROWS_AS(k.eval(0.0, 1.0, 0, 7), NodeOutOfRange);
    }
}

TEST_CASE("graph intensity") {
    GraphModel m;
    m.kernel = GraphFilterKernel::stationary_truth(demo_adjacency(), 1.0, 1.0, 5.0);
    m.mu = Eigen::VectorXd::Constant(4, 0.3);
    m.window = {10.0};

    EventSequence empty;
    REQUIRE(graph_intensity(m, empty, 1.0, 2) == 0.3);

    EventSequence seq;
    seq.window = {10.0};
    seq.events.push_back(Event(1.0, 0));
    seq.events.push_back(Event(1.5, 1));
    seq.events.push_back(Event(2.0, 2));

    // hand computation with the exponential closed form
    const double t = 2.5;
    double want = 0.3;
    want += std::exp(-(t - 1.0)) * demo_adjacency()(0, 3);
    want += std::exp(-(t - 1.5)) * demo_adjacency()(1, 3);
    want += std::exp(-(t - 2.0)) * demo_adjacency()(2, 3);
    REQUIRE_THAT(graph_intensity(m, seq, t, 3), Catch::Matchers::WithinAbs(want, 1e-13));

    // zero filter row contributes nothing: node 3 only influences node 0
    double base_only = graph_intensity(m, seq, t, 1);
    REQUIRE_THAT(base_only, Catch::Matchers::WithinAbs(
                                0.3 + std::exp(-1.0) * demo_adjacency()(1, 1) +
                                    std::exp(-1.5) * demo_adjacency()(0, 1),
                                1e-13));
    REQUIRE_THROWS_AS(graph_intensity(m, seq, t, 9), NodeOutOfRange);
}

TEST_CASE("influence snapshots") {
    SECTION("zero model") {
        GraphModel m;
        m.kernel = mlp_kernel(11);
        m.kernel.alpha.setZero();
        m.mu = Eigen::VectorXd::Zero(4);
        m.window = {10.0};
        auto snaps = influence_snapshots(m, 5.0, std::vector<double>{0.5, 1.0});
        for (const auto& s : snaps) REQUIRE(s.isZero());
    }
    SECTION("stationary kernel depends only on the lag") {
        GraphModel m;
        m.kernel = GraphFilterKernel::stationary_truth(demo_adjacency(), 1.0, 0.8, 5.0);
        m.mu = Eigen::VectorXd::Constant(4, 0.1);
        m.window = {20.0};
        auto at5 = influence_snapshots(m, 5.0, std::vector<double>{0.5, 1.5});
        auto at9 = influence_snapshots(m, 9.0, std::vector<double>{0.5, 1.5});
        for (int i = 0; i < 2; ++i)
            REQUIRE(((at5[i] - at9[i]).cwiseAbs().maxCoeff()) < 1e-13);
    }
    SECTION("decaying kernel has nonincreasing snapshot norms") {
        GraphModel m;
        m.kernel = GraphFilterKernel::stationary_truth(demo_adjacency(), 1.0, 1.2, 6.0);
        m.mu = Eigen::VectorXd::Constant(4, 0.1);
        m.window = {20.0};
        std::vector<double> lags{0.5, 1.0, 2.0, 3.0, 4.5};
        auto snaps = influence_snapshots(m, 10.0, lags);
        for (std::size_t i = 1; i < snaps.size(); ++i)
            REQUIRE(snaps[i].norm() <= snaps[i - 1].norm() + 1e-12);
    }
}

TEST_CASE("single-node graph model reduces to the temporal deep kernel") {
    GraphFilterKernel gk = mlp_kernel(21, 1, 1, 1);
    gk.filters[0](0, 0) = 1.0;
    gk.tau_max = 1.5;

    DeepKernel dk;
    dk.L = 1;
    dk.R = 1;
    dk.tau_max = 1.5;
    dk.a_max = 2.0;
    dk.alpha = gk.alpha;
    dk.psi_nets = gk.psi_nets;
    dk.phi_nets = gk.phi_nets;
    MlpSpec one_spec{2, {}, 1, OutputActivation::softplus};
    Mlp one(one_spec);
    one.b[0](0) = std::log(std::exp(1.0) - 1.0);  // softplus -> exactly 1
    dk.u_nets = {one};
    dk.v_nets = {one};

    GraphModel gm;
    gm.kernel = gk;
    gm.mu = Eigen::VectorXd::Constant(1, 0.4);
    gm.window = {10.0};

    SttpModel pm;
    pm.mu = 0.4;
    pm.kernel = std::make_shared<DeepKernel>(dk);
    pm.window = {10.0};
    pm.domain = {0, 1, 0, 1};

    EventSequence gseq, pseq;
    gseq.window = pseq.window = {10.0};
    for (double t : {0.5, 1.1, 1.3, 2.2}) {
        gseq.events.push_back(Event(t, 0));
        pseq.events.push_back(Event(t, Vec2{0.5, 0.5}));
    }
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const double t = rng.uniform(0.6, 4.0);
        REQUIRE_THAT(graph_intensity(gm, gseq, t, 0),
                     Catch::Matchers::WithinAbs(
                         conditional_intensity(pm, pseq, t, {0.5, 0.5}), 1e-12));
    }
}

TEST_CASE("graph simulation") {
    GraphModel m;
    m.kernel = GraphFilterKernel::stationary_truth(truth_filter(), 1.0, 1.5, 3.0);
    m.mu = Eigen::VectorXd::Constant(5, 0.3);
    m.window = {20.0};

    auto a = simulate_graph(m, 20.0, 42);
    auto b = simulate_graph(m, 20.0, 42);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a.events[i].t == b.events[i].t);
        REQUIRE(*a.events[i].node == *b.events[i].node);
    }
    REQUIRE(a.size() > 20);
    for (const auto& e : a.events) {
        REQUIRE(*e.node >= 0);
        REQUIRE(*e.node < 5);
    }

    // total intensity equals the sum of per-node intensities at sampled times
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        const double t = rng.uniform(1.0, 19.0);
        double total = 0.0;
        for (int v = 0; v < 5; ++v) total += graph_intensity(m, a, t, v);
        double direct = m.mu.sum();
        for (const auto& e : a.events) {
            if (e.t >= t) break;
            if (t - e.t > m.kernel.tau_max) continue;
            for (int v = 0; v < 5; ++v) direct += m.kernel.eval(e.t, t, *e.node, v);
        }
        REQUIRE_THAT(total, Catch::Matchers::WithinAbs(direct, 1e-10));
    }
}

TEST_CASE("per-node Poisson rates are recovered") {
    GraphModel truth;
    truth.kernel = GraphFilterKernel::stationary_truth(Eigen::MatrixXd::Zero(3, 3), 1.0, 1.0, 2.0);
    truth.mu = Eigen::VectorXd(3);
    truth.mu << 0.4, 0.8, 1.2;
    truth.window = {40.0};
    std::vector<EventSequence> data;
    for (int j = 0; j < 10; ++j) data.push_back(simulate_graph(truth, 40.0, 100 + j));

    Eigen::VectorXd counts = Eigen::VectorXd::Zero(3);
    for (const auto& s : data)
        for (const auto& e : s.events) counts(*e.node) += 1.0;
    Eigen::VectorXd rate_mle = counts / (10.0 * 40.0);

    GraphModel init;
    init.kernel = mlp_kernel(77, 3, 1, 1);
    for (auto& B : init.kernel.filters) B.setZero();
    init.kernel.alpha.setZero();
    init.mu = Eigen::VectorXd::Constant(3, 0.5);
    init.window = {40.0};
    FitOptions opts;
    opts.objective = FitOptions::Objective::least_squares;
    opts.max_epochs = 500;
    opts.learning_rate = 3e-2;
    auto [fitted, report] = fit_graph(init, data, opts, 48, 40);
    REQUIRE(report.termination != Termination::diverged);
    for (int v = 0; v < 3; ++v)
        REQUIRE_THAT(fitted.mu(v), Catch::Matchers::WithinRel(rate_mle(v), 0.10));
}

TEST_CASE("filter recovery on a known five-node kernel") {
    GraphModel truth;
    truth.kernel = GraphFilterKernel::stationary_truth(truth_filter(), 1.0, 1.5, 3.0);
    truth.mu = Eigen::VectorXd::Constant(5, 0.3);
    truth.window = {20.0};
    std::vector<EventSequence> data;
    for (int j = 0; j < 100; ++j) data.push_back(simulate_graph(truth, 20.0, 9000 + j));

    GraphModel init;
    init.kernel = GraphFilterKernel::init(5, 1, 1, 3.0, {8, 8}, 4242, 0.3, 0.08);
    init.mu = Eigen::VectorXd::Constant(5, 0.5);
    init.window = {20.0};
    FitOptions opts;
    opts.objective = FitOptions::Objective::least_squares;
    opts.max_epochs = 500;
    opts.learning_rate = 2e-2;
    auto [fitted, report] = fit_graph(init, data, opts, 48, 60);
    REQUIRE(report.termination != Termination::diverged);

    // the sign/scale split between temporal bases and filters is not
    // identifiable; compare through the time-integrated influence, which for
    // the stationary truth is proportional to the filter itself
    Eigen::MatrixXd Bf = time_integrated_influence(fitted.kernel, 10.0);
    Eigen::MatrixXd Bt = truth_filter();
    std::vector<double> xs, ys;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            if (i == j) continue;
            xs.push_back(Bf(i, j));
            ys.push_back(Bt(i, j));
        }
    const double nxy = static_cast<double>(xs.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) { mx += xs[i]; my += ys[i]; }
    mx /= nxy;
    my /= nxy;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    const double pearson = sxy / std::sqrt(sxx * syy);
    INFO("pearson " << pearson);
    REQUIRE(pearson >= 0.85);

    // deterministic rerun
    auto [fitted2, report2] = fit_graph(init, data, opts, 48, 60);
    REQUIRE(report.trace == report2.trace);
}

TEST_CASE("graph MLE with barrier runs and stays feasible") {
    GraphModel truth;
    truth.kernel = GraphFilterKernel::stationary_truth(truth_filter(), 1.0, 1.5, 3.0);
    truth.mu = Eigen::VectorXd::Constant(5, 0.3);
    truth.window = {20.0};
    std::vector<EventSequence> data;
    for (int j = 0; j < 10; ++j) data.push_back(simulate_graph(truth, 20.0, 300 + j));

    GraphModel init;
    init.kernel = GraphFilterKernel::init(5, 1, 1, 3.0, {6, 6}, 5, 0.2, 0.1);
    init.mu = Eigen::VectorXd::Constant(5, 0.4);
    init.window = {20.0};
    FitOptions opts;
    opts.objective = FitOptions::Objective::mle_barrier;
    opts.max_epochs = 120;
    opts.barrier_stage_epochs = 30;
    auto [fitted, report] = fit_graph(init, data, opts, 32, 40);
    REQUIRE(report.termination != Termination::diverged);
    REQUIRE(report.final_min_intensity > 0.0);
}
