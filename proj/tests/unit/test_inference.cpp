#include <cmath>
#include <numeric>

#include <boost/math/special_functions/digamma.hpp>
#include <gtest/gtest.h>

#include "cozinb/distributions.hpp"
#include "cozinb/error.hpp"
#include "cozinb/generative.hpp"
#include "cozinb/inference.hpp"
#include "cozinb/special.hpp"

using namespace cozinb;

namespace {

HyperParams small_hp(int K) {
    HyperParams hp;
    hp.K = K;
    hp.d_h = 2;
    hp.d_l = 2;
    hp.encoder_hidden = {4};
    hp.decoder_hidden = {4};
    return hp;
}

CountMatrix random_counts(Rng& rng, int J, int M, double density = 0.4) {
    std::vector<SparseRow> rows(J);
    std::vector<std::string> ids;
    for (int j = 0; j < J; ++j) {
        ids.push_back("s" + std::to_string(j));
        for (int m = 0; m < M; ++m)
            if (rng.uniform() < density) rows[j].push_back({static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(1 + rng.below(5))});
    }
    return CountMatrix(M, rows, ids);
}

struct Problem {
    CountMatrix X;
    HyperParams hp;
    GlobalState g;
    std::vector<LocalState> L;
    Batch batch() {
        Batch b{&X, {}, {}};
        for (std::size_t j = 0; j < X.rows(); ++j) {
            b.index.push_back(j);
            b.locals.push_back(&L[j]);
        }
        return b;
    }
    void sweep(const InferenceOptions& opts, int n = 1) {
        for (int i = 0; i < n; ++i) {
            const GlobalExpectations e = GlobalExpectations::compute(g);
            for (std::size_t j = 0; j < X.rows(); ++j) update_local(X.row(j), g, e, hp, opts, LocalSettings{3, 0.0}, L[j]);
            update_global_closed(batch(), g, hp, 1.0, X.rows(), opts);
        }
    }
};

Problem make_problem(std::uint64_t seed, int J, int M, int K) {
    Rng rng(seed);
    Problem p{random_counts(rng, J, M), small_hp(K), init_global(small_hp(K), M, seed), {}};
    p.L.resize(J);
    return p;
}

InferenceOptions frozen() {
    InferenceOptions o;
    o.freeze_gradient = true;
    return o;
}

double beta_entropy(double a, double b) {
    using boost::math::digamma;
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b) - (a - 1) * digamma(a) - (b - 1) * digamma(b) +
           (a + b - 2) * digamma(a + b);
}

double gamma_entropy(double k, double theta) {
    return k + std::log(theta) + std::lgamma(k) + (1 - k) * boost::math::digamma(k);
}

}  // namespace

TEST(Local, EmptyRow) {
    Problem p = make_problem(1, 1, 4, 3);
    const CountMatrix X(4, {{}}, {"e"});
    const InferenceOptions opts = frozen();
    const GlobalExpectations e = GlobalExpectations::compute(p.g);
    LocalState s;
    update_local(X.row(0), p.g, e, p.hp, opts, LocalSettings{}, s);
    EXPECT_EQ(s.psi.rows(), 0);
    EXPECT_DOUBLE_EQ(s.a_tilde, p.hp.a0);
    EXPECT_TRUE((s.L_tilde == 0).all());
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(s.theta1[k], std::max(e.er[k] * s.nu[k], kShapeFloor), 1e-15);
}

TEST(Local, ShapeOfP) {
    Problem p = make_problem(2, 1, 4, 3);
    const CountMatrix X(4, {{{0, 6}, {3, 4}}}, {"a"});
    const GlobalExpectations e = GlobalExpectations::compute(p.g);
    LocalState s;
    update_local(X.row(0), p.g, e, p.hp, frozen(), LocalSettings{}, s);
    EXPECT_NEAR(s.a_tilde, 10.001, 1e-12);
}

TEST(Local, NoEvidenceSelectorIsHalf) {
    Problem p = make_problem(3, 1, 4, 2);
    p.g.tau1.setConstant(2.0);
    p.g.tau2.setConstant(2.0);
    const GlobalExpectations e = GlobalExpectations::compute(p.g);
    const SparseRow empty;
    InferenceOptions opts;
    opts.kernel = false;
    LocalState s = init_local(empty, p.g, e, p.hp, opts);
    s.a_tilde = 1e-12;
    s.b_tilde = 1.0;
    local_nu_step(empty, e, opts, s);
    EXPECT_NEAR(s.nu[0], 0.5, 1e-9);
    EXPECT_NEAR(s.nu[1], 0.5, 1e-9);
}

TEST(Local, Invariants) {
    Problem p = make_problem(4, 12, 9, 4);
    p.sweep(InferenceOptions{}, 4);
    for (std::size_t j = 0; j < p.X.rows(); ++j) {
        const LocalState& s = p.L[j];
        s.validate(p.X.row(j));
        const Eigen::ArrayXd nbar = s.expected_counts(p.X.row(j));
        for (Eigen::Index i = 0; i < s.psi.rows(); ++i) EXPECT_NEAR(s.psi.row(i).sum(), 1.0, 1e-10);
        for (int k = 0; k < 4; ++k) {
            EXPECT_GE(s.nu[k], 0.0);
            EXPECT_LE(s.nu[k], 1.0);
            EXPECT_LE(s.L_tilde[k], nbar[k] + 1.0);
            if (nbar[k] > kUsageThreshold) {
                EXPECT_EQ(s.nu[k], 1.0);
            }
        }
    }
    p.g.validate();
}

TEST(Local, AblationSelectorsOn) {
    Problem p = make_problem(5, 6, 5, 3);
    InferenceOptions opts;
    opts.zero_inflation = false;
    p.sweep(opts, 2);
    for (const LocalState& s : p.L) EXPECT_TRUE((s.nu == 1.0).all());
}

TEST(Local, KernelOffIgnoresNetworks) {
    Problem a = make_problem(6, 8, 6, 3);
    Problem b = a;
    Rng rng(99);
    for (auto& w : b.g.encoder.weight) w = Matrix::Random(w.rows(), w.cols()) * 3.0;
    for (auto& w : b.g.decoder.weight) w = Matrix::Random(w.rows(), w.cols()) * 3.0;
    InferenceOptions opts;
    opts.kernel = false;
    a.sweep(opts, 3);
    b.sweep(opts, 3);
    for (std::size_t j = 0; j < a.L.size(); ++j) {
        EXPECT_TRUE((a.L[j].nu == b.L[j].nu).all());
        EXPECT_TRUE((a.L[j].theta1 == b.L[j].theta1).all());
    }
    EXPECT_TRUE((a.g.eta == b.g.eta).all());
    EXPECT_EQ(elbo(a.batch(), a.g, a.hp, a.X.rows(), opts), elbo(b.batch(), b.g, b.hp, b.X.rows(), opts));
}

TEST(Global, FullBatchPhiIsCoordinateTarget) {
    Problem p = make_problem(7, 6, 5, 3);
    p.sweep(frozen(), 2);
    global_phi_step(p.batch(), 1.0, 1.0, p.hp, p.g);
    for (int k = 0; k < 3; ++k) {
        for (int m = 0; m < 5; ++m) {
            double target = p.hp.eta0;
            for (std::size_t j = 0; j < p.X.rows(); ++j) {
                const SparseRow& r = p.X.row(j);
                for (std::size_t i = 0; i < r.size(); ++i)
                    if (static_cast<int>(r[i].col) == m) target += r[i].count * p.L[j].psi(i, k);
            }
            EXPECT_NEAR(p.g.eta(k, m), target, 1e-12);
        }
    }
}

TEST(Global, SelectorUsageUpdate) {
    HyperParams hp = small_hp(100);
    hp.alpha = 1.0;
    GlobalState g = init_global(hp, 3, 1);
    const CountMatrix X(3, {{}, {}, {}, {}, {}}, {"a", "b", "c", "d", "e"});
    std::vector<LocalState> L(5);
    const GlobalExpectations e = GlobalExpectations::compute(g);
    for (int j = 0; j < 5; ++j) {
        L[j] = init_local(X.row(j), g, e, hp, InferenceOptions{});
        L[j].nu.setZero();
        L[j].nu[0] = j < 3 ? 1.0 : 0.0;
    }
    Batch b{&X, {0, 1, 2, 3, 4}, {&L[0], &L[1], &L[2], &L[3], &L[4]}};
    global_pi_step(b, 1.0, 1.0, hp, InferenceOptions{}, g);
    EXPECT_NEAR(g.tau1[0], 3.01, 1e-12);
    EXPECT_NEAR(g.tau2[0], 2.99, 1e-12);
}

TEST(Global, HalfBatchesAverageToFullBatch) {
    Problem p = make_problem(8, 10, 6, 4);
    const InferenceOptions opts = frozen();
    p.sweep(opts, 2);
    const GlobalExpectations e = GlobalExpectations::compute(p.g);
    for (std::size_t j = 0; j < p.X.rows(); ++j) update_local(p.X.row(j), p.g, e, p.hp, opts, LocalSettings{}, p.L[j]);
    Batch full = p.batch();
    Batch h1{&p.X, {}, {}}, h2{&p.X, {}, {}};
    for (std::size_t j = 0; j < p.X.rows(); ++j) {
        Batch& h = j < 5 ? h1 : h2;
        h.index.push_back(j);
        h.locals.push_back(&p.L[j]);
    }
    auto step = [&](const Batch& b, double scale) {
        GlobalState g = p.g;
        global_phi_step(b, 1.0, scale, p.hp, g);
        global_pi_step(b, 1.0, scale, p.hp, opts, g);
        global_r_step(b, 1.0, scale, p.hp, opts, g);
        return g;
    };
    const GlobalState gf = step(full, 1.0), ga = step(h1, 2.0), gb = step(h2, 2.0);
    EXPECT_LT(((ga.eta + gb.eta) / 2 - gf.eta).abs().maxCoeff(), 1e-12);
    EXPECT_LT(((ga.tau1 + gb.tau1) / 2 - gf.tau1).abs().maxCoeff(), 1e-12);
    EXPECT_LT(((ga.tau2 + gb.tau2) / 2 - gf.tau2).abs().maxCoeff(), 1e-12);
    EXPECT_LT(((ga.r_shape + gb.r_shape) / 2 - gf.r_shape).abs().maxCoeff(), 1e-12);
    EXPECT_LT(((1 / ga.r_scale + 1 / gb.r_scale) / 2 - 1 / gf.r_scale).abs().maxCoeff(), 1e-12);
}

TEST(Global, StepSizeRange) {
    Problem p = make_problem(9, 4, 4, 2);
    p.sweep(frozen());
    EXPECT_THROW(update_global_closed(p.batch(), p.g, p.hp, 0.0, 4, frozen()), DomainError);
    EXPECT_THROW(update_global_closed(p.batch(), p.g, p.hp, 1.5, 4, frozen()), DomainError);
}

TEST(Global, ValidateRejectsBadState) {
    Problem p = make_problem(10, 3, 4, 2);
    p.g.eta(0, 0) = -1;
    EXPECT_THROW(p.g.validate(), NumericalError);
    Problem q = make_problem(10, 3, 4, 2);
    q.g.tau1[0] = std::nan("");
    EXPECT_THROW(q.g.validate(), NumericalError);
}

TEST(Schedule, StepSizes) {
    Schedule s;
    s.tau0 = 1.0;
    s.kappa = 0.7;
    EXPECT_NEAR(s.rho(0), 1.0, 1e-15);
    EXPECT_NEAR(s.rho(3), std::pow(4.0, -0.7), 1e-15);
    s.kappa = 0.5;
    EXPECT_THROW(s.validate(), ConfigError);
    s.kappa = 1.0;
    s.tau0 = -1;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Gradients, VanishAtSelectorMean) {
    Problem p = make_problem(11, 5, 4, 3);
    p.hp.a = 1e300;
    p.hp.b = 1e300;
    const CountMatrix X(4, {{}, {}, {}, {}, {}}, {"a", "b", "c", "d", "e"});
    std::vector<LocalState> L(5);
    const InferenceOptions opts;
    const GlobalExpectations e = GlobalExpectations::compute(p.g);
    Batch b{&X, {}, {}};
    for (int j = 0; j < 5; ++j) {
        L[j] = init_local(X.row(j), p.g, e, p.hp, opts);
        compute_kernel(X.row(j), p.g, opts, nullptr, L[j]);
        for (int k = 0; k < 3; ++k) L[j].nu[k] = special::sigmoid(e.elogit_pi[k] + L[j].kernel[k]);
        b.index.push_back(j);
        b.locals.push_back(&L[j]);
    }
    const GradientSet g = compute_gradients(b, p.g, e, p.hp, 5, opts);
    double worst = g.l.cwiseAbs().maxCoeff();
    for (const auto& w : g.encoder.weight) worst = std::max(worst, w.cwiseAbs().maxCoeff());
    for (const auto& w : g.decoder.weight) worst = std::max(worst, w.cwiseAbs().maxCoeff());
    for (const auto& w : g.decoder.bias) worst = std::max(worst, w.cwiseAbs().maxCoeff());
    EXPECT_LT(worst, 1e-12);
}

TEST(Gradients, Gamma0FiniteDifference) {
    Problem p = make_problem(12, 8, 5, 3);
    p.sweep(frozen(), 3);
    const Batch b = p.batch();
    const GlobalExpectations e = GlobalExpectations::compute(p.g);
    const Eigen::ArrayXd sums = table_sums(b, 8);
    const Eigen::ArrayXd lp = crt_l_prime(sums, p.g.gamma0);
    for (double g0 : {0.2, 1.0, 4.0}) {
        const double h = 1e-5, lg = std::log(g0);
        const double num =
            (gamma0_objective(std::exp(lg + h), sums, lp, e, p.hp) - gamma0_objective(std::exp(lg - h), sums, lp, e, p.hp)) /
            (2 * h);
        const double ana = gamma0_log_gradient(g0, sums, lp, e, p.hp);
        EXPECT_LT(std::abs(num - ana) / std::max(std::abs(ana), 1e-6), 1e-4) << g0;
    }
}

TEST(Objective, OneByOneByHand) {
    HyperParams hp = small_hp(1);
    GlobalState g = init_global(hp, 1, 3);
    const CountMatrix X(1, {{{0, 4}}}, {"a"});
    std::vector<LocalState> L(1);
    InferenceOptions opts = frozen();
    opts.kernel = false;
    Batch b{&X, {0}, {&L[0]}};
    for (int i = 0; i < 3; ++i) {
        const GlobalExpectations e = GlobalExpectations::compute(g);
        update_local(X.row(0), g, e, hp, opts, LocalSettings{}, L[0]);
        update_global_closed(b, g, hp, 1.0, 1, opts);
    }
    const GlobalExpectations e = GlobalExpectations::compute(g);
    update_local(X.row(0), g, e, hp, opts, LocalSettings{}, L[0]);
    const LocalState& s = L[0];
    using boost::math::digamma;
    const double n = 4;
    const double Er = g.r_shape[0] * g.r_scale[0];
    const double Elnr = digamma(g.r_shape[0]) + std::log(g.r_scale[0]);
    const double t1 = g.tau1[0], t2 = g.tau2[0];
    const double Elnpi = digamma(t1) - digamma(t1 + t2), Eln1mpi = digamma(t2) - digamma(t1 + t2);
    const double a = s.a_tilde, bb = s.b_tilde;
    const double Elnp = digamma(a) - digamma(a + bb), Eln1p = digamma(bb) - digamma(a + bb);
    const double th = s.theta1[0], s0 = s.s0[0], Lt = s.L_tilde[0];
    // With one feature every token sits on the only factor and feature.
    double F = 0;
    F += n * digamma(th);
    F += (s0 - 1) * digamma(th) - th - std::lgamma(s0) + gamma_entropy(th, 1.0);
    F += Lt * (Elnr - std::log(s0));
    F += -(std::lgamma(hp.a0) + std::lgamma(hp.b0) - std::lgamma(hp.a0 + hp.b0)) + (hp.a0 - 1) * Elnp +
         (hp.b0 - 1) * Eln1p + beta_entropy(a, bb);
    F += n * Elnp + Er * Eln1p;  // nu = 1: the factor holds the tokens
    F += Elnpi;                 // nu ln pi; the anchor term vanishes without a kernel
    const double pa = hp.alpha, pb = hp.alpha;
    F += -(std::lgamma(pa) + std::lgamma(pb) - std::lgamma(pa + pb)) + (pa - 1) * Elnpi + (pb - 1) * Eln1mpi +
         beta_entropy(t1, t2);
    F += gamma_entropy(g.r_shape[0], g.r_scale[0]);
    const double g0 = g.gamma0;
    const double lprime = crt_mean(static_cast<std::uint64_t>(std::llround(Lt)), g0);
    F += (hp.e0 - 1) * std::log(g0) - hp.f0 * g0 + hp.e0 * std::log(hp.f0) - std::lgamma(hp.e0);
    F += g0 * std::log(hp.alpha) - std::lgamma(g0) + (g0 - 1) * Elnr - hp.alpha * Er;
    F += lprime * std::log(g0) + std::lgamma(g0) - std::lgamma(g0 + Lt);
    const double l2 = g.l.squaredNorm();
    F += -0.5 * l2 / hp.b - 0.5 * static_cast<double>(g.l.size()) * std::log(2 * M_PI * hp.b);
    EXPECT_EQ(s.nu[0], 1.0);
    EXPECT_NEAR(elbo(b, g, hp, 1, opts), F, 1e-10 * std::abs(F));
}

TEST(Objective, FactorPermutationInvariance) {
    Problem p = make_problem(13, 7, 6, 4);
    const InferenceOptions opts;
    p.sweep(opts, 3);
    const GlobalExpectations e = GlobalExpectations::compute(p.g);
    for (std::size_t j = 0; j < p.X.rows(); ++j) compute_kernel(p.X.row(j), p.g, opts, nullptr, p.L[j]);
    const double before = elbo(p.batch(), p.g, p.hp, p.X.rows(), opts);
    const std::vector<int> perm{2, 0, 3, 1};
    Problem q = p;
    q.L = p.L;
    for (int k = 0; k < 4; ++k) {
        const int s = perm[k];
        q.g.eta.row(k) = p.g.eta.row(s);
        q.g.tau1[k] = p.g.tau1[s];
        q.g.tau2[k] = p.g.tau2[s];
        q.g.r_shape[k] = p.g.r_shape[s];
        q.g.r_scale[k] = p.g.r_scale[s];
        q.g.l.row(k) = p.g.l.row(s);
        q.g.anchor_logit[k] = p.g.anchor_logit[s];
        for (std::size_t j = 0; j < p.L.size(); ++j) {
            LocalState& t = q.L[j];
            const LocalState& o = p.L[j];
            t.psi.col(k) = o.psi.col(s);
            t.theta1[k] = o.theta1[s];
            t.nu[k] = o.nu[s];
            t.L_tilde[k] = o.L_tilde[s];
            t.s0[k] = o.s0[s];
            t.kernel[k] = o.kernel[s];
        }
    }
    EXPECT_NEAR(elbo(q.batch(), q.g, q.hp, q.X.rows(), opts), before, 1e-9 * std::abs(before));
}

TEST(Objective, FrozenSweepsAreMonotone) {
    Problem p = make_problem(14, 15, 10, 4);
    const InferenceOptions opts = frozen();
    p.sweep(opts);
    double prev = elbo(p.batch(), p.g, p.hp, p.X.rows(), opts);
    for (int i = 0; i < 30; ++i) {
        p.sweep(opts);
        const double cur = elbo(p.batch(), p.g, p.hp, p.X.rows(), opts);
        EXPECT_GE(cur, prev - 1e-8) << i;
        prev = cur;
    }
}

namespace {

FitSettings tiny_fit(int epochs) {
    FitSettings fs;
    fs.hp = small_hp(5);
    fs.schedule.max_epochs = epochs;
    fs.schedule.tolerance = 0;
    fs.schedule.patience = 1000;
    fs.schedule.batch_size = 10;
    fs.seed = 3;
    return fs;
}

CountMatrix planted(std::uint64_t seed) {
    SynthConfig sc;
    sc.J = 40;
    sc.M = 20;
    sc.hp = small_hp(3);
    sc.planted = PlantedConfig{};
    sc.planted->K_star = 3;
    sc.planted->target_mean_tml = 20;
    sc.seed = seed;
    return sample_corpus(sc).corpus.counts;
}

}  // namespace

TEST(Fit, TraceAndDeterminism) {
    const CountMatrix X = planted(1);
    const FitSettings fs = tiny_fit(6);
    const FitResult a = fit(X, fs), b = fit(X, fs);
    ASSERT_EQ(a.trace.size(), 6u);
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        EXPECT_EQ(a.trace[i].epoch, static_cast<int>(i) + 1);
        EXPECT_EQ(a.trace[i].elbo, b.trace[i].elbo);
        EXPECT_TRUE(std::isnan(a.trace[i].val_perplexity));
    }
    EXPECT_EQ(a.locals.size(), X.rows());
    a.global.validate();
}

TEST(Fit, WorkerCountDoesNotChangeResults) {
    const CountMatrix X = planted(2);
    FitSettings f1 = tiny_fit(4), f2 = tiny_fit(4);
    f2.opts.threads = 3;
    const FitResult a = fit(X, f1), b = fit(X, f2);
    for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].elbo, b.trace[i].elbo);
}

TEST(Fit, ValidationAndCallback) {
    const CountMatrix X = planted(3);
    const HeldoutSplit split = split_heldout(X, 0.5, 4, 0.25);
    FitSettings fs = tiny_fit(3);
    fs.validation = Validation{&split.test_observed, &split.test_target};
    int calls = 0;
    fs.on_epoch = [&](const TraceRow& r) {
        ++calls;
        EXPECT_GT(r.val_perplexity, 1.0);
    };
    const FitResult res = fit(split.train, fs);
    EXPECT_EQ(calls, 3);
}

TEST(Fit, CaviTraceMonotone) {
    const CountMatrix X = planted(4);
    FitSettings fs = tiny_fit(20);
    fs.cavi = true;
    const FitResult res = fit(X, fs);
    for (std::size_t i = 1; i < res.trace.size(); ++i) EXPECT_GE(res.trace[i].elbo, res.trace[i - 1].elbo - 1e-8);
}

TEST(Moves, PruneAndDeleteNeverLowerObjective) {
    const CountMatrix X = planted(5);
    FitSettings fs = tiny_fit(5);
    fs.hp.K = 8;
    fs.opts.prune = false;
    fs.opts.delete_every = 0;
    FitResult res = fit(X, fs);
    InferenceOptions opts = fs.opts;
    auto F = [&] {
        Batch b{&X, {}, {}};
        for (std::size_t j = 0; j < X.rows(); ++j) {
            b.index.push_back(j);
            b.locals.push_back(&res.locals[j]);
        }
        return elbo(b, res.global, fs.hp, X.rows(), opts);
    };
    const double f0 = F();
    prune_factors(X, res.locals, res.global, fs.hp, opts);
    const double f1 = F();
    EXPECT_GE(f1, f0 - 1e-9);
    delete_factors(X, res.locals, res.global, fs.hp, opts, LocalSettings{});
    EXPECT_GE(F(), f1 - 1e-9);
    res.global.validate();
}

TEST(Infer, HeldOutLocals) {
    const CountMatrix X = planted(6);
    const FitResult res = fit(X, tiny_fit(4));
    const std::vector<LocalState> L = infer_locals(X, res.global, tiny_fit(4).hp, InferenceOptions{}, LocalSettings{});
    ASSERT_EQ(L.size(), X.rows());
    for (std::size_t j = 0; j < X.rows(); ++j) {
        L[j].validate(X.row(j));
        const Eigen::ArrayXd nbar = L[j].expected_counts(X.row(j));
        for (int k = 0; k < 5; ++k)
            if (nbar[k] > kUsageThreshold) {
                EXPECT_EQ(L[j].nu[k], 1.0);
            }
    }
}
