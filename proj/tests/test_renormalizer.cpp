#include "doctest.h"

#include <cmath>
#include <random>

#include "rfs/renormalizer.hpp"

using namespace rfs;

namespace {

ModelSpec white_rf(std::size_t d, std::size_t n, std::size_t p, double lambda) {
    ModelSpec m{Spectrum::isotropic(d), IsotropicAverageTeacher{}, {FeatureLayer::white(n)}};
    m.samples = p;
    m.ridge = lambda;
    return m;
}

Spectrum random_spectrum(std::mt19937_64& rng, std::size_t d) {
    std::uniform_real_distribution<double> u(-2.0, 1.0);
    std::vector<double> vals;
    for (std::size_t i = 0; i < d; ++i) vals.push_back(std::pow(10.0, u(rng)));
    return Spectrum::discrete(vals, std::vector<std::size_t>(d, 1));
}

// Plain bisection on a decreasing function.
template <class F>
double bisect_decreasing(F f, double lo, double hi) {
    for (int i = 0; i < 400; ++i) {
        double mid = 0.5 * (lo + hi);
        (f(mid) > 0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace

TEST_CASE("solve_kappa_lr examples") {
    auto iso = Spectrum::isotropic(200);
    auto over = solve_kappa_lr(iso, 200, 100, 0.0);
    CHECK(over.kappa == doctest::Approx(1.0).epsilon(1e-13));
    CHECK(over.gamma == doctest::Approx(2.0 * 0.25).epsilon(1e-13));
    auto golden = solve_kappa_lr(iso, 200, 200, 1.0);
    CHECK(golden.kappa == doctest::Approx((1 + std::sqrt(5.0)) / 2).epsilon(1e-13));
    auto under = solve_kappa_lr(iso, 100, 200, 0.0);
    CHECK(under.kappa == 0.0);
    CHECK(under.gamma == 0.5);
    CHECK_THROWS_AS(solve_kappa_lr(iso, 200, 200, 0.0), SingularRegimeError);
    // Small ridge approaches the pole value continuously.
    CHECK(solve_kappa_lr(iso, 200, 100, 1e-10).kappa == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("isotropic quadratic for general load") {
    // kappa (1 - q/(1+kappa)) = lambda  <=>  kappa^2 + (1 - q - lambda) kappa - lambda = 0
    auto iso = Spectrum::isotropic(50);
    for (double q : {0.3, 1.0, 2.5}) {
        for (double lambda : {1e-3, 0.2, 4.0}) {
            double b = 1 - q - lambda;
            double oracle = (-b + std::sqrt(b * b + 4 * lambda)) / 2;
            auto sol = solve_kappa_lr(iso, 50, 50 / q, lambda);
            CHECK(sol.kappa == doctest::Approx(oracle).epsilon(1e-12));
        }
    }
}

TEST_CASE("infinite power law solves through traces") {
    auto pl = Spectrum::power_law(1.5, std::nullopt);
    double p = 100;
    auto sol = solve_kappa_lr(pl, p, 0.0);
    CHECK(df1_trace(pl, sol.kappa) == doctest::Approx(p).epsilon(1e-12));
    auto reg = solve_kappa_lr(pl, p, 1e-3);
    CHECK(reg.kappa * (1 - df1_trace(pl, reg.kappa) / p) == doctest::Approx(1e-3).epsilon(1e-10));
    CHECK(reg.kappa > sol.kappa);
}

TEST_CASE("white random features ridgeless examples") {
    auto over = solve_lrf(white_rf(1000, 200, 100, 0.0));
    CHECK(over.regime == Regime::Overparameterized);
    CHECK(over.kappa2 == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(over.df1 == doctest::Approx(0.1).epsilon(1e-12));
    auto bottle = solve_lrf(white_rf(1000, 100, 200, 0.0));
    CHECK(bottle.regime == Regime::Bottlenecked);
    REQUIRE(bottle.bottleneck_layer.has_value());
    CHECK(*bottle.bottleneck_layer == 0);
    CHECK(bottle.kappa2 == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(bottle.kappa1 == 0.0);
    CHECK(bottle.dlog_ratio == 0.0);
    auto under = solve_lrf(white_rf(100, 500, 1000, 0.0));
    CHECK(under.regime == Regime::Underparameterized);
    CHECK(under.kappa2 == 0.0);
    CHECK(under.gamma1 == doctest::Approx(0.1));
}

TEST_CASE("ridgeless regime taxonomy") {
    CHECK(ridgeless_regime(white_rf(100, 500, 1000, 0)).first == Regime::Underparameterized);
    CHECK(ridgeless_regime(white_rf(1000, 100, 200, 0)).first == Regime::Bottlenecked);
    CHECK(ridgeless_regime(white_rf(1000, 200, 100, 0)).first == Regime::Overparameterized);
    CHECK_THROWS_AS(ridgeless_regime(white_rf(1000, 200, 200, 0)), SingularRegimeError);
    CHECK_THROWS_AS(ridgeless_regime(white_rf(200, 500, 200, 0)), SingularRegimeError);
    CHECK_THROWS_AS(solve_lrf(white_rf(1000, 200, 200, 0)), SingularRegimeError);
    // D and N tied below P: full rank, no collision with P.
    CHECK(ridgeless_regime(white_rf(200, 200, 500, 0)).first == Regime::Underparameterized);
    ModelSpec deep{Spectrum::isotropic(500), IsotropicAverageTeacher{},
                   {FeatureLayer::white(400), FeatureLayer::white(150), FeatureLayer::white(300)}};
    deep.samples = 250;
    auto [regime, layer] = ridgeless_regime(deep);
    CHECK(regime == Regime::Bottlenecked);
    REQUIRE(layer.has_value());
    CHECK(*layer == 1);
}

TEST_CASE("configuration errors") {
    ModelSpec m{Spectrum::isotropic(100), IsotropicAverageTeacher{}, {FeatureLayer::projection(150)}};
    m.samples = 50;
    m.ridge = 0.1;
    CHECK_THROWS_AS(solve_lrf(m), ConfigError);
    m.layers = {FeatureLayer::structured(80, Spectrum::isotropic(70))};
    CHECK_THROWS_AS(solve_lrf(m), ConfigError);
    m.layers = {FeatureLayer::white(80), FeatureLayer::white(60)};
    m.feature_noise_var = 0.1;
    CHECK_THROWS_AS(solve_lrf(m), ConfigError);
    m.layers = {FeatureLayer::white(80)};
    m.feature_noise_var = 0.0;
    CHECK_THROWS_AS(solve_nlrf(m), ConfigError);
    m.ridge = -1;
    CHECK_THROWS_AS(solve_lrf(m), ConfigError);
}

TEST_CASE("empty layer list reduces to plain ridge regression") {
    std::mt19937_64 rng(11);
    auto s = random_spectrum(rng, 60);
    for (double lambda : {0.0, 1e-4, 0.3}) {
        for (std::size_t p : {30, 90}) {
            ModelSpec m{s, IsotropicAverageTeacher{}, {}};
            m.samples = p;
            m.ridge = lambda;
            auto st = solve_lrf(m);
            auto lr = solve_kappa_lr(s, 60, double(p), lambda);
            CHECK(st.kappa2 == doctest::Approx(lr.kappa).epsilon(1e-12));
            CHECK(st.kappa1 == doctest::Approx(lr.kappa).epsilon(1e-12));
            CHECK(st.gamma2 == doctest::Approx(lr.gamma).epsilon(1e-12));
            CHECK(st.dlog_ratio == 1.0);
        }
    }
}

TEST_CASE("white layer at finite ridge satisfies the scalar equations") {
    // Independent check of the single white layer: with x = df1(kappa2),
    // kappa1 = kappa2 (N/D - x) and lambda = kappa1 (1 - (D/P) x).
    std::mt19937_64 rng(5);
    auto s = random_spectrum(rng, 80);
    ModelSpec m{s, IsotropicAverageTeacher{}, {FeatureLayer::white(50)}};
    m.samples = 120;
    m.ridge = 0.05;
    auto st = solve_lrf(m);
    double x = df1(s, st.kappa2);
    CHECK(st.kappa1 == doctest::Approx(st.kappa2 * (50.0 / 80.0 - x)).epsilon(1e-10));
    CHECK(st.kappa1 * (1 - 80.0 / 120.0 * x) == doctest::Approx(0.05).epsilon(1e-10));
    // d log kappa1 / d log kappa2 by finite differences of the same relations.
    auto k1_of = [&](double k2) { return k2 * (50.0 / 80.0 - df1(s, k2)); };
    double h = 1e-5;
    double slope = (std::log(k1_of(st.kappa2 * (1 + h))) - std::log(k1_of(st.kappa2 * (1 - h)))) /
                   (std::log1p(h) - std::log1p(-h));
    CHECK(st.dlog_ratio == doctest::Approx(1 / slope).epsilon(1e-6));
}

TEST_CASE("identity structured layers and full-width projections") {
    std::mt19937_64 rng(8);
    auto s = random_spectrum(rng, 100);
    for (double lambda : {0.0, 0.02}) {
        ModelSpec white{s, IsotropicAverageTeacher{}, {FeatureLayer::white(150), FeatureLayer::white(70)}};
        white.samples = 200;
        white.ridge = lambda;
        ModelSpec structured = white;
        structured.layers = {FeatureLayer::structured(150, Spectrum::isotropic(150)),
                             FeatureLayer::structured(70, Spectrum::isotropic(70))};
        auto a = solve_lrf(white);
        auto b = solve_lrf(structured);
        CHECK(a.kappa2 == doctest::Approx(b.kappa2).epsilon(1e-10));
        CHECK(a.kappa1 == doctest::Approx(b.kappa1).epsilon(1e-9).scale(1e-12));
        CHECK(a.gamma1 == doctest::Approx(b.gamma1).epsilon(1e-9));
        CHECK(a.dlog_ratio == doctest::Approx(b.dlog_ratio).epsilon(1e-9).scale(1e-12));
        for (std::size_t l = 0; l < 2; ++l) {
            CHECK(a.kappa_per_layer[l] == doctest::Approx(b.kappa_per_layer[l]).epsilon(1e-9));
            CHECK(a.gamma_per_layer[l] == doctest::Approx(b.gamma_per_layer[l]).epsilon(1e-9));
        }
    }
    // A square projection is an orthogonal rotation and leaves plain regression unchanged.
    ModelSpec rot{s, IsotropicAverageTeacher{}, {FeatureLayer::projection(100)}};
    rot.samples = 60;
    rot.ridge = 0.1;
    auto r = solve_lrf(rot);
    auto lr = solve_kappa_lr(s, 100, 60, 0.1);
    CHECK(r.kappa2 == doctest::Approx(lr.kappa).epsilon(1e-11));
    CHECK(r.kappa1 == doctest::Approx(lr.kappa).epsilon(1e-11));
}

TEST_CASE("renormalized ridges are ordered on random models") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> width(20, 300);
    std::uniform_int_distribution<int> kinds(0, 2), depth(1, 3);
    std::uniform_real_distribution<double> loglam(-6, 1);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t d = width(rng);
        ModelSpec m{random_spectrum(rng, d), IsotropicAverageTeacher{}, {}};
        std::size_t in = d;
        for (int l = depth(rng); l > 0; --l) {
            std::size_t n = width(rng);
            int k = kinds(rng);
            if (k == 2 && n <= in)
                m.layers.push_back(FeatureLayer::projection(n));
            else if (k == 1)
                m.layers.push_back(FeatureLayer::structured(n, random_spectrum(rng, n)));
            else
                m.layers.push_back(FeatureLayer::white(n));
            in = n;
        }
        m.samples = width(rng);
        m.ridge = std::pow(10.0, loglam(rng));
        auto st = solve_lrf(m);
        // S_{FF^T}(-x) >= S_{FF^T}(0): kappa2 / kappa1 is at least the small-df limit
        // prod in / (out * mean eigenvalue of the layer covariance).
        double floor = 1;
        std::size_t fan_in = d;
        for (const auto& layer : m.layers) {
            double mean = layer.weight_spectrum ? layer.weight_spectrum->mean_eigenvalue() : 1.0;
            floor *= double(fan_in) / (double(layer.width) * mean);
            fan_in = layer.width;
        }
        CHECK(st.kappa2 >= floor * st.kappa1 * (1 - 1e-10));
        CHECK(st.kappa1 >= m.ridge * (1 - 1e-12));
        CHECK(st.dlog_ratio >= 0.0);
        CHECK(st.dlog_ratio <= 1.0 + 1e-12);
        CHECK(st.gamma1 < 1.0);
        CHECK(st.gamma2 <= st.gamma1 + 1e-12);
        // The residual changes sign exactly once across the root.
        auto probe = [&](double k2) {
            ModelSpec q = m;
            double x = df1(m.covariates, k2);
            auto chain = detail::eval_chain(q, x);
            return k2 * chain.inv_s * (1 - double(d) / double(m.samples) * x) - m.ridge;
        };
        CHECK(probe(st.kappa2 * (1 + 1e-6)) > 0);
        double below = probe(st.kappa2 * (1 - 1e-6));
        CHECK(below < 0);
    }
}

TEST_CASE("continuity of finite-ridge solves at small ridge") {
    for (auto [d, n, p] : {std::tuple{1000, 200, 100}, std::tuple{1000, 100, 200}, std::tuple{100, 500, 1000}}) {
        auto exact = solve_lrf(white_rf(d, n, p, 0.0));
        auto near = solve_lrf(white_rf(d, n, p, 1e-10));
        // Relative 1e-4, with an absolute floor where the ridgeless value is exactly zero.
        CHECK(std::abs(near.kappa2 - exact.kappa2) <= 1e-4 * exact.kappa2 + 1e-8);
        CHECK(std::abs(near.kappa1 - exact.kappa1) <= 1e-4 * exact.kappa1 + 1e-8);
        CHECK(near.gamma1 == doctest::Approx(exact.gamma1).epsilon(1e-4));
        CHECK(near.gamma2 == doctest::Approx(exact.gamma2).epsilon(1e-4));
    }
}

TEST_CASE("nonlinear features: isotropic quadratic and limits") {
    // D = 200, psi = 0.5, sigma_xi^2 = 0.5: psi k^2 + (psi - 1 - s) k - s = 0.
    for (auto [n, p] : {std::pair{100, 400}, std::pair{400, 100}}) {
        ModelSpec m = white_rf(200, n, p, 0.0);
        m.feature_noise_var = 0.5;
        auto st = solve_nlrf(m);
        CHECK(st.kappa2 == doctest::Approx(1 + std::sqrt(2.0)).epsilon(1e-10));
        CHECK(st.dfbar1 == doctest::Approx(0.5).epsilon(1e-12));
    }
    {
        ModelSpec m = white_rf(200, 100, 400, 0.0);
        m.feature_noise_var = 0.5;
        CHECK(solve_nlrf(m).regime == Regime::Underparameterized);
        CHECK(solve_nlrf(m).kappa1 == 0.0);
        m.samples = 100;
        CHECK_THROWS_AS(solve_nlrf(m), SingularRegimeError);
    }
    // psi -> 1: df1 + s/k = 1 has an independent bisection solution.
    ModelSpec full = white_rf(200, 200, 400, 0.0);
    full.feature_noise_var = 0.5;
    auto st = solve_nlrf(full);
    double oracle = bisect_decreasing([](double k) { return 1 / (1 + k) + 0.5 / k - 1; }, 1e-6, 100);
    CHECK(st.kappa2 == doctest::Approx(oracle).epsilon(1e-10));
    CHECK(st.dfbar1 == doctest::Approx(1.0).epsilon(1e-12));
    // Vanishing feature noise approaches the linear random-feature solution.
    std::mt19937_64 rng(3);
    auto s = random_spectrum(rng, 150);
    for (double lambda : {0.0, 0.01}) {
        for (auto [n, p] : {std::pair{60, 100}, std::pair{120, 80}}) {
            ModelSpec m{s, IsotropicAverageTeacher{}, {FeatureLayer::white(std::size_t(n))}};
            m.samples = std::size_t(p);
            m.ridge = lambda;
            auto lin = solve_lrf(m);
            m.feature_noise_var = 1e-16;
            auto nl = solve_nlrf(m);
            CHECK(nl.kappa2 == doctest::Approx(lin.kappa2).epsilon(1e-10));
            CHECK(nl.gamma1 == doctest::Approx(lin.gamma1).epsilon(1e-10));
            CHECK(nl.gamma2 == doctest::Approx(lin.gamma2).epsilon(1e-10));
        }
    }
}

TEST_CASE("nonlinear features at finite ridge satisfy the scalar equations") {
    std::mt19937_64 rng(17);
    auto s = random_spectrum(rng, 120);
    ModelSpec m{s, IsotropicAverageTeacher{}, {FeatureLayer::white(90)}};
    m.samples = 150;
    m.ridge = 0.03;
    m.feature_noise_var = 0.2;
    auto st = solve_nlrf(m);
    double x = df1(s, st.kappa2) + 0.2 / st.kappa2;
    CHECK(st.dfbar1 == doctest::Approx(x).epsilon(1e-14));
    CHECK(st.kappa1 == doctest::Approx(st.kappa2 * (90.0 / 120.0 - x)).epsilon(1e-10));
    CHECK(st.kappa1 * (1 - 120.0 / 150.0 * x) == doctest::Approx(0.03).epsilon(1e-10));
    CHECK(st.kappa2 >= st.kappa1);
    CHECK(st.kappa1 >= m.ridge);
}

TEST_CASE("feature noise acts as a flat plateau of many small eigenvalues") {
    // Sigma (+) (sigma_xi^2 D / M) I_M, M -> infinity, ridgeless plain regression
    // against the nonlinear model with P < N.
    auto base = Spectrum::discrete({2.0, 1.0, 0.3}, {20, 30, 50});
    double noise = 0.25;
    std::size_t d = 100, extra = 10000, p = 40;
    auto plateau = Spectrum::plateaus({2.0, 1.0, 0.3, noise * double(d) / double(extra)}, {20, 30, 50, extra});
    auto lr = solve_kappa_lr(plateau, double(p), 0.0);
    ModelSpec m{base, IsotropicAverageTeacher{}, {FeatureLayer::white(70)}};
    m.samples = p;
    m.feature_noise_var = noise;
    auto nl = solve_nlrf(m);
    CHECK(lr.kappa == doctest::Approx(nl.kappa2).epsilon(1e-3));
}
