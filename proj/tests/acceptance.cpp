#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rfs/free_transforms.hpp"
#include "rfs/montecarlo.hpp"
#include "rfs/renormalizer.hpp"
#include "rfs/risk.hpp"
#include "rfs/scaling.hpp"
#include "rfs/spectrum.hpp"

using namespace rfs;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

ModelSpec plain(Spectrum s, std::size_t p, double lambda, double noise = 0) {
    ModelSpec m{std::move(s), IsotropicAverageTeacher{}, {}};
    m.samples = p;
    m.ridge = lambda;
    m.label_noise_var = noise;
    return m;
}

ModelSpec white_rf(std::size_t d, std::size_t n, std::size_t p, double lambda, double noise = 0) {
    ModelSpec m = plain(Spectrum::isotropic(d), p, lambda, noise);
    m.layers = {FeatureLayer::white(n)};
    return m;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

// Printed piecewise ridgeless error of the isotropic one-layer white model.
double white_rf_closed_form(double d, double n, double p, double noise) {
    if (p > d && n > d) return d / p / (1 - d / p) * noise;
    if (n < std::min(p, d)) return (1 - n / d) / (1 - n / p) + n / p / (1 - n / p) * noise;
    return (1 - p / d) * (1 + p / n / (1 - p / n)) + (p / d / (1 - p / d) + p / n / (1 - p / n)) * noise;
}

Spectrum random_spectrum(std::mt19937_64& rng, std::size_t d) {
    std::uniform_real_distribution<double> u(-2.0, 1.0);
    std::vector<double> vals;
    for (std::size_t i = 0; i < d; ++i) vals.push_back(std::pow(10.0, u(rng)));
    return Spectrum::discrete(vals, std::vector<std::size_t>(d, 1));
}

McPlan plan_for(ModelSpec m, std::size_t rows, std::size_t cols, std::uint64_t seed) {
    McPlan plan{std::move(m)};
    plan.n_data_seeds = rows;
    plan.n_feature_seeds = cols;
    plan.n_test = 16;
    plan.base_seed = seed;
    return plan;
}

const std::vector<double> kSweep{50, 100, 200, 300, 400, 600, 800, 1000, 2000, 3000, 5000};

Outcome closed_form_table() {
    double worst = 0;
    int points = 0;
    for (double d : {100.0, 400.0})
        for (double n : {50.0, 150.0, 300.0, 800.0})
            for (double p : {60.0, 200.0, 700.0}) {
                if (p == d || p == n || n == d) continue;
                for (double noise : {0.0, 0.3}) {
                    auto m = white_rf(std::size_t(d), std::size_t(n), std::size_t(p), 0.0, noise);
                    auto r = lrf_risk(m, solve_lrf(m));
                    double expect = white_rf_closed_form(d, n, p, noise);
                    worst = std::max(worst, expect == 0 ? std::abs(r.e_g) : rel(r.e_g, expect));
                    ++points;
                }
            }
    return {points >= 20 && worst <= 1e-10, fmt("%d lattice points, max rel err %.2e", points, worst)};
}

Outcome isotropic_lr_mc() {
    double worst = 0;
    for (double p : kSweep) {
        auto m = plain(Spectrum::isotropic(500), std::size_t(p), 1e-3, 0.25);
        auto res = simulate(plan_for(m, 20, 1, 101));
        worst = std::max(worst, rel(res.e_g.mean, lr_risk(m).e_g));
    }
    return {worst <= 0.05, fmt("%zu P values, max rel err %.4f", kSweep.size(), worst)};
}

Outcome deterministic_equivalence() {
    double worst = 0;
    std::vector<Spectrum> spectra{Spectrum::isotropic(500), Spectrum::power_law(1.2, 500)};
    std::size_t seed = 0;
    for (const auto& s : spectra)
        for (double p : {250.0, 1000.0, 3000.0}) {
            auto m = plain(s, std::size_t(p), 1e-3);
            auto fit = sample_and_fit(m, seed++, 0, {202, 1, nullptr});
            auto sol = solve_kappa_lr(s, 500, p, 1e-3);
            worst = std::max(worst, rel(fit.df1_hat, df1(s, sol.kappa)));
        }
    return {worst <= 0.02, fmt("isotropic and power law, 3 P each, max rel err %.4f", worst)};
}

Outcome gcv_kare() {
    double worst = 0, worst_z = 0;
    for (double p : kSweep) {
        auto m = plain(Spectrum::isotropic(500), std::size_t(p), 1e-3, 0.25);
        auto res = simulate(plan_for(m, 20, 1, 101));
        double target = lr_risk(m).e_g + 0.25;
        worst = std::max(worst, rel(res.gcv_hat.mean, target));
        worst_z = std::max(worst_z, std::abs(res.gcv_hat.mean - target) / res.gcv_hat.se);
    }
    return {worst <= 0.05, fmt("%zu P values, max rel err %.4f, max |z| %.2f", kSweep.size(), worst, worst_z)};
}

Outcome marchenko_pastur() {
    double worst = 0, zero_frac = 0;
    for (double q : {0.25, 0.5, 2.0}) {
        EnsembleTransform e{WhiteWishart{q}};
        auto eigs = empirical_spectrum(e, 1000, 303);
        worst = std::max(worst, cdf_sup_distance(eigs, e));
        if (q == 2.0) zero_frac = double(std::count(eigs.begin(), eigs.end(), 0.0)) / double(eigs.size());
    }
    return {worst < 0.02 && zero_frac == 0.5, fmt("max sup distance %.4f, q=2 zero fraction %.4f", worst, zero_frac)};
}

Outcome deep_wishart() {
    EnsembleTransform e{DeepWhiteWishart{{6000, 1000, 200}}};
    auto eigs = empirical_spectrum(e, 0, 404);
    double dist = cdf_sup_distance(eigs, e);
    return {dist < 0.03, fmt("widths 6000/1000/200, sup distance %.4f", dist)};
}

Outcome scaling_exponents() {
    auto grid = log_grid(1e4, 1e5, 8);
    double worst = 0;
    for (double r : {0.5, 1.5}) {
        ScalingInputs in{1.5, r, kRidgeless, 1, 1, 0};
        auto fit = fit_power_law(grid, lr_theory_curve(in, grid));
        worst = std::max(worst, std::abs(fit.exponent + 2 * 1.5 * std::min(r, 1.0)));
    }
    auto k = kappa_scaling_check(Spectrum::power_law(1.5, std::nullopt), grid);
    double kerr = std::abs(k.kappa_exponent + 1.5);
    return {worst <= 0.15 && kerr <= 0.1, fmt("E_g exponent err %.4f, kappa exponent err %.4f", worst, kerr)};
}

Outcome variance_crossover() {
    ModelSpec m{Spectrum::power_law(1.5, 20000), SourcePowerLawTeacher{1.0}, {FeatureLayer::white(4000)}};
    ScalingInputs in{1.5, 1.0, kRidgeless, 1, 1, 0};
    double pf = *crossover_pf(4000, in);
    double switch_p = 0;
    for (std::size_t p = 2; p < 4000; ++p) {
        m.samples = p;
        auto r = lrf_risk(m, solve_lrf(m));
        if (r.var_f + r.var_xf > r.bias2 + r.var_x) {
            switch_p = double(p);
            break;
        }
    }
    double ratio = switch_p > 0 ? std::max(switch_p / pf, pf / switch_p) : INFINITY;
    return {ratio <= 3, fmt("switch at P=%.0f, P_F=%.1f, ratio %.2f", switch_p, pf, ratio)};
}

Outcome rate_classifier() {
    double a = 1.5, r = 1, c = 1, q = 2, l = 3;
    double f = std::min(1.0, l / a);
    std::vector<double> brute{2 * a * std::min(r, 1.0) * f, 2 * a * q * std::min(r, 0.5), (a - c) * f + q * c};
    auto best = std::min_element(brute.begin(), brute.end());
    auto rate = asymptotic_rate({a, r, l, q, c, 0}, false);
    bool ok = std::abs(rate.rate - 2.5) < 1e-12 && std::abs(*best - rate.rate) < 1e-12 && best - brute.begin() == 2 &&
              rate.dominant.size() == 1 &&
              rate.dominant[0] == std::vector{VarianceSource::VarF, VarianceSource::VarXF};
    return {ok, fmt("rate %.4f, dominant %s", rate.rate, join_sources(rate.dominant[0]).c_str())};
}

Outcome closure_and_components() {
    std::mt19937_64 rng(1010);
    std::uniform_int_distribution<std::size_t> width(20, 250);
    std::uniform_real_distribution<double> loglam(-5, 0.5), noise(0.0, 1.0);
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        std::size_t d = width(rng);
        ModelSpec m{random_spectrum(rng, d), IsotropicAverageTeacher{}, {}};
        int family = trial % 3;
        if (family >= 1) m.layers = {FeatureLayer::white(width(rng))};
        if (family == 2) m.feature_noise_var = noise(rng);
        m.samples = width(rng);
        m.ridge = std::pow(10.0, loglam(rng));
        m.label_noise_var = noise(rng);
        auto r = theory(m).second;
        worst = std::max(worst, rel(r.component_sum(), r.e_g));
    }
    std::vector<ModelSpec> reps;
    reps.push_back(plain(Spectrum::power_law(1.3, 200), 100, 1e-3, 0.2));
    reps.push_back(white_rf(1000, 200, 100, 1e-4, 0.25));
    reps.push_back(white_rf(400, 150, 200, 1e-3, 0.2));
    reps.back().feature_noise_var = 0.25;
    int misses = 0;
    double worst_z = 0;
    for (std::size_t k = 0; k < reps.size(); ++k) {
        auto r = theory(reps[k]).second;
        auto mc = crossed_variance_components(plan_for(reps[k], 25, 25, 505 + k));
        std::pair<const Estimate*, double> pairs[] = {{&mc.bias2, r.bias2}, {&mc.var_x, r.var_x},
                                                      {&mc.var_f, r.var_f}, {&mc.var_xf, r.var_xf},
                                                      {&mc.var_xeps, r.var_xeps}, {&mc.var_xfeps, r.var_xfeps}};
        for (auto [est, target] : pairs) {
            double gap = std::abs(est->mean - target);
            double z = est->se > 0 ? gap / est->se : (gap < 1e-12 ? 0 : INFINITY);
            worst_z = std::max(worst_z, z);
            misses += z > 3;
        }
    }
    return {worst <= 1e-10 && misses == 0,
            fmt("closure max rel err %.2e on 50 models; 18 MC components, max |z| %.2f", worst, worst_z)};
}

Outcome nlrf_checks() {
    std::mt19937_64 rng(1111);
    auto s = random_spectrum(rng, 150);
    double reduction = 0;
    for (auto [n, p] : {std::pair{60, 100}, std::pair{120, 80}}) {
        ModelSpec m{s, IsotropicAverageTeacher{}, {FeatureLayer::white(std::size_t(n))}};
        m.samples = std::size_t(p);
        m.ridge = 1e-2;
        m.label_noise_var = 0.1;
        double lin = lrf_risk(m, solve_lrf(m)).e_g;
        m.feature_noise_var = 1e-14;
        reduction = std::max(reduction, rel(nlrf_risk(m, solve_nlrf(m)).e_g, lin));
    }
    // psi k^2 + (psi - 1 - s) k - s = 0 at psi = 0.5, s = 0.5.
    ModelSpec iso = white_rf(200, 100, 400, 0.0);
    iso.feature_noise_var = 0.5;
    double a = 0.5, b = 0.5 - 1 - 0.5, c = -0.5;
    double root = (-b + std::sqrt(b * b - 4 * a * c)) / (2 * a);
    double quad = rel(solve_nlrf(iso).kappa2, root);

    ModelSpec m = white_rf(1000, 500, 1000, 0.0, 0.0);
    m.feature_noise_var = 0.25;
    double theory_eg = nlrf_risk(m, solve_nlrf(m)).e_g;
    auto mc = simulate(plan_for(m, 12, 3, 606));
    double mc_err = rel(mc.e_g.mean, theory_eg);
    return {reduction <= 1e-8 && quad <= 1e-10 && mc_err <= 0.05,
            fmt("reduction %.2e, quadratic root %.2e, MC rel err %.4f", reduction, quad, mc_err)};
}

Outcome identities() {
    std::mt19937_64 rng(1212);
    std::uniform_real_distribution<double> logk(-3, 1);
    double fd = 0;
    for (int trial = 0; trial < 20; ++trial) {
        auto s = random_spectrum(rng, 50 + 10 * std::size_t(trial));
        double k = std::pow(10.0, logk(rng)), h = 1e-5 * k;
        double deriv = ((k + h) * df1(s, k + h) - (k - h) * df1(s, k - h)) / (2 * h);
        fd = std::max(fd, rel(deriv, df2(s, k)));
    }
    std::uniform_int_distribution<std::size_t> width(20, 250);
    std::uniform_real_distribution<double> loglam(-4, 0.5), noise(0.0, 1.0);
    double gcv = 0;
    for (int trial = 0; trial < 30; ++trial) {
        std::size_t d = width(rng);
        ModelSpec m{random_spectrum(rng, d), IsotropicAverageTeacher{}, {}};
        if (trial % 3) m.layers = {FeatureLayer::white(width(rng))};
        if (trial % 3 == 2) m.feature_noise_var = noise(rng);
        m.samples = width(rng);
        m.ridge = std::pow(10.0, loglam(rng));
        m.label_noise_var = noise(rng);
        auto [st, r] = theory(m);
        double f = st.kappa1 / m.ridge;
        gcv = std::max(gcv, rel(r.e_tr * f * f, r.e_g + m.label_noise_var));
    }
    return {fd <= 1e-6 && gcv <= 1e-10, fmt("d(k df1)/dk vs df2 %.2e, GCV identity %.2e", fd, gcv)};
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        std::function<Outcome()> run;
        double budget_seconds;
    };
    std::vector<Criterion> criteria{
        {1, "closed-form ridgeless random-feature table", closed_form_table, 1},
        {2, "isotropic ridge theory vs Monte Carlo", isotropic_lr_mc, 120},
        {3, "deterministic equivalence of df1", deterministic_equivalence, 0},
        {4, "GCV / KARE estimate", gcv_kare, 0},
        {5, "Marchenko-Pastur eigenvalue CDF", marchenko_pastur, 0},
        {6, "deep Wishart product CDF", deep_wishart, 60},
        {7, "scaling exponents", scaling_exponents, 0},
        {8, "variance-dominated crossover", variance_crossover, 0},
        {9, "asymptotic-rate classifier", rate_classifier, 0},
        {10, "bias-variance closure and crossed Monte Carlo", closure_and_components, 600},
        {11, "feature-noise reduction and oracle", nlrf_checks, 0},
        {12, "identity checks", identities, 0},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        auto start = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        bool in_time = c.budget_seconds <= 0 || secs <= c.budget_seconds;
        bool pass = out.pass && in_time;
        failures += !pass;
        std::printf("%s [%2d] %s: %s (%.2f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name, out.detail.c_str(), secs,
                    in_time ? "" : ", over budget");
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", int(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
