#pragma once

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "rfs/errors.hpp"
#include "rfs/renormalizer.hpp"
#include "rfs/spectrum.hpp"

namespace rfs {

struct RiskReport {
    double e_g = 0;
    double e_tr = 0;
    double gcv = 0;
    double bias2 = 0;
    double var_x = 0;
    double var_f = 0;
    double var_xf = 0;
    double var_xeps = 0;
    double var_xfeps = 0;
    double var_eps = 0;
    double var_feps = 0;

    double component_sum() const { return bias2 + var_x + var_f + var_xf + var_xeps + var_xfeps; }
};

namespace detail {

inline double odds(double gamma) {
    if (!(gamma < 1)) throw DivergentRiskError("gamma >= 1: risk diverges at a double-descent point");
    return gamma / (1 - gamma);
}

// Shared decomposition for every family. LR is kappa1 = kappa2, rho = 1, gamma1 = gamma2.
// fit_fraction is lambda / kappa1, the train-to-test shrink factor.
inline RiskReport assemble(const Spectrum& s, const Teacher& teacher, const RenormState& st, double noise,
                           double fit_fraction) {
    RiskReport r;
    double k = st.kappa2;
    double o1 = odds(st.gamma1);
    double o2 = odds(st.gamma2);
    r.bias2 = k > 0 ? -k * k * tf1_prime(s, teacher, k) : 0.0;
    r.var_f = k > 0 ? (1 - st.dlog_ratio) * k * tf2(s, teacher, k) : 0.0;
    r.var_x = o2 * r.bias2;
    r.var_xf = o1 * (r.bias2 + r.var_f) - r.var_x;
    r.var_xeps = o2 * noise;
    r.var_xfeps = (o1 - o2) * noise;
    r.e_g = r.component_sum();
    r.e_tr = fit_fraction * fit_fraction * (r.e_g + noise);
    r.gcv = st.ridge > 0 ? r.e_tr / (fit_fraction * fit_fraction) : r.e_g + noise;
    return r;
}

inline double fit_fraction(const ModelSpec& m, const RenormState& st) {
    double p = double(m.samples);
    if (m.layers.empty() && !m.covariates.finite())
        return st.kappa2 > 0 ? 1 - df1_trace(m.covariates, st.kappa2) / p : 1.0;
    return 1 - double(m.covariates.dimension()) / p * st.dfbar1;
}

}  // namespace detail

inline RiskReport lr_risk(const ModelSpec& m, const RenormState& st) {
    if (!m.layers.empty()) throw ConfigError("lr_risk expects a model without feature layers");
    return detail::assemble(m.covariates, m.teacher, st, m.label_noise_var, detail::fit_fraction(m, st));
}

inline RiskReport lr_risk(const ModelSpec& m) { return lr_risk(m, solve_lrf(m)); }

inline RiskReport lrf_risk(const ModelSpec& m, const RenormState& st) {
    return detail::assemble(m.covariates, m.teacher, st, m.label_noise_var, detail::fit_fraction(m, st));
}

inline RiskReport nlrf_risk(const ModelSpec& m, const RenormState& st) {
    if (!(m.feature_noise_var > 0)) throw ConfigError("nlrf_risk needs feature noise variance > 0");
    return lrf_risk(m, st);
}

// Solve and evaluate whichever family the model describes.
inline std::pair<RenormState, RiskReport> theory(const ModelSpec& m) {
    auto st = solve_lrf(m);
    return {st, m.layers.empty() ? lr_risk(m, st) : lrf_risk(m, st)};
}

inline double gcv_factor(const RenormState& st) {
    if (!(st.ridge > 0)) throw DomainError("GCV factor is undefined at zero ridge");
    double s = st.kappa1 / st.ridge;
    return s * s;
}

// Averaging over `bags` datasets and `ensembles` feature draws in a crossed design.
inline RiskReport bagged(RiskReport r, double bags, double ensembles) {
    if (!(bags >= 1) || !(ensembles >= 1)) throw ConfigError("bag and ensemble counts must be >= 1");
    r.var_x /= bags;
    r.var_xeps /= bags;
    r.var_f /= ensembles;
    r.var_xf /= bags * ensembles;
    r.var_xfeps /= bags * ensembles;
    r.e_g = r.component_sum();
    return r;
}

// Ridge of the plain regression equivalent to an infinite feature ensemble.
inline double ensemble_effective_ridge(double lambda, const RenormState& st) {
    if (!(lambda > 0)) throw ConfigError("ensemble ridge needs lambda > 0");
    if (!(st.kappa1 > 0)) throw PoleError("feature Gram S-transform sits on its pole (kappa1 = 0)", st.dfbar1);
    return lambda * st.kappa2 / st.kappa1;
}

struct PlateauApprox {
    double kappa;
    double gamma;
    double effective_noise;  // (1/P) sum_{k > l} N_k eta_k
    bool well_separated;     // neighbouring levels differ by at least 1e2
};

// Plateau approximation near level `level` (0 = largest eigenvalue).
inline PlateauApprox multiple_descent_kappa(const Spectrum& plateaus, std::size_t level, double p, double lambda) {
    const auto& lv = plateaus.levels();
    if (level >= lv.size()) throw ConfigError("plateau level index out of range");
    if (!(p > 0) || !(lambda >= 0)) throw ConfigError("need P > 0 and lambda >= 0");
    double eta = lv[level].value;
    double q = double(lv[level].multiplicity) / p;
    double tail = 0;
    for (std::size_t k = level + 1; k < lv.size(); ++k) tail += double(lv[k].multiplicity) * lv[k].value;
    double noise = tail / p;
    double ridge = lambda + noise;
    double b = eta * (q - 1) + ridge;
    double kappa = 0.5 * (b + std::sqrt(b * b + 4 * eta * ridge));
    if (ridge == 0) kappa = std::max(0.0, eta * (q - 1));
    bool separated = true;
    if (level > 0 && lv[level - 1].value < 1e2 * eta) separated = false;
    if (level + 1 < lv.size() && eta < 1e2 * lv[level + 1].value) separated = false;
    double g = q * eta * eta / ((kappa + eta) * (kappa + eta));
    return {kappa, g, noise, separated};
}

// Peak condition at a fixed effective ridge: gamma is maximal at q = (eta + ridge)/eta.
inline double descent_peak_ratio(double eta, double effective_ridge) { return (eta + effective_ridge) / eta; }

// Sample count maximizing the plateau approximation's gamma for one level. The
// effective ridge lambda + (1/P) sum_{k > l} N_k eta_k moves with P, so the fixed-ridge
// condition above only holds self-consistently at this maximizer.
inline double multiple_descent_peak(const Spectrum& plateaus, std::size_t level, double lambda) {
    const auto& lv = plateaus.levels();
    if (level >= lv.size()) throw ConfigError("plateau level index out of range");
    double n = double(lv[level].multiplicity);
    auto gamma_at = [&](double logp) { return multiple_descent_kappa(plateaus, level, std::exp(logp), lambda).gamma; };
    double lo = std::log(n / 100), hi = std::log(n * 100);
    constexpr int grid = 4000;
    int best = 0;
    double best_gamma = -1;
    for (int i = 0; i <= grid; ++i) {
        double g = gamma_at(lo + (hi - lo) * i / grid);
        if (g > best_gamma) best_gamma = g, best = i;
    }
    if (best == 0 || best == grid) throw NoSolutionError("no descent peak for this level");
    double a = lo + (hi - lo) * (best - 1) / grid, b = lo + (hi - lo) * (best + 1) / grid;
    const double inv_phi = (std::sqrt(5.0) - 1) / 2;
    for (int it = 0; it < 100; ++it) {
        double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
        if (gamma_at(c) > gamma_at(d))
            b = d;
        else
            a = c;
    }
    return std::exp(0.5 * (a + b));
}

struct GaussianEquivalence {
    double mu0;
    double mu1;
    double mu_star;

    double feature_noise_var() const { return mu_star / (mu1 * mu1); }
};

namespace detail {

// Probabilists' Gauss-Hermite rule (weight exp(-x^2/2)/sqrt(2 pi)) by Golub-Welsch.
inline const std::pair<std::vector<double>, std::vector<double>>& hermite_rule() {
    static const auto rule = [] {
        constexpr int n = 64;
        Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
        for (int k = 1; k < n; ++k) jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(double(k));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
        std::vector<double> nodes(n), weights(n);
        for (int i = 0; i < n; ++i) {
            nodes[i] = eig.eigenvalues()(i);
            weights[i] = eig.eigenvectors()(0, i) * eig.eigenvectors()(0, i);
        }
        return std::pair{nodes, weights};
    }();
    return rule;
}

}  // namespace detail

// Activation with the abscissae where it is not smooth. Smooth activations use a
// 64-node Gauss-Hermite rule; kinked ones are integrated piecewise between kinks.
struct Nonlinearity {
    std::function<double(double)> f;
    std::vector<double> kinks;
};

inline Nonlinearity named_nonlinearity(const std::string& name) {
    if (name == "identity" || name == "linear") return {[](double x) { return x; }, {}};
    if (name == "relu") return {[](double x) { return x > 0 ? x : 0.0; }, {0.0}};
    if (name == "abs") return {[](double x) { return std::abs(x); }, {0.0}};
    if (name == "tanh") return {[](double x) { return std::tanh(x); }, {}};
    if (name == "erf") return {[](double x) { return std::erf(x); }, {}};
    if (name == "sigmoid") return {[](double x) { return 1 / (1 + std::exp(-x)); }, {}};
    if (name == "square") return {[](double x) { return x * x; }, {}};
    throw ConfigError("unknown nonlinearity: " + name);
}

// Piecewise-linear interpolation of sampled (x, y) pairs, constant outside the table.
inline Nonlinearity tabulated_nonlinearity(std::vector<double> xs, std::vector<double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw ConfigError("nonlinearity table needs >= 2 matching samples");
    if (!std::is_sorted(xs.begin(), xs.end())) throw ConfigError("nonlinearity table abscissae must be sorted");
    auto kinks = xs;
    auto f = [xs = std::move(xs), ys = std::move(ys)](double x) {
        if (x <= xs.front()) return ys.front();
        if (x >= xs.back()) return ys.back();
        auto it = std::upper_bound(xs.begin(), xs.end(), x);
        std::size_t i = std::size_t(it - xs.begin());
        double t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
        return ys[i - 1] + t * (ys[i] - ys[i - 1]);
    };
    return {f, kinks};
}

namespace detail {

// E[g(x)] for x ~ N(0, 1).
template <class G>
double gaussian_mean(const Nonlinearity& act, G g) {
    if (act.kinks.empty()) {
        const auto& [nodes, weights] = hermite_rule();
        double acc = 0;
        for (std::size_t i = 0; i < nodes.size(); ++i) acc += weights[i] * g(nodes[i], act.f(nodes[i]));
        return acc;
    }
    const double inf = std::numeric_limits<double>::infinity();
    auto weighted = [&](double x) { return g(x, act.f(x)) * std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi); };
    std::vector<double> cuts{-inf};
    for (double k : act.kinks) cuts.push_back(k);
    cuts.push_back(inf);
    double acc = 0;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        if (!(cuts[i + 1] > cuts[i])) continue;
        acc += boost::math::quadrature::gauss_kronrod<double, 61>::integrate(weighted, cuts[i], cuts[i + 1], 15, 1e-14);
    }
    return acc;
}

}  // namespace detail

inline GaussianEquivalence gaussian_equivalence_constants(const Nonlinearity& act) {
    double m0 = detail::gaussian_mean(act, [](double, double y) { return y; });
    double m1 = detail::gaussian_mean(act, [](double x, double y) { return x * y; });
    double m2 = detail::gaussian_mean(act, [](double, double y) { return y * y; });
    if (std::abs(m1) < 1e-12) throw DegenerateError("nonlinearity has no linear component (mu1 = 0)");
    return {m0, m1, std::max(0.0, m2 - m0 * m0 - m1 * m1)};
}

// Linear-plus-noise surrogate: features mu1 (F^T x) + noise, rescaled by 1/mu1.
inline ModelSpec gaussian_equivalent_model(ModelSpec m, const GaussianEquivalence& g) {
    if (m.layers.size() != 1 || m.layers[0].kind != LayerKind::GaussianWhite)
        throw ConfigError("Gaussian equivalence applies to one Gaussian white layer");
    m.feature_noise_var = g.feature_noise_var();
    return m;
}

}  // namespace rfs
