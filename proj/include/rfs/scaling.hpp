#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rfs/errors.hpp"
#include "rfs/renormalizer.hpp"
#include "rfs/risk.hpp"
#include "rfs/roots.hpp"
#include "rfs/spectrum.hpp"

namespace rfs {

inline constexpr double kRidgeless = std::numeric_limits<double>::infinity();

struct ScalingInputs {
    double alpha = 1.5;
    double r = 1.0;
    double l = kRidgeless;  // ridge decays as P^{-l}; infinity is ridgeless
    double q_exp = 1.0;     // width grows as P^q
    double c = 1.0;         // weight-structure exponent
    double sigma_eps2 = 0;

    void validate() const {
        if (!(alpha > 0)) throw ConfigError("alpha must be > 0");
        if (!(r > 0)) throw ConfigError("r must be > 0");
        if (!(l >= 0)) throw ConfigError("l must be >= 0");
        if (!(q_exp > 0)) throw ConfigError("q must be > 0");
        if (!(c >= 0 && c <= 1)) throw ConfigError("c must be in [0, 1]");
        if (!(sigma_eps2 >= 0)) throw ConfigError("label noise must be >= 0");
    }
    double effective_l() const { return std::min(alpha, l); }
    // min(1, l / alpha), which is 1 when ridgeless.
    double ridge_fraction() const { return std::min(1.0, l / alpha); }
};

// Weight-structure exponent of a layer whose spectrum decays as k^{-alpha_w}.
inline double weight_structure_exponent(double alpha_w) {
    if (!(alpha_w >= 0)) throw ConfigError("weight spectrum exponent must be >= 0");
    if (alpha_w <= 0.5) return 1.0;
    if (alpha_w < 1) return (1 - alpha_w) / alpha_w;
    return 0.0;
}

enum class RegimeName {
    SignalDominated,
    RidgeDominated,
    NoiseDominated,
    NoiseMitigated,
    VarFDominated,
    RidgeAndVarFDominated,
    XiDominated,
    JointXiVarF,
    NoiseXiMitigated,
};

inline std::string to_string(RegimeName n) {
    switch (n) {
        case RegimeName::SignalDominated: return "SignalDominated";
        case RegimeName::RidgeDominated: return "RidgeDominated";
        case RegimeName::NoiseDominated: return "NoiseDominated";
        case RegimeName::NoiseMitigated: return "NoiseMitigated";
        case RegimeName::VarFDominated: return "VarFDominated";
        case RegimeName::RidgeAndVarFDominated: return "RidgeAndVarFDominated";
        case RegimeName::XiDominated: return "XiDominated";
        case RegimeName::JointXiVarF: return "JointXiVarF";
        case RegimeName::NoiseXiMitigated: return "NoiseXiMitigated";
    }
    return "unknown";
}

enum class VarianceSource { Bias2, VarX, VarF, VarXF, VarXeps, VarXFeps };

inline std::string to_string(VarianceSource s) {
    switch (s) {
        case VarianceSource::Bias2: return "Bias2";
        case VarianceSource::VarX: return "VarX";
        case VarianceSource::VarF: return "VarF";
        case VarianceSource::VarXF: return "VarXF";
        case VarianceSource::VarXeps: return "VarXeps";
        case VarianceSource::VarXFeps: return "VarXFeps";
    }
    return "unknown";
}

inline std::string join_sources(std::span<const VarianceSource> sources) {
    std::string out;
    for (auto s : sources) out += (out.empty() ? "" : "+") + to_string(s);
    return out;
}

struct RegimeLabel {
    RegimeName name;
    double predicted_exponent;  // decay rate along the scaling axis
    std::vector<VarianceSource> dominant_terms;
    // Set when the two leading terms are within the margin factor of each other.
    std::optional<RegimeName> crossover_with;
};

namespace detail {

inline RegimeLabel label(RegimeName n, double exponent) {
    using V = VarianceSource;
    std::vector<V> terms;
    switch (n) {
        case RegimeName::SignalDominated:
        case RegimeName::RidgeDominated: terms = {V::Bias2, V::VarX}; break;
        case RegimeName::NoiseDominated:
        case RegimeName::NoiseMitigated:
        case RegimeName::NoiseXiMitigated: terms = {V::VarXeps, V::VarXFeps}; break;
        case RegimeName::VarFDominated:
        case RegimeName::RidgeAndVarFDominated:
        case RegimeName::JointXiVarF: terms = {V::VarF, V::VarXF}; break;
        case RegimeName::XiDominated: terms = {V::VarXF}; break;
    }
    return {n, exponent, std::move(terms), std::nullopt};
}

struct Candidate {
    RegimeName name;
    double exponent;
    double size;
};

// Largest term wins; a runner-up within `margin` marks a crossover.
inline RegimeLabel pick(std::vector<Candidate> c, double margin) {
    std::sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) { return a.size > b.size; });
    RegimeLabel out = label(c[0].name, c[0].exponent);
    if (c.size() > 1 && c[1].size > 0 && c[0].size < margin * c[1].size) out.crossover_with = c[1].name;
    return out;
}

}  // namespace detail

// Asymptotic regime of ridge regression as P grows with lambda ~ P^{-l}.
inline RegimeLabel lr_regime(const ScalingInputs& in) {
    in.validate();
    double rmin = std::min(in.r, 1.0);
    if (in.l >= in.alpha) {
        if (in.sigma_eps2 > 0) return detail::label(RegimeName::NoiseDominated, 0.0);
        return detail::label(RegimeName::SignalDominated, 2 * in.alpha * rmin);
    }
    if (in.sigma_eps2 == 0 || in.l < in.alpha / (1 + 2 * in.alpha * rmin))
        return detail::label(RegimeName::RidgeDominated, 2 * in.l * rmin);
    return detail::label(RegimeName::NoiseMitigated, (in.alpha - in.l) / in.alpha);
}

enum class RegimeAxis { NBottlenecked, POverparameterized };

struct ScalingPoint {
    double samples;
    double width;
};

// Regime of a one-bottleneck random-feature model at a concrete (P, N).
// Bottlenecked exponents are decay rates in N, overparameterized ones in P.
inline RegimeLabel lrf_regimes(const ScalingInputs& in, RegimeAxis axis, ScalingPoint at, double margin = 10.0) {
    in.validate();
    if (!(at.samples > 0 && at.width > 0)) throw ConfigError("sizes must be > 0");
    if (!(margin >= 1)) throw ConfigError("margin must be >= 1");
    const double p = at.samples, n = at.width, le = in.effective_l(), frac = in.ridge_fraction();
    const bool ridge_limited = in.l < in.alpha;
    if (axis == RegimeAxis::NBottlenecked) {
        if (!(n < p)) throw DomainError("bottlenecked axis needs N < P");
        double signal = std::pow(n, -2 * le * std::min(in.r, 0.5)) / (1 - n / p);
        double noise = in.sigma_eps2 * std::pow(n, frac) / p;
        std::vector<detail::Candidate> c{
            {ridge_limited ? RegimeName::RidgeDominated : RegimeName::SignalDominated,
             2 * le * std::min(in.r, 0.5), signal}};
        if (in.sigma_eps2 > 0)
            c.push_back({ridge_limited ? RegimeName::NoiseMitigated : RegimeName::NoiseDominated, -frac, noise});
        return detail::pick(std::move(c), margin);
    }
    if (!(p < n)) throw DomainError("overparameterized axis needs P < N");
    std::vector<detail::Candidate> c{{ridge_limited ? RegimeName::RidgeDominated : RegimeName::SignalDominated,
                                      2 * le * std::min(in.r, 1.0), std::pow(p, -2 * le * std::min(in.r, 1.0))}};
    // With r <= 1/2 the feature-variance term never separates from the signal term.
    if (in.r > 0.5)
        c.push_back({ridge_limited ? RegimeName::RidgeAndVarFDominated : RegimeName::VarFDominated,
                     le - in.c * frac, std::pow(p, -le) * std::pow(std::pow(p, frac) / n, in.c)});
    if (in.sigma_eps2 > 0)
        c.push_back({ridge_limited ? RegimeName::NoiseMitigated : RegimeName::NoiseDominated, 1 - frac,
                     in.sigma_eps2 * std::pow(p, frac - 1)});
    return detail::pick(std::move(c), margin);
}

struct RateTerm {
    double value;
    std::vector<VarianceSource> sources;
};

struct AsymptoticRate {
    double rate;
    std::vector<std::vector<VarianceSource>> dominant;  // every tied argmin
    std::vector<RateTerm> terms;
};

// -log E_g / log P as P -> infinity with N = P^q and lambda = P^{-l}.
inline AsymptoticRate asymptotic_rate(const ScalingInputs& in, bool noisy, double tie_tolerance = 1e-12) {
    in.validate();
    using V = VarianceSource;
    double frac = in.ridge_fraction();
    std::vector<RateTerm> terms{
        {2 * in.alpha * std::min(in.r, 1.0) * frac, {V::Bias2, V::VarX}},
        {2 * in.alpha * in.q_exp * std::min(in.r, 0.5), {V::Bias2, V::VarF}},
        {(in.alpha - in.c) * frac + in.q_exp * in.c, {V::VarF, V::VarXF}},
    };
    if (noisy) terms.push_back({1 - std::min({1.0, in.l / in.alpha, in.q_exp}), {V::VarXeps, V::VarXFeps}});
    double best = terms[0].value;
    for (const auto& t : terms) best = std::min(best, t.value);
    AsymptoticRate out{best, {}, terms};
    for (const auto& t : terms)
        if (t.value - best <= tie_tolerance) out.dominant.push_back(t.sources);
    return out;
}

// Width-dependent sample size where feature variance overtakes the signal
// term; none when r <= 1/2.
inline std::optional<double> crossover_pf(double n, const ScalingInputs& in) {
    in.validate();
    if (!(n > 0)) throw ConfigError("width must be > 0");
    if (in.r <= 0.5 || in.c == 0) return std::nullopt;
    double denom = in.c + 2 * in.effective_l() * std::min(in.r - 0.5, 0.5);
    return std::pow(n, in.c / denom);
}

// Sample size where label noise matches the leading noiseless term; infinity
// when noise never takes over.
inline double crossover_peps(double n, const ScalingInputs& in) {
    in.validate();
    if (!(n > 0)) throw ConfigError("width must be > 0");
    if (in.sigma_eps2 == 0) return kRidgeless;
    const double le = in.effective_l(), frac = in.ridge_fraction();
    auto gap = [&](double log_p) {
        double signal = -2 * le * std::min(in.r, 1.0) * log_p;
        if (in.r > 0.5) signal = std::max(signal, -2 * le * 0.5 * log_p + in.c * (frac * log_p - std::log(n)));
        double noise = std::log(in.sigma_eps2) - std::max(0.0, (in.alpha - in.l) / in.alpha) * log_p;
        return signal - noise;
    };
    // gap decreases in log P once noise decays slower than the signal.
    double hi = 700.0;
    if (gap(0.0) <= 0) return 1.0;
    if (gap(hi) > 0) return kRidgeless;
    double lo = 0.0;
    for (int it = 0; it < 200 && hi - lo > 1e-13 * (1 + hi); ++it) {
        double mid = 0.5 * (lo + hi);
        (gap(mid) > 0 ? lo : hi) = mid;
    }
    return std::exp(0.5 * (lo + hi));
}

struct PhaseCell {
    double l;
    double q;
    double rate;
    std::string label;  // dominant sources, ties separated by '|'
};

inline std::vector<PhaseCell> phase_diagram(std::span<const double> l_grid, std::span<const double> q_grid,
                                            double alpha, double r, double c, bool noisy) {
    if (l_grid.empty() || q_grid.empty()) throw ConfigError("phase grid needs at least one l and one q");
    std::vector<PhaseCell> out;
    out.reserve(l_grid.size() * q_grid.size());
    for (double l : l_grid)
        for (double q : q_grid) {
            ScalingInputs in{alpha, r, l, q, c, 0.0};
            auto rate = asymptotic_rate(in, noisy);
            std::string label;
            for (const auto& d : rate.dominant) label += (label.empty() ? "" : "|") + join_sources(d);
            out.push_back({l, q, rate.rate, std::move(label)});
        }
    return out;
}

struct FitWindow {
    std::size_t begin;
    std::size_t end;  // exclusive
};

// Middle 60% of an n-point grid.
inline FitWindow middle_window(std::size_t n) {
    auto begin = std::size_t(std::floor(0.2 * double(n)));
    auto end = std::size_t(std::ceil(0.8 * double(n)));
    return {begin, std::max(end, begin)};
}

struct PowerLawFit {
    double exponent;
    double intercept;
    double r_squared;
};

inline PowerLawFit fit_power_law(std::span<const double> x, std::span<const double> y,
                                 std::optional<FitWindow> window = std::nullopt) {
    if (x.size() != y.size()) throw DomainError("x and y differ in length");
    FitWindow w = window.value_or(FitWindow{0, x.size()});
    if (w.end > x.size() || w.begin > w.end || w.end - w.begin < 3) throw DomainError("fit window needs >= 3 points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0, m = double(w.end - w.begin);
    for (std::size_t k = w.begin; k < w.end; ++k) {
        if (!(x[k] > 0) || !(y[k] > 0)) throw DomainError("power-law fit needs positive values");
        double lx = std::log(x[k]), ly = std::log(y[k]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        syy += ly * ly;
    }
    double vxx = sxx - sx * sx / m, vxy = sxy - sx * sy / m, vyy = syy - sy * sy / m;
    if (!(vxx > 0)) throw DomainError("fit window has no spread in x");
    double slope = vxy / vxx;
    double r2 = vyy > 0 ? vxy * vxy / (vxx * vyy) : 1.0;
    return {slope, (sy - slope * sx) / m, r2};
}

inline std::vector<double> log_grid(double lo, double hi, std::size_t points) {
    if (!(lo > 0 && hi > lo) || points < 2) throw ConfigError("log grid needs 0 < lo < hi and >= 2 points");
    std::vector<double> out(points);
    for (std::size_t k = 0; k < points; ++k)
        out[k] = lo * std::pow(hi / lo, double(k) / double(points - 1));
    return out;
}

// Theory E_g of ridge regression on an infinite power-law spectrum with
// source teacher r and ridge P^{-l}.
inline std::vector<double> lr_theory_curve(const ScalingInputs& in, std::span<const double> p_grid) {
    in.validate();
    auto s = Spectrum::power_law(in.alpha, std::nullopt);
    std::vector<double> out;
    out.reserve(p_grid.size());
    for (double p : p_grid) {
        double lambda = std::isinf(in.l) ? 0.0 : std::pow(p, -in.l);
        auto sol = solve_kappa_lr(s, p, lambda);
        RenormState st;
        st.ridge = lambda;
        st.kappa1 = st.kappa2 = sol.kappa;
        st.gamma1 = st.gamma2 = sol.gamma;
        out.push_back(detail::assemble(s, SourcePowerLawTeacher{in.r}, st, in.sigma_eps2, 1.0).e_g);
    }
    return out;
}

struct KappaScaling {
    double kappa_exponent;
    double gamma_exponent;
    double predicted_kappa_exponent;
    double predicted_gamma_exponent;
};

// Ridgeless kappa and gamma across a P grid, fitted as power laws. Finite
// spectra with alpha <= 1 use the non-normalizable predictions.
inline KappaScaling kappa_scaling_check(const Spectrum& s, std::span<const double> p_grid) {
    double a = 0;
    if (s.kind() == Spectrum::Kind::PowerLaw)
        a = s.alpha();
    else if (s.kind() != Spectrum::Kind::Isotropic)
        throw ConfigError("kappa scaling needs a power-law or isotropic spectrum");
    std::vector<double> kappas, gammas;
    for (double p : p_grid) {
        auto sol = s.finite() ? solve_kappa_lr(s, double(s.dimension()), p, 0.0) : solve_kappa_lr(s, p, 0.0);
        kappas.push_back(sol.kappa);
        gammas.push_back(sol.gamma);
    }
    auto kf = fit_power_law(p_grid, kappas);
    auto gf = fit_power_law(p_grid, gammas);
    KappaScaling out{kf.exponent, gf.exponent, -a, 0.0};
    if (a <= 1) {
        out.predicted_kappa_exponent = -1.0;
        out.predicted_gamma_exponent = std::min(1.0, (1 - a) / a);
    }
    return out;
}

}  // namespace rfs
