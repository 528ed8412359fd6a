#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "rfs/errors.hpp"
#include "rfs/free_transforms.hpp"
#include "rfs/roots.hpp"
#include "rfs/spectrum.hpp"

namespace rfs {

enum class LayerKind { GaussianWhite, GaussianStructured, OrthogonalProjection };

struct FeatureLayer {
    std::size_t width;
    LayerKind kind = LayerKind::GaussianWhite;
    std::optional<Spectrum> weight_spectrum;  // dimension == width, structured layers only

    static FeatureLayer white(std::size_t n) { return {n, LayerKind::GaussianWhite, std::nullopt}; }
    static FeatureLayer structured(std::size_t n, Spectrum s) { return {n, LayerKind::GaussianStructured, std::move(s)}; }
    static FeatureLayer projection(std::size_t n) { return {n, LayerKind::OrthogonalProjection, std::nullopt}; }
};

struct ModelSpec {
    Spectrum covariates;
    Teacher teacher;
    std::vector<FeatureLayer> layers;
    double feature_noise_var = 0;
    double label_noise_var = 0;
    double ridge = 0;
    std::size_t samples = 1;
};

enum class Regime { Regularized, Underparameterized, Bottlenecked, Overparameterized };

inline std::string to_string(Regime r) {
    switch (r) {
        case Regime::Regularized: return "regularized";
        case Regime::Underparameterized: return "underparameterized";
        case Regime::Bottlenecked: return "bottlenecked";
        case Regime::Overparameterized: return "overparameterized";
    }
    return "unknown";
}

struct RenormState {
    double ridge = 0;
    double kappa1 = 0;
    double kappa2 = 0;
    std::vector<double> kappa_per_layer;
    double gamma1 = 0;
    double gamma2 = 0;
    std::vector<double> gamma_per_layer;
    double df1 = 0;
    double df2 = 0;
    double dfbar1 = 0;
    double dlog_ratio = 1;  // d log kappa2 / d log kappa1
    Regime regime = Regime::Regularized;
    std::optional<std::size_t> bottleneck_layer;
};

struct LrSolution {
    double kappa;
    double gamma;
};

namespace detail {

// (1/P) Tr[S (S + k)^-1] scaled so that n/P is the load for finite spectra.
struct LrLoad {
    const Spectrum& s;
    double n;
    double p;
    bool finite;
    double load(double k) const { return finite ? n / p * df1(s, k) : df1_trace(s, k) / p; }
    double gamma(double k) const { return finite ? n / p * df2(s, k) : df2_trace(s, k) / p; }
    double load_prime(double k) const { return finite ? n / p * df1_prime(s, k) : df1_trace_prime(s, k) / p; }
};

inline LrSolution solve_lr(const Spectrum& s, double n, double p, double lambda, bool finite) {
    if (!(p > 0)) throw ConfigError("sample count must be >= 1");
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw ConfigError("ridge must be finite and >= 0");
    LrLoad L{s, n, p, finite};
    // Pole: load(kappa) = 1 has a positive root iff the problem is overparameterized.
    bool over = finite ? n > p : true;
    double pole = 0;
    if (over) pole = solve_increasing([&](double k) { return 1.0 - L.load(k); }, 0.0, 1.0);
    if (lambda == 0) {
        if (finite && n == p) throw SingularRegimeError("ridgeless regression at N = P diverges");
        if (over) return {pole, L.gamma(pole)};
        return {0.0, n / p};
    }
    auto f = [&](double k) { return k * (1 - L.load(k)) - lambda; };
    auto df = [&](double k) { return 1 - L.gamma(k); };
    double kappa = solve_increasing(f, df, pole, std::max(pole, lambda) * 2 + lambda);
    return {kappa, L.gamma(kappa)};
}

}  // namespace detail

// kappa (1 - (N/P) df1(kappa)) = lambda for a finite spectrum shape.
inline LrSolution solve_kappa_lr(const Spectrum& s, double n, double p, double lambda) {
    if (!s.finite()) throw ConfigError("use the trace form for infinite spectra");
    return detail::solve_lr(s, n, p, lambda, true);
}

// kappa (1 - (1/P) Tr[S (S + kappa)^-1]) = lambda; works for infinite power laws.
inline LrSolution solve_kappa_lr(const Spectrum& s, double p, double lambda) {
    if (s.finite()) return detail::solve_lr(s, double(s.dimension()), p, lambda, true);
    return detail::solve_lr(s, 0.0, p, lambda, false);
}

namespace detail {

inline void validate_layers(const ModelSpec& m) {
    if (m.samples < 1) throw ConfigError("sample count must be >= 1");
    if (!(m.ridge >= 0) || !std::isfinite(m.ridge)) throw ConfigError("ridge must be finite and >= 0");
    if (!(m.feature_noise_var >= 0)) throw ConfigError("feature noise variance must be >= 0");
    if (!(m.label_noise_var >= 0)) throw ConfigError("label noise variance must be >= 0");
    if (m.layers.empty()) return;
    if (!m.covariates.finite()) throw ConfigError("random-feature models need a finite covariate dimension");
    std::size_t in = m.covariates.dimension();
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& layer = m.layers[l];
        if (layer.width < 1) throw ConfigError("layer width must be >= 1");
        if (layer.kind == LayerKind::OrthogonalProjection && layer.width > in)
            throw ConfigError("orthogonal projection width exceeds its input dimension");
        if (layer.kind == LayerKind::GaussianStructured) {
            if (!layer.weight_spectrum) throw ConfigError("structured layer needs a weight spectrum");
            if (!layer.weight_spectrum->finite() || layer.weight_spectrum->dimension() != layer.width)
                throw ConfigError("structured layer spectrum dimension must equal the layer width");
        }
        in = layer.width;
    }
    if (m.feature_noise_var > 0 &&
        (m.layers.size() != 1 || m.layers[0].kind != LayerKind::GaussianWhite))
        throw ConfigError("feature noise needs exactly one Gaussian white layer");
}

// Per-layer pieces of 1/S_{FF^T}(-x) as a function of the effective df x.
struct LayerFactor {
    double inv_s;     // Q_l(x)
    double dlog_s;    // d log S_l / d log x  (= -d log Q_l / d log x), +inf at a pole
    double kappa_l;   // NaN for projections
    double gamma_l;   // (N_l / P) df2_{Sigma_l}(kappa_l), NaN for projections
};

inline LayerFactor layer_factor(const FeatureLayer& layer, double in, double d, double p, double x) {
    double out = double(layer.width);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const double inf = std::numeric_limits<double>::infinity();
    double gap = out - d * x;  // vanishes at the pole
    switch (layer.kind) {
        case LayerKind::GaussianWhite: {
            double r = d * x / out;  // df1 of the identity at kappa_l
            double kappa_l = gap > 0 ? out / (d * x) - 1 : 0.0;
            return {gap / in, gap > 0 ? d * x / gap : inf, kappa_l, out / p * r * r};
        }
        case LayerKind::OrthogonalProjection: {
            double inv = gap / (in - d * x);
            double dl = gap > 0 ? d * x / gap - d * x / (in - d * x) : inf;
            return {inv, dl, nan, nan};
        }
        case LayerKind::GaussianStructured: {
            const Spectrum& sig = *layer.weight_spectrum;
            double target = d * x / out;
            if (target >= 1) return {0.0, inf, 0.0, out / p};
            double kl = kappa_at_df1(sig, target);
            double a = df1(sig, kl), b = df2(sig, kl);
            return {d / in * x * kl, b / (a - b), kl, out / p * b};
        }
    }
    return {nan, nan, nan, nan};
}

struct ChainEval {
    double inv_s = 1;   // product of Q_l
    double dlog_s = 0;  // sum of d log S_l / d log x
    std::vector<double> kappas;
    std::vector<double> gammas;
};

inline ChainEval eval_chain(const ModelSpec& m, double x) {
    ChainEval c;
    double d = double(m.covariates.dimension());
    double in = d;
    double p = double(m.samples);
    for (const auto& layer : m.layers) {
        auto f = layer_factor(layer, in, d, p, x);
        c.inv_s *= f.inv_s;
        c.dlog_s += f.dlog_s;
        c.kappas.push_back(f.kappa_l);
        c.gammas.push_back(f.gamma_l);
        in = double(layer.width);
    }
    return c;
}

inline std::size_t narrowest_layer(const ModelSpec& m) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < m.layers.size(); ++l)
        if (m.layers[l].width < m.layers[best].width) best = l;
    return best;
}

// Fills kappa1, gammas and the log-derivative once kappa2 and x are known.
inline RenormState finish_state(const ModelSpec& m, double kappa2, double x, std::optional<double> kappa1) {
    RenormState st;
    const Spectrum& s = m.covariates;
    double d = double(s.dimension());
    double p = double(m.samples);
    st.ridge = m.ridge;
    st.kappa2 = kappa2;
    st.df1 = kappa2 > 0 ? df1(s, kappa2) : 1.0;
    st.df2 = kappa2 > 0 ? df2(s, kappa2) : 1.0;
    st.dfbar1 = x;
    auto chain = eval_chain(m, x);
    st.kappa_per_layer = chain.kappas;
    st.gamma_per_layer = chain.gammas;
    if (kappa1)
        st.kappa1 = *kappa1;
    else
        st.kappa1 = kappa2 * chain.inv_s;
    double spread = (x - st.df2) / x;  // -d log x / d log kappa2
    if (!std::isfinite(chain.dlog_s))
        st.dlog_ratio = 0;
    else
        st.dlog_ratio = 1 / (1 + chain.dlog_s * spread);
    st.gamma1 = d / p * (x - st.dlog_ratio * (x - st.df2));
    st.gamma2 = d / p * st.df2;
    return st;
}

}  // namespace detail

// Classifies the ridgeless problem by which pole (if any) keeps kappa2 > 0.
inline std::pair<Regime, std::optional<std::size_t>> ridgeless_regime(const ModelSpec& m) {
    detail::validate_layers(m);
    double p = double(m.samples);
    double width = std::numeric_limits<double>::infinity();
    std::optional<std::size_t> narrow;
    if (!m.layers.empty()) {
        narrow = detail::narrowest_layer(m);
        width = double(m.layers[*narrow].width);
    }
    if (m.feature_noise_var > 0) {
        if (width == p) throw SingularRegimeError("ridgeless model at N = P diverges");
        if (width < p) return {Regime::Underparameterized, std::nullopt};
        return {Regime::Overparameterized, std::nullopt};
    }
    double d = m.covariates.finite() ? double(m.covariates.dimension()) : std::numeric_limits<double>::infinity();
    double lowest = std::min({d, p, width});
    if (p == lowest && (d == lowest || width == lowest))
        throw SingularRegimeError("ridgeless model sits on a double-descent point");
    if (d == lowest) return {Regime::Underparameterized, std::nullopt};
    if (width == lowest) return {Regime::Bottlenecked, narrow};
    return {Regime::Overparameterized, std::nullopt};
}

inline RenormState solve_lrf(const ModelSpec& m) {
    detail::validate_layers(m);
    double lambda = m.ridge;
    double p = double(m.samples);
    if (m.layers.empty()) {
        auto lr = solve_kappa_lr(m.covariates, p, lambda);
        RenormState st;
        st.ridge = lambda;
        st.kappa1 = st.kappa2 = lr.kappa;
        st.gamma1 = st.gamma2 = lr.gamma;
        st.dlog_ratio = 1;
        if (m.covariates.finite()) {
            st.df1 = lr.kappa > 0 ? df1(m.covariates, lr.kappa) : 1.0;
            st.df2 = lr.kappa > 0 ? df2(m.covariates, lr.kappa) : 1.0;
            st.dfbar1 = st.df1;
        } else {
            st.df1 = st.df2 = st.dfbar1 = std::numeric_limits<double>::quiet_NaN();
        }
        if (lambda > 0) {
            st.regime = Regime::Regularized;
        } else {
            st.regime = lr.kappa > 0 ? Regime::Overparameterized : Regime::Underparameterized;
        }
        return st;
    }
    const Spectrum& s = m.covariates;
    double d = double(s.dimension());
    double sigma_xi = m.feature_noise_var;
    auto effective_df = [&](double k) { return df1(s, k) + sigma_xi / k; };
    // x must stay below every pole: P/D for the data, N_l/D for each layer.
    double x_max = p / d;
    for (const auto& layer : m.layers) x_max = std::min(x_max, double(layer.width) / d);
    auto kappa_at = [&](double target) {
        if (sigma_xi > 0) return solve_increasing([&](double k) { return target - effective_df(k); }, 0.0, 1.0);
        return kappa_at_df1(s, target);
    };

    if (lambda == 0) {
        auto [regime, narrow] = ridgeless_regime(m);
        if (regime == Regime::Underparameterized && sigma_xi == 0) {
            auto st = detail::finish_state(m, 0.0, 1.0, 0.0);
            st.regime = regime;
            st.dlog_ratio = std::isfinite(detail::eval_chain(m, 1.0).dlog_s) ? 1.0 : 0.0;
            st.gamma1 = st.gamma2 = d / p;
            return st;
        }
        double x = x_max;
        double kappa2 = kappa_at(x);
        bool feature_limited = regime != Regime::Overparameterized;
        auto st = detail::finish_state(m, kappa2, x, feature_limited ? std::optional<double>(0.0) : std::nullopt);
        if (feature_limited) st.dlog_ratio = 0, st.gamma1 = d / p * x;
        st.regime = regime;
        st.bottleneck_layer = regime == Regime::Bottlenecked ? narrow : std::nullopt;
        return st;
    }

    double kappa_lo = 0;
    if (sigma_xi > 0 || x_max < 1) kappa_lo = kappa_at(std::min(x_max, 1.0 - 1e-300));
    auto x_of = [&](double k) { return sigma_xi > 0 ? effective_df(k) : df1(s, k); };
    auto residual = [&](double k) {
        double x = x_of(k);
        if (!(x < x_max)) return -lambda;
        return k * detail::eval_chain(m, x).inv_s * (1 - d / p * x) - lambda;
    };
    double kappa2 = solve_increasing(residual, kappa_lo, std::max(2 * kappa_lo, 1.0) + lambda);
    double x = x_of(kappa2);
    auto st = detail::finish_state(m, kappa2, x, lambda / (1 - d / p * x));
    st.regime = Regime::Regularized;
    return st;
}

// Nonlinear features through Gaussian equivalence: one white layer plus
// isotropic feature noise.
inline RenormState solve_nlrf(const ModelSpec& m) {
    if (!(m.feature_noise_var > 0)) throw ConfigError("solve_nlrf needs feature noise variance > 0");
    return solve_lrf(m);
}

}  // namespace rfs
