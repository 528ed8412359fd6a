#pragma once

#include <cmath>
#include <complex>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "rfs/errors.hpp"
#include "rfs/roots.hpp"
#include "rfs/spectrum.hpp"

namespace rfs {

using cplx = std::complex<double>;

struct EnsembleTransform;

struct WhiteWishart {
    double q;
};
struct WishartGram {
    double q;
};
struct SquareProjection {
    double q;
};
struct ShiftedWishart {
    double q;
    double shift;
};
// Gram F_1..F_L F_L^T..F_1^T with F_l of shape N_{l-1} x N_l, entries of variance 1/N_{l-1}.
struct DeepWhiteGram {
    std::vector<std::size_t> widths;  // N_1..N_L
    std::size_t input_dim;            // N_0
};
// Wishart product F_L^T..F_1^T F_1..F_L, same F_l as above.
struct DeepWhiteWishart {
    std::vector<std::size_t> widths;  // N_0..N_L
};
// Gram of a chain whose layer l has E[F_l^T F_l] = Sigma_l (dimension N_l).
struct DeepStructuredGram {
    std::vector<Spectrum> layers;
    std::vector<std::size_t> widths;
    std::size_t input_dim;
};
struct StructuredWishart {
    Spectrum population;
    double q;
};
struct CorrelatedSamples {
    Spectrum kernel;
    double q;
};
struct FullyStructured {
    Spectrum population;
    Spectrum kernel;
    double q;
};
struct Wigner {
    double sigma2;
};
struct Population {
    Spectrum spectrum;
};
struct RectangularProjectionOf {
    std::shared_ptr<const EnsembleTransform> inner;
    double q;
};

struct EnsembleTransform {
    std::variant<WhiteWishart, WishartGram, SquareProjection, RectangularProjectionOf, ShiftedWishart,
                 DeepWhiteGram, DeepWhiteWishart, DeepStructuredGram, StructuredWishart, CorrelatedSamples,
                 FullyStructured, Wigner, Population>
        kind;
};

inline double wigner_r(double sigma2, double g) { return sigma2 * g; }

// t-transform of a population spectrum, tr[S (w - S)^-1], at complex w.
inline cplx t_spectrum(const Spectrum& s, cplx w) {
    cplx acc = 0;
    for (const auto& l : s.levels()) acc += double(l.multiplicity) * l.value / (w - l.value);
    return acc / double(s.dimension());
}

inline cplx t_spectrum_prime(const Spectrum& s, cplx w) {
    cplx acc = 0;
    for (const auto& l : s.levels()) acc -= double(l.multiplicity) * l.value / ((w - l.value) * (w - l.value));
    return acc / double(s.dimension());
}

// kappa > 0 with df1(kappa) = target, target in (0, 1).
inline double kappa_at_df1(const Spectrum& s, double target) {
    if (!(target > 0 && target < 1)) throw NoSolutionError("df1 target outside (0, 1)");
    return solve_increasing([&](double k) { return target - df1(s, k); },
                            [&](double k) { return -df1_prime(s, k); }, 0.0, 1.0);
}

// Functional inverse of the t-transform on the negative axis: z < 0 with t(z) = t.
inline double zeta_inverse(const Spectrum& s, double t) {
    if (!(t < 0 && t > -1)) throw NoSolutionError("zeta_inverse needs t in (-1, 0)");
    return -kappa_at_df1(s, -t);
}

namespace detail {

inline void check_pole(double denom, double where, const char* what) {
    if (denom == 0 || std::abs(denom) < 1e-300) throw PoleError(what, where);
}
inline void check_pole(cplx denom, cplx where, const char* what) {
    if (std::abs(denom) < 1e-300) throw PoleError(what, where.real());
}

// Complex inverse of t_spectrum by damped Newton from a moment-based guess.
inline cplx zeta_complex(const Spectrum& s, cplx t) {
    double mean = s.mean_eigenvalue();
    cplx w = mean * (t + 1.0) / t;
    for (int it = 0; it < 500; ++it) {
        cplx f = t_spectrum(s, w) - t;
        cplx df = t_spectrum_prime(s, w);
        cplx step = f / df;
        double shrink = 1;
        while (shrink > 1e-6) {
            cplx cand = w - shrink * step;
            if (std::abs(t_spectrum(s, cand) - t) < std::abs(f)) break;
            shrink /= 2;
        }
        w -= shrink * step;
        if (std::abs(step) * shrink < 1e-14 * (1 + std::abs(w))) return w;
    }
    if (std::abs(t_spectrum(s, w) - t) > 1e-9 * (1 + std::abs(t)))
        throw ConvergenceError("complex zeta inversion did not converge", std::abs(t_spectrum(s, w) - t));
    return w;
}

inline double zeta_real(const Spectrum& s, double t) {
    if (t < 0) return zeta_inverse(s, t);
    // t > 0: z above the top eigenvalue.
    double top = s.max_eigenvalue();
    double gap = solve_increasing(
        [&](double g) { return t - t_spectrum(s, cplx(top + g, 0)).real(); }, 0.0, top);
    return top + gap;
}

template <class T>
T zeta(const Spectrum& s, T t) {
    if constexpr (std::is_same_v<T, double>)
        return zeta_real(s, t);
    else
        return zeta_complex(s, t);
}

template <class T>
T population_s(const Spectrum& s, T t) {
    if (t == T(0)) return T(1.0 / s.mean_eigenvalue());
    if constexpr (std::is_same_v<T, double>) {
        if (t <= -1) throw PoleError("population S-transform outside (-1, inf)", t);
    }
    T z = zeta(s, t);
    return (t + 1.0) / (t * z);
}

// 1 / (t zeta_Sigma(a t)) with the t -> 0 limit handled.
template <class T>
T inverse_t_zeta(const Spectrum& s, T t, double a) {
    if (t == T(0)) return T(a / s.mean_eigenvalue());
    return T(1.0) / (t * zeta(s, a * t));
}

}  // namespace detail

template <class T>
T s_transform(const EnsembleTransform& e, T t);

namespace detail {

template <class T>
T s_transform_impl(const WhiteWishart& w, T t) {
    T d = T(1) + w.q * t;
    check_pole(d, T(-1.0 / w.q), "WhiteWishart pole at t = -1/q");
    return T(1) / d;
}
template <class T>
T s_transform_impl(const WishartGram& w, T t) {
    T d = w.q + t;
    check_pole(d, T(-w.q), "Gram pole at t = -q");
    return T(1) / d;
}
template <class T>
T s_transform_impl(const SquareProjection& p, T t) {
    T d = t + p.q;
    check_pole(d, T(-p.q), "projection pole at t = -q");
    return (t + 1.0) / d;
}
template <class T>
T s_transform_impl(const RectangularProjectionOf& r, T t) {
    return s_transform(*r.inner, T(r.q * t));
}
template <class T>
T s_transform_impl(const ShiftedWishart& w, T t) {
    if (w.shift < 0) throw DomainError("shifted Wishart supports only J >= 0");
    T a = T(1) + w.shift + w.q * t;
    T disc = a * a - 4.0 * w.shift * w.q * t;
    T root;
    if constexpr (std::is_same_v<T, double>) {
        if (disc < 0) throw DomainError("shifted Wishart discriminant is negative");
        root = std::sqrt(disc);
    } else {
        root = std::sqrt(disc);
        if ((root * std::conj(a)).real() < 0) root = -root;
    }
    T d = a + root;
    check_pole(d, T(0), "shifted Wishart pole");
    return 2.0 / d;
}
template <class T>
T s_transform_impl(const DeepWhiteGram& g, T t) {
    if (g.widths.empty()) throw ConfigError("deep gram needs at least one layer");
    T acc = 1;
    double prev = double(g.input_dim);
    double d = double(g.input_dim);
    for (std::size_t w : g.widths) {
        T den = double(w) / d + t;
        check_pole(den, T(-double(w) / d), "deep gram pole at t = -N_l/D");
        acc *= (prev / d) / den;
        prev = double(w);
    }
    return acc;
}
template <class T>
T s_transform_impl(const DeepWhiteWishart& g, T t) {
    if (g.widths.size() < 2) throw ConfigError("deep Wishart needs widths N_0..N_L with L >= 1");
    double last = double(g.widths.back());
    T acc = 1;
    for (std::size_t l = 0; l + 1 < g.widths.size(); ++l) {
        double ratio = last / double(g.widths[l]);
        T den = T(1) + ratio * t;
        check_pole(den, T(-1 / ratio), "deep Wishart pole");
        acc /= den;
    }
    return acc;
}
template <class T>
T s_transform_impl(const DeepStructuredGram& g, T t) {
    if (g.layers.empty() || g.layers.size() != g.widths.size())
        throw ConfigError("deep structured gram needs one spectrum per width");
    double d = double(g.input_dim);
    double prev = d;
    T acc = 1;
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        double width = double(g.widths[l]);
        if (g.layers[l].dimension() != g.widths[l])
            throw ConfigError("layer spectrum dimension must equal the layer width");
        // Layer factor 1/(u zeta(u in/out)) at u = (D/in) t.
        T u = (d / prev) * t;
        acc *= inverse_t_zeta(g.layers[l], u, prev / width);
        prev = width;
    }
    return acc;
}
template <class T>
T s_transform_impl(const StructuredWishart& w, T t) {
    return s_transform_impl(WhiteWishart{w.q}, t) * population_s(w.population, t);
}
template <class T>
T s_transform_impl(const CorrelatedSamples& c, T t) {
    return s_transform_impl(WhiteWishart{c.q}, t) * population_s(c.kernel, T(c.q * t));
}
template <class T>
T s_transform_impl(const FullyStructured& f, T t) {
    return s_transform_impl(WhiteWishart{f.q}, t) * population_s(f.population, t) *
           population_s(f.kernel, T(f.q * t));
}
template <class T>
T s_transform_impl(const Wigner&, T) {
    throw DomainError("Wigner ensemble has zero mean; use wigner_r");
}
template <class T>
T s_transform_impl(const Population& p, T t) {
    return population_s(p.spectrum, t);
}

}  // namespace detail

template <class T>
T s_transform(const EnsembleTransform& e, T t) {
    return std::visit([&](const auto& v) { return detail::s_transform_impl(v, t); }, e.kind);
}

inline double s_transform(const EnsembleTransform& e, double t) { return s_transform<double>(e, t); }

struct PointMass {
    double location;
    double weight;
};

struct DensityResult {
    std::vector<double> density;  // bulk only
    std::vector<PointMass> point_masses;
    std::vector<bool> flagged;  // residual above tolerance at that grid point
};

struct DensityOptions {
    double damping = 0.5;
    double tolerance = 1e-12;
    int max_iterations = 100000;
};

inline double marchenko_pastur_density(double q, double lambda) {
    double lo = std::pow(1 - std::sqrt(q), 2), hi = std::pow(1 + std::sqrt(q), 2);
    if (lambda <= lo || lambda >= hi) return 0;
    return std::sqrt((hi - lambda) * (lambda - lo)) / (2 * std::numbers::pi * q * lambda);
}

inline double semicircle_density(double sigma2, double lambda) {
    double r2 = 4 * sigma2 - lambda * lambda;
    return r2 > 0 ? std::sqrt(r2) / (2 * std::numbers::pi * sigma2) : 0;
}

// Mean eigenvalue of the ensemble, 1 / S(0).
inline double ensemble_mean(const EnsembleTransform& e) {
    if (const auto* w = std::get_if<Wigner>(&e.kind)) return std::sqrt(w->sigma2);
    return 1.0 / s_transform(e, 0.0);
}

// Weight of the zero eigenvalue: 1 + lim_{z -> 0-} t(z). The physical real
// branch of zeta(t) = (t + 1)/(t S(t)) runs from t = 0- down to the first
// pole or zero; it is located by a coarse downward march plus bisection.
inline double zero_mass(const EnsembleTransform& e) {
    if (const auto* w = std::get_if<WhiteWishart>(&e.kind)) return w->q > 1 ? (w->q - 1) / w->q : 0.0;
    if (std::holds_alternative<Wigner>(e.kind)) return 0.0;
    double delta = 1e-13 * ensemble_mean(e);
    auto on_branch = [&](double t) {
        try {
            double s = s_transform(e, t);
            if (!(s > 0) || !std::isfinite(s)) return false;
            return (t + 1) / (t * s) < -delta;
        } catch (const Error&) {
            return false;
        }
    };
    double hi = -1e-12, lo = hi;
    const double step = 1e-3;
    while (true) {
        double next = std::max(-1.0, lo - step);
        if (next <= -1.0 || !on_branch(next)) {
            lo = next;
            break;
        }
        hi = next;
        lo = next;
    }
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        if (on_branch(mid))
            hi = mid;
        else
            lo = mid;
    }
    double mass = 1 + 0.5 * (lo + hi);
    return mass < 1e-9 ? 0.0 : mass;
}

namespace detail {

// Fixed-point map t -> update(t) whose root gives t(z).
inline cplx density_update(const EnsembleTransform& e, cplx z, cplx cur) {
    if (const auto* w = std::get_if<StructuredWishart>(&e.kind))
        return t_spectrum(w->population, z / (1.0 + w->q * cur));
    if (const auto* c = std::get_if<CorrelatedSamples>(&e.kind))
        return t_spectrum(c->kernel, z / (c->q + c->q * cur)) / c->q;
    if (const auto* p = std::get_if<Population>(&e.kind)) return t_spectrum(p->spectrum, z);
    return 1.0 / (z * s_transform<cplx>(e, cur) - 1.0);
}

struct StageResult {
    cplx t;
    double residual;
    bool ok;
};

inline bool has_subordination(const EnsembleTransform& e) {
    return std::holds_alternative<StructuredWishart>(e.kind) || std::holds_alternative<CorrelatedSamples>(e.kind) ||
           std::holds_alternative<Population>(e.kind);
}

// Damped fixed-point iteration from t0, finished by Newton steps so that a
// repelling physical root is still reached. Newton runs on zeta(t) - z for
// S-transform ensembles (smooth through the poles of S) and on update(t) - t
// for the subordination forms.
inline StageResult solve_stage(const EnsembleTransform& e, cplx z, cplx t0, const DensityOptions& opt) {
    auto fixed_point_gap = [&](cplx t) -> cplx {
        try {
            return density_update(e, z, t) - t;
        } catch (const Error&) {
            return cplx(std::numeric_limits<double>::infinity(), 0);
        }
    };
    bool subordination = has_subordination(e);
    auto newton_residual = [&](cplx t) -> cplx {
        if (subordination) return fixed_point_gap(t);
        try {
            return (t + 1.0) / (t * s_transform<cplx>(e, t)) - z;
        } catch (const Error&) {
            return cplx(std::numeric_limits<double>::infinity(), 0);
        }
    };
    auto converged = [&](cplx t) {
        double gap = std::abs(fixed_point_gap(t));
        return std::pair{gap < opt.tolerance * (1 + std::abs(t)), gap};
    };
    cplx t = t0;
    cplx r = fixed_point_gap(t);
    for (int it = 0; it < std::min(opt.max_iterations, 200); ++it) {
        if (!std::isfinite(std::abs(r))) break;
        if (std::abs(r) < opt.tolerance * (1 + std::abs(t))) return {t, std::abs(r), true};
        cplx cand = t + opt.damping * r;
        cplx rc = fixed_point_gap(cand);
        if (!(std::abs(rc) < std::abs(r))) break;
        t = cand;
        r = rc;
    }
    t = t0;
    r = newton_residual(t);
    for (int it = 0; it < 200; ++it) {
        double size = std::abs(r);
        if (!std::isfinite(size)) return {t, size, false};
        cplx h = 1e-7 * (1 + std::abs(t));
        cplx slope = (newton_residual(t + h) - r) / h;
        cplx step = -r / slope;
        double shrink = 1;
        cplx cand = t + step;
        cplx rc = newton_residual(cand);
        while (!(std::abs(rc) < size) && shrink > 1e-8) {
            shrink /= 2;
            cand = t + shrink * step;
            rc = newton_residual(cand);
        }
        if (!(std::abs(rc) < size)) {
            auto [ok, gap] = converged(t);
            return {t, gap, ok};
        }
        t = cand;
        r = rc;
        if (std::abs(shrink * step) < 1e-3 * opt.tolerance * (1 + std::abs(t))) break;
        auto [ok, gap] = converged(t);
        if (ok) return {t, gap, true};
    }
    auto [ok, gap] = converged(t);
    return {t, gap, ok};
}

}  // namespace detail

// Bulk density (1/pi) Im g(lambda - i eps) with any zero-eigenvalue mass
// reported separately and removed from the bulk.
inline DensityResult spectral_density(const EnsembleTransform& e, const std::vector<double>& grid,
                                      std::optional<double> epsilon = std::nullopt,
                                      const DensityOptions& opt = {}) {
    DensityResult out;
    out.density.resize(grid.size());
    out.flagged.assign(grid.size(), false);
    if (const auto* w = std::get_if<Wigner>(&e.kind)) {
        for (std::size_t i = 0; i < grid.size(); ++i) out.density[i] = semicircle_density(w->sigma2, grid[i]);
        return out;
    }
    if (const auto* w = std::get_if<WhiteWishart>(&e.kind)) {
        for (std::size_t i = 0; i < grid.size(); ++i) out.density[i] = marchenko_pastur_density(w->q, grid[i]);
        if (w->q > 1) out.point_masses.push_back({0.0, (w->q - 1) / w->q});
        return out;
    }
    double mean = ensemble_mean(e);
    double eps = epsilon.value_or(1e-4 * mean);
    if (!(eps > 0)) throw DomainError("epsilon must be > 0");
    double mass = zero_mass(e);
    if (mass > 0) out.point_masses.push_back({0.0, mass});
    for (std::size_t i = 0; i < grid.size(); ++i) {
        double lam = grid[i];
        // Walk the imaginary part down to eps, tracking the physical branch
        // (Im g > 0); a failed stage retries with a smaller step.
        double im = std::max(1e4 * (mean + std::abs(lam)), eps);
        cplx t = mean / cplx(lam, -im);
        auto first = detail::solve_stage(e, cplx(lam, -im), t, opt);
        t = first.t;
        double residual = first.residual;
        double factor = 0.5;
        while (im > eps) {
            double next = std::max(eps, im * factor);
            cplx z(lam, -next);
            auto stage = detail::solve_stage(e, z, t, opt);
            if (stage.ok && ((stage.t + 1.0) / z).imag() >= 0) {
                t = stage.t;
                residual = stage.residual;
                im = next;
                factor = std::max(0.25, factor * factor);
            } else {
                factor = std::sqrt(factor);
                if (factor > 0.9999) {
                    residual = std::max(stage.residual, 1.0);
                    break;
                }
            }
        }
        cplx z(lam, -im);
        if (!(residual <= opt.tolerance * (1 + std::abs(t)))) {
            out.flagged[i] = true;
            if (!(residual <= 1e-3)) throw ConvergenceError("density fixed point did not converge at lambda = " + std::to_string(lam), residual);
        }
        cplx g = (t + 1.0) / z;
        double rho = g.imag() / std::numbers::pi;
        rho -= mass * im / (std::numbers::pi * (lam * lam + im * im));
        out.density[i] = std::max(rho, 0.0);
    }
    return out;
}

}  // namespace rfs
