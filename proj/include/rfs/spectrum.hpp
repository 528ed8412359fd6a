#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <boost/math/quadrature/exp_sinh.hpp>

#include "rfs/errors.hpp"

namespace rfs {

struct Level {
    double value;
    std::size_t multiplicity;
};

// Population eigenvalue law, stored as descending levels. An infinite
// power law keeps no levels and is summed lazily.
class Spectrum {
public:
    enum class Kind { Isotropic, Discrete, PowerLaw, Plateaus };

    static Spectrum isotropic(std::size_t dim) {
        if (dim == 0) throw ConfigError("isotropic spectrum needs dim >= 1");
        Spectrum s(Kind::Isotropic);
        s.levels_ = {{1.0, dim}};
        s.dim_ = dim;
        return s;
    }

    static Spectrum discrete(std::vector<double> values, std::vector<std::size_t> mults) {
        return from_levels(Kind::Discrete, std::move(values), std::move(mults));
    }

    static Spectrum plateaus(std::vector<double> values, std::vector<std::size_t> mults) {
        return from_levels(Kind::Plateaus, std::move(values), std::move(mults));
    }

    // dim = nullopt means infinitely many modes.
    static Spectrum power_law(double alpha, std::optional<std::size_t> dim, double scale = 1.0) {
        if (!(alpha > 0)) throw ConfigError("power law alpha must be > 0");
        if (!(scale > 0)) throw ConfigError("power law scale must be > 0");
        if (dim && *dim == 0) throw ConfigError("power law dim must be >= 1");
        Spectrum s(Kind::PowerLaw);
        s.alpha_ = alpha;
        s.scale_ = scale;
        if (dim) {
            s.dim_ = *dim;
            s.levels_.reserve(*dim);
            for (std::size_t k = 1; k <= *dim; ++k)
                s.levels_.push_back({scale * std::pow(double(k), -alpha), 1});
        }
        return s;
    }

    Kind kind() const { return kind_; }
    bool finite() const { return dim_.has_value(); }
    std::optional<std::size_t> dim() const { return dim_; }
    std::size_t dimension() const {
        if (!dim_) throw DomainError("spectrum has infinite dimension");
        return *dim_;
    }
    std::span<const Level> levels() const { return levels_; }
    double alpha() const { return alpha_; }
    double scale() const { return scale_; }

    double max_eigenvalue() const { return finite() ? levels_.front().value : scale_; }

    double mean_eigenvalue() const {
        double sum = 0;
        for (const auto& l : levels_) sum += l.value * double(l.multiplicity);
        return sum / double(dimension());
    }

    // Eigenvalue of the k-th mode (1-based) of a power law.
    double power_law_mode(double k) const { return scale_ * std::pow(k, -alpha_); }

    Spectrum scaled(double factor) const {
        if (!(factor > 0)) throw ConfigError("scale factor must be > 0");
        Spectrum s = *this;
        for (auto& l : s.levels_) l.value *= factor;
        s.scale_ *= factor;
        return s;
    }

    // Eigenvalues expanded in descending order, one entry per mode.
    std::vector<double> expanded() const {
        std::vector<double> out;
        out.reserve(dimension());
        for (const auto& l : levels_) out.insert(out.end(), l.multiplicity, l.value);
        return out;
    }

private:
    explicit Spectrum(Kind k) : kind_(k) {}

    static Spectrum from_levels(Kind kind, std::vector<double> values, std::vector<std::size_t> mults) {
        if (values.empty()) throw ConfigError("spectrum needs at least one eigenvalue");
        if (values.size() != mults.size())
            throw ConfigError("eigenvalue and multiplicity lists differ in length");
        std::vector<Level> levels;
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!(values[i] > 0) || !std::isfinite(values[i]))
                throw ConfigError("eigenvalues must be finite and > 0");
            if (mults[i] == 0) throw ConfigError("multiplicities must be >= 1");
            levels.push_back({values[i], mults[i]});
        }
        std::stable_sort(levels.begin(), levels.end(),
                         [](const Level& a, const Level& b) { return a.value > b.value; });
        Spectrum s(kind);
        s.dim_ = std::accumulate(levels.begin(), levels.end(), std::size_t{0},
                                 [](std::size_t acc, const Level& l) { return acc + l.multiplicity; });
        s.levels_ = std::move(levels);
        return s;
    }

    Kind kind_;
    std::vector<Level> levels_;
    std::optional<std::size_t> dim_;
    double alpha_ = 0;
    double scale_ = 1;
};

struct ExplicitTeacher {
    std::vector<double> coefficients;  // aligned with the descending eigen-order
};

struct SourcePowerLawTeacher {
    double r;
};

struct IsotropicAverageTeacher {
    double norm = 1.0;
};

using Teacher = std::variant<ExplicitTeacher, SourcePowerLawTeacher, IsotropicAverageTeacher>;

namespace detail {

inline constexpr std::size_t kPowerLawHead = 2000;

// Sum of g(k) for k >= k0 by Euler-Maclaurin around a quadrature of the tail.
template <class G>
double power_law_tail(G g, double k0) {
    boost::math::quadrature::exp_sinh<double> integrator;
    auto integrand = [&](double s) {
        if (s > 700) return 0.0;
        double k = std::exp(s);
        double v = g(k) * k;
        return std::isfinite(v) ? v : 0.0;
    };
    double integral = integrator.integrate(integrand, std::log(k0), std::numeric_limits<double>::infinity(),
                                           1e-12);
    double h = 1e-3 * k0;
    double slope = (g(k0 + h) - g(k0 - h)) / (2 * h);
    return integral + 0.5 * g(k0) - slope / 12.0;
}

}  // namespace detail

// Per-level teacher power sum_{k in level} w_k^2 for finite spectra.
inline std::vector<double> teacher_level_power(const Spectrum& s, const Teacher& teacher) {
    auto levels = s.levels();
    std::vector<double> out(levels.size(), 0.0);
    if (const auto* e = std::get_if<ExplicitTeacher>(&teacher)) {
        if (!s.finite() || e->coefficients.size() != s.dimension())
            throw ConfigError("explicit teacher length must equal the spectrum dimension");
        std::size_t k = 0;
        for (std::size_t i = 0; i < levels.size(); ++i)
            for (std::size_t m = 0; m < levels[i].multiplicity; ++m, ++k)
                out[i] += e->coefficients[k] * e->coefficients[k];
    } else if (const auto* sp = std::get_if<SourcePowerLawTeacher>(&teacher)) {
        if (s.kind() != Spectrum::Kind::PowerLaw)
            throw ConfigError("source power-law teacher requires a power-law spectrum");
        if (!(sp->r > 0)) throw ConfigError("source exponent r must be > 0");
        for (std::size_t i = 0; i < levels.size(); ++i) {
            double k = double(i + 1);
            out[i] = std::pow(k, -(1 + 2 * s.alpha() * sp->r)) / levels[i].value;
        }
    } else {
        const auto& iso = std::get<IsotropicAverageTeacher>(teacher);
        if (!(iso.norm > 0)) throw ConfigError("teacher norm must be > 0");
        double d = double(s.dimension());
        for (std::size_t i = 0; i < levels.size(); ++i) out[i] = iso.norm * double(levels[i].multiplicity) / d;
    }
    return out;
}

// Teacher coefficients expanded per mode (finite spectra only).
inline std::vector<double> teacher_coefficients(const Spectrum& s, const Teacher& teacher) {
    if (const auto* e = std::get_if<ExplicitTeacher>(&teacher)) {
        if (e->coefficients.size() != s.dimension())
            throw ConfigError("explicit teacher length must equal the spectrum dimension");
        return e->coefficients;
    }
    auto power = teacher_level_power(s, teacher);
    std::vector<double> out;
    out.reserve(s.dimension());
    auto levels = s.levels();
    for (std::size_t i = 0; i < levels.size(); ++i) {
        double per_mode = std::sqrt(power[i] / double(levels[i].multiplicity));
        out.insert(out.end(), levels[i].multiplicity, per_mode);
    }
    return out;
}

namespace detail {

// sum_k m_k f(eta_k) over modes.
template <class F>
double count_sum(const Spectrum& s, F f) {
    if (s.finite()) {
        double acc = 0;
        for (const auto& l : s.levels()) acc += double(l.multiplicity) * f(l.value);
        return acc;
    }
    if (!(s.alpha() > 1)) throw DomainError("infinite power law with alpha <= 1 is not normalizable");
    double acc = 0;
    for (std::size_t k = 1; k < kPowerLawHead; ++k) acc += f(s.power_law_mode(double(k)));
    return acc + power_law_tail([&](double k) { return f(s.power_law_mode(k)); }, double(kPowerLawHead));
}

// sum_k w_k^2 f(eta_k) over modes.
template <class F>
double teacher_sum(const Spectrum& s, const Teacher& teacher, F f) {
    if (s.finite()) {
        auto power = teacher_level_power(s, teacher);
        auto levels = s.levels();
        double acc = 0;
        for (std::size_t i = 0; i < levels.size(); ++i) acc += power[i] * f(levels[i].value);
        return acc;
    }
    if (std::holds_alternative<IsotropicAverageTeacher>(teacher))
        throw DomainError("isotropic teacher average needs a finite spectrum");
    const auto* sp = std::get_if<SourcePowerLawTeacher>(&teacher);
    if (!sp) throw ConfigError("explicit teacher needs a finite spectrum");
    if (!(sp->r > 0)) throw ConfigError("source exponent r must be > 0");
    double decay = 1 + 2 * s.alpha() * sp->r;
    auto g = [&](double k) {
        double eta = s.power_law_mode(k);
        return std::pow(k, -decay) / eta * f(eta);
    };
    double acc = 0;
    for (std::size_t k = 1; k < kPowerLawHead; ++k) acc += g(double(k));
    return acc + power_law_tail(g, double(kPowerLawHead));
}

inline void check_kappa(double kappa) {
    if (!(kappa >= 0) || !std::isfinite(kappa)) throw DomainError("kappa must be finite and >= 0");
}

}  // namespace detail

// Unnormalized traces Tr[S(S+k)^-1] and Tr[S^2(S+k)^-2]; valid for infinite
// normalizable power laws at kappa > 0.
inline double df1_trace(const Spectrum& s, double kappa) {
    detail::check_kappa(kappa);
    if (kappa == 0) {
        if (!s.finite()) throw DomainError("infinite spectrum has unbounded rank at kappa = 0");
        return double(s.dimension());
    }
    return detail::count_sum(s, [kappa](double eta) { return eta / (eta + kappa); });
}

inline double df2_trace(const Spectrum& s, double kappa) {
    detail::check_kappa(kappa);
    if (kappa == 0) {
        if (!s.finite()) throw DomainError("infinite spectrum has unbounded rank at kappa = 0");
        return double(s.dimension());
    }
    return detail::count_sum(s, [kappa](double eta) {
        double x = eta / (eta + kappa);
        return x * x;
    });
}

// d/dkappa of df1_trace.
inline double df1_trace_prime(const Spectrum& s, double kappa) {
    detail::check_kappa(kappa);
    return -detail::count_sum(s, [kappa](double eta) { return eta / ((eta + kappa) * (eta + kappa)); });
}

inline double df1(const Spectrum& s, double kappa) {
    if (!s.finite()) throw DomainError("normalized df1 is undefined for infinite dimension; use df1_trace");
    return df1_trace(s, kappa) / double(s.dimension());
}

inline double df2(const Spectrum& s, double kappa) {
    if (!s.finite()) throw DomainError("normalized df2 is undefined for infinite dimension; use df2_trace");
    return df2_trace(s, kappa) / double(s.dimension());
}

inline double df1_prime(const Spectrum& s, double kappa) {
    return df1_trace_prime(s, kappa) / double(s.dimension());
}

inline double tf1(const Spectrum& s, const Teacher& t, double kappa) {
    detail::check_kappa(kappa);
    return detail::teacher_sum(s, t, [kappa](double eta) { return eta / (eta + kappa); });
}

inline double tf1_prime(const Spectrum& s, const Teacher& t, double kappa) {
    detail::check_kappa(kappa);
    return -detail::teacher_sum(s, t, [kappa](double eta) { return eta / ((eta + kappa) * (eta + kappa)); });
}

inline double tf2(const Spectrum& s, const Teacher& t, double kappa) {
    detail::check_kappa(kappa);
    return detail::teacher_sum(s, t, [kappa](double eta) {
        double x = eta / (eta + kappa);
        return x * x;
    });
}

// w^T Sigma w.
inline double teacher_signal(const Spectrum& s, const Teacher& t) {
    return detail::teacher_sum(s, t, [](double eta) { return eta; });
}

}  // namespace rfs
