#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <thread>
#include <vector>

#include "rfs/errors.hpp"
#include "rfs/free_transforms.hpp"
#include "rfs/renormalizer.hpp"
#include "rfs/spectrum.hpp"

namespace rfs {

enum class StreamPurpose : std::uint64_t {
    Data = 1,
    Labels,
    Features,
    FeatureNoise,
    Test,
    Rotation,
    Spectrum,
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace detail

// Seed of the stream for one (data seed, feature seed, purpose) cell; no
// dependence on evaluation order.
inline std::uint64_t stream_seed(std::uint64_t base, std::uint64_t data_index, std::uint64_t feature_index,
                                 StreamPurpose purpose) {
    std::uint64_t h = detail::splitmix64(base ^ detail::splitmix64(static_cast<std::uint64_t>(purpose)));
    h = detail::splitmix64(h ^ detail::splitmix64(data_index + 0x632be59bd9b4e019ULL));
    return detail::splitmix64(h ^ detail::splitmix64(feature_index + 0x8cb92ba72f3d8dd7ULL));
}

class NormalStream {
public:
    NormalStream(std::uint64_t base, std::uint64_t data_index, std::uint64_t feature_index, StreamPurpose purpose)
        : engine_(stream_seed(base, data_index, feature_index, purpose)) {}

    double operator()() { return normal_(engine_); }

    Eigen::MatrixXd matrix(Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
        Eigen::MatrixXd out(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < rows; ++r) out(r, c) = stddev * normal_(engine_);
        return out;
    }

    Eigen::VectorXd vector(Eigen::Index n, double stddev = 1.0) { return matrix(n, 1, stddev).col(0); }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_;
};

// Haar-distributed orthogonal matrix (QR of a Gaussian with sign correction).
inline Eigen::MatrixXd haar_orthogonal(std::size_t rows, std::size_t cols, NormalStream& rng) {
    Eigen::MatrixXd g = rng.matrix(Eigen::Index(rows), Eigen::Index(cols));
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(Eigen::Index(rows), Eigen::Index(cols));
    const Eigen::MatrixXd& r = qr.matrixQR();
    for (Eigen::Index k = 0; k < Eigen::Index(cols); ++k)
        if (r(k, k) < 0) q.col(k) = -q.col(k);
    return q;
}

// Fraction of degrees of freedom resolved at ridge lambda, from the
// eigenvalues of the sample feature covariance (missing entries are zeros).
inline double empirical_df1(std::span<const double> covariance_eigs, std::size_t features, double lambda) {
    if (!(lambda >= 0)) throw DomainError("ridge must be >= 0");
    if (features == 0) throw DomainError("feature count must be >= 1");
    double acc = 0;
    for (double e : covariance_eigs) {
        if (e <= 0) continue;
        acc += lambda > 0 ? e / (e + lambda) : 1.0;
    }
    return acc / double(features);
}

// 1 / ((1/P) Tr[(K + lambda)^-1]) from the P eigenvalues of the Gram K = Phi Phi^T / P.
inline double empirical_kappa(std::span<const double> gram_eigs, double lambda) {
    if (gram_eigs.empty()) throw DomainError("gram spectrum is empty");
    double acc = 0;
    for (double e : gram_eigs) {
        double denom = std::max(e, 0.0) + lambda;
        if (denom <= 0) return 0.0;
        acc += 1.0 / denom;
    }
    return double(gram_eigs.size()) / acc;
}

inline double empirical_gcv(double train_error, double kappa_hat, double lambda) {
    if (!(lambda > 0)) throw DomainError("empirical gcv requires lambda > 0");
    double f = kappa_hat / lambda;
    return train_error * f * f;
}

struct FitOptions {
    std::uint64_t base_seed = 0;
    std::size_t n_test = 0;
    // Orthogonal basis change applied to the covariates before sampling.
    std::shared_ptr<const Eigen::MatrixXd> rotation;
};

struct CellFit {
    Eigen::VectorXd weights;          // effective input-space weights, eigenbasis
    Eigen::VectorXd feature_weights;  // readout weights
    // Error vectors Sigma^{1/2}(w_hat - w) split by the label source; the
    // feature-space parts carry the readout weights for the feature-noise term.
    Eigen::VectorXd signal_error;
    Eigen::VectorXd noise_error;
    Eigen::VectorXd signal_readout;
    Eigen::VectorXd noise_readout;
    double e_g = 0;
    double e_tr = 0;
    double e_test = std::numeric_limits<double>::quiet_NaN();
    double df1_hat = 0;
    double kappa_hat = 0;
    double gcv_hat = std::numeric_limits<double>::quiet_NaN();
    bool ill_conditioned = false;
    bool near_interpolation = false;
};

namespace detail {

inline std::vector<double> eigen_values_of(const Spectrum& s) {
    if (!s.finite()) throw ConfigError("monte carlo needs a finite covariate spectrum");
    return s.expanded();
}

// Feature chain F_1 ... F_L mapping inputs to the readout features.
inline Eigen::MatrixXd sample_feature_chain(const ModelSpec& m, std::size_t feature_seed, std::uint64_t base) {
    std::size_t d = m.covariates.dimension();
    NormalStream rng(base, 0, feature_seed, StreamPurpose::Features);
    Eigen::MatrixXd chain = Eigen::MatrixXd::Identity(Eigen::Index(d), Eigen::Index(d));
    std::size_t in = d;
    for (const auto& layer : m.layers) {
        Eigen::MatrixXd f;
        switch (layer.kind) {
            case LayerKind::GaussianWhite:
                f = rng.matrix(Eigen::Index(in), Eigen::Index(layer.width), 1.0 / std::sqrt(double(in)));
                break;
            case LayerKind::GaussianStructured: {
                f = rng.matrix(Eigen::Index(in), Eigen::Index(layer.width), 1.0 / std::sqrt(double(in)));
                auto eta = layer.weight_spectrum->expanded();
                for (std::size_t k = 0; k < layer.width; ++k) f.col(Eigen::Index(k)) *= std::sqrt(eta[k]);
                break;
            }
            case LayerKind::OrthogonalProjection:
                f = haar_orthogonal(in, layer.width, rng);
                break;
        }
        chain = chain * f;
        in = layer.width;
    }
    return chain;
}

struct RidgeSolve {
    Eigen::MatrixXd basis;  // eigenvectors of the solved system
    Eigen::VectorXd eigs;
    bool primal;
};

inline RidgeSolve decompose(const Eigen::MatrixXd& phi, bool primal) {
    double p = double(phi.rows());
    Eigen::MatrixXd g;
    if (primal) {
        g = Eigen::MatrixXd::Zero(phi.cols(), phi.cols());
        g.selfadjointView<Eigen::Lower>().rankUpdate(phi.transpose(), 1.0 / p);
    } else {
        g = Eigen::MatrixXd::Zero(phi.rows(), phi.rows());
        g.selfadjointView<Eigen::Lower>().rankUpdate(phi, 1.0 / p);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
    if (es.info() != Eigen::Success) throw ConvergenceError("eigendecomposition failed", 0.0);
    return {es.eigenvectors(), es.eigenvalues().cwiseMax(0.0), primal};
}

// Spectral filter 1/(e + lambda), pseudo-inverse at lambda = 0.
inline Eigen::VectorXd ridge_filter(const Eigen::VectorXd& eigs, double lambda) {
    double cutoff = eigs.size() ? eigs.maxCoeff() * double(eigs.size()) * std::numeric_limits<double>::epsilon() : 0;
    Eigen::VectorXd out(eigs.size());
    for (Eigen::Index k = 0; k < eigs.size(); ++k) {
        if (lambda > 0)
            out[k] = 1.0 / (eigs[k] + lambda);
        else
            out[k] = eigs[k] > cutoff ? 1.0 / eigs[k] : 0.0;
    }
    return out;
}

inline Eigen::VectorXd solve_readout(const Eigen::MatrixXd& phi, const RidgeSolve& rs, const Eigen::VectorXd& filt,
                                     const Eigen::VectorXd& y) {
    double p = double(phi.rows());
    if (rs.primal) {
        Eigen::VectorXd rhs = phi.transpose() * y / p;
        return rs.basis * (filt.asDiagonal() * (rs.basis.transpose() * rhs));
    }
    Eigen::VectorXd alpha = rs.basis * (filt.asDiagonal() * (rs.basis.transpose() * y)) / p;
    return phi.transpose() * alpha;
}

}  // namespace detail

// One ridge fit on data seed data_seed and feature seed feature_seed.
inline CellFit sample_and_fit(const ModelSpec& m, std::size_t data_seed, std::size_t feature_seed,
                              const FitOptions& opt = {}) {
    detail::validate_layers(m);
    if (m.samples == 0) throw ConfigError("samples must be >= 1");
    const std::vector<double> eta = detail::eigen_values_of(m.covariates);
    const auto d = Eigen::Index(eta.size());
    const auto p = Eigen::Index(m.samples);
    Eigen::VectorXd sqrt_eta(d), teacher(d);
    auto coeffs = teacher_coefficients(m.covariates, m.teacher);
    for (Eigen::Index k = 0; k < d; ++k) {
        sqrt_eta[k] = std::sqrt(eta[std::size_t(k)]);
        teacher[k] = coeffs[std::size_t(k)];
    }
    const Eigen::MatrixXd* rot = opt.rotation.get();
    if (rot && (rot->rows() != d || rot->cols() != d)) throw ConfigError("rotation must be D x D");

    // Covariates: eigenbasis rows z * Sigma^{1/2}, or rows of N(0, O Sigma O^T).
    NormalStream data_rng(opt.base_seed, data_seed, 0, StreamPurpose::Data);
    Eigen::MatrixXd z = data_rng.matrix(p, d);
    Eigen::MatrixXd x;
    Eigen::VectorXd w_input = teacher;
    if (rot) {
        Eigen::VectorXd var = sqrt_eta.array().square();
        Eigen::MatrixXd cov = *rot * var.asDiagonal() * rot->transpose();
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        if (llt.info() != Eigen::Success) throw DomainError("covariance is not positive definite");
        x = z * llt.matrixL().transpose();
        w_input = *rot * teacher;
    } else {
        x = z * sqrt_eta.asDiagonal();
    }
    NormalStream label_rng(opt.base_seed, data_seed, 0, StreamPurpose::Labels);
    Eigen::VectorXd eps = label_rng.vector(p, std::sqrt(m.label_noise_var));
    Eigen::VectorXd y_signal = x * w_input;

    const bool has_chain = !m.layers.empty();
    Eigen::MatrixXd chain;
    Eigen::MatrixXd phi;
    if (has_chain) {
        chain = detail::sample_feature_chain(m, feature_seed, opt.base_seed);
        phi = x * chain;
    } else {
        phi = x;
    }
    if (m.feature_noise_var > 0) {
        NormalStream xi_rng(opt.base_seed, data_seed, feature_seed, StreamPurpose::FeatureNoise);
        phi += xi_rng.matrix(p, phi.cols(), std::sqrt(m.feature_noise_var));
    }
    const auto n = phi.cols();
    const bool primal = double(n) <= 1.2 * double(p);
    auto rs = detail::decompose(phi, primal);
    auto filt = detail::ridge_filter(rs.eigs, m.ridge);
    if (m.ridge == 0)
        for (Eigen::Index k = 0; k < filt.size(); ++k)
            if (filt[k] == 0) rs.eigs[k] = 0;

    CellFit out;
    out.signal_readout = detail::solve_readout(phi, rs, filt, y_signal);
    out.noise_readout = detail::solve_readout(phi, rs, filt, eps);
    out.feature_weights = out.signal_readout + out.noise_readout;

    auto to_eigenbasis = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
        Eigen::VectorXd w = has_chain ? Eigen::VectorXd(chain * v) : v;
        return rot ? Eigen::VectorXd(rot->transpose() * w) : w;
    };
    Eigen::VectorXd ws = to_eigenbasis(out.signal_readout);
    Eigen::VectorXd wn = to_eigenbasis(out.noise_readout);
    out.weights = ws + wn;
    out.signal_error = sqrt_eta.cwiseProduct(ws - teacher);
    out.noise_error = sqrt_eta.cwiseProduct(wn);
    double xi_part = m.feature_noise_var * out.feature_weights.squaredNorm();
    out.e_g = (out.signal_error + out.noise_error).squaredNorm() + xi_part;
    if (m.feature_noise_var == 0) {
        out.signal_readout.resize(0);
        out.noise_readout.resize(0);
    }

    Eigen::VectorXd resid = y_signal + eps - phi * out.feature_weights;
    out.e_tr = resid.squaredNorm() / double(p);

    // Both spectra share their nonzero eigenvalues; pad the smaller with zeros.
    std::vector<double> eigs(rs.eigs.data(), rs.eigs.data() + rs.eigs.size());
    std::sort(eigs.begin(), eigs.end(), std::greater<>());
    std::vector<double> gram(std::size_t(p), 0.0);
    std::copy_n(eigs.begin(), std::min(eigs.size(), gram.size()), gram.begin());
    out.df1_hat = empirical_df1(eigs, std::size_t(n), m.ridge);
    out.kappa_hat = empirical_kappa(gram, m.ridge);
    out.near_interpolation = double(n) / double(p) * out.df1_hat >= 1 - 1e-12;
    if (m.ridge > 0) out.gcv_hat = empirical_gcv(out.e_tr, out.kappa_hat, m.ridge);
    if (m.ridge == 0) {
        // Condition number over the generically nonzero part of the spectrum.
        double low = eigs[std::size_t(std::min(n, p)) - 1];
        out.ill_conditioned = !(low > 0) || eigs.front() / low > 1e12;
    }

    if (opt.n_test > 0) {
        NormalStream test_rng(opt.base_seed, data_seed, feature_seed, StreamPurpose::Test);
        Eigen::MatrixXd zt = test_rng.matrix(Eigen::Index(opt.n_test), d);
        Eigen::VectorXd pred_gap = zt * sqrt_eta.cwiseProduct(out.weights - teacher);
        if (m.feature_noise_var > 0)
            pred_gap += test_rng.matrix(Eigen::Index(opt.n_test), n, std::sqrt(m.feature_noise_var)) * out.feature_weights;
        out.e_test = pred_gap.squaredNorm() / double(opt.n_test);
    }
    return out;
}

struct McPlan {
    ModelSpec model;
    std::size_t n_data_seeds = 20;
    std::size_t n_feature_seeds = 1;
    std::size_t n_test = 256;
    std::uint64_t base_seed = 0;
    bool rotate_covariates = false;
    unsigned threads = 0;  // 0 = hardware concurrency
};

struct McGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    double feature_noise_var = 0;
    bool has_features = false;
    std::vector<CellFit> cells;

    const CellFit& at(std::size_t i, std::size_t j) const { return cells[i * cols + j]; }
};

inline McGrid run_grid(const McPlan& plan) {
    if (plan.n_data_seeds < 1 || plan.n_feature_seeds < 1) throw ConfigError("seed grid sizes must be >= 1");
    if (plan.n_test < 1) throw ConfigError("n_test must be >= 1");
    McGrid grid;
    grid.rows = plan.n_data_seeds;
    grid.cols = plan.n_feature_seeds;
    grid.feature_noise_var = plan.model.feature_noise_var;
    grid.has_features = !plan.model.layers.empty();
    grid.cells.resize(grid.rows * grid.cols);

    FitOptions opt{plan.base_seed, plan.n_test, nullptr};
    if (plan.rotate_covariates) {
        NormalStream rng(plan.base_seed, 0, 0, StreamPurpose::Rotation);
        std::size_t d = plan.model.covariates.dimension();
        opt.rotation = std::make_shared<const Eigen::MatrixXd>(haar_orthogonal(d, d, rng));
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    auto work = [&] {
        for (std::size_t k = next++; k < grid.cells.size() && !failed; k = next++) {
            try {
                grid.cells[k] = sample_and_fit(plan.model, k / grid.cols, k % grid.cols, opt);
            } catch (...) {
                if (!failed.exchange(true)) failure = std::current_exception();
            }
        }
    };
    unsigned threads = plan.threads ? plan.threads : std::max(1u, std::thread::hardware_concurrency());
    threads = unsigned(std::min<std::size_t>(threads, grid.cells.size()));
    {
        std::vector<std::jthread> pool;
        for (unsigned t = 1; t < threads; ++t) pool.emplace_back(work);
        work();
    }
    if (failure) std::rethrow_exception(failure);
    return grid;
}

// Bagged predictor: average the fits of consecutive groups of `bags` data seeds.
inline McGrid bag_rows(const McGrid& g, std::size_t bags) {
    if (bags < 1 || g.rows < bags) throw InsufficientReplicationError("not enough data seeds to bag");
    McGrid out = g;
    out.rows = g.rows / bags;
    out.cells.assign(out.rows * out.cols, CellFit{});
    for (std::size_t b = 0; b < out.rows; ++b)
        for (std::size_t j = 0; j < g.cols; ++j) {
            CellFit acc = g.at(b * bags, j);
            for (std::size_t r = 1; r < bags; ++r) {
                const CellFit& c = g.at(b * bags + r, j);
                acc.signal_error += c.signal_error;
                acc.noise_error += c.noise_error;
                acc.signal_readout += c.signal_readout;
                acc.noise_readout += c.noise_readout;
                acc.weights += c.weights;
                acc.feature_weights += c.feature_weights;
            }
            double s = 1.0 / double(bags);
            acc.signal_error *= s;
            acc.noise_error *= s;
            acc.signal_readout *= s;
            acc.noise_readout *= s;
            acc.weights *= s;
            acc.feature_weights *= s;
            acc.e_g = (acc.signal_error + acc.noise_error).squaredNorm() +
                      g.feature_noise_var * acc.feature_weights.squaredNorm();
            out.cells[b * out.cols + j] = std::move(acc);
        }
    return out;
}

struct Estimate {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double se = std::numeric_limits<double>::quiet_NaN();
};

struct McResult {
    Estimate e_g, e_tr, e_test, df1_hat, kappa_hat, gcv_hat;
    Estimate bias2, var_x, var_f, var_xf, var_xeps, var_xfeps;
    std::size_t cells = 0;
    std::size_t ill_conditioned = 0;
    std::size_t near_interpolation = 0;
};

namespace detail {

inline constexpr std::size_t kStatCount = 12;
using StatVector = std::array<double, kStatCount>;

// Crossed random-effects estimates on the sub-grid rows x cols. Error vectors
// live in input space plus one feature-noise block per feature seed, so
// blocks of different feature seeds are orthogonal.
inline StatVector grid_statistics(const McGrid& g, std::span<const std::size_t> rows,
                                  std::span<const std::size_t> cols) {
    const double I = double(rows.size()), J = double(cols.size());
    const double xi = g.feature_noise_var;
    const bool with_xi = xi > 0;
    StatVector out;
    out.fill(std::numeric_limits<double>::quiet_NaN());

    auto mean_of = [&](auto field) {
        double acc = 0;
        for (auto i : rows)
            for (auto j : cols) acc += field(g.at(i, j));
        return acc / (I * J);
    };
    out[0] = mean_of([](const CellFit& c) { return c.e_g; });
    out[1] = mean_of([](const CellFit& c) { return c.e_tr; });
    out[2] = mean_of([](const CellFit& c) { return c.e_test; });
    out[3] = mean_of([](const CellFit& c) { return c.df1_hat; });
    out[4] = mean_of([](const CellFit& c) { return c.kappa_hat; });
    out[5] = mean_of([](const CellFit& c) { return c.gcv_hat; });

    const bool separable = rows.size() >= 2 && (cols.size() >= 2 || !g.has_features);
    if (!separable) return out;

    const auto d = g.at(rows[0], cols[0]).signal_error.size();
    // Sums of squared norms of cells, row means, column means and the grand mean.
    double cell_s = 0, row_s = 0, col_s = 0, grand_s = 0;
    double cell_n = 0, row_n = 0;
    Eigen::VectorXd grand = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd row_mean(d), noise_mean(d);
    for (auto i : rows) {
        row_mean.setZero();
        noise_mean.setZero();
        double row_xi = 0, noise_xi = 0;
        for (auto j : cols) {
            const CellFit& c = g.at(i, j);
            row_mean += c.signal_error;
            noise_mean += c.noise_error;
            cell_s += c.signal_error.squaredNorm();
            cell_n += c.noise_error.squaredNorm();
            if (with_xi) {
                double s2 = xi * c.signal_readout.squaredNorm(), n2 = xi * c.noise_readout.squaredNorm();
                cell_s += s2;
                cell_n += n2;
                row_xi += s2;
                noise_xi += n2;
            }
        }
        row_mean /= J;
        noise_mean /= J;
        grand += row_mean;
        row_s += row_mean.squaredNorm() + row_xi / (J * J);
        row_n += noise_mean.squaredNorm() + noise_xi / (J * J);
    }
    grand /= I;
    grand_s = grand.squaredNorm();
    Eigen::VectorXd col_mean(d);
    for (auto j : cols) {
        col_mean.setZero();
        Eigen::VectorXd col_readout;
        for (auto i : rows) {
            const CellFit& c = g.at(i, j);
            col_mean += c.signal_error;
            if (with_xi) col_readout = col_readout.size() ? Eigen::VectorXd(col_readout + c.signal_readout) : c.signal_readout;
        }
        col_mean /= I;
        double block = with_xi ? xi * (col_readout / I).squaredNorm() : 0.0;
        col_s += col_mean.squaredNorm() + block;
        grand_s += block / (J * J);
    }

    double var_a, var_b, var_c, var_xfeps, var_xeps;
    if (cols.size() >= 2) {
        double ss_a = J * row_s - I * J * grand_s;
        double ss_b = I * col_s - I * J * grand_s;
        double ss_e = cell_s - J * row_s - I * col_s + I * J * grand_s;
        double ms_a = ss_a / (I - 1), ms_b = ss_b / (J - 1), ms_e = ss_e / ((I - 1) * (J - 1));
        var_a = (ms_a - ms_e) / J;
        var_b = (ms_b - ms_e) / I;
        var_c = ms_e;
        var_xfeps = (cell_n - J * row_n) / (I * (J - 1));
        var_xeps = row_n / I - var_xfeps / J;
    } else {
        // No feature randomness: every column is the same fit.
        var_a = (row_s - I * grand_s) / (I - 1);
        var_b = 0;
        var_c = 0;
        var_xfeps = 0;
        var_xeps = row_n / I;
    }
    out[6] = grand_s - var_a / I - var_b / J - var_c / (I * J);
    out[7] = var_a;
    out[8] = var_b;
    out[9] = var_c;
    out[10] = var_xeps;
    out[11] = var_xfeps;
    return out;
}

}  // namespace detail

// Means with delete-one jackknife standard errors; for a crossed grid the
// row and column jackknife variances are added.
inline McResult summarize(const McGrid& g) {
    std::vector<std::size_t> rows(g.rows), cols(g.cols);
    std::iota(rows.begin(), rows.end(), 0);
    std::iota(cols.begin(), cols.end(), 0);
    auto full = detail::grid_statistics(g, rows, cols);
    detail::StatVector var{};

    auto jackknife = [&](std::vector<std::size_t>& axis, bool is_rows) {
        std::size_t n = axis.size();
        if (n < 3) return false;
        std::vector<detail::StatVector> reps;
        for (std::size_t k = 0; k < n; ++k) {
            std::vector<std::size_t> kept;
            for (std::size_t t = 0; t < n; ++t)
                if (t != k) kept.push_back(axis[t]);
            reps.push_back(is_rows ? detail::grid_statistics(g, kept, cols) : detail::grid_statistics(g, rows, kept));
        }
        for (std::size_t q = 0; q < detail::kStatCount; ++q) {
            double m = 0;
            for (auto& r : reps) m += r[q];
            m /= double(n);
            double s = 0;
            for (auto& r : reps) s += (r[q] - m) * (r[q] - m);
            var[q] += double(n - 1) / double(n) * s;
        }
        return true;
    };
    bool row_ok = jackknife(rows, true);
    // Identical columns without a feature chain carry no column variance.
    bool col_ok = g.has_features && g.cols > 1 ? jackknife(cols, false) : true;

    McResult out;
    Estimate* fields[] = {&out.e_g,  &out.e_tr,  &out.e_test, &out.df1_hat, &out.kappa_hat, &out.gcv_hat,
                          &out.bias2, &out.var_x, &out.var_f,  &out.var_xf,  &out.var_xeps,  &out.var_xfeps};
    for (std::size_t q = 0; q < detail::kStatCount; ++q) {
        fields[q]->mean = full[q];
        fields[q]->se = row_ok && col_ok ? std::sqrt(var[q]) : std::numeric_limits<double>::infinity();
        if (std::isnan(full[q])) fields[q]->se = std::numeric_limits<double>::quiet_NaN();
    }
    out.cells = g.cells.size();
    for (const auto& c : g.cells) {
        out.ill_conditioned += c.ill_conditioned;
        out.near_interpolation += c.near_interpolation;
    }
    return out;
}

inline McResult simulate(const McPlan& plan) { return summarize(run_grid(plan)); }

inline McResult crossed_variance_components(const McPlan& plan) {
    if (plan.n_data_seeds < 2 || plan.n_feature_seeds < 2)
        throw InsufficientReplicationError("variance components need at least 2 data seeds and 2 feature seeds");
    return simulate(plan);
}

// Sorted eigenvalues of one draw of the ensemble. `size` is the matrix
// dimension for the Wishart kinds; structured and deep kinds carry their own.
inline std::vector<double> empirical_spectrum(const EnsembleTransform& e, std::size_t size, std::uint64_t seed) {
    NormalStream rng(seed, 0, 0, StreamPurpose::Spectrum);
    auto gram_eigs = [](const Eigen::MatrixXd& a, double scale, std::size_t padded_dim) {
        // Nonzero eigenvalues of a^T a * scale from the smaller Gram, padded with exact zeros.
        Eigen::MatrixXd g = a.rows() <= a.cols() ? Eigen::MatrixXd(a * a.transpose()) : Eigen::MatrixXd(a.transpose() * a);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g * scale, Eigen::EigenvaluesOnly);
        std::vector<double> out(padded_dim, 0.0);
        for (Eigen::Index k = 0; k < es.eigenvalues().size(); ++k)
            out[std::size_t(k)] = std::max(es.eigenvalues()[k], 0.0);
        std::sort(out.begin(), out.end());
        return out;
    };
    auto check_size = [](std::size_t n) {
        if (n == 0 || n > 6000) throw ConfigError("empirical spectrum size must be in [1, 6000]");
    };
    if (const auto* w = std::get_if<WhiteWishart>(&e.kind)) {
        check_size(size);
        auto p = std::size_t(std::llround(double(size) / w->q));
        check_size(p);
        return gram_eigs(rng.matrix(Eigen::Index(p), Eigen::Index(size)), 1.0 / double(p), size);
    }
    if (const auto* w = std::get_if<WishartGram>(&e.kind)) {
        check_size(size);
        auto n = std::size_t(std::llround(double(size) * w->q));
        check_size(n);
        return gram_eigs(rng.matrix(Eigen::Index(n), Eigen::Index(size)), 1.0 / double(size), size);
    }
    if (const auto* w = std::get_if<StructuredWishart>(&e.kind)) {
        auto eta = detail::eigen_values_of(w->population);
        std::size_t n = eta.size();
        check_size(n);
        auto p = std::size_t(std::llround(double(n) / w->q));
        check_size(p);
        Eigen::MatrixXd x = rng.matrix(Eigen::Index(p), Eigen::Index(n));
        for (std::size_t k = 0; k < n; ++k) x.col(Eigen::Index(k)) *= std::sqrt(eta[k]);
        return gram_eigs(x, 1.0 / double(p), n);
    }
    if (const auto* w = std::get_if<DeepWhiteWishart>(&e.kind)) {
        if (w->widths.size() < 2) throw ConfigError("deep wishart needs at least two widths");
        for (auto n : w->widths) check_size(n);
        Eigen::MatrixXd prod = rng.matrix(Eigen::Index(w->widths[0]), Eigen::Index(w->widths[1]),
                                          1.0 / std::sqrt(double(w->widths[0])));
        for (std::size_t l = 2; l < w->widths.size(); ++l)
            prod = prod * rng.matrix(Eigen::Index(w->widths[l - 1]), Eigen::Index(w->widths[l]),
                                     1.0 / std::sqrt(double(w->widths[l - 1])));
        return gram_eigs(prod, 1.0, w->widths.back());
    }
    throw ConfigError("empirical spectrum supports white, gram, structured and deep white Wishart ensembles");
}

// Sup distance between the empirical CDF of `sorted_eigs` and the ensemble's
// theoretical CDF (bulk density integrated on a grid plus the zero mass).
inline double cdf_sup_distance(std::span<const double> sorted_eigs, const EnsembleTransform& e,
                               std::size_t grid_points = 4000) {
    if (sorted_eigs.empty()) throw DomainError("no eigenvalues");
    double hi = 1.05 * sorted_eigs.back();
    std::vector<double> grid(grid_points);
    for (std::size_t k = 0; k < grid_points; ++k) grid[k] = hi * (double(k) + 0.5) / double(grid_points);
    auto dens = spectral_density(e, grid);
    double mass = 0;
    for (const auto& pm : dens.point_masses)
        if (pm.location == 0) mass += pm.weight;
    // Midpoint rule: cdf[k] is the theoretical CDF at the right edge of cell k.
    std::vector<double> cdf(grid_points);
    double step = hi / double(grid_points), acc = mass;
    for (std::size_t k = 0; k < grid_points; ++k) cdf[k] = (acc += dens.density[k] * step);
    auto theory = [&](double x) {
        if (x < 0) return 0.0;
        double pos = x / step;
        if (pos >= double(grid_points)) return cdf.back();
        auto k = std::size_t(pos);
        double left = k == 0 ? mass : cdf[k - 1];
        return left + (cdf[k] - left) * (pos - double(k));
    };
    double n = double(sorted_eigs.size()), worst = 0;
    // Zero eigenvalues are an atom; compare the CDF just past it.
    auto zeros = std::size_t(std::count(sorted_eigs.begin(), sorted_eigs.end(), 0.0));
    if (zeros > 0) worst = std::abs(mass - double(zeros) / n);
    for (std::size_t k = zeros; k < sorted_eigs.size(); ++k) {
        double f = theory(sorted_eigs[k]);
        worst = std::max({worst, std::abs(f - double(k) / n), std::abs(f - double(k + 1) / n)});
    }
    return worst;
}

}  // namespace rfs
