#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rfs/free_transforms.hpp"
#include "rfs/renormalizer.hpp"
#include "rfs/scaling.hpp"

namespace rfs::cli {

enum class SweepAxis { Samples, Width, Ridge, FeatureNoise };

std::string to_string(SweepAxis a);

struct Sweep {
    SweepAxis axis = SweepAxis::Samples;
    std::size_t layer = 0;  // width sweeps only
    std::vector<double> values;
};

struct MonteCarloSettings {
    std::size_t data_seeds = 20;
    std::size_t feature_seeds = 1;
    std::size_t test_points = 256;
    bool rotate_covariates = false;
    bool per_cell = false;
};

struct DensitySettings {
    EnsembleTransform ensemble;
    std::vector<double> grid;
    std::optional<double> epsilon;
    // One sampled draw of the ensemble, written as an eigenvalue list.
    std::optional<std::size_t> empirical_size;
};

struct RegimePoint {
    RegimeAxis axis;
    ScalingPoint at;
    double margin = 10;
};

struct ScalingSettings {
    ScalingInputs inputs;
    bool noisy = false;
    std::optional<RegimePoint> point;
    std::optional<double> crossover_width;
    std::vector<double> fit_grid;
    bool fit_middle = true;
};

struct PhaseSettings {
    double alpha = 1.5;
    double r = 1;
    double c = 1;
    bool noisy = false;
    std::vector<double> l_grid;
    std::vector<double> q_grid;
};

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::optional<double> tolerance;
};

struct ExperimentConfig {
    std::optional<ModelSpec> model;
    std::optional<Sweep> sweep;
    MonteCarloSettings monte_carlo;
    std::optional<DensitySettings> density;
    std::optional<ScalingSettings> scaling;
    std::optional<PhaseSettings> phase;
    std::uint64_t seed = 0;
    unsigned threads = 0;
    double tolerance = 0.05;
    std::string resolved_yaml;  // every key with the value actually used

    // One point per sweep value; a config without a sweep is a single point.
    std::vector<double> sweep_values() const;
    SweepAxis sweep_axis() const { return sweep ? sweep->axis : SweepAxis::Samples; }
    ModelSpec model_at(double value) const;
};

// Throws ConfigError with "source:line:column: message" on schema violations.
ExperimentConfig parse_config(const std::string& text, const std::string& source, const Overrides& overrides = {});
ExperimentConfig load_config(const std::string& path, const Overrides& overrides = {});

}  // namespace rfs::cli
