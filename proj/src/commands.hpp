#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "config.hpp"

namespace rfs::cli {

enum class Command { Theory, Simulate, Density, Scaling, Phase, Compare };

std::optional<Command> parse_command(std::string_view name);
std::string to_string(Command c);

struct Artifact {
    std::string filename;
    std::string contents;
};

struct CommandOutput {
    std::vector<Artifact> artifacts;
    bool gates_passed = true;  // only compare has gates
};

// Round-trip safe: 17 significant digits.
std::string format_number(double v);

CommandOutput run_theory(const ExperimentConfig& cfg);
CommandOutput run_simulate(const ExperimentConfig& cfg);
CommandOutput run_density(const ExperimentConfig& cfg);
CommandOutput run_scaling(const ExperimentConfig& cfg);
CommandOutput run_phase(const ExperimentConfig& cfg);
CommandOutput run_compare(const ExperimentConfig& cfg);
CommandOutput run_command(Command c, const ExperimentConfig& cfg);

// Writes every artifact plus resolved_config.yaml into `dir`, creating it.
std::vector<std::filesystem::path> write_outputs(const CommandOutput& out, const ExperimentConfig& cfg,
                                                 const std::filesystem::path& dir);

}  // namespace rfs::cli
