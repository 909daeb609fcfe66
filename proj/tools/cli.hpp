#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace spatialgeo::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

inline constexpr const char* kOutRootEnv = "SPATIALGEO_OUT";

struct RunConfig {
    std::string subcommand;
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::filesystem::path out;
    std::vector<std::string> overrides;  // dotted.key=value, value parsed as JSON when possible
};

// Runs one subcommand. args excludes the program name. Never throws; every
// failure maps to an exit code with a message on err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace spatialgeo::cli
