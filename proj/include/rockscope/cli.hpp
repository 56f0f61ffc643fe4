#ifndef ROCKSCOPE_CLI_HPP
#define ROCKSCOPE_CLI_HPP

#include <string>
#include <vector>

namespace rockscope {

inline constexpr const char* kToolVersion = "0.1.0";

// exit codes: 0 success, 1 validation/config error, 2 i/o error, 64 usage
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitUsage = 64;

struct CliOptions {
    std::string command;               // simulate|detect|sweep|gradgeom|knockout|mask|train|report
    std::string config_path;           // empty: built-in defaults
    std::string out_dir;               // empty: runs/<timestamp>-<seed>
    std::vector<std::string> overrides;  // dotted-key=value pairs
    int threads = 1;
    bool quiet = false;  // suppress the run-directory line on success
};

// Built-in default configuration as a JSON document (serialized).
std::string default_config_text();

// Loads the config file (or defaults when path is empty) and applies
// overrides; throws ConfigError on unknown keys or type mismatches and
// IoError when the file is missing. Returns the resolved JSON text.
std::string resolve_config(const std::string& config_path, const std::vector<std::string>& overrides);

// Executes one pipeline stage; writes outputs plus manifest_<command>.json
// into the run directory. Returns an exit code instead of throwing.
int run_stage(const CliOptions& options);

}  // namespace rockscope

#endif
