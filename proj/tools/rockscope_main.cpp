#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rockscope/cli.hpp"
#include "rockscope/error.hpp"

int main(int argc, char** argv) {
    CLI::App app{"rockscope: rock-token analysis toolkit for on-policy distillation traces"};
    app.require_subcommand(1);
    app.fallthrough();  // global options may follow the subcommand

    rockscope::CliOptions options;
    std::string config_env;
    if (const char* env = std::getenv("ROCKSCOPE_CONFIG")) config_env = env;
    options.config_path = config_env;

    app.add_option("--config", options.config_path, "config file (JSON); env ROCKSCOPE_CONFIG");
    app.add_option("--dir", options.out_dir, "run directory (default runs/<timestamp>-<seed>)");
    app.add_option("--set", options.overrides, "override, dotted-key=value (repeatable)");
    app.add_option("--threads", options.threads, "worker cap (stages are deterministic at any value)");

    for (const char* name : {"simulate", "detect", "sweep", "gradgeom", "knockout", "mask", "train",
                             "report"}) {
        app.add_subcommand(name)->callback([&options, name] { options.command = name; });
    }
    auto* defaults = app.add_subcommand("print-config", "print the resolved configuration");
    defaults->callback([&options] { options.command = "print-config"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 64;
    }

    if (options.command == "print-config") {
        try {
            std::fputs(rockscope::resolve_config(options.config_path, options.overrides).c_str(), stdout);
            return 0;
        } catch (const rockscope::IoError& e) {
            std::fprintf(stderr, "%s\n", e.what());
            return rockscope::kExitIo;
        } catch (const std::exception& e) {
            std::fprintf(stderr, "%s\n", e.what());
            return rockscope::kExitValidation;
        }
    }
    return rockscope::run_stage(options);
}
