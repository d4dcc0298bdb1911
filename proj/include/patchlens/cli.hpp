#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace patchlens {

enum ExitCode : int {
    kExitOk = 0,
    kExitInput = 1,
    kExitModel = 2,
    kExitInternal = 3,
};

// Command-line entry point. args[0] is the program name. Subcommands:
// analyze, experiment run, experiment make-cases, compare-heads, report, serve.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace patchlens
