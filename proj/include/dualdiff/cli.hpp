#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dualdiff::cli {

enum ExitCode : int {
    kOk = 0,
    kCheckFailed = 1,  // verify found a failing check
    kIo = 2,
    kMalformed = 3,
    kResumeMismatch = 4,
    kMissingArtifact = 5,
};

/// Entry point of the `dualdiff` tool. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dualdiff::cli
