#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace trus::cli {

/// Process exit codes. Stable; 0 only on full success.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,       // unexpected error
  kBadInput = 2,      // shape mismatch, duplicate tapes, corrupt files, usage errors
  kInsufficient = 3,  // fewer tapes than the requested pool size
  kDuplicateId = 4,   // register: id already holds a different reference
  kMissing = 5,       // prototype or registry not found
  kConfig = 6,        // invalid numeric override or evaluation config
};

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
/// Convenience for tests: args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace trus::cli
