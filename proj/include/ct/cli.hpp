#pragma once

namespace ct::cli {

// Full command-line entry point. Returns the process exit code:
// 0 success, 1 validation/usage error, 2 runtime or state error.
int run(int argc, const char* const* argv);

}  // namespace ct::cli
