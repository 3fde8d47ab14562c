#pragma once

namespace vqr {

/// Whole command-line tool as a library call so tests can drive it
/// in-process. Returns the process exit status (0 ok, 1 runtime failure,
/// 2 usage/validation error).
int run_cli(int argc, const char* const* argv);

}  // namespace vqr
