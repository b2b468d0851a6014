#pragma once

namespace pasta {

// Entry point of the pasta tool. Returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace pasta
