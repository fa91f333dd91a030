#pragma once

// Command-line front end. Subcommands: synth, train, eval, infer, gradcheck,
// schedule-dump. Exit codes: 0 ok, 2 config or parse error, 3 runtime error.

#include <ostream>
#include <string>
#include <vector>

namespace cdiffdet {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Build identifier baked in at configure time ("unknown" outside a checkout).
const char* build_id();

}  // namespace cdiffdet
