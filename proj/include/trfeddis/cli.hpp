#pragma once

#include <iosfwd>

namespace trfeddis::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;   // usage or configuration error
inline constexpr int kExitRuntime = 2;  // failure while running

/// Entry point of the `trfeddis` tool. Subcommands: train, eval, ablate, ood,
/// dump-embeddings.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace trfeddis::cli
