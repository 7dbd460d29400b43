#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dapnet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Runs one of `train`, `evaluate`, `ablate`, `synth-gen`, `report`.
/// Failures print a single `error: <message>` line to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dapnet::cli
