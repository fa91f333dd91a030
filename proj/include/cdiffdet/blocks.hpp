#pragma once

// Registry of learned blocks at tiny dimensions for finite-difference
// gradient checking.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cdiffdet/config.hpp"
#include "cdiffdet/gradcheck.hpp"

namespace cdiffdet {

// Small enough for exhaustive central differences.
ModelConfig tiny_model_config();

struct GradBlock {
  std::string name;
  // Sampled coordinates per tensor in the default run (0 = all).
  std::size_t default_coords = 0;
  // inject_fault routes the loss through an op whose backward is wrong.
  std::function<GradCheckResult(const GradCheckOptions&, bool inject_fault)> run;
};

std::vector<GradBlock> gradcheck_blocks(std::uint64_t seed = 0);

}  // namespace cdiffdet
