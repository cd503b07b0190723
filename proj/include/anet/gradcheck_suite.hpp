#pragma once

#include <vector>

#include "anet/gradcheck.hpp"

namespace anet {

/// Every primitive op, float64, h = 1e-5, tolerance 1e-6.
std::vector<GradCheckReport> primitive_suite();

/// Full ANet forward through the stage-1 and stage-2 objectives, plus the
/// CBAM variant, float64, h = 1e-5, tolerance 1e-4.
std::vector<GradCheckReport> composed_suite();

}  // namespace anet
