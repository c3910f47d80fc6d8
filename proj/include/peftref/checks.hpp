// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include "peftref/peft.hpp"

namespace peftref {

// Mini setup used for per-technique gradient checks: L=1, d_m=8, two heads,
// batch 2, sequence 4.
BaseConfig gradcheck_base_config();
PeftHyperparams gradcheck_hyperparams();

struct TechniqueGradcheck {
    std::string technique;
    std::size_t tensors = 0;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
};

// Randomizes every trainable tensor (so zero-initialized branches carry
// gradient), then compares the tape gradient of the composed cross-entropy
// loss with central differences.
TechniqueGradcheck technique_gradcheck(Technique technique, std::uint64_t seed = 0, double eps = 1e-5);

}  // namespace peftref
