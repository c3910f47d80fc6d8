// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "peftref/peft.hpp"

namespace peftref {

// Closed-form trainable-parameter count per transformer layer, as tabulated
// for each technique. Prompt tuning's value is its single embedding-layer
// insertion.
std::size_t formula_param_count(Technique technique, const PeftHyperparams& hp, const BaseConfig& base);
std::string formula_text(Technique technique);

struct EmpiricalCount {
    std::map<int, std::size_t> per_layer;  // transformer layer -> count
    std::size_t non_layer = 0;             // tensors outside any layer (prompt matrix)
    std::size_t total = 0;
};
EmpiricalCount empirical_param_count(const PeftModule& module);

// Symbolic module-complexity tag: O(1), O(kd), O(rd), O(T) or O(kd/N).
std::string complexity_class(Technique technique);

// Serialized PEFT checkpoint bytes over serialized base checkpoint bytes.
double storage_ratio(const BaseModel& base, const PeftModule& module);

struct EfficiencyReport {
    std::string technique;
    std::size_t formula_count = 0;
    std::size_t empirical_layer_count = 0;  // per inserted layer; 0 when none
    std::size_t empirical_non_layer = 0;
    std::size_t empirical_total = 0;
    std::string complexity;
    std::size_t checkpoint_bytes = 0;
    bool parity = false;
    std::string note;  // always set when parity is false
    PeftDescriptor descriptor;
};

EfficiencyReport efficiency_report(const PeftModule& module);
// One row per technique, in input order. Throws ContractError on an empty list.
std::vector<EfficiencyReport> comparison_report(std::span<const Technique> techniques, const PeftHyperparams& hp,
                                                const BaseConfig& base);

std::string report_csv(std::span<const EfficiencyReport> rows);
std::string report_text(std::span<const EfficiencyReport> rows);

}  // namespace peftref
