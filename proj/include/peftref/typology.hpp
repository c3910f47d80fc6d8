// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "peftref/transformer.hpp"

namespace peftref {

enum class Technique { PromptTuning, PrefixTuning, LoRA, Adapters, TinyAttention, Compacter, IA3 };

inline constexpr Technique kAllTechniques[] = {
    Technique::PromptTuning, Technique::PrefixTuning, Technique::LoRA,      Technique::Adapters,
    Technique::TinyAttention, Technique::Compacter,   Technique::IA3,
};

// Registry label ("LoRA", "Tiny-Att. Ad.", ...).
std::string technique_label(Technique t);
// Short command-line id ("lora", "tiny-attention", ...).
std::string technique_id(Technique t);
// Accepts either spelling, case-insensitively. Throws LookupError.
Technique parse_technique(std::string_view name);
std::string known_technique_names();

enum class IntraConnectivity { DenseEmbedding, DenseNonlinearMlp, DenseLinearMlp, DenseSelfAttention, NoneParameterVector, Sparse };
enum class InterConnectivity { FixedDense, FixedSparse, Dynamic };
enum class ParametersAdapted { Addition, Reparameterisation };
enum class ParameterSharing { Shared, Tied, None };
enum class InputType { Hidden, Data, Weights };
enum class InsertionForm { Sequential, Parallel };
enum class Insertions { OneLayer, AllLayers };
enum class Integration { Concatenation, ScaledAddition, DirectAddition, GatedAddition, Rescaling };

// The nine structural properties of a PEFT technique, plus the technique it
// describes.
struct PeftDescriptor {
    std::string technique;
    IntraConnectivity intra_connectivity = IntraConnectivity::DenseEmbedding;
    InterConnectivity inter_connectivity = InterConnectivity::FixedDense;
    ParametersAdapted parameters_adapted = ParametersAdapted::Addition;
    ParameterSharing parameter_sharing = ParameterSharing::None;
    InputType input_type = InputType::Hidden;
    InsertionForm insertion_form = InsertionForm::Sequential;
    Insertions insertions = Insertions::AllLayers;
    std::set<Integration> integration_form;
    std::set<Workspace> workspace;

    bool operator==(const PeftDescriptor&) const = default;

    // One "field=value;" record, e.g. "technique=LoRA;intra_connectivity=...;".
    std::string to_record() const;
    static PeftDescriptor from_record(std::string_view line);
};

std::string to_string(IntraConnectivity v);
std::string to_string(InterConnectivity v);
std::string to_string(ParametersAdapted v);
std::string to_string(ParameterSharing v);
std::string to_string(InputType v);
std::string to_string(InsertionForm v);
std::string to_string(Insertions v);
std::string to_string(Integration v);
std::string to_string(Workspace v);

struct FieldDifference {
    std::string field;
    std::string a;
    std::string b;
    bool operator==(const FieldDifference&) const = default;
};

// Per-field comparison over the nine typology properties (the technique name
// is not compared).
std::vector<FieldDifference> descriptor_diff(const PeftDescriptor& a, const PeftDescriptor& b);

// Immutable map technique -> descriptor holding exactly one row per technique.
class Registry {
public:
    // The seven rows of the structural-properties table.
    static const Registry& standard();

    // Parses the line-oriented text form; '#' lines and blank lines are
    // skipped. Throws ConfigError on malformed input or a wrong row set.
    static Registry parse(std::string_view text);
    std::string serialize() const;

    const PeftDescriptor& lookup(std::string_view technique) const;
    const std::vector<PeftDescriptor>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

private:
    explicit Registry(std::vector<PeftDescriptor> entries);
    std::vector<PeftDescriptor> entries_;
};

class PeftModule;
// Empty iff the module's self-description matches its registry row. Throws
// LookupError when the descriptor names an unknown technique.
std::vector<FieldDifference> validate_descriptor(const PeftModule& module,
                                                 const Registry& registry = Registry::standard());

}  // namespace peftref
