// SPDX-License-Identifier: Apache-2.0
#include "peftref/typology.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <sstream>
#include <utility>

#include "peftref/errors.hpp"
#include "peftref/peft.hpp"

namespace peftref {

namespace {

struct TechniqueNames {
    Technique technique;
    const char* label;
    const char* id;
};

constexpr std::array<TechniqueNames, 7> kTechniqueNames{{
    {Technique::PromptTuning, "Prompt tuning", "prompt"},
    {Technique::PrefixTuning, "Prefix tuning", "prefix"},
    {Technique::LoRA, "LoRA", "lora"},
    {Technique::Adapters, "Adapters", "adapter"},
    {Technique::TinyAttention, "Tiny-Att. Ad.", "tiny-attention"},
    {Technique::Compacter, "Compacters", "compacter"},
    {Technique::IA3, "(IA)3", "ia3"},
}};

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

template <typename E, std::size_t N>
using NameTable = std::array<std::pair<E, const char*>, N>;

constexpr NameTable<IntraConnectivity, 6> kIntra{{
    {IntraConnectivity::DenseEmbedding, "dense:embedding"},
    {IntraConnectivity::DenseNonlinearMlp, "dense:nonlinear-mlp"},
    {IntraConnectivity::DenseLinearMlp, "dense:linear-mlp"},
    {IntraConnectivity::DenseSelfAttention, "dense:self-attention"},
    {IntraConnectivity::NoneParameterVector, "none:parameter-vector"},
    {IntraConnectivity::Sparse, "sparse"},
}};
constexpr NameTable<InterConnectivity, 3> kInter{{
    {InterConnectivity::FixedDense, "fixed:dense"},
    {InterConnectivity::FixedSparse, "fixed:sparse"},
    {InterConnectivity::Dynamic, "dynamic"},
}};
constexpr NameTable<ParametersAdapted, 2> kAdapted{{
    {ParametersAdapted::Addition, "addition"},
    {ParametersAdapted::Reparameterisation, "reparameterisation"},
}};
constexpr NameTable<ParameterSharing, 3> kSharing{{
    {ParameterSharing::Shared, "shared"},
    {ParameterSharing::Tied, "tied"},
    {ParameterSharing::None, "none"},
}};
constexpr NameTable<InputType, 3> kInput{{
    {InputType::Hidden, "hidden"},
    {InputType::Data, "data"},
    {InputType::Weights, "weights"},
}};
constexpr NameTable<InsertionForm, 2> kInsertionForm{{
    {InsertionForm::Sequential, "sequential"},
    {InsertionForm::Parallel, "parallel"},
}};
constexpr NameTable<Insertions, 2> kInsertions{{
    {Insertions::OneLayer, "one-layer"},
    {Insertions::AllLayers, "all-layers"},
}};
constexpr NameTable<Integration, 5> kIntegration{{
    {Integration::Concatenation, "concatenation"},
    {Integration::ScaledAddition, "scaled-addition"},
    {Integration::DirectAddition, "direct-addition"},
    {Integration::GatedAddition, "gated-addition"},
    {Integration::Rescaling, "rescaling"},
}};
constexpr NameTable<Workspace, 6> kWorkspace{{
    {Workspace::EmbeddingLayer, "embedding-layer"},
    {Workspace::AttentionKeysValues, "attention-keys-values"},
    {Workspace::AttentionQueriesValues, "attention-queries-values"},
    {Workspace::AttentionLayer, "attention-layer"},
    {Workspace::FfnLayer, "ffn-layer"},
    {Workspace::FfnIntermediate, "ffn-intermediate"},
}};

template <typename E, std::size_t N>
std::string name_of(const NameTable<E, N>& table, E value) {
    for (const auto& [e, name] : table) {
        if (e == value) return name;
    }
    return "?";
}

template <typename E, std::size_t N>
E value_of(const NameTable<E, N>& table, std::string_view field, std::string_view text) {
    for (const auto& [e, name] : table) {
        if (text == name) return e;
    }
    throw ConfigError("illegal value '" + std::string(text) + "' for field " + std::string(field));
}

template <typename E, std::size_t N>
std::string set_str(const NameTable<E, N>& table, const std::set<E>& values) {
    std::string out;
    for (const auto& [e, name] : table) {  // table order keeps output stable
        if (!values.count(e)) continue;
        if (!out.empty()) out += ',';
        out += name;
    }
    return out;
}

template <typename E, std::size_t N>
std::set<E> set_of(const NameTable<E, N>& table, std::string_view field, std::string_view text) {
    std::set<E> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto comma = text.find(',', start);
        const auto end = comma == std::string_view::npos ? text.size() : comma;
        const auto item = text.substr(start, end - start);
        if (!item.empty()) out.insert(value_of(table, field, item));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    if (out.empty()) throw ConfigError("field " + std::string(field) + " must not be empty");
    return out;
}

constexpr std::array<const char*, 9> kFieldNames{
    "intra_connectivity", "inter_connectivity", "parameters_adapted", "parameter_sharing", "input_type",
    "insertion_form",     "insertions",         "integration_form",   "workspace",
};

std::array<std::string, 9> field_values(const PeftDescriptor& d) {
    return {to_string(d.intra_connectivity), to_string(d.inter_connectivity), to_string(d.parameters_adapted),
            to_string(d.parameter_sharing),  to_string(d.input_type),         to_string(d.insertion_form),
            to_string(d.insertions),         set_str(kIntegration, d.integration_form),
            set_str(kWorkspace, d.workspace)};
}

}  // namespace

std::string technique_label(Technique t) {
    for (const auto& n : kTechniqueNames) {
        if (n.technique == t) return n.label;
    }
    return "?";
}

std::string technique_id(Technique t) {
    for (const auto& n : kTechniqueNames) {
        if (n.technique == t) return n.id;
    }
    return "?";
}

std::string known_technique_names() {
    std::string out;
    for (const auto& n : kTechniqueNames) {
        if (!out.empty()) out += ", ";
        out += std::string(n.id) + " (\"" + n.label + "\")";
    }
    return out;
}

Technique parse_technique(std::string_view name) {
    const std::string key = lower(name);
    for (const auto& n : kTechniqueNames) {
        if (key == n.id || key == lower(n.label)) return n.technique;
    }
    throw LookupError("unknown technique '" + std::string(name) + "'; known: " + known_technique_names());
}

std::string to_string(IntraConnectivity v) { return name_of(kIntra, v); }
std::string to_string(InterConnectivity v) { return name_of(kInter, v); }
std::string to_string(ParametersAdapted v) { return name_of(kAdapted, v); }
std::string to_string(ParameterSharing v) { return name_of(kSharing, v); }
std::string to_string(InputType v) { return name_of(kInput, v); }
std::string to_string(InsertionForm v) { return name_of(kInsertionForm, v); }
std::string to_string(Insertions v) { return name_of(kInsertions, v); }
std::string to_string(Integration v) { return name_of(kIntegration, v); }
std::string to_string(Workspace v) { return name_of(kWorkspace, v); }

std::string PeftDescriptor::to_record() const {
    std::string out = "technique=" + technique + ';';
    const auto values = field_values(*this);
    for (std::size_t i = 0; i < kFieldNames.size(); ++i) out += std::string(kFieldNames[i]) + '=' + values[i] + ';';
    return out;
}

PeftDescriptor PeftDescriptor::from_record(std::string_view line) {
    PeftDescriptor d;
    std::set<std::string> seen;
    std::size_t start = 0;
    while (start < line.size()) {
        auto semi = line.find(';', start);
        if (semi == std::string_view::npos) semi = line.size();
        const auto pair = line.substr(start, semi - start);
        start = semi + 1;
        if (pair.empty()) continue;
        const auto eq = pair.find('=');
        if (eq == std::string_view::npos) throw ConfigError("malformed registry pair '" + std::string(pair) + "'");
        const std::string key(pair.substr(0, eq));
        const auto value = pair.substr(eq + 1);
        if (!seen.insert(key).second) throw ConfigError("duplicate registry field '" + key + "'");
        if (key == "technique") d.technique = std::string(value);
        else if (key == "intra_connectivity") d.intra_connectivity = value_of(kIntra, key, value);
        else if (key == "inter_connectivity") d.inter_connectivity = value_of(kInter, key, value);
        else if (key == "parameters_adapted") d.parameters_adapted = value_of(kAdapted, key, value);
        else if (key == "parameter_sharing") d.parameter_sharing = value_of(kSharing, key, value);
        else if (key == "input_type") d.input_type = value_of(kInput, key, value);
        else if (key == "insertion_form") d.insertion_form = value_of(kInsertionForm, key, value);
        else if (key == "insertions") d.insertions = value_of(kInsertions, key, value);
        else if (key == "integration_form") d.integration_form = set_of(kIntegration, key, value);
        else if (key == "workspace") d.workspace = set_of(kWorkspace, key, value);
        else throw ConfigError("unknown registry field '" + key + "'");
    }
    if (seen.size() != kFieldNames.size() + 1) {
        throw ConfigError("registry record has " + std::to_string(seen.size()) + " fields, expected " +
                          std::to_string(kFieldNames.size() + 1));
    }
    return d;
}

std::vector<FieldDifference> descriptor_diff(const PeftDescriptor& a, const PeftDescriptor& b) {
    const auto va = field_values(a);
    const auto vb = field_values(b);
    std::vector<FieldDifference> out;
    for (std::size_t i = 0; i < kFieldNames.size(); ++i) {
        if (va[i] != vb[i]) out.push_back({kFieldNames[i], va[i], vb[i]});
    }
    return out;
}

// ---------------------------------------------------------------------------

Registry::Registry(std::vector<PeftDescriptor> entries) : entries_(std::move(entries)) {
    std::set<Technique> covered;
    for (const auto& e : entries_) {
        if (!covered.insert(parse_technique(e.technique)).second) {
            throw ConfigError("registry lists '" + e.technique + "' twice");
        }
    }
    if (covered.size() != std::size(kAllTechniques)) {
        throw ConfigError("registry must hold exactly " + std::to_string(std::size(kAllTechniques)) +
                          " techniques, got " + std::to_string(covered.size()));
    }
}

const Registry& Registry::standard() {
    using IC = IntraConnectivity;
    using XC = InterConnectivity;
    using PA = ParametersAdapted;
    using PS = ParameterSharing;
    using IT = InputType;
    using IF = InsertionForm;
    using IN = Insertions;
    using IG = Integration;
    using WS = Workspace;
    static const Registry registry({
        {"Prompt tuning", IC::DenseEmbedding, XC::FixedDense, PA::Addition, PS::None, IT::Weights, IF::Parallel,
         IN::OneLayer, {IG::Concatenation}, {WS::EmbeddingLayer}},
        {"Prefix tuning", IC::DenseNonlinearMlp, XC::FixedDense, PA::Addition, PS::None, IT::Weights, IF::Parallel,
         IN::AllLayers, {IG::GatedAddition}, {WS::EmbeddingLayer, WS::AttentionKeysValues}},
        {"LoRA", IC::DenseLinearMlp, XC::FixedDense, PA::Reparameterisation, PS::None, IT::Data, IF::Parallel,
         IN::AllLayers, {IG::ScaledAddition}, {WS::AttentionQueriesValues}},
        {"Adapters", IC::DenseNonlinearMlp, XC::FixedDense, PA::Addition, PS::None, IT::Hidden, IF::Sequential,
         IN::AllLayers, {IG::DirectAddition}, {WS::FfnLayer, WS::AttentionLayer}},
        {"Tiny-Att. Ad.", IC::DenseSelfAttention, XC::Dynamic, PA::Addition, PS::None, IT::Hidden, IF::Sequential,
         IN::AllLayers, {IG::DirectAddition}, {WS::AttentionLayer}},
        {"Compacters", IC::DenseNonlinearMlp, XC::FixedDense, PA::Addition, PS::Shared, IT::Hidden, IF::Sequential,
         IN::AllLayers, {IG::DirectAddition}, {WS::FfnLayer, WS::AttentionLayer}},
        {"(IA)3", IC::NoneParameterVector, XC::FixedDense, PA::Addition, PS::None, IT::Weights, IF::Sequential,
         IN::AllLayers, {IG::Rescaling}, {WS::FfnIntermediate, WS::AttentionKeysValues}},
    });
    return registry;
}

Registry Registry::parse(std::string_view text) {
    std::vector<PeftDescriptor> entries;
    std::size_t start = 0;
    while (start < text.size()) {
        auto nl = text.find('\n', start);
        if (nl == std::string_view::npos) nl = text.size();
        auto line = text.substr(start, nl - start);
        start = nl + 1;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty() || line.front() == '#') continue;
        entries.push_back(PeftDescriptor::from_record(line));
    }
    return Registry(std::move(entries));
}

std::string Registry::serialize() const {
    std::string out;
    for (const auto& e : entries_) out += e.to_record() + '\n';
    return out;
}

const PeftDescriptor& Registry::lookup(std::string_view technique) const {
    const Technique t = parse_technique(technique);
    for (const auto& e : entries_) {
        if (parse_technique(e.technique) == t) return e;
    }
    throw LookupError("technique '" + std::string(technique) + "' missing from registry");
}

std::vector<FieldDifference> validate_descriptor(const PeftModule& module, const Registry& registry) {
    const PeftDescriptor self = module.descriptor();
    return descriptor_diff(self, registry.lookup(self.technique));
}

}  // namespace peftref
