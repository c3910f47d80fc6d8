// SPDX-License-Identifier: Apache-2.0
#include "peftref/analyzer.hpp"

#include <algorithm>
#include <sstream>

#include "peftref/checkpoint.hpp"
#include "peftref/errors.hpp"

namespace peftref {

std::size_t formula_param_count(Technique t, const PeftHyperparams& hp, const BaseConfig& base) {
    const auto c = base.resolved();
    const std::size_t d = c.model_dim;
    switch (t) {
        case Technique::PromptTuning: return hp.n_virtual_tokens * d;
        case Technique::PrefixTuning: {
            const std::size_t dh = hp.prefix_dim == 0 ? d : hp.prefix_dim;
            return hp.n_virtual_tokens * d + d * d + 2 * dh * d;
        }
        case Technique::LoRA: return 2 * (2 * hp.rank * d);
        case Technique::Adapters: return 2 * (2 * hp.bottleneck_dim * d);
        case Technique::TinyAttention: return 4 * d;
        case Technique::Compacter: return 2 * (2 * (hp.bottleneck_dim + d));
        case Technique::IA3: return 6 * d;
    }
    throw LookupError("unknown technique");
}

std::string formula_text(Technique t) {
    switch (t) {
        case Technique::PromptTuning: return "n*d_m";
        case Technique::PrefixTuning: return "n*d_m + d_m^2 + 2*d_h*d_m";
        case Technique::LoRA: return "2*(2*r*d_m)";
        case Technique::Adapters: return "2*(2*d_h*d_m)";
        case Technique::TinyAttention: return "4*d_m";
        case Technique::Compacter: return "2*(2*(d_h+d_m))";
        case Technique::IA3: return "6*d_m";
    }
    throw LookupError("unknown technique");
}

std::string complexity_class(Technique t) {
    switch (t) {
        case Technique::PromptTuning: return "O(1)";
        case Technique::PrefixTuning: return "O(kd)";
        case Technique::LoRA: return "O(rd)";
        case Technique::TinyAttention: return "O(T)";
        case Technique::Adapters: return "O(kd)";
        case Technique::Compacter: return "O(kd/N)";
        case Technique::IA3: return "O(1)";
    }
    throw LookupError("unknown technique");
}

EmpiricalCount empirical_param_count(const PeftModule& module) {
    EmpiricalCount c;
    for (const auto& t : module.trainable_tensors()) {
        if (t.layer < 0) c.non_layer += t.tensor.numel();
        else c.per_layer[t.layer] += t.tensor.numel();
        c.total += t.tensor.numel();
    }
    return c;
}

double storage_ratio(const BaseModel& base, const PeftModule& module) {
    return static_cast<double>(checkpoint_size(peft_checkpoint(module))) /
           static_cast<double>(checkpoint_size(base_checkpoint(base)));
}

EfficiencyReport efficiency_report(const PeftModule& module) {
    const Technique t = module.technique();
    const auto& hp = module.hyperparams();
    EfficiencyReport r;
    r.technique = technique_label(t);
    r.formula_count = formula_param_count(t, hp, module.base_config());
    const EmpiricalCount e = empirical_param_count(module);
    r.empirical_non_layer = e.non_layer;
    r.empirical_total = e.total;
    if (!e.per_layer.empty()) r.empirical_layer_count = e.per_layer.begin()->second;
    const bool uniform = std::all_of(e.per_layer.begin(), e.per_layer.end(),
                                     [&](const auto& kv) { return kv.second == r.empirical_layer_count; });
    r.complexity = complexity_class(t);
    r.checkpoint_bytes = checkpoint_size(peft_checkpoint(module));
    r.descriptor = module.descriptor();

    std::ostringstream note;
    if (t == Technique::Compacter) {
        const auto n = hp.kron_order;
        r.parity = false;
        note << "formula carries no Kronecker order N; enumeration (N^3 shared + 4*d_m*d_h/N per layer, N=" << n
             << ") is authoritative";
    } else if (t == Technique::PromptTuning) {
        r.parity = e.per_layer.empty() && e.non_layer == r.formula_count;
        note << "single embedding-layer insertion, reported as non-layer";
        if (!r.parity) note << "; empirical " << e.non_layer << " vs formula " << r.formula_count;
    } else {
        r.parity = !e.per_layer.empty() && uniform && e.non_layer == 0 &&
                   r.empirical_layer_count == r.formula_count;
        if (!r.parity) {
            note << "empirical " << r.empirical_layer_count << " per layer vs formula " << r.formula_count;
            if (t == Technique::TinyAttention && hp.tiny_dim != 1) note << " (formula assumes d_t=1)";
            if (t == Technique::Adapters && hp.adapter_biases) note << " (bias terms are outside the formula)";
            if (t == Technique::IA3) note << " (formula assumes ffn=4*d_m)";
            if (t == Technique::PrefixTuning && hp.prefix_payload == PrefixPayload::Final)
                note << " (exported prefixes, network discarded)";
        }
    }
    r.note = note.str();
    return r;
}

std::vector<EfficiencyReport> comparison_report(std::span<const Technique> techniques, const PeftHyperparams& hp,
                                                const BaseConfig& base) {
    if (techniques.empty()) throw ContractError("comparison_report needs at least one technique");
    std::vector<EfficiencyReport> rows;
    for (auto t : techniques) rows.push_back(efficiency_report(*build_module(t, hp, base)));
    return rows;
}

namespace {

template <class E>
std::string join_set(const std::set<E>& s) {
    std::string out;
    for (auto v : s) out += (out.empty() ? "" : "+") + to_string(v);
    return out;
}

std::vector<std::vector<std::string>> table_cells(std::span<const EfficiencyReport> rows) {
    std::vector<std::vector<std::string>> cells;
    cells.push_back({"technique", "formula_count", "empirical_per_layer", "non_layer", "empirical_total", "complexity",
                     "checkpoint_bytes", "parity", "insertion_form", "integration_form", "workspace", "note"});
    for (const auto& r : rows) {
        cells.push_back({r.technique, std::to_string(r.formula_count), std::to_string(r.empirical_layer_count),
                         std::to_string(r.empirical_non_layer), std::to_string(r.empirical_total), r.complexity,
                         std::to_string(r.checkpoint_bytes), r.parity ? "true" : "false",
                         to_string(r.descriptor.insertion_form), join_set(r.descriptor.integration_form),
                         join_set(r.descriptor.workspace), r.note});
    }
    return cells;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
}

}  // namespace

std::string report_csv(std::span<const EfficiencyReport> rows) {
    std::string out;
    for (const auto& row : table_cells(rows)) {
        for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_field(row[i]);
        out += '\n';
    }
    return out;
}

std::string report_text(std::span<const EfficiencyReport> rows) {
    const auto cells = table_cells(rows);
    std::vector<std::size_t> width(cells[0].size(), 0);
    for (const auto& row : cells)
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    std::string out;
    for (const auto& row : cells) {
        std::string line;
        for (std::size_t i = 0; i < row.size(); ++i) {
            line += row[i];
            if (i + 1 < row.size()) line += std::string(width[i] - row[i].size() + 2, ' ');
        }
        line.erase(line.find_last_not_of(' ') + 1);
        out += line + '\n';
    }
    return out;
}

}  // namespace peftref
