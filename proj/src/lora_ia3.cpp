// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "module_util.hpp"
#include "peftref/errors.hpp"
#include "peftref/ops.hpp"
#include "peftref/peft.hpp"

namespace peftref {

// ---- LoRA ----------------------------------------------------------------

LoRA::LoRA(const PeftHyperparams& hp, const BaseConfig& base) : PeftModule(hp, base) {
    const auto d = base_.model_dim, r = hp_.rank;
    if (r < 1) throw ConfigError("LoRA rank must be >= 1");
    if (r > d) throw ConfigError("LoRA rank " + std::to_string(r) + " exceeds model_dim " + std::to_string(d));
    if (!std::isfinite(hp_.lora_scale)) throw ConfigError("LoRA scale must be finite");
    Rng rng(hp_.seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto l : active_layers()) {
        LayerParams p;
        p.layer = l;
        p.q_down = rng.uniform_tensor({d, r}, bound, true);
        p.q_up = Tensor::zeros({r, d}, true);
        p.v_down = rng.uniform_tensor({d, r}, bound, true);
        p.v_up = Tensor::zeros({r, d}, true);
        params_.push_back(std::move(p));
    }
}

PeftDescriptor LoRA::descriptor() const {
    PeftDescriptor d;
    d.technique = technique_label(technique());
    d.intra_connectivity = IntraConnectivity::DenseLinearMlp;
    d.inter_connectivity = InterConnectivity::FixedDense;
    d.parameters_adapted = ParametersAdapted::Reparameterisation;
    d.parameter_sharing = ParameterSharing::None;
    d.input_type = InputType::Data;
    d.insertion_form = InsertionForm::Parallel;
    d.insertions = Insertions::AllLayers;
    d.integration_form = {Integration::ScaledAddition};
    d.workspace = {Workspace::AttentionQueriesValues};
    return d;
}

std::vector<SlotBinding> LoRA::bindings() const {
    std::vector<SlotBinding> b;
    for (const auto& p : params_)
        b.push_back({SlotId::attn_query_value_weights(static_cast<int>(p.layer)),
                     {Integration::ScaledAddition, hp_.lora_scale}});
    return b;
}

HookMap LoRA::hooks() const {
    HookMap h;
    const IntegrationForm form{Integration::ScaledAddition, hp_.lora_scale};
    for (const auto& p : params_) {
        h[SlotId::attn_query_value_weights(static_cast<int>(p.layer))] = [p, form](SlotIo& io) {
            // Parallel branch: reads the same input x as the frozen projections.
            Tensor dq = detail::linear3(detail::linear3(io.input, p.q_down), p.q_up);
            Tensor dv = detail::linear3(detail::linear3(io.input, p.v_down), p.v_up);
            io.queries = integrate(form, io.queries, dq);
            io.values = integrate(form, io.values, dv);
        };
    }
    return h;
}

std::vector<NamedTensor> LoRA::trainable_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        out.push_back({detail::layer_name(p.layer, "q_down"), p.q_down, l});
        out.push_back({detail::layer_name(p.layer, "q_up"), p.q_up, l});
        out.push_back({detail::layer_name(p.layer, "v_down"), p.v_down, l});
        out.push_back({detail::layer_name(p.layer, "v_up"), p.v_up, l});
    }
    return out;
}

std::unique_ptr<LoRA> lora_build(const PeftHyperparams& hp, const BaseConfig& base) {
    return std::make_unique<LoRA>(hp, base);
}

// ---- (IA)3 ---------------------------------------------------------------

IA3::IA3(const PeftHyperparams& hp, const BaseConfig& base) : PeftModule(hp, base) {
    for (auto l : active_layers())
        params_.push_back({l, Tensor::ones({base_.model_dim}, true), Tensor::ones({base_.model_dim}, true),
                           Tensor::ones({base_.ffn_dim}, true)});
}

PeftDescriptor IA3::descriptor() const {
    PeftDescriptor d;
    d.technique = technique_label(technique());
    d.intra_connectivity = IntraConnectivity::NoneParameterVector;
    d.inter_connectivity = InterConnectivity::FixedDense;
    d.parameters_adapted = ParametersAdapted::Addition;
    d.parameter_sharing = ParameterSharing::None;
    d.input_type = InputType::Weights;
    d.insertion_form = InsertionForm::Sequential;
    d.insertions = Insertions::AllLayers;
    d.integration_form = {Integration::Rescaling};
    d.workspace = {Workspace::FfnIntermediate, Workspace::AttentionKeysValues};
    return d;
}

std::vector<SlotBinding> IA3::bindings() const {
    std::vector<SlotBinding> b;
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        b.push_back({SlotId::attn_keys_values(l), {Integration::Rescaling, 1.0}});
        b.push_back({SlotId::ffn_intermediate(l), {Integration::Rescaling, 1.0}});
    }
    return b;
}

HookMap IA3::hooks() const {
    HookMap h;
    const IntegrationForm form{Integration::Rescaling};
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        h[SlotId::attn_keys_values(l)] = [p, form](SlotIo& io) {
            io.keys = integrate(form, io.keys, p.keys);
            io.values = integrate(form, io.values, p.values);
        };
        h[SlotId::ffn_intermediate(l)] = [p, form](SlotIo& io) { io.hidden = integrate(form, io.hidden, p.ffn); };
    }
    return h;
}

std::vector<NamedTensor> IA3::trainable_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        out.push_back({detail::layer_name(p.layer, "l_k"), p.keys, l});
        out.push_back({detail::layer_name(p.layer, "l_v"), p.values, l});
        out.push_back({detail::layer_name(p.layer, "l_ff"), p.ffn, l});
    }
    return out;
}

std::vector<Tensor> IA3::scales(std::size_t layer) const {
    for (const auto& p : params_)
        if (p.layer == layer) return {p.keys, p.values, p.ffn};
    throw IndexError("(IA)3 has no vectors at layer " + std::to_string(layer));
}

std::unique_ptr<IA3> ia3_build(const PeftHyperparams& hp, const BaseConfig& base) {
    return std::make_unique<IA3>(hp, base);
}

}  // namespace peftref
