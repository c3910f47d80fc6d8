// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "module_util.hpp"
#include "peftref/errors.hpp"
#include "peftref/ops.hpp"
#include "peftref/peft.hpp"

namespace peftref {

namespace {

void require_tokens(const PeftHyperparams& hp) {
    if (hp.n_virtual_tokens < 1) throw ConfigError("n_virtual_tokens must be >= 1");
}

}  // namespace

// ---- prompt tuning -------------------------------------------------------

PromptTuning::PromptTuning(const PeftHyperparams& hp, const BaseConfig& base) : PeftModule(hp, base) {
    require_tokens(hp_);
    if (!hp_.layers.empty()) throw ConfigError("prompt tuning inserts at the embedding layer only");
    Rng rng(hp_.seed);
    // Same scale as the frozen token embeddings.
    prompt_ = rng.uniform_tensor({hp_.n_virtual_tokens, base_.model_dim}, 1.0, true);
}

PeftDescriptor PromptTuning::descriptor() const {
    PeftDescriptor d;
    d.technique = technique_label(technique());
    d.intra_connectivity = IntraConnectivity::DenseEmbedding;
    d.inter_connectivity = InterConnectivity::FixedDense;
    d.parameters_adapted = ParametersAdapted::Addition;
    d.parameter_sharing = ParameterSharing::None;
    d.input_type = InputType::Weights;
    d.insertion_form = InsertionForm::Parallel;
    d.insertions = Insertions::OneLayer;
    d.integration_form = {Integration::Concatenation};
    d.workspace = {Workspace::EmbeddingLayer};
    return d;
}

std::vector<SlotBinding> PromptTuning::bindings() const {
    return {{SlotId::embedding_output(), {Integration::Concatenation, 1.0}}};
}

HookMap PromptTuning::hooks() const {
    HookMap h;
    h[SlotId::embedding_output()] = [prompt = prompt_](SlotIo& io) {
        io.hidden = integrate({Integration::Concatenation}, io.hidden, detail::tile_batch(prompt, io.hidden.dim(0)));
    };
    return h;
}

std::vector<NamedTensor> PromptTuning::trainable_tensors() const { return {{"prompt", prompt_, -1}}; }

std::unique_ptr<PromptTuning> prompt_tuning_build(const PeftHyperparams& hp, const BaseConfig& base) {
    return std::make_unique<PromptTuning>(hp, base);
}

// ---- prefix tuning -------------------------------------------------------

PrefixTuning::PrefixTuning(const PeftHyperparams& hp, const BaseConfig& base) : PeftModule(hp, base) {
    require_tokens(hp_);
    const auto d = base_.model_dim;
    if (hp_.prefix_dim == 0) hp_.prefix_dim = d;
    // Prefix rows are concatenated to the full-width keys and values.
    if (hp_.prefix_dim != d)
        throw ConfigError("prefix_dim must equal model_dim (" + std::to_string(d) + "), got " +
                          std::to_string(hp_.prefix_dim));
    const auto n = hp_.n_virtual_tokens, dh = hp_.prefix_dim;
    Rng rng(hp_.seed);
    const double b = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto l : active_layers()) {
        LayerParams p;
        p.layer = l;
        if (exported()) {
            p.prefix_k = Tensor::zeros({n, dh}, true);
            p.prefix_v = Tensor::zeros({n, dh}, true);
        } else {
            p.embed = rng.uniform_tensor({n, d}, 1.0, true);
            p.w1 = rng.uniform_tensor({d, d}, b, true);
            p.w2 = rng.uniform_tensor({d, 2 * dh}, 1.0, true);
        }
        params_.push_back(std::move(p));
    }
}

PeftDescriptor PrefixTuning::descriptor() const {
    PeftDescriptor d;
    d.technique = technique_label(technique());
    d.intra_connectivity = IntraConnectivity::DenseNonlinearMlp;
    d.inter_connectivity = InterConnectivity::FixedDense;
    d.parameters_adapted = ParametersAdapted::Addition;
    d.parameter_sharing = ParameterSharing::None;
    d.input_type = InputType::Weights;
    d.insertion_form = InsertionForm::Parallel;
    d.insertions = Insertions::AllLayers;
    d.integration_form = {Integration::GatedAddition};
    d.workspace = {Workspace::EmbeddingLayer, Workspace::AttentionKeysValues};
    return d;
}

std::vector<SlotBinding> PrefixTuning::bindings() const {
    std::vector<SlotBinding> b{{SlotId::embedding_output(), {Integration::Concatenation, 1.0}}};
    for (const auto& p : params_)
        b.push_back({SlotId::attn_keys_values(static_cast<int>(p.layer)), {Integration::Concatenation, 1.0}});
    return b;
}

namespace {

std::pair<Tensor, Tensor> run_prefix_network(const Tensor& embed, const Tensor& w1, const Tensor& w2,
                                             std::size_t dh, PrefixActivation act) {
    Tensor hidden = matmul(embed, w1);
    hidden = act == PrefixActivation::Softmax ? softmax(hidden) : tanh(hidden);
    Tensor kv = matmul(hidden, w2);
    return {slice(kv, 1, 0, dh), slice(kv, 1, dh, 2 * dh)};
}

}  // namespace

std::pair<Tensor, Tensor> PrefixTuning::prefixes(std::size_t layer) const {
    for (const auto& p : params_) {
        if (p.layer != layer) continue;
        if (exported()) return {p.prefix_k, p.prefix_v};
        return run_prefix_network(p.embed, p.w1, p.w2, hp_.prefix_dim, hp_.prefix_activation);
    }
    throw IndexError("prefix tuning has no parameters at layer " + std::to_string(layer));
}

HookMap PrefixTuning::hooks() const {
    HookMap h;
    for (const auto& p : params_) {
        const bool final_payload = exported();
        h[SlotId::attn_keys_values(static_cast<int>(p.layer))] = [p, final_payload, dh = hp_.prefix_dim,
                                                                  act = hp_.prefix_activation](SlotIo& io) {
            auto [pk, pv] = final_payload ? std::pair{p.prefix_k, p.prefix_v}
                                          : run_prefix_network(p.embed, p.w1, p.w2, dh, act);
            const auto batch = io.keys.dim(0);
            io.keys = integrate({Integration::Concatenation}, io.keys, detail::tile_batch(pk, batch));
            io.values = integrate({Integration::Concatenation}, io.values, detail::tile_batch(pv, batch));
        };
    }
    return h;
}

std::vector<NamedTensor> PrefixTuning::trainable_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        if (exported()) {
            out.push_back({detail::layer_name(p.layer, "prefix_k"), p.prefix_k, l});
            out.push_back({detail::layer_name(p.layer, "prefix_v"), p.prefix_v, l});
        } else {
            out.push_back({detail::layer_name(p.layer, "embed"), p.embed, l});
            out.push_back({detail::layer_name(p.layer, "w1"), p.w1, l});
            out.push_back({detail::layer_name(p.layer, "w2"), p.w2, l});
        }
    }
    return out;
}

std::unique_ptr<PrefixTuning> PrefixTuning::export_final() const {
    PeftHyperparams hp = hp_;
    hp.prefix_payload = PrefixPayload::Final;
    auto out = std::make_unique<PrefixTuning>(hp, base_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto [pk, pv] = prefixes(params_[i].layer);
        auto& dst = out->params_[i];
        dst.prefix_k = pk.clone();
        dst.prefix_v = pv.clone();
        dst.prefix_k.set_requires_grad(true);
        dst.prefix_v.set_requires_grad(true);
    }
    return out;
}

std::unique_ptr<PrefixTuning> prefix_tuning_build(const PeftHyperparams& hp, const BaseConfig& base) {
    return std::make_unique<PrefixTuning>(hp, base);
}

std::unique_ptr<PrefixTuning> prefix_export_final(const PrefixTuning& module) { return module.export_final(); }

}  // namespace peftref
