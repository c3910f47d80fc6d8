// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "module_util.hpp"
#include "peftref/errors.hpp"
#include "peftref/ops.hpp"
#include "peftref/peft.hpp"

namespace peftref {

namespace {

PeftDescriptor adapter_like_descriptor(Technique t) {
    PeftDescriptor d;
    d.technique = technique_label(t);
    d.intra_connectivity = IntraConnectivity::DenseNonlinearMlp;
    d.inter_connectivity = InterConnectivity::FixedDense;
    d.parameters_adapted = ParametersAdapted::Addition;
    d.parameter_sharing = ParameterSharing::None;
    d.input_type = InputType::Hidden;
    d.insertion_form = InsertionForm::Sequential;
    d.insertions = Insertions::AllLayers;
    d.integration_form = {Integration::DirectAddition};
    d.workspace = {Workspace::FfnLayer, Workspace::AttentionLayer};
    return d;
}

std::vector<SlotBinding> adapter_like_bindings(const std::vector<std::size_t>& layers) {
    std::vector<SlotBinding> b;
    for (auto l : layers) {
        b.push_back({SlotId::post_attention(static_cast<int>(l)), {Integration::DirectAddition, 1.0}});
        b.push_back({SlotId::post_ffn(static_cast<int>(l)), {Integration::DirectAddition, 1.0}});
    }
    return b;
}

// relu(h Wd + bd) Wu + bu; bias handles may be empty.
Tensor bottleneck(const Tensor& h, const Tensor& down, const Tensor& down_bias, const Tensor& up,
                  const Tensor& up_bias) {
    Tensor z = detail::linear3(h, down);
    if (down_bias.numel()) z = add_bias(z, down_bias);
    z = detail::linear3(relu(z), up);
    if (up_bias.numel()) z = add_bias(z, up_bias);
    return z;
}

}  // namespace

// ---- adapters ------------------------------------------------------------

Adapters::Adapters(const PeftHyperparams& hp, const BaseConfig& base) : PeftModule(hp, base) {
    const auto d = base_.model_dim, dh = hp_.bottleneck_dim;
    if (dh < 1) throw ConfigError("adapter bottleneck_dim must be >= 1");
    Rng rng(hp_.seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto make_stack = [&] {
        Stack s;
        s.down = rng.uniform_tensor({d, dh}, bound, true);
        s.up = Tensor::zeros({dh, d}, true);
        if (hp_.adapter_biases) {
            s.down_bias = Tensor::zeros({dh}, true);
            s.up_bias = Tensor::zeros({d}, true);
        }
        return s;
    };
    for (auto l : active_layers()) {
        LayerParams p;
        p.layer = l;
        p.attn = make_stack();
        p.ffn = make_stack();
        params_.push_back(std::move(p));
    }
}

PeftDescriptor Adapters::descriptor() const { return adapter_like_descriptor(technique()); }

std::vector<SlotBinding> Adapters::bindings() const { return adapter_like_bindings(active_layers()); }

HookMap Adapters::hooks() const {
    HookMap h;
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        for (auto [slot, stack] : {std::pair{SlotId::post_attention(l), p.attn}, std::pair{SlotId::post_ffn(l), p.ffn}}) {
            h[slot] = [s = stack](SlotIo& io) {
                io.hidden = integrate({Integration::DirectAddition}, io.hidden,
                                      bottleneck(io.hidden, s.down, s.down_bias, s.up, s.up_bias));
            };
        }
    }
    return h;
}

std::vector<NamedTensor> Adapters::trainable_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        for (auto [tag, s] : {std::pair{"attn", &p.attn}, std::pair{"ffn", &p.ffn}}) {
            const std::string t = tag;
            out.push_back({detail::layer_name(p.layer, t + "_down"), s->down, l});
            out.push_back({detail::layer_name(p.layer, t + "_up"), s->up, l});
            if (hp_.adapter_biases) {
                out.push_back({detail::layer_name(p.layer, t + "_down_bias"), s->down_bias, l});
                out.push_back({detail::layer_name(p.layer, t + "_up_bias"), s->up_bias, l});
            }
        }
    }
    return out;
}

std::unique_ptr<Adapters> adapter_build(const PeftHyperparams& hp, const BaseConfig& base) {
    return std::make_unique<Adapters>(hp, base);
}

// ---- tiny-attention adapters ---------------------------------------------

TinyAttention::TinyAttention(const PeftHyperparams& hp, const BaseConfig& base) : PeftModule(hp, base) {
    const auto d = base_.model_dim, dt = hp_.tiny_dim;
    if (dt < 1) throw ConfigError("tiny_dim must be >= 1");
    Rng rng(hp_.seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto l : active_layers()) {
        LayerParams p;
        p.layer = l;
        p.wq = rng.uniform_tensor({d, dt}, bound, true);
        p.wk = rng.uniform_tensor({d, dt}, bound, true);
        p.wv = rng.uniform_tensor({d, dt}, bound, true);
        p.wo = Tensor::zeros({dt, d}, true);
        params_.push_back(std::move(p));
    }
}

PeftDescriptor TinyAttention::descriptor() const {
    PeftDescriptor d;
    d.technique = technique_label(technique());
    d.intra_connectivity = IntraConnectivity::DenseSelfAttention;
    d.inter_connectivity = InterConnectivity::Dynamic;
    d.parameters_adapted = ParametersAdapted::Addition;
    d.parameter_sharing = ParameterSharing::None;
    d.input_type = InputType::Hidden;
    d.insertion_form = InsertionForm::Sequential;
    d.insertions = Insertions::AllLayers;
    d.integration_form = {Integration::DirectAddition};
    d.workspace = {Workspace::AttentionLayer};
    return d;
}

std::vector<SlotBinding> TinyAttention::bindings() const {
    std::vector<SlotBinding> b;
    for (const auto& p : params_)
        b.push_back({SlotId::post_attention(static_cast<int>(p.layer)), {Integration::DirectAddition, 1.0}});
    return b;
}

namespace {

struct TinyWeights {
    Tensor wq, wk, wv, wo;
};

// Single-head attention over each batch row of h (B,T,d); returns (B,T,d).
Tensor tiny_attention(const TinyWeights& w, const Tensor& h, bool causal, std::vector<Tensor>* mixtures) {
    const auto batch = h.dim(0), seq = h.dim(1), d = h.dim(2);
    const Tensor mask = attention_mask(seq, seq, causal);
    std::vector<Tensor> rows;
    rows.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        Tensor hb = reshape(slice(h, 0, b, b + 1), {seq, d});
        Tensor probs;
        Tensor ctx = attend(matmul(hb, w.wq), matmul(hb, w.wk), matmul(hb, w.wv), mask, &probs);
        if (mixtures) mixtures->push_back(probs);
        rows.push_back(reshape(matmul(ctx, w.wo), {1, seq, d}));
    }
    return concat(std::span<const Tensor>(rows), 0);
}

}  // namespace

HookMap TinyAttention::hooks() const {
    HookMap h;
    for (const auto& p : params_) {
        TinyWeights w{p.wq, p.wk, p.wv, p.wo};
        h[SlotId::post_attention(static_cast<int>(p.layer))] = [w, causal = base_.causal](SlotIo& io) {
            io.hidden = integrate({Integration::DirectAddition}, io.hidden, tiny_attention(w, io.hidden, causal, nullptr));
        };
    }
    return h;
}

const TinyAttention::LayerParams& TinyAttention::layer_params(std::size_t layer) const {
    for (const auto& p : params_)
        if (p.layer == layer) return p;
    throw IndexError("tiny-attention has no parameters at layer " + std::to_string(layer));
}

std::vector<Tensor> TinyAttention::mixture_weights(std::size_t layer, const Tensor& h) const {
    const auto& p = layer_params(layer);
    std::vector<Tensor> out;
    tiny_attention({p.wq, p.wk, p.wv, p.wo}, h, base_.causal, &out);
    return out;
}

std::vector<NamedTensor> TinyAttention::trainable_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        out.push_back({detail::layer_name(p.layer, "wq"), p.wq, l});
        out.push_back({detail::layer_name(p.layer, "wk"), p.wk, l});
        out.push_back({detail::layer_name(p.layer, "wv"), p.wv, l});
        out.push_back({detail::layer_name(p.layer, "wo"), p.wo, l});
    }
    return out;
}

std::unique_ptr<TinyAttention> tiny_attention_adapter_build(const PeftHyperparams& hp, const BaseConfig& base) {
    return std::make_unique<TinyAttention>(hp, base);
}

// ---- compacter -----------------------------------------------------------

namespace {

Tensor kron_sum(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    Tensor acc = kron(a[0], b[0]);
    for (std::size_t i = 1; i < a.size(); ++i) acc = add(acc, kron(a[i], b[i]));
    return acc;
}

}  // namespace

Compacter::Compacter(const PeftHyperparams& hp, const BaseConfig& base) : PeftModule(hp, base) {
    const auto d = base_.model_dim, dh = hp_.bottleneck_dim, n = hp_.kron_order;
    if (dh < 1) throw ConfigError("compacter bottleneck_dim must be >= 1");
    if (n < 1) throw ConfigError("kron_order must be >= 1");
    if (d % n != 0 || dh % n != 0)
        throw ConfigError("kron_order " + std::to_string(n) + " must divide model_dim " + std::to_string(d) +
                          " and bottleneck_dim " + std::to_string(dh));
    Rng rng(hp_.seed);
    const double a_bound = 1.0 / std::sqrt(static_cast<double>(n));
    const double b_bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto factors = [&](std::size_t rows, std::size_t cols, double bound) {
        std::vector<Tensor> out;
        for (std::size_t i = 0; i < n; ++i)
            out.push_back(bound > 0 ? rng.uniform_tensor({rows, cols}, bound, true) : Tensor::zeros({rows, cols}, true));
        return out;
    };
    for (auto l : active_layers()) {
        LayerParams p;
        p.layer = l;
        p.shared = factors(n, n, a_bound);
        p.attn_down = factors(d / n, dh / n, b_bound);
        p.attn_up = factors(dh / n, d / n, 0.0);
        p.ffn_down = factors(d / n, dh / n, b_bound);
        p.ffn_up = factors(dh / n, d / n, 0.0);
        params_.push_back(std::move(p));
    }
}

PeftDescriptor Compacter::descriptor() const {
    PeftDescriptor d = adapter_like_descriptor(technique());
    d.parameter_sharing = ParameterSharing::Shared;
    return d;
}

std::vector<SlotBinding> Compacter::bindings() const { return adapter_like_bindings(active_layers()); }

const Compacter::LayerParams& Compacter::layer_params(std::size_t layer) const {
    for (const auto& p : params_)
        if (p.layer == layer) return p;
    throw IndexError("compacter has no parameters at layer " + std::to_string(layer));
}

const std::vector<Tensor>& Compacter::shared_factors(std::size_t layer) const { return layer_params(layer).shared; }

const std::vector<Tensor>& Compacter::weight_factors(std::size_t layer, CompacterWeight which) const {
    const auto& p = layer_params(layer);
    switch (which) {
        case CompacterWeight::AttnDown: return p.attn_down;
        case CompacterWeight::AttnUp: return p.attn_up;
        case CompacterWeight::FfnDown: return p.ffn_down;
        case CompacterWeight::FfnUp: return p.ffn_up;
    }
    throw ContractError("unknown compacter weight");
}

Tensor Compacter::materialize(std::size_t layer, CompacterWeight which) const {
    return kron_sum(shared_factors(layer), weight_factors(layer, which));
}

HookMap Compacter::hooks() const {
    HookMap h;
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        auto make = [shared = p.shared](std::vector<Tensor> down, std::vector<Tensor> up) {
            return [shared, down, up](SlotIo& io) {
                // Rebuilt every call so gradients reach the factors.
                Tensor wd = kron_sum(shared, down), wu = kron_sum(shared, up);
                io.hidden = integrate({Integration::DirectAddition}, io.hidden, bottleneck(io.hidden, wd, {}, wu, {}));
            };
        };
        h[SlotId::post_attention(l)] = make(p.attn_down, p.attn_up);
        h[SlotId::post_ffn(l)] = make(p.ffn_down, p.ffn_up);
    }
    return h;
}

std::vector<NamedTensor> Compacter::trainable_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& p : params_) {
        const int l = static_cast<int>(p.layer);
        auto push = [&](const std::string& tag, const std::vector<Tensor>& fs) {
            for (std::size_t i = 0; i < fs.size(); ++i)
                out.push_back({detail::layer_name(p.layer, tag + std::to_string(i)), fs[i], l});
        };
        push("shared_a", p.shared);
        push("attn_down_b", p.attn_down);
        push("attn_up_b", p.attn_up);
        push("ffn_down_b", p.ffn_down);
        push("ffn_up_b", p.ffn_up);
    }
    return out;
}

std::unique_ptr<Compacter> compacter_build(const PeftHyperparams& hp, const BaseConfig& base) {
    return std::make_unique<Compacter>(hp, base);
}

}  // namespace peftref
