// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "peftref/transformer.hpp"
#include "peftref/typology.hpp"

namespace peftref {

// How a module output enters the base model. lambda is used by scaled and
// gated addition only.
struct IntegrationForm {
    Integration kind = Integration::DirectAddition;
    double lambda = 1.0;

    bool operator==(const IntegrationForm&) const = default;
};

// Applies an integration form to base value h and module value delta:
//   Concatenation   concat(delta, h) along the sequence axis (axis 1)
//   ScaledAddition  h + lambda * delta
//   DirectAddition  h + delta
//   GatedAddition   (1 - lambda) * h + lambda * delta, lambda in [0, 1]
//   Rescaling       h * delta, delta a vector over the last axis
Tensor integrate(const IntegrationForm& form, const Tensor& h, const Tensor& delta);

struct SlotBinding {
    SlotId slot;
    IntegrationForm form;
};

enum class PrefixActivation { Softmax, Tanh };
enum class PrefixPayload { Network, Final };

struct PeftHyperparams {
    std::size_t n_virtual_tokens = 8;  // prompt / prefix length n
    std::size_t bottleneck_dim = 4;    // adapter and compacter d_h
    std::size_t rank = 2;              // LoRA r
    std::size_t kron_order = 2;        // compacter N
    std::size_t tiny_dim = 1;          // tiny-attention d_t
    double lora_scale = 1.0;           // LoRA lambda
    std::size_t prefix_dim = 0;        // prefix key/value width; 0 resolves to d_m
    PrefixActivation prefix_activation = PrefixActivation::Softmax;
    PrefixPayload prefix_payload = PrefixPayload::Network;
    bool adapter_biases = false;
    std::vector<std::size_t> layers;  // insertion layers; empty means all
    std::uint64_t seed = 0;

    std::string to_text() const;
    static PeftHyperparams from_text(const std::string& text);

    bool operator==(const PeftHyperparams&) const = default;
};

// Uniform plugin contract shared by every technique.
class PeftModule {
public:
    virtual ~PeftModule() = default;

    virtual Technique technique() const = 0;
    // Self-declared structural description, checked against the registry.
    virtual PeftDescriptor descriptor() const = 0;
    virtual std::vector<SlotBinding> bindings() const = 0;
    // Hooks installed into the base forward pass. Keys are a subset of the
    // binding slots.
    virtual HookMap hooks() const = 0;
    virtual std::vector<NamedTensor> trainable_tensors() const = 0;

    const PeftHyperparams& hyperparams() const { return hp_; }
    const BaseConfig& base_config() const { return base_; }
    std::vector<std::size_t> active_layers() const;

    // Copies values into the trainable tensors by name; shapes must match and
    // every tensor must be covered.
    void load_tensors(const std::vector<NamedTensor>& values);

protected:
    PeftModule(PeftHyperparams hp, const BaseConfig& base);

    PeftHyperparams hp_;
    BaseConfig base_;
};

class PromptTuning final : public PeftModule {
public:
    PromptTuning(const PeftHyperparams& hp, const BaseConfig& base);

    Technique technique() const override { return Technique::PromptTuning; }
    PeftDescriptor descriptor() const override;
    std::vector<SlotBinding> bindings() const override;
    HookMap hooks() const override;
    std::vector<NamedTensor> trainable_tensors() const override;

    const Tensor& prompt() const { return prompt_; }

private:
    Tensor prompt_;  // (n, d_m)
};

class PrefixTuning final : public PeftModule {
public:
    PrefixTuning(const PeftHyperparams& hp, const BaseConfig& base);

    Technique technique() const override { return Technique::PrefixTuning; }
    PeftDescriptor descriptor() const override;
    std::vector<SlotBinding> bindings() const override;
    HookMap hooks() const override;
    std::vector<NamedTensor> trainable_tensors() const override;

    bool exported() const { return hp_.prefix_payload == PrefixPayload::Final; }
    // Prefix keys and values (each n x d_h) for a layer.
    std::pair<Tensor, Tensor> prefixes(std::size_t layer) const;

    // Evaluates the reparameterization network once and returns a module that
    // carries only the resulting per-layer prefixes.
    std::unique_ptr<PrefixTuning> export_final() const;

private:
    struct LayerParams {
        std::size_t layer;
        Tensor embed;     // (n, d_m)
        Tensor w1;        // (d_m, d_m)
        Tensor w2;        // (d_m, 2 d_h)
        Tensor prefix_k;  // (n, d_h), exported payload only
        Tensor prefix_v;
    };
    std::vector<LayerParams> params_;
};

class LoRA final : public PeftModule {
public:
    LoRA(const PeftHyperparams& hp, const BaseConfig& base);

    Technique technique() const override { return Technique::LoRA; }
    PeftDescriptor descriptor() const override;
    std::vector<SlotBinding> bindings() const override;
    HookMap hooks() const override;
    std::vector<NamedTensor> trainable_tensors() const override;

private:
    struct LayerParams {
        std::size_t layer;
        Tensor q_down, q_up;  // (d_m, r), (r, d_m)
        Tensor v_down, v_up;
    };
    std::vector<LayerParams> params_;
};

class Adapters final : public PeftModule {
public:
    Adapters(const PeftHyperparams& hp, const BaseConfig& base);

    Technique technique() const override { return Technique::Adapters; }
    PeftDescriptor descriptor() const override;
    std::vector<SlotBinding> bindings() const override;
    HookMap hooks() const override;
    std::vector<NamedTensor> trainable_tensors() const override;

private:
    struct Stack {
        Tensor down, up;            // (d_m, d_h), (d_h, d_m)
        Tensor down_bias, up_bias;  // only with adapter_biases
    };
    struct LayerParams {
        std::size_t layer;
        Stack attn, ffn;
    };
    std::vector<LayerParams> params_;
};

class TinyAttention final : public PeftModule {
public:
    TinyAttention(const PeftHyperparams& hp, const BaseConfig& base);

    Technique technique() const override { return Technique::TinyAttention; }
    PeftDescriptor descriptor() const override;
    std::vector<SlotBinding> bindings() const override;
    HookMap hooks() const override;
    std::vector<NamedTensor> trainable_tensors() const override;

    // Per-batch-row mixture weights (T x T) the module applies to hidden
    // values h (B,T,d) at `layer`.
    std::vector<Tensor> mixture_weights(std::size_t layer, const Tensor& h) const;

private:
    struct LayerParams {
        std::size_t layer;
        Tensor wq, wk, wv;  // (d_m, d_t)
        Tensor wo;          // (d_t, d_m)
    };
    const LayerParams& layer_params(std::size_t layer) const;
    std::vector<LayerParams> params_;
};

enum class CompacterWeight { AttnDown, AttnUp, FfnDown, FfnUp };

class Compacter final : public PeftModule {
public:
    Compacter(const PeftHyperparams& hp, const BaseConfig& base);

    Technique technique() const override { return Technique::Compacter; }
    PeftDescriptor descriptor() const override;
    std::vector<SlotBinding> bindings() const override;
    HookMap hooks() const override;
    std::vector<NamedTensor> trainable_tensors() const override;

    // sum_i A_i kron B_i for one of the four adapter weights of a layer.
    Tensor materialize(std::size_t layer, CompacterWeight which) const;
    // Shared N x N factors A_1..A_N of a layer.
    const std::vector<Tensor>& shared_factors(std::size_t layer) const;
    // Per-weight factors B_1..B_N.
    const std::vector<Tensor>& weight_factors(std::size_t layer, CompacterWeight which) const;

private:
    struct LayerParams {
        std::size_t layer;
        std::vector<Tensor> shared;
        std::vector<Tensor> attn_down, attn_up, ffn_down, ffn_up;
    };
    const LayerParams& layer_params(std::size_t layer) const;
    std::vector<LayerParams> params_;
};

class IA3 final : public PeftModule {
public:
    IA3(const PeftHyperparams& hp, const BaseConfig& base);

    Technique technique() const override { return Technique::IA3; }
    PeftDescriptor descriptor() const override;
    std::vector<SlotBinding> bindings() const override;
    HookMap hooks() const override;
    std::vector<NamedTensor> trainable_tensors() const override;

    // Scales (l_k, l_v, l_ff) of a layer.
    std::vector<Tensor> scales(std::size_t layer) const;

private:
    struct LayerParams {
        std::size_t layer;
        Tensor keys, values, ffn;  // (d_m), (d_m), (ffn_dim)
    };
    std::vector<LayerParams> params_;
};

std::unique_ptr<PromptTuning> prompt_tuning_build(const PeftHyperparams& hp, const BaseConfig& base);
std::unique_ptr<PrefixTuning> prefix_tuning_build(const PeftHyperparams& hp, const BaseConfig& base);
std::unique_ptr<PrefixTuning> prefix_export_final(const PrefixTuning& module);
std::unique_ptr<LoRA> lora_build(const PeftHyperparams& hp, const BaseConfig& base);
std::unique_ptr<Adapters> adapter_build(const PeftHyperparams& hp, const BaseConfig& base);
std::unique_ptr<TinyAttention> tiny_attention_adapter_build(const PeftHyperparams& hp, const BaseConfig& base);
std::unique_ptr<Compacter> compacter_build(const PeftHyperparams& hp, const BaseConfig& base);
std::unique_ptr<IA3> ia3_build(const PeftHyperparams& hp, const BaseConfig& base);

std::unique_ptr<PeftModule> build_module(Technique technique, const PeftHyperparams& hp, const BaseConfig& base);

// A base model with at most one PEFT module attached.
class ComposedModel {
public:
    explicit ComposedModel(std::shared_ptr<const BaseModel> base);

    // Control mode: an unfrozen deep copy of the base whose every parameter
    // is trainable and no module can be attached.
    static ComposedModel full_finetune(const BaseModel& base);

    // Throws CompositionError when a module is already attached or the
    // module was built for a different base configuration.
    void attach(std::shared_ptr<PeftModule> module);
    std::shared_ptr<PeftModule> detach();

    bool has_module() const { return module_ != nullptr; }
    bool is_full_finetune() const { return full_finetune_; }
    const BaseModel& base() const { return *base_; }
    std::shared_ptr<const BaseModel> base_ptr() const { return base_; }
    const PeftModule* module() const { return module_.get(); }
    PeftModule* module() { return module_.get(); }

    std::vector<NamedTensor> trainable_tensors() const;
    std::size_t trainable_parameter_count() const;

    // Logits cover the caller's tokens only: positions of prepended virtual
    // tokens are dropped. The trace is left untouched.
    ForwardResult forward(const TokenBatch& tokens) const;
    ForwardResult forward(const TokenBatch& tokens, const HookMap& extra_observers) const;

private:
    std::shared_ptr<const BaseModel> base_;
    std::shared_ptr<PeftModule> module_;
    bool full_finetune_ = false;
};

ComposedModel attach(std::shared_ptr<const BaseModel> base, std::shared_ptr<PeftModule> module);

std::size_t count_parameters(std::span<const NamedTensor> tensors);

}  // namespace peftref
