// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "peftref/tensor.hpp"

namespace peftref {

enum class NormPlacement { Post, Pre };

struct BaseConfig {
    std::size_t num_layers = 2;
    std::size_t model_dim = 16;
    std::size_t num_heads = 2;
    std::size_t ffn_dim = 0;  // 0 resolves to 4 * model_dim
    std::size_t vocab_size = 32;
    std::size_t max_seq_len = 32;
    bool causal = true;
    NormPlacement norm = NormPlacement::Post;

    // Returns a copy with defaults filled in; throws ConfigError if invalid.
    BaseConfig resolved() const;
    std::size_t head_dim() const { return model_dim / num_heads; }

    // Canonical "key=value;" text used for fingerprints and file headers.
    std::string canonical() const;
    static BaseConfig parse_canonical(const std::string& text);

    bool operator==(const BaseConfig&) const = default;
};

enum class SlotKind {
    EmbeddingOutput,
    AttnQueryValueWeights,
    AttnKeysValues,
    PostAttention,
    FfnIntermediate,
    PostFfn,
};

// Workspace category a slot belongs to; mirrors the typology's workspace values.
enum class Workspace {
    EmbeddingLayer,
    AttentionKeysValues,
    AttentionQueriesValues,
    AttentionLayer,
    FfnLayer,
    FfnIntermediate,
};

struct SlotId {
    SlotKind kind = SlotKind::EmbeddingOutput;
    int layer = -1;  // -1 only for EmbeddingOutput

    static SlotId embedding_output() { return {SlotKind::EmbeddingOutput, -1}; }
    static SlotId attn_query_value_weights(int l) { return {SlotKind::AttnQueryValueWeights, l}; }
    static SlotId attn_keys_values(int l) { return {SlotKind::AttnKeysValues, l}; }
    static SlotId post_attention(int l) { return {SlotKind::PostAttention, l}; }
    static SlotId ffn_intermediate(int l) { return {SlotKind::FfnIntermediate, l}; }
    static SlotId post_ffn(int l) { return {SlotKind::PostFfn, l}; }

    Workspace workspace() const;
    std::string str() const;

    auto operator<=>(const SlotId&) const = default;
};

// Values exchanged at a slot. The forward pass fills the fields relevant to the
// slot, calls the hook, validates the replacements and continues with them.
//
//   EmbeddingOutput        hidden (B,T,d) token embeddings before positions;
//                          the sequence axis may grow
//   AttnQueryValueWeights  queries, values (B,T,d) projection outputs; input
//                          (B,T,d), query_weight and value_weight are read-only
//   AttnKeysValues         keys, values (B,Tk,d); Tk may grow (prefixes)
//   PostAttention          hidden (B,T,d) attention block output
//   FfnIntermediate        hidden (B,T,ffn) activation after the nonlinearity
//   PostFfn                hidden (B,T,d) FFN block output
struct SlotIo {
    SlotId slot;
    Tensor hidden;
    Tensor queries;
    Tensor keys;
    Tensor values;
    Tensor input;
    Tensor query_weight;
    Tensor value_weight;
};

using Hook = std::function<void(SlotIo&)>;
using HookMap = std::map<SlotId, Hook>;

struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<int> ids;  // row-major (batch, seq)
};

struct LayerTrace {
    Tensor input;            // residual stream entering the layer
    Tensor queries;          // (B,T,d)
    Tensor keys;             // (B,Tk,d)
    Tensor values;           // (B,Tk,d)
    std::vector<Tensor> attn_probs;  // per (batch, head), each (T, Tk)
    Tensor attn_context;     // (B,T,d) softmax-weighted values, pre output projection
    Tensor attn_out;         // (B,T,d) attention block output
    Tensor ffn_intermediate; // (B,T,ffn)
    Tensor ffn_out;          // (B,T,d) FFN block output
    Tensor output;           // residual stream leaving the layer
};

struct ForwardTrace {
    Tensor embedding_output;  // after the EmbeddingOutput hook, before positions
    std::vector<LayerTrace> layers;
    Tensor final_hidden;      // (B,T,d), before the final norm (pre-norm) and head
};

struct ForwardResult {
    Tensor logits;  // (B,T,V) over every position, virtual tokens included
    ForwardTrace trace;
};

struct LayerWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_gain, ln1_bias;
    Tensor w1, b1, w2, b2;
    Tensor ln2_gain, ln2_bias;
};

// Frozen decoder-style transformer standing in for the pretrained model.
class BaseModel {
public:
    static BaseModel build(const BaseConfig& config, std::uint64_t seed);
    // Rebuilds from named parameters (as produced by parameters()).
    static BaseModel from_parameters(const BaseConfig& config, const std::vector<NamedTensor>& params);

    const BaseConfig& config() const { return config_; }
    const std::vector<LayerWeights>& layers() const { return layers_; }
    const Tensor& token_embedding() const { return token_embedding_; }
    const Tensor& position_embedding() const { return position_embedding_; }
    const Tensor& head_weight() const { return head_w_; }
    const Tensor& head_bias() const { return head_b_; }
    const Tensor& final_gain() const { return final_gain_; }
    const Tensor& final_bias() const { return final_bias_; }

    std::vector<NamedTensor> parameters() const;
    std::size_t parameter_count() const;
    std::size_t trainable_parameter_count() const;
    std::uint64_t parameter_hash() const;

    // Deep copy; parameters keep their requires_grad flags.
    BaseModel clone() const;
    void set_trainable(bool trainable);

    ForwardResult forward(const TokenBatch& tokens, const HookMap& hooks = {}) const;

private:
    BaseConfig config_;
    Tensor token_embedding_;
    Tensor position_embedding_;
    std::vector<LayerWeights> layers_;
    Tensor final_gain_, final_bias_;  // pre-norm only
    Tensor head_w_, head_b_;
};

ForwardResult forward_with_hooks(const BaseModel& model, const TokenBatch& tokens, const HookMap& hooks);

// Residual-stream value entering `layer`.
Tensor residual_flow_view(const ForwardTrace& trace, int layer);

// Causal mask offset for prepended keys: query i may read key j when
// j < prefix or j - prefix <= i. Entries are 0 or -infinity.
Tensor attention_mask(std::size_t queries, std::size_t keys, bool causal);

// Single-head scaled dot-product attention: softmax(q k^T / sqrt(dk) + mask) v.
// Optionally returns the probability matrix.
Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask, Tensor* probs = nullptr);

}  // namespace peftref
