// SPDX-License-Identifier: Apache-2.0
#include "peftref/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "peftref/errors.hpp"
#include "peftref/ops.hpp"

namespace peftref {

BaseConfig BaseConfig::resolved() const {
    BaseConfig c = *this;
    if (c.ffn_dim == 0) c.ffn_dim = 4 * c.model_dim;
    if (c.num_layers == 0) throw ConfigError("num_layers must be positive");
    if (c.model_dim == 0) throw ConfigError("model_dim must be positive");
    if (c.num_heads == 0) throw ConfigError("num_heads must be positive");
    if (c.model_dim % c.num_heads != 0) {
        throw ConfigError("model_dim " + std::to_string(c.model_dim) + " is not divisible by num_heads " +
                          std::to_string(c.num_heads));
    }
    if (c.vocab_size == 0) throw ConfigError("vocab_size must be positive");
    if (c.max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
    return c;
}

std::string BaseConfig::canonical() const {
    const BaseConfig c = resolved();
    std::ostringstream out;
    out << "layers=" << c.num_layers << ";dim=" << c.model_dim << ";heads=" << c.num_heads
        << ";ffn=" << c.ffn_dim << ";vocab=" << c.vocab_size << ";max_seq=" << c.max_seq_len
        << ";causal=" << (c.causal ? 1 : 0) << ";norm=" << (c.norm == NormPlacement::Post ? "post" : "pre")
        << ';';
    return out.str();
}

BaseConfig BaseConfig::parse_canonical(const std::string& text) {
    BaseConfig c;
    std::istringstream in(text);
    std::string field;
    while (std::getline(in, field, ';')) {
        if (field.empty()) continue;
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw ConfigError("malformed config field '" + field + "'");
        const std::string key = field.substr(0, eq);
        const std::string value = field.substr(eq + 1);
        try {
            if (key == "layers") c.num_layers = std::stoul(value);
            else if (key == "dim") c.model_dim = std::stoul(value);
            else if (key == "heads") c.num_heads = std::stoul(value);
            else if (key == "ffn") c.ffn_dim = std::stoul(value);
            else if (key == "vocab") c.vocab_size = std::stoul(value);
            else if (key == "max_seq") c.max_seq_len = std::stoul(value);
            else if (key == "causal") c.causal = value == "1";
            else if (key == "norm") {
                if (value != "post" && value != "pre") throw ConfigError("unknown norm placement '" + value + "'");
                c.norm = value == "post" ? NormPlacement::Post : NormPlacement::Pre;
            } else throw ConfigError("unknown config key '" + key + "'");
        } catch (const std::logic_error&) {
            throw ConfigError("bad value for config key '" + key + "': '" + value + "'");
        }
    }
    return c.resolved();
}

Workspace SlotId::workspace() const {
    switch (kind) {
        case SlotKind::EmbeddingOutput: return Workspace::EmbeddingLayer;
        case SlotKind::AttnQueryValueWeights: return Workspace::AttentionQueriesValues;
        case SlotKind::AttnKeysValues: return Workspace::AttentionKeysValues;
        case SlotKind::PostAttention: return Workspace::AttentionLayer;
        case SlotKind::FfnIntermediate: return Workspace::FfnIntermediate;
        case SlotKind::PostFfn: return Workspace::FfnLayer;
    }
    return Workspace::EmbeddingLayer;
}

std::string SlotId::str() const {
    const char* name = "EmbeddingOutput";
    switch (kind) {
        case SlotKind::EmbeddingOutput: return name;
        case SlotKind::AttnQueryValueWeights: name = "AttnQueryValueWeights"; break;
        case SlotKind::AttnKeysValues: name = "AttnKeysValues"; break;
        case SlotKind::PostAttention: name = "PostAttention"; break;
        case SlotKind::FfnIntermediate: name = "FfnIntermediate"; break;
        case SlotKind::PostFfn: name = "PostFfn"; break;
    }
    return std::string(name) + "(" + std::to_string(layer) + ")";
}

// ---------------------------------------------------------------------------

namespace {

Tensor init_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
    return rng.uniform_tensor(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

Tensor affine_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    return add_bias(rescale_last_axis(layer_norm(x), gain), bias);
}

// x (B,T,in) -> (B,T,out) through w (in x out) and bias (out).
Tensor linear3(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::size_t batch = x.dim(0), seq = x.dim(1);
    Tensor y = add_bias(matmul(reshape(x, {batch * seq, x.dim(2)}), w), b);
    return reshape(y, {batch, seq, w.dim(1)});
}

void require_shape(const SlotId& slot, const char* what, const Tensor& got, const Shape& want) {
    if (got.shape() != want) {
        throw SlotContractError("slot " + slot.str() + ": hook returned " + what + " of shape " +
                                shape_str(got.shape()) + ", expected " + shape_str(want));
    }
}

}  // namespace

BaseModel BaseModel::build(const BaseConfig& config, std::uint64_t seed) {
    BaseModel m;
    m.config_ = config.resolved();
    const auto& c = m.config_;
    const std::size_t d = c.model_dim, f = c.ffn_dim;
    Rng rng(seed);

    m.token_embedding_ = rng.uniform_tensor({c.vocab_size, d}, 1.0);
    m.position_embedding_ = rng.uniform_tensor({c.max_seq_len, d}, 1.0);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        LayerWeights w;
        w.wq = init_uniform(rng, {d, d}, d);
        w.bq = init_uniform(rng, {d}, d);
        w.wk = init_uniform(rng, {d, d}, d);
        w.bk = init_uniform(rng, {d}, d);
        w.wv = init_uniform(rng, {d, d}, d);
        w.bv = init_uniform(rng, {d}, d);
        w.wo = init_uniform(rng, {d, d}, d);
        w.bo = init_uniform(rng, {d}, d);
        w.ln1_gain = Tensor::ones({d});
        w.ln1_bias = Tensor::zeros({d});
        w.w1 = init_uniform(rng, {d, f}, d);
        w.b1 = init_uniform(rng, {f}, d);
        w.w2 = init_uniform(rng, {f, d}, f);
        w.b2 = init_uniform(rng, {d}, f);
        w.ln2_gain = Tensor::ones({d});
        w.ln2_bias = Tensor::zeros({d});
        m.layers_.push_back(std::move(w));
    }
    if (c.norm == NormPlacement::Pre) {
        m.final_gain_ = Tensor::ones({d});
        m.final_bias_ = Tensor::zeros({d});
    }
    m.head_w_ = init_uniform(rng, {d, c.vocab_size}, d);
    m.head_b_ = init_uniform(rng, {c.vocab_size}, d);
    return m;
}

std::vector<NamedTensor> BaseModel::parameters() const {
    std::vector<NamedTensor> out;
    out.push_back({"tok_emb", token_embedding_, -1});
    out.push_back({"pos_emb", position_embedding_, -1});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& w = layers_[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        const int li = static_cast<int>(l);
        for (const auto& [name, t] : std::initializer_list<std::pair<const char*, const Tensor*>>{
                 {"wq", &w.wq}, {"bq", &w.bq}, {"wk", &w.wk}, {"bk", &w.bk},
                 {"wv", &w.wv}, {"bv", &w.bv}, {"wo", &w.wo}, {"bo", &w.bo},
                 {"ln1_gain", &w.ln1_gain}, {"ln1_bias", &w.ln1_bias},
                 {"w1", &w.w1}, {"b1", &w.b1}, {"w2", &w.w2}, {"b2", &w.b2},
                 {"ln2_gain", &w.ln2_gain}, {"ln2_bias", &w.ln2_bias}}) {
            out.push_back({p + name, *t, li});
        }
    }
    if (config_.norm == NormPlacement::Pre) {
        out.push_back({"final.gain", final_gain_, -1});
        out.push_back({"final.bias", final_bias_, -1});
    }
    out.push_back({"head.w", head_w_, -1});
    out.push_back({"head.b", head_b_, -1});
    return out;
}

BaseModel BaseModel::from_parameters(const BaseConfig& config, const std::vector<NamedTensor>& params) {
    BaseModel m = build(config, 0);
    auto slots = m.parameters();
    if (slots.size() != params.size()) {
        throw ContractError("base model expects " + std::to_string(slots.size()) + " parameters, got " +
                            std::to_string(params.size()));
    }
    for (const auto& slot : slots) {
        auto it = std::find_if(params.begin(), params.end(),
                               [&](const NamedTensor& p) { return p.name == slot.name; });
        if (it == params.end()) throw ContractError("missing base parameter '" + slot.name + "'");
        if (it->tensor.shape() != slot.tensor.shape()) {
            throw DimensionError("base parameter '" + slot.name + "' has shape " + shape_str(it->tensor.shape()) +
                                 ", expected " + shape_str(slot.tensor.shape()));
        }
        Tensor dst = slot.tensor;
        std::copy(it->tensor.data().begin(), it->tensor.data().end(), dst.mutable_data().begin());
    }
    return m;
}

std::size_t BaseModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
}

std::size_t BaseModel::trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) {
        if (p.tensor.requires_grad()) n += p.tensor.numel();
    }
    return n;
}

std::uint64_t BaseModel::parameter_hash() const {
    const auto params = parameters();
    return hash_tensors(params);
}

BaseModel BaseModel::clone() const {
    BaseModel m = *this;
    auto copy = [](Tensor& t) {
        if (t.numel() > 0) t = t.clone();
    };
    copy(m.token_embedding_);
    copy(m.position_embedding_);
    for (auto& w : m.layers_) {
        for (Tensor* t : {&w.wq, &w.bq, &w.wk, &w.bk, &w.wv, &w.bv, &w.wo, &w.bo, &w.ln1_gain, &w.ln1_bias,
                          &w.w1, &w.b1, &w.w2, &w.b2, &w.ln2_gain, &w.ln2_bias}) {
            copy(*t);
        }
    }
    copy(m.final_gain_);
    copy(m.final_bias_);
    copy(m.head_w_);
    copy(m.head_b_);
    return m;
}

void BaseModel::set_trainable(bool trainable) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(trainable);
}

ForwardResult BaseModel::forward(const TokenBatch& tokens, const HookMap& hooks) const {
    return forward_with_hooks(*this, tokens, hooks);
}

// ---------------------------------------------------------------------------

Tensor attention_mask(std::size_t queries, std::size_t keys, bool causal) {
    Tensor mask = Tensor::zeros({queries, keys});
    if (!causal) return mask;
    const std::size_t prefix = keys >= queries ? keys - queries : 0;
    auto m = mask.mutable_data();
    for (std::size_t i = 0; i < queries; ++i) {
        for (std::size_t j = prefix; j < keys; ++j) {
            if (j - prefix > i) m[i * keys + j] = -std::numeric_limits<double>::infinity();
        }
    }
    return mask;
}

Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask, Tensor* probs) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor scores = add(scale(matmul(q, transpose(k)), inv), mask);
    Tensor p = softmax(scores);
    if (probs) *probs = p;
    return matmul(p, v);
}

ForwardResult forward_with_hooks(const BaseModel& model, const TokenBatch& tokens, const HookMap& hooks) {
    const BaseConfig& c = model.config();
    const std::size_t d = c.model_dim, heads = c.num_heads, hd = c.head_dim();
    const std::size_t batch = tokens.batch;
    if (batch == 0 || tokens.seq == 0) throw ContractError("forward on an empty token batch");
    if (tokens.ids.size() != batch * tokens.seq) {
        throw DimensionError("token batch holds " + std::to_string(tokens.ids.size()) + " ids for shape (" +
                             std::to_string(batch) + ", " + std::to_string(tokens.seq) + ")");
    }
    for (const auto& [slot, hook] : hooks) {
        const bool embedding = slot.kind == SlotKind::EmbeddingOutput;
        if (embedding ? slot.layer != -1
                      : (slot.layer < 0 || static_cast<std::size_t>(slot.layer) >= c.num_layers)) {
            throw IndexError("hook slot " + slot.str() + " is not valid for a " + std::to_string(c.num_layers) +
                             "-layer model");
        }
    }
    auto find_hook = [&](const SlotId& slot) -> const Hook* {
        auto it = hooks.find(slot);
        return it == hooks.end() || !it->second ? nullptr : &it->second;
    };

    ForwardResult result;
    ForwardTrace& trace = result.trace;

    Tensor x = reshape(embedding(model.token_embedding(), tokens.ids), {batch, tokens.seq, d});
    if (const Hook* hook = find_hook(SlotId::embedding_output())) {
        SlotIo io;
        io.slot = SlotId::embedding_output();
        io.hidden = x;
        (*hook)(io);
        const auto& s = io.hidden.shape();
        if (s.size() != 3 || s[0] != batch || s[2] != d || s[1] == 0) {
            throw SlotContractError("slot " + io.slot.str() + ": hook returned hidden of shape " +
                                    shape_str(s) + ", expected (" + std::to_string(batch) + ", T', " +
                                    std::to_string(d) + ")");
        }
        x = io.hidden;
    }
    const std::size_t seq = x.dim(1);
    if (seq > c.max_seq_len) {
        throw SlotContractError("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                                std::to_string(c.max_seq_len));
    }
    trace.embedding_output = x;
    {
        const Tensor pos = slice(model.position_embedding(), 0, 0, seq);
        std::vector<Tensor> copies(batch, pos);
        x = add(x, reshape(concat(copies, 0), {batch, seq, d}));
    }

    const bool pre = c.norm == NormPlacement::Pre;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        const LayerWeights& w = model.layers()[l];
        const int li = static_cast<int>(l);
        LayerTrace lt;
        lt.input = x;

        const Tensor attn_in = pre ? affine_norm(x, w.ln1_gain, w.ln1_bias) : x;
        Tensor q = linear3(attn_in, w.wq, w.bq);
        Tensor k = linear3(attn_in, w.wk, w.bk);
        Tensor v = linear3(attn_in, w.wv, w.bv);

        if (const Hook* hook = find_hook(SlotId::attn_query_value_weights(li))) {
            SlotIo io;
            io.slot = SlotId::attn_query_value_weights(li);
            io.queries = q;
            io.values = v;
            io.input = attn_in;
            io.query_weight = w.wq;
            io.value_weight = w.wv;
            (*hook)(io);
            require_shape(io.slot, "queries", io.queries, q.shape());
            require_shape(io.slot, "values", io.values, v.shape());
            q = io.queries;
            v = io.values;
        }
        if (const Hook* hook = find_hook(SlotId::attn_keys_values(li))) {
            SlotIo io;
            io.slot = SlotId::attn_keys_values(li);
            io.keys = k;
            io.values = v;
            (*hook)(io);
            const auto& ks = io.keys.shape();
            if (ks.size() != 3 || ks[0] != batch || ks[2] != d || ks[1] < seq) {
                throw SlotContractError("slot " + io.slot.str() + ": hook returned keys of shape " +
                                        shape_str(ks) + ", expected (" + std::to_string(batch) + ", Tk >= " +
                                        std::to_string(seq) + ", " + std::to_string(d) + ")");
            }
            require_shape(io.slot, "values", io.values, ks);
            k = io.keys;
            v = io.values;
        }
        lt.queries = q;
        lt.keys = k;
        lt.values = v;

        const std::size_t keys = k.dim(1);
        const Tensor mask = attention_mask(seq, keys, c.causal);
        std::vector<Tensor> per_batch;
        per_batch.reserve(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            const Tensor qb = reshape(slice(q, 0, b, b + 1), {seq, d});
            const Tensor kb = reshape(slice(k, 0, b, b + 1), {keys, d});
            const Tensor vb = reshape(slice(v, 0, b, b + 1), {keys, d});
            std::vector<Tensor> per_head;
            per_head.reserve(heads);
            for (std::size_t h = 0; h < heads; ++h) {
                Tensor probs;
                per_head.push_back(attend(slice(qb, 1, h * hd, (h + 1) * hd), slice(kb, 1, h * hd, (h + 1) * hd),
                                          slice(vb, 1, h * hd, (h + 1) * hd), mask, &probs));
                lt.attn_probs.push_back(probs);
            }
            per_batch.push_back(heads == 1 ? per_head[0] : concat(per_head, 1));
        }
        const Tensor context = concat(per_batch, 0);
        lt.attn_context = reshape(context, {batch, seq, d});
        Tensor attn_out = reshape(add_bias(matmul(context, w.wo), w.bo), {batch, seq, d});

        if (const Hook* hook = find_hook(SlotId::post_attention(li))) {
            SlotIo io;
            io.slot = SlotId::post_attention(li);
            io.hidden = attn_out;
            (*hook)(io);
            require_shape(io.slot, "hidden", io.hidden, attn_out.shape());
            attn_out = io.hidden;
        }
        lt.attn_out = attn_out;

        const Tensor h1 = pre ? add(x, attn_out) : affine_norm(add(x, attn_out), w.ln1_gain, w.ln1_bias);
        const Tensor ffn_in = pre ? affine_norm(h1, w.ln2_gain, w.ln2_bias) : h1;
        Tensor act = gelu(linear3(ffn_in, w.w1, w.b1));
        if (const Hook* hook = find_hook(SlotId::ffn_intermediate(li))) {
            SlotIo io;
            io.slot = SlotId::ffn_intermediate(li);
            io.hidden = act;
            (*hook)(io);
            require_shape(io.slot, "hidden", io.hidden, act.shape());
            act = io.hidden;
        }
        lt.ffn_intermediate = act;

        Tensor ffn_out = linear3(act, w.w2, w.b2);
        if (const Hook* hook = find_hook(SlotId::post_ffn(li))) {
            SlotIo io;
            io.slot = SlotId::post_ffn(li);
            io.hidden = ffn_out;
            (*hook)(io);
            require_shape(io.slot, "hidden", io.hidden, ffn_out.shape());
            ffn_out = io.hidden;
        }
        lt.ffn_out = ffn_out;

        x = pre ? add(h1, ffn_out) : affine_norm(add(h1, ffn_out), w.ln2_gain, w.ln2_bias);
        lt.output = x;
        trace.layers.push_back(std::move(lt));
    }
    trace.final_hidden = x;

    const Tensor head_in = pre ? affine_norm(x, model.final_gain(), model.final_bias()) : x;
    result.logits = linear3(head_in, model.head_weight(), model.head_bias());
    return result;
}

Tensor residual_flow_view(const ForwardTrace& trace, int layer) {
    if (layer < 0 || static_cast<std::size_t>(layer) >= trace.layers.size()) {
        throw IndexError("layer " + std::to_string(layer) + " outside [0, " + std::to_string(trace.layers.size()) +
                         ")");
    }
    return trace.layers[static_cast<std::size_t>(layer)].input;
}

}  // namespace peftref
