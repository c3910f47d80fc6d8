// SPDX-License-Identifier: Apache-2.0
#include "peftref/peft.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <sstream>

#include "module_util.hpp"
#include "peftref/errors.hpp"
#include "peftref/ops.hpp"

namespace peftref {

namespace detail {

Tensor linear3(const Tensor& x, const Tensor& w) {
    if (x.rank() != 3) throw DimensionError("linear3: expected (B,T,a), got " + shape_str(x.shape()));
    const auto b = x.dim(0), t = x.dim(1);
    Tensor y = matmul(reshape(x, {b * t, x.dim(2)}), w);
    return reshape(y, {b, t, w.dim(1)});
}

Tensor tile_batch(const Tensor& rows, std::size_t batch) {
    Tensor one = reshape(rows, {1, rows.dim(0), rows.dim(1)});
    std::vector<Tensor> parts(batch, one);
    return concat(std::span<const Tensor>(parts), 0);
}

}  // namespace detail

Tensor integrate(const IntegrationForm& form, const Tensor& h, const Tensor& delta) {
    switch (form.kind) {
        case Integration::Concatenation:
            return concat({delta, h}, 1);
        case Integration::ScaledAddition:
            return add(h, scale(delta, form.lambda));
        case Integration::DirectAddition:
            return add(h, delta);
        case Integration::GatedAddition:
            if (!(form.lambda >= 0.0 && form.lambda <= 1.0))
                throw DomainError("gated addition needs lambda in [0, 1]");
            return add(scale(h, 1.0 - form.lambda), scale(delta, form.lambda));
        case Integration::Rescaling:
            return rescale_last_axis(h, delta);
    }
    throw ContractError("integrate: unknown form");
}

// ---- hyperparameters -----------------------------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw ConfigError("hyperparameter " + key + ": not an unsigned integer: '" + v + "'");
    return out;
}

}  // namespace

std::string PeftHyperparams::to_text() const {
    std::ostringstream os;
    os << "n_tokens=" << n_virtual_tokens << ';' << "bottleneck=" << bottleneck_dim << ';' << "rank=" << rank
       << ';' << "kron=" << kron_order << ';' << "tiny=" << tiny_dim << ';' << "scale=" << fmt_double(lora_scale)
       << ';' << "prefix_dim=" << prefix_dim << ';'
       << "prefix_act=" << (prefix_activation == PrefixActivation::Softmax ? "softmax" : "tanh") << ';'
       << "prefix_payload=" << (prefix_payload == PrefixPayload::Network ? "network" : "final") << ';'
       << "biases=" << (adapter_biases ? 1 : 0) << ';' << "layers=";
    for (std::size_t i = 0; i < layers.size(); ++i) os << (i ? "," : "") << layers[i];
    os << ';' << "seed=" << seed << ';';
    return os.str();
}

PeftHyperparams PeftHyperparams::from_text(const std::string& text) {
    PeftHyperparams hp;
    std::set<std::string> seen;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto semi = text.find(';', pos);
        if (semi == std::string::npos) semi = text.size();
        std::string item = text.substr(pos, semi - pos);
        pos = semi + 1;
        if (item.empty()) continue;
        auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("hyperparameters: expected key=value, got '" + item + "'");
        std::string key = item.substr(0, eq), v = item.substr(eq + 1);
        if (!seen.insert(key).second) throw ConfigError("hyperparameters: duplicate key " + key);
        if (key == "n_tokens") hp.n_virtual_tokens = parse_size(key, v);
        else if (key == "bottleneck") hp.bottleneck_dim = parse_size(key, v);
        else if (key == "rank") hp.rank = parse_size(key, v);
        else if (key == "kron") hp.kron_order = parse_size(key, v);
        else if (key == "tiny") hp.tiny_dim = parse_size(key, v);
        else if (key == "prefix_dim") hp.prefix_dim = parse_size(key, v);
        else if (key == "seed") hp.seed = parse_size(key, v);
        else if (key == "scale") {
            double d = 0;
            auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), d);
            if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("hyperparameter scale: bad number '" + v + "'");
            hp.lora_scale = d;
        } else if (key == "prefix_act") {
            if (v == "softmax") hp.prefix_activation = PrefixActivation::Softmax;
            else if (v == "tanh") hp.prefix_activation = PrefixActivation::Tanh;
            else throw ConfigError("hyperparameter prefix_act: '" + v + "'");
        } else if (key == "prefix_payload") {
            if (v == "network") hp.prefix_payload = PrefixPayload::Network;
            else if (v == "final") hp.prefix_payload = PrefixPayload::Final;
            else throw ConfigError("hyperparameter prefix_payload: '" + v + "'");
        } else if (key == "biases") {
            if (v != "0" && v != "1") throw ConfigError("hyperparameter biases: '" + v + "'");
            hp.adapter_biases = v == "1";
        } else if (key == "layers") {
            hp.layers.clear();
            std::size_t p = 0;
            while (p < v.size()) {
                auto c = v.find(',', p);
                if (c == std::string::npos) c = v.size();
                hp.layers.push_back(parse_size(key, v.substr(p, c - p)));
                p = c + 1;
            }
        } else {
            throw ConfigError("hyperparameters: unknown key " + key);
        }
    }
    return hp;
}

// ---- module base ---------------------------------------------------------

PeftModule::PeftModule(PeftHyperparams hp, const BaseConfig& base) : hp_(std::move(hp)), base_(base.resolved()) {
    std::sort(hp_.layers.begin(), hp_.layers.end());
    if (std::adjacent_find(hp_.layers.begin(), hp_.layers.end()) != hp_.layers.end())
        throw ConfigError("insertion layers contain duplicates");
    for (auto l : hp_.layers)
        if (l >= base_.num_layers)
            throw ConfigError("insertion layer " + std::to_string(l) + " out of range for " +
                              std::to_string(base_.num_layers) + " layers");
}

std::vector<std::size_t> PeftModule::active_layers() const {
    if (!hp_.layers.empty()) return hp_.layers;
    std::vector<std::size_t> all(base_.num_layers);
    for (std::size_t l = 0; l < all.size(); ++l) all[l] = l;
    return all;
}

void PeftModule::load_tensors(const std::vector<NamedTensor>& values) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& v : values)
        if (!by_name.emplace(v.name, &v.tensor).second) throw ContractError("duplicate tensor name " + v.name);
    auto mine = trainable_tensors();
    if (mine.size() != values.size())
        throw ContractError("tensor count mismatch: module has " + std::to_string(mine.size()) + ", got " +
                            std::to_string(values.size()));
    for (auto& t : mine) {
        auto it = by_name.find(t.name);
        if (it == by_name.end()) throw ContractError("missing tensor " + t.name);
        if (it->second->shape() != t.tensor.shape())
            throw DimensionError("tensor " + t.name + ": expected " + shape_str(t.tensor.shape()) + ", got " +
                                 shape_str(it->second->shape()));
    }
    for (auto& t : mine) {
        const auto& src = by_name.at(t.name)->data();
        std::copy(src.begin(), src.end(), t.tensor.mutable_data().begin());
    }
}

std::size_t count_parameters(std::span<const NamedTensor> tensors) {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.tensor.numel();
    return n;
}

std::unique_ptr<PeftModule> build_module(Technique technique, const PeftHyperparams& hp, const BaseConfig& base) {
    switch (technique) {
        case Technique::PromptTuning: return prompt_tuning_build(hp, base);
        case Technique::PrefixTuning: return prefix_tuning_build(hp, base);
        case Technique::LoRA: return lora_build(hp, base);
        case Technique::Adapters: return adapter_build(hp, base);
        case Technique::TinyAttention: return tiny_attention_adapter_build(hp, base);
        case Technique::Compacter: return compacter_build(hp, base);
        case Technique::IA3: return ia3_build(hp, base);
    }
    throw LookupError("unknown technique");
}

// ---- composition ---------------------------------------------------------

ComposedModel::ComposedModel(std::shared_ptr<const BaseModel> base) : base_(std::move(base)) {
    if (!base_) throw ContractError("ComposedModel: null base");
}

ComposedModel ComposedModel::full_finetune(const BaseModel& base) {
    auto copy = std::make_shared<BaseModel>(base.clone());
    copy->set_trainable(true);
    ComposedModel m(std::move(copy));
    m.full_finetune_ = true;
    return m;
}

void ComposedModel::attach(std::shared_ptr<PeftModule> module) {
    if (!module) throw ContractError("attach: null module");
    if (full_finetune_) throw CompositionError("attach: full-finetune control model takes no module");
    if (module_)
        throw CompositionError("attach: a " + technique_label(module_->technique()) +
                               " module is already attached (one module per base)");
    if (!(module->base_config() == base_->config()))
        throw CompositionError("attach: module built for [" + module->base_config().canonical() + "], base is [" +
                               base_->config().canonical() + "]");
    module_ = std::move(module);
}

std::shared_ptr<PeftModule> ComposedModel::detach() { return std::exchange(module_, nullptr); }

std::vector<NamedTensor> ComposedModel::trainable_tensors() const {
    if (full_finetune_) return base_->parameters();
    if (!module_) return {};
    return module_->trainable_tensors();
}

std::size_t ComposedModel::trainable_parameter_count() const {
    auto t = trainable_tensors();
    return count_parameters(t);
}

ForwardResult ComposedModel::forward(const TokenBatch& tokens) const { return forward(tokens, {}); }

ForwardResult ComposedModel::forward(const TokenBatch& tokens, const HookMap& extra_observers) const {
    HookMap hooks;
    if (module_) hooks = module_->hooks();
    for (const auto& [slot, observer] : extra_observers) {
        auto it = hooks.find(slot);
        if (it == hooks.end()) {
            hooks.emplace(slot, observer);
        } else {
            it->second = [inner = it->second, observer](SlotIo& io) {
                inner(io);
                observer(io);
            };
        }
    }
    ForwardResult r = forward_with_hooks(*base_, tokens, hooks);
    const auto total = r.logits.dim(1);
    if (total != tokens.seq) r.logits = slice(r.logits, 1, total - tokens.seq, total);
    return r;
}

ComposedModel attach(std::shared_ptr<const BaseModel> base, std::shared_ptr<PeftModule> module) {
    ComposedModel m(std::move(base));
    m.attach(std::move(module));
    return m;
}

}  // namespace peftref
