// SPDX-License-Identifier: Apache-2.0
#include "peftref/checks.hpp"

#include <memory>

#include "peftref/gradcheck.hpp"
#include "peftref/ops.hpp"

namespace peftref {

BaseConfig gradcheck_base_config() {
    BaseConfig c;
    c.num_layers = 1;
    c.model_dim = 8;
    c.num_heads = 2;
    c.vocab_size = 16;
    c.max_seq_len = 16;
    return c.resolved();
}

PeftHyperparams gradcheck_hyperparams() {
    PeftHyperparams hp;
    hp.n_virtual_tokens = 2;
    hp.bottleneck_dim = 2;
    hp.rank = 2;
    hp.kron_order = 2;
    hp.tiny_dim = 2;
    return hp;
}

TechniqueGradcheck technique_gradcheck(Technique technique, std::uint64_t seed, double eps) {
    const BaseConfig config = gradcheck_base_config();
    auto base = std::make_shared<const BaseModel>(BaseModel::build(config, seed + 11));
    PeftHyperparams hp = gradcheck_hyperparams();
    hp.seed = seed;
    ComposedModel model(base);
    model.attach(build_module(technique, hp, config));

    Rng rng(seed + 101);
    std::vector<Tensor> xs;
    TechniqueGradcheck out;
    out.technique = technique_label(technique);
    for (auto& t : model.trainable_tensors()) {
        for (auto& v : t.tensor.mutable_data()) v += rng.uniform(-0.5, 0.5);
        xs.push_back(t.tensor);
        out.coordinates += t.tensor.numel();
    }
    out.tensors = xs.size();

    TokenBatch batch{2, 4, {}};
    std::vector<int> targets;
    for (std::size_t i = 0; i < batch.batch * batch.seq; ++i) {
        batch.ids.push_back(static_cast<int>(rng.uniform_index(config.vocab_size)));
        targets.push_back(static_cast<int>(rng.uniform_index(config.vocab_size)));
    }
    ScalarFn loss = [&] {
        Tensor logits = model.forward(batch).logits;
        return cross_entropy(reshape(logits, {batch.batch * batch.seq, config.vocab_size}), targets);
    };
    out.max_rel_error = finite_diff_check(loss, xs, eps);
    return out;
}

}  // namespace peftref
