// SPDX-License-Identifier: Apache-2.0
#include "peftref/trainer.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "peftref/errors.hpp"
#include "peftref/ops.hpp"

namespace peftref {

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::Copy: return "copy";
        case TaskKind::TokenClassification: return "token-classification";
        case TaskKind::Parity: return "parity";
    }
    return "?";
}

TaskKind parse_task_kind(const std::string& name) {
    for (auto k : {TaskKind::Copy, TaskKind::TokenClassification, TaskKind::Parity})
        if (to_string(k) == name) return k;
    throw ConfigError("unknown task '" + name + "' (known: copy, token-classification, parity)");
}

std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

Dataset make_task(const TaskSpec& spec) {
    const std::size_t min_vocab = spec.kind == TaskKind::TokenClassification ? 4 : 2;
    if (spec.vocab_size < min_vocab)
        throw ConfigError("task " + to_string(spec.kind) + " needs vocab_size >= " + std::to_string(min_vocab));
    if (spec.seq_len < (spec.kind == TaskKind::Parity ? 2u : 1u))
        throw ConfigError("task " + to_string(spec.kind) + ": seq_len too small");
    if (spec.dataset_size == 0) throw ConfigError("dataset_size must be >= 1");

    Dataset d;
    d.spec = spec;
    Rng rng(spec.seed);
    for (std::size_t i = 0; i < spec.dataset_size; ++i) {
        Example e;
        e.input.resize(spec.seq_len);
        for (auto& tok : e.input) tok = static_cast<int>(rng.uniform_index(spec.vocab_size));
        switch (spec.kind) {
            case TaskKind::Copy:
                e.targets = e.input;
                break;
            case TaskKind::TokenClassification:
                e.targets.resize(spec.seq_len);
                for (std::size_t t = 0; t < spec.seq_len; ++t) e.targets[t] = e.input[t] % 4;
                break;
            case TaskKind::Parity: {
                e.targets.assign(spec.seq_len, -1);
                int bit = 0;
                for (std::size_t t = 0; t < spec.seq_len / 2; ++t) bit ^= e.input[t] & 1;
                e.targets.back() = bit;
                break;
            }
        }
        d.examples.push_back(std::move(e));
    }
    return d;
}

namespace {

TokenBatch to_batch(std::span<const Example> examples) {
    TokenBatch b;
    b.batch = examples.size();
    b.seq = examples.front().input.size();
    for (const auto& e : examples) {
        if (e.input.size() != b.seq) throw DimensionError("examples in a batch must share a length");
        b.ids.insert(b.ids.end(), e.input.begin(), e.input.end());
    }
    return b;
}

}  // namespace

Tensor task_loss(const ComposedModel& model, std::span<const Example> examples) {
    if (examples.empty()) throw ContractError("task_loss on an empty batch");
    const TokenBatch batch = to_batch(examples);
    Tensor logits = model.forward(batch).logits;
    const auto b = logits.dim(0), t = logits.dim(1), v = logits.dim(2);
    Tensor rows = reshape(logits, {b * t, v});

    std::vector<int> targets;
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < t; ++j)
            if (examples[i].targets[j] >= 0) {
                targets.push_back(examples[i].targets[j]);
                picked.push_back(i * t + j);
            }
    if (targets.empty()) throw ContractError("batch has no labelled positions");
    if (picked.size() != b * t) {
        std::vector<Tensor> parts;
        for (auto r : picked) parts.push_back(slice(rows, 0, r, r + 1));
        rows = concat(std::span<const Tensor>(parts), 0);
    }
    return cross_entropy(rows, targets);
}

double task_accuracy(const ComposedModel& model, const Dataset& data) {
    std::size_t correct = 0, total = 0;
    const std::span<const Example> all(data.examples);
    for (std::size_t start = 0; start < all.size(); start += 64) {
        auto chunk = all.subspan(start, std::min<std::size_t>(64, all.size() - start));
        Tensor logits = model.forward(to_batch(chunk)).logits;
        const auto t = logits.dim(1), v = logits.dim(2);
        const auto vals = logits.data();
        for (std::size_t i = 0; i < chunk.size(); ++i)
            for (std::size_t j = 0; j < t; ++j) {
                const int target = chunk[i].targets[j];
                if (target < 0) continue;
                const double* row = vals.data() + (i * t + j) * v;
                std::size_t best = 0;
                for (std::size_t k = 1; k < v; ++k)
                    if (row[k] > row[best]) best = k;
                correct += static_cast<int>(best) == target;
                ++total;
            }
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

RunRecord train(ComposedModel& model, const Dataset& data, const TrainConfig& cfg) {
    if (cfg.steps < 1) throw ConfigError("steps must be >= 1");
    if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate))
        throw ConfigError("learning_rate must be finite and >= 0");
    if (data.examples.empty()) throw ContractError("train on an empty dataset");
    if (data.spec.vocab_size > model.base().config().vocab_size)
        throw ConfigError("task vocab " + std::to_string(data.spec.vocab_size) + " exceeds model vocab " +
                          std::to_string(model.base().config().vocab_size));

    RunRecord rec;
    rec.base_hash_before = model.base().parameter_hash();
    auto params = model.trainable_tensors();
    rec.trainable_parameters = count_parameters(params);
    std::vector<std::vector<double>> m(params.size()), v(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params[i].tensor.numel(), 0.0);
        v[i].assign(params[i].tensor.numel(), 0.0);
    }

    Rng rng(cfg.seed);
    std::vector<Example> batch;
    const std::size_t bs = cfg.batch_size == 0 ? data.examples.size() : cfg.batch_size;
    double b1t = 1.0, b2t = 1.0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::span<const Example> examples(data.examples);
        if (cfg.batch_size != 0) {
            batch.clear();
            for (std::size_t i = 0; i < bs; ++i) batch.push_back(data.examples[rng.uniform_index(data.examples.size())]);
            examples = batch;
        }
        Tape tape;
        Tensor loss;
        {
            Tape::Scope scope(tape);
            loss = task_loss(model, examples);
        }
        const double value = loss.item();
        if (!std::isfinite(value)) {
            rec.aborted = true;
            rec.diagnostic = "non-finite loss at step " + std::to_string(step);
            break;
        }
        rec.losses.push_back(value);
        tape.backward(loss);

        b1t *= cfg.beta1;
        b2t *= cfg.beta2;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].tensor;
            if (!p.has_grad()) continue;
            const auto g = p.grad();
            auto w = p.mutable_data();
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[i][k] = cfg.beta1 * m[i][k] + (1.0 - cfg.beta1) * g[k];
                v[i][k] = cfg.beta2 * v[i][k] + (1.0 - cfg.beta2) * g[k] * g[k];
                const double mh = m[i][k] / (1.0 - b1t), vh = v[i][k] / (1.0 - b2t);
                w[k] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
            }
            p.zero_grad();
        }
        const std::size_t done = step + 1;
        if ((cfg.eval_every != 0 && done % cfg.eval_every == 0) || done == cfg.steps)
            rec.accuracy.emplace_back(done, task_accuracy(model, data));
    }

    rec.trainable_hash = hash_tensors(params);
    rec.base_hash_after = model.base().parameter_hash();
    return rec;
}

std::string RunSpec::label() const { return technique ? technique_id(*technique) : std::string("full-finetune"); }

namespace {

std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    if (xs.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

ComposedModel make_model(const std::shared_ptr<const BaseModel>& base, const RunSpec& spec, std::uint64_t seed) {
    if (!spec.technique) return ComposedModel::full_finetune(*base);
    PeftHyperparams hp = spec.hp;
    hp.seed = seed;
    ComposedModel model(base);
    model.attach(build_module(*spec.technique, hp, base->config()));
    return model;
}

double final_loss(const RunRecord& r) {
    return r.aborted || r.losses.empty() ? std::nan("") : r.losses.back();
}

double final_accuracy(const RunRecord& r) { return r.accuracy.empty() ? 0.0 : r.accuracy.back().second; }

}  // namespace

SweepResult convergence_sweep(std::shared_ptr<const BaseModel> base, std::span<const RunSpec> runs,
                              const Dataset& data, const TrainConfig& cfg, std::span<const std::uint64_t> seeds) {
    if (seeds.empty()) throw ContractError("convergence_sweep needs at least one seed");
    if (runs.empty()) throw ContractError("convergence_sweep needs at least one technique");
    SweepResult out;
    for (const auto& spec : runs) {
        SweepSummary s;
        s.technique = spec.label();
        std::vector<double> losses, accs, steps;
        for (auto seed : seeds) {
            ComposedModel model = make_model(base, spec, seed);
            TrainConfig c = cfg;
            c.seed = seed;
            RunRecord r = train(model, data, c);
            s.trainable_parameters = r.trainable_parameters;
            ++s.runs;
            if (!r.losses.empty()) {
                const double target = 0.5 * r.losses.front();
                for (std::size_t i = 0; i < r.losses.size(); ++i)
                    if (r.losses[i] <= target) {
                        ++s.reached_half;
                        steps.push_back(static_cast<double>(i));
                        break;
                    }
            }
            losses.push_back(final_loss(r));
            accs.push_back(final_accuracy(r));
            out.curves.push_back({s.technique, seed, std::move(r)});
        }
        std::tie(s.final_loss_mean, s.final_loss_std) = mean_std(losses);
        std::tie(s.final_accuracy_mean, s.final_accuracy_std) = mean_std(accs);
        s.steps_to_half_mean = mean_std(steps).first;
        out.summary.push_back(s);
    }
    return out;
}

std::vector<StabilityRow> stability_report(std::shared_ptr<const BaseModel> base, Technique technique,
                                           std::span<const PeftHyperparams> budgets, const Dataset& data,
                                           const TrainConfig& cfg, std::span<const std::uint64_t> seeds) {
    if (budgets.size() < 2) throw ContractError("stability_report needs at least two budgets");
    if (seeds.size() < 2) throw ContractError("stability_report needs at least two seeds");
    std::vector<StabilityRow> rows;
    for (const auto& hp : budgets) {
        StabilityRow row;
        row.budget = hp.to_text();
        std::vector<double> losses, accs;
        for (auto seed : seeds) {
            ComposedModel model = make_model(base, RunSpec{technique, hp}, seed);
            TrainConfig c = cfg;
            c.seed = seed;
            RunRecord r = train(model, data, c);
            row.trainable_parameters = r.trainable_parameters;
            losses.push_back(final_loss(r));
            accs.push_back(final_accuracy(r));
        }
        std::tie(row.final_loss_mean, row.final_loss_std) = mean_std(losses);
        std::tie(row.final_accuracy_mean, row.final_accuracy_std) = mean_std(accs);
        rows.push_back(row);
    }
    return rows;
}

namespace {

std::string header_text(const HeaderBlock& header) {
    std::string out;
    for (const auto& [k, v] : header) out += "# " + k + "=" + v + "\n";
    return out;
}

std::string quoted(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
}

}  // namespace

std::string run_csv(const RunRecord& run, const HeaderBlock& header) {
    std::ostringstream os;
    os << header_text(header);
    os << "# trainable_parameters=" << run.trainable_parameters << "\n";
    os << "# trainable_hash=" << run.trainable_hash << "\n";
    os << "# base_hash_before=" << run.base_hash_before << "\n";
    os << "# base_hash_after=" << run.base_hash_after << "\n";
    os << "# aborted=" << (run.aborted ? 1 : 0) << "\n";
    if (run.aborted) os << "# diagnostic=" << run.diagnostic << "\n";
    os << "step,loss,accuracy\n";
    std::size_t next = 0;
    for (std::size_t i = 0; i < run.losses.size(); ++i) {
        os << i << ',' << format_double(run.losses[i]) << ',';
        if (next < run.accuracy.size() && run.accuracy[next].first == i + 1)
            os << format_double(run.accuracy[next++].second);
        os << '\n';
    }
    return os.str();
}

std::string sweep_curves_csv(const SweepResult& sweep, const HeaderBlock& header) {
    std::ostringstream os;
    os << header_text(header) << "technique,seed,step,loss\n";
    for (const auto& c : sweep.curves)
        for (std::size_t i = 0; i < c.run.losses.size(); ++i)
            os << quoted(c.technique) << ',' << c.seed << ',' << i << ',' << format_double(c.run.losses[i]) << '\n';
    return os.str();
}

std::string sweep_summary_csv(const SweepResult& sweep, const HeaderBlock& header) {
    std::ostringstream os;
    os << header_text(header)
       << "technique,trainable_parameters,runs,reached_half,steps_to_half_mean,final_loss_mean,final_loss_std,"
          "final_accuracy_mean,final_accuracy_std\n";
    for (const auto& s : sweep.summary)
        os << quoted(s.technique) << ',' << s.trainable_parameters << ',' << s.runs << ',' << s.reached_half << ','
           << format_double(s.steps_to_half_mean) << ',' << format_double(s.final_loss_mean) << ','
           << format_double(s.final_loss_std) << ',' << format_double(s.final_accuracy_mean) << ','
           << format_double(s.final_accuracy_std) << '\n';
    return os.str();
}

std::string stability_csv(std::span<const StabilityRow> rows, const HeaderBlock& header) {
    std::ostringstream os;
    os << header_text(header)
       << "budget,trainable_parameters,final_loss_mean,final_loss_std,final_accuracy_mean,final_accuracy_std\n";
    for (const auto& r : rows)
        os << quoted(r.budget) << ',' << r.trainable_parameters << ',' << format_double(r.final_loss_mean) << ','
           << format_double(r.final_loss_std) << ',' << format_double(r.final_accuracy_mean) << ','
           << format_double(r.final_accuracy_std) << '\n';
    return os.str();
}

}  // namespace peftref
