// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "peftref/peft.hpp"

namespace peftref {

enum class TaskKind { Copy, TokenClassification, Parity };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);  // throws ConfigError

struct TaskSpec {
    TaskKind kind = TaskKind::Copy;
    std::size_t vocab_size = 32;
    std::size_t seq_len = 8;
    std::size_t dataset_size = 64;
    std::uint64_t seed = 0;
};

// targets has one entry per position; -1 marks positions outside the loss.
struct Example {
    std::vector<int> input;
    std::vector<int> targets;
};

struct Dataset {
    TaskSpec spec;
    std::vector<Example> examples;
};

// copy:                 targets = input
// token-classification: targets[t] = input[t] mod 4
// parity:               last position labelled with the XOR of token
//                       oddness over the first half of the sequence
Dataset make_task(const TaskSpec& spec);

struct TrainConfig {
    std::size_t steps = 100;
    std::size_t batch_size = 0;  // 0: every step uses the whole dataset
    double learning_rate = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;      // minibatch sampling
    std::size_t eval_every = 0;  // 0: evaluate after the last step only
};

struct RunRecord {
    std::vector<double> losses;                           // one per step, before that step's update
    std::vector<std::pair<std::size_t, double>> accuracy; // (steps completed, accuracy)
    std::uint64_t trainable_hash = 0;
    std::uint64_t base_hash_before = 0;
    std::uint64_t base_hash_after = 0;
    std::size_t trainable_parameters = 0;
    bool aborted = false;
    std::string diagnostic;
};

// Mean cross-entropy over labelled positions.
Tensor task_loss(const ComposedModel& model, std::span<const Example> examples);
double task_accuracy(const ComposedModel& model, const Dataset& data);

// Adam over model.trainable_tensors() only. A non-finite loss stops the run
// and is reported through `aborted` and `diagnostic`.
RunRecord train(ComposedModel& model, const Dataset& data, const TrainConfig& cfg);

// Technique to run; an empty technique is the unfrozen full-finetune control.
struct RunSpec {
    std::optional<Technique> technique;
    PeftHyperparams hp;
    std::string label() const;
};

struct Curve {
    std::string technique;
    std::uint64_t seed = 0;
    RunRecord run;
};

struct SweepSummary {
    std::string technique;
    std::size_t trainable_parameters = 0;
    std::size_t runs = 0;
    std::size_t reached_half = 0;        // runs whose loss fell to <= 0.5 x initial
    double steps_to_half_mean = 0.0;     // over runs that reached it
    double final_loss_mean = 0.0;
    double final_loss_std = 0.0;         // sample standard deviation
    double final_accuracy_mean = 0.0;
    double final_accuracy_std = 0.0;
};

struct SweepResult {
    std::vector<Curve> curves;
    std::vector<SweepSummary> summary;
};

// Each (run spec, seed) trains a fresh module (module seed = seed) on a
// shared read-only base; cfg.seed is replaced by the run seed.
SweepResult convergence_sweep(std::shared_ptr<const BaseModel> base, std::span<const RunSpec> runs,
                              const Dataset& data, const TrainConfig& cfg, std::span<const std::uint64_t> seeds);

struct StabilityRow {
    std::string budget;  // hyperparameter text
    std::size_t trainable_parameters = 0;
    double final_loss_mean = 0.0;
    double final_loss_std = 0.0;
    double final_accuracy_mean = 0.0;
    double final_accuracy_std = 0.0;
};

// Needs >= 2 budgets and >= 2 seeds (ContractError otherwise).
std::vector<StabilityRow> stability_report(std::shared_ptr<const BaseModel> base, Technique technique,
                                           std::span<const PeftHyperparams> budgets, const Dataset& data,
                                           const TrainConfig& cfg, std::span<const std::uint64_t> seeds);

using HeaderBlock = std::vector<std::pair<std::string, std::string>>;

// "# key=value" header lines followed by CSV rows.
std::string run_csv(const RunRecord& run, const HeaderBlock& header);
std::string sweep_curves_csv(const SweepResult& sweep, const HeaderBlock& header);
std::string sweep_summary_csv(const SweepResult& sweep, const HeaderBlock& header);
std::string stability_csv(std::span<const StabilityRow> rows, const HeaderBlock& header);

// Shortest decimal that round-trips.
std::string format_double(double v);

}  // namespace peftref
