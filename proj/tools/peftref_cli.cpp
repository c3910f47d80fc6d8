// SPDX-License-Identifier: Apache-2.0
//
// peftref — command-line front end.
//
//   init-base          build a frozen base model and write its checkpoint
//   analyze            parameter-efficiency comparison report
//   train              train one module (or the full-finetune control)
//   sweep              convergence sweep over techniques x seeds, or a
//                      stability table over budgets with --budgets
//   gradcheck          finite-difference check of every technique
//   export             write a PEFT checkpoint (prefix: --prefix-final)
//   validate-typology  compare module self-descriptions with the registry
//
// Exit codes: 0 ok, 1 usage, 2 config/composition/compatibility,
// 3 numerical, 4 I/O.

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "peftref/analyzer.hpp"
#include "peftref/checkpoint.hpp"
#include "peftref/checks.hpp"
#include "peftref/errors.hpp"
#include "peftref/trainer.hpp"

using namespace peftref;

namespace {

constexpr const char* kVersion = "peftref 0.1.0";

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BaseFlags {
    std::size_t layers = 2, dim = 16, heads = 2, ffn = 0, vocab = 32, max_seq = 32;
    std::uint64_t seed = 0;
    std::string norm = "post";
    bool bidirectional = false;
    std::string path;  // --base checkpoint instead of building
};

struct TechFlags {
    std::vector<std::string> techniques;
    std::size_t n_tokens = 8, bottleneck = 4, rank = 2, kron = 2, tiny = 1;
    double scale = 1.0;
    std::string prefix_act = "softmax";
    bool biases = false;
    std::vector<std::size_t> layers;
};

struct RunFlags {
    std::string task = "copy";
    std::size_t seq_len = 8, dataset = 64;
    std::uint64_t data_seed = 0;
    std::size_t steps = 100, batch = 0, eval_every = 0;
    double lr = 1e-2;
    std::vector<std::uint64_t> seeds{0};
};

void add_base_flags(CLI::App* app, BaseFlags& f, bool allow_path) {
    app->add_option("--layers", f.layers, "transformer layers")->capture_default_str();
    app->add_option("--dim", f.dim, "model dimension d_m")->capture_default_str();
    app->add_option("--heads", f.heads, "attention heads")->capture_default_str();
    app->add_option("--ffn", f.ffn, "FFN width (0: 4*dim)")->capture_default_str();
    app->add_option("--vocab", f.vocab, "vocabulary size")->capture_default_str();
    app->add_option("--max-seq", f.max_seq, "maximum sequence length")->capture_default_str();
    app->add_option("--seed", f.seed, "base initialization seed")->capture_default_str();
    app->add_option("--norm", f.norm, "layer-norm placement")->check(CLI::IsMember({"post", "pre"}))->capture_default_str();
    app->add_flag("--bidirectional", f.bidirectional, "disable the causal mask");
    if (allow_path) app->add_option("--base", f.path, "base checkpoint (overrides the base-config flags)");
}

void add_tech_flags(CLI::App* app, TechFlags& f, bool many) {
    auto* opt = app->add_option("--technique", f.techniques,
                                many ? "techniques (repeat or comma-separate; 'all' for the seven)" : "technique");
    opt->delimiter(',');
    app->add_option("--n-tokens", f.n_tokens, "virtual tokens n (prompt, prefix)")->capture_default_str();
    app->add_option("--bottleneck", f.bottleneck, "bottleneck d_h (adapters, compacter)")->capture_default_str();
    app->add_option("--rank", f.rank, "LoRA rank r")->capture_default_str();
    app->add_option("--kron-order", f.kron, "compacter Kronecker order N")->capture_default_str();
    app->add_option("--tiny-dim", f.tiny, "tiny-attention dimension d_t")->capture_default_str();
    app->add_option("--scale", f.scale, "LoRA scale lambda")->capture_default_str();
    app->add_option("--prefix-activation", f.prefix_act, "prefix network activation")
        ->check(CLI::IsMember({"softmax", "tanh"}))
        ->capture_default_str();
    app->add_flag("--adapter-biases", f.biases, "add bias terms to adapter stacks");
    app->add_option("--insert-layers", f.layers, "insertion layers (default: all)")->delimiter(',');
}

void add_run_flags(CLI::App* app, RunFlags& f) {
    app->add_option("--task", f.task, "copy | token-classification | parity")->capture_default_str();
    app->add_option("--seq-len", f.seq_len, "task sequence length")->capture_default_str();
    app->add_option("--dataset-size", f.dataset, "task examples")->capture_default_str();
    app->add_option("--data-seed", f.data_seed, "task generation seed")->capture_default_str();
    app->add_option("--steps", f.steps, "optimizer steps")->capture_default_str();
    app->add_option("--batch", f.batch, "batch size (0: full dataset)")->capture_default_str();
    app->add_option("--lr", f.lr, "learning rate")->capture_default_str();
    app->add_option("--eval-every", f.eval_every, "accuracy interval (0: end only)")->capture_default_str();
    app->add_option("--seeds", f.seeds, "run seeds (comma-separated)")->delimiter(',')->capture_default_str();
}

BaseConfig config_from_flags(const BaseFlags& f) {
    BaseConfig c;
    c.num_layers = f.layers;
    c.model_dim = f.dim;
    c.num_heads = f.heads;
    c.ffn_dim = f.ffn;
    c.vocab_size = f.vocab;
    c.max_seq_len = f.max_seq;
    c.causal = !f.bidirectional;
    c.norm = f.norm == "pre" ? NormPlacement::Pre : NormPlacement::Post;
    try {
        return c.resolved();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
}

std::shared_ptr<const BaseModel> base_from_flags(const BaseFlags& f) {
    if (!f.path.empty()) return std::make_shared<const BaseModel>(load_base(f.path));
    return std::make_shared<const BaseModel>(BaseModel::build(config_from_flags(f), f.seed));
}

PeftHyperparams hp_from_flags(const TechFlags& f, std::uint64_t seed) {
    PeftHyperparams hp;
    hp.n_virtual_tokens = f.n_tokens;
    hp.bottleneck_dim = f.bottleneck;
    hp.rank = f.rank;
    hp.kron_order = f.kron;
    hp.tiny_dim = f.tiny;
    hp.lora_scale = f.scale;
    hp.prefix_activation = f.prefix_act == "tanh" ? PrefixActivation::Tanh : PrefixActivation::Softmax;
    hp.adapter_biases = f.biases;
    hp.layers = f.layers;
    hp.seed = seed;
    return hp;
}

// "full" selects the unfrozen control where allowed.
std::vector<RunSpec> run_specs(const TechFlags& f, std::uint64_t seed, bool allow_full) {
    std::vector<RunSpec> out;
    std::vector<std::string> names = f.techniques;
    if (names.empty() || (names.size() == 1 && names[0] == "all")) {
        names.clear();
        for (auto t : kAllTechniques) names.push_back(technique_id(t));
    }
    for (const auto& n : names) {
        if (n == "full" || n == "full-finetune") {
            if (!allow_full) throw UsageError("the full-finetune control is not valid for this command");
            out.push_back({std::nullopt, hp_from_flags(f, seed)});
            continue;
        }
        try {
            out.push_back({parse_technique(n), hp_from_flags(f, seed)});
        } catch (const LookupError& e) {
            throw UsageError(e.what());
        }
    }
    return out;
}

std::vector<Technique> techniques_only(const std::vector<RunSpec>& specs) {
    std::vector<Technique> out;
    for (const auto& s : specs) out.push_back(*s.technique);
    return out;
}

std::string hex64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "0x%016" PRIx64, v);
    return buf;
}

void emit(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << text;
    if (!out.flush()) throw IoError("write failed: " + path);
}

std::string join(const std::vector<std::uint64_t>& xs) {
    std::string s;
    for (auto x : xs) s += (s.empty() ? "" : ",") + std::to_string(x);
    return s;
}

HeaderBlock common_header(const std::string& command, const BaseModel& base, const BaseFlags& bf) {
    return {{"tool", kVersion},
            {"command", command},
            {"base", base.config().canonical()},
            {"base_source", bf.path.empty() ? "seed=" + std::to_string(bf.seed) : bf.path},
            {"base_fingerprint", hex64(config_fingerprint(base.config()))}};
}

void add_run_header(HeaderBlock& h, const RunFlags& rf) {
    h.emplace_back("task", "kind=" + rf.task + ";seq_len=" + std::to_string(rf.seq_len) +
                               ";dataset_size=" + std::to_string(rf.dataset) + ";seed=" + std::to_string(rf.data_seed) + ";");
    h.emplace_back("train", "steps=" + std::to_string(rf.steps) + ";batch=" + std::to_string(rf.batch) +
                                ";lr=" + format_double(rf.lr) + ";betas=0.9,0.999;eps=1e-08;eval_every=" +
                                std::to_string(rf.eval_every) + ";");
    h.emplace_back("seeds", join(rf.seeds));
}

Dataset dataset_from_flags(const RunFlags& rf, const BaseModel& base) {
    TaskSpec ts;
    try {
        ts.kind = parse_task_kind(rf.task);
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    ts.vocab_size = base.config().vocab_size;
    ts.seq_len = rf.seq_len;
    ts.dataset_size = rf.dataset;
    ts.seed = rf.data_seed;
    return make_task(ts);
}

TrainConfig train_config(const RunFlags& rf, std::uint64_t seed) {
    TrainConfig c;
    c.steps = rf.steps;
    c.batch_size = rf.batch;
    c.learning_rate = rf.lr;
    c.eval_every = rf.eval_every;
    c.seed = seed;
    return c;
}

// ---- commands --------------------------------------------------------------

int cmd_init_base(const BaseFlags& bf, const std::string& out) {
    const BaseConfig c = config_from_flags(bf);
    const BaseModel base = BaseModel::build(c, bf.seed);
    const auto bytes = save_base(base, out);
    std::cout << "parameters=" << base.parameter_count() << "\n"
              << "fingerprint=" << hex64(config_fingerprint(c)) << "\n"
              << "config=" << c.canonical() << "\n"
              << "bytes=" << bytes << "\n";
    return 0;
}

int cmd_analyze(const BaseFlags& bf, const TechFlags& tf, const std::string& format, const std::string& out) {
    const BaseConfig c = config_from_flags(bf);
    const auto specs = run_specs(tf, 0, false);
    const auto techniques = techniques_only(specs);
    const PeftHyperparams hp = hp_from_flags(tf, 0);
    const auto rows = comparison_report(techniques, hp, c);
    std::string text;
    if (format == "csv") {
        text += "# tool=" + std::string(kVersion) + "\n# command=analyze\n# base=" + c.canonical() +
                "\n# hyperparams=" + hp.to_text() + "\n";
        text += report_csv(rows);
    } else {
        text += "base: " + c.canonical() + "\nhyperparams: " + hp.to_text() + "\n\n" + report_text(rows);
    }
    emit(out, text);
    return 0;
}

int cmd_train(const BaseFlags& bf, const TechFlags& tf, const RunFlags& rf, const std::string& out,
              const std::string& save) {
    if (tf.techniques.size() != 1) throw UsageError("train takes exactly one --technique");
    const std::uint64_t seed = rf.seeds.front();
    auto base = base_from_flags(bf);
    const RunSpec spec = run_specs(tf, seed, true).front();
    const Dataset data = dataset_from_flags(rf, *base);

    ComposedModel model = spec.technique ? ComposedModel(base) : ComposedModel::full_finetune(*base);
    if (spec.technique) model.attach(build_module(*spec.technique, spec.hp, base->config()));
    const RunRecord rec = train(model, data, train_config(rf, seed));

    HeaderBlock h = common_header("train", *base, bf);
    h.emplace_back("technique", spec.label());
    h.emplace_back("hyperparams", spec.hp.to_text());
    add_run_header(h, rf);
    if (!out.empty()) emit(out, run_csv(rec, h));
    if (!save.empty()) {
        if (!model.module()) throw UsageError("--save needs a PEFT technique, not the full-finetune control");
        save_peft(*model.module(), save);
    }

    const auto [lo, hi] = std::minmax_element(rec.losses.begin(), rec.losses.end());
    std::cout << "technique=" << spec.label() << "\n"
              << "trainable_parameters=" << rec.trainable_parameters << "\n"
              << "steps=" << rec.losses.size() << "\n";
    if (!rec.losses.empty()) {
        std::cout << "initial_loss=" << format_double(rec.losses.front()) << "\n"
                  << "final_loss=" << format_double(rec.losses.back()) << "\n"
                  << "loss_range=" << format_double(*hi - *lo) << "\n";
    }
    if (!rec.accuracy.empty()) std::cout << "final_accuracy=" << format_double(rec.accuracy.back().second) << "\n";
    std::cout << "base_unchanged=" << (rec.base_hash_before == rec.base_hash_after ? "yes" : "no") << "\n";
    if (rec.aborted) {
        std::cerr << "error: " << rec.diagnostic << "\n";
        return 3;
    }
    return 0;
}

// Primary budget knob of each technique, for stability tables.
PeftHyperparams with_budget(PeftHyperparams hp, Technique t, std::size_t value) {
    switch (t) {
        case Technique::PromptTuning:
        case Technique::PrefixTuning: hp.n_virtual_tokens = value; break;
        case Technique::LoRA: hp.rank = value; break;
        case Technique::Adapters:
        case Technique::Compacter: hp.bottleneck_dim = value; break;
        case Technique::TinyAttention: hp.tiny_dim = value; break;
        case Technique::IA3: throw UsageError("(IA)3 has no budget hyperparameter");
    }
    return hp;
}

int cmd_sweep(const BaseFlags& bf, const TechFlags& tf, const RunFlags& rf, const std::vector<std::size_t>& budgets,
              const std::string& out, const std::string& curves_out) {
    auto base = base_from_flags(bf);
    const Dataset data = dataset_from_flags(rf, *base);
    const TrainConfig cfg = train_config(rf, 0);
    HeaderBlock h = common_header("sweep", *base, bf);

    if (!budgets.empty()) {
        const auto specs = run_specs(tf, 0, false);
        if (specs.size() != 1) throw UsageError("--budgets takes exactly one --technique");
        const Technique t = *specs.front().technique;
        std::vector<PeftHyperparams> hps;
        for (auto b : budgets) hps.push_back(with_budget(specs.front().hp, t, b));
        if (hps.size() < 2 || rf.seeds.size() < 2) throw UsageError("stability needs >= 2 budgets and >= 2 seeds");
        const auto rows = stability_report(base, t, hps, data, cfg, rf.seeds);
        h.emplace_back("technique", technique_id(t));
        add_run_header(h, rf);
        emit(out, stability_csv(rows, h));
        return 0;
    }

    const auto specs = run_specs(tf, 0, true);
    const SweepResult res = convergence_sweep(base, specs, data, cfg, rf.seeds);
    std::string names;
    for (const auto& s : specs) names += (names.empty() ? "" : ",") + s.label();
    h.emplace_back("techniques", names);
    h.emplace_back("hyperparams", specs.front().hp.to_text());
    add_run_header(h, rf);
    emit(out, sweep_summary_csv(res, h));
    if (!curves_out.empty()) emit(curves_out, sweep_curves_csv(res, h));
    for (const auto& c : res.curves)
        if (c.run.aborted) {
            std::cerr << "error: " << c.technique << " seed " << c.seed << ": " << c.run.diagnostic << "\n";
            return 3;
        }
    return 0;
}

int cmd_gradcheck(const TechFlags& tf, double eps, double tol, std::uint64_t seed) {
    const auto specs = run_specs(tf, 0, false);
    bool ok = true;
    for (auto t : techniques_only(specs)) {
        const auto r = technique_gradcheck(t, seed, eps);
        const bool pass = r.max_rel_error <= tol;
        ok = ok && pass;
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.3e", r.max_rel_error);
        std::cout << (pass ? "OK   " : "FAIL ") << r.technique << " tensors=" << r.tensors
                  << " coordinates=" << r.coordinates << " max_rel_error=" << buf << "\n";
    }
    return ok ? 0 : 3;
}

int cmd_export(const BaseFlags& bf, const TechFlags& tf, const RunFlags& rf, const std::string& in,
               bool prefix_final, const std::string& out) {
    auto base = base_from_flags(bf);
    std::unique_ptr<PeftModule> module;
    if (!in.empty()) {
        if (!tf.techniques.empty()) throw UsageError("--in and --technique are mutually exclusive");
        module = load_peft(in, base->config());
    } else {
        if (tf.techniques.size() != 1) throw UsageError("export needs --in or exactly one --technique");
        const RunSpec spec = run_specs(tf, rf.seeds.front(), false).front();
        module = build_module(*spec.technique, spec.hp, base->config());
    }
    if (prefix_final) {
        auto* prefix = dynamic_cast<PrefixTuning*>(module.get());
        if (!prefix) throw UsageError("--prefix-final applies to prefix tuning only");
        module = prefix->export_final();
    }
    const auto bytes = save_peft(*module, out);
    const auto base_bytes = checkpoint_size(base_checkpoint(*base));
    std::cout << "technique=" << technique_id(module->technique()) << "\n"
              << "bytes=" << bytes << "\n"
              << "base_bytes=" << base_bytes << "\n"
              << "storage_ratio=" << format_double(static_cast<double>(bytes) / static_cast<double>(base_bytes))
              << "\n";
    return 0;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int cmd_validate_typology(const BaseFlags& bf, const std::string& registry_path, bool dump) {
    if (dump) {
        std::cout << Registry::standard().serialize();
        return 0;
    }
    const Registry registry = registry_path.empty() ? Registry::standard() : Registry::parse(read_file(registry_path));
    const BaseConfig c = config_from_flags(bf);
    bool ok = true;
    for (auto t : kAllTechniques) {
        PeftHyperparams hp;
        const auto module = build_module(t, hp, c);
        const auto diffs = validate_descriptor(*module, registry);
        if (diffs.empty()) {
            std::cout << "OK " << technique_label(t) << "\n";
            continue;
        }
        ok = false;
        for (const auto& d : diffs)
            std::cout << "MISMATCH " << technique_label(t) << " " << d.field << ": module=" << d.a
                      << " registry=" << d.b << "\n";
    }
    return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"peftref: parameter-efficient finetuning reference toolkit"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    BaseFlags bf;
    TechFlags tf;
    RunFlags rf;
    std::string out, curves_out, save, in, format = "csv", registry_path;
    std::vector<std::size_t> budgets;
    bool prefix_final = false, dump = false;
    double eps = 1e-5, tol = 1e-4;
    std::uint64_t check_seed = 0;

    auto* init = app.add_subcommand("init-base", "build a base model and write its checkpoint");
    add_base_flags(init, bf, false);
    init->add_option("--out", out, "checkpoint path")->required();

    auto* analyze = app.add_subcommand("analyze", "parameter-efficiency report");
    add_base_flags(analyze, bf, false);
    add_tech_flags(analyze, tf, true);
    analyze->add_option("--format", format, "csv | text")->check(CLI::IsMember({"csv", "text"}))->capture_default_str();
    analyze->add_option("--out", out, "output file (default stdout)");

    auto* trn = app.add_subcommand("train", "train one technique ('full' for the unfrozen control)");
    add_base_flags(trn, bf, true);
    add_tech_flags(trn, tf, false);
    add_run_flags(trn, rf);
    trn->add_option("--out", out, "loss-curve CSV");
    trn->add_option("--save", save, "write the trained module checkpoint");

    auto* sweep = app.add_subcommand("sweep", "convergence sweep or stability table");
    add_base_flags(sweep, bf, true);
    add_tech_flags(sweep, tf, true);
    add_run_flags(sweep, rf);
    sweep->add_option("--budgets", budgets, "budget values for a stability table")->delimiter(',');
    sweep->add_option("--out", out, "summary (or stability) CSV, default stdout");
    sweep->add_option("--curves", curves_out, "per-step curves CSV");

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    add_tech_flags(grad, tf, true);
    grad->add_option("--eps", eps, "central-difference step")->capture_default_str();
    grad->add_option("--tol", tol, "maximum relative error")->capture_default_str();
    grad->add_option("--check-seed", check_seed, "seed for the mini setup")->capture_default_str();

    auto* exp = app.add_subcommand("export", "write a PEFT checkpoint");
    add_base_flags(exp, bf, true);
    add_tech_flags(exp, tf, false);
    exp->add_option("--seeds", rf.seeds, "module seed")->delimiter(',');
    exp->add_option("--in", in, "existing PEFT checkpoint to re-export");
    exp->add_flag("--prefix-final", prefix_final, "store evaluated prefixes instead of the network");
    exp->add_option("--out", out, "checkpoint path")->required();

    auto* typ = app.add_subcommand("validate-typology", "check module descriptors against the registry");
    add_base_flags(typ, bf, false);
    typ->add_option("--registry", registry_path, "registry text file (default: built-in table)");
    typ->add_flag("--dump", dump, "print the built-in registry and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (init->parsed()) return cmd_init_base(bf, out);
        if (analyze->parsed()) return cmd_analyze(bf, tf, format, out);
        if (trn->parsed()) return cmd_train(bf, tf, rf, out, save);
        if (sweep->parsed()) return cmd_sweep(bf, tf, rf, budgets, out, curves_out);
        if (grad->parsed()) return cmd_gradcheck(tf, eps, tol, check_seed);
        if (exp->parsed()) return cmd_export(bf, tf, rf, in, prefix_final, out);
        if (typ->parsed()) return cmd_validate_typology(bf, registry_path, dump);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const LookupError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
