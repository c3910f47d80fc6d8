// SPDX-License-Identifier: Apache-2.0
//
// Standalone acceptance run: one PASS/FAIL line per criterion, exit status 0
// only when all ten pass.
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "peftref/analyzer.hpp"
#include "peftref/checkpoint.hpp"
#include "peftref/checks.hpp"
#include "peftref/errors.hpp"
#include "peftref/ops.hpp"
#include "peftref/trainer.hpp"

#ifndef PEFTREF_CLI_PATH
#error "PEFTREF_CLI_PATH must name the peftref executable"
#endif

using namespace peftref;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and budgets.
constexpr double kParityBudgetSeconds = 5.0;
constexpr double kPrefixTolerance = 1e-10;
constexpr double kGradTolerance = 1e-4;
constexpr double kGradEps = 1e-5;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kHalfLoss = 0.5;
constexpr double kTrainBudgetSeconds = 600.0;
constexpr double kStorageMax = 0.10;
constexpr double kSmallStorageMax = 0.01;

struct Outcome {
    bool pass = true;
    std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

void fail(Outcome& o, const std::string& why) {
    if (o.pass) o.detail.clear();
    o.pass = false;
    o.detail += (o.detail.empty() ? "" : "; ") + why;
}

TokenBatch random_batch(Rng& rng, std::size_t b, std::size_t t, std::size_t vocab) {
    TokenBatch tb{b, t, {}};
    for (std::size_t i = 0; i < b * t; ++i) tb.ids.push_back(static_cast<int>(rng.uniform_index(vocab)));
    return tb;
}

void randomize(PeftModule& m, Rng& rng, double bound) {
    auto values = m.trainable_tensors();
    for (auto& v : values) v.tensor = rng.uniform_tensor(v.tensor.shape(), bound);
    m.load_tensors(values);
}

// ---------------------------------------------------------------------------

Outcome parameter_parity() {
    Outcome o;
    const auto t0 = Clock::now();
    std::size_t checked = 0;
    for (std::size_t d : {8u, 16u, 32u})
        for (std::size_t k : {1u, 2u, 4u, 8u})
            for (std::size_t n : {1u, 4u, 8u}) {
                BaseConfig c;
                c.num_layers = 2;
                c.model_dim = d;
                c.num_heads = 2;
                c.vocab_size = 16;
                c.max_seq_len = 32;
                c = c.resolved();
                PeftHyperparams hp;
                hp.bottleneck_dim = k;
                hp.rank = k;
                hp.n_virtual_tokens = n;
                hp.tiny_dim = 1;
                hp.kron_order = k == 1 ? 1 : 2;
                for (Technique t : kAllTechniques) {
                    const auto r = efficiency_report(*build_module(t, hp, c));
                    const std::string where = technique_id(t) + " d=" + std::to_string(d) + " k=" +
                                              std::to_string(k) + " n=" + std::to_string(n);
                    if (t == Technique::Compacter) {
                        if (r.parity || r.note.find("Kronecker order") == std::string::npos)
                            fail(o, "compacter not reported as pinned non-parity at " + where);
                        continue;
                    }
                    const std::size_t empirical =
                        t == Technique::PromptTuning ? r.empirical_non_layer : r.empirical_layer_count;
                    if (!r.parity || empirical != r.formula_count)
                        fail(o, where + ": formula " + std::to_string(r.formula_count) + " vs " +
                                    std::to_string(empirical));
                    ++checked;
                }
            }
    const double secs = seconds_since(t0);
    if (secs >= kParityBudgetSeconds) fail(o, "took " + fmt(secs) + " s");
    if (o.pass) o.detail = std::to_string(checked) + " exact matches, compacter pinned non-parity, " + fmt(secs) + " s";
    return o;
}

Outcome registry_fidelity() {
    Outcome o;
    const auto c = BaseConfig{}.resolved();
    for (Technique t : kAllTechniques) {
        const auto diff = validate_descriptor(*build_module(t, PeftHyperparams{}, c));
        for (const auto& f : diff) fail(o, technique_id(t) + "." + f.field + ": " + f.a + " vs " + f.b);
    }
    if (Registry::standard().size() != 7) fail(o, "registry does not hold seven rows");
    if (o.pass) o.detail = "7 modules, 0 mismatches";
    return o;
}

Outcome noop_initialization() {
    Outcome o;
    BaseConfig c;
    c.num_layers = 2;
    c.model_dim = 16;
    c.num_heads = 2;
    c.vocab_size = 32;
    c.max_seq_len = 32;
    c = c.resolved();
    auto base = std::make_shared<const BaseModel>(BaseModel::build(c, 21));
    Rng rng(22);
    for (Technique t : {Technique::LoRA, Technique::Adapters, Technique::TinyAttention, Technique::IA3}) {
        PeftHyperparams hp;
        hp.seed = 23;
        auto m = attach(base, build_module(t, hp, c));
        for (int i = 0; i < 100; ++i) {
            const auto tb = random_batch(rng, 1 + rng.uniform_index(3), 1 + rng.uniform_index(16), c.vocab_size);
            if (!bit_equal(m.forward(tb).logits, base->forward(tb).logits)) {
                fail(o, technique_id(t) + " differs on input " + std::to_string(i));
                break;
            }
        }
    }
    // prompt / prefix: real-token logits keep their shape
    for (Technique t : {Technique::PromptTuning, Technique::PrefixTuning}) {
        auto m = attach(base, build_module(t, {}, c));
        const auto tb = random_batch(rng, 2, 5, c.vocab_size);
        if (m.forward(tb).logits.shape() != Shape{2, 5, c.vocab_size}) fail(o, technique_id(t) + " output shape");
    }
    if (o.pass) o.detail = "4 techniques x 100 inputs bit-identical";
    return o;
}

// Independent single-head attention for one query row over selected keys.
struct Attn {
    std::vector<double> out;
    double log_mass = 0;  // log sum exp of the visible scores
};

Attn row_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t b, std::size_t i, std::size_t c0,
                   std::size_t dh, const std::vector<std::size_t>& keys) {
    const std::size_t Tq = q.dim(1), Tk = k.dim(1), d = q.dim(2);
    std::vector<double> s;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j : keys) {
        double dot = 0;
        for (std::size_t x = 0; x < dh; ++x) dot += q[(b * Tq + i) * d + c0 + x] * k[(b * Tk + j) * d + c0 + x];
        s.push_back(dot / std::sqrt(double(dh)));
        mx = std::max(mx, s.back());
    }
    double z = 0;
    for (double x : s) z += std::exp(x - mx);
    Attn a;
    a.out.assign(dh, 0.0);
    for (std::size_t r = 0; r < keys.size(); ++r) {
        const double p = std::exp(s[r] - mx) / z;
        for (std::size_t x = 0; x < dh; ++x) a.out[x] += p * v[(b * Tk + keys[r]) * d + c0 + x];
    }
    a.log_mass = mx + std::log(z);
    return a;
}

Outcome prefix_equivalence() {
    Outcome o;
    Rng rng(31);
    double worst = 0;
    const std::size_t dims[] = {8, 16, 24, 32};
    for (int cfg = 0; cfg < 50; ++cfg) {
        BaseConfig c;
        c.num_layers = 1 + rng.uniform_index(2);
        c.model_dim = dims[rng.uniform_index(4)];
        const std::size_t heads[] = {1, 2, 4};
        c.num_heads = heads[rng.uniform_index(3)];
        c.vocab_size = 16;
        c.max_seq_len = 32;
        c.causal = rng.uniform() < 0.7;
        c.norm = rng.uniform() < 0.5 ? NormPlacement::Post : NormPlacement::Pre;
        c = c.resolved();
        auto base = std::make_shared<const BaseModel>(BaseModel::build(c, 100 + cfg));
        PeftHyperparams hp;
        hp.n_virtual_tokens = 1 + rng.uniform_index(8);
        hp.prefix_activation = rng.uniform() < 0.5 ? PrefixActivation::Softmax : PrefixActivation::Tanh;
        hp.seed = cfg;
        auto mod = std::shared_ptr<PeftModule>(prefix_tuning_build(hp, c));
        randomize(*mod, rng, 0.2 + rng.uniform());
        auto m = attach(base, mod);
        const std::size_t B = 1 + rng.uniform_index(2), T = 1 + rng.uniform_index(10), n = hp.n_virtual_tokens;
        const auto res = m.forward(random_batch(rng, B, T, c.vocab_size));
        const std::size_t dh = c.head_dim(), d = c.model_dim;
        for (const auto& lt : res.trace.layers) {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < c.num_heads; ++h)
                    for (std::size_t i = 0; i < T; ++i) {
                        std::vector<std::size_t> pre, real;
                        for (std::size_t j = 0; j < n; ++j) pre.push_back(j);
                        for (std::size_t j = 0; j < T; ++j)
                            if (!c.causal || j <= i) real.push_back(n + j);
                        const Attn ap = row_attention(lt.queries, lt.keys, lt.values, b, i, h * dh, dh, pre);
                        const Attn ar = row_attention(lt.queries, lt.keys, lt.values, b, i, h * dh, dh, real);
                        // lambda = Zp / (Zp + Zr)
                        const double lam = 1.0 / (1.0 + std::exp(ar.log_mass - ap.log_mass));
                        for (std::size_t x = 0; x < dh; ++x) {
                            const double want = (1 - lam) * ar.out[x] + lam * ap.out[x];
                            const double got = lt.attn_context[(b * T + i) * d + h * dh + x];
                            worst = std::max(worst, std::abs(got - want));
                        }
                    }
        }
    }
    if (!(worst <= kPrefixTolerance)) fail(o, "max deviation " + fmt(worst));
    else o.detail = "50 configurations, max deviation " + fmt(worst);
    return o;
}

Outcome compacter_kronecker() {
    Outcome o;
    Rng rng(41);
    const std::size_t orders[] = {1, 2, 4};
    for (int draw = 0; draw < 50; ++draw) {
        const std::size_t N = orders[draw % 3];
        BaseConfig c;
        c.num_layers = 2;
        const std::size_t dims[] = {8, 16, 32};
        c.model_dim = dims[rng.uniform_index(3)];
        c.num_heads = 2;
        c = c.resolved();
        PeftHyperparams hp;
        hp.kron_order = N;
        hp.bottleneck_dim = N * (1 + rng.uniform_index(4));
        hp.seed = draw;
        auto m = compacter_build(hp, c);
        randomize(*m, rng, 1.0);
        for (std::size_t layer = 0; layer < 2; ++layer)
            for (auto which : {CompacterWeight::AttnDown, CompacterWeight::AttnUp, CompacterWeight::FfnDown,
                               CompacterWeight::FfnUp}) {
                const auto& A = m->shared_factors(layer);
                const auto& Bf = m->weight_factors(layer, which);
                const std::size_t br = Bf[0].dim(0), bc = Bf[0].dim(1);
                const Tensor W = m->materialize(layer, which);
                bool exact = W.shape() == Shape{N * br, N * bc};
                for (std::size_t r = 0; exact && r < N * br; ++r)
                    for (std::size_t s = 0; s < N * bc; ++s) {
                        double want = A[0].at(r / br, s / bc) * Bf[0].at(r % br, s % bc);
                        for (std::size_t i = 1; i < N; ++i) want += A[i].at(r / br, s / bc) * Bf[i].at(r % br, s % bc);
                        if (W.at(r, s) != want) {
                            exact = false;
                            break;
                        }
                    }
                if (!exact) fail(o, "draw " + std::to_string(draw) + " N=" + std::to_string(N) + " mismatch");
            }
        // shared A feeds both the down and the up projection
        const Tensor down = m->materialize(0, CompacterWeight::AttnDown).clone();
        const Tensor up = m->materialize(0, CompacterWeight::AttnUp).clone();
        Tensor a = m->shared_factors(0)[0];
        a.mutable_data()[0] += 0.5;
        if (bit_equal(down, m->materialize(0, CompacterWeight::AttnDown)) ||
            bit_equal(up, m->materialize(0, CompacterWeight::AttnUp)))
            fail(o, "draw " + std::to_string(draw) + ": shared A not shared");
    }
    if (o.pass) o.detail = "50 draws exact, shared-A mutation reaches down and up";
    return o;
}

Outcome gradient_checks() {
    Outcome o;
    const auto t0 = Clock::now();
    double worst = 0;
    for (Technique t : kAllTechniques) {
        const auto g = technique_gradcheck(t, 0, kGradEps);
        worst = std::max(worst, g.max_rel_error);
        if (!(g.max_rel_error <= kGradTolerance)) fail(o, technique_id(t) + " rel error " + fmt(g.max_rel_error));
    }
    const double secs = seconds_since(t0);
    if (secs >= kGradBudgetSeconds) fail(o, "took " + fmt(secs) + " s");
    if (o.pass) o.detail = "7 techniques, max rel error " + fmt(worst) + ", " + fmt(secs) + " s";
    return o;
}

BaseConfig reference_config() {
    BaseConfig c;
    c.num_layers = 2;
    c.model_dim = 16;
    c.num_heads = 2;
    c.vocab_size = 8;
    c.max_seq_len = 32;
    c.norm = NormPlacement::Post;
    return c.resolved();
}

Outcome frozen_base() {
    Outcome o;
    const auto c = reference_config();
    auto base = std::make_shared<const BaseModel>(BaseModel::build(c, 1));
    const auto hash = base->parameter_hash();
    const auto data = make_task({TaskKind::Copy, c.vocab_size, 8, 16, 3});
    TrainConfig cfg;
    cfg.steps = 100;
    cfg.learning_rate = 3e-2;
    for (Technique t : kAllTechniques) {
        PeftHyperparams hp;
        hp.seed = 5;
        auto m = attach(base, build_module(t, hp, c));
        const auto r = train(m, data, cfg);
        if (r.losses.size() != 100 || r.aborted) fail(o, technique_id(t) + " did not run 100 steps");
        if (r.base_hash_after != hash || base->parameter_hash() != hash) fail(o, technique_id(t) + " changed the base");
    }
    if (o.pass) o.detail = "7 techniques x 100 steps, base hash unchanged";
    return o;
}

Outcome trainability() {
    Outcome o;
    const auto t0 = Clock::now();
    const auto c = reference_config();
    auto base = std::make_shared<const BaseModel>(BaseModel::build(c, 1));
    const auto data = make_task({TaskKind::Copy, c.vocab_size, 8, 64, 3});
    std::string ratios;
    for (Technique t : kAllTechniques) {
        PeftHyperparams hp;
        hp.seed = 5;
        TrainConfig cfg;
        cfg.steps = 500;
        cfg.learning_rate = 3e-2;
        if (t == Technique::PromptTuning) {
            hp.n_virtual_tokens = 16;
            cfg.learning_rate = 0.1;
        }
        if (t == Technique::TinyAttention) {
            hp.tiny_dim = 16;
            cfg.learning_rate = 5e-2;
        }
        auto m = attach(base, build_module(t, hp, c));
        const auto r = train(m, data, cfg);
        double best = task_loss(m, data.examples).item();
        for (double l : r.losses) best = std::min(best, l);
        const double ratio = best / r.losses.front();
        ratios += (ratios.empty() ? "" : " ") + technique_id(t) + "=" + fmt(ratio);
        if (r.aborted || !(ratio <= kHalfLoss)) fail(o, technique_id(t) + " reached only " + fmt(ratio));
    }
    const double secs = seconds_since(t0);
    if (secs >= kTrainBudgetSeconds) fail(o, "took " + fmt(secs) + " s");
    if (o.pass) o.detail = "loss ratios " + ratios + ", " + fmt(secs) + " s";
    return o;
}

struct ScratchDir {
    fs::path path;
    explicit ScratchDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("peftref_accept_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

Outcome storage_efficiency() {
    Outcome o;
    BaseConfig c;
    c.num_layers = 4;
    c.model_dim = 64;
    c.num_heads = 4;
    c.ffn_dim = 256;
    c.vocab_size = 256;
    c.max_seq_len = 64;
    c = c.resolved();
    ScratchDir dir("storage");
    auto base = std::make_shared<const BaseModel>(BaseModel::build(c, 51));
    const double base_bytes = double(save_base(*base, dir.path / "base.pfr"));
    if (load_base(dir.path / "base.pfr").parameter_hash() != base->parameter_hash()) fail(o, "base round trip");

    Rng rng(52);
    const auto tb = random_batch(rng, 2, 6, c.vocab_size);
    std::string ratios;
    for (Technique t : kAllTechniques) {
        PeftHyperparams hp;
        hp.seed = 53;
        std::shared_ptr<PeftModule> mod = build_module(t, hp, c);
        randomize(*mod, rng, 0.1);
        if (t == Technique::PrefixTuning) {
            auto* prefix = static_cast<PrefixTuning*>(mod.get());
            std::shared_ptr<PeftModule> exported = prefix->export_final();
            const auto full = save_peft(*mod, dir.path / "prefix_full.pfr");
            const auto small = save_peft(*exported, dir.path / "prefix_final.pfr");
            if (!(small < full)) fail(o, "exported prefix not smaller than its network");
            mod = exported;
        }
        const fs::path path = dir.path / (technique_id(t) + ".pfr");
        const double ratio = double(save_peft(*mod, path)) / base_bytes;
        ratios += (ratios.empty() ? "" : " ") + technique_id(t) + "=" + fmt(ratio);
        const double limit =
            (t == Technique::IA3 || t == Technique::PromptTuning) ? kSmallStorageMax : kStorageMax;
        if (!(ratio < limit)) fail(o, technique_id(t) + " ratio " + fmt(ratio));

        const auto back = load_peft(path, c);
        const auto a = mod->trainable_tensors(), b = back->trainable_tensors();
        bool same = a.size() == b.size();
        for (std::size_t i = 0; same && i < a.size(); ++i)
            same = a[i].name == b[i].name && bit_equal(a[i].tensor, b[i].tensor);
        if (!same) fail(o, technique_id(t) + " tensors not bit-exact after load");
        const auto reloaded = load_and_attach(base, path);
        if (!bit_equal(reloaded.forward(tb).logits, attach(base, mod).forward(tb).logits))
            fail(o, technique_id(t) + " behavior differs after load_and_attach");
    }
    if (o.pass) o.detail = "ratios " + ratios + "; round trips exact";
    return o;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome cli_determinism() {
    Outcome o;
    ScratchDir dir("cli");
    const std::string cli = PEFTREF_CLI_PATH;
    const std::string d = dir.path.string();
    const std::string small = " --layers 2 --dim 16 --heads 2 --vocab 8 --seed 3";
    struct Cmd {
        std::string args;
        std::vector<std::string> files;  // outputs besides stdout
    };
    const std::vector<Cmd> cmds{
        {"init-base" + small + " --out " + d + "/base.pfr", {"base.pfr"}},
        {"analyze --technique all --format csv", {}},
        {"analyze --technique all --format text --out " + d + "/report.txt", {"report.txt"}},
        {"train --base " + d + "/base.pfr --technique lora --steps 12 --lr 0.03 --dataset-size 16 --eval-every 4"
         " --out " + d + "/run.csv --save " + d + "/lora.pfr",
         {"run.csv", "lora.pfr"}},
        {"train --base " + d + "/base.pfr --technique full --steps 3 --dataset-size 8", {}},
        {"sweep --base " + d + "/base.pfr --technique lora,ia3 --seeds 1,2 --steps 5 --dataset-size 8"
         " --out " + d + "/summary.csv --curves " + d + "/curves.csv",
         {"summary.csv", "curves.csv"}},
        {"sweep --base " + d + "/base.pfr --technique lora --budgets 1,2 --seeds 1,2 --steps 4 --dataset-size 8",
         {}},
        {"gradcheck --technique all", {}},
        {"export" + small + " --technique prefix --prefix-final --seeds 4 --out " + d + "/prefix.pfr",
         {"prefix.pfr"}},
        {"validate-typology", {}},
    };
    std::size_t compared = 0;
    for (const auto& cmd : cmds) {
        std::vector<std::string> outputs[2];
        for (int rep = 0; rep < 2; ++rep) {
            const std::string out = d + "/stdout.txt";
            const int rc = std::system((cli + " " + cmd.args + " > " + out + " 2>/dev/null").c_str());
            if (rc != 0) {
                fail(o, "'" + cmd.args.substr(0, cmd.args.find(' ')) + "' exited with " + std::to_string(rc));
                break;
            }
            outputs[rep].push_back(slurp(out));
            for (const auto& f : cmd.files) {
                outputs[rep].push_back(slurp(dir.path / f));
                // keep base.pfr: later commands read it
                if (f != "base.pfr") fs::remove(dir.path / f);
            }
        }
        if (outputs[0] != outputs[1]) fail(o, "'" + cmd.args.substr(0, 40) + "' output differs between runs");
        if (!outputs[0].empty() && outputs[0].front().empty() && cmd.files.empty())
            fail(o, "'" + cmd.args.substr(0, 40) + "' printed nothing");
        compared += outputs[0].size();
    }
    if (o.pass) o.detail = std::to_string(cmds.size()) + " commands, " + std::to_string(compared) +
                           " outputs byte-identical on rerun";
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"parameter-count parity", parameter_parity},
        {"registry fidelity", registry_fidelity},
        {"no-op initialization", noop_initialization},
        {"prefix gated-addition equivalence", prefix_equivalence},
        {"compacter Kronecker sum", compacter_kronecker},
        {"gradient checks", gradient_checks},
        {"frozen base", frozen_base},
        {"trainability", trainability},
        {"storage efficiency", storage_efficiency},
        {"CLI determinism", cli_determinism},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        failed += !o.pass;
        std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", int(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
