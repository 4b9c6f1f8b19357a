// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Tolerances are pinned in code next to each check.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "mixlora/checkpoint.hpp"
#include "mixlora/harness.hpp"

using namespace mixlora;

namespace {

int g_failures = 0;

void report(int number, const char* name, bool pass, const std::string& detail) {
    std::printf("%s  criterion %2d  %-28s %s\n", pass ? "PASS" : "FAIL", number, name,
                detail.c_str());
    if (!pass) ++g_failures;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (double& x : m.data) x = rng.gaussian();
    return m;
}

// ---- 1. zero-init identity -------------------------------------------------

void criterion_zero_init() {
    Rng rng(1001);
    bool pass = true;
    for (int trial = 0; trial < 100 && pass; ++trial) {
        MixLoraConfig cfg;
        cfg.d_in = 1 + rng.below(12);
        cfg.d_out = 1 + rng.below(12);
        cfg.num_factors = 2 + rng.below(7);
        cfg.rank = 1 + rng.below(cfg.num_factors);
        cfg.cfs_enabled = rng.below(2) == 0;
        cfg.gating_mode = rng.below(2) == 0 ? GatingMode::soft : GatingMode::hard;
        std::size_t mode = rng.below(3);
        cfg.routing_mode = static_cast<RoutingMode>(mode);
        if (cfg.routing_mode == RoutingMode::task) cfg.num_tasks = 2 + rng.below(3);

        Rng init(rng.below(1u << 30));
        AdaptedLinear layer = AdaptedLinear::init(cfg, init);
        Matrix h = random_matrix(1 + rng.below(5), cfg.d_in, rng);
        Matrix base = matmul(h, transpose(layer.base_w));

        Matrix out;
        if (cfg.routing_mode == RoutingMode::random) {
            Rng route(trial);
            out = layer.forward(h, std::nullopt, &route).output;
        } else if (cfg.routing_mode == RoutingMode::task) {
            out = layer.forward(h, rng.below(cfg.num_tasks)).output;
        } else {
            out = layer.forward(h).output;
        }
        pass = out == base;  // exact: absolute diff 0.0
    }
    report(1, "zero-init identity", pass, "100 random configs, exact match");
}

// ---- 2. gradient correctness ----------------------------------------------

void criterion_gradcheck() {
    const double kEps = 1e-5;
    const double kTol = 1e-6;
    const double kRoundoffFloor = 1e-9;  // below central-difference noise

    double worst = 0.0;
    int checked = 0, skipped = 0;
    for (int inst = 0; inst < 24; ++inst) {
        MixLoraConfig cfg;
        cfg.d_in = 3;
        cfg.d_out = 2;
        cfg.num_factors = 4;
        cfg.rank = 2;
        cfg.cfs_enabled = inst % 2 == 0;
        if (inst % 4 >= 2) {
            cfg.routing_mode = RoutingMode::task;
            cfg.num_tasks = 3;
        }
        Rng rng(2000 + inst);
        AdaptedLinear layer = AdaptedLinear::init(cfg, rng);
        Rng noise(3000 + inst);
        for (auto& b : layer.pool.b_factors) {
            for (double& x : b.data) x = 0.3 * noise.gaussian();
        }
        Matrix h(3, 3), upstream(3, 2);
        for (double& x : h.data) x = noise.gaussian();
        for (double& x : upstream.data) x = noise.gaussian();
        std::optional<std::size_t> task_id;
        if (cfg.routing_mode == RoutingMode::task) task_id = 1;

        ForwardResult fwd = layer.forward(h, task_id);
        GradBuffer grads = GradBuffer::zeros_like(layer);
        backward(layer, fwd.trace, upstream, grads);
        Vector analytic(0);
        for (const auto& v : grad_views(grads)) {
            analytic.data.insert(analytic.data.end(), v.begin(), v.end());
        }

        ParamViews views = trainable_params(layer);
        Vector theta(0);
        for (const auto& v : views) theta.data.insert(theta.data.end(), v.begin(), v.end());
        bool index_flip = false;
        auto fn = [&](const Vector& th) {
            std::size_t k = 0;
            for (const auto& v : views) {
                for (double& x : v) x = th[k++];
            }
            ForwardResult r = layer.forward(h, task_id);
            if (r.sel.indices_a != fwd.sel.indices_a || r.sel.indices_b != fwd.sel.indices_b) {
                index_flip = true;
            }
            double s = 0.0;
            for (std::size_t i = 0; i < r.output.data.size(); ++i) {
                s += upstream.data[i] * r.output.data[i];
            }
            return s;
        };
        Vector numeric = finite_diff(fn, theta, kEps);
        if (index_flip) {
            ++skipped;  // a +-eps perturbation crossed a top-k boundary
            continue;
        }
        ++checked;
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            double denom = std::abs(analytic[i]) + std::abs(numeric[i]);
            double diff = std::abs(analytic[i] - numeric[i]);
            if (denom < 1e-8 || diff < kRoundoffFloor) continue;
            worst = std::max(worst, diff / denom);
        }
    }
    bool pass = checked >= 20 && worst < kTol;
    char detail[128];
    std::snprintf(detail, sizeof(detail), "%d instances, %d skipped, max rel err %.3g",
                  checked, skipped, worst);
    report(2, "gradient correctness", pass, detail);
}

// ---- 3. plain-LoRA reduction ----------------------------------------------

void criterion_lora_reduction() {
    HarnessConfig cfg;
    cfg.num_tasks = 2;
    cfg.d_in = 8;
    cfg.d_out = 8;
    cfg.steps = 500;
    cfg.batch_size = 4;
    cfg.seq_len = 3;
    cfg.eval_instances = 16;
    cfg.seeds = {1};
    TaskSuite suite = make_suite(cfg, 1);

    MixLoraConfig mix;
    mix.num_factors = 2;
    mix.rank = 2;
    mix.gating_mode = GatingMode::hard;
    mix.cfs_enabled = false;
    mix.alpha = 4.0;  // plain LoRA's 2r default

    TrainResult as_mix = train(Variant::mixlora, suite, mix, cfg, 1);
    TrainResult as_lora = train(Variant::lora, suite, mix, cfg, 1);
    bool curves = as_mix.curve == as_lora.curve && as_mix.final_losses == as_lora.final_losses;

    // forward agreement of the trained models
    Rng rng(3);
    Matrix h = random_matrix(4, 8, rng);
    Matrix om = std::get<AdaptedLinear>(as_mix.model.layers[0]).forward(h).output;
    Matrix ol = std::get<LoraLinear>(as_lora.model.layers[0]).forward(h).output;
    double max_diff = 0.0;
    for (std::size_t i = 0; i < om.data.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(om.data[i] - ol.data[i]));
    }
    bool pass = curves && max_diff < 1e-12;
    char detail[128];
    std::snprintf(detail, sizeof(detail), "500 steps %s, forward diff %.3g",
                  curves ? "bit-identical" : "DIVERGED", max_diff);
    report(3, "plain-LoRA reduction", pass, detail);
}

// ---- 4. sum-of-outer-products identity ------------------------------------

void criterion_outer_identity() {
    Rng rng(4001);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        MixLoraConfig cfg;
        cfg.d_in = 2 + rng.below(8);
        cfg.d_out = 2 + rng.below(8);
        cfg.num_factors = 2 + rng.below(6);
        cfg.rank = 1 + rng.below(cfg.num_factors);
        Rng init(5000 + trial);
        AdaptedLinear layer = AdaptedLinear::init(cfg, init);
        for (auto& b : layer.pool.b_factors) {
            for (double& x : b.data) x = rng.gaussian();
        }

        // random selection with random soft gates
        std::vector<std::size_t> pool_idx(cfg.num_factors);
        for (std::size_t e = 0; e < cfg.num_factors; ++e) pool_idx[e] = e;
        Selection sel;
        for (std::size_t i = 0; i < cfg.rank; ++i) {
            std::size_t pick = i + rng.below(cfg.num_factors - i);
            std::swap(pool_idx[i], pool_idx[pick]);
        }
        sel.indices_a.assign(pool_idx.begin(), pool_idx.begin() + cfg.rank);
        for (std::size_t i = 0; i < cfg.rank; ++i) {
            std::size_t pick = i + rng.below(cfg.num_factors - i);
            std::swap(pool_idx[i], pool_idx[pick]);
        }
        sel.indices_b.assign(pool_idx.begin(), pool_idx.begin() + cfg.rank);
        std::sort(sel.indices_a.begin(), sel.indices_a.end());
        std::sort(sel.indices_b.begin(), sel.indices_b.end());
        for (std::size_t i = 0; i < cfg.rank; ++i) {
            sel.gates_a.push_back(rng.uniform());
            sel.gates_b.push_back(rng.uniform());
        }

        Matrix got = layer.assemble_delta_w(sel);
        Matrix oracle(cfg.d_out, cfg.d_in);
        for (std::size_t i = 0; i < cfg.rank; ++i) {
            Vector a = layer.pool.a_factors[sel.indices_a[i]];
            Vector b = layer.pool.b_factors[sel.indices_b[i]];
            for (double& x : a.data) x *= sel.gates_a[i];
            for (double& x : b.data) x *= sel.gates_b[i];
            add_scaled(oracle, outer(b, a), 1.0);
        }
        for (std::size_t k = 0; k < got.data.size(); ++k) {
            worst = std::max(worst, std::abs(got.data[k] - oracle.data[k]));
        }
    }
    char detail[64];
    std::snprintf(detail, sizeof(detail), "1000 selections, max abs diff %.3g", worst);
    report(4, "sum-of-outer identity", worst < 1e-12, detail);
}

// ---- 5. interference analytics ---------------------------------------------

void criterion_interference_analytics() {
    LoraConfig lc;
    lc.d_in = 4;
    lc.d_out = 3;
    lc.rank = 2;
    Rng rng(5001);
    LoraLinear layer = LoraLinear::init(lc, rng);
    Rng noise(5002);
    for (double& x : layer.b.data) x = 0.5 * noise.gaussian();
    Model model;
    model.layers.push_back(layer);

    auto offset_batch = [&](const Matrix& h, double offset) {
        Matrix pred = model.forward(h).output;
        Matrix target = pred;
        for (double& x : target.data) x += offset;
        Batch b;
        b.instances.push_back({h, target});
        return b;
    };
    Matrix h1 = random_matrix(2, 4, rng);
    Matrix h2 = random_matrix(2, 4, rng);
    ParamGroup group{GroupSelector::all_adapter, {}};

    std::vector<std::vector<Batch>> batches{
        {offset_batch(h1, 1.0), offset_batch(h2, 0.6)},
        {offset_batch(h2, -0.5)},
    };
    double d00 = interference_score(model, 0, 0, group, batches, 0.1);
    double d11 = interference_score(model, 1, 1, group, batches, 0.1);
    bool diag_ok = std::abs(d00 - 1.0) <= 1e-9 && std::abs(d11 - 1.0) <= 1e-9;

    double s = interference_score(model, 0, 1, group, batches, 0.1);
    bool lambda_ok = interference_score(model, 0, 1, group, batches, 0.01) == s &&
                     interference_score(model, 0, 1, group, batches, 1.0) == s;

    // two quadratic losses with exactly opposite gradients at the shared point
    std::vector<std::vector<Batch>> opposed{
        {offset_batch(h1, 0.8)},
        {offset_batch(h1, -0.8)},
    };
    double conflict = interference_score(model, 0, 1, group, opposed, 0.1);
    bool closed_form_ok = std::abs(conflict - (-1.0)) <= 1e-9;

    bool pass = diag_ok && lambda_ok && closed_form_ok;
    char detail[128];
    std::snprintf(detail, sizeof(detail),
                  "diag %.3g, lambda-invariant %s, opposed pair %.17g", std::abs(d00 - 1.0),
                  lambda_ok ? "exact" : "NO", conflict);
    report(5, "interference analytics", pass, detail);
}

// ---- shared conflict-suite configuration (criteria 6-9) --------------------

HarnessConfig conflict_config() {
    HarnessConfig cfg;  // T=4, d=16, angle -0.5 (clamped to -1/3), 2000 steps,
                        // seeds 1..5
    // the comparative experiments need routers trained to convergence and a
    // clean instance-level routing signal: adaptive steps, long sequences to
    // cut pooling noise, and well-separated task input means
    cfg.optimizer = "adam";
    cfg.lr = 2e-3;
    cfg.seq_len = 16;
    cfg.mean_scale = 6.0;
    return cfg;
}

MixLoraConfig conflict_adapter() {
    MixLoraConfig mix;  // defaults: E=8, r=2, soft gating, instance routing
    return mix;
}

// ---- 6. conflict-mitigation ordering ---------------------------------------

void criterion_conflict_mitigation() {
    ExperimentReport rep = compare_experiment(conflict_adapter(), conflict_config());
    int loss_wins = 0, gap_wins = 0;
    for (const auto& s : rep.per_seed) {
        if (s.mixlora.mean_loss < s.lora.mean_loss) ++loss_wins;
        if (s.mixlora.specialist_gap < s.lora.specialist_gap) ++gap_wins;
    }
    bool pass = loss_wins >= 4 && gap_wins >= 4;
    char detail[96];
    std::snprintf(detail, sizeof(detail), "loss wins %d/5, specialist-gap wins %d/5",
                  loss_wins, gap_wins);
    report(6, "conflict mitigation", pass, detail);
}

// ---- 7. routing-strategy ordering -------------------------------------------

void criterion_routing_ordering() {
    HarnessConfig cfg = conflict_config();
    int ordered = 0;
    std::string means;
    for (std::uint64_t seed : cfg.seeds) {
        TaskSuite suite = make_suite(cfg, seed);
        double loss[3];
        for (int mode = 0; mode < 3; ++mode) {
            MixLoraConfig mix = conflict_adapter();
            mix.routing_mode = static_cast<RoutingMode>(mode);
            loss[mode] = train(Variant::mixlora, suite, mix, cfg, seed).mean_final_loss;
        }
        if (loss[0] <= loss[1] && loss[1] <= loss[2]) ++ordered;
        char buf[64];
        std::snprintf(buf, sizeof(buf), " [%.3g %.3g %.3g]", loss[0], loss[1], loss[2]);
        means += buf;
    }
    char detail[256];
    std::snprintf(detail, sizeof(detail), "instance<=task<=random in %d/5%s", ordered,
                  means.c_str());
    report(7, "routing-strategy ordering", ordered >= 4, detail);
}

// ---- 8. interference reduction ----------------------------------------------

void criterion_interference_reduction() {
    auto recs = interference_comparison(conflict_adapter(), conflict_config(), 4);
    int wins = 0;
    for (const auto& rec : recs) {
        if (rec.mean_negative_mixlora > rec.mean_negative_lora) ++wins;
    }
    char detail[96];
    std::snprintf(detail, sizeof(detail), "mixlora less negative in %d/5 seeds", wins);
    report(8, "interference reduction", wins >= 3, detail);
}

// ---- 9. routing clustering ---------------------------------------------------

void criterion_routing_clustering() {
    HarnessConfig cfg = conflict_config();
    const std::uint64_t seed = cfg.seeds.front();
    TaskSuite suite = make_suite(cfg, seed);

    MixLoraConfig mix = conflict_adapter();
    TrainResult trained = train(Variant::mixlora, suite, mix, cfg, seed);
    RoutingSimilarity inst = routing_similarity(trained.model, suite, cfg, 32, seed);
    double trained_gap = inst.within_task - inst.cross_task;

    MixLoraConfig rnd = conflict_adapter();
    rnd.routing_mode = RoutingMode::random;
    Model random_model;
    Rng rng(seed);
    MixLoraConfig rc = rnd;
    rc.d_in = cfg.d_in;
    rc.d_out = cfg.d_out;
    random_model.layers.push_back(AdaptedLinear::init(rc, rng, &suite.base_w));
    RoutingSimilarity rsim = routing_similarity(random_model, suite, cfg, 32, seed);
    double random_gap = std::abs(rsim.within_task - rsim.cross_task);

    bool pass = trained_gap >= 0.1 && random_gap < 0.05;
    char detail[96];
    std::snprintf(detail, sizeof(detail), "trained gap %.3f, random gap %.3f", trained_gap,
                  random_gap);
    report(9, "routing clustering", pass, detail);
}

// ---- 10. serialization -------------------------------------------------------

void criterion_serialization() {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "mixlora_acceptance_ckpt";
    fs::create_directories(dir);
    bool pass = true;

    Rng data(10001);
    for (int variant = 0; variant < 3 && pass; ++variant) {
        MixLoraConfig cfg;
        cfg.d_in = 6;
        cfg.d_out = 5;
        cfg.num_factors = 4;
        cfg.rank = 2;
        cfg.cfs_enabled = variant == 1;
        if (variant == 2) {
            cfg.routing_mode = RoutingMode::task;
            cfg.num_tasks = 3;
        }
        Rng rng(10100 + variant);
        AdaptedLinear layer = AdaptedLinear::init(cfg, rng);
        for (auto& b : layer.pool.b_factors) {
            for (double& x : b.data) x = data.gaussian();
        }
        std::string p = (dir / ("m" + std::to_string(variant) + ".ckpt")).string();
        save_checkpoint(layer, p);
        AdaptedLinear back = load_mixlora_checkpoint(p);

        for (std::size_t e = 0; e < cfg.num_factors && pass; ++e) {
            pass = back.pool.a_factors[e] == layer.pool.a_factors[e] &&
                   back.pool.b_factors[e] == layer.pool.b_factors[e];
        }
        pass = pass && back.base_w == layer.base_w && back.routers.w_a == layer.routers.w_a;
        Matrix h = random_matrix(3, 6, data);
        std::optional<std::size_t> task_id;
        if (variant == 2) task_id = 1;
        pass = pass && back.forward(h, task_id).output == layer.forward(h, task_id).output;
    }
    fs::remove_all(dir);
    report(10, "serialization", pass, "bit-exact round-trip, exact forward reproduction");
}

}  // namespace

int main() {
    criterion_zero_init();
    criterion_gradcheck();
    criterion_lora_reduction();
    criterion_outer_identity();
    criterion_interference_analytics();
    criterion_conflict_mitigation();
    criterion_routing_ordering();
    criterion_interference_reduction();
    criterion_routing_clustering();
    criterion_serialization();
    if (g_failures > 0) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
