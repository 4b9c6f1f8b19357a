#include "mixlora/harness.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "mixlora/errors.hpp"

namespace mixlora {

void HarnessConfig::validate() const {
    if (num_tasks < 1) throw ConfigError("num_tasks must be >= 1");
    if (d_in < 1 || d_out < 1) throw ConfigError("dims must be >= 1");
    if (conflict_angle < -1.0 || conflict_angle > 1.0) {
        throw ConfigError("conflict_angle must be in [-1, 1]");
    }
    if (seq_len < 1 || batch_size < 1 || steps < 1) {
        throw ConfigError("seq_len, batch_size and steps must be >= 1");
    }
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (num_layers > 1 && d_in != d_out) {
        throw ConfigError("stacked layers require d_in == d_out");
    }
    if (optimizer != "sgd" && optimizer != "adam") {
        throw ConfigError("optimizer must be 'sgd' or 'adam'");
    }
    if (seeds.empty()) throw ConfigError("need at least one seed");
}

double min_feasible_angle(std::size_t T) {
    if (T < 2) return -1.0;
    return -1.0 / static_cast<double>(T - 1);
}

namespace {

Vector gaussian_vec(std::size_t n, Rng& rng) {
    Vector v(n);
    for (double& x : v.data) x = rng.gaussian();
    return v;
}

Vector unit(const Vector& v) {
    double n = norm(v);
    if (n < 1e-12) throw NumericError("unit: zero vector");
    Vector out = v;
    for (double& x : out.data) x /= n;
    return out;
}

}  // namespace

std::vector<SyntheticTask> gen_tasks(std::size_t T, std::size_t d_in, std::size_t d_out,
                                     double conflict_angle, std::uint64_t seed,
                                     double noise_std, double mean_scale,
                                     double delta_scale) {
    if (T < 1) throw ArgumentError("gen_tasks: need at least one task");
    if (conflict_angle < -1.0 || conflict_angle > 1.0) {
        throw ArgumentError("gen_tasks: conflict_angle must be in [-1, 1]");
    }
    const std::size_t D = d_in * d_out;
    if (D < T) throw ArgumentError("gen_tasks: dimension too small for task count");
    if (T >= 2 && conflict_angle < min_feasible_angle(T) - 1e-12) {
        throw ArgumentError("gen_tasks: conflict_angle infeasible for this task count");
    }

    Rng rng(derive_seed(seed, "gen_tasks"));

    // rank-1 seeds, flattened and orthonormalized
    std::vector<Vector> basis;
    for (std::size_t t = 0; t < T; ++t) {
        Vector u = as_vector(outer(unit(gaussian_vec(d_out, rng)),
                                   unit(gaussian_vec(d_in, rng))));
        for (const Vector& b : basis) add_scaled(u, b, -dot(u, b));
        double n = norm(u);
        if (n < 1e-8) throw NumericError("gen_tasks: degenerate rank-1 seeds");
        for (double& x : u.data) x /= n;
        basis.push_back(std::move(u));
    }

    std::vector<Vector> flats;
    if (T == 1) {
        flats.push_back(basis[0]);
    } else {
        const double c = conflict_angle;
        Vector mean(D);
        for (const Vector& b : basis) add_scaled(mean, b, 1.0);
        for (double& x : mean.data) x /= std::sqrt(static_cast<double>(T));
        const double a = std::sqrt(std::max(0.0, 1.0 - c));
        const double disc = a * a / static_cast<double>(T) + c;
        const double beta = -a / std::sqrt(static_cast<double>(T)) +
                            std::sqrt(std::max(0.0, disc));
        for (std::size_t t = 0; t < T; ++t) {
            Vector v(D);
            add_scaled(v, basis[t], a);
            add_scaled(v, mean, beta);
            flats.push_back(std::move(v));
        }
        // construction check: pairwise cosines must equal the requested angle
        for (std::size_t i = 0; i < T; ++i) {
            for (std::size_t j = i + 1; j < T; ++j) {
                double cos = dot(flats[i], flats[j]) / (norm(flats[i]) * norm(flats[j]));
                if (std::abs(cos - c) > 1e-6) {
                    throw NumericError("gen_tasks: cosine construction drifted");
                }
            }
        }
    }

    std::vector<SyntheticTask> tasks;
    for (std::size_t t = 0; t < T; ++t) {
        SyntheticTask task;
        task.id = t;
        task.teacher_delta = Matrix(d_out, d_in);
        for (std::size_t k = 0; k < D; ++k) {
            task.teacher_delta.data[k] = delta_scale * flats[t][k];
        }
        task.input_mean = unit(gaussian_vec(d_in, rng));
        for (double& x : task.input_mean.data) x *= mean_scale;
        task.noise_std = noise_std;
        tasks.push_back(std::move(task));
    }
    return tasks;
}

TaskSuite make_suite(const HarnessConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    TaskSuite suite;
    // the exact equiangular construction only exists down to -1/(T-1);
    // steeper requests are clamped to that bound
    suite.effective_angle = std::max(cfg.conflict_angle, min_feasible_angle(cfg.num_tasks));
    Rng base_rng(derive_seed(seed, "base"));
    suite.base_w = Matrix(cfg.d_out, cfg.d_in);
    const double std = 1.0 / std::sqrt(static_cast<double>(cfg.d_in));
    for (double& x : suite.base_w.data) x = base_rng.gaussian(0.0, std);
    suite.tasks = gen_tasks(cfg.num_tasks, cfg.d_in, cfg.d_out, suite.effective_angle,
                            derive_seed(seed, "tasks"), cfg.noise_std, cfg.mean_scale,
                            cfg.delta_scale);
    return suite;
}

Instance sample_instance(const SyntheticTask& task, const Matrix& base_w,
                         std::size_t seq_len, Rng& rng) {
    const std::size_t d_in = base_w.cols;
    const std::size_t d_out = base_w.rows;
    Instance inst;
    inst.h = Matrix(seq_len, d_in);
    for (std::size_t t = 0; t < seq_len; ++t) {
        for (std::size_t c = 0; c < d_in; ++c) {
            inst.h.at(t, c) = task.input_mean[c] + rng.gaussian();
        }
    }
    Matrix teacher = base_w;
    add_scaled(teacher, task.teacher_delta, 1.0);
    inst.target = matmul(inst.h, transpose(teacher));
    for (std::size_t t = 0; t < seq_len; ++t) {
        for (std::size_t o = 0; o < d_out; ++o) {
            inst.target.at(t, o) += task.noise_std * rng.gaussian();
        }
    }
    return inst;
}

Batch sample_batch(const SyntheticTask& task, const Matrix& base_w, std::size_t seq_len,
                   std::size_t batch_size, Rng& rng) {
    Batch batch;
    batch.task_id = task.id;
    for (std::size_t i = 0; i < batch_size; ++i) {
        batch.instances.push_back(sample_instance(task, base_w, seq_len, rng));
    }
    return batch;
}

std::vector<std::vector<Batch>> make_task_batches(const TaskSuite& suite,
                                                  const HarnessConfig& cfg,
                                                  std::uint64_t seed,
                                                  std::size_t batches_per_task) {
    std::vector<std::vector<Batch>> out(suite.tasks.size());
    for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
        Rng rng(derive_seed(seed, "task_batches", t));
        for (std::size_t b = 0; b < batches_per_task; ++b) {
            out[t].push_back(sample_batch(suite.tasks[t], suite.base_w, cfg.seq_len,
                                          cfg.batch_size, rng));
        }
    }
    return out;
}

namespace {

Matrix identity_matrix(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Model build_model(Variant variant, const TaskSuite& suite, const MixLoraConfig& mix_cfg,
                  const HarnessConfig& cfg, std::uint64_t seed) {
    Model model;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        Rng rng(derive_seed(seed, "model", l));
        const Matrix base = l == 0 ? suite.base_w : identity_matrix(cfg.d_out);
        if (variant == Variant::mixlora) {
            MixLoraConfig c = mix_cfg;
            c.d_in = cfg.d_in;
            c.d_out = cfg.d_out;
            c.num_tasks = c.routing_mode == RoutingMode::task ? cfg.num_tasks : 0;
            c.seed = seed;
            model.layers.emplace_back(AdaptedLinear::init(c, rng, &base));
        } else {
            LoraConfig c;
            c.d_in = cfg.d_in;
            c.d_out = cfg.d_out;
            c.rank = mix_cfg.rank;
            c.seed = seed;
            model.layers.emplace_back(LoraLinear::init(c, rng, &base));
        }
    }
    return model;
}

struct Optimizer {
    std::string kind;
    double lr;
    AdamState adam;
    bool adam_ready = false;

    void step(const ParamViews& params, const ParamViews& grads) {
        if (kind == "sgd") {
            sgd_step(params, grads, lr);
            return;
        }
        if (!adam_ready) {
            adam = AdamState::zeros_like(params);
            adam_ready = true;
        }
        adam_step(adam, params, grads, lr);
    }
};

std::vector<double> eval_losses(const Model& model, const TaskSuite& suite,
                                const HarnessConfig& cfg, std::uint64_t seed,
                                Rng* route_rng) {
    std::vector<double> losses;
    for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
        Rng rng(derive_seed(seed, "eval", t));
        Batch batch = sample_batch(suite.tasks[t], suite.base_w, cfg.seq_len,
                                   cfg.eval_instances, rng);
        losses.push_back(model.batch_loss(batch, t, route_rng));
    }
    return losses;
}

TrainResult train_single(Model model, const TaskSuite& suite, const HarnessConfig& cfg,
                         std::uint64_t seed, const std::vector<std::size_t>& task_order_pool) {
    const std::size_t T = suite.tasks.size();
    TrainResult result;
    result.curve.assign(T, {});
    std::vector<Rng> data_rngs;
    for (std::size_t t = 0; t < T; ++t) data_rngs.emplace_back(derive_seed(seed, "data", t));
    Rng route_rng(derive_seed(seed, "route"));

    Optimizer opt{cfg.optimizer, cfg.lr, {}, false};
    ParamViews params = model.params();
    auto grads = model.zero_grads();

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const std::size_t t = task_order_pool[step % task_order_pool.size()];
        Batch batch = sample_batch(suite.tasks[t], suite.base_w, cfg.seq_len,
                                   cfg.batch_size, data_rngs[t]);
        for (auto& g : grads) {
            if (auto* gb = std::get_if<GradBuffer>(&g)) {
                gb->zero();
            } else {
                std::get<LoraGrads>(g).zero();
            }
        }
        double loss = model.batch_loss_and_grads(batch, grads, t, &route_rng);
        if (!std::isfinite(loss)) {
            std::ostringstream msg;
            msg << "training diverged: loss=" << loss << " at step " << step
                << " task " << t << " seed " << seed;
            throw NumericError(msg.str());
        }
        result.curve[t].push_back(loss);
        ParamViews gview = Model::grad_params(grads);
        opt.step(params, gview);
    }

    result.final_losses = eval_losses(model, suite, cfg, seed, &route_rng);
    double sum = 0.0;
    for (double l : result.final_losses) sum += l;
    result.mean_final_loss = sum / static_cast<double>(T);
    result.model = std::move(model);
    return result;
}

}  // namespace

TrainResult train(Variant variant, const TaskSuite& suite, const MixLoraConfig& mix_cfg,
                  const HarnessConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const std::size_t T = suite.tasks.size();
    if (variant != Variant::lora_specialist) {
        std::vector<std::size_t> order(T);
        for (std::size_t t = 0; t < T; ++t) order[t] = t;
        Model model = build_model(variant, suite, mix_cfg, cfg, seed);
        return train_single(std::move(model), suite, cfg, seed, order);
    }

    // one independent adapter per task; cross-task parameters untouched
    TrainResult result;
    result.curve.assign(T, {});
    result.final_losses.assign(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        TaskSuite single;
        single.base_w = suite.base_w;
        single.tasks = {suite.tasks[t]};
        single.tasks[0].id = 0;
        single.effective_angle = suite.effective_angle;
        Model model = build_model(Variant::lora, single, mix_cfg, cfg,
                                  derive_seed(seed, "specialist", t));
        HarnessConfig per_task = cfg;
        TrainResult r = train_single(std::move(model), single, per_task,
                                     derive_seed(seed, "specialist", t), {0});
        result.curve[t] = r.curve[0];
        result.final_losses[t] = r.final_losses[0];
        result.specialist_models.push_back(std::move(r.model));
    }
    double sum = 0.0;
    for (double l : result.final_losses) sum += l;
    result.mean_final_loss = sum / static_cast<double>(T);
    return result;
}

ExperimentReport compare_experiment(const MixLoraConfig& mix_cfg, const HarnessConfig& cfg) {
    cfg.validate();
    ExperimentReport report;
    std::ostringstream echo;
    echo << "T=" << cfg.num_tasks << " d_in=" << cfg.d_in << " d_out=" << cfg.d_out
         << " conflict_angle=" << cfg.conflict_angle << " E=" << mix_cfg.num_factors
         << " r=" << mix_cfg.rank << " steps=" << cfg.steps << " lr=" << cfg.lr
         << " optimizer=" << cfg.optimizer;
    report.config_echo = echo.str();

    for (std::uint64_t seed : cfg.seeds) {
        TaskSuite suite = make_suite(cfg, seed);
        SeedComparison cmp;
        cmp.seed = seed;
        TrainResult spec = train(Variant::lora_specialist, suite, mix_cfg, cfg, seed);
        TrainResult lora = train(Variant::lora, suite, mix_cfg, cfg, seed);
        TrainResult mix = train(Variant::mixlora, suite, mix_cfg, cfg, seed);

        auto fill = [&](const TrainResult& r, VariantOutcome& out) {
            out.per_task_loss = r.final_losses;
            out.mean_loss = r.mean_final_loss;
            double gap = 0.0;
            for (std::size_t t = 0; t < r.final_losses.size(); ++t) {
                gap += r.final_losses[t] - spec.final_losses[t];
            }
            out.specialist_gap = gap / static_cast<double>(r.final_losses.size());
        };
        fill(lora, cmp.lora);
        fill(mix, cmp.mixlora);
        fill(spec, cmp.specialist);
        cmp.specialist.specialist_gap = 0.0;
        report.per_seed.push_back(std::move(cmp));
    }
    return report;
}

RoutingSimilarity routing_similarity(const Model& model, const TaskSuite& suite,
                                     const HarnessConfig& cfg, std::size_t n_samples,
                                     std::uint64_t seed) {
    if (!model.is_mixlora()) {
        throw ArgumentError("routing_similarity: model has no routing");
    }
    const std::size_t T = suite.tasks.size();
    Rng route_rng(derive_seed(seed, "route_sim"));

    // per instance: one set of tagged (side, factor) pairs per layer
    using FactorSet = std::set<std::pair<int, std::size_t>>;
    std::vector<std::vector<std::vector<FactorSet>>> sets(T);  // [task][sample][layer]
    for (std::size_t t = 0; t < T; ++t) {
        Rng rng(derive_seed(seed, "route_sim_data", t));
        for (std::size_t s = 0; s < n_samples; ++s) {
            Instance inst = sample_instance(suite.tasks[t], suite.base_w, cfg.seq_len, rng);
            Model::Fwd fwd = model.forward(inst.h, t, &route_rng);
            std::vector<FactorSet> per_layer;
            for (const Selection& sel : fwd.selections) {
                FactorSet fs;
                for (std::size_t i : sel.indices_a) fs.insert({0, i});
                for (std::size_t i : sel.indices_b) fs.insert({1, i});
                per_layer.push_back(std::move(fs));
            }
            sets[t].push_back(std::move(per_layer));
        }
    }

    auto jaccard = [](const FactorSet& a, const FactorSet& b) {
        std::size_t inter = 0;
        for (const auto& x : a) inter += b.count(x);
        std::size_t uni = a.size() + b.size() - inter;
        return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    };
    auto pair_sim = [&](const std::vector<FactorSet>& a, const std::vector<FactorSet>& b) {
        double total = 0.0;
        for (std::size_t l = 0; l < a.size(); ++l) total += jaccard(a[l], b[l]);
        return total / static_cast<double>(a.size());
    };

    double within = 0.0, cross = 0.0;
    std::size_t n_within = 0, n_cross = 0;
    for (std::size_t t1 = 0; t1 < T; ++t1) {
        for (std::size_t s1 = 0; s1 < n_samples; ++s1) {
            for (std::size_t s2 = s1 + 1; s2 < n_samples; ++s2) {
                within += pair_sim(sets[t1][s1], sets[t1][s2]);
                ++n_within;
            }
            for (std::size_t t2 = t1 + 1; t2 < T; ++t2) {
                for (std::size_t s2 = 0; s2 < n_samples; ++s2) {
                    cross += pair_sim(sets[t1][s1], sets[t2][s2]);
                    ++n_cross;
                }
            }
        }
    }
    RoutingSimilarity sim;
    sim.within_task = n_within == 0 ? 1.0 : within / static_cast<double>(n_within);
    sim.cross_task = n_cross == 0 ? 1.0 : cross / static_cast<double>(n_cross);
    return sim;
}

std::vector<CfsAblationSeed> cfs_ablation(const MixLoraConfig& mix_cfg,
                                          const HarnessConfig& cfg) {
    cfg.validate();
    std::vector<CfsAblationSeed> out;
    for (std::uint64_t seed : cfg.seeds) {
        TaskSuite suite = make_suite(cfg, seed);
        MixLoraConfig on = mix_cfg;
        on.cfs_enabled = true;
        MixLoraConfig off = mix_cfg;
        off.cfs_enabled = false;
        TrainResult r_on = train(Variant::mixlora, suite, on, cfg, seed);
        TrainResult r_off = train(Variant::mixlora, suite, off, cfg, seed);
        CfsAblationSeed rec;
        rec.seed = seed;
        rec.loss_cfs_on = r_on.final_losses;
        rec.loss_cfs_off = r_off.final_losses;
        rec.mean_on = r_on.mean_final_loss;
        rec.mean_off = r_off.mean_final_loss;
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<InterferenceComparisonSeed> interference_comparison(
    const MixLoraConfig& mix_cfg, const HarnessConfig& cfg,
    std::size_t batches_per_task) {
    cfg.validate();
    std::vector<InterferenceComparisonSeed> out;
    std::vector<std::string> ids;
    for (std::size_t t = 0; t < cfg.num_tasks; ++t) ids.push_back("task" + std::to_string(t));

    for (std::uint64_t seed : cfg.seeds) {
        TaskSuite suite = make_suite(cfg, seed);
        // same-capacity LoRA: rank equal to MixLoRA's factor count
        MixLoraConfig lora_cfg = mix_cfg;
        lora_cfg.rank = mix_cfg.num_factors;
        TrainResult lora = train(Variant::lora, suite, lora_cfg, cfg, seed);
        TrainResult mix = train(Variant::mixlora, suite, mix_cfg, cfg, seed);

        auto batches = make_task_batches(suite, cfg, derive_seed(seed, "interf"),
                                         batches_per_task);
        InterferenceComparisonSeed rec;
        rec.seed = seed;
        rec.lora = build_layer_averaged_matrix(lora.model, ids, GroupSelector::all_adapter,
                                               batches, cfg.lr);
        rec.mixlora = build_layer_averaged_matrix(mix.model, ids,
                                                  GroupSelector::all_adapter, batches,
                                                  cfg.lr);
        rec.mean_negative_lora = mean_negative_entries(rec.lora);
        rec.mean_negative_mixlora = mean_negative_entries(rec.mixlora);
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace mixlora
