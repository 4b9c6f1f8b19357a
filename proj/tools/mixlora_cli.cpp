// Command-line front end: train adapters on the synthetic multi-task suite,
// compare variants, export interference matrices, dump routing decisions and
// run a finite-difference gradient self-check.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mixlora/checkpoint.hpp"
#include "mixlora/harness.hpp"
#include "mixlora/runconfig.hpp"

namespace fs = std::filesystem;
using namespace mixlora;

namespace {

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::ofstream open_csv(const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    return os;
}

fs::path prepare_out_dir(const RunConfig& cfg, const std::string& override_dir) {
    fs::path dir = override_dir.empty() ? cfg.out_dir : override_dir;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string());
    return dir;
}

RunConfig load_config(const std::string& path) {
    if (path.empty()) throw ConfigError("--config is required");
    return RunConfig::from_file(path);
}

void write_losses_csv(const fs::path& path, const TrainResult& r) {
    auto os = open_csv(path);
    os << "task,visit,loss\n";
    for (std::size_t t = 0; t < r.curve.size(); ++t) {
        for (std::size_t k = 0; k < r.curve[t].size(); ++k) {
            os << t << "," << k << "," << fmt(r.curve[t][k]) << "\n";
        }
    }
}

void save_model(const Model& model, const fs::path& base_path) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        fs::path p = base_path;
        if (model.layers.size() > 1) p += ".layer" + std::to_string(l);
        if (const auto* mix = std::get_if<AdaptedLinear>(&model.layers[l])) {
            save_checkpoint(*mix, p.string());
        } else {
            save_checkpoint(std::get<LoraLinear>(model.layers[l]), p.string());
        }
    }
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed_override, const std::string& ckpt_path) {
    RunConfig cfg = load_config(config_path);
    fs::path dir = prepare_out_dir(cfg, out_dir);
    std::uint64_t seed = seed_override.value_or(cfg.harness.seeds.front());

    TaskSuite suite = make_suite(cfg.harness, seed);
    Variant variant = cfg.variant == "lora" ? Variant::lora : Variant::mixlora;
    TrainResult r = train(variant, suite, cfg.adapter, cfg.harness, seed);

    write_losses_csv(dir / "loss_curve.csv", r);
    {
        auto os = open_csv(dir / "final_losses.csv");
        os << "task,loss\n";
        for (std::size_t t = 0; t < r.final_losses.size(); ++t) {
            os << t << "," << fmt(r.final_losses[t]) << "\n";
        }
        os << "mean," << fmt(r.mean_final_loss) << "\n";
    }
    fs::path ckpt = ckpt_path.empty() ? dir / "model.ckpt" : fs::path(ckpt_path);
    save_model(r.model, ckpt);

    std::cout << "variant=" << cfg.variant << " seed=" << seed
              << " mean_final_loss=" << fmt(r.mean_final_loss) << "\n";
    return 0;
}

int cmd_compare(const std::string& config_path, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path);
    fs::path dir = prepare_out_dir(cfg, out_dir);

    ExperimentReport rep = compare_experiment(cfg.adapter, cfg.harness);
    {
        auto os = open_csv(dir / "compare.csv");
        os << "seed,variant,task,loss\n";
        for (const auto& s : rep.per_seed) {
            auto emit = [&](const char* name, const VariantOutcome& v) {
                for (std::size_t t = 0; t < v.per_task_loss.size(); ++t) {
                    os << s.seed << "," << name << "," << t << ","
                       << fmt(v.per_task_loss[t]) << "\n";
                }
            };
            emit("specialist", s.specialist);
            emit("lora", s.lora);
            emit("mixlora", s.mixlora);
        }
    }
    {
        auto os = open_csv(dir / "compare_summary.txt");
        os << "config: " << rep.config_echo << "\n";
        for (const auto& s : rep.per_seed) {
            os << "seed " << s.seed << ": specialist=" << fmt(s.specialist.mean_loss)
               << " lora=" << fmt(s.lora.mean_loss)
               << " mixlora=" << fmt(s.mixlora.mean_loss)
               << " lora_gap=" << fmt(s.lora.specialist_gap)
               << " mixlora_gap=" << fmt(s.mixlora.specialist_gap) << "\n";
        }
    }
    std::size_t wins = 0;
    for (const auto& s : rep.per_seed) {
        if (s.mixlora.mean_loss < s.lora.mean_loss) ++wins;
    }
    std::cout << "seeds=" << rep.per_seed.size() << " mixlora_wins=" << wins << "\n";
    return 0;
}

int cmd_interference(const std::string& config_path, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path);
    fs::path dir = prepare_out_dir(cfg, out_dir);

    auto recs = interference_comparison(cfg.adapter, cfg.harness,
                                        cfg.interference.batches_per_task);
    auto os = open_csv(dir / "interference_summary.txt");
    for (const auto& rec : recs) {
        std::string lora_path = (dir / ("interference_lora_seed" +
                                        std::to_string(rec.seed) + ".csv")).string();
        std::string mix_path = (dir / ("interference_mixlora_seed" +
                                       std::to_string(rec.seed) + ".csv")).string();
        export_matrix(rec.lora, lora_path, cfg.interference.lambda, rec.seed);
        export_matrix(rec.mixlora, mix_path, cfg.interference.lambda, rec.seed);
        os << "seed " << rec.seed
           << ": mean_negative_lora=" << fmt(rec.mean_negative_lora)
           << " mean_negative_mixlora=" << fmt(rec.mean_negative_mixlora) << "\n";
        std::cout << "seed " << rec.seed
                  << " mean_negative_lora=" << fmt(rec.mean_negative_lora)
                  << " mean_negative_mixlora=" << fmt(rec.mean_negative_mixlora) << "\n";
    }
    return 0;
}

int cmd_routing_dump(const std::string& config_path, const std::string& out_dir,
                     std::optional<std::uint64_t> seed_override, std::size_t n_samples) {
    RunConfig cfg = load_config(config_path);
    fs::path dir = prepare_out_dir(cfg, out_dir);
    std::uint64_t seed = seed_override.value_or(cfg.harness.seeds.front());

    TaskSuite suite = make_suite(cfg.harness, seed);
    TrainResult r = train(Variant::mixlora, suite, cfg.adapter, cfg.harness, seed);

    {
        auto os = open_csv(dir / "routing.csv");
        os << "task,sample,layer,side,indices\n";
        Rng route_rng(derive_seed(seed, "dump_route"));
        for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
            Rng rng(derive_seed(seed, "dump_data", t));
            for (std::size_t s = 0; s < n_samples; ++s) {
                Instance inst = sample_instance(suite.tasks[t], suite.base_w,
                                                cfg.harness.seq_len, rng);
                Model::Fwd fwd = r.model.forward(inst.h, t, &route_rng);
                for (std::size_t l = 0; l < fwd.selections.size(); ++l) {
                    const Selection& sel = fwd.selections[l];
                    auto emit = [&](const char* side, const std::vector<std::size_t>& idx) {
                        os << t << "," << s << "," << l << "," << side << ",";
                        for (std::size_t i = 0; i < idx.size(); ++i) {
                            os << (i ? " " : "") << idx[i];
                        }
                        os << "\n";
                    };
                    emit("a", sel.indices_a);
                    emit("b", sel.indices_b);
                }
            }
        }
    }

    RoutingSimilarity sim = routing_similarity(r.model, suite, cfg.harness, n_samples, seed);
    std::cout << "within_task=" << fmt(sim.within_task)
              << " cross_task=" << fmt(sim.cross_task) << "\n";
    return 0;
}

// Finite-difference self-check of the analytic backward pass over a small
// adapter in every routing/gating/CFS combination.
int cmd_gradcheck(std::uint64_t seed) {
    double worst = 0.0;
    for (int mode = 0; mode < 3; ++mode) {
        for (bool cfs : {false, true}) {
            for (bool hard : {false, true}) {
                MixLoraConfig cfg;
                cfg.d_in = 5;
                cfg.d_out = 4;
                cfg.num_factors = 6;
                cfg.rank = 2;
                cfg.routing_mode = static_cast<RoutingMode>(mode);
                cfg.gating_mode = hard ? GatingMode::hard : GatingMode::soft;
                cfg.cfs_enabled = cfs;
                if (cfg.routing_mode == RoutingMode::task) cfg.num_tasks = 3;

                Rng rng(seed);
                AdaptedLinear layer = AdaptedLinear::init(cfg, rng);
                Rng noise(seed + 1);
                for (auto& b : layer.pool.b_factors) {
                    for (double& x : b.data) x = 0.3 * noise.gaussian();
                }
                Matrix h(3, cfg.d_in), upstream(3, cfg.d_out);
                Rng data(seed + 2);
                for (double& x : h.data) x = data.gaussian();
                for (double& x : upstream.data) x = data.gaussian();
                std::optional<std::size_t> task_id;
                if (cfg.routing_mode == RoutingMode::task) task_id = 1;

                auto run = [&]() {
                    if (cfg.routing_mode == RoutingMode::random) {
                        Rng route(seed + 3);
                        return layer.forward(h, task_id, &route);
                    }
                    return layer.forward(h, task_id);
                };
                ForwardResult fwd = run();
                GradBuffer grads = GradBuffer::zeros_like(layer);
                backward(layer, fwd.trace, upstream, grads);

                ParamViews views = trainable_params(layer);
                Vector theta(0);
                for (const auto& v : views) theta.data.insert(theta.data.end(), v.begin(), v.end());
                auto fn = [&](const Vector& th) {
                    std::size_t k = 0;
                    for (const auto& v : views) {
                        for (double& x : v) x = th[k++];
                    }
                    Matrix out = run().output;
                    double s = 0.0;
                    for (std::size_t i = 0; i < out.data.size(); ++i) {
                        s += upstream.data[i] * out.data[i];
                    }
                    return s;
                };
                Vector numeric = finite_diff(fn, theta, 1e-5);
                Vector analytic(0);
                for (const auto& v : grad_views(grads)) {
                    analytic.data.insert(analytic.data.end(), v.begin(), v.end());
                }
                for (std::size_t i = 0; i < analytic.size(); ++i) {
                    double denom = std::abs(analytic[i]) + std::abs(numeric[i]);
                    double diff = std::abs(analytic[i] - numeric[i]);
                    if (denom < 1e-8 || diff < 1e-9) continue;
                    worst = std::max(worst, diff / denom);
                }
            }
        }
    }
    std::cout << "max_rel_err=" << fmt(worst) << "\n";
    if (!(worst < 1e-6)) {
        std::cerr << "gradient check failed (tolerance 1e-6)\n";
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MixLoRA dynamic low-rank adaptation toolbox"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_path;
    std::optional<std::uint64_t> seed;
    std::size_t n_samples = 16;
    std::uint64_t gradcheck_seed = 7;

    auto add_common = [&](CLI::App* sub, bool with_seed) {
        sub->add_option("--config", config_path, "JSON run configuration")->required();
        sub->add_option("--out", out_dir, "output directory (overrides config)");
        if (with_seed) sub->add_option("--seed", seed, "seed override");
    };

    CLI::App* train_cmd = app.add_subcommand("train", "train one variant, save checkpoints");
    add_common(train_cmd, true);
    train_cmd->add_option("--checkpoint", ckpt_path, "checkpoint output path");

    CLI::App* compare_cmd =
        app.add_subcommand("compare", "specialist vs joint LoRA vs MixLoRA across seeds");
    add_common(compare_cmd, false);

    CLI::App* interf_cmd =
        app.add_subcommand("interference", "export task-interference matrices");
    add_common(interf_cmd, false);

    CLI::App* dump_cmd =
        app.add_subcommand("routing-dump", "train MixLoRA and dump routing decisions");
    add_common(dump_cmd, true);
    dump_cmd->add_option("--samples", n_samples, "instances per task to dump");

    CLI::App* grad_cmd =
        app.add_subcommand("gradcheck", "finite-difference check of the backward pass");
    grad_cmd->add_option("--seed", gradcheck_seed, "seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(config_path, out_dir, seed, ckpt_path);
        if (compare_cmd->parsed()) return cmd_compare(config_path, out_dir);
        if (interf_cmd->parsed()) return cmd_interference(config_path, out_dir);
        if (dump_cmd->parsed()) {
            return cmd_routing_dump(config_path, out_dir, seed, n_samples);
        }
        if (grad_cmd->parsed()) return cmd_gradcheck(gradcheck_seed);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DegenerateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
