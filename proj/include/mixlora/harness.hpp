#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixlora/interference.hpp"
#include "mixlora/model.hpp"

namespace mixlora {

// A regression task demanding the weight adjustment teacher_delta on top of
// the shared base layer: y = (W_base + teacher_delta) x + noise.
struct SyntheticTask {
    std::size_t id = 0;
    Matrix teacher_delta;  // d_out x d_in
    Vector input_mean;     // d_in
    double noise_std = 0.05;
    LossSpec loss;
};

struct HarnessConfig {
    std::size_t num_tasks = 4;
    std::size_t d_in = 16;
    std::size_t d_out = 16;
    double conflict_angle = -0.5;
    std::size_t seq_len = 4;
    std::size_t batch_size = 8;
    std::size_t steps = 2000;
    double lr = 1e-2;
    double noise_std = 0.05;
    double mean_scale = 3.0;
    double delta_scale = 1.0;
    std::size_t eval_instances = 64;
    std::size_t num_layers = 1;
    std::string optimizer = "sgd";  // or "adam"
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};

    void validate() const;
};

enum class Variant { lora, mixlora, lora_specialist };

// Smallest pairwise cosine realizable by T equiangular unit vectors.
double min_feasible_angle(std::size_t T);

// Teacher deltas with all pairwise cosines exactly conflict_angle, built by
// Gram-Schmidt from rank-1 seeds (so a single task's delta has rank 1).
// Throws ArgumentError when the angle is infeasible for T.
std::vector<SyntheticTask> gen_tasks(std::size_t T, std::size_t d_in, std::size_t d_out,
                                     double conflict_angle, std::uint64_t seed,
                                     double noise_std = 0.05, double mean_scale = 3.0,
                                     double delta_scale = 1.0);

struct TaskSuite {
    Matrix base_w;
    std::vector<SyntheticTask> tasks;
    double effective_angle = 0.0;  // requested angle clamped to the feasible range
};

TaskSuite make_suite(const HarnessConfig& cfg, std::uint64_t seed);

Instance sample_instance(const SyntheticTask& task, const Matrix& base_w,
                         std::size_t seq_len, Rng& rng);
Batch sample_batch(const SyntheticTask& task, const Matrix& base_w, std::size_t seq_len,
                   std::size_t batch_size, Rng& rng);
std::vector<std::vector<Batch>> make_task_batches(const TaskSuite& suite,
                                                  const HarnessConfig& cfg,
                                                  std::uint64_t seed,
                                                  std::size_t batches_per_task);

struct TrainResult {
    Model model;                            // joint variants
    std::vector<Model> specialist_models;   // lora_specialist only
    std::vector<std::vector<double>> curve; // per task: training loss at each visit
    std::vector<double> final_losses;       // per task, on fresh eval instances
    double mean_final_loss = 0.0;
};

// Interleaved round-robin training; deterministic given seed. The data stream
// is derived from (seed, task) only, so every variant sees identical batches.
TrainResult train(Variant variant, const TaskSuite& suite, const MixLoraConfig& mix_cfg,
                  const HarnessConfig& cfg, std::uint64_t seed);

struct VariantOutcome {
    std::vector<double> per_task_loss;
    double mean_loss = 0.0;
    double specialist_gap = 0.0;  // mean over tasks of (loss - specialist loss)
};

struct SeedComparison {
    std::uint64_t seed = 0;
    VariantOutcome lora;
    VariantOutcome mixlora;
    VariantOutcome specialist;
};

struct ExperimentReport {
    std::vector<SeedComparison> per_seed;
    std::string config_echo;
};

ExperimentReport compare_experiment(const MixLoraConfig& mix_cfg, const HarnessConfig& cfg);

struct RoutingSimilarity {
    double within_task = 0.0;
    double cross_task = 0.0;
};

// Mean Jaccard similarity of selected factor index sets (A and B side,
// averaged over layers) between instance pairs of the same vs different tasks.
RoutingSimilarity routing_similarity(const Model& model, const TaskSuite& suite,
                                     const HarnessConfig& cfg, std::size_t n_samples,
                                     std::uint64_t seed);

struct CfsAblationSeed {
    std::uint64_t seed = 0;
    std::vector<double> loss_cfs_on;
    std::vector<double> loss_cfs_off;
    double mean_on = 0.0;
    double mean_off = 0.0;
};

std::vector<CfsAblationSeed> cfs_ablation(const MixLoraConfig& mix_cfg,
                                          const HarnessConfig& cfg);

struct InterferenceComparisonSeed {
    std::uint64_t seed = 0;
    InterferenceMatrix lora;
    InterferenceMatrix mixlora;
    double mean_negative_lora = 0.0;
    double mean_negative_mixlora = 0.0;
};

// Trains same-capacity LoRA (rank = E) and MixLoRA (E, r) on the same suite
// and compares layer-averaged all-adapter interference matrices.
std::vector<InterferenceComparisonSeed> interference_comparison(
    const MixLoraConfig& mix_cfg, const HarnessConfig& cfg,
    std::size_t batches_per_task = 4);

}  // namespace mixlora
