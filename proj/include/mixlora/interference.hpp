#pragma once

#include <string>
#include <vector>

#include "mixlora/model.hpp"

namespace mixlora {

enum class GroupSelector { lora_a, lora_b, all_adapter };

// A nonempty, fixed-order flattened parameter slice: the selected factor
// matrices of the selected layers. An empty layer list means all layers.
struct ParamGroup {
    GroupSelector selector = GroupSelector::all_adapter;
    std::vector<std::size_t> layers;
};

struct InterferenceMatrix {
    std::vector<std::string> task_ids;
    Matrix scores;  // T x T, NaN where flagged degenerate
    GroupSelector group = GroupSelector::all_adapter;
    std::size_t num_batch_pairs = 0;
    std::vector<std::pair<std::size_t, std::size_t>> degenerate;  // flagged (i, j)
};

// Flattened gradient of the mean batch loss w.r.t. the group. For MixLoRA
// layers the gradient covers all E factors (unselected ones stay zero).
Vector grad_for_task(const Model& model, const Batch& batch, const ParamGroup& group);

// First-order loss change on task i from a unit step along g_j, scaled by the
// learning rate. Throws DegenerateError when g_j is numerically zero.
double delta_loss(const Vector& g_i, const Vector& g_j, double lambda);

// Mean over x_i batches of delta_j L_i / delta_i L_i. The learning rate
// cancels algebraically in the ratio, so the score is exactly
// lambda-invariant. Degenerate denominators yield NaN.
double interference_score(const Model& model, std::size_t task_i, std::size_t task_j,
                          const ParamGroup& group,
                          const std::vector<std::vector<Batch>>& batches_per_task,
                          double lambda);

InterferenceMatrix build_matrix(const Model& model,
                                const std::vector<std::string>& task_ids,
                                const ParamGroup& group,
                                const std::vector<std::vector<Batch>>& batches_per_task,
                                double lambda);

// Per-layer matrices averaged entrywise (NaN-propagating).
InterferenceMatrix build_layer_averaged_matrix(
    const Model& model, const std::vector<std::string>& task_ids, GroupSelector selector,
    const std::vector<std::vector<Batch>>& batches_per_task, double lambda);

// CSV with a header row/column of task ids at full precision, plus a sidecar
// metadata file at path + ".meta".
void export_matrix(const InterferenceMatrix& matrix, const std::string& path,
                   double lambda, std::uint64_t seed);
InterferenceMatrix import_matrix(const std::string& path);

// Mean of strictly negative entries; 0 when there are none. NaN entries are
// skipped.
double mean_negative_entries(const InterferenceMatrix& matrix);

}  // namespace mixlora
