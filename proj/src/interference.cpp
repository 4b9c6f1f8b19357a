#include "mixlora/interference.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "mixlora/errors.hpp"

namespace mixlora {

namespace {

std::string fmt_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

const char* group_name(GroupSelector g) {
    switch (g) {
        case GroupSelector::lora_a: return "lora_a";
        case GroupSelector::lora_b: return "lora_b";
        case GroupSelector::all_adapter: return "all_adapter";
    }
    throw StateError("unknown group selector");
}

void append_flat(Vector& out, const std::vector<Vector>& vs) {
    for (const auto& v : vs) out.data.insert(out.data.end(), v.data.begin(), v.data.end());
}

void append_flat(Vector& out, const Matrix& m) {
    out.data.insert(out.data.end(), m.data.begin(), m.data.end());
}

std::vector<std::size_t> resolve_layers(const Model& model, const ParamGroup& group) {
    if (!group.layers.empty()) {
        for (std::size_t l : group.layers) {
            if (l >= model.layers.size()) throw ArgumentError("param group: bad layer index");
        }
        return group.layers;
    }
    std::vector<std::size_t> all(model.layers.size());
    for (std::size_t l = 0; l < all.size(); ++l) all[l] = l;
    return all;
}

Vector flatten_group(const std::vector<LayerGrads>& grads, const Model& model,
                     const ParamGroup& group) {
    Vector flat(0);
    auto layers = resolve_layers(model, group);
    // selector-major order, so lora_a + lora_b concatenate to all_adapter
    if (group.selector != GroupSelector::lora_b) {
        for (std::size_t l : layers) {
            if (const auto* g = std::get_if<GradBuffer>(&grads[l])) {
                append_flat(flat, g->a_factors);
            } else {
                append_flat(flat, std::get<LoraGrads>(grads[l]).a);
            }
        }
    }
    if (group.selector != GroupSelector::lora_a) {
        for (std::size_t l : layers) {
            if (const auto* g = std::get_if<GradBuffer>(&grads[l])) {
                append_flat(flat, g->b_factors);
            } else {
                append_flat(flat, std::get<LoraGrads>(grads[l]).b);
            }
        }
    }
    if (flat.size() == 0) throw ArgumentError("param group resolves to an empty slice");
    return flat;
}

constexpr double kDegenerateNorm = 1e-12;

}  // namespace

Vector grad_for_task(const Model& model, const Batch& batch, const ParamGroup& group) {
    if (batch.instances.empty()) throw ArgumentError("grad_for_task: empty batch");
    auto grads = model.zero_grads();
    model.batch_loss_and_grads(batch, grads, batch.task_id);
    return flatten_group(grads, model, group);
}

double delta_loss(const Vector& g_i, const Vector& g_j, double lambda) {
    double nj = norm(g_j);
    if (nj <= kDegenerateNorm) throw DegenerateError("delta_loss: near-zero step gradient");
    return lambda * dot(g_j, g_i) / nj;
}

namespace {

// Core ratio for one (i, j) entry given precomputed per-batch gradients.
// Returns NaN on degeneracy and reports it via `degenerate`.
double score_from_grads(const std::vector<Vector>& grads_i,
                        const std::vector<Vector>& grads_j, bool& degenerate) {
    degenerate = false;
    std::vector<double> unit_dot_j(grads_j.size());
    std::vector<double> unit_dot_i(grads_i.size());
    std::vector<double> norms_j(grads_j.size());
    std::vector<double> norms_i(grads_i.size());
    for (std::size_t c = 0; c < grads_j.size(); ++c) norms_j[c] = norm(grads_j[c]);
    for (std::size_t c = 0; c < grads_i.size(); ++c) norms_i[c] = norm(grads_i[c]);
    for (double nj : norms_j) {
        if (nj <= kDegenerateNorm) {
            degenerate = true;
            return std::numeric_limits<double>::quiet_NaN();
        }
    }
    for (double ni : norms_i) {
        if (ni <= kDegenerateNorm) {
            degenerate = true;
            return std::numeric_limits<double>::quiet_NaN();
        }
    }
    double total = 0.0;
    for (std::size_t b = 0; b < grads_i.size(); ++b) {
        double num = 0.0;
        for (std::size_t c = 0; c < grads_j.size(); ++c) {
            num += dot(grads_j[c], grads_i[b]) / norms_j[c];
        }
        num /= static_cast<double>(grads_j.size());
        double den = 0.0;
        for (std::size_t c = 0; c < grads_i.size(); ++c) {
            den += dot(grads_i[c], grads_i[b]) / norms_i[c];
        }
        den /= static_cast<double>(grads_i.size());
        if (std::abs(den) < kDegenerateNorm) {
            degenerate = true;
            return std::numeric_limits<double>::quiet_NaN();
        }
        total += num / den;
    }
    return total / static_cast<double>(grads_i.size());
}

std::vector<std::vector<Vector>> all_task_grads(
    const Model& model, const ParamGroup& group,
    const std::vector<std::vector<Batch>>& batches_per_task) {
    std::vector<std::vector<Vector>> grads(batches_per_task.size());
    for (std::size_t t = 0; t < batches_per_task.size(); ++t) {
        if (batches_per_task[t].empty()) {
            throw ArgumentError("interference: need at least one batch per task");
        }
        for (const Batch& b : batches_per_task[t]) {
            grads[t].push_back(grad_for_task(model, b, group));
        }
    }
    return grads;
}

}  // namespace

double interference_score(const Model& model, std::size_t task_i, std::size_t task_j,
                          const ParamGroup& group,
                          const std::vector<std::vector<Batch>>& batches_per_task,
                          double lambda) {
    (void)lambda;  // cancels in the ratio; recorded in exported metadata only
    auto grads = all_task_grads(model, group, batches_per_task);
    bool degenerate = false;
    return score_from_grads(grads[task_i], grads[task_j], degenerate);
}

InterferenceMatrix build_matrix(const Model& model,
                                const std::vector<std::string>& task_ids,
                                const ParamGroup& group,
                                const std::vector<std::vector<Batch>>& batches_per_task,
                                double lambda) {
    (void)lambda;
    const std::size_t T = task_ids.size();
    if (T < 2) throw ArgumentError("build_matrix: need at least two tasks");
    if (batches_per_task.size() != T) {
        throw ArgumentError("build_matrix: batches_per_task size mismatch");
    }
    auto grads = all_task_grads(model, group, batches_per_task);
    InterferenceMatrix out;
    out.task_ids = task_ids;
    out.group = group.selector;
    out.num_batch_pairs = batches_per_task[0].size() * batches_per_task[0].size();
    out.scores = Matrix(T, T);
    for (std::size_t i = 0; i < T; ++i) {
        for (std::size_t j = 0; j < T; ++j) {
            bool degenerate = false;
            out.scores.at(i, j) = score_from_grads(grads[i], grads[j], degenerate);
            if (degenerate) out.degenerate.emplace_back(i, j);
        }
    }
    return out;
}

InterferenceMatrix build_layer_averaged_matrix(
    const Model& model, const std::vector<std::string>& task_ids, GroupSelector selector,
    const std::vector<std::vector<Batch>>& batches_per_task, double lambda) {
    InterferenceMatrix avg;
    const std::size_t L = model.layers.size();
    for (std::size_t l = 0; l < L; ++l) {
        ParamGroup group{selector, {l}};
        InterferenceMatrix m = build_matrix(model, task_ids, group, batches_per_task, lambda);
        if (l == 0) {
            avg = std::move(m);
        } else {
            for (std::size_t k = 0; k < avg.scores.data.size(); ++k) {
                avg.scores.data[k] += m.scores.data[k];
            }
            avg.degenerate.insert(avg.degenerate.end(), m.degenerate.begin(),
                                  m.degenerate.end());
        }
    }
    for (double& x : avg.scores.data) x /= static_cast<double>(L);
    return avg;
}

void export_matrix(const InterferenceMatrix& matrix, const std::string& path,
                   double lambda, std::uint64_t seed) {
    std::ofstream os(path);
    if (!os) throw IoError("export_matrix: cannot write " + path);
    os << "task";
    for (const auto& id : matrix.task_ids) os << "," << id;
    os << "\n";
    for (std::size_t i = 0; i < matrix.task_ids.size(); ++i) {
        os << matrix.task_ids[i];
        for (std::size_t j = 0; j < matrix.task_ids.size(); ++j) {
            os << "," << fmt_double(matrix.scores.at(i, j));
        }
        os << "\n";
    }
    if (!os) throw IoError("export_matrix: write failed for " + path);

    std::ofstream meta(path + ".meta");
    if (!meta) throw IoError("export_matrix: cannot write " + path + ".meta");
    meta << "group: " << group_name(matrix.group) << "\n"
         << "lambda: " << fmt_double(lambda) << "\n"
         << "seed: " << seed << "\n"
         << "num_batch_pairs: " << matrix.num_batch_pairs << "\n"
         << "degenerate_entries: " << matrix.degenerate.size() << "\n"
         << "timestamp: "
         << std::chrono::duration_cast<std::chrono::seconds>(
                std::chrono::system_clock::now().time_since_epoch())
                .count()
         << "\n";
}

InterferenceMatrix import_matrix(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("import_matrix: cannot read " + path);
    std::string line;
    if (!std::getline(is, line)) throw IoError("import_matrix: empty file");
    InterferenceMatrix out;
    {
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');  // "task"
        while (std::getline(ss, cell, ',')) out.task_ids.push_back(cell);
    }
    const std::size_t T = out.task_ids.size();
    out.scores = Matrix(T, T);
    for (std::size_t i = 0; i < T; ++i) {
        if (!std::getline(is, line)) throw IoError("import_matrix: truncated file");
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');  // row label
        for (std::size_t j = 0; j < T; ++j) {
            if (!std::getline(ss, cell, ',')) throw IoError("import_matrix: short row");
            out.scores.at(i, j) = std::stod(cell);
        }
    }
    return out;
}

double mean_negative_entries(const InterferenceMatrix& matrix) {
    double total = 0.0;
    std::size_t count = 0;
    for (double x : matrix.scores.data) {
        if (std::isnan(x)) continue;
        if (x < 0.0) {
            total += x;
            ++count;
        }
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

}  // namespace mixlora
