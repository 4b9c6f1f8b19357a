#include "mixlora/adapter.hpp"

#include <algorithm>
#include <cmath>

#include "mixlora/errors.hpp"

namespace mixlora {

double MixLoraConfig::effective_std() const {
    return init_std > 0.0 ? init_std : 1.0 / std::sqrt(static_cast<double>(d_in));
}

void MixLoraConfig::validate() const {
    if (d_in < 1 || d_out < 1) throw ConfigError("d_in and d_out must be >= 1");
    if (num_factors < 1) throw ConfigError("num_factors must be >= 1");
    if (rank < 1) throw ConfigError("rank must be >= 1");
    if (rank > num_factors) throw ConfigError("rank must not exceed num_factors");
    if (alpha < 0.0) throw ConfigError("alpha must be positive");
    if (init_std < 0.0) throw ConfigError("init_std must be positive");
    if (routing_mode == RoutingMode::task && num_tasks == 0) {
        throw ConfigError("task routing requires num_tasks > 0");
    }
}

namespace {

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double std, Rng& rng) {
    Matrix m(rows, cols);
    for (double& x : m.data) x = rng.gaussian(0.0, std);
    return m;
}

Vector gaussian_vector(std::size_t n, double std, Rng& rng) {
    Vector v(n);
    for (double& x : v.data) x = rng.gaussian(0.0, std);
    return v;
}

}  // namespace

AdaptedLinear AdaptedLinear::init(const MixLoraConfig& config, Rng& rng,
                                  const Matrix* base) {
    config.validate();
    AdaptedLinear layer;
    layer.config = config;
    // random routing has no router probabilities, so gates are forced hard
    if (layer.config.routing_mode == RoutingMode::random) {
        layer.config.gating_mode = GatingMode::hard;
    }
    const double std = config.effective_std();
    if (base != nullptr) {
        if (base->rows != config.d_out || base->cols != config.d_in) {
            throw ShapeError("init: base weight shape mismatch");
        }
        layer.base_w = *base;
    } else {
        layer.base_w = gaussian_matrix(config.d_out, config.d_in, std, rng);
    }
    const std::size_t E = config.num_factors;
    layer.pool.a_factors.reserve(E);
    layer.pool.b_factors.reserve(E);
    for (std::size_t e = 0; e < E; ++e) {
        layer.pool.a_factors.push_back(gaussian_vector(config.d_in, std, rng));
    }
    for (std::size_t e = 0; e < E; ++e) {
        layer.pool.b_factors.push_back(Vector(config.d_out));
    }
    layer.routers.w_a = gaussian_matrix(E, config.d_in, std, rng);
    layer.routers.w_b_ifs = gaussian_matrix(E, config.d_out, std, rng);
    if (config.cfs_enabled) {
        layer.routers.w_ab.reserve(config.rank);
        for (std::size_t i = 0; i < config.rank; ++i) {
            layer.routers.w_ab.push_back(gaussian_matrix(config.d_in, E, std, rng));
        }
    }
    if (config.routing_mode == RoutingMode::task) {
        layer.routers.task_table_a = gaussian_matrix(config.num_tasks, config.d_in, std, rng);
        layer.routers.task_table_b = gaussian_matrix(config.num_tasks, config.d_out, std, rng);
    }
    return layer;
}

Vector AdaptedLinear::route_task_a(std::size_t task_id) const {
    if (!routers.task_table_a) throw StateError("route_task: task routing disabled");
    if (task_id >= config.num_tasks) throw ArgumentError("route_task: unknown task id");
    return routers.task_table_a->row(task_id);
}

Vector AdaptedLinear::route_task_b(std::size_t task_id) const {
    if (!routers.task_table_b) throw StateError("route_task: task routing disabled");
    if (task_id >= config.num_tasks) throw ArgumentError("route_task: unknown task id");
    return routers.task_table_b->row(task_id);
}

std::vector<double> AdaptedLinear::gates_from(
    const Vector& scores, const std::vector<std::size_t>& indices) const {
    std::vector<double> gates(indices.size(), 1.0);
    if (config.gating_mode == GatingMode::soft) {
        double z = 0.0;
        for (std::size_t i : indices) z += scores[i];
        for (std::size_t k = 0; k < indices.size(); ++k) gates[k] = scores[indices[k]] / z;
    }
    return gates;
}

SideSelection AdaptedLinear::select_a(const Vector& pooled_a) const {
    SideSelection sel;
    sel.probs = softmax(matvec(routers.w_a, pooled_a));
    sel.indices = top_k(sel.probs, config.rank);
    sel.gates = gates_from(sel.probs, sel.indices);
    return sel;
}

Matrix AdaptedLinear::assemble_a(const Selection& sel) const {
    Matrix a(config.rank, config.d_in);
    for (std::size_t i = 0; i < config.rank; ++i) {
        const std::size_t e = sel.indices_a[i];
        if (e >= config.num_factors) throw StateError("assemble_a: index out of range");
        const Vector& factor = pool.a_factors[e];
        if (config.gating_mode == GatingMode::hard) {
            a.set_row(i, factor);
        } else {
            for (std::size_t j = 0; j < config.d_in; ++j) {
                a.at(i, j) = sel.gates_a[i] * factor[j];
            }
        }
    }
    return a;
}

Vector AdaptedLinear::route_cfs(const Matrix& a_mat) const {
    if (!config.cfs_enabled) throw StateError("route_cfs: CFS disabled");
    Vector r(config.num_factors);
    for (std::size_t i = 0; i < config.rank; ++i) {
        Vector term = softmax(vecmat(a_mat.row(i), routers.w_ab[i]));
        for (std::size_t e = 0; e < config.num_factors; ++e) r[e] += term[e];
    }
    return r;
}

BSideSelection AdaptedLinear::select_b(const Vector& pooled_b,
                                       const Vector& p_cfs_raw) const {
    BSideSelection sel;
    sel.p_ifs = softmax(matvec(routers.w_b_ifs, pooled_b));
    sel.fused = sel.p_ifs;
    if (config.cfs_enabled) {
        sel.p_cfs_prob = softmax(p_cfs_raw);
        for (std::size_t e = 0; e < config.num_factors; ++e) {
            sel.fused[e] += sel.p_cfs_prob[e];
        }
    } else {
        sel.p_cfs_prob = Vector(config.num_factors);
    }
    sel.indices = top_k(sel.fused, config.rank);
    sel.gates = gates_from(sel.fused, sel.indices);
    return sel;
}

Matrix AdaptedLinear::assemble_b(const Selection& sel) const {
    Matrix b(config.d_out, config.rank);
    for (std::size_t i = 0; i < config.rank; ++i) {
        const std::size_t e = sel.indices_b[i];
        if (e >= config.num_factors) throw StateError("assemble_b: index out of range");
        const Vector& factor = pool.b_factors[e];
        const double gate = config.gating_mode == GatingMode::hard ? 1.0 : sel.gates_b[i];
        for (std::size_t j = 0; j < config.d_out; ++j) {
            b.at(j, i) = config.gating_mode == GatingMode::hard ? factor[j] : gate * factor[j];
        }
    }
    return b;
}

Matrix AdaptedLinear::assemble_delta_w(const Selection& sel) const {
    return matmul(assemble_b(sel), assemble_a(sel));
}

Selection AdaptedLinear::route_random(Rng& rng) const {
    const std::size_t E = config.num_factors;
    auto draw = [&]() {
        // partial Fisher-Yates over [0, E)
        std::vector<std::size_t> idx(E);
        for (std::size_t e = 0; e < E; ++e) idx[e] = e;
        for (std::size_t i = 0; i < config.rank; ++i) {
            std::size_t j = i + static_cast<std::size_t>(rng.below(E - i));
            std::swap(idx[i], idx[j]);
        }
        idx.resize(config.rank);
        std::sort(idx.begin(), idx.end());
        return idx;
    };
    Selection sel;
    sel.indices_a = draw();
    sel.indices_b = draw();
    sel.gates_a.assign(config.rank, 1.0);
    sel.gates_b.assign(config.rank, 1.0);
    sel.p_b_ifs = Vector(E, 1.0 / static_cast<double>(E));
    sel.p_b_cfs = Vector(E);
    return sel;
}

ForwardResult AdaptedLinear::forward(const Matrix& h,
                                     std::optional<std::size_t> task_id,
                                     Rng* rng) const {
    if (h.cols != config.d_in) throw ShapeError("forward: input width mismatch");
    if (h.rows == 0) throw ShapeError("forward: empty batch");

    ForwardTrace trace;
    trace.h = h;
    trace.task_id = task_id;

    Matrix base_out = matmul(h, transpose(base_w));

    switch (config.routing_mode) {
        case RoutingMode::instance:
            trace.pooled_a = route_ifs(h);
            trace.pooled_b = mean_pool(base_out);
            break;
        case RoutingMode::task:
            if (!task_id) throw ArgumentError("forward: task routing requires task_id");
            trace.pooled_a = route_task_a(*task_id);
            trace.pooled_b = route_task_b(*task_id);
            break;
        case RoutingMode::random:
            if (rng == nullptr) throw ArgumentError("forward: random routing requires rng");
            break;
    }

    Selection sel;
    if (config.routing_mode == RoutingMode::random) {
        sel = route_random(*rng);
        trace.a_mat = assemble_a(sel);
    } else {
        SideSelection a_side = select_a(trace.pooled_a);
        sel.indices_a = a_side.indices;
        sel.gates_a = a_side.gates;
        trace.p_a = a_side.probs;
        trace.a_mat = assemble_a(sel);

        Vector p_cfs_raw(config.num_factors);
        if (config.cfs_enabled) {
            for (std::size_t i = 0; i < config.rank; ++i) {
                trace.cfs_terms.push_back(
                    softmax(vecmat(trace.a_mat.row(i), routers.w_ab[i])));
                for (std::size_t e = 0; e < config.num_factors; ++e) {
                    p_cfs_raw[e] += trace.cfs_terms.back()[e];
                }
            }
        }
        BSideSelection b_side = select_b(trace.pooled_b, p_cfs_raw);
        sel.indices_b = b_side.indices;
        sel.gates_b = b_side.gates;
        sel.p_b_ifs = b_side.p_ifs;
        sel.p_b_cfs = p_cfs_raw;
        trace.p_ifs = b_side.p_ifs;
        trace.cfs_q = b_side.p_cfs_prob;
        trace.fused = b_side.fused;
    }

    trace.b_mat = assemble_b(sel);
    trace.delta_w = matmul(trace.b_mat, trace.a_mat);
    trace.sel = sel;

    Matrix adapt = matmul(h, transpose(trace.delta_w));
    const double alpha = config.effective_alpha();
    Matrix out = base_out;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += alpha * adapt.data[i];

    return ForwardResult{std::move(out), sel, std::move(trace)};
}

}  // namespace mixlora
