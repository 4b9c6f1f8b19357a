#include "mixlora/grad.hpp"

#include <cmath>

#include "mixlora/errors.hpp"

namespace mixlora {

GradBuffer GradBuffer::zeros_like(const AdaptedLinear& layer) {
    GradBuffer g;
    const auto& c = layer.config;
    g.a_factors.assign(c.num_factors, Vector(c.d_in));
    g.b_factors.assign(c.num_factors, Vector(c.d_out));
    g.w_a = Matrix(c.num_factors, c.d_in);
    g.w_b_ifs = Matrix(c.num_factors, c.d_out);
    if (c.cfs_enabled) g.w_ab.assign(c.rank, Matrix(c.d_in, c.num_factors));
    if (layer.routers.task_table_a) g.task_table_a = Matrix(c.num_tasks, c.d_in);
    if (layer.routers.task_table_b) g.task_table_b = Matrix(c.num_tasks, c.d_out);
    return g;
}

void GradBuffer::zero() {
    auto clear_vecs = [](std::vector<Vector>& vs) {
        for (auto& v : vs) std::fill(v.data.begin(), v.data.end(), 0.0);
    };
    auto clear_mat = [](Matrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); };
    clear_vecs(a_factors);
    clear_vecs(b_factors);
    clear_mat(w_a);
    clear_mat(w_b_ifs);
    for (auto& m : w_ab) clear_mat(m);
    if (task_table_a) clear_mat(*task_table_a);
    if (task_table_b) clear_mat(*task_table_b);
}

namespace {

// dl for l = softmax^-1: given p = softmax(l) and dp, dl = p .* (dp - <dp, p>)
Vector softmax_backward(const Vector& p, const Vector& dp) {
    double s = dot(dp, p);
    Vector dl(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) dl[i] = p[i] * (dp[i] - s);
    return dl;
}

// Backward through g[i] = scores[idx[i]] / sum(scores[idx]). Returns the
// gradient w.r.t. the full score vector (zero off the selected set).
Vector renorm_gate_backward(const Vector& scores, const std::vector<std::size_t>& idx,
                            const std::vector<double>& gates,
                            const std::vector<double>& dgates) {
    double z = 0.0;
    for (std::size_t i : idx) z += scores[i];
    double acc = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) acc += dgates[k] * gates[k];
    Vector ds(scores.size());
    for (std::size_t k = 0; k < idx.size(); ++k) ds[idx[k]] = (dgates[k] - acc) / z;
    return ds;
}

}  // namespace

Matrix backward(const AdaptedLinear& layer, const ForwardTrace& trace,
                const Matrix& upstream, GradBuffer& grads) {
    if (trace.h.rows == 0) throw StateError("backward: no recorded forward trace");
    const auto& cfg = layer.config;
    if (upstream.rows != trace.h.rows || upstream.cols != cfg.d_out) {
        throw ShapeError("backward: upstream shape mismatch");
    }
    const double alpha = cfg.effective_alpha();
    const bool soft = cfg.gating_mode == GatingMode::soft;
    const double seq = static_cast<double>(trace.h.rows);

    Matrix dh = matmul(upstream, layer.base_w);
    Matrix dh_adapt = matmul(upstream, trace.delta_w);
    for (std::size_t i = 0; i < dh.data.size(); ++i) dh.data[i] += alpha * dh_adapt.data[i];

    Matrix d_delta = matmul(transpose(upstream), trace.h);
    for (double& x : d_delta.data) x *= alpha;
    Matrix d_bmat = matmul(d_delta, transpose(trace.a_mat));
    Matrix d_amat = matmul(transpose(trace.b_mat), d_delta);

    const Selection& sel = trace.sel;

    // B side: factor grads plus (soft mode) gate grads
    std::vector<double> dgates_b(cfg.rank, 0.0);
    for (std::size_t i = 0; i < cfg.rank; ++i) {
        const std::size_t e = sel.indices_b[i];
        const double gate = soft ? sel.gates_b[i] : 1.0;
        Vector& db = grads.b_factors[e];
        double dg = 0.0;
        for (std::size_t j = 0; j < cfg.d_out; ++j) {
            db[j] += gate * d_bmat.at(j, i);
            dg += layer.pool.b_factors[e][j] * d_bmat.at(j, i);
        }
        dgates_b[i] = dg;
    }

    Matrix d_amat_total = d_amat;

    if (soft && cfg.routing_mode != RoutingMode::random) {
        Vector dfused = renorm_gate_backward(trace.fused, sel.indices_b, sel.gates_b, dgates_b);

        // IFS branch
        Vector dl_b = softmax_backward(trace.p_ifs, dfused);
        // d W_B_IFS += dl_b (x) pooled_b ; d pooled_b = W_B_IFS^T dl_b
        for (std::size_t e = 0; e < cfg.num_factors; ++e) {
            for (std::size_t j = 0; j < cfg.d_out; ++j) {
                grads.w_b_ifs.at(e, j) += dl_b[e] * trace.pooled_b[j];
            }
        }
        Vector dpooled_b = vecmat(dl_b, layer.routers.w_b_ifs);
        if (cfg.routing_mode == RoutingMode::instance) {
            // pooled_b = mean over rows of h W^T
            Vector drow = vecmat(dpooled_b, layer.base_w);
            for (std::size_t t = 0; t < trace.h.rows; ++t) {
                for (std::size_t c = 0; c < cfg.d_in; ++c) {
                    dh.at(t, c) += drow[c] / seq;
                }
            }
        } else {  // task
            for (std::size_t j = 0; j < cfg.d_out; ++j) {
                grads.task_table_b->at(*trace.task_id, j) += dpooled_b[j];
            }
        }

        // CFS branch
        if (cfg.cfs_enabled) {
            Vector dr = softmax_backward(trace.cfs_q, dfused);
            for (std::size_t i = 0; i < cfg.rank; ++i) {
                Vector dt = softmax_backward(trace.cfs_terms[i], dr);
                Vector a_row = trace.a_mat.row(i);
                for (std::size_t c = 0; c < cfg.d_in; ++c) {
                    for (std::size_t e = 0; e < cfg.num_factors; ++e) {
                        grads.w_ab[i].at(c, e) += a_row[c] * dt[e];
                    }
                }
                Vector da_row = matvec(layer.routers.w_ab[i], dt);
                for (std::size_t c = 0; c < cfg.d_in; ++c) {
                    d_amat_total.at(i, c) += da_row[c];
                }
            }
        }
    }

    // A side: factor grads plus (soft mode) gate grads
    std::vector<double> dgates_a(cfg.rank, 0.0);
    for (std::size_t i = 0; i < cfg.rank; ++i) {
        const std::size_t e = sel.indices_a[i];
        const double gate = soft ? sel.gates_a[i] : 1.0;
        Vector& da = grads.a_factors[e];
        double dg = 0.0;
        for (std::size_t c = 0; c < cfg.d_in; ++c) {
            da[c] += gate * d_amat_total.at(i, c);
            dg += layer.pool.a_factors[e][c] * d_amat_total.at(i, c);
        }
        dgates_a[i] = dg;
    }

    if (soft && cfg.routing_mode != RoutingMode::random) {
        Vector dp_a = renorm_gate_backward(trace.p_a, sel.indices_a, sel.gates_a, dgates_a);
        Vector dl_a = softmax_backward(trace.p_a, dp_a);
        for (std::size_t e = 0; e < cfg.num_factors; ++e) {
            for (std::size_t c = 0; c < cfg.d_in; ++c) {
                grads.w_a.at(e, c) += dl_a[e] * trace.pooled_a[c];
            }
        }
        Vector dpooled_a = vecmat(dl_a, layer.routers.w_a);
        if (cfg.routing_mode == RoutingMode::instance) {
            for (std::size_t t = 0; t < trace.h.rows; ++t) {
                for (std::size_t c = 0; c < cfg.d_in; ++c) {
                    dh.at(t, c) += dpooled_a[c] / seq;
                }
            }
        } else {  // task
            for (std::size_t c = 0; c < cfg.d_in; ++c) {
                grads.task_table_a->at(*trace.task_id, c) += dpooled_a[c];
            }
        }
    }

    return dh;
}

Vector finite_diff(const std::function<double(const Vector&)>& fn, const Vector& theta,
                   double eps) {
    Vector grad(theta.size());
    Vector x = theta;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        x[i] = theta[i] + eps;
        double plus = fn(x);
        x[i] = theta[i] - eps;
        double minus = fn(x);
        x[i] = theta[i];
        if (!std::isfinite(plus) || !std::isfinite(minus)) {
            throw NumericError("finite_diff: non-finite evaluation");
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    return grad;
}

double loss_value_and_grad(const LossSpec& spec, const Matrix& pred,
                           const Matrix& target, Matrix& dpred) {
    dpred = Matrix(pred.rows, pred.cols);
    if (spec.kind == LossKind::mean_squared_error) {
        if (pred.rows != target.rows || pred.cols != target.cols) {
            throw ShapeError("mse: shape mismatch");
        }
        const double n = static_cast<double>(pred.data.size());
        double loss = 0.0;
        for (std::size_t i = 0; i < pred.data.size(); ++i) {
            double d = pred.data[i] - target.data[i];
            loss += d * d;
            dpred.data[i] = 2.0 * d / n;
        }
        return loss / n;
    }
    // softmax cross-entropy; target[i][0] holds the class index
    if (target.rows != pred.rows || target.cols != 1) {
        throw ShapeError("cross_entropy: target must be rows x 1 of class indices");
    }
    const double n = static_cast<double>(pred.rows);
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.rows; ++i) {
        Vector p = softmax(pred.row(i));
        auto cls = static_cast<std::size_t>(target.at(i, 0));
        if (cls >= pred.cols) throw ArgumentError("cross_entropy: class index out of range");
        loss += -std::log(p[cls]);
        for (std::size_t j = 0; j < pred.cols; ++j) {
            dpred.at(i, j) = (p[j] - (j == cls ? 1.0 : 0.0)) / n;
        }
    }
    return loss / n;
}

double loss_value(const LossSpec& spec, const Matrix& pred, const Matrix& target) {
    Matrix scratch;
    return loss_value_and_grad(spec, pred, target, scratch);
}

namespace {

void append(ParamViews& views, Matrix& m) { views.emplace_back(m.data); }
void append(ParamViews& views, Vector& v) { views.emplace_back(v.data); }

}  // namespace

ParamViews trainable_params(AdaptedLinear& layer) {
    ParamViews views;
    for (auto& v : layer.pool.a_factors) append(views, v);
    for (auto& v : layer.pool.b_factors) append(views, v);
    append(views, layer.routers.w_a);
    append(views, layer.routers.w_b_ifs);
    for (auto& m : layer.routers.w_ab) append(views, m);
    if (layer.routers.task_table_a) append(views, *layer.routers.task_table_a);
    if (layer.routers.task_table_b) append(views, *layer.routers.task_table_b);
    return views;
}

ParamViews grad_views(GradBuffer& grads) {
    ParamViews views;
    for (auto& v : grads.a_factors) append(views, v);
    for (auto& v : grads.b_factors) append(views, v);
    append(views, grads.w_a);
    append(views, grads.w_b_ifs);
    for (auto& m : grads.w_ab) append(views, m);
    if (grads.task_table_a) append(views, *grads.task_table_a);
    if (grads.task_table_b) append(views, *grads.task_table_b);
    return views;
}

ParamViews trainable_params(LoraLinear& layer) {
    ParamViews views;
    append(views, layer.a);
    append(views, layer.b);
    return views;
}

ParamViews grad_views(LoraGrads& grads) {
    ParamViews views;
    append(views, grads.a);
    append(views, grads.b);
    return views;
}

void sgd_step(const ParamViews& params, const ParamViews& grads, double lr) {
    if (params.size() != grads.size()) throw ShapeError("sgd_step: tensor count mismatch");
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (params[t].size() != grads[t].size()) throw ShapeError("sgd_step: shape mismatch");
        for (std::size_t i = 0; i < params[t].size(); ++i) {
            params[t][i] -= lr * grads[t][i];
        }
    }
}

AdamState AdamState::zeros_like(const ParamViews& params) {
    AdamState s;
    for (const auto& p : params) {
        s.m.emplace_back(p.size(), 0.0);
        s.v.emplace_back(p.size(), 0.0);
    }
    return s;
}

void adam_step(AdamState& state, const ParamViews& params, const ParamViews& grads,
               double lr, double beta1, double beta2, double eps) {
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw ShapeError("adam_step: tensor count mismatch");
    }
    state.step += 1;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (params[t].size() != grads[t].size()) throw ShapeError("adam_step: shape mismatch");
        for (std::size_t i = 0; i < params[t].size(); ++i) {
            double g = grads[t][i];
            state.m[t][i] = beta1 * state.m[t][i] + (1.0 - beta1) * g;
            state.v[t][i] = beta2 * state.v[t][i] + (1.0 - beta2) * g * g;
            double mhat = state.m[t][i] / c1;
            double vhat = state.v[t][i] / c2;
            params[t][i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

}  // namespace mixlora
