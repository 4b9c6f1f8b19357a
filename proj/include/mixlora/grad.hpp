#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mixlora/adapter.hpp"
#include "mixlora/lora.hpp"

namespace mixlora {

// Shape-matched accumulators for every trainable tensor of one adapter.
// The frozen base weight has no accumulator.
struct GradBuffer {
    std::vector<Vector> a_factors;
    std::vector<Vector> b_factors;
    Matrix w_a;
    Matrix w_b_ifs;
    std::vector<Matrix> w_ab;
    std::optional<Matrix> task_table_a;
    std::optional<Matrix> task_table_b;

    static GradBuffer zeros_like(const AdaptedLinear& layer);
    void zero();
};

// Gradient of <upstream, output> w.r.t. every trainable parameter, with the
// top-k index choice treated as piecewise constant. Accumulates into `grads`
// and returns the input gradient.
Matrix backward(const AdaptedLinear& layer, const ForwardTrace& trace,
                const Matrix& upstream, GradBuffer& grads);

// Central finite differences, (fn(x+eps e_i) - fn(x-eps e_i)) / (2 eps).
Vector finite_diff(const std::function<double(const Vector&)>& fn, const Vector& theta,
                   double eps = 1e-5);

// ---- losses ----

enum class LossKind { mean_squared_error, softmax_cross_entropy };

struct LossSpec {
    LossKind kind = LossKind::mean_squared_error;
};

// MSE: mean over all entries of (pred - target)^2.
// Cross-entropy: rows of `pred` are logits, target[i][0] holds the class
// index; mean over rows. Returns the loss and writes d loss / d pred.
double loss_value_and_grad(const LossSpec& spec, const Matrix& pred,
                           const Matrix& target, Matrix& dpred);
double loss_value(const LossSpec& spec, const Matrix& pred, const Matrix& target);

// ---- optimizers ----

using ParamViews = std::vector<std::span<double>>;

// Fixed parameter order: a_factors, b_factors, w_a, w_b_ifs, w_ab, task tables.
ParamViews trainable_params(AdaptedLinear& layer);
ParamViews grad_views(GradBuffer& grads);
ParamViews trainable_params(LoraLinear& layer);
ParamViews grad_views(LoraGrads& grads);

void sgd_step(const ParamViews& params, const ParamViews& grads, double lr);

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step = 0;

    static AdamState zeros_like(const ParamViews& params);
};

void adam_step(AdamState& state, const ParamViews& params, const ParamViews& grads,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

}  // namespace mixlora
