#pragma once

#include <optional>
#include <variant>
#include <vector>

#include "mixlora/adapter.hpp"
#include "mixlora/grad.hpp"
#include "mixlora/lora.hpp"

namespace mixlora {

// One instance: a token sequence and its per-token regression target (or a
// seq x 1 matrix of class indices under cross-entropy).
struct Instance {
    Matrix h;
    Matrix target;
};

struct Batch {
    std::vector<Instance> instances;
    std::size_t task_id = 0;
};

using Layer = std::variant<AdaptedLinear, LoraLinear>;
using LayerTrace = std::variant<ForwardTrace, LoraTrace>;
using LayerGrads = std::variant<GradBuffer, LoraGrads>;

// A stack of adapted linear layers with tanh between them (identity after the
// last). The mechanism under test is layer-local, so one layer is the default.
struct Model {
    std::vector<Layer> layers;
    LossSpec loss;

    bool is_mixlora() const;

    struct Fwd {
        Matrix output;
        std::vector<LayerTrace> traces;
        std::vector<Selection> selections;  // mixlora layers only, in layer order
    };

    Fwd forward(const Matrix& h, std::optional<std::size_t> task_id = std::nullopt,
                Rng* rng = nullptr) const;

    std::vector<LayerGrads> zero_grads() const;

    // Backprop of <upstream, output>; accumulates into grads, returns dh.
    Matrix backward(const Fwd& fwd, const Matrix& upstream,
                    std::vector<LayerGrads>& grads) const;

    // Mean loss over the batch; gradient of that mean accumulated into grads.
    double batch_loss_and_grads(const Batch& batch, std::vector<LayerGrads>& grads,
                                std::optional<std::size_t> task_id,
                                Rng* rng = nullptr) const;
    double batch_loss(const Batch& batch, std::optional<std::size_t> task_id,
                      Rng* rng = nullptr) const;

    ParamViews params();
    static ParamViews grad_params(std::vector<LayerGrads>& grads);
};

}  // namespace mixlora
