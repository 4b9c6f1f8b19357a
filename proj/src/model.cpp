#include "mixlora/model.hpp"

#include <cmath>

#include "mixlora/errors.hpp"

namespace mixlora {

bool Model::is_mixlora() const {
    return !layers.empty() && std::holds_alternative<AdaptedLinear>(layers.front());
}

Model::Fwd Model::forward(const Matrix& h, std::optional<std::size_t> task_id,
                          Rng* rng) const {
    if (layers.empty()) throw StateError("model: no layers");
    Fwd fwd;
    Matrix x = h;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        Matrix out;
        if (const auto* mix = std::get_if<AdaptedLinear>(&layers[i])) {
            ForwardResult r = mix->forward(x, task_id, rng);
            fwd.selections.push_back(r.sel);
            fwd.traces.emplace_back(std::move(r.trace));
            out = std::move(r.output);
        } else {
            LoraForwardResult r = std::get<LoraLinear>(layers[i]).forward(x);
            fwd.traces.emplace_back(std::move(r.trace));
            out = std::move(r.output);
        }
        if (i + 1 < layers.size()) {
            for (double& v : out.data) v = std::tanh(v);
        }
        x = std::move(out);
    }
    fwd.output = std::move(x);
    return fwd;
}

std::vector<LayerGrads> Model::zero_grads() const {
    std::vector<LayerGrads> grads;
    grads.reserve(layers.size());
    for (const auto& layer : layers) {
        if (const auto* mix = std::get_if<AdaptedLinear>(&layer)) {
            grads.emplace_back(GradBuffer::zeros_like(*mix));
        } else {
            grads.emplace_back(std::get<LoraLinear>(layer).zero_grads());
        }
    }
    return grads;
}

Matrix Model::backward(const Fwd& fwd, const Matrix& upstream,
                       std::vector<LayerGrads>& grads) const {
    if (fwd.traces.size() != layers.size() || grads.size() != layers.size()) {
        throw StateError("model backward: trace/grads do not match layers");
    }
    Matrix up = upstream;
    for (std::size_t i = layers.size(); i-- > 0;) {
        if (i + 1 < layers.size()) {
            // up is w.r.t. tanh(out); the next layer's trace holds tanh(out) as its input
            const Matrix* act = nullptr;
            if (const auto* t = std::get_if<ForwardTrace>(&fwd.traces[i + 1])) {
                act = &t->h;
            } else {
                act = &std::get<LoraTrace>(fwd.traces[i + 1]).h;
            }
            for (std::size_t k = 0; k < up.data.size(); ++k) {
                up.data[k] *= 1.0 - act->data[k] * act->data[k];
            }
        }
        if (const auto* mix = std::get_if<AdaptedLinear>(&layers[i])) {
            up = mixlora::backward(*mix, std::get<ForwardTrace>(fwd.traces[i]), up,
                                   std::get<GradBuffer>(grads[i]));
        } else {
            up = std::get<LoraLinear>(layers[i])
                     .backward(std::get<LoraTrace>(fwd.traces[i]), up,
                               std::get<LoraGrads>(grads[i]));
        }
    }
    return up;
}

double Model::batch_loss_and_grads(const Batch& batch, std::vector<LayerGrads>& grads,
                                   std::optional<std::size_t> task_id, Rng* rng) const {
    if (batch.instances.empty()) throw ArgumentError("batch_loss: empty batch");
    const double n = static_cast<double>(batch.instances.size());
    double total = 0.0;
    for (const Instance& inst : batch.instances) {
        Fwd fwd = forward(inst.h, task_id, rng);
        Matrix dpred;
        total += loss_value_and_grad(loss, fwd.output, inst.target, dpred);
        for (double& v : dpred.data) v /= n;
        backward(fwd, dpred, grads);
    }
    return total / n;
}

double Model::batch_loss(const Batch& batch, std::optional<std::size_t> task_id,
                         Rng* rng) const {
    if (batch.instances.empty()) throw ArgumentError("batch_loss: empty batch");
    double total = 0.0;
    for (const Instance& inst : batch.instances) {
        Fwd fwd = forward(inst.h, task_id, rng);
        total += loss_value(loss, fwd.output, inst.target);
    }
    return total / static_cast<double>(batch.instances.size());
}

ParamViews Model::params() {
    ParamViews views;
    for (auto& layer : layers) {
        ParamViews part;
        if (auto* mix = std::get_if<AdaptedLinear>(&layer)) {
            part = trainable_params(*mix);
        } else {
            part = trainable_params(std::get<LoraLinear>(layer));
        }
        views.insert(views.end(), part.begin(), part.end());
    }
    return views;
}

ParamViews Model::grad_params(std::vector<LayerGrads>& grads) {
    ParamViews views;
    for (auto& g : grads) {
        ParamViews part;
        if (auto* mix = std::get_if<GradBuffer>(&g)) {
            part = grad_views(*mix);
        } else {
            part = grad_views(std::get<LoraGrads>(g));
        }
        views.insert(views.end(), part.begin(), part.end());
    }
    return views;
}

}  // namespace mixlora
