#include "mixlora/lora.hpp"

#include <cmath>

#include "mixlora/errors.hpp"

namespace mixlora {

double LoraConfig::effective_std() const {
    return init_std > 0.0 ? init_std : 1.0 / std::sqrt(static_cast<double>(d_in));
}

void LoraConfig::validate() const {
    if (d_in < 1 || d_out < 1) throw ConfigError("d_in and d_out must be >= 1");
    if (rank < 1) throw ConfigError("rank must be >= 1");
    if (alpha < 0.0) throw ConfigError("alpha must be positive");
    if (init_std < 0.0) throw ConfigError("init_std must be positive");
}

void LoraGrads::zero() {
    for (double& x : a.data) x = 0.0;
    for (double& x : b.data) x = 0.0;
}

LoraLinear LoraLinear::init(const LoraConfig& config, Rng& rng, const Matrix* base) {
    config.validate();
    LoraLinear layer;
    layer.config = config;
    const double std = config.effective_std();
    if (base != nullptr) {
        if (base->rows != config.d_out || base->cols != config.d_in) {
            throw ShapeError("init: base weight shape mismatch");
        }
        layer.base_w = *base;
    } else {
        layer.base_w = Matrix(config.d_out, config.d_in);
        for (double& x : layer.base_w.data) x = rng.gaussian(0.0, std);
    }
    layer.a = Matrix(config.rank, config.d_in);
    for (double& x : layer.a.data) x = rng.gaussian(0.0, std);
    layer.b = Matrix(config.d_out, config.rank);
    return layer;
}

LoraForwardResult LoraLinear::forward(const Matrix& h) const {
    if (h.cols != config.d_in) throw ShapeError("forward: input width mismatch");
    if (h.rows == 0) throw ShapeError("forward: empty batch");
    Matrix base_out = matmul(h, transpose(base_w));
    Matrix delta_w = matmul(b, a);
    Matrix adapt = matmul(h, transpose(delta_w));
    const double alpha = config.effective_alpha();
    Matrix out = base_out;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += alpha * adapt.data[i];
    return LoraForwardResult{std::move(out), LoraTrace{h, std::move(delta_w)}};
}

Matrix LoraLinear::backward(const LoraTrace& trace, const Matrix& upstream,
                            LoraGrads& grads) const {
    if (upstream.rows != trace.h.rows || upstream.cols != config.d_out) {
        throw ShapeError("backward: upstream shape mismatch");
    }
    const double alpha = config.effective_alpha();
    Matrix dh = matmul(upstream, base_w);
    Matrix dh_adapt = matmul(upstream, trace.delta_w);
    for (std::size_t i = 0; i < dh.data.size(); ++i) dh.data[i] += alpha * dh_adapt.data[i];

    Matrix d_delta = matmul(transpose(upstream), trace.h);
    for (double& x : d_delta.data) x *= alpha;
    add_scaled(grads.b, matmul(d_delta, transpose(a)), 1.0);
    add_scaled(grads.a, matmul(transpose(b), d_delta), 1.0);
    return dh;
}

LoraGrads LoraLinear::zero_grads() const {
    return LoraGrads{Matrix(config.rank, config.d_in), Matrix(config.d_out, config.rank)};
}

}  // namespace mixlora
