#pragma once

#include <cstdint>

#include "mixlora/linalg.hpp"
#include "mixlora/rng.hpp"

namespace mixlora {

struct LoraConfig {
    std::size_t d_in = 16;
    std::size_t d_out = 16;
    std::size_t rank = 2;
    double alpha = 0.0;     // 0 -> 2*rank
    double init_std = 0.0;  // 0 -> 1/sqrt(d_in)
    std::uint64_t seed = 0;

    double effective_alpha() const { return alpha > 0.0 ? alpha : 2.0 * static_cast<double>(rank); }
    double effective_std() const;
    void validate() const;
};

struct LoraTrace {
    Matrix h;
    Matrix delta_w;
};

struct LoraForwardResult {
    Matrix output;
    LoraTrace trace;
};

struct LoraGrads {
    Matrix a;  // rank x d_in
    Matrix b;  // d_out x rank
    void zero();
};

// Plain LoRA layer: y = h W^T + alpha * h (BA)^T with A Gaussian, B zero at
// init. Kept deliberately parallel to AdaptedLinear so that the E = rank,
// hard-gating, CFS-off configuration reproduces it bit for bit.
class LoraLinear {
  public:
    Matrix base_w;  // frozen
    Matrix a;       // rank x d_in
    Matrix b;       // d_out x rank
    LoraConfig config;

    static LoraLinear init(const LoraConfig& config, Rng& rng, const Matrix* base = nullptr);

    LoraForwardResult forward(const Matrix& h) const;
    // Accumulates into grads; returns the input gradient.
    Matrix backward(const LoraTrace& trace, const Matrix& upstream, LoraGrads& grads) const;

    LoraGrads zero_grads() const;
};

}  // namespace mixlora
