#pragma once

#include <string>

#include "mixlora/adapter.hpp"
#include "mixlora/grad.hpp"
#include "mixlora/lora.hpp"

namespace mixlora {

// Checkpoints are a human-readable key-value header followed by raw
// little-endian 64-bit floats in declared order: base_w, a_factors,
// b_factors, w_a, w_b_ifs, w_ab (if present), task tables (if present).
// Optimizer state, when given, is appended (first-moment then second-moment
// buffers, in trainable-parameter order). Round-trips are bit-exact.

void save_checkpoint(const AdaptedLinear& layer, const std::string& path,
                     const AdamState* adam = nullptr);
AdaptedLinear load_mixlora_checkpoint(const std::string& path, AdamState* adam = nullptr);

void save_checkpoint(const LoraLinear& layer, const std::string& path,
                     const AdamState* adam = nullptr);
LoraLinear load_lora_checkpoint(const std::string& path, AdamState* adam = nullptr);

// "mixlora" or "lora"
std::string checkpoint_model_kind(const std::string& path);

}  // namespace mixlora
