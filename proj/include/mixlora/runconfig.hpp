#pragma once

#include <string>

#include "mixlora/harness.hpp"

namespace mixlora {

struct InterferenceConfig {
    GroupSelector group = GroupSelector::all_adapter;
    double lambda = 0.1;
    std::size_t batches_per_task = 4;
};

// Top-level experiment configuration, read from a JSON file. Unknown keys
// are rejected at every level; values are validated before any computation.
struct RunConfig {
    MixLoraConfig adapter;
    HarnessConfig harness;
    InterferenceConfig interference;
    std::string variant = "mixlora";  // train subcommand: mixlora | lora
    std::string out_dir = "out";

    static RunConfig from_file(const std::string& path);
    static RunConfig from_json_text(const std::string& text);

    void validate() const;
};

}  // namespace mixlora
