#include "mixlora/runconfig.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mixlora/errors.hpp"

namespace mixlora {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& known,
                    const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!known.count(it.key())) {
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
        }
    }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) {
        try {
            out = obj.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
        }
    }
}

RoutingMode routing_from(const std::string& s) {
    if (s == "instance") return RoutingMode::instance;
    if (s == "task") return RoutingMode::task;
    if (s == "random") return RoutingMode::random;
    throw ConfigError("config: routing_mode must be instance, task or random");
}

GatingMode gating_from(const std::string& s) {
    if (s == "soft") return GatingMode::soft;
    if (s == "hard") return GatingMode::hard;
    throw ConfigError("config: gating_mode must be soft or hard");
}

GroupSelector group_from(const std::string& s) {
    if (s == "lora_a") return GroupSelector::lora_a;
    if (s == "lora_b") return GroupSelector::lora_b;
    if (s == "all_adapter") return GroupSelector::all_adapter;
    throw ConfigError("config: group must be lora_a, lora_b or all_adapter");
}

void parse_adapter(const json& obj, MixLoraConfig& c) {
    reject_unknown(obj,
                   {"d_in", "d_out", "num_factors", "rank", "alpha", "routing_mode",
                    "gating_mode", "cfs_enabled", "init_std", "seed", "num_tasks"},
                   "adapter");
    read(obj, "d_in", c.d_in);
    read(obj, "d_out", c.d_out);
    read(obj, "num_factors", c.num_factors);
    read(obj, "rank", c.rank);
    read(obj, "alpha", c.alpha);
    if (obj.contains("routing_mode")) {
        c.routing_mode = routing_from(obj.at("routing_mode").get<std::string>());
    }
    if (obj.contains("gating_mode")) {
        c.gating_mode = gating_from(obj.at("gating_mode").get<std::string>());
    }
    read(obj, "cfs_enabled", c.cfs_enabled);
    read(obj, "init_std", c.init_std);
    read(obj, "seed", c.seed);
    read(obj, "num_tasks", c.num_tasks);
}

void parse_harness(const json& obj, HarnessConfig& c) {
    reject_unknown(obj,
                   {"num_tasks", "d_in", "d_out", "conflict_angle", "seq_len",
                    "batch_size", "steps", "lr", "noise_std", "mean_scale",
                    "delta_scale", "eval_instances", "num_layers", "optimizer", "seeds"},
                   "harness");
    read(obj, "num_tasks", c.num_tasks);
    read(obj, "d_in", c.d_in);
    read(obj, "d_out", c.d_out);
    read(obj, "conflict_angle", c.conflict_angle);
    read(obj, "seq_len", c.seq_len);
    read(obj, "batch_size", c.batch_size);
    read(obj, "steps", c.steps);
    read(obj, "lr", c.lr);
    read(obj, "noise_std", c.noise_std);
    read(obj, "mean_scale", c.mean_scale);
    read(obj, "delta_scale", c.delta_scale);
    read(obj, "eval_instances", c.eval_instances);
    read(obj, "num_layers", c.num_layers);
    read(obj, "optimizer", c.optimizer);
    read(obj, "seeds", c.seeds);
}

void parse_interference(const json& obj, InterferenceConfig& c) {
    reject_unknown(obj, {"group", "lambda", "batches_per_task"}, "interference");
    if (obj.contains("group")) c.group = group_from(obj.at("group").get<std::string>());
    read(obj, "lambda", c.lambda);
    read(obj, "batches_per_task", c.batches_per_task);
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: parse error: ") + e.what());
    }
    if (!root.is_object()) throw ConfigError("config: top level must be an object");
    reject_unknown(root, {"adapter", "harness", "interference", "variant", "out_dir"},
                   "top level");
    RunConfig cfg;
    if (root.contains("adapter")) parse_adapter(root.at("adapter"), cfg.adapter);
    if (root.contains("harness")) parse_harness(root.at("harness"), cfg.harness);
    if (root.contains("interference")) parse_interference(root.at("interference"), cfg.interference);
    read(root, "variant", cfg.variant);
    read(root, "out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot read " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json_text(ss.str());
}

void RunConfig::validate() const {
    MixLoraConfig a = adapter;
    if (a.routing_mode == RoutingMode::task && a.num_tasks == 0) {
        a.num_tasks = harness.num_tasks;  // filled in by the harness at build time
    }
    a.validate();
    harness.validate();
    if (interference.lambda <= 0.0) throw ConfigError("config: lambda must be positive");
    if (interference.batches_per_task < 1) {
        throw ConfigError("config: batches_per_task must be >= 1");
    }
    if (variant != "mixlora" && variant != "lora") {
        throw ConfigError("config: variant must be mixlora or lora");
    }
    if (out_dir.empty()) throw ConfigError("config: out_dir must not be empty");
}

}  // namespace mixlora
