#include "mixlora/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "mixlora/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace mixlora {

namespace {

constexpr const char* kMagic = "mixlora-checkpoint v1";

std::string fmt_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

const char* routing_name(RoutingMode m) {
    switch (m) {
        case RoutingMode::instance: return "instance";
        case RoutingMode::task: return "task";
        case RoutingMode::random: return "random";
    }
    throw StateError("unknown routing mode");
}

RoutingMode routing_from(const std::string& s) {
    if (s == "instance") return RoutingMode::instance;
    if (s == "task") return RoutingMode::task;
    if (s == "random") return RoutingMode::random;
    throw IoError("checkpoint: bad routing_mode '" + s + "'");
}

void write_doubles(std::ostream& os, const std::vector<double>& xs) {
    os.write(reinterpret_cast<const char*>(xs.data()),
             static_cast<std::streamsize>(xs.size() * sizeof(double)));
}

void read_doubles(std::istream& is, std::vector<double>& xs) {
    is.read(reinterpret_cast<char*>(xs.data()),
            static_cast<std::streamsize>(xs.size() * sizeof(double)));
    if (!is) throw IoError("checkpoint: truncated tensor data");
}

struct Header {
    std::map<std::string, std::string> kv;

    const std::string& get(const std::string& key) const {
        auto it = kv.find(key);
        if (it == kv.end()) throw IoError("checkpoint: missing header key '" + key + "'");
        return it->second;
    }
    std::size_t get_count(const std::string& key) const {
        return static_cast<std::size_t>(std::stoull(get(key)));
    }
    double get_double(const std::string& key) const { return std::stod(get(key)); }
};

Header read_header(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != kMagic) {
        throw IoError("checkpoint: bad magic line");
    }
    Header h;
    while (std::getline(is, line)) {
        if (line == "end-header") return h;
        auto pos = line.find(": ");
        if (pos == std::string::npos) throw IoError("checkpoint: malformed header line");
        h.kv[line.substr(0, pos)] = line.substr(pos + 2);
    }
    throw IoError("checkpoint: missing end-header");
}

void write_adam(std::ostream& os, const AdamState& adam) {
    for (const auto& m : adam.m) write_doubles(os, m);
    for (const auto& v : adam.v) write_doubles(os, v);
}

void read_adam(std::istream& is, AdamState& adam) {
    for (auto& m : adam.m) read_doubles(is, m);
    for (auto& v : adam.v) read_doubles(is, v);
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot write " + path);
    return os;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot read " + path);
    return is;
}

}  // namespace

void save_checkpoint(const AdaptedLinear& layer, const std::string& path,
                     const AdamState* adam) {
    auto os = open_out(path);
    const auto& c = layer.config;
    os << kMagic << "\n"
       << "model: mixlora\n"
       << "d_in: " << c.d_in << "\n"
       << "d_out: " << c.d_out << "\n"
       << "num_factors: " << c.num_factors << "\n"
       << "rank: " << c.rank << "\n"
       << "alpha: " << fmt_double(c.alpha) << "\n"
       << "routing_mode: " << routing_name(c.routing_mode) << "\n"
       << "gating_mode: " << (c.gating_mode == GatingMode::soft ? "soft" : "hard") << "\n"
       << "cfs_enabled: " << (c.cfs_enabled ? 1 : 0) << "\n"
       << "init_std: " << fmt_double(c.init_std) << "\n"
       << "seed: " << c.seed << "\n"
       << "num_tasks: " << c.num_tasks << "\n"
       << "adam_step: " << (adam != nullptr ? adam->step : -1) << "\n"
       << "end-header\n";
    write_doubles(os, layer.base_w.data);
    for (const auto& v : layer.pool.a_factors) write_doubles(os, v.data);
    for (const auto& v : layer.pool.b_factors) write_doubles(os, v.data);
    write_doubles(os, layer.routers.w_a.data);
    write_doubles(os, layer.routers.w_b_ifs.data);
    for (const auto& m : layer.routers.w_ab) write_doubles(os, m.data);
    if (layer.routers.task_table_a) write_doubles(os, layer.routers.task_table_a->data);
    if (layer.routers.task_table_b) write_doubles(os, layer.routers.task_table_b->data);
    if (adam != nullptr) write_adam(os, *adam);
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

AdaptedLinear load_mixlora_checkpoint(const std::string& path, AdamState* adam) {
    auto is = open_in(path);
    Header h = read_header(is);
    if (h.get("model") != "mixlora") throw IoError("checkpoint: not a mixlora checkpoint");

    MixLoraConfig c;
    c.d_in = h.get_count("d_in");
    c.d_out = h.get_count("d_out");
    c.num_factors = h.get_count("num_factors");
    c.rank = h.get_count("rank");
    c.alpha = h.get_double("alpha");
    c.routing_mode = routing_from(h.get("routing_mode"));
    c.gating_mode = h.get("gating_mode") == "soft" ? GatingMode::soft : GatingMode::hard;
    c.cfs_enabled = h.get("cfs_enabled") == "1";
    c.init_std = h.get_double("init_std");
    c.seed = std::stoull(h.get("seed"));
    c.num_tasks = h.get_count("num_tasks");

    AdaptedLinear layer;
    layer.config = c;
    layer.base_w = Matrix(c.d_out, c.d_in);
    read_doubles(is, layer.base_w.data);
    layer.pool.a_factors.assign(c.num_factors, Vector(c.d_in));
    layer.pool.b_factors.assign(c.num_factors, Vector(c.d_out));
    for (auto& v : layer.pool.a_factors) read_doubles(is, v.data);
    for (auto& v : layer.pool.b_factors) read_doubles(is, v.data);
    layer.routers.w_a = Matrix(c.num_factors, c.d_in);
    layer.routers.w_b_ifs = Matrix(c.num_factors, c.d_out);
    read_doubles(is, layer.routers.w_a.data);
    read_doubles(is, layer.routers.w_b_ifs.data);
    if (c.cfs_enabled) {
        layer.routers.w_ab.assign(c.rank, Matrix(c.d_in, c.num_factors));
        for (auto& m : layer.routers.w_ab) read_doubles(is, m.data);
    }
    if (c.routing_mode == RoutingMode::task) {
        layer.routers.task_table_a = Matrix(c.num_tasks, c.d_in);
        layer.routers.task_table_b = Matrix(c.num_tasks, c.d_out);
        read_doubles(is, layer.routers.task_table_a->data);
        read_doubles(is, layer.routers.task_table_b->data);
    }
    long adam_step = std::stol(h.get("adam_step"));
    if (adam != nullptr) {
        if (adam_step < 0) {
            *adam = AdamState{};
            adam->step = -1;  // caller-visible "no state saved" marker
        } else {
            auto params = trainable_params(layer);
            *adam = AdamState::zeros_like(params);
            adam->step = adam_step;
            read_adam(is, *adam);
        }
    }
    return layer;
}

void save_checkpoint(const LoraLinear& layer, const std::string& path,
                     const AdamState* adam) {
    auto os = open_out(path);
    const auto& c = layer.config;
    os << kMagic << "\n"
       << "model: lora\n"
       << "d_in: " << c.d_in << "\n"
       << "d_out: " << c.d_out << "\n"
       << "rank: " << c.rank << "\n"
       << "alpha: " << fmt_double(c.alpha) << "\n"
       << "init_std: " << fmt_double(c.init_std) << "\n"
       << "seed: " << c.seed << "\n"
       << "adam_step: " << (adam != nullptr ? adam->step : -1) << "\n"
       << "end-header\n";
    write_doubles(os, layer.base_w.data);
    write_doubles(os, layer.a.data);
    write_doubles(os, layer.b.data);
    if (adam != nullptr) write_adam(os, *adam);
    if (!os) throw IoError("checkpoint: write failed for " + path);
}

LoraLinear load_lora_checkpoint(const std::string& path, AdamState* adam) {
    auto is = open_in(path);
    Header h = read_header(is);
    if (h.get("model") != "lora") throw IoError("checkpoint: not a lora checkpoint");

    LoraConfig c;
    c.d_in = h.get_count("d_in");
    c.d_out = h.get_count("d_out");
    c.rank = h.get_count("rank");
    c.alpha = h.get_double("alpha");
    c.init_std = h.get_double("init_std");
    c.seed = std::stoull(h.get("seed"));

    LoraLinear layer;
    layer.config = c;
    layer.base_w = Matrix(c.d_out, c.d_in);
    layer.a = Matrix(c.rank, c.d_in);
    layer.b = Matrix(c.d_out, c.rank);
    read_doubles(is, layer.base_w.data);
    read_doubles(is, layer.a.data);
    read_doubles(is, layer.b.data);
    long adam_step = std::stol(h.get("adam_step"));
    if (adam != nullptr) {
        if (adam_step < 0) {
            *adam = AdamState{};
            adam->step = -1;  // caller-visible "no state saved" marker
        } else {
            auto params = trainable_params(layer);
            *adam = AdamState::zeros_like(params);
            adam->step = adam_step;
            read_adam(is, *adam);
        }
    }
    return layer;
}

std::string checkpoint_model_kind(const std::string& path) {
    auto is = open_in(path);
    Header h = read_header(is);
    return h.get("model");
}

}  // namespace mixlora
