#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mixlora/linalg.hpp"
#include "mixlora/rng.hpp"

namespace mixlora {

enum class RoutingMode { instance, task, random };
enum class GatingMode { soft, hard };

struct MixLoraConfig {
    std::size_t d_in = 16;
    std::size_t d_out = 16;
    std::size_t num_factors = 8;  // E
    std::size_t rank = 2;         // r
    double alpha = 0.0;           // 0 -> 2*num_factors
    RoutingMode routing_mode = RoutingMode::instance;
    GatingMode gating_mode = GatingMode::soft;
    bool cfs_enabled = false;
    double init_std = 0.0;  // 0 -> 1/sqrt(d_in)
    std::uint64_t seed = 0;
    std::size_t num_tasks = 0;  // required > 0 in task routing mode

    double effective_alpha() const { return alpha > 0.0 ? alpha : 2.0 * static_cast<double>(num_factors); }
    double effective_std() const;
    void validate() const;  // throws ConfigError
};

// The E rank-1 decomposition factors of one adapted layer.
struct FactorPool {
    std::vector<Vector> a_factors;  // E vectors of length d_in
    std::vector<Vector> b_factors;  // E vectors of length d_out
};

struct RouterParams {
    Matrix w_a;                          // E x d_in
    Matrix w_b_ifs;                      // E x d_out
    std::vector<Matrix> w_ab;            // r matrices, d_in x E (CFS only)
    std::optional<Matrix> task_table_a;  // T x d_in (task routing only)
    std::optional<Matrix> task_table_b;  // T x d_out (task routing only)
};

// Per-instance routing outcome. p_b_cfs holds the raw CFS router output
// (sum of r softmaxes, totals r); it is the zero vector when CFS is off.
struct Selection {
    std::vector<std::size_t> indices_a;  // r sorted distinct indices in [0, E)
    std::vector<double> gates_a;
    std::vector<std::size_t> indices_b;
    std::vector<double> gates_b;
    Vector p_b_ifs;
    Vector p_b_cfs;
};

struct SideSelection {
    std::vector<std::size_t> indices;
    std::vector<double> gates;
    Vector probs;  // the full score vector the top-k ran on
};

struct BSideSelection {
    std::vector<std::size_t> indices;
    std::vector<double> gates;
    Vector p_ifs;
    Vector p_cfs_prob;  // softmax of the raw CFS scores; zero vector when CFS off
    Vector fused;
};

// Everything backward needs from one forward pass.
struct ForwardTrace {
    Matrix h;
    std::optional<std::size_t> task_id;
    Vector pooled_a;
    Vector pooled_b;
    Vector p_a;                    // full A-side softmax (empty in random mode)
    Vector p_ifs;                  // full B-side IFS softmax (empty in random mode)
    Vector cfs_q;                  // softmax of cfs_r (empty when CFS off)
    Vector fused;                  // p_ifs + cfs_q (empty in random mode)
    std::vector<Vector> cfs_terms; // softmax(A[i] * W_AB[i]) per row i
    Matrix a_mat;                  // assembled A, r x d_in
    Matrix b_mat;                  // assembled B, d_out x r
    Matrix delta_w;                // d_out x d_in
    Selection sel;
};

struct ForwardResult {
    Matrix output;
    Selection sel;
    ForwardTrace trace;
};

class AdaptedLinear {
  public:
    Matrix base_w;  // d_out x d_in, frozen
    FactorPool pool;
    RouterParams routers;
    MixLoraConfig config;

    // Draws base_w first (unless one is supplied), then the factor pool, then
    // router weights, all from `rng`. b-factors start at exactly zero.
    static AdaptedLinear init(const MixLoraConfig& config, Rng& rng,
                              const Matrix* base = nullptr);

    Vector route_ifs(const Matrix& h) const { return mean_pool(h); }
    Vector route_task_a(std::size_t task_id) const;
    Vector route_task_b(std::size_t task_id) const;

    SideSelection select_a(const Vector& pooled_a) const;
    Matrix assemble_a(const Selection& sel) const;
    // Raw CFS scores: sum over rows i of softmax(A[i] * W_AB[i]); totals r.
    Vector route_cfs(const Matrix& a_mat) const;
    // p_cfs_raw is route_cfs output, or a zero vector when CFS is off.
    BSideSelection select_b(const Vector& pooled_b, const Vector& p_cfs_raw) const;
    Matrix assemble_b(const Selection& sel) const;
    Matrix assemble_delta_w(const Selection& sel) const;
    Selection route_random(Rng& rng) const;

    // rng is required in random routing mode, task_id in task mode.
    ForwardResult forward(const Matrix& h,
                          std::optional<std::size_t> task_id = std::nullopt,
                          Rng* rng = nullptr) const;

  private:
    std::vector<double> gates_from(const Vector& scores,
                                   const std::vector<std::size_t>& indices) const;
};

}  // namespace mixlora
