#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "mixlora/grad.hpp"
#include "mixlora/model.hpp"

using namespace mixlora;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(r, c);
    for (double& x : m.data) x = rng.gaussian();
    return m;
}

Vector flatten(const ParamViews& views) {
    Vector out(0);
    for (const auto& v : views) out.data.insert(out.data.end(), v.begin(), v.end());
    return out;
}

void unflatten(const ParamViews& views, const Vector& theta) {
    std::size_t k = 0;
    for (const auto& v : views) {
        for (double& x : v) x = theta[k++];
    }
}

double max_rel_err(const Vector& analytic, const Vector& numeric) {
    REQUIRE(analytic.size() == numeric.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        double denom = std::abs(analytic[i]) + std::abs(numeric[i]);
        if (denom < 1e-8) continue;  // both effectively zero
        double diff = std::abs(analytic[i] - numeric[i]);
        if (diff < 1e-9) continue;  // below the central-difference round-off floor
        worst = std::max(worst, diff / denom);
    }
    return worst;
}

// Gradient of sum(upstream . output) checked against central differences over
// every trainable parameter. Routing indices are held fixed by construction
// (random inits keep scores away from ties at eps = 1e-5).
double layer_gradcheck(MixLoraConfig cfg, std::uint64_t seed) {
    Rng rng(seed);
    AdaptedLinear layer = AdaptedLinear::init(cfg, rng);
    Rng noise(seed + 1);
    for (auto& b : layer.pool.b_factors) {
        for (double& x : b.data) x = 0.3 * noise.gaussian();
    }

    Matrix h = random_matrix(3, cfg.d_in, seed + 2);
    Matrix upstream = random_matrix(3, cfg.d_out, seed + 3);
    std::optional<std::size_t> task_id;
    if (cfg.routing_mode == RoutingMode::task) task_id = 1;

    auto run_forward = [&]() {
        if (cfg.routing_mode == RoutingMode::random) {
            Rng route(seed + 4);  // same draw every evaluation
            return layer.forward(h, task_id, &route);
        }
        return layer.forward(h, task_id);
    };

    ForwardResult fwd = run_forward();
    GradBuffer grads = GradBuffer::zeros_like(layer);
    backward(layer, fwd.trace, upstream, grads);
    Vector analytic = flatten(grad_views(grads));

    ParamViews views = trainable_params(layer);
    Vector theta0 = flatten(views);
    auto fn = [&](const Vector& theta) {
        unflatten(views, theta);
        Matrix out = run_forward().output;
        double s = 0.0;
        for (std::size_t i = 0; i < out.data.size(); ++i) s += upstream.data[i] * out.data[i];
        return s;
    };
    Vector numeric = finite_diff(fn, theta0, 1e-5);
    unflatten(views, theta0);
    return max_rel_err(analytic, numeric);
}

}  // namespace

TEST_CASE("finite_diff: quadratic, constant, sine") {
    auto quad = [](const Vector& v) { return dot(v, v); };
    Vector theta{1.0, -2.0, 0.5};
    Vector g = finite_diff(quad, theta);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(g[i] == doctest::Approx(2.0 * theta[i]).epsilon(1e-9));
    }

    auto constant = [](const Vector&) { return 4.25; };
    Vector gc = finite_diff(constant, theta);
    for (double x : gc.data) CHECK(x == 0.0);

    auto sine = [](const Vector& v) { return std::sin(v[0]); };
    Vector gs = finite_diff(sine, Vector{0.7});
    CHECK(gs[0] == doctest::Approx(std::cos(0.7)).epsilon(1e-9));
}

TEST_CASE("backward matches finite differences across routing variants") {
    MixLoraConfig cfg;
    cfg.d_in = 5;
    cfg.d_out = 4;
    cfg.num_factors = 6;
    cfg.rank = 2;

    SUBCASE("instance routing, soft gating") {
        CHECK(layer_gradcheck(cfg, 100) < 1e-6);
    }
    SUBCASE("instance routing, soft gating, CFS enabled") {
        cfg.cfs_enabled = true;
        CHECK(layer_gradcheck(cfg, 200) < 1e-6);
    }
    SUBCASE("instance routing, hard gating") {
        cfg.gating_mode = GatingMode::hard;
        CHECK(layer_gradcheck(cfg, 300) < 1e-6);
    }
    SUBCASE("task routing, soft gating") {
        cfg.routing_mode = RoutingMode::task;
        cfg.num_tasks = 3;
        CHECK(layer_gradcheck(cfg, 400) < 1e-6);
    }
    SUBCASE("task routing with CFS") {
        cfg.routing_mode = RoutingMode::task;
        cfg.num_tasks = 3;
        cfg.cfs_enabled = true;
        CHECK(layer_gradcheck(cfg, 500) < 1e-6);
    }
    SUBCASE("random routing") {
        cfg.routing_mode = RoutingMode::random;
        CHECK(layer_gradcheck(cfg, 600) < 1e-6);
    }
    SUBCASE("rank 1 and full selection edge shapes") {
        cfg.rank = 1;
        CHECK(layer_gradcheck(cfg, 700) < 1e-6);
        cfg.rank = cfg.num_factors;  // top-k selects everything
        CHECK(layer_gradcheck(cfg, 800) < 1e-6);
    }
}

TEST_CASE("hard gating: router gradients are exactly zero") {
    MixLoraConfig cfg;
    cfg.d_in = 5;
    cfg.d_out = 4;
    cfg.num_factors = 6;
    cfg.rank = 2;
    cfg.gating_mode = GatingMode::hard;
    cfg.cfs_enabled = true;

    Rng rng(31);
    AdaptedLinear layer = AdaptedLinear::init(cfg, rng);
    Rng noise(32);
    for (auto& b : layer.pool.b_factors) {
        for (double& x : b.data) x = noise.gaussian();
    }
    Matrix h = random_matrix(3, 5, 33);
    Matrix upstream = random_matrix(3, 4, 34);

    ForwardResult fwd = layer.forward(h);
    GradBuffer grads = GradBuffer::zeros_like(layer);
    backward(layer, fwd.trace, upstream, grads);

    for (double x : grads.w_a.data) CHECK(x == 0.0);
    for (double x : grads.w_b_ifs.data) CHECK(x == 0.0);
    for (const auto& m : grads.w_ab) {
        for (double x : m.data) CHECK(x == 0.0);
    }
}

TEST_CASE("unselected factors receive exactly zero gradient") {
    MixLoraConfig cfg;
    cfg.d_in = 5;
    cfg.d_out = 4;
    cfg.num_factors = 6;
    cfg.rank = 2;

    Rng rng(41);
    AdaptedLinear layer = AdaptedLinear::init(cfg, rng);
    Rng noise(42);
    for (auto& b : layer.pool.b_factors) {
        for (double& x : b.data) x = noise.gaussian();
    }
    Matrix h = random_matrix(3, 5, 43);
    Matrix upstream = random_matrix(3, 4, 44);

    ForwardResult fwd = layer.forward(h);
    GradBuffer grads = GradBuffer::zeros_like(layer);
    backward(layer, fwd.trace, upstream, grads);

    auto selected = [](const std::vector<std::size_t>& idx, std::size_t e) {
        return std::find(idx.begin(), idx.end(), e) != idx.end();
    };
    for (std::size_t e = 0; e < 6; ++e) {
        if (!selected(fwd.sel.indices_a, e)) {
            for (double x : grads.a_factors[e].data) CHECK(x == 0.0);
        }
        if (!selected(fwd.sel.indices_b, e)) {
            for (double x : grads.b_factors[e].data) CHECK(x == 0.0);
        }
    }
    CHECK(grads.w_ab.empty());  // CFS disabled: no CFS router parameters at all
}

TEST_CASE("backward is linear in the upstream signal") {
    MixLoraConfig cfg;
    cfg.d_in = 4;
    cfg.d_out = 3;
    cfg.num_factors = 5;
    cfg.rank = 2;
    cfg.cfs_enabled = true;

    Rng rng(51);
    AdaptedLinear layer = AdaptedLinear::init(cfg, rng);
    Rng noise(52);
    for (auto& b : layer.pool.b_factors) {
        for (double& x : b.data) x = noise.gaussian();
    }
    Matrix h = random_matrix(2, 4, 53);
    Matrix u = random_matrix(2, 3, 54);
    Matrix u2 = u;
    for (double& x : u2.data) x *= 2.0;

    ForwardResult fwd = layer.forward(h);
    GradBuffer g1 = GradBuffer::zeros_like(layer);
    GradBuffer g2 = GradBuffer::zeros_like(layer);
    Matrix dh1 = backward(layer, fwd.trace, u, g1);
    Matrix dh2 = backward(layer, fwd.trace, u2, g2);

    Vector f1 = flatten(grad_views(g1));
    Vector f2 = flatten(grad_views(g2));
    for (std::size_t i = 0; i < f1.size(); ++i) {
        CHECK(std::abs(f2[i] - 2.0 * f1[i]) <= 1e-12 * (1.0 + std::abs(f1[i])));
    }
    for (std::size_t i = 0; i < dh1.data.size(); ++i) {
        CHECK(std::abs(dh2.data[i] - 2.0 * dh1.data[i]) <=
              1e-12 * (1.0 + std::abs(dh1.data[i])));
    }
}

TEST_CASE("input gradient matches finite differences") {
    MixLoraConfig cfg;
    cfg.d_in = 4;
    cfg.d_out = 3;
    cfg.num_factors = 5;
    cfg.rank = 2;
    cfg.cfs_enabled = true;

    Rng rng(61);
    AdaptedLinear layer = AdaptedLinear::init(cfg, rng);
    Rng noise(62);
    for (auto& b : layer.pool.b_factors) {
        for (double& x : b.data) x = noise.gaussian();
    }
    Matrix h = random_matrix(2, 4, 63);
    Matrix upstream = random_matrix(2, 3, 64);

    ForwardResult fwd = layer.forward(h);
    GradBuffer grads = GradBuffer::zeros_like(layer);
    Matrix dh = backward(layer, fwd.trace, upstream, grads);

    Vector h_flat(h.data.size());
    h_flat.data = h.data;
    auto fn = [&](const Vector& theta) {
        Matrix hh(2, 4);
        hh.data = theta.data;
        Matrix out = layer.forward(hh).output;
        double s = 0.0;
        for (std::size_t i = 0; i < out.data.size(); ++i) s += upstream.data[i] * out.data[i];
        return s;
    };
    Vector numeric = finite_diff(fn, h_flat, 1e-5);
    Vector analytic(dh.data.size());
    analytic.data = dh.data;
    CHECK(max_rel_err(analytic, numeric) < 1e-6);
}

TEST_CASE("losses: MSE and cross-entropy values and gradients") {
    LossSpec mse{LossKind::mean_squared_error};
    Matrix pred{{1.0, 2.0}, {3.0, 4.0}};
    Matrix target{{1.0, 0.0}, {3.0, 6.0}};
    Matrix dpred(2, 2);
    double v = loss_value_and_grad(mse, pred, target, dpred);
    CHECK(v == doctest::Approx((0.0 + 4.0 + 0.0 + 4.0) / 4.0));
    CHECK(dpred.at(0, 0) == 0.0);
    CHECK(dpred.at(0, 1) == doctest::Approx(2.0 * 2.0 / 4.0));
    CHECK(dpred.at(1, 1) == doctest::Approx(2.0 * -2.0 / 4.0));
    CHECK(loss_value(mse, pred, target) == v);

    LossSpec ce{LossKind::softmax_cross_entropy};
    Matrix logits{{0.0, 0.0}};
    Matrix cls{{0.0}};
    Matrix dl(1, 2);
    double lv = loss_value_and_grad(ce, logits, cls, dl);
    CHECK(lv == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(dl.at(0, 0) == doctest::Approx(0.5 - 1.0));
    CHECK(dl.at(0, 1) == doctest::Approx(0.5));

    // cross-entropy gradient against finite differences
    Matrix logits2{{0.3, -1.1, 0.4}, {2.0, 0.1, -0.7}};
    Matrix cls2{{2.0}, {0.0}};
    Matrix dl2(2, 3);
    loss_value_and_grad(ce, logits2, cls2, dl2);
    Vector theta(logits2.data.size());
    theta.data = logits2.data;
    auto fn = [&](const Vector& t) {
        Matrix l(2, 3);
        l.data = t.data;
        return loss_value(ce, l, cls2);
    };
    Vector numeric = finite_diff(fn, theta);
    Vector analytic(dl2.data.size());
    analytic.data = dl2.data;
    CHECK(max_rel_err(analytic, numeric) < 1e-6);

    CHECK_THROWS_AS(loss_value(mse, pred, Matrix(1, 2)), ShapeError);
}

TEST_CASE("model: stacked layers with tanh match finite differences") {
    MixLoraConfig cfg;
    cfg.d_in = 4;
    cfg.d_out = 4;
    cfg.num_factors = 5;
    cfg.rank = 2;

    Model model;
    Rng r0(71), r1(72);
    model.layers.push_back(AdaptedLinear::init(cfg, r0));
    model.layers.push_back(AdaptedLinear::init(cfg, r1));
    Rng noise(73);
    for (auto& layer : model.layers) {
        auto& al = std::get<AdaptedLinear>(layer);
        for (auto& b : al.pool.b_factors) {
            for (double& x : b.data) x = 0.3 * noise.gaussian();
        }
    }

    Batch batch;
    batch.instances.push_back({random_matrix(3, 4, 74), random_matrix(3, 4, 75)});
    batch.instances.push_back({random_matrix(3, 4, 76), random_matrix(3, 4, 77)});

    auto grads = model.zero_grads();
    model.batch_loss_and_grads(batch, grads, std::nullopt);
    Vector analytic = flatten(Model::grad_params(grads));

    ParamViews views = model.params();
    Vector theta0 = flatten(views);
    auto fn = [&](const Vector& theta) {
        unflatten(views, theta);
        return model.batch_loss(batch, std::nullopt);
    };
    Vector numeric = finite_diff(fn, theta0, 1e-5);
    unflatten(views, theta0);
    CHECK(max_rel_err(analytic, numeric) < 1e-6);
}

TEST_CASE("plain LoRA backward matches finite differences") {
    LoraConfig cfg;
    cfg.d_in = 5;
    cfg.d_out = 4;
    cfg.rank = 2;
    Rng rng(81);
    LoraLinear layer = LoraLinear::init(cfg, rng);
    Rng noise(82);
    for (double& x : layer.b.data) x = noise.gaussian();

    Matrix h = random_matrix(3, 5, 83);
    Matrix upstream = random_matrix(3, 4, 84);

    LoraForwardResult fwd = layer.forward(h);
    LoraGrads grads = layer.zero_grads();
    layer.backward(fwd.trace, upstream, grads);
    Vector analytic = flatten(grad_views(grads));

    ParamViews views = trainable_params(layer);
    Vector theta0 = flatten(views);
    auto fn = [&](const Vector& theta) {
        unflatten(views, theta);
        Matrix out = layer.forward(h).output;
        double s = 0.0;
        for (std::size_t i = 0; i < out.data.size(); ++i) s += upstream.data[i] * out.data[i];
        return s;
    };
    Vector numeric = finite_diff(fn, theta0, 1e-5);
    unflatten(views, theta0);
    CHECK(max_rel_err(analytic, numeric) < 1e-6);
}

TEST_CASE("optimizers: sgd example, adam first-step magnitude") {
    std::vector<double> p{1.0, -2.0};
    std::vector<double> g{0.5, 1.0};
    ParamViews pv{std::span<double>(p)};
    ParamViews gv{std::span<double>(g)};
    sgd_step(pv, gv, 0.1);
    CHECK(p[0] == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(-2.1).epsilon(1e-15));

    std::vector<double> p2{1.0, -2.0, 0.0};
    std::vector<double> g2{0.5, -3.0, 0.0};
    ParamViews pv2{std::span<double>(p2)};
    ParamViews gv2{std::span<double>(g2)};
    AdamState st = AdamState::zeros_like(pv2);
    adam_step(st, pv2, gv2, 0.01);
    // bias-corrected first step moves each coordinate by ~lr * sign(grad)
    CHECK(p2[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(p2[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
    CHECK(p2[2] == 0.0);
    CHECK(st.step == 1);
}
