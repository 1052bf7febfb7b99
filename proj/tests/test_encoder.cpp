#include <cmath>
#include <random>

#include "doctest.h"
#include "otts/encoder.hpp"
#include "test_support.hpp"

using namespace otts;
using otts::testing::random_matrix;

namespace {

EncoderParams random_params(std::uint64_t seed, std::vector<Eigen::Index> widths = {16, 32, 8})
{
    EncoderShape shape;
    shape.widths = std::move(widths);
    EncoderParams p = init_encoder(shape, seed);
    std::mt19937_64 rng(seed ^ 0x5a5a);
    for (Layer& l : p.layers) l.bias = random_matrix(l.bias.size(), 1, rng, 0.1);
    return p;
}

// Plain loops over the same arithmetic the library does with Eigen expressions.
std::vector<double> reference_forward(const EncoderParams& p, const std::vector<double>& x)
{
    std::vector<double> h = x;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const Layer& layer = p.layers[l];
        std::vector<double> out(static_cast<std::size_t>(layer.weight.rows()));
        for (Eigen::Index i = 0; i < layer.weight.rows(); ++i) {
            double s = layer.bias(i);
            for (Eigen::Index j = 0; j < layer.weight.cols(); ++j) s += layer.weight(i, j) * h[j];
            out[i] = (l + 1 < p.layers.size()) ? std::tanh(s) : s;
        }
        h = out;
    }
    return h;
}

// One 5-way 1-shot pair: the halves of a 2-shot task over Gaussian clusters.
std::pair<Task, Task> cluster_pair(std::uint64_t seed, Eigen::Index dim = 16)
{
    std::mt19937_64 rng(seed);
    const Matrix means = random_matrix(5, dim, rng, 1.0);
    Task a, b;
    for (Task* t : {&a, &b}) {
        t->task_id = 4;
        t->n_way = 5;
        t->k_shot = 1;
        t->features = means + random_matrix(5, dim, rng, 0.3);
        t->labels = {0, 1, 2, 3, 4};
    }
    return {a, b};
}

SolverConfig tight_solver()
{
    SolverConfig cfg;
    cfg.sinkhorn.epsilon = 0.005;
    cfg.sinkhorn.tol = 1e-8;
    cfg.sinkhorn.max_iter = 5000;
    return cfg;
}

// max |analytic - central difference| / max |central difference| over all scalars.
double gradient_error(const EncoderParams& theta, const EncoderParams& xi, const Task& t1, const Task& t2,
                      double r, const SolverConfig& cfg)
{
    const PairLossGrad pg = grad_ot_loss(theta, xi, t1, t2, r, cfg);
    const Vector analytic = flatten(pg.grad);
    const Vector base = flatten(theta);
    const double h = 1e-5;
    Vector fd(base.size());
    for (Eigen::Index k = 0; k < base.size(); ++k) {
        Vector up = base, down = base;
        up(k) += h;
        down(k) -= h;
        fd(k) = (pair_loss(unflatten(theta, up), xi, t1, t2, r, cfg) -
                 pair_loss(unflatten(theta, down), xi, t1, t2, r, cfg)) /
                (2.0 * h);
    }
    return (analytic - fd).cwiseAbs().maxCoeff() / fd.cwiseAbs().maxCoeff();
}

} // namespace

TEST_CASE("forward: identity layer returns the input")
{
    const EncoderParams p = identity_encoder(4);
    Vector x(4);
    x << 1.5, -2.0, 0.25, 7.0;
    CHECK(forward(p, x) == x);
}

TEST_CASE("forward: zero first-layer weights give the activated bias")
{
    Vector b(3);
    b << -1.0, 0.0, 2.0;
    EncoderParams p;
    p.activation = Activation::tanh;
    p.layers.push_back({Matrix::Zero(3, 5), b});
    p.layers.push_back({Matrix::Identity(3, 3), Vector::Zero(3)});
    Vector x(5);
    x << 9, 8, 7, 6, 5;
    const Vector y = forward(p, x);
    for (int i = 0; i < 3; ++i) CHECK(y(i) == std::tanh(b(i)));

    EncoderParams single;
    single.layers.push_back({Matrix::Zero(3, 5), b});
    CHECK(forward(single, x) == b);
}

TEST_CASE("forward: matches a loop-based recomputation")
{
    std::mt19937_64 rng(3);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const EncoderParams p = random_params(seed);
        const Matrix x = random_matrix(1, 16, rng);
        const std::vector<double> xs(x.data(), x.data() + 16);
        const std::vector<double> ref = reference_forward(p, xs);
        const Vector y = forward(p, x.row(0).transpose());
        for (int i = 0; i < 8; ++i) CHECK(std::abs(y(i) - ref[i]) < 1e-9);
    }
}

TEST_CASE("forward: shape mismatch and bad parameters")
{
    const EncoderParams p = random_params(1);
    CHECK_THROWS_AS(forward(p, Vector::Zero(15)), Error);
    EncoderParams broken = p;
    broken.layers[1].weight.resize(8, 31);
    CHECK_THROWS_AS(validate_params(broken), Error);
    EncoderParams nan = p;
    nan.layers[0].bias(0) = std::nan("");
    CHECK_THROWS_AS(validate_params(nan), Error);
    CHECK_NOTHROW(validate_params(p));
}

TEST_CASE("init_encoder: seeded and bounded")
{
    const EncoderParams a = init_encoder({}, 11);
    const EncoderParams b = init_encoder({}, 11);
    const EncoderParams c = init_encoder({}, 12);
    CHECK(same_values(a, b));
    CHECK_FALSE(same_values(a, c));
    REQUIRE(a.layers.size() == 2);
    CHECK(a.input_dim() == 16);
    CHECK(a.output_dim() == 8);
    CHECK(a.layers[0].weight.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 16.0));
    CHECK(a.layers[1].weight.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 32.0));
    CHECK(a.layers[0].bias.isZero(0.0));
}

TEST_CASE("flatten and unflatten round-trip")
{
    const EncoderParams p = random_params(5);
    const Vector v = flatten(p);
    CHECK(v.size() == 16 * 32 + 32 + 32 * 8 + 8);
    CHECK(same_values(unflatten(p, v), p));
    CHECK_THROWS_AS(unflatten(p, Vector::Zero(3)), Error);
}

TEST_CASE("ema_update: endpoints and scalar case")
{
    const EncoderParams xi = random_params(1);
    const EncoderParams theta = random_params(2);
    CHECK(same_values(ema_update(xi, theta, 1.0), xi));
    CHECK(same_values(ema_update(xi, theta, 0.0), theta));
    CHECK(ema_update(xi, theta, 0.5).param_version == xi.param_version + 1);

    EncoderParams one, zero;
    one.layers.push_back({Matrix::Constant(1, 1, 1.0), Vector::Zero(1)});
    zero.layers.push_back({Matrix::Constant(1, 1, 0.0), Vector::Zero(1)});
    CHECK(ema_update(one, zero, 0.99).layers[0].weight(0, 0) == 0.99);

    CHECK_THROWS_AS(ema_update(xi, random_params(3, {16, 4, 8}), 0.5), Error);
    CHECK_THROWS_AS(ema_update(xi, theta, 1.5), Error);
}

TEST_CASE("ema_update: every scalar equals the formula bit for bit")
{
    for (double tau : {0.0, 0.5, 0.99, 1.0}) {
        const EncoderParams xi = random_params(7);
        const EncoderParams theta = random_params(8);
        const Vector a = flatten(xi), b = flatten(theta);
        const Vector got = flatten(ema_update(xi, theta, tau));
        bool exact = true;
        for (Eigen::Index k = 0; k < a.size(); ++k) {
            const double want = tau * a(k) + (1.0 - tau) * b(k);
            exact = exact && got(k) == want;
        }
        CHECK(exact);
    }
}

TEST_CASE("adam_step: one scalar step by hand")
{
    EncoderParams p;
    p.activation = Activation::identity;
    p.layers.push_back({Matrix::Constant(1, 1, 0.5), Vector::Constant(1, -0.25)});
    EncoderParams g = p;
    g.layers[0].weight(0, 0) = 0.2;
    g.layers[0].bias(0) = -3.0;

    AdamState s = init_adam(p);
    s.m << 0.1, 0.4;
    s.v << 0.01, 0.5;
    s.step = 3;

    const auto [next, state] = adam_step(p, g, s, 1e-2);
    // weight: m = 0.9*0.1 + 0.1*0.2, v = 0.999*0.01 + 0.001*0.04, t = 4
    const double m_w = 0.11, v_w = 0.01003;
    const double m_b = 0.9 * 0.4 + 0.1 * -3.0, v_b = 0.999 * 0.5 + 0.001 * 9.0;
    const double c1 = 1.0 - 0.9 * 0.9 * 0.9 * 0.9;
    const double c2 = 1.0 - 0.999 * 0.999 * 0.999 * 0.999;
    const double w = 0.5 - 1e-2 * (m_w / c1) / (std::sqrt(v_w / c2) + 1e-8);
    const double b = -0.25 - 1e-2 * (m_b / c1) / (std::sqrt(v_b / c2) + 1e-8);
    CHECK(state.step == 4);
    CHECK(std::abs(state.m(0) - m_w) < 1e-15);
    CHECK(std::abs(state.v(1) - v_b) < 1e-15);
    CHECK(std::abs(next.layers[0].weight(0, 0) - w) < 1e-12);
    CHECK(std::abs(next.layers[0].bias(0) - b) < 1e-12);
    CHECK(next.param_version == p.param_version + 1);
}

TEST_CASE("adam_step: zero gradient leaves parameters and decays moments")
{
    const EncoderParams p = random_params(4);
    AdamState s = init_adam(p);
    s.m.setConstant(0.3);
    s.v.setConstant(0.2);
    const auto [next, state] = adam_step(p, zeros_like(p), s, 1e-3);
    CHECK((flatten(next) - flatten(p)).cwiseAbs().maxCoeff() < 2e-3);  // momentum still moves
    CHECK((state.m.array() == 0.9 * 0.3).all());
    CHECK((state.v.array() == 0.999 * 0.2).all());

    const auto [still, fresh] = adam_step(p, zeros_like(p), init_adam(p), 1e-3);
    CHECK(same_values(unflatten(p, flatten(still)), p));
    CHECK(fresh.m.isZero(0.0));
}

TEST_CASE("adam_step: constant gradient gives steps of size eta")
{
    EncoderParams p;
    p.activation = Activation::identity;
    p.layers.push_back({Matrix::Constant(1, 1, 0.0), Vector::Constant(1, 0.0)});
    EncoderParams g = p;
    g.layers[0].weight(0, 0) = 4.0;
    g.layers[0].bias(0) = -0.01;
    AdamState s = init_adam(p);
    for (int i = 0; i < 200; ++i) {
        const Vector before = flatten(p);
        std::tie(p, s) = adam_step(p, g, s, 1e-3);
        const Vector step = flatten(p) - before;
        CHECK(step(0) == doctest::Approx(-1e-3).epsilon(1e-5));
        CHECK(step(1) == doctest::Approx(1e-3).epsilon(1e-5));
    }
}

TEST_CASE("adam_step: non-finite gradient is rejected")
{
    const EncoderParams p = random_params(4);
    EncoderParams g = zeros_like(p);
    g.layers[1].weight(2, 3) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(adam_step(p, g, init_adam(p), 1e-3), Error);
}

TEST_CASE("backward: matches finite differences of a linear readout")
{
    std::mt19937_64 rng(9);
    const EncoderParams p = random_params(21);
    const Matrix x = random_matrix(6, 16, rng);
    const Matrix up = random_matrix(6, 8, rng);
    const Vector analytic = flatten(backward(p, x, up));
    const Vector base = flatten(p);
    const double h = 1e-6;
    double worst = 0.0;
    for (Eigen::Index k = 0; k < base.size(); ++k) {
        Vector a = base, b = base;
        a(k) += h;
        b(k) -= h;
        const double fd = ((embed(unflatten(p, a), x).cwiseProduct(up)).sum() -
                           (embed(unflatten(p, b), x).cwiseProduct(up)).sum()) /
                          (2.0 * h);
        worst = std::max(worst, std::abs(fd - analytic(k)));
    }
    CHECK(worst < 1e-7);
}

TEST_CASE("grad_ot_loss: identical tasks at theta = xi have zero gradient")
{
    const auto [t1, t2] = cluster_pair(1);
    const EncoderParams id = identity_encoder(16);
    const PairLossGrad pg = grad_ot_loss(id, id, t1, t1, 0.5, SolverConfig{});
    CHECK(pg.loss <= 1e-6);
    CHECK(flatten(pg.grad).norm() <= 1e-6);
}

TEST_CASE("grad_ot_loss: symmetric in the pair order")
{
    const auto [t1, t2] = cluster_pair(2);
    const EncoderParams theta = random_params(3);
    const EncoderParams xi = random_params(4);
    const PairLossGrad ab = grad_ot_loss(theta, xi, t1, t2, 0.5, SolverConfig{});
    const PairLossGrad ba = grad_ot_loss(theta, xi, t2, t1, 0.5, SolverConfig{});
    CHECK(ab.loss == doctest::Approx(ba.loss).epsilon(1e-9));
    CHECK((flatten(ab.grad) - flatten(ba.grad)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("grad_ot_loss: r = 1 keeps only the transport term at frozen plans")
{
    const auto [t1, t2] = cluster_pair(5);
    const EncoderParams theta = random_params(6);
    const EncoderParams xi = random_params(7);
    const SolverConfig cfg;
    const PairLossGrad pg = grad_ot_loss(theta, xi, t1, t2, 1.0, cfg, {}, PlanGradient::envelope);

    // Direct WD-only gradient: plan held fixed, chain rule through ||z - z'||.
    auto direction = [&](const Task& a, const Task& b) {
        const Matrix zo = embed(theta, a.features);
        const Matrix zt = embed(xi, b.features);
        const auto wd = wasserstein(build_graph(zo, 0), build_graph(zt, 0), cfg);
        Matrix up = Matrix::Zero(zo.rows(), zo.cols());
        for (Eigen::Index i = 0; i < zo.rows(); ++i)
            for (Eigen::Index j = 0; j < zt.rows(); ++j) {
                const double c = (zo.row(i) - zt.row(j)).norm();
                up.row(i) += wd.plan.coupling(i, j) * (zo.row(i) - zt.row(j)) / c;
            }
        return std::pair{wd.distance, flatten(backward(theta, a.features, up))};
    };
    const auto [l1, g1] = direction(t1, t2);
    const auto [l2, g2] = direction(t2, t1);
    CHECK(pg.loss == doctest::Approx(l1 + l2).epsilon(1e-12));
    CHECK((flatten(pg.grad) - (g1 + g2)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("grad_ot_loss: matches central finite differences")
{
    const SolverConfig cfg = tight_solver();
    for (std::uint64_t seed = 0; seed < 2; ++seed) {
        CAPTURE(seed);
        const auto [t1, t2] = cluster_pair(100 + seed);
        const EncoderParams theta = random_params(200 + seed);
        const EncoderParams xi = random_params(300 + seed);
        for (double r : {0.0, 0.5, 1.0}) {
            CAPTURE(r);
            CHECK(gradient_error(theta, xi, t1, t2, r, cfg) < 1e-3);
        }
    }
}

TEST_CASE("grad_ot_loss: normalized graphs differentiate through the projection")
{
    const SolverConfig cfg = tight_solver();
    GraphOptions unit;
    unit.l2_normalize = true;
    const auto [t1, t2] = cluster_pair(17);
    const EncoderParams theta = random_params(18);
    const EncoderParams xi = random_params(19);
    const PairLossGrad pg = grad_ot_loss(theta, xi, t1, t2, 0.5, cfg, unit);
    const Vector analytic = flatten(pg.grad);
    const Vector base = flatten(theta);
    const double h = 1e-5;
    Vector fd(base.size());
    for (Eigen::Index k = 0; k < base.size(); ++k) {
        Vector up = base, down = base;
        up(k) += h;
        down(k) -= h;
        fd(k) = (pair_loss(unflatten(theta, up), xi, t1, t2, 0.5, cfg, unit) -
                 pair_loss(unflatten(theta, down), xi, t1, t2, 0.5, cfg, unit)) /
                (2.0 * h);
    }
    CHECK((analytic - fd).cwiseAbs().maxCoeff() / fd.cwiseAbs().maxCoeff() < 1e-3);
}

TEST_CASE("activation names")
{
    for (Activation a : {Activation::identity, Activation::tanh, Activation::relu})
        CHECK(activation_from_string(to_string(a)) == a);
    CHECK_THROWS_AS(activation_from_string("gelu"), Error);
}
