#include "otts/encoder.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "otts/ot/plan_gradient.hpp"

namespace otts {

std::string to_string(Activation a)
{
    switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    }
    return "unknown";
}

Activation activation_from_string(const std::string& name)
{
    if (name == "identity") return Activation::identity;
    if (name == "tanh") return Activation::tanh;
    if (name == "relu") return Activation::relu;
    invalid_input("unknown activation '" + name + "'");
}

namespace {

Matrix activate(Activation a, const Matrix& pre)
{
    switch (a) {
    case Activation::identity: return pre;
    case Activation::tanh: return pre.array().tanh().matrix();
    case Activation::relu: return pre.cwiseMax(0.0);
    }
    return pre;
}

// Derivative expressed through the pre-activation.
Matrix activation_slope(Activation a, const Matrix& pre)
{
    switch (a) {
    case Activation::identity: return Matrix::Ones(pre.rows(), pre.cols());
    case Activation::tanh: return (1.0 - pre.array().tanh().square()).matrix();
    case Activation::relu: return (pre.array() > 0.0).cast<double>().matrix();
    }
    return Matrix::Ones(pre.rows(), pre.cols());
}

struct Trace {
    std::vector<Matrix> inputs;  // input to each layer, rows = samples
    std::vector<Matrix> pre;     // pre-activation of each layer
    Matrix output;
};

Trace run_forward(const EncoderParams& p, const Matrix& x)
{
    Trace t;
    Matrix h = x;
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const Layer& layer = p.layers[l];
        Matrix pre = h * layer.weight.transpose();
        pre.rowwise() += layer.bias.transpose();
        t.inputs.push_back(std::move(h));
        h = (l + 1 < p.layers.size()) ? activate(p.activation, pre) : pre;
        t.pre.push_back(std::move(pre));
    }
    t.output = std::move(h);
    return t;
}

} // namespace

Eigen::Index EncoderParams::num_scalars() const
{
    Eigen::Index n = 0;
    for (const Layer& l : layers) n += l.weight.size() + l.bias.size();
    return n;
}

bool same_values(const EncoderParams& a, const EncoderParams& b)
{
    if (a.layers.size() != b.layers.size() || a.activation != b.activation) return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const Layer& x = a.layers[l];
        const Layer& y = b.layers[l];
        if (x.weight.rows() != y.weight.rows() || x.weight.cols() != y.weight.cols() ||
            x.bias.size() != y.bias.size())
            return false;
        if (std::memcmp(x.weight.data(), y.weight.data(), sizeof(double) * x.weight.size()) != 0 ||
            std::memcmp(x.bias.data(), y.bias.data(), sizeof(double) * x.bias.size()) != 0)
            return false;
    }
    return true;
}

EncoderParams init_encoder(const EncoderShape& shape, std::uint64_t seed)
{
    require(shape.widths.size() >= 2, "init_encoder: need at least input and output widths");
    for (Eigen::Index w : shape.widths) require(w > 0, "init_encoder: widths must be positive");
    std::mt19937_64 rng(seed);
    EncoderParams p;
    p.activation = shape.activation;
    for (std::size_t l = 0; l + 1 < shape.widths.size(); ++l) {
        const Eigen::Index fan_in = shape.widths[l];
        const Eigen::Index fan_out = shape.widths[l + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> uniform(-bound, bound);
        Layer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out)};
        for (Eigen::Index j = 0; j < fan_in; ++j)
            for (Eigen::Index i = 0; i < fan_out; ++i) layer.weight(i, j) = uniform(rng);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

EncoderParams identity_encoder(Eigen::Index dim)
{
    require(dim > 0, "identity_encoder: dimension must be positive");
    EncoderParams p;
    p.activation = Activation::identity;
    p.layers.push_back({Matrix::Identity(dim, dim), Vector::Zero(dim)});
    return p;
}

EncoderParams zeros_like(const EncoderParams& p)
{
    EncoderParams z = p;
    for (Layer& l : z.layers) {
        l.weight.setZero();
        l.bias.setZero();
    }
    return z;
}

void validate_params(const EncoderParams& p)
{
    require(!p.layers.empty(), "encoder has no layers");
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const Layer& layer = p.layers[l];
        require(layer.weight.rows() > 0 && layer.weight.cols() > 0, "encoder layer is empty");
        require(layer.bias.size() == layer.weight.rows(), "encoder bias size does not match weight rows");
        if (l > 0)
            require(layer.weight.cols() == p.layers[l - 1].weight.rows(),
                    "encoder layer shapes do not chain");
        require(layer.weight.allFinite() && layer.bias.allFinite(), "encoder has non-finite parameters");
    }
}

void require_same_shape(const EncoderParams& a, const EncoderParams& b, const char* what)
{
    bool same = a.layers.size() == b.layers.size();
    for (std::size_t l = 0; same && l < a.layers.size(); ++l)
        same = a.layers[l].weight.rows() == b.layers[l].weight.rows() &&
               a.layers[l].weight.cols() == b.layers[l].weight.cols() &&
               a.layers[l].bias.size() == b.layers[l].bias.size();
    require(same, std::string(what) + ": parameter shapes differ");
}

Vector forward(const EncoderParams& p, const Vector& x)
{
    return embed(p, x.transpose()).row(0).transpose();
}

Matrix embed(const EncoderParams& p, const Matrix& x)
{
    require(!p.layers.empty(), "embed: encoder has no layers");
    require(x.cols() == p.input_dim(), "embed: input dimension " + std::to_string(x.cols()) +
                                           " does not match encoder input " +
                                           std::to_string(p.input_dim()));
    return run_forward(p, x).output;
}

EncoderParams backward(const EncoderParams& p, const Matrix& x, const Matrix& upstream)
{
    const Trace t = run_forward(p, x);
    require(upstream.rows() == t.output.rows() && upstream.cols() == t.output.cols(),
            "backward: upstream gradient shape mismatch");
    EncoderParams g = zeros_like(p);
    Matrix delta = upstream;
    for (std::size_t l = p.layers.size(); l-- > 0;) {
        if (l + 1 < p.layers.size()) delta = delta.cwiseProduct(activation_slope(p.activation, t.pre[l]));
        g.layers[l].weight = delta.transpose() * t.inputs[l];
        g.layers[l].bias = delta.colwise().sum().transpose();
        if (l > 0) delta = delta * p.layers[l].weight;
    }
    return g;
}

Vector flatten(const EncoderParams& p)
{
    Vector out(p.num_scalars());
    Eigen::Index k = 0;
    for (const Layer& l : p.layers) {
        out.segment(k, l.weight.size()) = l.weight.reshaped();
        k += l.weight.size();
        out.segment(k, l.bias.size()) = l.bias;
        k += l.bias.size();
    }
    return out;
}

EncoderParams unflatten(const EncoderParams& like, const Vector& values)
{
    require(values.size() == like.num_scalars(), "unflatten: wrong number of scalars");
    EncoderParams p = like;
    Eigen::Index k = 0;
    for (Layer& l : p.layers) {
        l.weight.reshaped() = values.segment(k, l.weight.size());
        k += l.weight.size();
        l.bias = values.segment(k, l.bias.size());
        k += l.bias.size();
    }
    return p;
}

EncoderParams ema_update(const EncoderParams& target, const EncoderParams& online, double tau)
{
    require(tau >= 0.0 && tau <= 1.0, "ema_update: tau must lie in [0, 1]");
    require_same_shape(target, online, "ema_update");
    EncoderParams out = target;
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        out.layers[l].weight =
            (tau * target.layers[l].weight.array() + (1.0 - tau) * online.layers[l].weight.array()).matrix();
        out.layers[l].bias =
            (tau * target.layers[l].bias.array() + (1.0 - tau) * online.layers[l].bias.array()).matrix();
    }
    out.param_version = target.param_version + 1;
    return out;
}

AdamState init_adam(const EncoderParams& p)
{
    AdamState s;
    s.m = Vector::Zero(p.num_scalars());
    s.v = Vector::Zero(p.num_scalars());
    return s;
}

std::pair<EncoderParams, AdamState> adam_step(const EncoderParams& p, const EncoderParams& grad,
                                              AdamState state, double eta)
{
    require_same_shape(p, grad, "adam_step");
    require(eta > 0.0, "adam_step: learning rate must be positive");
    const Vector g = flatten(grad);
    require(g.allFinite(), "adam_step: non-finite gradient");
    require(state.m.size() == g.size() && state.v.size() == g.size(),
            "adam_step: optimizer state does not match parameters");

    state.step += 1;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    const Vector m_hat = state.m / c1;
    const Vector v_hat = state.v / c2;
    const Vector update = eta * m_hat.cwiseQuotient((v_hat.cwiseSqrt().array() + state.epsilon).matrix());

    EncoderParams next = unflatten(p, flatten(p) - update);
    next.param_version = p.param_version + 1;
    return {std::move(next), std::move(state)};
}

TaskGraphd embed_graph(const EncoderParams& p, const Task& task, const GraphOptions& opts)
{
    return build_graph(embed(p, task.features), task.task_id, opts);
}

Matrix ot_loss_embedding_grad(const Matrix& online, const Matrix& target, const OtLoss<double>& loss,
                              double r, const SolverConfig& cfg, PlanGradient mode)
{
    const Eigen::Index n = online.rows();
    const Eigen::Index m = target.rows();
    Matrix grad = Matrix::Zero(n, online.cols());
    // The identical-node shortcut yields an exact diagonal plan with nothing to correct.
    const bool implicit = mode == PlanGradient::implicit &&
                          !(n == m && online.cols() == target.cols() && online == target);

    if (loss.wasserstein && r > 0.0) {
        const Matrix& plan = loss.wasserstein->plan.coupling;
        const Matrix cost = pairwise_distances(online, target);
        const Matrix dcost =
            implicit ? PlanSensitivity<double>(plan, cost, cfg.sinkhorn.epsilon).value_gradient() : plan;
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < m; ++j)
                if (cost(i, j) > 0.0 && dcost(i, j) != 0.0)
                    grad.row(i) += (r * dcost(i, j) / cost(i, j)) * (online.row(i) - target.row(j));
    }

    if (loss.gromov && r < 1.0) {
        const Matrix c1 = pairwise_distances(online, online);
        const Matrix c2 = pairwise_distances(target, target);
        const Matrix s = gw_cost_gradient(c1, c2, loss.gromov->plan.coupling, cfg.sinkhorn.epsilon, implicit);
        for (Eigen::Index a = 0; a < n; ++a)
            for (Eigen::Index b = 0; b < n; ++b) {
                if (a == b || c1(a, b) == 0.0) continue;
                grad.row(a) += ((1.0 - r) * (s(a, b) + s(b, a)) / c1(a, b)) * (online.row(a) - online.row(b));
            }
    }
    return grad;
}

namespace {

// d/dz of z / |z| applied to the upstream gradient, row by row.
Matrix normalize_backward(const Matrix& raw, const Matrix& upstream)
{
    Matrix out = upstream;
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        const double norm = raw.row(i).norm();
        if (norm == 0.0) continue;
        const Eigen::RowVectorXd unit = raw.row(i) / norm;
        out.row(i) = (upstream.row(i) - upstream.row(i).dot(unit) * unit) / norm;
    }
    return out;
}

struct Direction {
    double loss;
    Matrix embed_grad;  // gradient w.r.t. the raw online embeddings
    bool converged;
};

Direction one_direction(const Matrix& online_raw, const Matrix& target_raw, TaskId id, double r,
                        const SolverConfig& cfg, const GraphOptions& graph, const PlanGradient* mode)
{
    const TaskGraphd g_online = build_graph(online_raw, id, graph);
    const TaskGraphd g_target = build_graph(target_raw, id, graph);
    const OtLoss<double> loss = ot_loss(g_online, g_target, r, cfg);
    Direction d{loss.value, Matrix(), loss.converged()};
    if (mode) {
        d.embed_grad = ot_loss_embedding_grad(g_online.nodes, g_target.nodes, loss, r, cfg, *mode);
        if (graph.l2_normalize) d.embed_grad = normalize_backward(online_raw, d.embed_grad);
    }
    return d;
}

PairLossGrad evaluate_pair(const EncoderParams& theta, const EncoderParams& xi, const Task& t1,
                           const Task& t2, double r, const SolverConfig& cfg, const GraphOptions& graph,
                           const PlanGradient* mode)
{
    require_same_shape(theta, xi, "pair loss");
    const Matrix online1 = embed(theta, t1.features);
    const Matrix online2 = embed(theta, t2.features);
    const Matrix target1 = embed(xi, t1.features);
    const Matrix target2 = embed(xi, t2.features);

    const Direction forward_dir = one_direction(online1, target2, t1.task_id, r, cfg, graph, mode);
    const Direction swapped_dir = one_direction(online2, target1, t2.task_id, r, cfg, graph, mode);

    PairLossGrad out;
    out.loss = forward_dir.loss + swapped_dir.loss;
    out.converged = forward_dir.converged && swapped_dir.converged;
    if (mode) {
        out.grad = backward(theta, t1.features, forward_dir.embed_grad);
        const EncoderParams other = backward(theta, t2.features, swapped_dir.embed_grad);
        for (std::size_t l = 0; l < out.grad.layers.size(); ++l) {
            out.grad.layers[l].weight += other.layers[l].weight;
            out.grad.layers[l].bias += other.layers[l].bias;
        }
    }
    return out;
}

} // namespace

PairLossGrad grad_ot_loss(const EncoderParams& theta, const EncoderParams& xi, const Task& t1,
                          const Task& t2, double r, const SolverConfig& cfg, const GraphOptions& graph,
                          PlanGradient mode)
{
    return evaluate_pair(theta, xi, t1, t2, r, cfg, graph, &mode);
}

double pair_loss(const EncoderParams& theta, const EncoderParams& xi, const Task& t1, const Task& t2,
                 double r, const SolverConfig& cfg, const GraphOptions& graph)
{
    return evaluate_pair(theta, xi, t1, t2, r, cfg, graph, nullptr).loss;
}

} // namespace otts
