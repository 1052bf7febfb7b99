#ifndef OTTS_ENCODER_HPP
#define OTTS_ENCODER_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "otts/ot/graph_ot.hpp"
#include "otts/task_graph.hpp"

namespace otts {

enum class Activation : std::uint32_t { identity = 0, tanh = 1, relu = 2 };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct Layer {
    Matrix weight;  // out x in
    Vector bias;    // out
};

/// Multilayer perceptron parameters. The activation is applied after every
/// layer except the last, so a single-layer encoder is affine.
struct EncoderParams {
    std::vector<Layer> layers;
    Activation activation = Activation::tanh;
    std::int64_t param_version = 0;

    Eigen::Index input_dim() const { return layers.front().weight.cols(); }
    Eigen::Index output_dim() const { return layers.back().weight.rows(); }
    Eigen::Index num_scalars() const;
};

/// Parameters compare equal when every scalar is bit-identical.
bool same_values(const EncoderParams& a, const EncoderParams& b);

struct EncoderShape {
    std::vector<Eigen::Index> widths{16, 32, 8};
    Activation activation = Activation::tanh;
};

/// Uniform fan-in scaled weights (bound sqrt(6 / fan_in)), zero biases.
EncoderParams init_encoder(const EncoderShape& shape, std::uint64_t seed);
EncoderParams identity_encoder(Eigen::Index dim);
EncoderParams zeros_like(const EncoderParams& p);

/// Throws unless layer shapes chain and all parameters are finite.
void validate_params(const EncoderParams& p);
void require_same_shape(const EncoderParams& a, const EncoderParams& b, const char* what);

Vector forward(const EncoderParams& p, const Vector& x);
/// Embeds every row of `x`.
Matrix embed(const EncoderParams& p, const Matrix& x);

/// Gradient of sum(upstream .* embed(p, x)) with respect to the parameters.
EncoderParams backward(const EncoderParams& p, const Matrix& x, const Matrix& upstream);

Vector flatten(const EncoderParams& p);
EncoderParams unflatten(const EncoderParams& like, const Vector& values);

/// xi' = tau * xi + (1 - tau) * theta, scalar by scalar.
EncoderParams ema_update(const EncoderParams& target, const EncoderParams& online, double tau);

struct AdamState {
    Vector m;
    Vector v;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

AdamState init_adam(const EncoderParams& p);

std::pair<EncoderParams, AdamState> adam_step(const EncoderParams& p, const EncoderParams& grad,
                                              AdamState state, double eta);

TaskGraphd embed_graph(const EncoderParams& p, const Task& task, const GraphOptions& opts = {});

/// How transport plans enter the gradient. `envelope` freezes the plans;
/// `implicit` also differentiates the plans through their optimality
/// conditions, which makes it the exact gradient of the reported loss.
enum class PlanGradient { implicit, envelope };

struct PairLossGrad {
    double loss = 0.0;
    EncoderParams grad;
    bool converged = true;
};

/// Symmetric positive-pair loss
///   L(F_theta(t1), F_xi(t2)) + L(F_theta(t2), F_xi(t1))
/// with L = r * W + (1 - r) * GW, and its gradient with respect to the online
/// parameters. The target branch is treated as constant.
PairLossGrad grad_ot_loss(const EncoderParams& theta, const EncoderParams& xi, const Task& t1,
                          const Task& t2, double r, const SolverConfig& cfg,
                          const GraphOptions& graph = {},
                          PlanGradient mode = PlanGradient::implicit);

/// Loss value only; same computation as grad_ot_loss without the backward pass.
double pair_loss(const EncoderParams& theta, const EncoderParams& xi, const Task& t1,
                 const Task& t2, double r, const SolverConfig& cfg, const GraphOptions& graph = {});

/// Gradient of ot_loss(graph(online), graph(target)) with respect to the
/// online node embeddings, at the plans stored in `loss`.
Matrix ot_loss_embedding_grad(const Matrix& online, const Matrix& target, const OtLoss<double>& loss,
                              double r, const SolverConfig& cfg,
                              PlanGradient mode = PlanGradient::implicit);

} // namespace otts

#endif // OTTS_ENCODER_HPP
