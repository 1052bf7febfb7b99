#ifndef OTTS_OT_GRAPH_OT_HPP
#define OTTS_OT_GRAPH_OT_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "otts/error.hpp"
#include "otts/ot/sinkhorn.hpp"
#include "otts/task_graph.hpp"

namespace otts {

struct SolverConfig {
    SinkhornOptions sinkhorn;
    // Outer linearization steps of the Gromov-Wasserstein solver.
    int gw_outer_iter = 50;
    // Outer loop stops when no plan entry moves by more than this.
    double gw_tol = 1e-9;
    // Besides the product-of-marginals start, also start from a coupling that
    // matches nodes with similar distance profiles and from a fixed vertex
    // coupling, keeping the best run.
    bool gw_restarts = true;
};

namespace detail {

template <typename Scalar>
bool same_nodes(const TaskGraph<Scalar>& a, const TaskGraph<Scalar>& b)
{
    return a.nodes.rows() == b.nodes.rows() && a.nodes.cols() == b.nodes.cols() &&
           a.nodes == b.nodes;
}

// Identical node lists: the diagonal coupling has zero cost for both the
// Wasserstein and the Gromov-Wasserstein objective.
template <typename Scalar>
OtResult<Scalar> identity_result(Eigen::Index n)
{
    OtResult<Scalar> res;
    res.plan.row_marginal = uniform_marginal<Scalar>(n);
    res.plan.col_marginal = res.plan.row_marginal;
    res.plan.coupling = Mat<Scalar>(res.plan.row_marginal.asDiagonal());
    res.converged = true;
    return res;
}

// G(i,j) = sum_{k,l} |c1(i,k) - c2(j,l)| t(k,l)
template <typename Scalar>
Mat<Scalar> gw_linearized_cost(const Mat<Scalar>& c1, const Mat<Scalar>& c2, const Mat<Scalar>& t)
{
    const Eigen::Index n = c1.rows();
    const Eigen::Index m = c2.rows();
    Mat<Scalar> g(n, m);
    for (Eigen::Index j = 0; j < m; ++j) {
        for (Eigen::Index i = 0; i < n; ++i) {
            Scalar s = 0;
            for (Eigen::Index l = 0; l < m; ++l) {
                const Scalar c2jl = c2(j, l);
                for (Eigen::Index k = 0; k < n; ++k) s += std::abs(c1(i, k) - c2jl) * t(k, l);
            }
            g(i, j) = s;
        }
    }
    return g;
}

template <typename Scalar>
Scalar gw_objective(const Mat<Scalar>& c1, const Mat<Scalar>& c2, const Mat<Scalar>& t)
{
    return (t.array() * gw_linearized_cost(c1, c2, t).array()).sum();
}

// 1-D Wasserstein-1 distance between two weighted point sets on the line.
template <typename Scalar>
Scalar wasserstein_1d(std::vector<std::pair<Scalar, Scalar>> x, std::vector<std::pair<Scalar, Scalar>> y)
{
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    Scalar total = 0;
    std::size_t i = 0, j = 0;
    Scalar wx = x.empty() ? 0 : x[0].second;
    Scalar wy = y.empty() ? 0 : y[0].second;
    while (i < x.size() && j < y.size()) {
        const Scalar w = std::min(wx, wy);
        total += w * std::abs(x[i].first - y[j].first);
        wx -= w;
        wy -= w;
        if (wx <= Scalar(0) && ++i < x.size()) wx = x[i].second;
        if (wy <= Scalar(0) && ++j < y.size()) wy = y[j].second;
    }
    return total;
}

// Cost between node i of the first graph and node j of the second: distance
// between the distributions of their edge lengths.
template <typename Scalar>
Mat<Scalar> distance_profile_cost(const Mat<Scalar>& c1, const Mat<Scalar>& c2,
                                  const Vec<Scalar>& a, const Vec<Scalar>& b)
{
    Mat<Scalar> p(c1.rows(), c2.rows());
    for (Eigen::Index i = 0; i < c1.rows(); ++i) {
        std::vector<std::pair<Scalar, Scalar>> x;
        for (Eigen::Index k = 0; k < c1.cols(); ++k) x.emplace_back(c1(i, k), a(k));
        for (Eigen::Index j = 0; j < c2.rows(); ++j) {
            std::vector<std::pair<Scalar, Scalar>> y;
            for (Eigen::Index l = 0; l < c2.cols(); ++l) y.emplace_back(c2(j, l), b(l));
            p(i, j) = wasserstein_1d(x, y);
        }
    }
    return p;
}

// Vertex coupling filled greedily from the top-left cell; the diagonal for
// equal uniform marginals.
template <typename Scalar>
Mat<Scalar> northwest_corner(const Vec<Scalar>& a, const Vec<Scalar>& b)
{
    Mat<Scalar> t = Mat<Scalar>::Zero(a.size(), b.size());
    Vec<Scalar> ra = a, rb = b;
    Eigen::Index i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const Scalar w = std::min(ra(i), rb(j));
        t(i, j) += w;
        ra(i) -= w;
        rb(j) -= w;
        if (ra(i) <= Scalar(0) && i + 1 < a.size()) ++i;
        else if (rb(j) <= Scalar(0)) ++j;
        else ++i;
    }
    return t;
}

// Permutations that only use cells holding at least a quarter of their row
// mass in `plan`, at most `limit` of them. Empty when every row already has
// a single such cell.
template <typename Scalar>
std::vector<std::vector<Eigen::Index>> support_permutations(const Mat<Scalar>& plan, const Vec<Scalar>& a,
                                                            std::size_t limit)
{
    const Eigen::Index n = plan.rows();
    std::vector<std::vector<Eigen::Index>> options(static_cast<std::size_t>(n));
    bool sharp = true;
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < plan.cols(); ++j)
            if (plan(i, j) >= Scalar(0.25) * a(i)) options[static_cast<std::size_t>(i)].push_back(j);
        sharp = sharp && options[static_cast<std::size_t>(i)].size() == 1;
    }
    std::vector<std::vector<Eigen::Index>> found;
    if (sharp) return found;
    std::vector<Eigen::Index> perm;
    std::vector<bool> used(static_cast<std::size_t>(plan.cols()), false);
    const std::function<void(Eigen::Index)> extend = [&](Eigen::Index i) {
        if (found.size() >= limit) return;
        if (i == n) {
            found.push_back(perm);
            return;
        }
        for (Eigen::Index j : options[static_cast<std::size_t>(i)]) {
            if (used[static_cast<std::size_t>(j)]) continue;
            used[static_cast<std::size_t>(j)] = true;
            perm.push_back(j);
            extend(i + 1);
            perm.pop_back();
            used[static_cast<std::size_t>(j)] = false;
        }
    };
    extend(0);
    return found;
}

template <typename Scalar>
OtResult<Scalar> gw_from(const Mat<Scalar>& c1, const Mat<Scalar>& c2, const Vec<Scalar>& a,
                         const Vec<Scalar>& b, Mat<Scalar> plan, const SolverConfig& cfg)
{
    OtResult<Scalar> res;
    bool inner_ok = true;
    bool outer_ok = false;
    int outer = 0;
    for (; outer < cfg.gw_outer_iter; ++outer) {
        Mat<Scalar> g = gw_linearized_cost(c1, c2, plan);
        g.array() -= g.minCoeff();  // a constant shift leaves the plan unchanged
        OtResult<Scalar> step = sinkhorn(g, a, b, cfg.sinkhorn);
        const Scalar delta = (step.plan.coupling - plan).cwiseAbs().maxCoeff();
        plan = std::move(step.plan.coupling);
        inner_ok = step.converged;
        if (delta < Scalar(cfg.gw_tol)) {
            outer_ok = true;
            ++outer;
            break;
        }
    }
    res.plan.coupling = std::move(plan);
    res.plan.row_marginal = a;
    res.plan.col_marginal = b;
    res.iterations = outer;
    res.converged = outer_ok && inner_ok;
    res.marginal_error = res.plan.max_marginal_violation();
    res.distance = std::max(Scalar(0), gw_objective(c1, c2, res.plan.coupling));
    return res;
}

template <typename Scalar>
void require_intra_cost(const Mat<Scalar>& c, const char* what)
{
    require(c.rows() > 0 && c.rows() == c.cols(), std::string(what) + ": intra cost must be square");
    require(c.allFinite(), std::string(what) + ": intra cost has non-finite entries");
    const Scalar scale = std::max(Scalar(1), c.cwiseAbs().maxCoeff());
    require((c - c.transpose()).cwiseAbs().maxCoeff() <= Scalar(1e-9) * scale,
            std::string(what) + ": intra cost is not symmetric");
    require(c.diagonal().cwiseAbs().maxCoeff() == Scalar(0),
            std::string(what) + ": intra cost has a non-zero diagonal");
}

} // namespace detail

/// Wasserstein distance between the node sets of two graphs under uniform
/// node weights and Euclidean ground cost.
template <typename Scalar>
OtResult<Scalar> wasserstein(const TaskGraph<Scalar>& a, const TaskGraph<Scalar>& b,
                             const SolverConfig& cfg = {})
{
    require(a.size() > 0 && b.size() > 0, "wasserstein: empty graph");
    require(a.dim() == b.dim(), "wasserstein: feature dimensions differ");
    if (detail::same_nodes(a, b)) return detail::identity_result<Scalar>(a.size());
    const Mat<Scalar> cost = pairwise_distances(a.nodes, b.nodes);
    return sinkhorn(cost, uniform_marginal<Scalar>(a.size()), uniform_marginal<Scalar>(b.size()),
                    cfg.sinkhorn);
}

/// Entropic Gromov-Wasserstein discrepancy between two intra-graph cost
/// matrices with loss |c1(i,k) - c2(j,l)|, solved by repeated linearization
/// (each step is a Sinkhorn solve against the gradient of the quadratic
/// objective). The distance is the unregularized objective at the final plan.
template <typename Scalar>
OtResult<Scalar> gromov_wasserstein(const Mat<Scalar>& c1, const Mat<Scalar>& c2,
                                    const Vec<Scalar>& a, const Vec<Scalar>& b,
                                    const SolverConfig& cfg = {})
{
    detail::require_intra_cost(c1, "gromov_wasserstein");
    detail::require_intra_cost(c2, "gromov_wasserstein");
    require(a.size() == c1.rows() && b.size() == c2.rows(),
            "gromov_wasserstein: marginal sizes do not match");
    detail::require_probability_vector(a, "gromov_wasserstein: row marginal");
    detail::require_probability_vector(b, "gromov_wasserstein: column marginal");
    require(cfg.gw_outer_iter >= 1, "gromov_wasserstein: need at least one outer iteration");

    std::vector<Mat<Scalar>> starts{Mat<Scalar>(a * b.transpose())};
    const bool restarts = cfg.gw_restarts && !(c1.rows() == 1 && c2.rows() == 1);
    if (restarts) {
        const Mat<Scalar> profile = detail::distance_profile_cost(c1, c2, a, b);
        starts.push_back(sinkhorn(profile, a, b, cfg.sinkhorn).plan.coupling);
        starts.push_back(detail::northwest_corner(a, b));
    }
    // A run that stops on a fractional plan sits on a saddle; whether it
    // escapes depends on rounding noise, so every permutation in its support
    // is tried as a fresh start.
    const bool square = a.size() == b.size() && a == b;
    std::optional<OtResult<Scalar>> best;
    const auto keep = [&](OtResult<Scalar> run) {
        if (!best || run.distance < best->distance) best = std::move(run);
    };
    for (Mat<Scalar>& start : starts) {
        OtResult<Scalar> run = detail::gw_from(c1, c2, a, b, std::move(start), cfg);
        std::vector<std::vector<Eigen::Index>> perms;
        if (restarts && square) perms = detail::support_permutations(run.plan.coupling, a, 24);
        keep(std::move(run));
        for (const auto& perm : perms) {
            Mat<Scalar> t = Mat<Scalar>::Zero(a.size(), b.size());
            for (Eigen::Index i = 0; i < a.size(); ++i) t(i, perm[static_cast<std::size_t>(i)]) = a(i);
            keep(detail::gw_from(c1, c2, a, b, std::move(t), cfg));
        }
    }
    return *std::move(best);
}

template <typename Scalar>
OtResult<Scalar> gromov_wasserstein(const TaskGraph<Scalar>& a, const TaskGraph<Scalar>& b,
                                    const SolverConfig& cfg = {})
{
    require(a.size() > 0 && b.size() > 0, "gromov_wasserstein: empty graph");
    if (detail::same_nodes(a, b)) return detail::identity_result<Scalar>(a.size());
    return gromov_wasserstein(a.intra_cost, b.intra_cost, uniform_marginal<Scalar>(a.size()),
                              uniform_marginal<Scalar>(b.size()), cfg);
}

/// Mixed transport loss r * W + (1 - r) * GW. A term whose weight is zero is
/// not computed.
template <typename Scalar>
struct OtLoss {
    Scalar value{0};
    std::optional<OtResult<Scalar>> wasserstein;
    std::optional<OtResult<Scalar>> gromov;

    bool converged() const
    {
        return (!wasserstein || wasserstein->converged) && (!gromov || gromov->converged);
    }
};

template <typename Scalar>
OtLoss<Scalar> ot_loss(const TaskGraph<Scalar>& a, const TaskGraph<Scalar>& b, double r,
                       const SolverConfig& cfg = {})
{
    require(r >= 0.0 && r <= 1.0, "ot_loss: mixing weight r must lie in [0, 1]");
    require(a.size() > 0 && b.size() > 0, "ot_loss: empty graph");
    OtLoss<Scalar> loss;
    if (r > 0.0) {
        loss.wasserstein = wasserstein(a, b, cfg);
        loss.value += Scalar(r) * loss.wasserstein->distance;
    }
    if (r < 1.0) {
        loss.gromov = gromov_wasserstein(a, b, cfg);
        loss.value += Scalar(1.0 - r) * loss.gromov->distance;
    }
    return loss;
}

/// Exact optimal assignment value (1/n) min_sigma sum_i c(i, sigma(i)) by
/// enumerating every permutation. Refuses n > 8.
template <typename Derived>
typename Derived::Scalar exact_assignment_value(const Eigen::MatrixBase<Derived>& cost)
{
    using Scalar = typename Derived::Scalar;
    const Eigen::Index n = cost.rows();
    require(n > 0 && cost.cols() == n, "exact oracle: cost matrix must be square and non-empty");
    require(n <= 8, "exact oracle: refusing n > 8 (factorial enumeration)");
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    Scalar best = std::numeric_limits<Scalar>::infinity();
    do {
        Scalar s = 0;
        for (Eigen::Index i = 0; i < n; ++i) s += cost(i, perm[static_cast<std::size_t>(i)]);
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / Scalar(n);
}

template <typename Scalar>
Scalar exact_wd_oracle(const TaskGraph<Scalar>& a, const TaskGraph<Scalar>& b)
{
    require(a.size() == b.size(), "exact_wd_oracle: node counts differ");
    require(a.dim() == b.dim(), "exact_wd_oracle: feature dimensions differ");
    return exact_assignment_value(pairwise_distances(a.nodes, b.nodes));
}

} // namespace otts

#endif // OTTS_OT_GRAPH_OT_HPP
