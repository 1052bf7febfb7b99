#ifndef OTTS_OT_SINKHORN_HPP
#define OTTS_OT_SINKHORN_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "otts/error.hpp"

namespace otts {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = Mat<double>;
using Vector = Vec<double>;

struct SinkhornOptions {
    // Relative to the largest cost entry: the kernel uses epsilon * max|C|.
    double epsilon = 0.01;
    int max_iter = 1000;
    // Stop once the L1 marginal violation drops below tol.
    double tol = 1e-6;
};

template <typename Scalar>
struct TransportPlan {
    Mat<Scalar> coupling;
    Vec<Scalar> row_marginal;
    Vec<Scalar> col_marginal;

    Scalar total_mass() const { return coupling.sum(); }

    Scalar max_marginal_violation() const
    {
        const Scalar rows = (coupling.rowwise().sum() - row_marginal).cwiseAbs().maxCoeff();
        const Scalar cols =
            (coupling.colwise().sum().transpose() - col_marginal).cwiseAbs().maxCoeff();
        return std::max(rows, cols);
    }
};

template <typename Scalar>
struct OtResult {
    Scalar distance{0};
    TransportPlan<Scalar> plan;
    int iterations = 0;
    bool converged = false;
    // L1 marginal violation reached by the solver, before the final
    // projection onto the transport polytope.
    Scalar marginal_error{0};
};

template <typename Scalar>
Vec<Scalar> uniform_marginal(Eigen::Index n)
{
    return Vec<Scalar>::Constant(n, Scalar(1) / Scalar(n));
}

namespace detail {

template <typename Derived>
void require_probability_vector(const Eigen::MatrixBase<Derived>& p, const char* what)
{
    using Scalar = typename Derived::Scalar;
    require(p.size() > 0, std::string(what) + " is empty");
    require(p.allFinite(), std::string(what) + " has non-finite entries");
    require((p.array() >= Scalar(0)).all(), std::string(what) + " has negative entries");
    require(std::abs(p.sum() - Scalar(1)) <= Scalar(1e-9),
            std::string(what) + " does not sum to 1");
}

template <typename Scalar>
Scalar log_sum_exp(const Vec<Scalar>& x)
{
    const Scalar c = x.maxCoeff();
    if (!std::isfinite(c)) return c;
    return c + std::log((x.array() - c).exp().sum());
}

// Stabilized scaling iterations on a problem whose marginals are strictly
// positive. Potentials f, g live in the log domain; u, v are absorbed into
// them whenever they drift far from 1.
template <typename Scalar>
class ScalingSolver {
public:
    ScalingSolver(const Mat<Scalar>& cost, const Vec<Scalar>& a, const Vec<Scalar>& b)
        : cost_(cost), a_(a), b_(b), f_(Vec<Scalar>::Zero(a.size())),
          g_(Vec<Scalar>::Zero(b.size())) {}

    // Runs until the L1 row violation is below tol or the budget is spent.
    // Returns the violation reached.
    Scalar run(Scalar eps, Scalar tol, int budget, int& used)
    {
        eps_ = eps;
        rebuild_kernel();
        u_ = Vec<Scalar>::Ones(a_.size());
        v_ = Vec<Scalar>::Ones(b_.size());
        Scalar err = violation();
        for (int it = 0; it < budget && !(err < tol); ++it) {
            update_u();
            update_v();
            ++used;
            err = violation();
            if (needs_absorb()) absorb();
        }
        absorb();
        return err;
    }

    // Newton ascent on the semi-dual F(g) = <b, g> + sum_i a_i f_i(g), with f
    // eliminated in closed form (rows are then exact). Returns the L1
    // column violation reached.
    Scalar newton(Scalar tol, int budget, int& used)
    {
        const Eigen::Index n = cost_.rows();
        const Eigen::Index m = cost_.cols();
        Scalar value = semi_dual(g_);
        Mat<Scalar> p = plan();
        Scalar err = column_violation(p);
        if (m == 1) return err;
        for (int it = 0; it < budget && !(err < tol); ++it) {
            ++used;
            const Vec<Scalar> grad = b_ - p.colwise().sum().transpose();
            // Weighted graph Laplacian of the column coupling; dropping the
            // last coordinate removes the constant-shift null space.
            Mat<Scalar> lap = Mat<Scalar>::Zero(m, m);
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < m; ++j)
                    for (Eigen::Index k = j + 1; k < m; ++k) {
                        const Scalar w = p(i, j) * p(i, k) / a_(i);
                        lap(j, k) -= w;
                        lap(k, j) -= w;
                    }
            for (Eigen::Index j = 0; j < m; ++j) lap(j, j) = -(lap.row(j).sum() - lap(j, j));
            lap /= eps_;
            const Eigen::Index r = m - 1;
            Mat<Scalar> reduced = lap.topLeftCorner(r, r);
            reduced.diagonal().array() += Scalar(1e-12) * std::max(reduced.diagonal().maxCoeff(), Scalar(1e-300));
            Eigen::LDLT<Mat<Scalar>> ldlt(reduced);
            Vec<Scalar> dir = Vec<Scalar>::Zero(m);
            dir.head(r) = ldlt.solve(grad.head(r));
            if (ldlt.info() != Eigen::Success || !dir.allFinite()) break;
            const Scalar slope = grad.dot(dir);
            if (!(slope > Scalar(0))) break;

            // Near the optimum the value gain drops below roundoff, so a step
            // that shrinks the column violation is accepted as well.
            const Vec<Scalar> start = g_;
            Scalar step = 1;
            bool accepted = false;
            for (int ls = 0; ls < 40; ++ls, step *= Scalar(0.5)) {
                g_ = start + step * dir;
                const Scalar v = semi_dual(g_);
                const Mat<Scalar> trial_plan = plan();
                const Scalar trial_err = column_violation(trial_plan);
                if (v >= value + Scalar(1e-4) * step * slope || trial_err < err) {
                    value = v;
                    p = trial_plan;
                    err = trial_err;
                    accepted = true;
                    break;
                }
            }
            if (!accepted) {
                g_ = start;
                break;
            }
        }
        semi_dual(g_);
        return err;
    }

    Mat<Scalar> plan() const
    {
        Mat<Scalar> p(cost_.rows(), cost_.cols());
        for (Eigen::Index j = 0; j < cost_.cols(); ++j)
            for (Eigen::Index i = 0; i < cost_.rows(); ++i)
                p(i, j) = std::exp((f_(i) + g_(j) - cost_(i, j)) / eps_);
        return p;
    }

private:
    static constexpr Scalar absorb_threshold = Scalar(1e30);

    // Recomputes f from g (exact row marginals) and returns the semi-dual.
    Scalar semi_dual(const Vec<Scalar>& g)
    {
        Vec<Scalar> row(cost_.cols());
        Scalar value = b_.dot(g);
        for (Eigen::Index i = 0; i < cost_.rows(); ++i) {
            row = (g.array() - cost_.row(i).transpose().array()) / eps_;
            f_(i) = eps_ * (std::log(a_(i)) - log_sum_exp<Scalar>(row));
            value += a_(i) * f_(i);
        }
        return value;
    }

    Scalar column_violation(const Mat<Scalar>& p) const
    {
        return (p.colwise().sum().transpose() - b_).template lpNorm<1>();
    }

    void rebuild_kernel()
    {
        kernel_.resize(cost_.rows(), cost_.cols());
        for (Eigen::Index j = 0; j < cost_.cols(); ++j)
            for (Eigen::Index i = 0; i < cost_.rows(); ++i)
                kernel_(i, j) = std::exp((f_(i) + g_(j) - cost_(i, j)) / eps_);
    }

    void update_u()
    {
        const Vec<Scalar> kv = kernel_ * v_;
        if ((kv.array() > Scalar(0)).all() && kv.allFinite()) {
            u_ = a_.cwiseQuotient(kv);
            return;
        }
        // Underflow: fall back to an exact log-domain row update.
        absorb();
        Vec<Scalar> row(cost_.cols());
        for (Eigen::Index i = 0; i < cost_.rows(); ++i) {
            row = (g_.array() - cost_.row(i).transpose().array()) / eps_;
            f_(i) = eps_ * (std::log(a_(i)) - log_sum_exp<Scalar>(row));
        }
        rebuild_kernel();
    }

    void update_v()
    {
        const Vec<Scalar> ktu = kernel_.transpose() * u_;
        if ((ktu.array() > Scalar(0)).all() && ktu.allFinite()) {
            v_ = b_.cwiseQuotient(ktu);
            return;
        }
        absorb();
        Vec<Scalar> col(cost_.rows());
        for (Eigen::Index j = 0; j < cost_.cols(); ++j) {
            col = (f_.array() - cost_.col(j).array()) / eps_;
            g_(j) = eps_ * (std::log(b_(j)) - log_sum_exp<Scalar>(col));
        }
        rebuild_kernel();
    }

    Scalar violation() const
    {
        return (u_.cwiseProduct(kernel_ * v_) - a_).template lpNorm<1>();
    }

    bool needs_absorb() const
    {
        const auto big = [](const Vec<Scalar>& x) {
            return x.maxCoeff() > absorb_threshold || x.minCoeff() < Scalar(1) / absorb_threshold;
        };
        return big(u_) || big(v_);
    }

    void absorb()
    {
        if (u_.size() == 0) return;
        f_ += eps_ * u_.array().log().matrix();
        g_ += eps_ * v_.array().log().matrix();
        u_.setOnes();
        v_.setOnes();
        rebuild_kernel();
    }

    const Mat<Scalar>& cost_;
    const Vec<Scalar>& a_;
    const Vec<Scalar>& b_;
    Vec<Scalar> f_, g_, u_, v_;
    Mat<Scalar> kernel_;
    Scalar eps_{1};
};

// Moves an approximately feasible plan onto the transport polytope with the
// given marginals (rescale overfull rows/columns, then add a rank-one fix).
template <typename Scalar>
void project_to_marginals(Mat<Scalar>& p, const Vec<Scalar>& a, const Vec<Scalar>& b)
{
    const Vec<Scalar> rows = p.rowwise().sum();
    for (Eigen::Index i = 0; i < p.rows(); ++i)
        if (rows(i) > a(i)) p.row(i) *= a(i) / rows(i);
    const Vec<Scalar> cols = p.colwise().sum().transpose();
    for (Eigen::Index j = 0; j < p.cols(); ++j)
        if (cols(j) > b(j)) p.col(j) *= b(j) / cols(j);
    const Vec<Scalar> row_deficit = (a - p.rowwise().sum()).cwiseMax(Scalar(0));
    const Vec<Scalar> col_deficit = (b - p.colwise().sum().transpose()).cwiseMax(Scalar(0));
    const Scalar mass = row_deficit.sum();
    if (mass > Scalar(0)) p += row_deficit * col_deficit.transpose() / mass;
}

} // namespace detail

/// Entropic optimal transport between two discrete measures.
///
/// The returned distance is the linear transport cost <plan, cost> of the
/// entropic plan (not the regularized objective). Zero-mass marginal entries
/// are dropped from the solve and get an all-zero row or column in the plan.
/// The plan is always projected onto the exact marginal constraints;
/// `converged` reports whether the scaling iterations reached `tol` first.
template <typename DerivedC, typename DerivedA, typename DerivedB>
OtResult<typename DerivedC::Scalar> sinkhorn(const Eigen::MatrixBase<DerivedC>& cost,
                                             const Eigen::MatrixBase<DerivedA>& row_marginal,
                                             const Eigen::MatrixBase<DerivedB>& col_marginal,
                                             const SinkhornOptions& opts = {})
{
    using Scalar = typename DerivedC::Scalar;
    const Eigen::Index n = cost.rows();
    const Eigen::Index m = cost.cols();
    require(n > 0 && m > 0, "sinkhorn: empty cost matrix");
    require(cost.allFinite(), "sinkhorn: cost matrix has non-finite entries");
    require((cost.array() >= 0).all(), "sinkhorn: cost matrix has negative entries");
    require(row_marginal.size() == n && col_marginal.size() == m,
            "sinkhorn: marginal sizes do not match the cost matrix");
    detail::require_probability_vector(row_marginal, "sinkhorn: row marginal");
    detail::require_probability_vector(col_marginal, "sinkhorn: column marginal");
    require(opts.epsilon > 0, "sinkhorn: epsilon must be positive");
    require(opts.tol > 0, "sinkhorn: tol must be positive");
    require(opts.max_iter >= 0, "sinkhorn: max_iter must be non-negative");

    std::vector<Eigen::Index> rows, cols;
    for (Eigen::Index i = 0; i < n; ++i)
        if (row_marginal(i) > Scalar(0)) rows.push_back(i);
    for (Eigen::Index j = 0; j < m; ++j)
        if (col_marginal(j) > Scalar(0)) cols.push_back(j);

    const auto nr = static_cast<Eigen::Index>(rows.size());
    const auto nc = static_cast<Eigen::Index>(cols.size());
    Mat<Scalar> c(nr, nc);
    Vec<Scalar> a(nr), b(nc);
    for (Eigen::Index i = 0; i < nr; ++i) a(i) = row_marginal(rows[i]);
    for (Eigen::Index j = 0; j < nc; ++j) b(j) = col_marginal(cols[j]);
    a /= a.sum();
    b /= b.sum();
    for (Eigen::Index j = 0; j < nc; ++j)
        for (Eigen::Index i = 0; i < nr; ++i) c(i, j) = cost(rows[i], cols[j]);

    const Scalar scale = c.cwiseAbs().maxCoeff();
    const Scalar unit = scale > Scalar(0) ? scale : Scalar(1);
    const Scalar eps = Scalar(opts.epsilon) * unit;

    OtResult<Scalar> result;
    detail::ScalingSolver<Scalar> solver(c, a, b);

    // Epsilon scaling: coarse stages warm-start the potentials of the target
    // stage; only the final stage decides convergence.
    int used = 0;
    Scalar stage = unit;
    while (stage > Scalar(10) * eps && used < opts.max_iter) {
        const int budget = std::min(50, opts.max_iter - used);
        solver.run(stage, Scalar(1e-3), budget, used);
        stage *= Scalar(0.1);
    }
    // The solve aims three orders below tol so that transposed problems agree
    // closely; convergence is still judged against tol.
    const Scalar target = Scalar(opts.tol) * Scalar(1e-3);
    Scalar err = solver.run(eps, target, std::min(20, opts.max_iter - used), used);
    // Newton stalls on badly conditioned couplings; a batch of plain scaling
    // sweeps between attempts gets it moving again.
    while (!(err < target) && used < opts.max_iter) {
        err = solver.newton(target, opts.max_iter - used, used);
        if (err < target || used >= opts.max_iter) break;
        err = solver.run(eps, target, std::min(50, opts.max_iter - used), used);
    }

    Mat<Scalar> reduced = solver.plan();
    detail::project_to_marginals(reduced, a, b);

    result.plan.row_marginal = row_marginal;
    result.plan.col_marginal = col_marginal;
    result.plan.coupling = Mat<Scalar>::Zero(n, m);
    for (Eigen::Index j = 0; j < nc; ++j)
        for (Eigen::Index i = 0; i < nr; ++i)
            result.plan.coupling(rows[i], cols[j]) = reduced(i, j);
    result.iterations = used;
    result.marginal_error = err;
    result.converged = err < Scalar(opts.tol) && result.plan.coupling.allFinite();
    result.distance = (result.plan.coupling.array() * cost.array()).sum();
    return result;
}

} // namespace otts

#endif // OTTS_OT_SINKHORN_HPP
