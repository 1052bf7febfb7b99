#ifndef OTTS_OT_PLAN_GRADIENT_HPP
#define OTTS_OT_PLAN_GRADIENT_HPP

// Sensitivities of entropic transport values with respect to their cost
// matrices, obtained by implicit differentiation of the optimality
// conditions at the returned plan.
//
// The entropic plan is P = exp((f + g - C) / eps) under marginal constraints.
// Perturbing C gives dP = -(1/eps) P .* (dC - dx - dy) where (dx, dy) restore
// the marginals, so adjoints need one (n + m) linear solve per plan.

#include <Eigen/Dense>

#include "otts/ot/sinkhorn.hpp"

namespace otts {

template <typename Scalar>
class PlanSensitivity {
public:
    // `cost` is the matrix handed to sinkhorn, `eps_rel` its relative epsilon.
    PlanSensitivity(const Mat<Scalar>& plan, const Mat<Scalar>& cost, Scalar eps_rel)
        : plan_(plan), cost_(cost)
    {
        const Eigen::Index n = plan.rows();
        const Eigen::Index m = plan.cols();
        Eigen::Index r = 0, c = 0;
        max_ = cost.maxCoeff(&r, &c);
        argmax_ = {r, c};
        eps_ = eps_rel * (max_ > Scalar(0) ? max_ : Scalar(1));

        Mat<Scalar> a = Mat<Scalar>::Zero(n + m, n + m);
        const Vec<Scalar> rows = plan.rowwise().sum();
        const Vec<Scalar> cols = plan.colwise().sum().transpose();
        for (Eigen::Index i = 0; i < n; ++i) a(i, i) = rows(i) > Scalar(0) ? rows(i) : Scalar(1);
        for (Eigen::Index j = 0; j < m; ++j) a(n + j, n + j) = cols(j) > Scalar(0) ? cols(j) : Scalar(1);
        a.topRightCorner(n, m) = plan;
        a.bottomLeftCorner(m, n) = plan.transpose();
        solver_.compute(a);
    }

    // J^T u at fixed eps.
    Mat<Scalar> fixed_eps(const Mat<Scalar>& u) const
    {
        const Eigen::Index n = plan_.rows();
        const Eigen::Index m = plan_.cols();
        const Mat<Scalar> pu = plan_.cwiseProduct(u);
        Vec<Scalar> rhs(n + m);
        rhs.head(n) = pu.rowwise().sum();
        rhs.tail(m) = pu.colwise().sum().transpose();
        const Vec<Scalar> xy = solver_.solve(rhs);
        Mat<Scalar> out(n, m);
        for (Eigen::Index j = 0; j < m; ++j)
            for (Eigen::Index i = 0; i < n; ++i)
                out(i, j) = -plan_(i, j) * (u(i, j) - xy(i) - xy(n + j)) / eps_;
        return out;
    }

    // J^T u including the dependence of eps on the largest cost entry.
    Mat<Scalar> vjp(const Mat<Scalar>& u) const
    {
        Mat<Scalar> v = fixed_eps(u);
        if (max_ > Scalar(0)) {
            const Scalar scale = (v.array() * cost_.array()).sum() / max_;
            v(argmax_.first, argmax_.second) -= scale;
        }
        return v;
    }

    // Gradient of <P, C> with respect to C.
    Mat<Scalar> value_gradient() const { return plan_ + vjp(cost_); }

private:
    Mat<Scalar> plan_;
    Mat<Scalar> cost_;
    Scalar max_{0};
    Scalar eps_{1};
    std::pair<Eigen::Index, Eigen::Index> argmax_{0, 0};
    Eigen::CompleteOrthogonalDecomposition<Mat<Scalar>> solver_;
};

/// Gradient of the Gromov-Wasserstein objective with respect to the first
/// intra-cost matrix, at a fixed point t = sinkhorn(G(t) - min G(t)) of the
/// linearized solver. With `implicit` false only the explicit term at the
/// frozen plan is returned.
template <typename Scalar>
Mat<Scalar> gw_cost_gradient(const Mat<Scalar>& c1, const Mat<Scalar>& c2, const Mat<Scalar>& t,
                             Scalar eps_rel, bool implicit)
{
    const Eigen::Index n = c1.rows();
    const Eigen::Index m = c2.rows();
    auto sgn = [](Scalar d) { return d > Scalar(0) ? Scalar(1) : (d < Scalar(0) ? Scalar(-1) : Scalar(0)); };

    // s(i, k) = sum_{j,l} t(i,j) t(k,l) sgn(c1(i,k) - c2(j,l))
    Mat<Scalar> s = Mat<Scalar>::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index k = 0; k < n; ++k)
            for (Eigen::Index j = 0; j < m; ++j) {
                if (t(i, j) == Scalar(0)) continue;
                for (Eigen::Index l = 0; l < m; ++l)
                    s(i, k) += t(i, j) * t(k, l) * sgn(c1(i, k) - c2(j, l));
            }
    if (!implicit || n * m == 1) return s;

    // G(i,j) = sum_{k,l} |c1(i,k) - c2(j,l)| t(k,l); the solver sees G - min G.
    const Eigen::Index nm = n * m;
    Mat<Scalar> lin(nm, nm);  // d G(i,j) / d t(k,l), symmetric
    for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index l = 0; l < m; ++l)
                for (Eigen::Index k = 0; k < n; ++k)
                    lin(i + n * j, k + n * l) = std::abs(c1(i, k) - c2(j, l));
    const Vec<Scalar> tv = t.reshaped();
    const Vec<Scalar> gv = lin * tv;
    Mat<Scalar> shifted = gv.reshaped(n, m);
    Eigen::Index rmin = 0, cmin = 0;
    const Scalar gmin = shifted.minCoeff(&rmin, &cmin);
    shifted.array() -= gmin;

    // Transposed Jacobian of G -> plan, assembled column by column.
    const PlanSensitivity<Scalar> sens(t, shifted, eps_rel);
    Mat<Scalar> phi_t(nm, nm);
    for (Eigen::Index q = 0; q < nm; ++q) {
        Mat<Scalar> v = sens.vjp(Mat<Scalar>(Vec<Scalar>::Unit(nm, q).reshaped(n, m)));
        v(rmin, cmin) -= v.sum();
        phi_t.col(q) = v.reshaped();
    }

    // lambda = (I - lin^T phi^T)^{-1} 2G,  mu = phi^T lambda
    const Mat<Scalar> system = Mat<Scalar>::Identity(nm, nm) - lin.transpose() * phi_t;
    const Vec<Scalar> lambda = system.fullPivLu().solve(Scalar(2) * gv);
    const Mat<Scalar> mu = (phi_t * lambda).reshaped(n, m);

    // d G(i,j) / d c1(i,k) = sum_l sgn(c1(i,k) - c2(j,l)) t(k,l)
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index k = 0; k < n; ++k) {
            Scalar acc = 0;
            for (Eigen::Index j = 0; j < m; ++j) {
                if (mu(i, j) == Scalar(0)) continue;
                Scalar inner = 0;
                for (Eigen::Index l = 0; l < m; ++l) inner += sgn(c1(i, k) - c2(j, l)) * t(k, l);
                acc += mu(i, j) * inner;
            }
            s(i, k) += acc;
        }
    return s;
}

} // namespace otts

#endif // OTTS_OT_PLAN_GRADIENT_HPP
