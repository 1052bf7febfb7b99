#ifndef OTTS_TASK_GRAPH_HPP
#define OTTS_TASK_GRAPH_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "otts/error.hpp"
#include "otts/ot/sinkhorn.hpp"

namespace otts {

using TaskId = std::int64_t;

/// An N-way K-shot task: one feature row per labeled support sample.
///
/// Samples are stored class-major: rows [c*K, (c+1)*K) carry label c. The
/// optional class_ids map local labels to the generator's global class index.
struct Task {
    TaskId task_id = 0;
    int n_way = 0;
    int k_shot = 0;
    Matrix features;          // (n_way * k_shot) x D
    std::vector<int> labels;  // size n_way * k_shot, values in [0, n_way)
    std::string domain_tag;
    std::vector<int> class_ids;

    Eigen::Index num_samples() const { return features.rows(); }
    Eigen::Index dim() const { return features.cols(); }

    friend bool operator==(const Task& a, const Task& b)
    {
        return a.task_id == b.task_id && a.n_way == b.n_way && a.k_shot == b.k_shot &&
               a.features.rows() == b.features.rows() && a.features.cols() == b.features.cols() &&
               a.features == b.features && a.labels == b.labels &&
               a.domain_tag == b.domain_tag && a.class_ids == b.class_ids;
    }
};

/// Throws unless every label in [0, n_way) appears exactly k_shot times and
/// all features are finite.
void validate_task(const Task& task);

/// Fully connected task graph. Nodes are sample embeddings; edges carry
/// pairwise Euclidean distances.
template <typename Scalar>
struct TaskGraph {
    Mat<Scalar> nodes;
    Mat<Scalar> intra_cost;
    TaskId source_task = 0;

    Eigen::Index size() const { return nodes.rows(); }
    Eigen::Index dim() const { return nodes.cols(); }
};

using TaskGraphd = TaskGraph<double>;

struct GraphOptions {
    bool l2_normalize = false;
};

template <typename DerivedA, typename DerivedB>
Mat<typename DerivedA::Scalar> pairwise_distances(const Eigen::MatrixBase<DerivedA>& a,
                                                  const Eigen::MatrixBase<DerivedB>& b)
{
    using Scalar = typename DerivedA::Scalar;
    Mat<Scalar> d(a.rows(), b.rows());
    for (Eigen::Index j = 0; j < b.rows(); ++j)
        for (Eigen::Index i = 0; i < a.rows(); ++i) d(i, j) = (a.row(i) - b.row(j)).norm();
    return d;
}

template <typename Derived>
TaskGraph<typename Derived::Scalar> build_graph(const Eigen::MatrixBase<Derived>& features,
                                                TaskId task_id, const GraphOptions& opts = {})
{
    using Scalar = typename Derived::Scalar;
    require(features.rows() > 0, "build_graph: empty feature matrix");
    require(features.cols() > 0, "build_graph: zero-dimensional features");
    require(features.allFinite(), "build_graph: non-finite feature");

    TaskGraph<Scalar> g;
    g.source_task = task_id;
    g.nodes = features;
    if (opts.l2_normalize) {
        for (Eigen::Index i = 0; i < g.nodes.rows(); ++i) {
            const Scalar norm = g.nodes.row(i).norm();
            if (norm > Scalar(0)) g.nodes.row(i) /= norm;
        }
    }
    const Eigen::Index n = g.nodes.rows();
    g.intra_cost = Mat<Scalar>::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const Scalar d = (g.nodes.row(i) - g.nodes.row(j)).norm();
            g.intra_cost(i, j) = d;
            g.intra_cost(j, i) = d;
        }
    }
    return g;
}

inline TaskGraphd build_graph(const Task& task, const GraphOptions& opts = {})
{
    return build_graph(task.features, task.task_id, opts);
}

/// Splits an N-way 2-shot task into two N-way 1-shot tasks that together hold
/// every sample exactly once. Which shot lands in which half is decided per
/// class from `seed`.
std::pair<Task, Task> split_task(const Task& task, std::uint64_t seed);

} // namespace otts

#endif // OTTS_TASK_GRAPH_HPP
