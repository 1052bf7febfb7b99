#ifndef OTTS_ANALYSIS_HPP
#define OTTS_ANALYSIS_HPP

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "otts/encoder.hpp"
#include "otts/selector.hpp"
#include "otts/task_graph.hpp"

namespace otts {

/// Spearman rank correlation; tied values share their average rank.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// ---- likelihood probe ----------------------------------------------------

/// Softmax linear classifier p(y | z) = softmax(W z + b).
struct ProbeClassifier {
    Matrix weight;  // classes x dim
    Vector bias;    // classes

    Eigen::Index classes() const { return weight.rows(); }
    /// log p(y = label | z) for every class, computed stably.
    Vector log_probs(const Vector& z) const;
};

struct ProbeTrainOptions {
    int iterations = 500;
    double learning_rate = 0.5;
    double l2 = 1e-2;
};

/// Full-batch gradient descent on the mean cross-entropy plus l2 * |W|^2 / 2.
ProbeClassifier train_probe(const Matrix& z, const std::vector<int>& labels, int classes,
                            const ProbeTrainOptions& opts = {});

/// Sum over samples of log p(y_i | z_i): the log of the product-form joint likelihood.
double joint_log_likelihood(const ProbeClassifier& w, const Matrix& z, const std::vector<int>& labels);

/// |exp(a) - exp(b)| evaluated without leaving log space until the end.
double likelihood_gap(double log_a, double log_b);

struct ProbePair {
    int pair_id = 0;
    double distance = 0.0;
    double gap = 0.0;
};

struct ProbeReport {
    std::vector<ProbePair> pairs;
    double spearman_rho = 0.0;
    std::vector<double> bin_edges;
    std::vector<int> bin_counts;  // histogram of distances
    // Context only: largest eigenvalue of the pooled covariance of
    // embedding differences within the pairs.
    double difference_cov_max_eig = 0.0;
};

/// For each pair: Wasserstein distance between the embedded graphs, and the
/// gap between the joint likelihoods of the two tasks' labels under w.
ProbeReport likelihood_gap_probe(const std::vector<std::pair<Task, Task>>& pairs, const ProbeClassifier& w,
                           const EncoderParams& xi, const SolverConfig& cfg = {}, int bins = 20);

/// A reference task and noisy copies of it: copy k adds isotropic Gaussian
/// noise whose scale grows linearly from 0 to max_noise. Pair ids run 0..count-1.
std::vector<std::pair<Task, Task>> perturbation_pairs(const Task& reference, int count, double max_noise,
                                                      std::uint64_t seed);

std::string probe_csv(const ProbeReport& r);
std::string histogram_json(const std::vector<double>& edges, const std::vector<int>& counts);

// ---- distance statistics ------------------------------------------------

struct SummaryStats {
    double average = 0.0;
    double max = 0.0;
    double min = 0.0;
    std::size_t count = 0;
};

struct BlockStats {
    std::string row_group;
    std::string col_group;
    SummaryStats stats;
};

struct DistanceReport {
    SummaryStats overall;
    std::vector<BlockStats> blocks;  // sorted by (row_group, col_group)
    std::vector<double> bin_edges;
    std::vector<int> bin_counts;
};

/// Summary over every cell, skipping cells whose row and column carry the
/// same task id (self-distances). Blocks group rows and columns by the given
/// labels (e.g. domain tags); pass empty maps for no blocks.
DistanceReport distance_stats(const DistanceMatrix& m, const std::map<TaskId, std::string>& row_groups = {},
                              const std::map<TaskId, std::string>& col_groups = {}, int bins = 20);

std::string distance_report_json(const DistanceReport& r);

// ---- curriculum comparison ---------------------------------------------

struct CurriculumOptions {
    int pool_size = 64;     // tasks per training pool
    int epochs = 20;
    double learning_rate = 0.05;
    double r = 0.5;
    SolverConfig solver;
    std::uint64_t seed = 0;
    int threads = 0;
};

struct CurriculumRun {
    std::vector<TaskId> pool;
    std::vector<double> epoch_mean_loss;
    std::vector<double> epoch_loss_std;  // std of per-task losses within each epoch
    double final_loss = 0.0;             // mean query cross-entropy on the evaluation tasks
    double accuracy = 0.0;               // nearest-prototype accuracy on the evaluation tasks
    double mean_epoch_loss_std = 0.0;
};

struct CurriculumReport {
    CurriculumRun selected;
    CurriculumRun random;
};

/// Learns a linear metric W for prototype classification twice: once on the
/// sources closest to `targets` (mean ot_loss under xi) and once on a
/// uniformly drawn pool of the same size. Both runs start from W = I and see
/// tasks in the same seeded order scheme. Each training task's first shot
/// per class is the prototype and the remaining shots are queries;
/// `evaluation` tasks are scored the same way.
CurriculumReport selection_vs_random_curriculum(const std::vector<Task>& sources, const std::vector<Task>& targets,
                                                const std::vector<Task>& evaluation, const EncoderParams& xi,
                                                const CurriculumOptions& opts = {});

/// One prototype-classification training run on an explicit pool.
CurriculumRun train_metric_probe(const std::vector<const Task*>& pool, const std::vector<Task>& evaluation,
                                 const CurriculumOptions& opts);

std::string curriculum_json(const CurriculumReport& r);

} // namespace otts

#endif // OTTS_ANALYSIS_HPP
