#ifndef OTTS_SELECTOR_HPP
#define OTTS_SELECTOR_HPP

#include <string>
#include <vector>

#include "otts/encoder.hpp"
#include "otts/ot/graph_ot.hpp"
#include "otts/task_graph.hpp"

namespace otts {

struct ScoredTask {
    TaskId task_id = 0;
    double distance = 0.0;

    friend bool operator==(const ScoredTask&, const ScoredTask&) = default;
};

struct SelectionResult {
    std::vector<TaskId> target_ids;  // one entry, or several when scores were averaged
    std::vector<ScoredTask> ranked;  // ascending by (distance, task_id)
    int m = 0;

    friend bool operator==(const SelectionResult&, const SelectionResult&) = default;
};

struct ScoreOptions {
    double r = 0.5;
    SolverConfig solver;
    GraphOptions graph;
    int threads = 0;
};

/// ot_loss between the embedded target and every embedded source, in input order.
std::vector<ScoredTask> score_sources(const Task& target, const std::vector<Task>& sources,
                                      const EncoderParams& xi, const ScoreOptions& opts = {});

/// Stable ascending sort by (distance, task_id), first m entries.
SelectionResult select_top_m(std::vector<ScoredTask> scores, int m, std::vector<TaskId> target_ids = {});

struct DistanceMatrix {
    std::vector<TaskId> row_ids;
    std::vector<TaskId> col_ids;
    Matrix values;  // rows x cols

    friend bool operator==(const DistanceMatrix& a, const DistanceMatrix& b)
    {
        return a.row_ids == b.row_ids && a.col_ids == b.col_ids && a.values.rows() == b.values.rows() &&
               a.values.cols() == b.values.cols() && a.values == b.values;
    }
};

DistanceMatrix pairwise_matrix(const std::vector<Task>& rows, const std::vector<Task>& cols,
                               const EncoderParams& xi, const ScoreOptions& opts = {});

/// Column means of the matrix: one score per source, averaged over targets.
std::vector<ScoredTask> mean_over_targets(const DistanceMatrix& m);

/// Scores all sources against each target, averages over targets, keeps top m.
SelectionResult select_for_targets(const std::vector<Task>& targets, const std::vector<Task>& sources,
                                   const EncoderParams& xi, int m, const ScoreOptions& opts = {});

std::string distance_matrix_to_binary(const DistanceMatrix& m);
DistanceMatrix distance_matrix_from_binary(std::string bytes);
std::string distance_matrix_to_csv(const DistanceMatrix& m);
void save_distance_matrix(const DistanceMatrix& m, const std::string& path);
DistanceMatrix load_distance_matrix(const std::string& path);

std::string selection_to_json(const SelectionResult& s);
SelectionResult selection_from_json(const std::string& text);

} // namespace otts

#endif // OTTS_SELECTOR_HPP
