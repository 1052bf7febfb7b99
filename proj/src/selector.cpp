#include "otts/selector.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "otts/binary_io.hpp"
#include "otts/parallel.hpp"

namespace otts {

namespace {

[[noreturn]] void rethrow_for(const Error& e, const std::string& where)
{
    throw Error(e.code(), where + ": " + e.what());
}

std::vector<TaskGraphd> embed_all(const std::vector<Task>& tasks, const EncoderParams& xi,
                                  const ScoreOptions& opts)
{
    std::vector<TaskGraphd> graphs(tasks.size());
    parallel_for(tasks.size(), resolve_threads(opts.threads), [&](std::size_t i) {
        try {
            validate_task(tasks[i]);
            graphs[i] = embed_graph(xi, tasks[i], opts.graph);
        } catch (const Error& e) {
            rethrow_for(e, "task " + std::to_string(tasks[i].task_id));
        }
    });
    return graphs;
}

void require_finite_score(double d, TaskId row, TaskId col)
{
    if (!std::isfinite(d) || d < 0.0)
        throw Error(ErrorCode::invalid_input, "distance between tasks " + std::to_string(row) + " and " +
                                                  std::to_string(col) + " is not a finite non-negative value");
}

} // namespace

std::vector<ScoredTask> score_sources(const Task& target, const std::vector<Task>& sources,
                                      const EncoderParams& xi, const ScoreOptions& opts)
{
    require(!sources.empty(), "score_sources: no source tasks");
    const DistanceMatrix m = pairwise_matrix({target}, sources, xi, opts);
    std::vector<ScoredTask> out;
    out.reserve(sources.size());
    for (std::size_t j = 0; j < sources.size(); ++j)
        out.push_back({sources[j].task_id, m.values(0, static_cast<Eigen::Index>(j))});
    return out;
}

SelectionResult select_top_m(std::vector<ScoredTask> scores, int m, std::vector<TaskId> target_ids)
{
    require(m >= 1, "select_top_m: m must be at least 1");
    require(static_cast<std::size_t>(m) <= scores.size(),
            "select_top_m: m = " + std::to_string(m) + " exceeds the " + std::to_string(scores.size()) +
                " scored sources");
    std::stable_sort(scores.begin(), scores.end(), [](const ScoredTask& a, const ScoredTask& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        return a.task_id < b.task_id;
    });
    scores.resize(static_cast<std::size_t>(m));
    return {std::move(target_ids), std::move(scores), m};
}

DistanceMatrix pairwise_matrix(const std::vector<Task>& rows, const std::vector<Task>& cols,
                               const EncoderParams& xi, const ScoreOptions& opts)
{
    require(!rows.empty() && !cols.empty(), "pairwise_matrix: both task lists must be non-empty");
    validate_params(xi);
    const std::vector<TaskGraphd> gr = embed_all(rows, xi, opts);
    const std::vector<TaskGraphd> gc = embed_all(cols, xi, opts);

    DistanceMatrix m;
    for (const Task& t : rows) m.row_ids.push_back(t.task_id);
    for (const Task& t : cols) m.col_ids.push_back(t.task_id);
    m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    const std::size_t nc = cols.size();
    parallel_for(rows.size() * nc, resolve_threads(opts.threads), [&](std::size_t k) {
        const std::size_t i = k / nc, j = k % nc;
        double d = 0.0;
        try {
            d = ot_loss(gr[i], gc[j], opts.r, opts.solver).value;
        } catch (const Error& e) {
            rethrow_for(e, "tasks " + std::to_string(rows[i].task_id) + " x " + std::to_string(cols[j].task_id));
        }
        require_finite_score(d, rows[i].task_id, cols[j].task_id);
        m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d;
    });
    return m;
}

std::vector<ScoredTask> mean_over_targets(const DistanceMatrix& m)
{
    require(m.values.rows() > 0 && m.values.cols() > 0, "mean_over_targets: empty matrix");
    std::vector<ScoredTask> out;
    for (Eigen::Index j = 0; j < m.values.cols(); ++j)
        out.push_back({m.col_ids[static_cast<std::size_t>(j)], m.values.col(j).mean()});
    return out;
}

SelectionResult select_for_targets(const std::vector<Task>& targets, const std::vector<Task>& sources,
                                   const EncoderParams& xi, int m, const ScoreOptions& opts)
{
    require(!targets.empty(), "select: no target tasks");
    require(!sources.empty(), "select: no source tasks");
    require(m >= 1 && static_cast<std::size_t>(m) <= sources.size(),
            "select: m = " + std::to_string(m) + " must lie in [1, " + std::to_string(sources.size()) + "]");
    const DistanceMatrix d = pairwise_matrix(targets, sources, xi, opts);
    return select_top_m(mean_over_targets(d), m, d.row_ids);
}

std::string distance_matrix_to_binary(const DistanceMatrix& m)
{
    BinaryWriter w(BlobKind::distance_matrix);
    w.u64(m.row_ids.size());
    w.u64(m.col_ids.size());
    for (TaskId id : m.row_ids) w.i64(id);
    for (TaskId id : m.col_ids) w.i64(id);
    for (Eigen::Index i = 0; i < m.values.rows(); ++i)
        for (Eigen::Index j = 0; j < m.values.cols(); ++j) w.f64(m.values(i, j));
    return w.bytes();
}

DistanceMatrix distance_matrix_from_binary(std::string bytes)
{
    BinaryReader r(std::move(bytes), BlobKind::distance_matrix);
    DistanceMatrix m;
    const std::uint64_t at = r.offset();
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    if (rows > (1u << 24) || cols > (1u << 24)) throw ParseError(at, "implausible matrix size");
    for (std::uint64_t i = 0; i < rows; ++i) m.row_ids.push_back(r.i64());
    for (std::uint64_t j = 0; j < cols; ++j) m.col_ids.push_back(r.i64());
    m.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.values.rows(); ++i)
        for (Eigen::Index j = 0; j < m.values.cols(); ++j) {
            const std::uint64_t here = r.offset();
            const double v = r.f64();
            if (!std::isfinite(v) || v < 0.0) throw ParseError(here, "distance entries must be finite and >= 0");
            m.values(i, j) = v;
        }
    r.finish();
    return m;
}

std::string distance_matrix_to_csv(const DistanceMatrix& m)
{
    std::ostringstream out;
    out << std::setprecision(17) << "row_id";
    for (TaskId id : m.col_ids) out << ',' << id;
    out << '\n';
    for (Eigen::Index i = 0; i < m.values.rows(); ++i) {
        out << m.row_ids[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < m.values.cols(); ++j) out << ',' << m.values(i, j);
        out << '\n';
    }
    return out.str();
}

void save_distance_matrix(const DistanceMatrix& m, const std::string& path)
{
    const bool csv = path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0;
    write_file_atomic(path, csv ? distance_matrix_to_csv(m) : distance_matrix_to_binary(m));
}

DistanceMatrix load_distance_matrix(const std::string& path)
{
    return distance_matrix_from_binary(read_file(path));
}

std::string selection_to_json(const SelectionResult& s)
{
    nlohmann::json ranked = nlohmann::json::array();
    for (const ScoredTask& t : s.ranked) ranked.push_back({{"task_id", t.task_id}, {"distance", t.distance}});
    const nlohmann::json j = {{"target_ids", s.target_ids}, {"m", s.m}, {"ranked", ranked}};
    return j.dump(2) + "\n";
}

SelectionResult selection_from_json(const std::string& text)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(e.byte > 0 ? e.byte - 1 : 0, "malformed selection JSON");
    }
    SelectionResult s;
    try {
        s.target_ids = j.at("target_ids").get<std::vector<TaskId>>();
        s.m = j.at("m").get<int>();
        for (const auto& e : j.at("ranked"))
            s.ranked.push_back({e.at("task_id").get<TaskId>(), e.at("distance").get<double>()});
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(0, std::string("selection: ") + e.what());
    }
    return s;
}

} // namespace otts
