#include "otts/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "otts/parallel.hpp"
#include "otts/random.hpp"

namespace otts {

namespace {

std::vector<double> average_ranks(const std::vector<double>& v)
{
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

double log_sum_exp(const Vector& v)
{
    const double m = v.maxCoeff();
    return m + std::log((v.array() - m).exp().sum());
}

std::pair<std::vector<double>, std::vector<int>> histogram(const std::vector<double>& values, int bins)
{
    require(bins >= 1, "histogram: need at least one bin");
    std::vector<double> edges(static_cast<std::size_t>(bins) + 1, 0.0);
    std::vector<int> counts(static_cast<std::size_t>(bins), 0);
    if (values.empty()) return {edges, counts};
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it;
    const double hi = *hi_it > lo ? *hi_it : lo + 1.0;
    for (int b = 0; b <= bins; ++b) edges[static_cast<std::size_t>(b)] = lo + (hi - lo) * b / bins;
    for (double v : values) {
        int b = static_cast<int>((v - lo) / (hi - lo) * bins);
        b = std::clamp(b, 0, bins - 1);
        ++counts[static_cast<std::size_t>(b)];
    }
    return {edges, counts};
}

SummaryStats summarize(const std::vector<double>& v)
{
    SummaryStats s;
    if (v.empty()) return s;
    s.count = v.size();
    s.average = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    s.max = *std::max_element(v.begin(), v.end());
    s.min = *std::min_element(v.begin(), v.end());
    return s;
}

nlohmann::json stats_json(const SummaryStats& s)
{
    return {{"average", s.average}, {"max", s.max}, {"min", s.min}, {"count", s.count}};
}

} // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y)
{
    require(x.size() == y.size(), "spearman: length mismatch");
    require(x.size() >= 2, "spearman: need at least two observations");
    const std::vector<double> rx = average_ranks(x);
    const std::vector<double> ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mean = (n + 1.0) / 2.0;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mean) * (ry[i] - mean);
        sxx += (rx[i] - mean) * (rx[i] - mean);
        syy += (ry[i] - mean) * (ry[i] - mean);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

// ---- likelihood probe ----------------------------------------------------

Vector ProbeClassifier::log_probs(const Vector& z) const
{
    require(z.size() == weight.cols(), "probe: embedding dimension mismatch");
    const Vector logits = weight * z + bias;
    return logits.array() - log_sum_exp(logits);
}

ProbeClassifier train_probe(const Matrix& z, const std::vector<int>& labels, int classes,
                            const ProbeTrainOptions& opts)
{
    require(z.rows() > 0 && static_cast<std::size_t>(z.rows()) == labels.size(), "train_probe: bad inputs");
    require(classes >= 1, "train_probe: need at least one class");
    for (int l : labels) require(l >= 0 && l < classes, "train_probe: label out of range");
    ProbeClassifier w{Matrix::Zero(classes, z.cols()), Vector::Zero(classes)};
    const double inv = 1.0 / static_cast<double>(z.rows());
    for (int it = 0; it < opts.iterations; ++it) {
        Matrix gw = opts.l2 * w.weight;
        Vector gb = Vector::Zero(classes);
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            Vector p = w.log_probs(z.row(i).transpose()).array().exp();
            p(labels[static_cast<std::size_t>(i)]) -= 1.0;
            gw += inv * p * z.row(i);
            gb += inv * p;
        }
        w.weight -= opts.learning_rate * gw;
        w.bias -= opts.learning_rate * gb;
    }
    return w;
}

double joint_log_likelihood(const ProbeClassifier& w, const Matrix& z, const std::vector<int>& labels)
{
    require(static_cast<std::size_t>(z.rows()) == labels.size(), "joint likelihood: label count mismatch");
    double s = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        require(y >= 0 && y < w.classes(), "joint likelihood: label outside the classifier's classes");
        s += w.log_probs(z.row(i).transpose())(y);
    }
    return s;
}

double likelihood_gap(double log_a, double log_b)
{
    const double hi = std::max(log_a, log_b);
    const double lo = std::min(log_a, log_b);
    if (hi == -std::numeric_limits<double>::infinity()) return 0.0;
    return -std::exp(hi) * std::expm1(lo - hi);
}

ProbeReport likelihood_gap_probe(const std::vector<std::pair<Task, Task>>& pairs, const ProbeClassifier& w,
                           const EncoderParams& xi, const SolverConfig& cfg, int bins)
{
    require(!pairs.empty(), "likelihood_gap_probe: no pairs");
    ProbeReport rep;
    std::vector<double> dist, gaps;
    Matrix scatter = Matrix::Zero(xi.output_dim(), xi.output_dim());
    Eigen::Index scatter_n = 0;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        const Task& a = pairs[k].first;
        const Task& b = pairs[k].second;
        require(a.n_way == b.n_way && a.num_samples() == b.num_samples() && a.labels == b.labels,
                "likelihood_gap_probe: pair " + std::to_string(k) + " does not share its N-way structure");
        const TaskGraphd ga = embed_graph(xi, a);
        const TaskGraphd gb = embed_graph(xi, b);
        const double d = wasserstein(ga, gb, cfg).distance;
        const double la = joint_log_likelihood(w, ga.nodes, a.labels);
        const double lb = joint_log_likelihood(w, gb.nodes, b.labels);
        const double gap = likelihood_gap(la, lb);
        if (!(gap >= 0.0 && gap <= 1.0 + 1e-9))
            throw Error(ErrorCode::invalid_input, "likelihood_gap_probe: likelihood gap " + std::to_string(gap) +
                                                      " left [0, 1]");
        rep.pairs.push_back({static_cast<int>(k), d, gap});
        dist.push_back(d);
        gaps.push_back(gap);
        const Matrix diff = gb.nodes - ga.nodes;
        scatter += diff.transpose() * diff;
        scatter_n += diff.rows();
    }
    rep.spearman_rho = pairs.size() >= 2 ? spearman(dist, gaps) : 0.0;
    std::tie(rep.bin_edges, rep.bin_counts) = histogram(dist, bins);
    if (scatter_n > 0) {
        Eigen::SelfAdjointEigenSolver<Matrix> eig(scatter / static_cast<double>(scatter_n), Eigen::EigenvaluesOnly);
        rep.difference_cov_max_eig = eig.eigenvalues().maxCoeff();
    }
    return rep;
}

std::vector<std::pair<Task, Task>> perturbation_pairs(const Task& reference, int count, double max_noise,
                                                      std::uint64_t seed)
{
    require(count >= 1, "perturbation_pairs: count must be positive");
    require(max_noise >= 0.0, "perturbation_pairs: max_noise must be >= 0");
    validate_task(reference);
    std::vector<std::pair<Task, Task>> out;
    for (int k = 0; k < count; ++k) {
        std::mt19937_64 rng(mix_seed({seed, 0x9a17, static_cast<std::uint64_t>(k)}));
        std::normal_distribution<double> normal(0.0, 1.0);
        const double scale = count > 1 ? max_noise * k / (count - 1) : max_noise;
        Task noisy = reference;
        for (Eigen::Index i = 0; i < noisy.features.rows(); ++i)
            for (Eigen::Index j = 0; j < noisy.features.cols(); ++j) noisy.features(i, j) += scale * normal(rng);
        out.emplace_back(reference, std::move(noisy));
    }
    return out;
}

std::string probe_csv(const ProbeReport& r)
{
    std::ostringstream out;
    out << std::setprecision(17) << "pair_id,distance,gap\n";
    for (const ProbePair& p : r.pairs) out << p.pair_id << ',' << p.distance << ',' << p.gap << '\n';
    return out.str();
}

std::string histogram_json(const std::vector<double>& edges, const std::vector<int>& counts)
{
    return nlohmann::json({{"bin_edges", edges}, {"counts", counts}}).dump(2) + "\n";
}

// ---- distance statistics ------------------------------------------------

DistanceReport distance_stats(const DistanceMatrix& m, const std::map<TaskId, std::string>& row_groups,
                              const std::map<TaskId, std::string>& col_groups, int bins)
{
    require(m.values.rows() > 0 && m.values.cols() > 0, "distance_stats: empty matrix");
    require(m.row_ids.size() == static_cast<std::size_t>(m.values.rows()) &&
                m.col_ids.size() == static_cast<std::size_t>(m.values.cols()),
            "distance_stats: id lists do not match the matrix shape");
    const bool grouped = !row_groups.empty() || !col_groups.empty();
    auto group_of = [](const std::map<TaskId, std::string>& g, TaskId id) {
        const auto it = g.find(id);
        require(it != g.end(), "distance_stats: task " + std::to_string(id) + " has no group label");
        return it->second;
    };

    std::vector<double> all;
    std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
    for (Eigen::Index i = 0; i < m.values.rows(); ++i)
        for (Eigen::Index j = 0; j < m.values.cols(); ++j) {
            const TaskId ri = m.row_ids[static_cast<std::size_t>(i)];
            const TaskId cj = m.col_ids[static_cast<std::size_t>(j)];
            if (ri == cj) continue;
            all.push_back(m.values(i, j));
            if (grouped) cells[{group_of(row_groups, ri), group_of(col_groups, cj)}].push_back(m.values(i, j));
        }
    DistanceReport rep;
    rep.overall = summarize(all);
    for (const auto& [key, vals] : cells) rep.blocks.push_back({key.first, key.second, summarize(vals)});
    std::tie(rep.bin_edges, rep.bin_counts) = histogram(all, bins);
    return rep;
}

std::string distance_report_json(const DistanceReport& r)
{
    nlohmann::json blocks = nlohmann::json::array();
    for (const BlockStats& b : r.blocks)
        blocks.push_back({{"rows", b.row_group}, {"cols", b.col_group}, {"stats", stats_json(b.stats)}});
    const nlohmann::json j = {{"overall", stats_json(r.overall)},
                              {"blocks", blocks},
                              {"histogram", {{"bin_edges", r.bin_edges}, {"counts", r.bin_counts}}}};
    return j.dump(2) + "\n";
}

// ---- curriculum comparison ---------------------------------------------

namespace {

// Prototype classification under the metric |W (x - c)|^2. The first shot of
// each class is its prototype; every other shot is a query.
struct EpisodeLoss {
    double loss = 0.0;
    double accuracy = 0.0;
    Matrix grad;
};

EpisodeLoss episode(const Matrix& w, const Task& t, bool want_grad)
{
    require(t.k_shot >= 2, "curriculum: task " + std::to_string(t.task_id) + " needs at least 2 shots");
    const int n = t.n_way, k = t.k_shot;
    Matrix protos(n, t.dim());
    for (int c = 0; c < n; ++c) protos.row(c) = t.features.row(static_cast<Eigen::Index>(c) * k);

    EpisodeLoss out;
    if (want_grad) out.grad = Matrix::Zero(w.rows(), w.cols());
    int queries = 0, correct = 0;
    for (int c = 0; c < n; ++c)
        for (int s = 1; s < k; ++s) {
            const Vector q = t.features.row(static_cast<Eigen::Index>(c) * k + s).transpose();
            Matrix diff(t.dim(), n);
            for (int j = 0; j < n; ++j) diff.col(j) = q - protos.row(j).transpose();
            const Matrix proj = w * diff;
            const Vector logits = -proj.colwise().squaredNorm().transpose();
            const double lse = log_sum_exp(logits);
            out.loss += lse - logits(c);
            Eigen::Index best = 0;
            logits.maxCoeff(&best);
            correct += best == c;
            ++queries;
            if (want_grad) {
                // d(loss)/d logits = p - onehot; d logits_j / dW = -2 W d_j d_j^T
                Vector p = (logits.array() - lse).exp();
                p(c) -= 1.0;
                out.grad += -2.0 * proj * p.asDiagonal() * diff.transpose();
            }
        }
    out.loss /= queries;
    out.accuracy = static_cast<double>(correct) / queries;
    if (want_grad) out.grad /= queries;
    return out;
}

} // namespace

CurriculumRun train_metric_probe(const std::vector<const Task*>& pool, const std::vector<Task>& evaluation,
                                 const CurriculumOptions& opts)
{
    require(!pool.empty(), "curriculum: empty training pool");
    require(!evaluation.empty(), "curriculum: no evaluation tasks");
    require(opts.epochs >= 1, "curriculum: epochs must be positive");
    const Eigen::Index d = pool.front()->dim();
    Matrix w = Matrix::Identity(d, d);

    CurriculumRun run;
    for (const Task* t : pool) run.pool.push_back(t->task_id);
    std::vector<std::size_t> order(pool.size());
    for (int e = 0; e < opts.epochs; ++e) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(mix_seed({opts.seed, 0xc0de, static_cast<std::uint64_t>(e)}));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(order[i - 1], order[pick(rng)]);
        }
        std::vector<double> losses;
        for (std::size_t idx : order) {
            const EpisodeLoss ep = episode(w, *pool[idx], true);
            losses.push_back(ep.loss);
            w -= opts.learning_rate * ep.grad;
        }
        const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
        double var = 0.0;
        for (double l : losses) var += (l - mean) * (l - mean);
        run.epoch_mean_loss.push_back(mean);
        run.epoch_loss_std.push_back(std::sqrt(var / static_cast<double>(losses.size())));
    }
    run.mean_epoch_loss_std = std::accumulate(run.epoch_loss_std.begin(), run.epoch_loss_std.end(), 0.0) /
                              static_cast<double>(run.epoch_loss_std.size());
    for (const Task& t : evaluation) {
        const EpisodeLoss ep = episode(w, t, false);
        run.final_loss += ep.loss;
        run.accuracy += ep.accuracy;
    }
    run.final_loss /= static_cast<double>(evaluation.size());
    run.accuracy /= static_cast<double>(evaluation.size());
    return run;
}

CurriculumReport selection_vs_random_curriculum(const std::vector<Task>& sources, const std::vector<Task>& targets,
                                                const std::vector<Task>& evaluation, const EncoderParams& xi,
                                                const CurriculumOptions& opts)
{
    require(opts.pool_size >= 1 && static_cast<std::size_t>(opts.pool_size) <= sources.size(),
            "curriculum: pool_size must lie in [1, number of sources]");
    ScoreOptions so;
    so.r = opts.r;
    so.solver = opts.solver;
    so.threads = opts.threads;
    const SelectionResult sel = select_for_targets(targets, sources, xi, opts.pool_size, so);

    std::map<TaskId, const Task*> by_id;
    for (const Task& t : sources) by_id[t.task_id] = &t;
    std::vector<const Task*> chosen;
    for (const ScoredTask& s : sel.ranked) chosen.push_back(by_id.at(s.task_id));

    std::vector<std::size_t> idx(sources.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed({opts.seed, 0x7a4d}));
    for (std::size_t i = 0; i < static_cast<std::size_t>(opts.pool_size); ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    std::vector<const Task*> random;
    for (std::size_t i = 0; i < static_cast<std::size_t>(opts.pool_size); ++i) random.push_back(&sources[idx[i]]);

    CurriculumReport rep;
    rep.selected = train_metric_probe(chosen, evaluation, opts);
    rep.random = train_metric_probe(random, evaluation, opts);
    return rep;
}

std::string curriculum_json(const CurriculumReport& r)
{
    auto run_json = [](const CurriculumRun& run) {
        return nlohmann::json{{"pool", run.pool},
                              {"epoch_mean_loss", run.epoch_mean_loss},
                              {"epoch_loss_std", run.epoch_loss_std},
                              {"mean_epoch_loss_std", run.mean_epoch_loss_std},
                              {"final_loss", run.final_loss},
                              {"accuracy", run.accuracy}};
    };
    return nlohmann::json({{"selected", run_json(r.selected)}, {"random", run_json(r.random)}}).dump(2) + "\n";
}

} // namespace otts
