#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "otts/analysis.hpp"
#include "otts/binary_io.hpp"
#include "otts/parallel.hpp"
#include "otts/selector.hpp"
#include "otts/ssl_trainer.hpp"
#include "otts/synth_data.hpp"

using namespace otts;
using nlohmann::json;

namespace {

// JSON config files: top-level keys are global flags, nested objects are
// subcommands. Values may be JSON strings, numbers or booleans.
class ConfigJson : public CLI::Config {
public:
    std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override
    {
        return render(app, default_also).dump(2) + "\n";
    }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override
    {
        json j;
        try {
            input >> j;
        } catch (const json::exception& e) {
            throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
        std::vector<CLI::ConfigItem> items;
        collect(j, {}, items);
        return items;
    }

private:
    static json render(const CLI::App* app, bool default_also)
    {
        json j = json::object();
        for (const CLI::Option* opt : app->get_options({})) {
            if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
            const std::string name = opt->get_lnames().front();
            if (name == "help" || name == "config" || name == "print-config") continue;
            if (opt->get_type_size() == 0) {
                if (opt->count() > 0) {
                    j[name] = opt->as<bool>();
                } else if (default_also) {
                    j[name] = false;
                }
            } else if (opt->count() > 0) {
                j[name] = opt->results().back();
            } else if (default_also && !opt->get_default_str().empty() && opt->get_default_str() != "{}") {
                j[name] = opt->get_default_str();
            }
        }
        for (const CLI::App* sub : app->get_subcommands()) j[sub->get_name()] = render(sub, default_also);
        return j;
    }

    static void collect(const json& j, std::vector<std::string> parents, std::vector<CLI::ConfigItem>& out)
    {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it->is_object()) {
                std::vector<std::string> deeper = parents;
                deeper.push_back(it.key());
                collect(*it, deeper, out);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = it.key();
            if (it->is_string()) {
                item.inputs = {it->get<std::string>()};
            } else if (it->is_boolean()) {
                item.inputs = {it->get<bool>() ? "true" : "false"};
            } else if (it->is_number()) {
                item.inputs = {it->dump()};
            } else {
                throw CLI::ConversionError("config key '" + it.key() + "' must be a string, number or boolean");
            }
            out.push_back(std::move(item));
        }
    }
};

std::string one_line(std::string s)
{
    std::replace(s.begin(), s.end(), '\n', ' ');
    std::replace(s.begin(), s.end(), '\r', ' ');
    return s;
}

struct Encoder {
    std::string checkpoint;
    bool identity = false;
};

struct Solver {
    double epsilon = SinkhornOptions{}.epsilon;
    int max_iter = SinkhornOptions{}.max_iter;
    double tol = SinkhornOptions{}.tol;

    SolverConfig config() const
    {
        SolverConfig c;
        c.sinkhorn.epsilon = epsilon;
        c.sinkhorn.max_iter = max_iter;
        c.sinkhorn.tol = tol;
        return c;
    }
};

void add_encoder_flags(CLI::App* cmd, Encoder& e)
{
    auto* ck = cmd->add_option("--checkpoint", e.checkpoint, "Trained checkpoint; its target encoder is used");
    auto* id = cmd->add_flag("--identity", e.identity, "Use raw features instead of a trained encoder");
    ck->excludes(id);
}

void add_solver_flags(CLI::App* cmd, Solver& s)
{
    cmd->add_option("--epsilon", s.epsilon, "Entropic regularization, relative to the largest cost")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--max-iter", s.max_iter, "Sinkhorn iteration cap")->check(CLI::PositiveNumber);
    cmd->add_option("--tol", s.tol, "Sinkhorn marginal tolerance")->check(CLI::PositiveNumber);
}

EncoderParams load_encoder(const Encoder& e, const std::vector<Task>& tasks)
{
    if (!e.checkpoint.empty()) return load_checkpoint(e.checkpoint).target;
    if (e.identity) {
        require(!tasks.empty(), "cannot infer the feature dimension from an empty task file");
        return identity_encoder(tasks.front().dim());
    }
    invalid_input("pass --checkpoint PATH or --identity");
}

void write_text(const std::string& path, const std::string& text)
{
    if (!path.empty()) write_file_atomic(path, text);
}

std::map<TaskId, std::string> domain_groups(const std::vector<Task>& tasks)
{
    std::map<TaskId, std::string> g;
    for (const Task& t : tasks) g[t.task_id] = t.domain_tag;
    return g;
}

// ---- subcommands ------------------------------------------------------------

struct GenArgs {
    std::string out;
    std::string manifest_in;
    std::string manifest_out;
    int domains = 3;
    int tasks = 2048;
    int n_way = 5;
    int k_shot = 2;
    TaskId first_id = 0;
    int classes = DomainSpec{}.n_classes;
    Eigen::Index dim = DomainSpec{}.dim;
    double mean_scale = DomainSpec{}.mean_scale;
    double noise_scale = DomainSpec{}.noise_scale;
    double center_scale = DomainSpec{}.center_scale;
};

int run_gen(const GenArgs& a, std::uint64_t seed)
{
    CorpusManifest m;
    if (!a.manifest_in.empty()) {
        m = manifest_from_json(read_file(a.manifest_in));
    } else {
        m = default_manifest(seed, a.domains);
        for (DomainSpec& d : m.domains) {
            d.n_classes = a.classes;
            d.dim = a.dim;
            d.mean_scale = a.mean_scale;
            d.noise_scale = a.noise_scale;
            d.center_scale = a.center_scale;
        }
        m.n_tasks = a.tasks;
        m.n_way = a.n_way;
        m.k_shot = a.k_shot;
        m.first_task_id = a.first_id;
    }
    const Corpus c = generate_corpus(m);
    write_corpus(c, a.out);
    write_text(a.manifest_out, manifest_to_json(m));
    std::cout << json{{"tasks", c.tasks.size()}, {"domains", m.domains.size()}, {"out", a.out}}.dump() << "\n";
    return 0;
}

struct TrainArgs {
    std::string corpus;
    std::string checkpoint;
    std::string log;
    bool resume = false;
    int epochs = TrainConfig{}.epochs;
    int batch = TrainConfig{}.batch_size;
    double r = TrainConfig{}.r;
    double tau = TrainConfig{}.tau;
    double eta = TrainConfig{}.eta;
    Eigen::Index hidden = 32;
    Eigen::Index out_dim = 8;
    std::string activation = "tanh";
    bool normalize = false;
    Solver solver;
};

int run_train(const TrainArgs& a, std::uint64_t seed, int threads)
{
    const Corpus corpus = read_corpus(a.corpus);
    require(!corpus.tasks.empty(), "corpus '" + a.corpus + "' holds no tasks");
    TrainConfig cfg;
    cfg.batch_size = a.batch;
    cfg.epochs = a.epochs;
    cfg.r = a.r;
    cfg.tau = a.tau;
    cfg.eta = a.eta;
    cfg.seed = seed;
    cfg.threads = threads;
    cfg.solver = a.solver.config();
    cfg.graph.l2_normalize = a.normalize;
    cfg.shape.widths = {corpus.tasks.front().dim(), a.hidden, a.out_dim};
    cfg.shape.activation = activation_from_string(a.activation);
    cfg.checkpoint_path = a.checkpoint;
    cfg.log_path = a.log;

    std::optional<TrainState> resume;
    if (a.resume) resume = load_checkpoint(a.checkpoint);
    TrainResult result = train(corpus.tasks, cfg, [](const TrainState&, const EpochRecord& rec) {
        std::cerr << to_json_line(rec) << "\n";
    }, resume);
    if (cfg.epochs == 0 || result.log.empty()) save_checkpoint(result.state, a.checkpoint);

    json summary = {{"epochs", result.state.epoch}, {"checkpoint", a.checkpoint}};
    if (!result.log.empty()) {
        summary["first_mean_loss"] = result.log.front().mean_loss;
        summary["final_mean_loss"] = result.log.back().mean_loss;
    }
    std::cout << summary.dump() << "\n";
    return 0;
}

struct DistArgs {
    std::string rows;
    std::string cols;
    std::string out;
    double r = 0.5;
    Encoder encoder;
    Solver solver;
};

int run_dist(const DistArgs& a, int threads)
{
    const std::vector<Task> rows = read_corpus(a.rows).tasks;
    const std::vector<Task> cols = a.cols.empty() ? rows : read_corpus(a.cols).tasks;
    ScoreOptions opts;
    opts.r = a.r;
    opts.solver = a.solver.config();
    opts.threads = threads;
    const DistanceMatrix m = pairwise_matrix(rows, cols, load_encoder(a.encoder, rows), opts);
    save_distance_matrix(m, a.out);
    std::cout << json{{"rows", m.values.rows()}, {"cols", m.values.cols()}, {"out", a.out}}.dump() << "\n";
    return 0;
}

struct StatsArgs {
    std::string matrix;
    std::string rows_corpus;
    std::string cols_corpus;
    std::string out;
    int bins = 20;
};

int run_stats(const StatsArgs& a)
{
    const DistanceMatrix m = load_distance_matrix(a.matrix);
    std::map<TaskId, std::string> rg, cg;
    if (!a.rows_corpus.empty()) {
        rg = domain_groups(read_corpus(a.rows_corpus).tasks);
        cg = a.cols_corpus.empty() ? rg : domain_groups(read_corpus(a.cols_corpus).tasks);
    }
    const std::string text = distance_report_json(distance_stats(m, rg, cg, a.bins));
    write_text(a.out, text);
    std::cout << text;
    return 0;
}

struct SelectArgs {
    std::string target;
    std::vector<TaskId> target_ids;
    std::string sources;
    std::string against = "support";
    std::string queries;
    int m = 0;
    double r = 0.5;
    std::string out;
    Encoder encoder;
    Solver solver;
};

int run_select(const SelectArgs& a, int threads)
{
    std::vector<Task> targets = read_corpus(a.against == "query" ? a.queries : a.target).tasks;
    if (!a.target_ids.empty()) {
        std::vector<Task> picked;
        for (TaskId id : a.target_ids) {
            const auto it = std::find_if(targets.begin(), targets.end(), [&](const Task& t) { return t.task_id == id; });
            require(it != targets.end(), "target task " + std::to_string(id) + " not found");
            picked.push_back(*it);
        }
        targets = std::move(picked);
    }
    require(!targets.empty(), "no target tasks");
    const std::vector<Task> sources = read_corpus(a.sources).tasks;
    ScoreOptions opts;
    opts.r = a.r;
    opts.solver = a.solver.config();
    opts.threads = threads;
    const SelectionResult s = select_for_targets(targets, sources, load_encoder(a.encoder, sources), a.m, opts);
    const std::string text = selection_to_json(s);
    write_text(a.out, text);
    std::cout << text;
    return 0;
}

struct ProbeArgs {
    std::string corpus;
    int reference = 0;
    int pairs = 200;
    double max_noise = 1.0;
    int bins = 20;
    std::string out;
    std::string hist;
    Encoder encoder;
    Solver solver;
};

int run_probe(const ProbeArgs& a, std::uint64_t seed)
{
    const std::vector<Task> tasks = read_corpus(a.corpus).tasks;
    require(a.reference >= 0 && static_cast<std::size_t>(a.reference) < tasks.size(),
            "--reference " + std::to_string(a.reference) + " is outside the corpus");
    const Task& ref = tasks[static_cast<std::size_t>(a.reference)];
    const EncoderParams xi = load_encoder(a.encoder, tasks);
    const ProbeClassifier w = train_probe(embed_graph(xi, ref).nodes, ref.labels, ref.n_way);
    const ProbeReport rep = likelihood_gap_probe(perturbation_pairs(ref, a.pairs, a.max_noise, seed), w, xi,
                                           a.solver.config(), a.bins);
    write_text(a.out, probe_csv(rep));
    write_text(a.hist, histogram_json(rep.bin_edges, rep.bin_counts));
    std::cout << json{{"pairs", rep.pairs.size()},
                      {"spearman_rho", rep.spearman_rho},
                      {"difference_cov_max_eig", rep.difference_cov_max_eig}}
                     .dump()
              << "\n";
    return 0;
}

struct CurriculumArgs {
    std::string sources;
    std::string targets;
    std::string eval;
    std::string out;
    int pool = CurriculumOptions{}.pool_size;
    int epochs = CurriculumOptions{}.epochs;
    double lr = CurriculumOptions{}.learning_rate;
    double r = CurriculumOptions{}.r;
    Encoder encoder;
    Solver solver;
};

int run_curriculum(const CurriculumArgs& a, std::uint64_t seed, int threads)
{
    const std::vector<Task> sources = read_corpus(a.sources).tasks;
    const std::vector<Task> targets = read_corpus(a.targets).tasks;
    const std::vector<Task> eval = read_corpus(a.eval).tasks;
    CurriculumOptions opts;
    opts.pool_size = a.pool;
    opts.epochs = a.epochs;
    opts.learning_rate = a.lr;
    opts.r = a.r;
    opts.solver = a.solver.config();
    opts.seed = seed;
    opts.threads = threads;
    const CurriculumReport rep =
        selection_vs_random_curriculum(sources, targets, eval, load_encoder(a.encoder, sources), opts);
    const std::string text = curriculum_json(rep);
    write_text(a.out, text);
    std::cout << json{{"selected", {{"final_loss", rep.selected.final_loss},
                                    {"mean_epoch_loss_std", rep.selected.mean_epoch_loss_std},
                                    {"accuracy", rep.selected.accuracy}}},
                      {"random", {{"final_loss", rep.random.final_loss},
                                  {"mean_epoch_loss_std", rep.random.mean_epoch_loss_std},
                                  {"accuracy", rep.random.accuracy}}}}
                     .dump()
              << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Optimal-transport task similarity: corpora, training, distances and selection", "otts"};
    app.option_defaults()->always_capture_default();
    app.config_formatter(std::make_shared<ConfigJson>());
    app.set_config("--config", "", "JSON file of flag values; command-line flags take precedence");
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.require_subcommand(1);
    app.fallthrough();

    std::uint64_t seed = 0;
    int threads = 0;
    bool print_config = false;
    app.add_option("--seed", seed, "Seed for every random choice");
    app.add_option("--threads", threads, "Worker threads (0: all cores)")
        ->envname("OTTS_THREADS")
        ->check(CLI::NonNegativeNumber);
    app.add_flag("--print-config", print_config, "Print the effective configuration as JSON and exit");

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic multi-domain task corpus");
    gen_cmd->add_option("--out", gen.out, "Corpus path (.bin for binary, JSON lines otherwise)")->required();
    gen_cmd->add_option("--manifest", gen.manifest_in, "Generate from this manifest JSON instead of flags");
    gen_cmd->add_option("--manifest-out", gen.manifest_out, "Also write the manifest JSON here");
    gen_cmd->add_option("--domains", gen.domains, "Number of domains")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--tasks", gen.tasks, "Number of tasks")->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--n-way", gen.n_way, "Classes per task")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--k-shot", gen.k_shot, "Samples per class")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--first-id", gen.first_id, "Id of the first task");
    gen_cmd->add_option("--classes", gen.classes, "Classes per domain")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--dim", gen.dim, "Feature dimension")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--mean-scale", gen.mean_scale, "Spread of class means")->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--noise-scale", gen.noise_scale, "Within-class noise")->check(CLI::NonNegativeNumber);
    gen_cmd->add_option("--center-scale", gen.center_scale, "Distance of each domain center from the origin")
        ->check(CLI::NonNegativeNumber);

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Self-supervised training of the task encoder");
    train_cmd->add_option("--corpus", tr.corpus, "Corpus of 2-shot tasks")->required();
    train_cmd->add_option("--checkpoint", tr.checkpoint, "Checkpoint path, rewritten every epoch")->required();
    train_cmd->add_option("--log", tr.log, "JSON-lines training log");
    train_cmd->add_flag("--resume", tr.resume, "Continue from the existing checkpoint");
    train_cmd->add_option("--epochs", tr.epochs, "Epochs")->check(CLI::NonNegativeNumber);
    train_cmd->add_option("--batch", tr.batch, "Tasks per batch")->check(CLI::PositiveNumber);
    train_cmd->add_option("--r", tr.r, "Weight of the Wasserstein term")->check(CLI::Range(0.0, 1.0));
    train_cmd->add_option("--tau", tr.tau, "EMA decay of the target encoder")->check(CLI::Range(0.0, 1.0));
    train_cmd->add_option("--eta", tr.eta, "Adam learning rate")->check(CLI::PositiveNumber);
    train_cmd->add_option("--hidden", tr.hidden, "Hidden width")->check(CLI::PositiveNumber);
    train_cmd->add_option("--out-dim", tr.out_dim, "Embedding width")->check(CLI::PositiveNumber);
    train_cmd->add_option("--activation", tr.activation, "tanh, relu or identity")
        ->check(CLI::IsMember({"tanh", "relu", "identity"}));
    train_cmd->add_flag("--normalize", tr.normalize, "L2-normalize embeddings before building graphs");
    add_solver_flags(train_cmd, tr.solver);

    DistArgs dist;
    auto* dist_cmd = app.add_subcommand("dist", "Dense ot_loss matrix between two task files");
    dist_cmd->add_option("--rows", dist.rows, "Row tasks")->required();
    dist_cmd->add_option("--cols", dist.cols, "Column tasks (default: the row tasks)");
    dist_cmd->add_option("--out", dist.out, "Matrix path (.csv for CSV, binary otherwise)")->required();
    dist_cmd->add_option("--r", dist.r, "Weight of the Wasserstein term")->check(CLI::Range(0.0, 1.0));
    add_encoder_flags(dist_cmd, dist.encoder);
    add_solver_flags(dist_cmd, dist.solver);

    StatsArgs stats;
    auto* stats_cmd = app.add_subcommand("stats", "Average, max and min of a distance matrix");
    stats_cmd->add_option("--matrix", stats.matrix, "Binary distance matrix")->required();
    stats_cmd->add_option("--rows-corpus", stats.rows_corpus, "Row tasks, to group cells by domain");
    stats_cmd->add_option("--cols-corpus", stats.cols_corpus, "Column tasks (default: the row tasks)");
    stats_cmd->add_option("--bins", stats.bins, "Histogram bins")->check(CLI::PositiveNumber);
    stats_cmd->add_option("--out", stats.out, "Also write the JSON report here");

    SelectArgs sel;
    auto* select_cmd = app.add_subcommand("select", "Rank source tasks by distance to target tasks");
    select_cmd->add_option("--target", sel.target, "Target tasks (support sets)");
    select_cmd->add_option("--target-id", sel.target_ids, "Use only these target task ids");
    select_cmd->add_option("--sources", sel.sources, "Candidate source tasks")->required();
    select_cmd->add_option("--m", sel.m, "How many sources to keep")->required();
    select_cmd->add_option("--against", sel.against, "Score against target support sets or provided query sets")
        ->check(CLI::IsMember({"support", "query"}));
    select_cmd->add_option("--queries", sel.queries, "Query-set tasks, used with --against query");
    select_cmd->add_option("--r", sel.r, "Weight of the Wasserstein term")->check(CLI::Range(0.0, 1.0));
    select_cmd->add_option("--out", sel.out, "Also write the selection JSON here");
    add_encoder_flags(select_cmd, sel.encoder);
    add_solver_flags(select_cmd, sel.solver);

    ProbeArgs probe;
    auto* probe_cmd = app.add_subcommand("probe", "Rank correlation of embedding distance and likelihood gap");
    probe_cmd->add_option("--corpus", probe.corpus, "Task file holding the reference task")->required();
    probe_cmd->add_option("--reference", probe.reference, "Index of the reference task");
    probe_cmd->add_option("--pairs", probe.pairs, "Number of perturbed copies")->check(CLI::PositiveNumber);
    probe_cmd->add_option("--max-noise", probe.max_noise, "Noise of the most perturbed copy")
        ->check(CLI::NonNegativeNumber);
    probe_cmd->add_option("--bins", probe.bins, "Histogram bins")->check(CLI::PositiveNumber);
    probe_cmd->add_option("--out", probe.out, "CSV of pair_id,distance,gap");
    probe_cmd->add_option("--hist", probe.hist, "Histogram JSON of distances");
    add_encoder_flags(probe_cmd, probe.encoder);
    add_solver_flags(probe_cmd, probe.solver);

    CurriculumArgs cur;
    auto* cur_cmd = app.add_subcommand("compare-curriculum", "Train a metric probe on selected and on random tasks");
    cur_cmd->add_option("--sources", cur.sources, "Candidate source tasks")->required();
    cur_cmd->add_option("--targets", cur.targets, "Target tasks driving the selection")->required();
    cur_cmd->add_option("--eval", cur.eval, "Held-out target-domain tasks with at least 2 shots")->required();
    cur_cmd->add_option("--out", cur.out, "JSON report");
    cur_cmd->add_option("--pool", cur.pool, "Tasks per training pool")->check(CLI::PositiveNumber);
    cur_cmd->add_option("--epochs", cur.epochs, "Probe training epochs")->check(CLI::PositiveNumber);
    cur_cmd->add_option("--lr", cur.lr, "Probe learning rate")->check(CLI::PositiveNumber);
    cur_cmd->add_option("--r", cur.r, "Weight of the Wasserstein term")->check(CLI::Range(0.0, 1.0));
    add_encoder_flags(cur_cmd, cur.encoder);
    add_solver_flags(cur_cmd, cur.solver);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << "\n";
        return 2;
    }

    if (print_config) {
        std::cout << app.config_to_str(true, false);
        return 0;
    }

    try {
        if (select_cmd->parsed()) {
            require(sel.against == "support" ? !sel.target.empty() : !sel.queries.empty(),
                    sel.against == "support" ? "select needs --target" : "--against query needs --queries");
        }
        const int workers = resolve_threads(threads);
        if (gen_cmd->parsed()) return run_gen(gen, seed);
        if (train_cmd->parsed()) return run_train(tr, seed, workers);
        if (dist_cmd->parsed()) return run_dist(dist, workers);
        if (stats_cmd->parsed()) return run_stats(stats);
        if (select_cmd->parsed()) return run_select(sel, workers);
        if (probe_cmd->parsed()) return run_probe(probe, seed);
        if (cur_cmd->parsed()) return run_curriculum(cur, seed, workers);
    } catch (const Error& e) {
        std::cerr << "error: " << to_string(e.code()) << ": " << one_line(e.what()) << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << one_line(e.what()) << "\n";
        return 1;
    }
    return 0;
}
