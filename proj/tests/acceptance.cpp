// End-to-end checks, one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "json.hpp"
#include "otts/analysis.hpp"
#include "otts/random.hpp"
#include "otts/selector.hpp"
#include "otts/ssl_trainer.hpp"
#include "otts/synth_data.hpp"

using namespace otts;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kSeed = 7;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0)
{
    std::normal_distribution<double> normal(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
    return m;
}

fs::path work_dir()
{
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / ("otts_acceptance_" + std::to_string(::getpid()));
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

std::string path(const std::string& name) { return (work_dir() / name).string(); }

std::string slurp(const std::string& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int cli(const std::string& args, const std::string& stdout_file = "")
{
    const std::string out = stdout_file.empty() ? "/dev/null" : stdout_file;
    const std::string cmd = std::string(OTTS_CLI_PATH) + " " + args + " >" + out + " 2>" + path("cli_stderr.txt");
    const int status = std::system(cmd.c_str());
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    if (code != 0) std::cerr << "  cli failed (" << code << "): " << args << "\n  " << slurp(path("cli_stderr.txt"));
    return code;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

// ---- 1: entropic Wasserstein vs permutation enumeration ----------------

double enumerate_assignment(const Matrix& cost)
{
    std::vector<int> perm(static_cast<std::size_t>(cost.rows()));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < perm.size(); ++i) s += cost(static_cast<Eigen::Index>(i), perm[i]);
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / static_cast<double>(cost.rows());
}

Outcome solver_oracle()
{
    const auto start = Clock::now();
    std::mt19937_64 rng(kSeed);
    SolverConfig cfg;
    cfg.sinkhorn.epsilon = 0.005;
    double worst = 0.0;
    for (int pair = 0; pair < 200; ++pair) {
        const Matrix xa = gaussian(5, 4, rng), xb = gaussian(5, 4, rng);
        Matrix cost(5, 5);
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 5; ++j) cost(i, j) = (xa.row(i) - xb.row(j)).norm();
        const double exact = enumerate_assignment(cost);
        const double got = wasserstein(build_graph(xa, 0), build_graph(xb, 1), cfg).distance;
        worst = std::max(worst, std::abs(got - exact) / exact);
    }
    const double elapsed = seconds_since(start);
    std::ostringstream d;
    d << "worst relative error " << worst << " over 200 pairs, " << elapsed << " s";
    return {worst <= 0.02 && elapsed < 10.0, d.str()};
}

// ---- 2: Gromov-Wasserstein invariance ------------------------------------

Outcome gw_invariance()
{
    std::mt19937_64 rng(kSeed + 1);
    std::uniform_int_distribution<int> size(2, 8);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = size(rng);
        const Matrix x = gaussian(n, 3, rng);
        std::vector<int> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix y(n, 3);
        for (int i = 0; i < n; ++i) y.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
        worst = std::max(worst, gromov_wasserstein(build_graph(x, 0), build_graph(y, 1)).distance);
    }
    Matrix c1(2, 2), c2(2, 2);
    c1 << 0.0, 1.0, 1.0, 0.0;
    c2 << 0.0, 3.0, 3.0, 0.0;
    const Vector half = Vector::Constant(2, 0.5);
    const double two_node = gromov_wasserstein(c1, c2, half, half).distance;
    const double analytic = 1.0;
    std::ostringstream d;
    d << "worst permuted-copy distance " << worst << "; two-node " << two_node << " vs " << analytic;
    return {worst <= 1e-3 && std::abs(two_node - analytic) <= 1e-4, d.str()};
}

// ---- 3: gradient vs central differences ----------------------------------

EncoderParams random_params(std::uint64_t seed)
{
    EncoderParams p = init_encoder(EncoderShape{}, seed);
    std::mt19937_64 rng(seed ^ 0x5a5a);
    for (Layer& l : p.layers) l.bias = gaussian(l.bias.size(), 1, rng, 0.1);
    return p;
}

Outcome gradient_check()
{
    const auto start = Clock::now();
    SolverConfig cfg;
    cfg.sinkhorn.epsilon = 0.005;
    cfg.sinkhorn.tol = 1e-8;
    cfg.sinkhorn.max_iter = 5000;
    const double h = 1e-5;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        CorpusManifest m = default_manifest(kSeed + seed);
        m.n_tasks = 1;
        const auto [t1, t2] = split_task(generate_corpus(m).tasks[0], seed);
        const EncoderParams theta = random_params(2 * seed + 1);
        const EncoderParams xi = random_params(2 * seed + 2);
        const Vector analytic = flatten(grad_ot_loss(theta, xi, t1, t2, 0.5, cfg).grad);
        const Vector base = flatten(theta);
        Vector fd(base.size());
        for (Eigen::Index k = 0; k < base.size(); ++k) {
            Vector up = base, down = base;
            up(k) += h;
            down(k) -= h;
            fd(k) = (pair_loss(unflatten(theta, up), xi, t1, t2, 0.5, cfg) -
                     pair_loss(unflatten(theta, down), xi, t1, t2, 0.5, cfg)) /
                    (2.0 * h);
        }
        worst = std::max(worst, (analytic - fd).cwiseAbs().maxCoeff() / fd.cwiseAbs().maxCoeff());
    }
    const double elapsed = seconds_since(start);
    std::ostringstream d;
    d << "worst relative error " << worst << " over 20 seeds (max |analytic - fd| / max |fd|), " << elapsed << " s";
    return {worst < 1e-3 && elapsed < 60.0, d.str()};
}

// ---- 4: EMA bit-exactness -------------------------------------------------

Outcome ema_exactness()
{
    std::size_t checked = 0, mismatched = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const EncoderParams xi = random_params(100 + seed);
        const EncoderParams theta = random_params(200 + seed);
        for (double tau : {0.0, 0.5, 0.99, 1.0}) {
            const Vector got = flatten(ema_update(xi, theta, tau));
            const Vector a = flatten(xi), b = flatten(theta);
            for (Eigen::Index i = 0; i < got.size(); ++i) {
                const double want = tau * a(i) + (1.0 - tau) * b(i);
                mismatched += std::memcmp(&want, &got(i), sizeof(double)) != 0;
                ++checked;
            }
        }
    }
    std::ostringstream d;
    d << mismatched << " of " << checked << " scalars differ from the formula";
    return {mismatched == 0, d.str()};
}

// ---- 5: training descent ----------------------------------------------------

struct Trained {
    Corpus corpus;
    TrainResult result;
};

Outcome training_descent(Trained& out)
{
    if (cli("--seed " + std::to_string(kSeed) + " gen --out " + path("corpus.jsonl")) != 0)
        return {false, "corpus generation failed"};
    out.corpus = read_corpus(path("corpus.jsonl"));
    TrainConfig cfg;
    cfg.seed = kSeed;
    const auto start = Clock::now();
    out.result = train(out.corpus.tasks, cfg);
    const double elapsed = seconds_since(start);

    const auto cli_start = Clock::now();
    const int code = cli("--seed " + std::to_string(kSeed) + " train --corpus " + path("corpus.jsonl") +
                         " --checkpoint " + path("cli.ckpt") + " --log " + path("cli.log"));
    const double cli_elapsed = seconds_since(cli_start);
    const bool same = code == 0 && slurp(path("cli.ckpt")) == checkpoint_to_bytes(out.result.state);

    const double first = out.result.log.front().mean_loss;
    const double last = out.result.log.back().mean_loss;
    std::ostringstream d;
    d << out.corpus.tasks.size() << " tasks, " << out.result.log.size() << " epochs: mean loss " << first << " -> "
      << last << " (ratio " << last / first << "), " << elapsed << " s; second run via the CLI "
      << (same ? "bit-identical" : "DIFFERS") << " (" << cli_elapsed << " s)";
    return {out.result.log.size() == 50 && last < 0.5 * first && same && elapsed < 600.0, d.str()};
}

// ---- 6: likelihood-gap probe -----------------------------------------------

Outcome gap_probe(const Trained& t)
{
    const EncoderParams& xi = t.result.deployed;
    const Task& ref = t.corpus.tasks.front();
    const ProbeClassifier w = train_probe(embed_graph(xi, ref).nodes, ref.labels, ref.n_way);
    const ProbeReport rep = likelihood_gap_probe(perturbation_pairs(ref, 200, 1.0, kSeed), w, xi);
    std::ostringstream d;
    d << "Spearman rho " << rep.spearman_rho << " over " << rep.pairs.size() << " pairs";
    return {rep.pairs.size() == 200 && rep.spearman_rho > 0.5, d.str()};
}

// ---- 7: selection quality ------------------------------------------------

Outcome selection_quality(const Trained& t)
{
    const EncoderParams& xi = t.result.deployed;
    double rate = 0.0;
    int worst = 20;
    for (std::uint64_t s = 0; s < 20; ++s) {
        CorpusManifest pool_m = t.corpus.manifest;
        pool_m.seed = 1000 + s;
        pool_m.n_tasks = 300;
        pool_m.first_task_id = 100000;
        const std::vector<Task> pool = generate_corpus(pool_m).tasks;
        CorpusManifest target_m = t.corpus.manifest;
        target_m.seed = 5000 + s;
        target_m.n_tasks = 3;
        target_m.first_task_id = 900000;
        const Task target = generate_corpus(target_m).tasks[s % 3];
        const SelectionResult sel = select_top_m(score_sources(target, pool, xi), 20);
        int same = 0;
        for (const ScoredTask& st : sel.ranked)
            same += pool[static_cast<std::size_t>(st.task_id - 100000)].domain_tag == target.domain_tag;
        rate += same / 20.0 / 20.0;
        worst = std::min(worst, same);
    }
    std::ostringstream d;
    d << "same-domain rate " << rate << " over 20 seeds (top 20 of 300; worst seed " << worst << "/20)";
    return {rate >= 0.8, d.str()};
}

// ---- 8: curriculum effect ------------------------------------------------

Outcome curriculum_effect(const Trained& t)
{
    save_checkpoint(t.result.state, path("xi.ckpt"));
    int loss_wins = 0, std_wins = 0, runs = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        CorpusManifest m = t.corpus.manifest;
        m.seed = 2000 + s;
        m.n_tasks = 300;
        m.first_task_id = 200000;
        write_corpus(generate_corpus(m), path("cur_sources.bin"));

        const DomainGenerator g = gen_domain(t.corpus.manifest.domains[s % 3]);
        Corpus targets{t.corpus.manifest, {}}, eval{t.corpus.manifest, {}};
        for (int i = 0; i < 3; ++i)
            targets.tasks.push_back(sample_task(g, 5, 2, 300000 + i, mix_seed({s, 0x7a, static_cast<std::uint64_t>(i)})));
        for (int i = 0; i < 20; ++i)
            eval.tasks.push_back(sample_task(g, 5, 6, 400000 + i, mix_seed({s, 0xe7, static_cast<std::uint64_t>(i)})));
        targets.manifest.n_tasks = 3;
        eval.manifest.n_tasks = 20;
        write_corpus(targets, path("cur_targets.jsonl"));
        write_corpus(eval, path("cur_eval.jsonl"));

        if (cli("--seed " + std::to_string(s) + " compare-curriculum --checkpoint " + path("xi.ckpt") + " --sources " +
                    path("cur_sources.bin") + " --targets " + path("cur_targets.jsonl") + " --eval " +
                    path("cur_eval.jsonl") + " --out " + path("cur.json")) != 0)
            continue;
        const auto j = nlohmann::json::parse(slurp(path("cur.json")));
        const auto& sel = j.at("selected");
        const auto& rnd = j.at("random");
        loss_wins += sel.at("final_loss").get<double>() < rnd.at("final_loss").get<double>();
        std_wins += sel.at("mean_epoch_loss_std").get<double>() < rnd.at("mean_epoch_loss_std").get<double>();
        ++runs;
    }
    std::ostringstream d;
    d << "selected beats random on final loss in " << loss_wins << "/20 seeds and on epoch-loss std in " << std_wins
      << "/20 (" << runs << " runs completed)";
    return {runs == 20 && loss_wins >= 14 && std_wins >= 14, d.str()};
}

// ---- 9: determinism and I/O ------------------------------------------------

std::string strip_seconds(const std::string& log)
{
    std::istringstream in(log);
    std::string line, out;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        j.erase("seconds");
        out += j.dump() + "\n";
    }
    return out;
}

Outcome determinism_io(const Trained& t)
{
    std::vector<std::string> failures;
    auto expect = [&](bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    };

    const Corpus& c = t.corpus;
    auto bit_equal = [](const Corpus& a, const Corpus& b) {
        if (a.tasks.size() != b.tasks.size()) return false;
        for (std::size_t i = 0; i < a.tasks.size(); ++i) {
            const Matrix& x = a.tasks[i].features;
            const Matrix& y = b.tasks[i].features;
            if (!(a.tasks[i] == b.tasks[i]) ||
                std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) != 0)
                return false;
        }
        return true;
    };
    expect(bit_equal(corpus_from_jsonl(corpus_to_jsonl(c)), c), "JSONL corpus round-trip");
    expect(bit_equal(corpus_from_binary(corpus_to_binary(c)), c), "binary corpus round-trip");
    const std::string ck = checkpoint_to_bytes(t.result.state);
    expect(checkpoint_to_bytes(checkpoint_from_bytes(ck)) == ck, "checkpoint round-trip");
    expect(checkpoint_to_bytes(load_checkpoint(path("cli.ckpt"))) == slurp(path("cli.ckpt")),
           "checkpoint file round-trip");

    // Each command runs twice with the same seed into two file sets.
    const std::string seed = "--seed 11 ";
    for (const char* tag : {"a", "b"}) {
        const std::string s = tag;
        expect(cli(seed + "gen --tasks 40 --out " + path("d_" + s + ".jsonl") + " --manifest-out " +
                   path("d_" + s + ".manifest.json")) == 0,
               "gen " + s);
        expect(cli(seed + "gen --tasks 40 --out " + path("d_" + s + ".bin")) == 0, "gen bin " + s);
        expect(cli(seed + "train --corpus " + path("d_" + s + ".jsonl") + " --epochs 3 --batch 8 --checkpoint " +
                   path("d_" + s + ".ckpt") + " --log " + path("d_" + s + ".log")) == 0,
               "train " + s);
        expect(cli(seed + "dist --checkpoint " + path("d_" + s + ".ckpt") + " --rows " + path("d_" + s + ".jsonl") +
                   " --out " + path("d_" + s + ".dist.bin")) == 0,
               "dist " + s);
        expect(cli(seed + "stats --matrix " + path("d_" + s + ".dist.bin") + " --rows-corpus " +
                   path("d_" + s + ".jsonl") + " --out " + path("d_" + s + ".stats.json")) == 0,
               "stats " + s);
        expect(cli(seed + "select --checkpoint " + path("d_" + s + ".ckpt") + " --target " + path("d_" + s + ".jsonl") +
                   " --target-id 3 --sources " + path("d_" + s + ".jsonl") + " --m 10 --out " +
                   path("d_" + s + ".select.json")) == 0,
               "select " + s);
        expect(cli(seed + "probe --checkpoint " + path("d_" + s + ".ckpt") + " --corpus " + path("d_" + s + ".jsonl") +
                   " --pairs 50 --out " + path("d_" + s + ".probe.csv") + " --hist " +
                   path("d_" + s + ".hist.json")) == 0,
               "probe " + s);
    }
    for (const char* suffix : {".jsonl", ".manifest.json", ".bin", ".ckpt", ".dist.bin", ".stats.json",
                               ".select.json", ".probe.csv", ".hist.json"})
        expect(slurp(path(std::string("d_a") + suffix)) == slurp(path(std::string("d_b") + suffix)) &&
                   !slurp(path(std::string("d_a") + suffix)).empty(),
               std::string("identical ") + suffix);
    expect(strip_seconds(slurp(path("d_a.log"))) == strip_seconds(slurp(path("d_b.log"))),
           "identical training logs apart from wall time");
    expect(bit_equal(read_corpus(path("d_a.jsonl")), read_corpus(path("d_a.bin"))), "JSONL and binary agree");

    std::ostringstream d;
    if (failures.empty()) {
        d << "round-trips bit-exact; 9 CLI output files identical across same-seed runs";
    } else {
        d << "failed:";
        for (const std::string& f : failures) d << " [" << f << "]";
    }
    return {failures.empty(), d.str()};
}

} // namespace

int main()
{
    int failed = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& check) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail
                  << std::endl;
    };

    Trained trained;
    bool have_training = false;
    report(1, "solver vs enumeration oracle", solver_oracle);
    report(2, "Gromov-Wasserstein invariance", gw_invariance);
    report(3, "gradient vs finite differences", gradient_check);
    report(4, "EMA exactness", ema_exactness);
    report(5, "training descent", [&] {
        Outcome o = training_descent(trained);
        have_training = !trained.result.log.empty();
        return o;
    });
    auto needs_training = [&](const std::function<Outcome(const Trained&)>& f) {
        return [&, f] { return have_training ? f(trained) : Outcome{false, "no trained encoder"}; };
    };
    report(6, "likelihood-gap probe", needs_training(gap_probe));
    report(7, "selection quality", needs_training(selection_quality));
    report(8, "curriculum effect", needs_training(curriculum_effect));
    report(9, "determinism and I/O", needs_training(determinism_io));

    std::error_code ec;
    fs::remove_all(work_dir(), ec);
    return failed == 0 ? 0 : 1;
}
