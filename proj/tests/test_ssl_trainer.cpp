#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "otts/random.hpp"
#include "otts/ssl_trainer.hpp"
#include "otts/synth_data.hpp"

using namespace otts;

namespace {

std::vector<Task> corpus(std::uint64_t seed, int n)
{
    CorpusManifest m = default_manifest(seed);
    m.n_tasks = n;
    return generate_corpus(m).tasks;
}

TrainConfig small_config(std::uint64_t seed)
{
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.threads = 1;
    return cfg;
}

std::string temp_path(const std::string& name)
{
    return (std::filesystem::temp_directory_path() / ("otts_trainer_" + name)).string();
}

bool same_state(const TrainState& a, const TrainState& b)
{
    auto same_vec = [](const Vector& x, const Vector& y) {
        return x.size() == y.size() &&
               std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) == 0;
    };
    return same_values(a.online, b.online) && same_values(a.target, b.target) && a.epoch == b.epoch &&
           a.step == b.step && a.adam.step == b.adam.step && same_vec(a.adam.m, b.adam.m) &&
           same_vec(a.adam.v, b.adam.v) && a.online.param_version == b.online.param_version &&
           a.target.param_version == b.target.param_version;
}

double mean(const std::vector<double>& v)
{
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace

TEST_CASE("init_state: the target starts as a copy of the online encoder")
{
    const TrainState s = init_state(small_config(3));
    CHECK(same_values(s.online, s.target));
    CHECK(s.epoch == 0);
    CHECK(s.step == 0);
    CHECK(same_values(init_state(small_config(3)).online, s.online));
    CHECK_FALSE(same_values(init_state(small_config(4)).online, s.online));
}

TEST_CASE("ssl_step: identical shots with theta = xi sit at the minimum")
{
    std::vector<Task> batch = corpus(1, 4);
    for (Task& t : batch)
        for (Eigen::Index i = 1; i < t.num_samples(); i += 2) t.features.row(i) = t.features.row(i - 1);
    const TrainConfig cfg = small_config(1);
    const TrainState s = init_state(cfg);
    const StepResult out = ssl_step(batch, s, cfg);
    CHECK(out.mean_loss <= 1e-6);
    CHECK((flatten(out.state.online) - flatten(s.online)).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("ssl_step: a task with k_shot != 2 is rejected before any update")
{
    std::vector<Task> batch = corpus(2, 3);
    CorpusManifest m = default_manifest(2);
    m.n_tasks = 1;
    m.k_shot = 3;
    batch.push_back(generate_corpus(m).tasks[0]);
    const TrainConfig cfg = small_config(2);
    const TrainState s = init_state(cfg);
    CHECK_THROWS_AS(ssl_step(batch, s, cfg), Error);
}

TEST_CASE("ssl_step: one step descends in at least 90% of 50 trials")
{
    int descended = 0;
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        const std::vector<Task> tasks = corpus(100 + trial, 8);
        std::vector<const Task*> batch;
        for (const Task& t : tasks) batch.push_back(&t);
        TrainConfig cfg = small_config(trial);
        const TrainState before = init_state(cfg);
        const double loss_before = mean(batch_losses(batch, before, cfg));
        const StepResult step = ssl_step(batch, before, cfg);
        CHECK(step.mean_loss == doctest::Approx(loss_before).epsilon(1e-9));
        // Same splits and same target: only the online update differs.
        TrainState after = before;
        after.online = step.state.online;
        descended += mean(batch_losses(batch, after, cfg)) <= loss_before;
    }
    INFO("descended in " << descended << " of 50 trials");
    CHECK(descended >= 45);
}

TEST_CASE("ssl_step: the target moves by exactly the EMA formula")
{
    const std::vector<Task> batch = corpus(5, 8);
    const TrainConfig cfg = small_config(5);
    TrainState s = init_state(cfg);
    s = ssl_step(batch, s, cfg).state;  // online and target now differ
    const StepResult out = ssl_step(batch, s, cfg);
    const EncoderParams expected = ema_update(s.target, out.state.online, 0.99);
    CHECK(same_values(out.state.target, expected));
    const Vector xi = flatten(s.target), th = flatten(out.state.online), got = flatten(out.state.target);
    for (Eigen::Index i = 0; i < xi.size(); ++i) CHECK(got(i) == 0.99 * xi(i) + (1.0 - 0.99) * th(i));
    CHECK(out.state.step == s.step + 1);
}

TEST_CASE("ssl_step: thread count does not change the result")
{
    const std::vector<Task> batch = corpus(6, 16);
    TrainConfig cfg = small_config(6);
    const TrainState s = init_state(cfg);
    const StepResult one = ssl_step(batch, s, cfg);
    cfg.threads = 3;
    const StepResult three = ssl_step(batch, s, cfg);
    CHECK(same_state(one.state, three.state));
    CHECK(one.task_losses == three.task_losses);
}

TEST_CASE("train: zero epochs returns the initial target and an empty log")
{
    TrainConfig cfg = small_config(7);
    cfg.epochs = 0;
    const TrainResult r = train(corpus(7, 8), cfg);
    CHECK(r.log.empty());
    CHECK(same_values(r.deployed, init_state(cfg).target));
}

TEST_CASE("train: deterministic per seed and deploys the target")
{
    const std::vector<Task> tasks = corpus(8, 24);
    const TrainConfig cfg = small_config(8);
    const TrainResult a = train(tasks, cfg);
    const TrainResult b = train(tasks, cfg);
    CHECK(same_state(a.state, b.state));
    CHECK(same_values(a.deployed, a.state.target));
    CHECK_FALSE(same_values(a.deployed, a.state.online));
    REQUIRE(a.log.size() == 2);
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].epoch == static_cast<std::int64_t>(i) + 1);
        CHECK(a.log[i].mean_loss == b.log[i].mean_loss);
        CHECK(a.log[i].std_loss == b.log[i].std_loss);
        CHECK(a.log[i].param_version == b.log[i].param_version);
    }
    CHECK(a.state.step == 6);
}

TEST_CASE("train: checkpoints and resume reproduce an uninterrupted run")
{
    const std::vector<Task> tasks = corpus(9, 16);
    TrainConfig cfg = small_config(9);
    cfg.epochs = 3;
    const TrainResult full = train(tasks, cfg);

    TrainConfig first = cfg;
    first.epochs = 1;
    first.checkpoint_path = temp_path("resume.ckpt");
    first.log_path = temp_path("resume.log");
    train(tasks, first);
    TrainState saved = load_checkpoint(first.checkpoint_path);
    CHECK(saved.epoch == 1);
    TrainConfig rest = cfg;
    rest.log_path = first.log_path;
    const TrainResult resumed = train(tasks, rest, {}, saved);
    CHECK(same_state(resumed.state, full.state));
    CHECK(resumed.log.size() == 2);

    std::ifstream log(first.log_path);
    std::string line;
    std::vector<EpochRecord> records;
    while (std::getline(log, line)) records.push_back(epoch_record_from_json(line));
    REQUIRE(records.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(records[i].epoch == static_cast<std::int64_t>(i) + 1);
        CHECK(records[i].mean_loss == full.log[i].mean_loss);
    }
    std::filesystem::remove(first.checkpoint_path);
    std::filesystem::remove(first.log_path);
}

TEST_CASE("checkpoint: bytes round-trip exactly")
{
    const std::vector<Task> tasks = corpus(10, 8);
    const TrainConfig cfg = small_config(10);
    const TrainState s = ssl_step(tasks, init_state(cfg), cfg).state;
    const std::string bytes = checkpoint_to_bytes(s);
    const TrainState back = checkpoint_from_bytes(bytes);
    CHECK(same_state(back, s));
    CHECK(checkpoint_to_bytes(back) == bytes);
    CHECK(bytes.substr(0, 4) == "OTTS");
}

TEST_CASE("checkpoint: truncated or foreign files are parse errors")
{
    const TrainState s = init_state(small_config(11));
    const std::string bytes = checkpoint_to_bytes(s);
    for (std::size_t cut : {std::size_t{3}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1})
        CHECK_THROWS_AS(checkpoint_from_bytes(bytes.substr(0, cut)), ParseError);
    CHECK_THROWS_AS(checkpoint_from_bytes(bytes + "x"), ParseError);
    CorpusManifest m = default_manifest(1);
    m.n_tasks = 1;
    CHECK_THROWS_AS(checkpoint_from_bytes(corpus_to_binary(generate_corpus(m))), Error);
}

TEST_CASE("train: rejects bad configurations and mismatched corpora")
{
    const std::vector<Task> tasks = corpus(12, 4);
    TrainConfig cfg = small_config(12);
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(tasks, cfg), Error);
    cfg = small_config(12);
    cfg.r = 1.5;
    CHECK_THROWS_AS(train(tasks, cfg), Error);
    cfg = small_config(12);
    cfg.shape.widths = {5, 8, 4};
    CHECK_THROWS_AS(train(tasks, cfg), Error);
    CHECK_THROWS_AS(train({}, small_config(12)), Error);
}

TEST_CASE("epoch records survive JSON")
{
    EpochRecord r;
    r.epoch = 4;
    r.mean_loss = 0.123456789012345678;
    r.std_loss = 1.0 / 3.0;
    r.seconds = 2.5;
    r.param_version = 99;
    r.converged = false;
    const EpochRecord back = epoch_record_from_json(to_json_line(r));
    CHECK(back.epoch == r.epoch);
    CHECK(back.mean_loss == r.mean_loss);
    CHECK(back.std_loss == r.std_loss);
    CHECK(back.param_version == r.param_version);
    CHECK(back.converged == r.converged);
    CHECK_THROWS_AS(epoch_record_from_json("{\"epoch\": 1"), ParseError);
}
