#include "otts/ssl_trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"
#include "otts/binary_io.hpp"
#include "otts/parallel.hpp"
#include "otts/random.hpp"

namespace otts {

void validate_config(const TrainConfig& cfg)
{
    require(cfg.batch_size >= 1, "batch_size must be >= 1");
    require(cfg.epochs >= 0, "epochs must be >= 0");
    require(cfg.r >= 0.0 && cfg.r <= 1.0, "r must lie in [0, 1]");
    require(cfg.tau >= 0.0 && cfg.tau <= 1.0, "tau must lie in [0, 1]");
    require(cfg.eta > 0.0 && std::isfinite(cfg.eta), "eta must be positive");
    require(cfg.shape.widths.size() >= 2, "encoder needs at least input and output widths");
}

TrainState init_state(const TrainConfig& cfg)
{
    TrainState s;
    s.online = init_encoder(cfg.shape, mix_seed({cfg.seed, 0x1e17}));
    s.target = s.online;
    s.adam = init_adam(s.online);
    return s;
}

namespace {

std::uint64_t split_seed(const TrainConfig& cfg, std::int64_t step, TaskId id)
{
    return mix_seed({cfg.seed, 0x5b17, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(id)});
}

void check_batch(const std::vector<const Task*>& batch, const TrainState& state)
{
    require(!batch.empty(), "ssl_step: empty batch");
    for (const Task* t : batch) {
        require(t != nullptr, "ssl_step: null task");
        require(t->k_shot == 2, "ssl_step: task " + std::to_string(t->task_id) + " has k_shot " +
                                    std::to_string(t->k_shot) + ", expected 2");
        validate_task(*t);
        require(t->dim() == state.online.input_dim(),
                "ssl_step: task " + std::to_string(t->task_id) + " has feature dimension " +
                    std::to_string(t->dim()) + ", encoder expects " +
                    std::to_string(state.online.input_dim()));
    }
}

std::vector<const Task*> pointers(const std::vector<Task>& tasks)
{
    std::vector<const Task*> out;
    out.reserve(tasks.size());
    for (const Task& t : tasks) out.push_back(&t);
    return out;
}

} // namespace

std::vector<double> batch_losses(const std::vector<const Task*>& batch, const TrainState& state,
                                 const TrainConfig& cfg)
{
    check_batch(batch, state);
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), resolve_threads(cfg.threads), [&](std::size_t i) {
        const auto [a, b] = split_task(*batch[i], split_seed(cfg, state.step, batch[i]->task_id));
        losses[i] = pair_loss(state.online, state.target, a, b, cfg.r, cfg.solver, cfg.graph);
    });
    return losses;
}

StepResult ssl_step(const std::vector<const Task*>& batch, const TrainState& state, const TrainConfig& cfg)
{
    validate_config(cfg);
    check_batch(batch, state);

    std::vector<PairLossGrad> parts(batch.size());
    parallel_for(batch.size(), resolve_threads(cfg.threads), [&](std::size_t i) {
        const auto [a, b] = split_task(*batch[i], split_seed(cfg, state.step, batch[i]->task_id));
        parts[i] = grad_ot_loss(state.online, state.target, a, b, cfg.r, cfg.solver, cfg.graph);
    });

    StepResult out;
    const double inv = 1.0 / static_cast<double>(batch.size());
    Vector grad = Vector::Zero(state.online.num_scalars());
    for (const PairLossGrad& p : parts) {
        grad += flatten(p.grad);
        out.task_losses.push_back(p.loss);
        out.converged = out.converged && p.converged;
    }
    grad *= inv;
    out.mean_loss = std::accumulate(out.task_losses.begin(), out.task_losses.end(), 0.0) * inv;

    auto [online, adam] = adam_step(state.online, unflatten(state.online, grad), state.adam, cfg.eta);
    out.state.target = ema_update(state.target, online, cfg.tau);
    out.state.online = std::move(online);
    out.state.adam = std::move(adam);
    out.state.epoch = state.epoch;
    out.state.step = state.step + 1;
    return out;
}

StepResult ssl_step(const std::vector<Task>& batch, const TrainState& state, const TrainConfig& cfg)
{
    return ssl_step(pointers(batch), state, cfg);
}

std::string to_json_line(const EpochRecord& rec)
{
    const nlohmann::json j = {{"epoch", rec.epoch},
                              {"mean_loss", rec.mean_loss},
                              {"std_loss", rec.std_loss},
                              {"seconds", rec.seconds},
                              {"param_version", rec.param_version},
                              {"converged", rec.converged}};
    return j.dump();
}

EpochRecord epoch_record_from_json(const std::string& line)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(e.byte > 0 ? e.byte - 1 : 0, "malformed training log line");
    }
    EpochRecord r;
    try {
        r.epoch = j.at("epoch").get<std::int64_t>();
        r.mean_loss = j.at("mean_loss").get<double>();
        r.std_loss = j.at("std_loss").get<double>();
        r.seconds = j.at("seconds").get<double>();
        r.param_version = j.at("param_version").get<std::int64_t>();
        r.converged = j.value("converged", true);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(0, std::string("training log line: ") + e.what());
    }
    return r;
}

TrainResult train(const std::vector<Task>& corpus, const TrainConfig& cfg, const EpochCallback& on_epoch,
                  std::optional<TrainState> resume)
{
    validate_config(cfg);
    require(!corpus.empty(), "train: empty corpus");
    TrainResult result;
    result.state = resume ? std::move(*resume) : init_state(cfg);
    TrainState& state = result.state;
    validate_params(state.online);
    validate_params(state.target);
    require_same_shape(state.online, state.target, "train");
    for (const Task& t : corpus)
        require(t.dim() == state.online.input_dim(),
                "train: task " + std::to_string(t.task_id) + " has feature dimension " +
                    std::to_string(t.dim()) + ", encoder expects " + std::to_string(state.online.input_dim()));

    if (!cfg.log_path.empty() && !resume) {
        std::ofstream truncate(cfg.log_path, std::ios::trunc);
        if (!truncate) throw Error(ErrorCode::io_error, "cannot open '" + cfg.log_path + "' for writing");
    }

    std::vector<std::size_t> order(corpus.size());
    for (std::int64_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(mix_seed({cfg.seed, 0xe90c, static_cast<std::uint64_t>(epoch)}));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(order[i - 1], order[pick(rng)]);
        }

        std::vector<double> losses;
        losses.reserve(corpus.size());
        bool converged = true;
        for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const Task*> batch;
            for (std::size_t k = first; k < last; ++k) batch.push_back(&corpus[order[k]]);
            StepResult step = ssl_step(batch, state, cfg);
            losses.insert(losses.end(), step.task_losses.begin(), step.task_losses.end());
            converged = converged && step.converged;
            state = std::move(step.state);
        }
        state.epoch = epoch + 1;

        EpochRecord rec;
        rec.epoch = epoch + 1;
        const double n = static_cast<double>(losses.size());
        rec.mean_loss = std::accumulate(losses.begin(), losses.end(), 0.0) / n;
        double var = 0.0;
        for (double l : losses) var += (l - rec.mean_loss) * (l - rec.mean_loss);
        rec.std_loss = std::sqrt(var / n);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        rec.param_version = state.target.param_version;
        rec.converged = converged;
        result.log.push_back(rec);

        if (!cfg.checkpoint_path.empty()) save_checkpoint(state, cfg.checkpoint_path);
        if (!cfg.log_path.empty()) {
            std::ofstream log(cfg.log_path, std::ios::app);
            log << to_json_line(rec) << '\n';
            if (!log) throw Error(ErrorCode::io_error, "failed appending to '" + cfg.log_path + "'");
        }
        if (on_epoch) on_epoch(state, rec);
    }
    result.deployed = state.target;
    return result;
}

// ---- checkpoints --------------------------------------------------------

namespace {

void write_params(BinaryWriter& w, const EncoderParams& p)
{
    w.u32(static_cast<std::uint32_t>(p.activation));
    w.i64(p.param_version);
    w.u64(p.layers.size());
    for (const Layer& l : p.layers) {
        w.matrix(l.weight);
        w.vector(l.bias);
    }
}

EncoderParams read_params(BinaryReader& r)
{
    const std::uint64_t at = r.offset();
    EncoderParams p;
    const std::uint32_t act = r.u32();
    if (act > static_cast<std::uint32_t>(Activation::relu)) throw ParseError(at, "unknown activation code");
    p.activation = static_cast<Activation>(act);
    p.param_version = r.i64();
    const std::uint64_t n = r.u64();
    if (n == 0 || n > 1024) throw ParseError(at, "implausible layer count");
    for (std::uint64_t i = 0; i < n; ++i) {
        Layer l;
        l.weight = r.matrix();
        l.bias = r.vector();
        p.layers.push_back(std::move(l));
    }
    try {
        validate_params(p);
    } catch (const Error& e) {
        throw ParseError(at, e.what());
    }
    return p;
}

} // namespace

std::string checkpoint_to_bytes(const TrainState& state)
{
    BinaryWriter w(BlobKind::checkpoint);
    w.i64(state.epoch);
    w.i64(state.step);
    write_params(w, state.online);
    write_params(w, state.target);
    w.i64(state.adam.step);
    w.f64(state.adam.beta1);
    w.f64(state.adam.beta2);
    w.f64(state.adam.epsilon);
    w.vector(state.adam.m);
    w.vector(state.adam.v);
    return w.bytes();
}

TrainState checkpoint_from_bytes(std::string bytes)
{
    BinaryReader r(std::move(bytes), BlobKind::checkpoint);
    TrainState s;
    s.epoch = r.i64();
    s.step = r.i64();
    s.online = read_params(r);
    s.target = read_params(r);
    const std::uint64_t at = r.offset();
    s.adam.step = r.i64();
    s.adam.beta1 = r.f64();
    s.adam.beta2 = r.f64();
    s.adam.epsilon = r.f64();
    s.adam.m = r.vector();
    s.adam.v = r.vector();
    r.finish();
    try {
        require_same_shape(s.online, s.target, "checkpoint");
    } catch (const Error& e) {
        throw ParseError(at, e.what());
    }
    if (s.adam.m.size() != s.online.num_scalars() || s.adam.v.size() != s.online.num_scalars())
        throw ParseError(at, "optimizer moments do not match the parameter count");
    return s;
}

void save_checkpoint(const TrainState& state, const std::string& path)
{
    write_file_atomic(path, checkpoint_to_bytes(state));
}

TrainState load_checkpoint(const std::string& path) { return checkpoint_from_bytes(read_file(path)); }

} // namespace otts
