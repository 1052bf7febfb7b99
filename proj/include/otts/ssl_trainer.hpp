#ifndef OTTS_SSL_TRAINER_HPP
#define OTTS_SSL_TRAINER_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "otts/encoder.hpp"
#include "otts/ot/graph_ot.hpp"
#include "otts/task_graph.hpp"

namespace otts {

struct TrainConfig {
    int batch_size = 64;
    int epochs = 50;
    double r = 0.5;
    double tau = 0.99;
    double eta = 1e-3;
    std::uint64_t seed = 0;
    SolverConfig solver;
    GraphOptions graph;
    EncoderShape shape;  // widths.front() must match the corpus feature dimension
    int threads = 0;     // 0: OTTS_THREADS or hardware count
    std::string checkpoint_path;  // written after every epoch when set
    std::string log_path;         // JSON lines, one record per epoch, when set
};

void validate_config(const TrainConfig& cfg);

/// Online parameters, EMA target and optimizer state.
struct TrainState {
    EncoderParams online;
    EncoderParams target;
    AdamState adam;
    std::int64_t epoch = 0;  // completed epochs
    std::int64_t step = 0;   // completed optimizer steps
};

/// Online encoder from cfg.seed; the target starts as an exact copy.
TrainState init_state(const TrainConfig& cfg);

struct StepResult {
    TrainState state;
    double mean_loss = 0.0;
    std::vector<double> task_losses;
    bool converged = true;
};

/// One optimizer step on a batch of 2-shot tasks: split each task, sum the
/// loss over both orders, average over the batch, Adam on the online
/// parameters, then EMA into the target. Every task is checked before any
/// parameter changes.
StepResult ssl_step(const std::vector<const Task*>& batch, const TrainState& state, const TrainConfig& cfg);
StepResult ssl_step(const std::vector<Task>& batch, const TrainState& state, const TrainConfig& cfg);

/// Batch loss at the given parameters with the splits ssl_step would use.
std::vector<double> batch_losses(const std::vector<const Task*>& batch, const TrainState& state,
                                 const TrainConfig& cfg);

struct EpochRecord {
    std::int64_t epoch = 0;  // 1-based
    double mean_loss = 0.0;
    double std_loss = 0.0;   // population std of per-task losses within the epoch
    double seconds = 0.0;
    std::int64_t param_version = 0;
    bool converged = true;   // every solve in the epoch converged
};

std::string to_json_line(const EpochRecord& rec);
EpochRecord epoch_record_from_json(const std::string& line);

struct TrainResult {
    EncoderParams deployed;  // always the target encoder
    TrainState state;
    std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const TrainState&, const EpochRecord&)>;

/// Runs cfg.epochs epochs over a seeded per-epoch permutation of the corpus.
/// A `resume` state continues from its completed epoch count.
TrainResult train(const std::vector<Task>& corpus, const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                  std::optional<TrainState> resume = std::nullopt);

/// Binary checkpoint: epoch, step, both parameter sets and the Adam moments.
std::string checkpoint_to_bytes(const TrainState& state);
TrainState checkpoint_from_bytes(std::string bytes);
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

} // namespace otts

#endif // OTTS_SSL_TRAINER_HPP
