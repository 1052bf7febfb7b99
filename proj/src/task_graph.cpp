#include "otts/task_graph.hpp"

#include <array>
#include <random>

namespace otts {

void validate_task(const Task& task)
{
    require(task.n_way > 0, "task " + std::to_string(task.task_id) + ": n_way must be positive");
    require(task.k_shot > 0, "task " + std::to_string(task.task_id) + ": k_shot must be positive");
    const auto expected = static_cast<Eigen::Index>(task.n_way) * task.k_shot;
    require(task.features.rows() == expected && static_cast<Eigen::Index>(task.labels.size()) == expected,
            "task " + std::to_string(task.task_id) + ": expected n_way * k_shot samples");
    require(task.features.cols() > 0, "task " + std::to_string(task.task_id) + ": zero feature dimension");
    require(task.features.allFinite(), "task " + std::to_string(task.task_id) + ": non-finite feature");
    std::vector<int> counts(static_cast<std::size_t>(task.n_way), 0);
    for (int label : task.labels) {
        require(label >= 0 && label < task.n_way,
                "task " + std::to_string(task.task_id) + ": label out of range");
        ++counts[static_cast<std::size_t>(label)];
    }
    for (int c : counts)
        require(c == task.k_shot, "task " + std::to_string(task.task_id) + ": unbalanced labels");
    require(task.class_ids.empty() || static_cast<int>(task.class_ids.size()) == task.n_way,
            "task " + std::to_string(task.task_id) + ": class_ids must have n_way entries");
}

std::pair<Task, Task> split_task(const Task& task, std::uint64_t seed)
{
    require(task.k_shot == 2, "split_task: task " + std::to_string(task.task_id) + " has k_shot " +
                                  std::to_string(task.k_shot) + ", expected 2");
    validate_task(task);

    Task first, second;
    for (Task* half : {&first, &second}) {
        half->task_id = task.task_id;
        half->n_way = task.n_way;
        half->k_shot = 1;
        half->domain_tag = task.domain_tag;
        half->class_ids = task.class_ids;
        half->features.resize(task.n_way, task.dim());
        half->labels.assign(static_cast<std::size_t>(task.n_way), 0);
    }

    // Per class: index of each of its two samples, in row order.
    std::vector<std::array<Eigen::Index, 2>> rows(static_cast<std::size_t>(task.n_way), {-1, -1});
    for (Eigen::Index i = 0; i < task.num_samples(); ++i) {
        auto& slot = rows[static_cast<std::size_t>(task.labels[static_cast<std::size_t>(i)])];
        (slot[0] < 0 ? slot[0] : slot[1]) = i;
    }

    std::mt19937_64 rng(seed);
    for (int c = 0; c < task.n_way; ++c) {
        const auto& slot = rows[static_cast<std::size_t>(c)];
        const bool swap = (rng() & 1U) != 0U;
        first.features.row(c) = task.features.row(slot[swap ? 1 : 0]);
        second.features.row(c) = task.features.row(slot[swap ? 0 : 1]);
        first.labels[static_cast<std::size_t>(c)] = c;
        second.labels[static_cast<std::size_t>(c)] = c;
    }
    return {std::move(first), std::move(second)};
}

} // namespace otts
