#ifndef OTTS_SYNTH_DATA_HPP
#define OTTS_SYNTH_DATA_HPP

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "otts/task_graph.hpp"

namespace otts {

/// One synthetic domain: Gaussian class clusters in a domain-specific
/// rotated frame. Class means vary only along the first half of the frame
/// (the signal subspace); within-class noise is mostly in the other half.
struct DomainSpec {
    std::string domain_tag;
    int n_classes = 20;
    double mean_scale = 1.0;    // spread of class means inside the signal subspace
    double noise_scale = 1.0;   // within-class standard deviation
    double center_scale = 2.0;  // distance of the domain center from the origin
    Eigen::Index dim = 16;
    std::uint64_t seed = 0;
};

void validate_spec(const DomainSpec& spec);

struct DomainGenerator {
    DomainSpec spec;
    Vector center;
    Matrix basis;       // dim x dim orthonormal, columns = frame axes
    Matrix means;       // n_classes x dim
    Vector noise_std;   // per frame axis

    Eigen::Index signal_dims() const { return spec.dim / 2; }
    // One draw from class `cls`.
    Vector sample(int cls, std::mt19937_64& rng) const;
};

DomainGenerator gen_domain(const DomainSpec& spec);

/// n_way distinct classes, k_shot samples each, rows class-major.
Task sample_task(const DomainGenerator& gen, int n_way, int k_shot, TaskId task_id, std::uint64_t seed);

struct CorpusManifest {
    std::vector<DomainSpec> domains;
    int n_tasks = 2048;
    int n_way = 5;
    int k_shot = 2;
    TaskId first_task_id = 0;
    std::uint64_t seed = 0;
};

/// Defaults: `n_domains` domains of 20 classes in 16 dimensions, 2048 5-way
/// 2-shot tasks. Domain seeds derive from `seed`.
CorpusManifest default_manifest(std::uint64_t seed, int n_domains = 3);

struct Corpus {
    CorpusManifest manifest;
    std::vector<Task> tasks;
};

/// Task i comes from domain i mod |domains| with id first_task_id + i.
Corpus generate_corpus(const CorpusManifest& manifest);

std::string manifest_to_json(const CorpusManifest& m);
CorpusManifest manifest_from_json(const std::string& text);

/// JSON lines: a header line (format, version, count, manifest), then one
/// task per line.
std::string corpus_to_jsonl(const Corpus& c);
Corpus corpus_from_jsonl(const std::string& text);

std::string corpus_to_binary(const Corpus& c);
Corpus corpus_from_binary(std::string bytes);

/// Picks the binary layout for paths ending in ".bin", JSON lines otherwise.
void write_corpus(const Corpus& c, const std::string& path);
Corpus read_corpus(const std::string& path);

} // namespace otts

#endif // OTTS_SYNTH_DATA_HPP
