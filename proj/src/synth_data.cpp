#include "otts/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "otts/binary_io.hpp"
#include "otts/random.hpp"

namespace otts {

using nlohmann::json;

namespace {

constexpr const char* kJsonFormat = "otts-tasks";
constexpr int kJsonVersion = 1;
// Within-class noise along signal axes, relative to noise_scale.
constexpr double kSignalNoise = 0.25;

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
    return m;
}

} // namespace

void validate_spec(const DomainSpec& spec)
{
    const std::string who = "domain '" + spec.domain_tag + "'";
    require(spec.n_classes >= 1, who + ": n_classes must be positive");
    require(spec.dim >= 1, who + ": dim must be positive");
    require(std::isfinite(spec.mean_scale) && spec.mean_scale >= 0.0, who + ": mean_scale must be >= 0");
    require(std::isfinite(spec.noise_scale) && spec.noise_scale >= 0.0, who + ": noise_scale must be >= 0");
    require(std::isfinite(spec.center_scale) && spec.center_scale >= 0.0,
            who + ": center_scale must be >= 0");
}

Vector DomainGenerator::sample(int cls, std::mt19937_64& rng) const
{
    require(cls >= 0 && cls < spec.n_classes, "sample: class index out of range");
    Vector x = means.row(cls).transpose();
    if (spec.noise_scale > 0.0) {
        const Vector z = gaussian(spec.dim, 1, rng);
        x += basis * noise_std.cwiseProduct(z);
    }
    return x;
}

DomainGenerator gen_domain(const DomainSpec& spec)
{
    validate_spec(spec);
    std::mt19937_64 rng(spec.seed);
    DomainGenerator g;
    g.spec = spec;
    const Eigen::Index d = spec.dim;

    Vector dir = gaussian(d, 1, rng);
    g.center = spec.center_scale * dir / dir.norm();

    Eigen::HouseholderQR<Matrix> qr(gaussian(d, d, rng));
    g.basis = qr.householderQ() * Matrix::Identity(d, d);

    const Eigen::Index s = std::max<Eigen::Index>(1, g.signal_dims());
    const Matrix coeffs = gaussian(spec.n_classes, s, rng) * spec.mean_scale;
    g.means = (coeffs * g.basis.leftCols(s).transpose()).rowwise() + g.center.transpose();

    g.noise_std = Vector::Constant(d, spec.noise_scale);
    g.noise_std.head(s) *= kSignalNoise;
    return g;
}

Task sample_task(const DomainGenerator& gen, int n_way, int k_shot, TaskId task_id, std::uint64_t seed)
{
    require(n_way >= 1 && k_shot >= 1, "sample_task: n_way and k_shot must be positive");
    require(n_way <= gen.spec.n_classes, "sample_task: n_way " + std::to_string(n_way) + " exceeds the " +
                                             std::to_string(gen.spec.n_classes) + " classes of domain '" +
                                             gen.spec.domain_tag + "'");
    std::mt19937_64 rng(seed);
    std::vector<int> classes(static_cast<std::size_t>(gen.spec.n_classes));
    std::iota(classes.begin(), classes.end(), 0);
    // Partial Fisher-Yates so the draw does not depend on the library's shuffle.
    for (int i = 0; i < n_way; ++i) {
        std::uniform_int_distribution<int> pick(i, gen.spec.n_classes - 1);
        std::swap(classes[static_cast<std::size_t>(i)], classes[static_cast<std::size_t>(pick(rng))]);
    }

    Task t;
    t.task_id = task_id;
    t.n_way = n_way;
    t.k_shot = k_shot;
    t.domain_tag = gen.spec.domain_tag;
    t.class_ids.assign(classes.begin(), classes.begin() + n_way);
    t.features.resize(static_cast<Eigen::Index>(n_way) * k_shot, gen.spec.dim);
    t.labels.resize(static_cast<std::size_t>(n_way) * k_shot);
    for (int c = 0; c < n_way; ++c)
        for (int k = 0; k < k_shot; ++k) {
            const Eigen::Index row = static_cast<Eigen::Index>(c) * k_shot + k;
            t.features.row(row) = gen.sample(t.class_ids[static_cast<std::size_t>(c)], rng).transpose();
            t.labels[static_cast<std::size_t>(row)] = c;
        }
    return t;
}

CorpusManifest default_manifest(std::uint64_t seed, int n_domains)
{
    require(n_domains >= 1, "default_manifest: need at least one domain");
    CorpusManifest m;
    m.seed = seed;
    for (int d = 0; d < n_domains; ++d) {
        DomainSpec spec;
        spec.domain_tag = "domain" + std::to_string(d);
        spec.seed = mix_seed({seed, 0xd0, static_cast<std::uint64_t>(d)});
        m.domains.push_back(spec);
    }
    return m;
}

Corpus generate_corpus(const CorpusManifest& manifest)
{
    require(!manifest.domains.empty() || manifest.n_tasks == 0, "generate_corpus: no domains");
    require(manifest.n_tasks >= 0, "generate_corpus: n_tasks must be >= 0");
    Corpus c;
    c.manifest = manifest;
    std::vector<DomainGenerator> gens;
    for (const DomainSpec& spec : manifest.domains) gens.push_back(gen_domain(spec));
    c.tasks.reserve(static_cast<std::size_t>(manifest.n_tasks));
    for (int i = 0; i < manifest.n_tasks; ++i) {
        const auto& gen = gens[static_cast<std::size_t>(i) % gens.size()];
        const TaskId id = manifest.first_task_id + i;
        c.tasks.push_back(sample_task(gen, manifest.n_way, manifest.k_shot, id,
                                      mix_seed({manifest.seed, 0x7a5c, static_cast<std::uint64_t>(i)})));
    }
    return c;
}

// ---- JSON ---------------------------------------------------------------

namespace {

json spec_json(const DomainSpec& s)
{
    return {{"domain_tag", s.domain_tag}, {"n_classes", s.n_classes},   {"mean_scale", s.mean_scale},
            {"noise_scale", s.noise_scale}, {"center_scale", s.center_scale}, {"dim", s.dim},
            {"seed", s.seed}};
}

DomainSpec spec_from(const json& j)
{
    DomainSpec s;
    s.domain_tag = j.at("domain_tag").get<std::string>();
    s.n_classes = j.at("n_classes").get<int>();
    s.mean_scale = j.at("mean_scale").get<double>();
    s.noise_scale = j.at("noise_scale").get<double>();
    s.center_scale = j.value("center_scale", DomainSpec{}.center_scale);
    s.dim = j.at("dim").get<Eigen::Index>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

json manifest_json(const CorpusManifest& m)
{
    json domains = json::array();
    for (const DomainSpec& s : m.domains) domains.push_back(spec_json(s));
    return {{"domains", domains},          {"n_tasks", m.n_tasks}, {"n_way", m.n_way},
            {"k_shot", m.k_shot},          {"first_task_id", m.first_task_id},
            {"seed", m.seed}};
}

CorpusManifest manifest_from(const json& j)
{
    CorpusManifest m;
    for (const json& d : j.at("domains")) m.domains.push_back(spec_from(d));
    m.n_tasks = j.at("n_tasks").get<int>();
    m.n_way = j.at("n_way").get<int>();
    m.k_shot = j.at("k_shot").get<int>();
    m.first_task_id = j.value("first_task_id", TaskId{0});
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
}

json task_json(const Task& t)
{
    json features = json::array();
    for (Eigen::Index i = 0; i < t.features.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index k = 0; k < t.features.cols(); ++k) row.push_back(t.features(i, k));
        features.push_back(std::move(row));
    }
    return {{"task_id", t.task_id}, {"n_way", t.n_way},       {"k_shot", t.k_shot},
            {"domain_tag", t.domain_tag}, {"class_ids", t.class_ids}, {"labels", t.labels},
            {"features", std::move(features)}};
}

Task task_from(const json& j)
{
    Task t;
    t.task_id = j.at("task_id").get<TaskId>();
    t.n_way = j.at("n_way").get<int>();
    t.k_shot = j.at("k_shot").get<int>();
    t.domain_tag = j.value("domain_tag", std::string());
    t.class_ids = j.value("class_ids", std::vector<int>());
    t.labels = j.at("labels").get<std::vector<int>>();
    const json& rows = j.at("features");
    require(rows.is_array() && !rows.empty(), "features must be a non-empty array of rows");
    const auto dim = static_cast<Eigen::Index>(rows.front().size());
    t.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i].is_array() && static_cast<Eigen::Index>(rows[i].size()) == dim,
                "feature rows must share one length");
        for (Eigen::Index k = 0; k < dim; ++k)
            t.features(static_cast<Eigen::Index>(i), k) = rows[i][static_cast<std::size_t>(k)].get<double>();
    }
    return t;
}

void require_unique_ids(const std::vector<Task>& tasks, std::uint64_t at)
{
    std::vector<TaskId> ids;
    for (const Task& t : tasks) ids.push_back(t.task_id);
    std::sort(ids.begin(), ids.end());
    const auto dup = std::adjacent_find(ids.begin(), ids.end());
    if (dup != ids.end()) throw ParseError(at, "task id " + std::to_string(*dup) + " appears twice");
}

// Parses one line, mapping every failure to a byte offset in the file.
json parse_line(const std::string& text, std::size_t begin, std::size_t end)
{
    try {
        return json::parse(text.begin() + static_cast<std::ptrdiff_t>(begin),
                           text.begin() + static_cast<std::ptrdiff_t>(end));
    } catch (const json::parse_error& e) {
        const std::size_t at = e.byte > 0 ? begin + e.byte - 1 : begin;
        throw ParseError(std::min(at, text.size()), "malformed JSON line");
    }
}

} // namespace

std::string manifest_to_json(const CorpusManifest& m) { return manifest_json(m).dump(2) + "\n"; }

CorpusManifest manifest_from_json(const std::string& text)
{
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(e.byte > 0 ? e.byte - 1 : 0, "malformed manifest JSON");
    }
    try {
        return manifest_from(j);
    } catch (const json::exception& e) {
        throw ParseError(0, std::string("manifest: ") + e.what());
    }
}

std::string corpus_to_jsonl(const Corpus& c)
{
    json header = {{"format", kJsonFormat},
                   {"version", kJsonVersion},
                   {"count", c.tasks.size()},
                   {"manifest", manifest_json(c.manifest)}};
    std::string out = header.dump() + "\n";
    for (const Task& t : c.tasks) out += task_json(t).dump() + "\n";
    return out;
}

Corpus corpus_from_jsonl(const std::string& text)
{
    std::size_t pos = 0;
    auto next_line = [&](std::size_t& begin, std::size_t& end) {
        if (pos >= text.size()) return false;
        begin = pos;
        const std::size_t nl = text.find('\n', pos);
        end = nl == std::string::npos ? text.size() : nl;
        pos = nl == std::string::npos ? text.size() : nl + 1;
        return true;
    };

    std::size_t begin = 0, end = 0;
    if (!next_line(begin, end)) throw ParseError(0, "empty task file (missing header line)");
    const json header = parse_line(text, begin, end);
    if (!header.is_object() || header.value("format", std::string()) != kJsonFormat)
        throw ParseError(0, "not an OTTS task file (bad header)");
    const int version = header.value("version", -1);
    if (version != kJsonVersion)
        throw Error(ErrorCode::version_mismatch, "task file version " + std::to_string(version) +
                                                     " is not supported (expected " +
                                                     std::to_string(kJsonVersion) + ")");
    Corpus c;
    std::size_t count = 0;
    try {
        count = header.at("count").get<std::size_t>();
        c.manifest = manifest_from(header.at("manifest"));
    } catch (const json::exception& e) {
        throw ParseError(0, std::string("bad header: ") + e.what());
    }

    std::size_t line_no = 1;
    while (next_line(begin, end)) {
        ++line_no;
        if (begin == end) continue;
        const json j = parse_line(text, begin, end);
        Task t;
        try {
            t = task_from(j);
            validate_task(t);
        } catch (const json::exception& e) {
            throw ParseError(begin, "line " + std::to_string(line_no) + ": " + e.what());
        } catch (const Error& e) {
            throw ParseError(begin, "line " + std::to_string(line_no) + ": " + e.what());
        }
        c.tasks.push_back(std::move(t));
    }
    if (c.tasks.size() != count)
        throw ParseError(text.size(), "header promises " + std::to_string(count) + " tasks, file holds " +
                                          std::to_string(c.tasks.size()));
    if (!text.empty() && text.back() != '\n') throw ParseError(text.size(), "file does not end in a newline");
    require_unique_ids(c.tasks, text.size());
    return c;
}

std::string corpus_to_binary(const Corpus& c)
{
    BinaryWriter w(BlobKind::corpus);
    w.str(manifest_json(c.manifest).dump());
    w.u64(c.tasks.size());
    for (const Task& t : c.tasks) {
        w.i64(t.task_id);
        w.u32(static_cast<std::uint32_t>(t.n_way));
        w.u32(static_cast<std::uint32_t>(t.k_shot));
        w.str(t.domain_tag);
        w.u64(t.class_ids.size());
        for (int id : t.class_ids) w.u32(static_cast<std::uint32_t>(id));
        w.u64(t.labels.size());
        for (int l : t.labels) w.u32(static_cast<std::uint32_t>(l));
        w.matrix(t.features);
    }
    return w.bytes();
}

Corpus corpus_from_binary(std::string bytes)
{
    BinaryReader r(std::move(bytes), BlobKind::corpus);
    Corpus c;
    const std::uint64_t manifest_at = r.offset();
    const std::string manifest = r.str();
    try {
        c.manifest = manifest_from(json::parse(manifest));
    } catch (const json::exception& e) {
        throw ParseError(manifest_at, std::string("bad manifest: ") + e.what());
    }
    const std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t at = r.offset();
        Task t;
        t.task_id = r.i64();
        t.n_way = static_cast<int>(r.u32());
        t.k_shot = static_cast<int>(r.u32());
        t.domain_tag = r.str();
        auto read_ints = [&](std::vector<int>& out) {
            const std::uint64_t n = r.u64();
            if (n > (1u << 24)) throw ParseError(at, "implausible list length");
            out.resize(n);
            for (int& v : out) v = static_cast<int>(r.u32());
        };
        read_ints(t.class_ids);
        read_ints(t.labels);
        t.features = r.matrix();
        try {
            validate_task(t);
        } catch (const Error& e) {
            throw ParseError(at, e.what());
        }
        c.tasks.push_back(std::move(t));
    }
    r.finish();
    require_unique_ids(c.tasks, r.offset());
    return c;
}

namespace {

bool is_binary_path(const std::string& path)
{
    return path.size() >= 4 && path.compare(path.size() - 4, 4, ".bin") == 0;
}

} // namespace

void write_corpus(const Corpus& c, const std::string& path)
{
    write_file_atomic(path, is_binary_path(path) ? corpus_to_binary(c) : corpus_to_jsonl(c));
}

Corpus read_corpus(const std::string& path)
{
    std::string bytes = read_file(path);
    return is_binary_path(path) ? corpus_from_binary(std::move(bytes)) : corpus_from_jsonl(bytes);
}

} // namespace otts
