#include "otts/binary_io.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace otts {

namespace {

constexpr char kMagic[4] = {'O', 'T', 'T', 'S'};
// Guard against absurd sizes read from corrupt headers.
constexpr std::uint64_t kMaxElements = std::uint64_t(1) << 34;

template <typename T>
void put_le(std::string& buf, T v)
{
    static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    buf.append(raw, sizeof(T));
}

template <typename T>
T get_le(const char* p)
{
    char raw[sizeof(T)];
    std::memcpy(raw, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
}

} // namespace

BinaryWriter::BinaryWriter(BlobKind kind)
{
    buf_.append(kMagic, 4);
    u32(kBinaryVersion);
    u32(static_cast<std::uint32_t>(kind));
}

void BinaryWriter::u32(std::uint32_t v) { put_le(buf_, v); }
void BinaryWriter::u64(std::uint64_t v) { put_le(buf_, v); }
void BinaryWriter::i64(std::int64_t v) { put_le(buf_, v); }
void BinaryWriter::f64(double v) { put_le(buf_, std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::str(std::string_view s)
{
    u64(s.size());
    buf_.append(s.data(), s.size());
}

void BinaryWriter::matrix(const Matrix& m)
{
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
}

void BinaryWriter::vector(const Vector& v)
{
    u64(static_cast<std::uint64_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v(i));
}

BinaryReader::BinaryReader(std::string bytes, BlobKind kind) : buf_(std::move(bytes))
{
    const char* magic = take(4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw ParseError(0, "not an OTTS binary file");
    const std::uint32_t version = u32();
    if (version != kBinaryVersion)
        throw Error(ErrorCode::version_mismatch, "binary format version " + std::to_string(version) +
                                                     " is not supported (expected " +
                                                     std::to_string(kBinaryVersion) + ")");
    const std::uint32_t got = u32();
    if (got != static_cast<std::uint32_t>(kind))
        throw ParseError(8, "binary file holds kind " + std::to_string(got) + ", expected " +
                                std::to_string(static_cast<std::uint32_t>(kind)));
}

const char* BinaryReader::take(std::uint64_t n, const char* what)
{
    if (n > buf_.size() - pos_)
        throw ParseError(pos_, std::string("truncated file while reading ") + what);
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
}

std::uint32_t BinaryReader::u32() { return get_le<std::uint32_t>(take(4, "u32")); }
std::uint64_t BinaryReader::u64() { return get_le<std::uint64_t>(take(8, "u64")); }
std::int64_t BinaryReader::i64() { return get_le<std::int64_t>(take(8, "i64")); }
double BinaryReader::f64() { return std::bit_cast<double>(get_le<std::uint64_t>(take(8, "f64"))); }

std::string BinaryReader::str()
{
    const std::uint64_t n = u64();
    const char* p = take(n, "string");
    return std::string(p, n);
}

Matrix BinaryReader::matrix()
{
    const std::uint64_t at = pos_;
    const std::uint64_t rows = u64();
    const std::uint64_t cols = u64();
    if (rows > kMaxElements || cols > kMaxElements || (cols != 0 && rows > kMaxElements / cols) ||
        rows * cols * 8 > buf_.size() - pos_)
        throw ParseError(at, "matrix of " + std::to_string(rows) + " x " + std::to_string(cols) +
                                 " does not fit in the file");
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = f64();
    return m;
}

Vector BinaryReader::vector()
{
    const std::uint64_t at = pos_;
    const std::uint64_t n = u64();
    if (n > kMaxElements || n * 8 > buf_.size() - pos_)
        throw ParseError(at, "vector of " + std::to_string(n) + " entries does not fit in the file");
    Vector v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = f64();
    return v;
}

void BinaryReader::finish() const
{
    if (pos_ != buf_.size()) throw ParseError(pos_, "trailing bytes after end of data");
}

std::string read_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io_error, "cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw Error(ErrorCode::io_error, "failed reading '" + path + "'");
    return std::move(ss).str();
}

void write_file_atomic(const std::string& path, std::string_view bytes)
{
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::io_error, "cannot open '" + tmp + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw Error(ErrorCode::io_error, "failed writing '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw Error(ErrorCode::io_error, "cannot move '" + tmp + "' to '" + path + "': " + ec.message());
    }
}

} // namespace otts
