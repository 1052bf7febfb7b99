#ifndef OTTS_BINARY_IO_HPP
#define OTTS_BINARY_IO_HPP

#include <cstdint>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "otts/error.hpp"
#include "otts/ot/sinkhorn.hpp"

namespace otts {

// Every binary file starts with "OTTS", a u32 format version and a u32 kind.
// Integers and doubles are little-endian; matrices are (u64 rows, u64 cols)
// followed by row-major doubles.
inline constexpr std::uint32_t kBinaryVersion = 1;

enum class BlobKind : std::uint32_t { checkpoint = 1, corpus = 2, distance_matrix = 3 };

class BinaryWriter {
public:
    explicit BinaryWriter(BlobKind kind);

    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void i64(std::int64_t v);
    void f64(double v);
    void str(std::string_view s);
    void matrix(const Matrix& m);
    void vector(const Vector& v);

    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

class BinaryReader {
public:
    // Checks magic, version and kind.
    BinaryReader(std::string bytes, BlobKind kind);

    std::uint32_t u32();
    std::uint64_t u64();
    std::int64_t i64();
    double f64();
    std::string str();
    Matrix matrix();
    Vector vector();

    std::uint64_t offset() const { return pos_; }
    bool at_end() const { return pos_ == buf_.size(); }
    // Throws unless every byte was consumed.
    void finish() const;

private:
    const char* take(std::uint64_t n, const char* what);

    std::string buf_;
    std::uint64_t pos_ = 0;
};

std::string read_file(const std::string& path);
// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a half-written file.
void write_file_atomic(const std::string& path, std::string_view bytes);

} // namespace otts

#endif // OTTS_BINARY_IO_HPP
