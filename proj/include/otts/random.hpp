#ifndef OTTS_RANDOM_HPP
#define OTTS_RANDOM_HPP

#include <cstdint>
#include <initializer_list>

namespace otts {

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a tuple of
// coordinates (epoch, step, task id, ...).
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts)
{
    std::uint64_t h = 0x6a09e667f3bcc909ULL;
    for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

} // namespace otts

#endif // OTTS_RANDOM_HPP
