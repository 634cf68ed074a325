#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace polyseg {

// Scalar type for the tensor engine. Double by default so gradient checks and
// determinism contracts hold at tight tolerances; -DPOLYSEG_REAL32 rebuilds
// the whole engine in single precision for faster training runs.
#ifdef POLYSEG_REAL32
using real = float;
#else
using real = double;
#endif

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : Error { using Error::Error; };
struct UnsupportedDtypeError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct ParamError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };
struct LabelError : Error { using Error::Error; };
struct GraphError : Error { using Error::Error; };
struct RoiError : Error { using Error::Error; };
struct ConstantVolumeError : Error { using Error::Error; };
struct GenerationError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

// Deterministic RNG. mt19937_64 has a pinned sequence by the standard; the
// uniform/normal conversions below are done with explicit bit arithmetic so
// draws do not depend on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto range = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(gen_() % range);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // standard normal via Box-Muller, second draw cached
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 6.283185307179586476925286766559 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive independent stream seeds
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Worker count for parallel kernels: min(SEG_THREADS, hardware), at least 1.
// Results are bitwise independent of the value; it only affects speed.
int thread_count();

}  // namespace polyseg
