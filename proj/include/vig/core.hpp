#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vig {

// ---------------------------------------------------------------------------
// Error taxonomy. ConfigError maps to exit code 2 at the CLI, everything else
// to exit code 1.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Shape or size mismatch between tensors.
struct DimensionError : Error {
    using Error::Error;
};

/// Invalid configuration or API usage.
struct ConfigError : Error {
    using Error::Error;
};

/// Bad dataset contents (labels out of range, missing files, ...).
struct DataError : Error {
    using Error::Error;
};

/// Malformed container file; message carries the byte offset.
struct FormatError : Error {
    using Error::Error;
};

/// Training aborted (non-finite loss and similar).
struct TrainingError : Error {
    using Error::Error;
};

/// Classification regime: exactly one label per sample vs. any subset.
enum class Task { Multiclass, Multilabel };

inline Task task_from_string(const std::string& s) {
    if (s == "multiclass") return Task::Multiclass;
    if (s == "multilabel") return Task::Multilabel;
    throw ConfigError("unknown task '" + s + "' (expected multiclass|multilabel)");
}

inline const char* task_to_string(Task t) {
    return t == Task::Multiclass ? "multiclass" : "multilabel";
}

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

// ---------------------------------------------------------------------------
// Tensor: dense row-major N-d array. Value type; autograd state lives on the
// tape (autograd.hpp), persistent gradients on Parameter.
// ---------------------------------------------------------------------------

template <class Real>
struct Tensor {
    Shape shape;
    std::vector<Real> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), Real(0)) {}
    Tensor(Shape s, Real fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t extent(std::size_t axis) const { return shape.at(axis); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Real& operator[](std::size_t i) { return data[i]; }
    const Real& operator[](std::size_t i) const { return data[i]; }

    // Rank-specific accessors; offsets computed row-major.
    Real& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    const Real& at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    Real& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data[(i * shape[1] + j) * shape[2] + k];
    }
    const Real& at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data[(i * shape[1] + j) * shape[2] + k];
    }

    Real& at4(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
        return data[((b * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    const Real& at4(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
        return data[((b * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    void fill(Real v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (Real v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    template <class Other>
    Tensor<Other> cast() const {
        Tensor<Other> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
        return out;
    }

    static Tensor from_values(Shape s, std::initializer_list<Real> v) {
        return Tensor(std::move(s), std::vector<Real>(v));
    }
};

template <class Real>
inline void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* what) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(what) + ": shape " + shape_str(a.shape) +
                             " vs " + shape_str(b.shape));
}

#ifndef NDEBUG
template <class Real>
inline void debug_check_finite(const Tensor<Real>& t, const char* op) {
    if (!t.all_finite())
        throw TrainingError(std::string("non-finite value produced by op '") + op + "'");
}
#else
template <class Real>
inline void debug_check_finite(const Tensor<Real>&, const char*) {}
#endif

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// real-valued mappings below avoid std::uniform_real_distribution, whose
// results are implementation-defined.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

    /// Standard normal via Box-Muller; pairs cached for determinism and speed.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform index in [0, n).
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(eng_() % n); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// Mixes a base seed with a stream id (epoch number, parameter index, ...)
/// into an independent-looking seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace vig
