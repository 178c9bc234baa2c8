#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sttpp {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2() = default;
    Vec2(double x_, double y_) : x(x_), y(y_) {}

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double c) const { return {x * c, y * c}; }
    double norm() const { return std::hypot(x, y); }
    double squared_norm() const { return x * x + y * y; }
};

// Overflow-safe softplus: log(1 + e^z), with the large/small branches
// returning z and e^z respectively.
inline double softplus(double z) {
    if (z > 30.0) return z;
    if (z < -30.0) return std::exp(z);
    return std::log1p(std::exp(z));
}

// d/dz softplus(z), consistent with the branches above.
inline double softplus_prime(double z) {
    if (z > 30.0) return 1.0;
    if (z < -30.0) return std::exp(z);
    return 1.0 / (1.0 + std::exp(-z));
}

// Inverse of softplus on (0, inf).
inline double inv_softplus(double y) {
    if (y > 30.0) return y;
    return std::log(std::expm1(y));
}

// Error types, named after the contract they enforce.

struct NonCausalPair : std::invalid_argument {
    explicit NonCausalPair(const std::string& what) : std::invalid_argument(what) {}
};

struct DimensionMismatch : std::invalid_argument {
    explicit DimensionMismatch(const std::string& what) : std::invalid_argument(what) {}
};

struct OutOfDomain : std::invalid_argument {
    explicit OutOfDomain(const std::string& what) : std::invalid_argument(what) {}
};

struct GridMismatch : std::invalid_argument {
    explicit GridMismatch(const std::string& what) : std::invalid_argument(what) {}
};

struct NodeOutOfRange : std::out_of_range {
    explicit NodeOutOfRange(const std::string& what) : std::out_of_range(what) {}
};

struct NonSquare : std::invalid_argument {
    explicit NonSquare(const std::string& what) : std::invalid_argument(what) {}
};

struct TooFewEvents : std::runtime_error {
    explicit TooFewEvents(const std::string& what) : std::runtime_error(what) {}
};

struct InsufficientHistory : std::invalid_argument {
    explicit InsufficientHistory(const std::string& what) : std::invalid_argument(what) {}
};

struct Infeasible : std::runtime_error {
    explicit Infeasible(const std::string& what) : std::runtime_error(what) {}
};

struct BoundViolationLoop : std::runtime_error {
    explicit BoundViolationLoop(const std::string& what) : std::runtime_error(what) {}
};

struct TailMassTooLarge : std::runtime_error {
    double tail_mass;
    explicit TailMassTooLarge(double mass)
        : std::runtime_error("forecast horizon leaves tail mass " + std::to_string(mass)),
          tail_mass(mass) {}
};

struct NegativeIntensity : std::runtime_error {
    explicit NegativeIntensity(const std::string& what) : std::runtime_error(what) {}
};

struct NonPositiveIntensityAtEvent : std::runtime_error {
    int sequence;
    int index;
    double value;
    NonPositiveIntensityAtEvent(int seq, int idx, double val)
        : std::runtime_error("non-positive intensity " + std::to_string(val) + " at event " +
                             std::to_string(idx) + " of sequence " + std::to_string(seq)),
          sequence(seq),
          index(idx),
          value(val) {}
};

}  // namespace sttpp
