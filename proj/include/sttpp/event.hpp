#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sttpp/common.hpp"

namespace sttpp {

// One observed event. Exactly one of {s, node} is set for a planar or a
// graph dataset respectively; neither for purely temporal data. Schema
// homogeneity across a sequence is checked by validate_sequence.
struct Event {
    double t = 0.0;
    std::optional<Vec2> s;
    std::optional<int> node;
    std::vector<double> mark;

    Event() = default;
    Event(double t_, Vec2 s_) : t(t_), s(s_) {}
    Event(double t_, int node_) : t(t_), node(node_) {}
    explicit Event(double t_) : t(t_) {}
};

struct TimeWindow {
    double T = 1.0;
    bool valid() const { return std::isfinite(T) && T > 0.0; }
};

// Axis-aligned rectangle.
struct SpatialDomain {
    double x_lo = 0.0, x_hi = 1.0;
    double y_lo = 0.0, y_hi = 1.0;

    SpatialDomain() = default;
    SpatialDomain(double xl, double xh, double yl, double yh)
        : x_lo(xl), x_hi(xh), y_lo(yl), y_hi(yh) {}

    bool valid() const { return x_hi > x_lo && y_hi > y_lo; }
    double area() const { return (x_hi - x_lo) * (y_hi - y_lo); }
    double diameter() const { return std::hypot(x_hi - x_lo, y_hi - y_lo); }
    Vec2 center() const { return {0.5 * (x_lo + x_hi), 0.5 * (y_lo + y_hi)}; }
    bool contains(const Vec2& p) const {
        return p.x >= x_lo && p.x <= x_hi && p.y >= y_lo && p.y <= y_hi;
    }
};

struct EventSequence {
    std::vector<Event> events;
    TimeWindow window;

    std::size_t size() const { return events.size(); }
    bool empty() const { return events.empty(); }
};

enum class ViolationKind { NonMonotoneTimes, OutOfDomain, MixedSchema };

struct Violation {
    std::size_t index;
    ViolationKind kind;
    std::string detail;
};

inline const char* to_string(ViolationKind k) {
    switch (k) {
        case ViolationKind::NonMonotoneTimes: return "NonMonotoneTimes";
        case ViolationKind::OutOfDomain: return "OutOfDomain";
        case ViolationKind::MixedSchema: return "MixedSchema";
    }
    return "?";
}

// Checks strict time monotonicity, containment in [0, T] x dom, and schema
// homogeneity. An empty result means the sequence is valid; the sequence
// itself is never modified.
inline std::vector<Violation> validate_sequence(const EventSequence& seq,
                                                const SpatialDomain& dom) {
    std::vector<Violation> out;
    const double T = seq.window.T;
    bool schema_known = false;
    bool has_s = false, has_node = false;
    std::size_t mark_dim = 0;
    double prev_t = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < seq.events.size(); ++i) {
        const Event& e = seq.events[i];
        if (!std::isfinite(e.t) || e.t < 0.0 || e.t > T) {
            out.push_back({i, ViolationKind::OutOfDomain,
                           "time " + std::to_string(e.t) + " outside [0, T]"});
        }
        if (e.t <= prev_t) {
            out.push_back({i, ViolationKind::NonMonotoneTimes,
                           "time " + std::to_string(e.t) + " after " + std::to_string(prev_t)});
        }
        prev_t = e.t;
        if (e.s && !dom.contains(*e.s)) {
            out.push_back({i, ViolationKind::OutOfDomain,
                           "location (" + std::to_string(e.s->x) + ", " + std::to_string(e.s->y) +
                               ") outside domain"});
        }
        if (e.node && *e.node < 0) {
            out.push_back({i, ViolationKind::OutOfDomain, "negative node index"});
        }
        if (e.s && e.node) {
            out.push_back({i, ViolationKind::MixedSchema, "both location and node set"});
        }
        if (!schema_known) {
            schema_known = true;
            has_s = e.s.has_value();
            has_node = e.node.has_value();
            mark_dim = e.mark.size();
        } else if (e.s.has_value() != has_s || e.node.has_value() != has_node ||
                   e.mark.size() != mark_dim) {
            out.push_back({i, ViolationKind::MixedSchema, "event schema differs from first event"});
        }
    }
    return out;
}

}  // namespace sttpp
