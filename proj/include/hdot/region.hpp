#pragma once

#include <cstddef>
#include <cstdint>

namespace hdot {

using BufferId = std::uint32_t;
using TaskId = std::uint64_t;

/// Half-open element interval [lo, hi) on a buffer registered with the
/// runtime. Intervals on distinct buffers never overlap, by definition.
struct RegionRef {
    BufferId buffer = 0;
    std::uint64_t lo = 0;
    std::uint64_t hi = 0;

    std::uint64_t len() const { return hi - lo; }
    friend bool operator==(const RegionRef&, const RegionRef&) = default;
};

inline bool overlaps(const RegionRef& a, const RegionRef& b) {
    return a.buffer == b.buffer && a.lo < b.hi && b.lo < a.hi;
}

inline bool contains(const RegionRef& outer, const RegionRef& inner) {
    return outer.buffer == inner.buffer && outer.lo <= inner.lo && inner.hi <= outer.hi;
}

enum class Mode : std::uint8_t { in, out, inout, weak_in, weak_out, weak_inout, reduction };

inline bool is_weak(Mode m) {
    return m == Mode::weak_in || m == Mode::weak_out || m == Mode::weak_inout;
}

inline bool may_write(Mode m) { return m != Mode::in && m != Mode::weak_in; }

/// Type-erased associative-commutative reduction operator with an identity
/// element. Canonical instances below compare by pointer.
struct ReductionOp {
    const char* name;
    std::size_t elem_size;
    void (*fill_identity)(void* dst, std::size_t count);
    void (*combine)(void* dst, const void* src, std::size_t count);  // dst = dst op src
};

const ReductionOp* red_sum_f64();
const ReductionOp* red_sum_i64();
const ReductionOp* red_max_f64();

struct Access {
    RegionRef region;
    Mode mode = Mode::in;
    const ReductionOp* op = nullptr;  // reduction mode only
};

// Access builders, used as access::in(r), access::reduce(r, op), ...
namespace access {
inline Access in(RegionRef r) { return {r, Mode::in, nullptr}; }
inline Access out(RegionRef r) { return {r, Mode::out, nullptr}; }
inline Access inout(RegionRef r) { return {r, Mode::inout, nullptr}; }
inline Access weak_in(RegionRef r) { return {r, Mode::weak_in, nullptr}; }
inline Access weak_out(RegionRef r) { return {r, Mode::weak_out, nullptr}; }
inline Access weak_inout(RegionRef r) { return {r, Mode::weak_inout, nullptr}; }
inline Access reduce(RegionRef r, const ReductionOp* op) { return {r, Mode::reduction, op}; }
}  // namespace access

}  // namespace hdot
