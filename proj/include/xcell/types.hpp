#pragma once

#include <atomic>
#include <bit>
#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace xcell {

inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr unsigned kPageShift = 12;

inline constexpr std::uint64_t KiB = 1024;
inline constexpr std::uint64_t MiB = 1024 * KiB;
inline constexpr std::uint64_t GiB = 1024 * MiB;

/// Largest block the kernel reserved pool hands out (1 GB, order 18).
inline constexpr unsigned kKernelMaxOrder = 18;
/// Largest block the in-cell runtime allocator manages (64 MB, order 14).
inline constexpr unsigned kRuntimeMaxOrder = 14;
inline constexpr std::uint64_t kRuntimeChunkBytes = 64 * MiB;

using FrameIndex = std::uint64_t;
using Vpn = std::uint64_t;
using Vaddr = std::uint64_t;

enum class CellId : std::uint32_t {};

constexpr std::uint32_t to_underlying(CellId id) noexcept {
    return static_cast<std::uint32_t>(id);
}

enum class ErrorCode {
    Config,
    InvalidArgument,
    OutOfMemory,
    Oversize,
    AclViolation,
    DoubleMap,
    LockedMapping,
    InvalidFree,
    InvalidState,
    LaunchRefused,
    SegmentationFault,
    AttachRefused,
    Io,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::Config: return "config";
        case ErrorCode::InvalidArgument: return "invalid-argument";
        case ErrorCode::OutOfMemory: return "out-of-memory";
        case ErrorCode::Oversize: return "oversize";
        case ErrorCode::AclViolation: return "acl-violation";
        case ErrorCode::DoubleMap: return "double-map";
        case ErrorCode::LockedMapping: return "locked-mapping";
        case ErrorCode::InvalidFree: return "invalid-free";
        case ErrorCode::InvalidState: return "invalid-state";
        case ErrorCode::LaunchRefused: return "launch-refused";
        case ErrorCode::SegmentationFault: return "segmentation-fault";
        case ErrorCode::AttachRefused: return "attach-refused";
        case ErrorCode::Io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

constexpr std::uint64_t pages_for(std::uint64_t bytes) noexcept {
    return (bytes + kPageSize - 1) / kPageSize;
}

/// Smallest order whose block covers `pages` frames.
constexpr unsigned order_for_pages(std::uint64_t pages) noexcept {
    return pages <= 1 ? 0u : static_cast<unsigned>(std::bit_width(pages - 1));
}

constexpr unsigned order_for_bytes(std::uint64_t bytes) noexcept {
    return order_for_pages(pages_for(bytes));
}

constexpr std::uint64_t frames_in_order(unsigned order) noexcept {
    return std::uint64_t{1} << order;
}

constexpr std::uint64_t round_up(std::uint64_t value, std::uint64_t multiple) noexcept {
    return (value + multiple - 1) / multiple * multiple;
}

/// A buddy-aligned run of 2^order frames. An empty owner means the kernel.
struct PhysRange {
    FrameIndex start_frame = 0;
    unsigned order = 0;
    std::optional<CellId> owner;

    std::uint64_t frames() const noexcept { return frames_in_order(order); }
    FrameIndex end_frame() const noexcept { return start_frame + frames(); }
    std::uint64_t bytes() const noexcept { return frames() * kPageSize; }
    bool contains(FrameIndex frame) const noexcept {
        return frame >= start_frame && frame < end_frame();
    }

    friend bool operator==(const PhysRange&, const PhysRange&) = default;
};

enum class Feature : std::uint32_t {
    None = 0,
    UserFaultHandler = 1u << 0,
    DirectTimestamp = 1u << 1,
};

class FeatureSet {
public:
    constexpr FeatureSet() = default;
    constexpr FeatureSet(Feature f) : bits_(static_cast<std::uint32_t>(f)) {}

    constexpr FeatureSet operator|(FeatureSet other) const {
        FeatureSet r;
        r.bits_ = bits_ | other.bits_;
        return r;
    }
    constexpr bool has(Feature f) const {
        return (bits_ & static_cast<std::uint32_t>(f)) != 0;
    }
    constexpr std::uint32_t bits() const { return bits_; }

    friend constexpr bool operator==(FeatureSet, FeatureSet) = default;

private:
    std::uint32_t bits_ = 0;
};

constexpr FeatureSet operator|(Feature a, Feature b) {
    return FeatureSet(a) | FeatureSet(b);
}

enum class PagingPolicy { PrePaging, DemandPaging };

constexpr std::string_view to_string(PagingPolicy p) noexcept {
    return p == PagingPolicy::PrePaging ? "pre" : "demand";
}

struct CounterSnapshot {
    std::uint64_t mode_switches = 0;
    std::uint64_t vmexits = 0;
    std::uint64_t user_faults = 0;
    std::uint64_t kernel_faults = 0;
    std::uint64_t kernel_lock_acquisitions = 0;
    std::uint64_t io_messages = 0;

    CounterSnapshot operator-(const CounterSnapshot& o) const {
        return {mode_switches - o.mode_switches,
                vmexits - o.vmexits,
                user_faults - o.user_faults,
                kernel_faults - o.kernel_faults,
                kernel_lock_acquisitions - o.kernel_lock_acquisitions,
                io_messages - o.io_messages};
    }
    CounterSnapshot& operator+=(const CounterSnapshot& o) {
        mode_switches += o.mode_switches;
        vmexits += o.vmexits;
        user_faults += o.user_faults;
        kernel_faults += o.kernel_faults;
        kernel_lock_acquisitions += o.kernel_lock_acquisitions;
        io_messages += o.io_messages;
        return *this;
    }
    friend bool operator==(const CounterSnapshot&, const CounterSnapshot&) = default;
};

/// Event counters for one cell lifetime. Written by the owning cell thread and
/// by the kernel service path; relaxed atomics so snapshots from other threads
/// are race-free.
struct EventCounters {
    std::atomic<std::uint64_t> mode_switches{0};
    std::atomic<std::uint64_t> vmexits{0};
    std::atomic<std::uint64_t> user_faults{0};
    std::atomic<std::uint64_t> kernel_faults{0};
    std::atomic<std::uint64_t> kernel_lock_acquisitions{0};
    std::atomic<std::uint64_t> io_messages{0};

    static void bump(std::atomic<std::uint64_t>& c, std::uint64_t n = 1) noexcept {
        c.fetch_add(n, std::memory_order_relaxed);
    }

    CounterSnapshot snapshot() const noexcept {
        return {mode_switches.load(std::memory_order_relaxed),
                vmexits.load(std::memory_order_relaxed),
                user_faults.load(std::memory_order_relaxed),
                kernel_faults.load(std::memory_order_relaxed),
                kernel_lock_acquisitions.load(std::memory_order_relaxed),
                io_messages.load(std::memory_order_relaxed)};
    }

    void reset() noexcept {
        mode_switches = 0;
        vmexits = 0;
        user_faults = 0;
        kernel_faults = 0;
        kernel_lock_acquisitions = 0;
        io_messages = 0;
    }
};

}  // namespace xcell
