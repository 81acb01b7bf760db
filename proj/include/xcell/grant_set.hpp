#pragma once

#include <cstdint>
#include <iterator>
#include <map>
#include <optional>
#include <vector>

#include "xcell/types.hpp"

namespace xcell {

/// Where a granted range came from, so it can be returned to the same pool.
struct GrantOrigin {
    static constexpr int kKernel = -1;
    int cpu = kKernel;

    bool is_kernel() const noexcept { return cpu == kKernel; }
    friend bool operator==(GrantOrigin, GrantOrigin) = default;
};

/// Per-cell access control list: a sorted, non-overlapping interval set of
/// granted frame ranges.
class GrantSet {
public:
    struct Entry {
        PhysRange range;
        GrantOrigin origin;
    };

    void insert(const PhysRange& range, GrantOrigin origin) {
        if (overlaps(range.start_frame, range.end_frame())) {
            throw Error(ErrorCode::AclViolation, "grant overlaps an existing grant");
        }
        entries_.emplace(range.start_frame, Entry{range, origin});
        frames_ += range.frames();
    }

    /// Removes an exact grant. Returns its origin, or nothing if the range is
    /// not granted as given.
    std::optional<GrantOrigin> erase(const PhysRange& range) {
        auto it = entries_.find(range.start_frame);
        if (it == entries_.end() || it->second.range.order != range.order) return std::nullopt;
        GrantOrigin origin = it->second.origin;
        frames_ -= it->second.range.frames();
        entries_.erase(it);
        return origin;
    }

    bool contains(const PhysRange& range) const {
        auto it = entries_.find(range.start_frame);
        return it != entries_.end() && it->second.range.order == range.order;
    }

    bool contains_frame(FrameIndex frame) const {
        auto it = entries_.upper_bound(frame);
        if (it == entries_.begin()) return false;
        --it;
        return it->second.range.contains(frame);
    }

    bool overlaps(FrameIndex begin, FrameIndex end) const {
        auto it = entries_.lower_bound(begin);
        if (it != entries_.end() && it->first < end) return true;
        if (it == entries_.begin()) return false;
        --it;
        return it->second.range.end_frame() > begin;
    }

    std::uint64_t total_frames() const noexcept { return frames_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }

    std::vector<Entry> entries() const {
        std::vector<Entry> out;
        out.reserve(entries_.size());
        for (const auto& [_, e] : entries_) out.push_back(e);
        return out;
    }

    std::vector<PhysRange> ranges() const {
        std::vector<PhysRange> out;
        out.reserve(entries_.size());
        for (const auto& [_, e] : entries_) out.push_back(e.range);
        return out;
    }

    void clear() {
        entries_.clear();
        frames_ = 0;
    }

private:
    std::map<FrameIndex, Entry> entries_;
    std::uint64_t frames_ = 0;
};

}  // namespace xcell
