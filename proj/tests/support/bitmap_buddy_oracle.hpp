#pragma once

// Brute-force reference for the buddy allocator: a per-frame bitmap. Maximal
// free blocks are recomputed from the bitmap on every query, so it shares no
// state or code path with BuddyAllocator.

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "xcell/buddy_allocator.hpp"

namespace xcell::testing {

class BitmapBuddyOracle {
public:
    BitmapBuddyOracle(FrameIndex base, std::uint64_t total, unsigned max_order)
        : base_(base), end_(base + total), max_order_(max_order), used_(total, false) {}

    std::optional<FrameIndex> allocate(unsigned order) {
        std::optional<xcell::FrameBlock> best;
        for (const auto& b : free_blocks()) {
            if (b.order < order) continue;
            if (!best || b.order < best->order || (b.order == best->order && b.start < best->start)) best = b;
        }
        if (!best) return std::nullopt;
        for (std::uint64_t i = 0; i < (std::uint64_t{1} << order); ++i) used_[best->start + i - base_] = true;
        allocs_[best->start] = order;
        return best->start;
    }

    bool release(FrameIndex start) {
        auto it = allocs_.find(start);
        if (it == allocs_.end()) return false;
        for (std::uint64_t i = 0; i < (std::uint64_t{1} << it->second); ++i) used_[start + i - base_] = false;
        allocs_.erase(it);
        return true;
    }

    std::uint64_t free_frames() const {
        std::uint64_t n = 0;
        for (bool u : used_) n += !u;
        return n;
    }

    /// Maximal free aligned blocks, sorted by start.
    std::vector<xcell::FrameBlock> free_blocks() const {
        // all_free[j][s >> j] for aligned blocks wholly inside [base, end)
        std::vector<std::vector<char>> all_free(max_order_ + 1);
        const std::uint64_t slots0 = end_;
        all_free[0].assign(slots0, 0);
        for (FrameIndex f = base_; f < end_; ++f) all_free[0][f] = !used_[f - base_];
        for (unsigned j = 1; j <= max_order_; ++j) {
            const std::uint64_t size = std::uint64_t{1} << j;
            all_free[j].assign(end_ / size + 1, 0);
            for (FrameIndex s = (base_ + size - 1) / size * size; s + size <= end_; s += size) {
                all_free[j][s >> j] = all_free[j - 1][s >> (j - 1)] && all_free[j - 1][(s >> (j - 1)) + 1];
            }
        }
        std::vector<xcell::FrameBlock> out;
        for (unsigned j = 0; j <= max_order_; ++j) {
            const std::uint64_t size = std::uint64_t{1} << j;
            for (FrameIndex s = (base_ + size - 1) / size * size; s + size <= end_; s += size) {
                if (!all_free[j][s >> j]) continue;
                bool parent_free = false;
                if (j < max_order_) {
                    const std::uint64_t psize = size * 2;
                    const FrameIndex p = s & ~(psize - 1);
                    if (p >= base_ && p + psize <= end_) parent_free = all_free[j + 1][p >> (j + 1)];
                }
                if (!parent_free) out.push_back({s, j});
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }

private:
    FrameIndex base_;
    FrameIndex end_;
    unsigned max_order_;
    std::vector<bool> used_;
    std::map<FrameIndex, unsigned> allocs_;
};

}  // namespace xcell::testing
