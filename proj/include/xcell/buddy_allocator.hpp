#pragma once

#include <algorithm>
#include <cassert>
#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <unordered_map>
#include <vector>

#include "xcell/types.hpp"

namespace xcell {

struct FrameBlock {
    FrameIndex start = 0;
    unsigned order = 0;

    std::uint64_t frames() const noexcept { return frames_in_order(order); }
    FrameIndex end() const noexcept { return start + frames(); }

    friend auto operator<=>(const FrameBlock&, const FrameBlock&) = default;
};

/// Power-of-two free-list allocator over a set of frames.
///
/// The managed domain is the union of every block donated to the allocator, so
/// one type serves the kernel reserved pool, per-CPU sub-pools (which receive
/// scattered delegations) and the in-cell runtime heap. Blocks are aligned to
/// their size in absolute frame numbers; two free buddies of the same order
/// below `max_order` never coexist.
///
/// Placement is deterministic: the smallest order with a free block wins, and
/// within an order the lowest start frame wins. The split keeps the lower half.
/// Not thread-safe; callers provide their own locking.
class BuddyAllocator {
public:
    BuddyAllocator(unsigned min_order, unsigned max_order)
        : min_order_(min_order), max_order_(max_order), free_lists_(max_order + 1) {
        if (min_order > max_order) {
            throw Error(ErrorCode::Config, "buddy min_order exceeds max_order");
        }
    }

    unsigned min_order() const noexcept { return min_order_; }
    unsigned max_order() const noexcept { return max_order_; }

    std::uint64_t total_frames() const noexcept { return total_frames_; }
    std::uint64_t free_frames() const noexcept { return free_frames_; }
    std::uint64_t allocated_frames() const noexcept { return total_frames_ - free_frames_; }
    std::size_t outstanding_blocks() const noexcept { return allocated_.size(); }

    /// Adds [start, start + count) to the domain, decomposed into the largest
    /// aligned blocks that fit.
    void add_range(FrameIndex start, std::uint64_t count) {
        for (const auto& block : decompose(start, start + count)) {
            donate(block.start, block.order);
        }
    }

    /// Adds one free block to the domain, coalescing with free buddies.
    void donate(FrameIndex start, unsigned order) {
        check_block(start, order);
        total_frames_ += frames_in_order(order);
        free_frames_ += frames_in_order(order);
        insert_free(start, order);
    }

    bool can_allocate(unsigned order) const noexcept {
        order = std::max(order, min_order_);
        for (unsigned j = order; j <= max_order_; ++j) {
            if (!free_lists_[j].empty()) return true;
        }
        return false;
    }

    std::optional<FrameIndex> allocate(unsigned order) {
        order = std::max(order, min_order_);
        if (order > max_order_) return std::nullopt;
        unsigned j = order;
        while (j <= max_order_ && free_lists_[j].empty()) ++j;
        if (j > max_order_) return std::nullopt;

        auto it = free_lists_[j].begin();
        const FrameIndex start = *it;
        free_lists_[j].erase(it);
        while (j > order) {
            --j;
            free_lists_[j].insert(start + frames_in_order(j));
        }
        allocated_.emplace(start, order);
        free_frames_ -= frames_in_order(order);
        return start;
    }

    /// Returns an allocated block. The (start, order) pair must match a
    /// previous allocate() exactly.
    void release(FrameIndex start, unsigned order) {
        auto it = allocated_.find(start);
        if (it == allocated_.end() || it->second != std::max(order, min_order_)) {
            throw Error(ErrorCode::InvalidFree, "block was not allocated from this pool");
        }
        order = it->second;
        allocated_.erase(it);
        free_frames_ += frames_in_order(order);
        insert_free(start, order);
    }

    bool is_allocated(FrameIndex start, unsigned order) const {
        auto it = allocated_.find(start);
        return it != allocated_.end() && it->second == order;
    }

    /// Removes an allocated block from the domain without freeing it
    /// (ownership transfers elsewhere, e.g. to a per-CPU pool).
    void transfer_out(FrameIndex start) {
        auto it = allocated_.find(start);
        if (it == allocated_.end()) {
            throw Error(ErrorCode::InvalidFree, "transfer of a block not allocated here");
        }
        total_frames_ -= frames_in_order(it->second);
        allocated_.erase(it);
    }

    /// Removes the largest free block of order <= cap from the domain.
    std::optional<FrameBlock> pop_largest_free(unsigned cap) {
        for (unsigned j = std::min(cap, max_order_) + 1; j-- > 0;) {
            if (free_lists_[j].empty()) continue;
            auto it = free_lists_[j].begin();
            FrameBlock block{*it, j};
            free_lists_[j].erase(it);
            free_frames_ -= block.frames();
            total_frames_ -= block.frames();
            return block;
        }
        return std::nullopt;
    }

    /// Removes [start, start + count) from the domain if every frame in it is
    /// free; otherwise leaves the allocator untouched and returns false.
    bool withdraw_free(FrameIndex start, std::uint64_t count) {
        const FrameIndex end = start + count;
        std::vector<FrameBlock> hits;
        std::uint64_t covered = 0;
        for (unsigned j = 0; j <= max_order_; ++j) {
            const auto& list = free_lists_[j];
            const std::uint64_t size = frames_in_order(j);
            auto it = list.lower_bound(start >= size ? start - size + 1 : 0);
            for (; it != list.end() && *it < end; ++it) {
                FrameBlock b{*it, j};
                covered += std::min(b.end(), end) - std::max(b.start, start);
                hits.push_back(b);
            }
        }
        if (covered != count) return false;
        for (const auto& b : hits) {
            free_lists_[b.order].erase(b.start);
            if (b.start < start) {
                for (const auto& piece : decompose(b.start, start)) {
                    free_lists_[piece.order].insert(piece.start);
                }
            }
            if (b.end() > end) {
                for (const auto& piece : decompose(end, b.end())) {
                    free_lists_[piece.order].insert(piece.start);
                }
            }
        }
        free_frames_ -= count;
        total_frames_ -= count;
        return true;
    }

    const std::set<FrameIndex>& free_list(unsigned order) const { return free_lists_.at(order); }

    /// Every free block, sorted by start frame.
    std::vector<FrameBlock> free_blocks() const {
        std::vector<FrameBlock> out;
        for (unsigned j = 0; j <= max_order_; ++j) {
            for (FrameIndex s : free_lists_[j]) out.push_back({s, j});
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    std::vector<FrameBlock> allocated_blocks() const {
        std::vector<FrameBlock> out;
        out.reserve(allocated_.size());
        for (auto [s, o] : allocated_) out.push_back({s, o});
        std::sort(out.begin(), out.end());
        return out;
    }

    /// Largest aligned blocks covering [begin, end), capped at `max_order`.
    std::vector<FrameBlock> decompose(FrameIndex begin, FrameIndex end) const {
        std::vector<FrameBlock> out;
        while (begin < end) {
            unsigned order = std::min<unsigned>(
                max_order_, begin == 0 ? 63u : static_cast<unsigned>(std::countr_zero(begin)));
            while (frames_in_order(order) > end - begin) --order;
            out.push_back({begin, order});
            begin += frames_in_order(order);
        }
        return out;
    }

private:
    void check_block(FrameIndex start, unsigned order) const {
        if (order > max_order_ || order < min_order_) {
            throw Error(ErrorCode::InvalidArgument, "block order outside allocator range");
        }
        if (start & (frames_in_order(order) - 1)) {
            throw Error(ErrorCode::InvalidArgument, "block start not aligned to its order");
        }
    }

    void insert_free(FrameIndex start, unsigned order) {
        while (order < max_order_) {
            const FrameIndex buddy = start ^ frames_in_order(order);
            auto& list = free_lists_[order];
            auto it = list.find(buddy);
            if (it == list.end()) break;
            list.erase(it);
            start = std::min(start, buddy);
            ++order;
        }
        free_lists_[order].insert(start);
    }

    unsigned min_order_;
    unsigned max_order_;
    std::vector<std::set<FrameIndex>> free_lists_;
    std::unordered_map<FrameIndex, unsigned> allocated_;
    std::uint64_t total_frames_ = 0;
    std::uint64_t free_frames_ = 0;
};

}  // namespace xcell
