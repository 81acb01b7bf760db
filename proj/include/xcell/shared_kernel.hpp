#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>

#include "xcell/buddy_allocator.hpp"
#include "xcell/cell_runtime.hpp"
#include "xcell/page_table.hpp"
#include "xcell/phys_memory.hpp"
#include "xcell/types.hpp"

namespace xcell {

/// Simulated trap into a monolithic kernel and back: two call boundaries,
/// each behind a full fence. Counts two mode switches.
[[gnu::noinline]] inline void kernel_crossing(EventCounters& counters) noexcept {
    std::atomic_thread_fence(std::memory_order_seq_cst);
    asm volatile("" ::: "memory");
    EventCounters::bump(counters.mode_switches, 2);
    std::atomic_thread_fence(std::memory_order_seq_cst);
}

/// Baseline "shared kernel": every process allocates from one buddy pool
/// behind one global lock, and every memory operation and page fault crosses
/// into the kernel.
class SharedKernel {
public:
    explicit SharedKernel(std::uint64_t pool_bytes, bool scrub = true)
        : frames_(pool_bytes / kPageSize),
          memory_(frames_),
          alloc_(0, frames_ ? std::min<unsigned>(kKernelMaxOrder, std::bit_width(frames_) - 1) : 0),
          scrub_(scrub) {
        if (frames_ == 0) throw Error(ErrorCode::Config, "shared kernel pool is empty");
        alloc_.add_range(0, frames_);
    }

    SharedKernel(const SharedKernel&) = delete;
    SharedKernel& operator=(const SharedKernel&) = delete;

    const PhysicalMemory& memory() const noexcept { return memory_; }
    std::uint64_t total_frames() const noexcept { return frames_; }
    bool scrubs() const noexcept { return scrub_; }

    std::uint64_t free_frames() const {
        std::lock_guard g(mutex_);
        return alloc_.free_frames();
    }

    std::uint64_t lock_acquisitions() const noexcept { return locks_.load(std::memory_order_relaxed); }

    /// Runs `fn(allocator)` under the global lock and counts the acquisition.
    template <class Fn>
    decltype(auto) with_lock(EventCounters& counters, Fn&& fn) {
        std::lock_guard g(mutex_);
        locks_.fetch_add(1, std::memory_order_relaxed);
        EventCounters::bump(counters.kernel_lock_acquisitions);
        return fn(alloc_);
    }

private:
    std::uint64_t frames_;
    PhysicalMemory memory_;
    mutable std::mutex mutex_;
    BuddyAllocator alloc_;
    std::atomic<std::uint64_t> locks_{0};
    bool scrub_;
};

/// A process of the baseline kernel, with the same memory API as CellRuntime
/// so benchmark traces run unchanged in either mode. Confined to one thread.
class SharedProcess {
public:
    explicit SharedProcess(SharedKernel& kernel, PagingPolicy default_policy = PagingPolicy::DemandPaging)
        : kernel_(kernel), default_policy_(default_policy) {
        Region brk;
        brk.base = kBrkBase;
        regions_.emplace(brk.base, brk);
    }

    SharedProcess(const SharedProcess&) = delete;
    SharedProcess& operator=(const SharedProcess&) = delete;

    ~SharedProcess() {
        for (auto& [_, r] : regions_) release_frames(r, r.first_vpn(), r.end_vpn(), false);
    }

    CounterSnapshot counters() const { return counters_.snapshot(); }
    const EmulatedPageTable& table() const { return table_; }

    Vaddr malloc(std::uint64_t bytes) { return malloc(bytes, default_policy_); }
    Vaddr malloc(std::uint64_t bytes, PagingPolicy policy) {
        if (bytes == 0) throw Error(ErrorCode::InvalidArgument, "malloc(0)");
        return create_region(bytes, policy);
    }

    Vaddr mmap(std::uint64_t length, PagingPolicy policy) {
        if (length == 0) throw Error(ErrorCode::InvalidArgument, "mmap of zero length");
        return create_region(length, policy);
    }

    void free(Vaddr addr) {
        kernel_crossing(counters_);
        auto it = regions_.find(addr);
        if (it == regions_.end() || it->first == kBrkBase) {
            throw Error(ErrorCode::InvalidFree, "address was not returned by malloc/mmap");
        }
        release_frames(it->second, it->second.first_vpn(), it->second.end_vpn(), true);
        regions_.erase(it);
    }

    void munmap(Vaddr addr) { free(addr); }

    Vaddr sbrk(std::int64_t delta) {
        kernel_crossing(counters_);
        const Vaddr prev = brk_;
        if (delta == 0) return prev;
        auto& region = regions_.at(kBrkBase);
        const std::uint64_t magnitude =
            round_up(delta > 0 ? std::uint64_t(delta) : std::uint64_t(-(delta + 1)) + 1, kPageSize);
        if (delta > 0) {
            if (magnitude > kBrkLimit - brk_) throw Error(ErrorCode::OutOfMemory, "break beyond window");
            region.pages += magnitude / kPageSize;
            brk_ += magnitude;
            return prev;
        }
        if (magnitude > brk_ - kBrkBase) throw Error(ErrorCode::InvalidArgument, "break below heap base");
        release_frames(region, (brk_ - magnitude) >> kPageShift, region.end_vpn(), true);
        region.pages -= magnitude / kPageSize;
        brk_ -= magnitude;
        return prev;
    }

    Vaddr brk() const noexcept { return brk_; }

    std::uint8_t touch(Vaddr vaddr, AccessKind access, std::uint8_t value = 0) {
        const Vpn vpn = vaddr >> kPageShift;
        const PageTableEntry* e = table_.find(vpn);
        if (!e) {
            fault(vpn);
            e = table_.find(vpn);
        }
        auto* byte = reinterpret_cast<volatile std::uint8_t*>(kernel_.memory().frame(e->frame)) +
                     (vaddr & (kPageSize - 1));
        if (access == AccessKind::Write) {
            *byte = value;
            if (!e->dirty()) table_.mark_dirty(vpn);
            return value;
        }
        return *byte;
    }

private:
    struct Region {
        Vaddr base = 0;
        std::uint64_t pages = 0;
        std::uint64_t mapped = 0;
        Vpn first_vpn() const noexcept { return base >> kPageShift; }
        Vpn end_vpn() const noexcept { return first_vpn() + pages; }
        bool contains(Vpn v) const noexcept { return v >= first_vpn() && v < end_vpn(); }
    };

    Vaddr create_region(std::uint64_t bytes, PagingPolicy policy) {
        kernel_crossing(counters_);
        Region r;
        r.pages = pages_for(bytes);
        const std::uint64_t span = (r.pages + 1) * kPageSize;
        if (span > kMapLimit - next_va_) throw Error(ErrorCode::OutOfMemory, "virtual window exhausted");
        r.base = next_va_;
        next_va_ += span;
        auto& region = regions_.emplace(r.base, r).first->second;
        if (policy == PagingPolicy::PrePaging) {
            std::vector<FrameIndex> frames;
            frames.reserve(region.pages);
            kernel_.with_lock(counters_, [&](BuddyAllocator& a) {
                for (std::uint64_t i = 0; i < region.pages; ++i) {
                    auto f = a.allocate(0);
                    if (!f) {
                        for (auto done : frames) a.release(done, 0);
                        frames.clear();
                        break;
                    }
                    frames.push_back(*f);
                }
            });
            if (frames.size() != region.pages) {
                regions_.erase(region.base);
                throw Error(ErrorCode::OutOfMemory, "shared pool exhausted");
            }
            for (std::uint64_t i = 0; i < region.pages; ++i) {
                if (kernel_.scrubs()) kernel_.memory().scrub(frames[i], 1);
                table_.map(region.first_vpn() + i, frames[i]);
            }
            region.mapped = region.pages;
        }
        return region.base;
    }

    Region* find_region(Vpn vpn) {
        auto it = regions_.upper_bound(vpn << kPageShift);
        if (it == regions_.begin()) return nullptr;
        --it;
        return it->second.contains(vpn) ? &it->second : nullptr;
    }

    void fault(Vpn vpn) {
        kernel_crossing(counters_);
        EventCounters::bump(counters_.kernel_faults);
        Region* region = find_region(vpn);
        if (!region) throw Error(ErrorCode::SegmentationFault, "access outside every mapped region");
        auto frame = kernel_.with_lock(counters_, [](BuddyAllocator& a) { return a.allocate(0); });
        if (!frame) throw Error(ErrorCode::OutOfMemory, "shared pool exhausted");
        if (kernel_.scrubs()) kernel_.memory().scrub(*frame, 1);
        table_.map(vpn, *frame);
        ++region->mapped;
    }

    void release_frames(Region& region, Vpn begin, Vpn end, bool count) {
        if (region.mapped == 0) return;
        std::vector<FrameIndex> frames;
        for (Vpn vpn = begin; vpn < end && frames.size() < region.mapped; ++vpn) {
            if (auto e = table_.unmap(vpn)) frames.push_back(e->frame);
        }
        region.mapped -= frames.size();
        if (frames.empty()) return;
        EventCounters scratch;
        kernel_.with_lock(count ? counters_ : scratch, [&](BuddyAllocator& a) {
            for (auto f : frames) a.release(f, 0);
        });
    }

    SharedKernel& kernel_;
    PagingPolicy default_policy_;
    EventCounters counters_;
    EmulatedPageTable table_;
    std::map<Vaddr, Region> regions_;
    Vaddr next_va_ = kMapBase;
    Vaddr brk_ = kBrkBase;
};

}  // namespace xcell
