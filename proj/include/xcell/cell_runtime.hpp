#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "xcell/buddy_allocator.hpp"
#include "xcell/kernel.hpp"
#include "xcell/page_table.hpp"
#include "xcell/types.hpp"

namespace xcell {

// Private virtual layout of every cell.
inline constexpr Vaddr kBrkBase = 0x1000'0000;
inline constexpr Vaddr kBrkLimit = kBrkBase + 64 * GiB;
inline constexpr Vaddr kMapBase = 0x100'0000'0000;
inline constexpr Vaddr kMapLimit = 0x7000'0000'0000;

enum class RegionKind { Inherited, Malloc, Mmap, Brk };

struct VmRegion {
    Vaddr base = 0;
    std::uint64_t pages = 0;
    PagingPolicy policy = PagingPolicy::DemandPaging;
    RegionKind kind = RegionKind::Mmap;
    /// Single buddy block backing a malloc region.
    std::optional<FrameBlock> block;
    /// Blocks backing a pre-paged mmap region.
    std::vector<FrameBlock> blocks;
    std::uint64_t mapped = 0;

    Vpn first_vpn() const noexcept { return base >> kPageShift; }
    Vpn end_vpn() const noexcept { return first_vpn() + pages; }
    bool contains(Vpn vpn) const noexcept { return vpn >= first_vpn() && vpn < end_vpn(); }
    bool per_page_frames() const noexcept { return !block && blocks.empty(); }
};

/// The in-cell runtime: a buddy heap over the cell's granted frames, POSIX-like
/// allocation entry points, and the user-level pager.
///
/// Confined to the cell's worker thread. The heap only grows through GROW
/// vmexits and only shrinks through release_free_grants().
class CellRuntime {
public:
    CellRuntime(Kernel& kernel, CellId cell)
        : kernel_(kernel), view_(kernel.view(cell)), heap_(0, kRuntimeMaxOrder) {
        const auto desc = kernel.descriptor(cell);
        if (desc.state != CellState::Online) {
            throw Error(ErrorCode::InvalidState, "runtime needs an online cell");
        }
        generation_ = desc.generation;
        default_policy_ = desc.spec.paging_policy;
        if (desc.boot_grant) add_backing(*desc.boot_grant);
        if (desc.spec.inherited_pages > 0) {
            VmRegion r;
            r.base = kInheritedBaseVpn << kPageShift;
            r.pages = desc.spec.inherited_pages;
            r.kind = RegionKind::Inherited;
            r.policy = PagingPolicy::PrePaging;
            r.mapped = r.pages;
            regions_.emplace(r.base, r);
        }
        VmRegion brk;
        brk.base = kBrkBase;
        brk.kind = RegionKind::Brk;
        regions_.emplace(brk.base, brk);
    }

    CellRuntime(const CellRuntime&) = delete;
    CellRuntime& operator=(const CellRuntime&) = delete;

    CellId id() const noexcept { return view_.id; }
    Kernel& kernel() noexcept { return kernel_; }
    CounterSnapshot counters() const { return view_.counters->snapshot(); }
    const EmulatedPageTable& table() const { return *view_.table; }

    Vaddr malloc(std::uint64_t bytes) { return malloc(bytes, default_policy_); }

    Vaddr malloc(std::uint64_t bytes, PagingPolicy policy) {
        ensure_online();
        if (bytes == 0) throw Error(ErrorCode::InvalidArgument, "malloc(0)");
        const unsigned order = order_for_bytes(bytes);
        if (order > kRuntimeMaxOrder) {
            throw Error(ErrorCode::Oversize, "allocation exceeds the 64 MB runtime chunk");
        }
        const FrameIndex frame = alloc_block(order);
        VmRegion r;
        r.pages = pages_for(bytes);
        r.base = reserve_va(r.pages);
        r.policy = policy;
        r.kind = RegionKind::Malloc;
        r.block = FrameBlock{frame, order};
        auto& region = regions_.emplace(r.base, r).first->second;
        if (policy == PagingPolicy::PrePaging) {
            for (std::uint64_t i = 0; i < region.pages; ++i) {
                map_checked(*view_.table, *view_.grants, region.first_vpn() + i, frame + i);
            }
            region.mapped = region.pages;
        }
        return region.base;
    }

    Vaddr mmap(std::uint64_t length, PagingPolicy policy) {
        ensure_online();
        if (length == 0) throw Error(ErrorCode::InvalidArgument, "mmap of zero length");
        VmRegion r;
        r.pages = pages_for(length);
        r.base = reserve_va(r.pages);
        r.policy = policy;
        r.kind = RegionKind::Mmap;
        auto& region = regions_.emplace(r.base, r).first->second;
        if (policy == PagingPolicy::PrePaging) {
            std::uint64_t done = 0;
            while (done < region.pages) {
                const unsigned order =
                    std::min<unsigned>(kRuntimeMaxOrder, std::bit_width(region.pages - done) - 1);
                const FrameIndex frame = alloc_block(order);
                region.blocks.push_back({frame, order});
                for (std::uint64_t i = 0; i < frames_in_order(order); ++i) {
                    map_checked(*view_.table, *view_.grants, region.first_vpn() + done + i, frame + i);
                }
                done += frames_in_order(order);
            }
            region.mapped = region.pages;
        }
        return region.base;
    }

    /// Releases a region returned by malloc() or mmap(). Frames go back to the
    /// runtime heap, never to the kernel.
    void free(Vaddr addr) {
        ensure_online();
        auto it = regions_.find(addr);
        if (it == regions_.end() ||
            (it->second.kind != RegionKind::Malloc && it->second.kind != RegionKind::Mmap)) {
            throw Error(ErrorCode::InvalidFree, "address was not returned by malloc/mmap");
        }
        release_region(it->second);
        regions_.erase(it);
    }

    void munmap(Vaddr addr) { free(addr); }

    Vaddr sbrk(std::int64_t delta) {
        ensure_online();
        const Vaddr prev = brk_;
        if (delta == 0) return prev;
        auto& region = regions_.at(kBrkBase);
        const std::uint64_t magnitude =
            round_up(delta > 0 ? std::uint64_t(delta) : std::uint64_t(-(delta + 1)) + 1, kPageSize);
        if (delta > 0) {
            if (magnitude > kBrkLimit - brk_) throw Error(ErrorCode::OutOfMemory, "break beyond cell window");
            region.pages += magnitude / kPageSize;
            brk_ += magnitude;
            return prev;
        }
        if (magnitude > brk_ - kBrkBase) {
            throw Error(ErrorCode::InvalidArgument, "break below heap base");
        }
        const Vpn new_end = (brk_ - magnitude) >> kPageShift;
        for (Vpn vpn = new_end; vpn < region.end_vpn() && region.mapped > 0; ++vpn) {
            if (auto e = view_.table->unmap(vpn)) {
                heap_.release(e->frame, 0);
                --region.mapped;
            }
        }
        region.pages -= magnitude / kPageSize;
        brk_ -= magnitude;
        return prev;
    }

    Vaddr brk() const noexcept { return brk_; }

    /// Reads or writes one byte, faulting the page in when it is not mapped.
    std::uint8_t touch(Vaddr vaddr, AccessKind access, std::uint8_t value = 0) {
        const Vpn vpn = vaddr >> kPageShift;
        const PageTableEntry* e = view_.table->find(vpn);
        if (!e) {
            handle_fault(vaddr, access);
            e = view_.table->find(vpn);
            if (!e) throw Error(ErrorCode::OutOfMemory, "fault handler left the page unmapped");
        }
        auto* byte = reinterpret_cast<volatile std::uint8_t*>(view_.memory->frame(e->frame)) +
                     (vaddr & (kPageSize - 1));
        if (access == AccessKind::Write) {
            *byte = value;
            if (!e->dirty()) view_.table->mark_dirty(vpn);
            return value;
        }
        return *byte;
    }

    /// Requests at least `min_bytes` more frames from the kernel with a GROW
    /// vmexit, always in whole 64 MB chunks.
    void refill(std::uint64_t min_bytes) {
        ensure_online();
        const std::uint64_t bytes = std::max(round_up(min_bytes, kRuntimeChunkBytes), kRuntimeChunkBytes);
        auto resp = kernel_.handle_vmexit(view_.id, Grow{bytes});
        if (!resp.ok || !resp.range) {
            throw Error(resp.error.value_or(ErrorCode::OutOfMemory), "GROW refused by kernel");
        }
        add_backing(*resp.range);
    }

    /// Explicit SHRINK: hands fully free backing grants back to the kernel.
    /// Returns the number of frames released.
    std::uint64_t release_free_grants() {
        ensure_online();
        std::uint64_t released = 0;
        for (auto it = backing_.begin(); it != backing_.end();) {
            if (!heap_.withdraw_free(it->start_frame, it->frames())) {
                ++it;
                continue;
            }
            auto resp = kernel_.handle_vmexit(view_.id, Shrink{*it});
            if (!resp.ok) {
                heap_.add_range(it->start_frame, it->frames());
                ++it;
                continue;
            }
            released += it->frames();
            it = backing_.erase(it);
        }
        return released;
    }

    std::uint64_t heap_free_frames() const noexcept { return heap_.free_frames(); }
    std::uint64_t heap_total_frames() const noexcept { return heap_.total_frames(); }
    std::vector<FrameBlock> heap_free_blocks() const { return heap_.free_blocks(); }
    const std::vector<PhysRange>& backing_grants() const noexcept { return backing_; }

    const VmRegion* region_at(Vaddr addr) const {
        const auto* r = find_region(addr >> kPageShift);
        return r;
    }

    std::vector<VmRegion> regions() const {
        std::vector<VmRegion> out;
        for (const auto& [_, r] : regions_) out.push_back(r);
        return out;
    }

    void enable_fault_trace(bool on) { trace_faults_ = on; }
    const std::vector<FaultRecord>& fault_trace() const noexcept { return faults_; }

private:
    class RuntimeFaultContext final : public FaultContext {
    public:
        RuntimeFaultContext(CellRuntime& rt, Vaddr vaddr, AccessKind access)
            : rt_(rt), vaddr_(vaddr), access_(access) {}

        Vaddr fault_address() const override { return vaddr_; }
        AccessKind access() const override { return access_; }
        bool in_region(Vpn vpn) const override { return rt_.find_region(vpn) != nullptr; }
        bool is_mapped(Vpn vpn) const override { return rt_.view_.table->mapped(vpn); }
        bool map_page(Vpn vpn) override { return rt_.map_page(vpn); }

    private:
        CellRuntime& rt_;
        Vaddr vaddr_;
        AccessKind access_;
    };

    void ensure_online() const {
        if (view_.state->load(std::memory_order_acquire) != CellState::Online ||
            view_.generation->load(std::memory_order_acquire) != generation_) {
            throw Error(ErrorCode::InvalidState, "cell is not online");
        }
    }

    void add_backing(const PhysRange& range) {
        backing_.push_back(range);
        heap_.add_range(range.start_frame, range.frames());
    }

    FrameIndex alloc_block(unsigned order) {
        if (auto f = heap_.allocate(order)) return *f;
        refill(frames_in_order(order) * kPageSize);
        if (auto f = heap_.allocate(order)) return *f;
        throw Error(ErrorCode::OutOfMemory, "runtime heap exhausted after refill");
    }

    Vaddr reserve_va(std::uint64_t pages) {
        const Vaddr base = next_va_;
        // one unmapped guard page between regions
        const std::uint64_t span = (pages + 1) * kPageSize;
        if (span > kMapLimit - next_va_) throw Error(ErrorCode::OutOfMemory, "cell virtual window exhausted");
        next_va_ += span;
        return base;
    }

    VmRegion* find_region(Vpn vpn) {
        auto it = regions_.upper_bound(vpn << kPageShift);
        if (it == regions_.begin()) return nullptr;
        --it;
        return it->second.contains(vpn) ? &it->second : nullptr;
    }
    const VmRegion* find_region(Vpn vpn) const { return const_cast<CellRuntime*>(this)->find_region(vpn); }

    bool map_page(Vpn vpn) {
        VmRegion* region = find_region(vpn);
        if (!region || view_.table->mapped(vpn) || region->kind == RegionKind::Inherited) return false;
        FrameIndex frame = 0;
        if (region->block) {
            frame = region->block->start + (vpn - region->first_vpn());
        } else if (region->blocks.empty()) {
            frame = alloc_block(0);
        } else {
            return false;
        }
        map_checked(*view_.table, *view_.grants, vpn, frame);
        ++region->mapped;
        return true;
    }

    void handle_fault(Vaddr vaddr, AccessKind access) {
        ensure_online();
        if (!find_region(vaddr >> kPageShift)) {
            kernel_.report_crash(view_.id);
            throw Error(ErrorCode::SegmentationFault, "access outside every registered region");
        }
        const auto t0 = trace_faults_ ? std::chrono::steady_clock::now() : std::chrono::steady_clock::time_point{};
        RuntimeFaultContext ctx(*this, vaddr, access);
        FaultResolver resolver = FaultResolver::UserHandler;
        if (*view_.handler) {
            EventCounters::bump(view_.counters->user_faults);
            (*view_.handler)(ctx);
        } else {
            resolver = FaultResolver::KernelHandler;
            kernel_.service_kernel_fault(view_.id, [&] { demand_paging_handler(ctx); });
        }
        if (trace_faults_) {
            const auto ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
            faults_.push_back({vaddr, FaultKind::NotPresent, resolver, static_cast<std::uint64_t>(ns)});
        }
    }

    void release_region(VmRegion& region) {
        const bool per_page = region.per_page_frames();
        for (Vpn vpn = region.first_vpn(); vpn < region.end_vpn() && region.mapped > 0; ++vpn) {
            if (auto e = view_.table->unmap(vpn)) {
                if (per_page) heap_.release(e->frame, 0);
                --region.mapped;
            }
        }
        if (region.block) heap_.release(region.block->start, region.block->order);
        for (const auto& b : region.blocks) heap_.release(b.start, b.order);
    }

    Kernel& kernel_;
    CellView view_;
    std::uint32_t generation_ = 0;
    PagingPolicy default_policy_ = PagingPolicy::DemandPaging;
    BuddyAllocator heap_;
    std::vector<PhysRange> backing_;
    std::map<Vaddr, VmRegion> regions_;
    Vaddr next_va_ = kMapBase;
    Vaddr brk_ = kBrkBase;
    bool trace_faults_ = false;
    std::vector<FaultRecord> faults_;
};

}  // namespace xcell
