#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xcell/grant_set.hpp"
#include "xcell/types.hpp"

namespace xcell {

enum PteFlags : std::uint8_t {
    kPtePresent = 1u << 0,
    kPteLocked = 1u << 1,
    kPteDirty = 1u << 2,
};

struct PageTableEntry {
    FrameIndex frame = 0;
    std::uint8_t flags = 0;

    bool present() const noexcept { return flags & kPtePresent; }
    bool locked() const noexcept { return flags & kPteLocked; }
    bool dirty() const noexcept { return flags & kPteDirty; }

    friend bool operator==(const PageTableEntry&, const PageTableEntry&) = default;
};

/// Per-cell page table, flat map keyed by virtual page number.
///
/// Every mutation bumps `epoch()` and is appended to a change log consumed by
/// sync_into(), which brings a shadow copy up to date without a full copy.
class EmulatedPageTable {
public:
    const PageTableEntry* find(Vpn vpn) const {
        auto it = entries_.find(vpn);
        return it == entries_.end() ? nullptr : &it->second;
    }

    bool mapped(Vpn vpn) const { return entries_.contains(vpn); }

    void map(Vpn vpn, FrameIndex frame, std::uint8_t flags = 0) {
        auto [it, inserted] = entries_.try_emplace(vpn, PageTableEntry{frame, std::uint8_t(flags | kPtePresent)});
        if (!inserted) throw Error(ErrorCode::DoubleMap, "virtual page already mapped");
        note_change(vpn);
    }

    /// Removes a mapping and returns it. LOCKED entries are refused.
    std::optional<PageTableEntry> unmap(Vpn vpn) {
        auto it = entries_.find(vpn);
        if (it == entries_.end()) return std::nullopt;
        if (it->second.locked()) throw Error(ErrorCode::LockedMapping, "entry is locked");
        PageTableEntry e = it->second;
        entries_.erase(it);
        note_change(vpn);
        return e;
    }

    void mark_dirty(Vpn vpn) {
        auto it = entries_.find(vpn);
        if (it == entries_.end() || it->second.dirty()) return;
        it->second.flags |= kPteDirty;
        note_change(vpn);
    }

    /// Marks every present entry LOCKED. Returns how many were locked.
    std::size_t lock_all_present() {
        std::size_t n = 0;
        for (auto& [vpn, e] : entries_) {
            if (e.present() && !e.locked()) {
                e.flags |= kPteLocked;
                note_change(vpn);
                ++n;
            }
        }
        return n;
    }

    bool any_locked_frame_in(FrameIndex begin, FrameIndex end) const {
        for (const auto& [_, e] : entries_) {
            if (e.locked() && e.frame >= begin && e.frame < end) return true;
        }
        return false;
    }

    bool any_frame_in(FrameIndex begin, FrameIndex end) const {
        for (const auto& [_, e] : entries_) {
            if (e.frame >= begin && e.frame < end) return true;
        }
        return false;
    }

    std::size_t size() const noexcept { return entries_.size(); }
    std::uint64_t epoch() const noexcept { return epoch_; }
    const std::unordered_map<Vpn, PageTableEntry>& entries() const noexcept { return entries_; }

    /// Brings `shadow` to bit-for-bit equality with this table. The DIRTY and
    /// LOCKED bits are copied verbatim.
    void sync_into(EmulatedPageTable& shadow) {
        if (shadow.epoch_ == epoch_ && shadow.synced_from_ == this) return;
        if (log_overflow_ || shadow.synced_from_ != this || shadow.epoch_ != synced_epoch_) {
            shadow.entries_ = entries_;
        } else {
            for (Vpn vpn : change_log_) {
                auto it = entries_.find(vpn);
                if (it == entries_.end()) {
                    shadow.entries_.erase(vpn);
                } else {
                    shadow.entries_[vpn] = it->second;
                }
            }
        }
        change_log_.clear();
        log_overflow_ = false;
        shadow.epoch_ = epoch_;
        shadow.synced_from_ = this;
        synced_epoch_ = epoch_;
    }

    void clear() {
        entries_.clear();
        change_log_.clear();
        log_overflow_ = true;
        ++epoch_;
    }

    friend bool operator==(const EmulatedPageTable& a, const EmulatedPageTable& b) {
        return a.entries_ == b.entries_;
    }

private:
    void note_change(Vpn vpn) {
        ++epoch_;
        if (log_overflow_) return;
        if (change_log_.size() > entries_.size() + 1024) {
            change_log_.clear();
            log_overflow_ = true;
            return;
        }
        change_log_.push_back(vpn);
    }

    std::unordered_map<Vpn, PageTableEntry> entries_;
    std::uint64_t epoch_ = 0;
    std::vector<Vpn> change_log_;
    bool log_overflow_ = true;
    const EmulatedPageTable* synced_from_ = nullptr;
    std::uint64_t synced_epoch_ = 0;
};

/// Maps `vpn` to `frame` after checking the frame against the owning cell's
/// grants.
inline void map_checked(EmulatedPageTable& table, const GrantSet& acl, Vpn vpn,
                        FrameIndex frame, std::uint8_t flags = 0) {
    if (!acl.contains_frame(frame)) {
        throw Error(ErrorCode::AclViolation, "frame is not granted to this cell");
    }
    table.map(vpn, frame, flags);
}

enum class AccessKind { Read, Write };
enum class FaultKind { NotPresent, Protection };
enum class FaultResolver { UserHandler, KernelHandler };

constexpr std::string_view to_string(FaultKind k) noexcept {
    return k == FaultKind::NotPresent ? "not_present" : "protection";
}
constexpr std::string_view to_string(FaultResolver r) noexcept {
    return r == FaultResolver::UserHandler ? "user" : "kernel";
}

struct FaultRecord {
    Vaddr vaddr = 0;
    FaultKind kind = FaultKind::NotPresent;
    FaultResolver resolved_by = FaultResolver::UserHandler;
    std::uint64_t latency_ns = 0;
};

inline void write_fault_trace_csv(std::ostream& out, CellId cell, const std::vector<FaultRecord>& faults,
                                  bool header = true) {
    if (header) out << "cell_id,vaddr,kind,resolved_by,latency_ns\n";
    for (const auto& f : faults) {
        out << to_underlying(cell) << ",0x" << std::hex << f.vaddr << std::dec << ','
            << to_string(f.kind) << ',' << to_string(f.resolved_by) << ',' << f.latency_ns << '\n';
    }
}

/// What a fault handler sees. Implemented by the cell runtime.
class FaultContext {
public:
    virtual ~FaultContext() = default;

    virtual Vaddr fault_address() const = 0;
    virtual AccessKind access() const = 0;
    Vpn fault_vpn() const { return fault_address() >> kPageShift; }

    /// True when `vpn` lies inside a registered region.
    virtual bool in_region(Vpn vpn) const = 0;
    virtual bool is_mapped(Vpn vpn) const = 0;
    /// Backs `vpn` with a frame from the runtime heap, refilling from the
    /// kernel if the heap is empty. Returns false if `vpn` is outside any
    /// region or already mapped.
    virtual bool map_page(Vpn vpn) = 0;
};

using FaultHandler = std::function<void(FaultContext&)>;

/// Maps exactly the faulting page.
inline void demand_paging_handler(FaultContext& ctx) { ctx.map_page(ctx.fault_vpn()); }

/// Maps the faulting page and its successor when the successor is in range.
inline void prefetch_two_handler(FaultContext& ctx) {
    const Vpn vpn = ctx.fault_vpn();
    ctx.map_page(vpn);
    if (ctx.in_region(vpn + 1) && !ctx.is_mapped(vpn + 1)) ctx.map_page(vpn + 1);
}

}  // namespace xcell
