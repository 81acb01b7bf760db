#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <shared_mutex>
#include <string>
#include <variant>
#include <vector>

#include "xcell/buddy_allocator.hpp"
#include "xcell/config.hpp"
#include "xcell/grant_set.hpp"
#include "xcell/page_table.hpp"
#include "xcell/phys_memory.hpp"
#include "xcell/types.hpp"

namespace xcell {

struct KernelConfig {
    std::uint64_t pool_bytes = 1 * GiB;
    unsigned num_cpus = 1;
    std::uint64_t refill_watermark = 64;
    /// Frames moved per refill/seed; a power of two. Zero disables per-CPU pools.
    std::uint64_t refill_quantum = 256;
    std::uint64_t page_size = kPageSize;
    bool scrub_grants = true;

    void apply(const KeyValueConfig& kv) {
        if (auto v = kv.get_bytes("pool_bytes")) pool_bytes = *v;
        if (auto v = kv.get_uint("num_cpus")) num_cpus = static_cast<unsigned>(*v);
        if (auto v = kv.get_uint("refill_watermark")) refill_watermark = *v;
        if (auto v = kv.get_uint("refill_quantum")) refill_quantum = *v;
        if (auto v = kv.get_bytes("page_size")) page_size = *v;
    }

    static KernelConfig from_file(const std::string& path) {
        KernelConfig cfg;
        cfg.apply(KeyValueConfig::load(path));
        return cfg;
    }
};

enum class CellState { NormalProcess, Booting, Online, Crashed, Replaced, Terminated };

constexpr std::string_view to_string(CellState s) noexcept {
    switch (s) {
        case CellState::NormalProcess: return "normal_process";
        case CellState::Booting: return "booting";
        case CellState::Online: return "online";
        case CellState::Crashed: return "crashed";
        case CellState::Replaced: return "replaced";
        case CellState::Terminated: return "terminated";
    }
    return "unknown";
}

constexpr bool valid_transition(CellState from, CellState to) noexcept {
    switch (from) {
        case CellState::NormalProcess: return to == CellState::Booting;
        case CellState::Booting: return to == CellState::Online;
        case CellState::Online: return to == CellState::Crashed || to == CellState::Terminated;
        case CellState::Crashed: return to == CellState::Replaced || to == CellState::Terminated;
        case CellState::Replaced: return to == CellState::Online;
        case CellState::Terminated: return false;
    }
    return false;
}

/// Inherited mappings of the launching process start at 4 MB.
inline constexpr Vpn kInheritedBaseVpn = 0x400;

struct LaunchSpec {
    std::uint64_t requested_bytes = 0;
    FeatureSet privileged_features = Feature::UserFaultHandler;
    unsigned home_cpu = 0;
    PagingPolicy paging_policy = PagingPolicy::DemandPaging;
    /// Pages already mapped in the process before it becomes a cell.
    std::uint64_t inherited_pages = 0;
};

struct CellDescriptor {
    CellId cell_id{};
    CellState state = CellState::NormalProcess;
    std::vector<PhysRange> grants;
    FeatureSet privileged_features;
    unsigned home_cpu = 0;
    LaunchSpec spec;
    CounterSnapshot counters;
    std::uint32_t generation = 0;
    std::optional<PhysRange> boot_grant;
    std::optional<PhysRange> inherited_grant;

    std::uint64_t granted_frames() const {
        std::uint64_t n = 0;
        for (const auto& r : grants) n += r.frames();
        return n;
    }
};

struct Grow {
    std::uint64_t bytes = 0;
};
struct Shrink {
    PhysRange range;
};
struct SyncTables {};
struct CrashNotify {};

using VmexitRequest = std::variant<Grow, Shrink, SyncTables, CrashNotify>;

struct VmexitResponse {
    bool ok = false;
    std::optional<ErrorCode> error;
    std::optional<PhysRange> range;
    std::optional<CellDescriptor> replacement;
};

struct AuditReport {
    std::uint64_t total_frames = 0;
    std::uint64_t kernel_free = 0;
    std::uint64_t per_cpu_free = 0;
    std::uint64_t granted = 0;
    std::vector<std::string> violations;

    bool conservation_ok() const { return kernel_free + per_cpu_free + granted == total_frames; }
    bool ok() const { return conservation_ok() && violations.empty(); }
};

/// Non-owning handle the in-cell runtime uses to reach its own kernel-side
/// state. Valid for the kernel's lifetime.
struct CellView {
    CellId id{};
    const PhysicalMemory* memory = nullptr;
    EmulatedPageTable* table = nullptr;
    const GrantSet* grants = nullptr;
    EventCounters* counters = nullptr;
    const std::atomic<CellState>* state = nullptr;
    const std::atomic<std::uint32_t>* generation = nullptr;
    const FaultHandler* handler = nullptr;
};

/// Kernel side of the partitioned OS: the boot-time reserved pool, per-CPU
/// sub-pools, per-cell ACLs and lifecycle, and shadow page tables.
///
/// Lock order: cell record -> per-CPU pool -> global kernel lock. Only the
/// global lock is counted in kernel_lock_acquisitions.
class Kernel {
public:
    explicit Kernel(const KernelConfig& config)
        : config_(validate(config)),
          total_frames_(config.pool_bytes / kPageSize),
          memory_(total_frames_),
          kernel_alloc_(0, std::min<unsigned>(kKernelMaxOrder, std::bit_width(total_frames_) - 1)),
          quantum_order_(config.refill_quantum ? order_for_pages(config.refill_quantum) : 0) {
        kernel_alloc_.add_range(0, total_frames_);
        for (unsigned cpu = 0; cpu < config_.num_cpus; ++cpu) {
            auto pool = std::make_unique<PerCpuPool>(cpu, kernel_alloc_.max_order());
            if (per_cpu_enabled()) {
                auto start = kernel_alloc_.allocate(quantum_order_);
                if (!start) throw Error(ErrorCode::Config, "pool too fragmented to seed per-CPU pools");
                kernel_alloc_.transfer_out(*start);
                pool->allocator.donate(*start, quantum_order_);
            }
            pools_.push_back(std::move(pool));
        }
    }

    Kernel(const Kernel&) = delete;
    Kernel& operator=(const Kernel&) = delete;

    static std::unique_ptr<Kernel> reserve_boot_pool(const KernelConfig& config) {
        return std::make_unique<Kernel>(config);
    }

    static std::unique_ptr<Kernel> reserve_boot_pool(std::uint64_t total_bytes, unsigned num_cpus,
                                                     KernelConfig config = {}) {
        config.pool_bytes = total_bytes;
        config.num_cpus = num_cpus;
        return reserve_boot_pool(config);
    }

    const KernelConfig& config() const noexcept { return config_; }
    const PhysicalMemory& memory() const noexcept { return memory_; }
    std::uint64_t total_frames() const noexcept { return total_frames_; }
    unsigned kernel_max_order() const noexcept { return kernel_alloc_.max_order(); }
    unsigned min_order() const noexcept { return kernel_alloc_.min_order(); }
    bool per_cpu_enabled() const noexcept { return config_.refill_quantum > 0; }

    std::uint64_t kernel_free_frames() const {
        std::lock_guard g(kernel_mutex_);
        return kernel_alloc_.free_frames();
    }

    std::uint64_t per_cpu_free_frames(unsigned cpu) const {
        auto& pool = *pools_.at(cpu);
        std::lock_guard g(pool.mutex);
        return pool.allocator.free_frames();
    }

    std::uint64_t kernel_lock_acquisitions() const noexcept {
        return lock_acquisitions_.load(std::memory_order_relaxed);
    }

    /// Free blocks of the global allocator, sorted by start frame.
    std::vector<FrameBlock> kernel_free_blocks() const {
        std::lock_guard g(kernel_mutex_);
        return kernel_alloc_.free_blocks();
    }

    // ---- resource grants -------------------------------------------------

    PhysRange kalloc(CellId cell, unsigned cpu, std::uint64_t bytes) {
        auto& rec = record(cell);
        std::lock_guard g(rec.mutex);
        auto s = rec.state.load();
        if (s != CellState::Online && s != CellState::Booting) {
            throw Error(ErrorCode::InvalidState, "kalloc on a cell that is not online");
        }
        return kalloc_locked(rec, cpu, bytes);
    }

    void kfree(CellId cell, const PhysRange& range) {
        auto& rec = record(cell);
        std::lock_guard g(rec.mutex);
        kfree_locked(rec, range);
    }

    // ---- lifecycle -------------------------------------------------------

    CellDescriptor launch_cell(const LaunchSpec& spec) {
        if (spec.home_cpu >= config_.num_cpus) {
            throw Error(ErrorCode::InvalidArgument, "home_cpu outside configured CPUs");
        }
        CellRecord* rec = nullptr;
        {
            std::unique_lock g(cells_mutex_);
            const CellId id{next_cell_id_++};
            auto owned = std::make_unique<CellRecord>(id, spec);
            rec = owned.get();
            cells_.emplace(id, std::move(owned));
        }
        std::unique_lock g(rec->mutex);
        try {
            boot(*rec, false);
        } catch (const Error& e) {
            reclaim(*rec);
            g.unlock();
            std::unique_lock cg(cells_mutex_);
            cells_.erase(rec->id);
            if (e.code() == ErrorCode::OutOfMemory || e.code() == ErrorCode::Oversize) {
                throw Error(ErrorCode::LaunchRefused, e.what());
            }
            throw;
        }
        return describe(*rec);
    }

    VmexitResponse handle_vmexit(CellId cell, const VmexitRequest& request) {
        auto& rec = record(cell);
        std::lock_guard g(rec.mutex);
        if (rec.state.load() != CellState::Online) {
            throw Error(ErrorCode::InvalidState, "vmexit from a cell that is not online");
        }
        EventCounters::bump(rec.counters.vmexits);
        return std::visit([&](const auto& r) { return service(rec, r); }, request);
    }

    /// The cell raised an unhandled exception; it stops being schedulable.
    void report_crash(CellId cell) {
        auto& rec = record(cell);
        std::lock_guard g(rec.mutex);
        transition(rec, CellState::Crashed);
    }

    CellDescriptor crash_replace(CellId cell) {
        auto& rec = record(cell);
        std::lock_guard g(rec.mutex);
        if (rec.state.load() != CellState::Crashed) {
            throw Error(ErrorCode::InvalidState, "crash_replace on a cell that has not crashed");
        }
        return crash_replace_locked(rec);
    }

    void terminate(CellId cell) {
        auto& rec = record(cell);
        std::lock_guard g(rec.mutex);
        transition(rec, CellState::Terminated);
        reclaim(rec);
    }

    void register_fault_handler(CellId cell, FaultHandler handler) {
        auto& rec = record(cell);
        std::lock_guard g(rec.mutex);
        auto s = rec.state.load();
        if (s != CellState::Booting && s != CellState::Online) {
            throw Error(ErrorCode::InvalidState, "handler registration needs a booting or online cell");
        }
        rec.handler = std::move(handler);
    }

    /// Kernel-side resolution of a page fault for cells without a user-level
    /// handler. `resolve` runs in the faulting context; tables are synced after.
    template <class Resolve>
    void service_kernel_fault(CellId cell, Resolve&& resolve) {
        auto& rec = record(cell);
        EventCounters::bump(rec.counters.kernel_faults);
        resolve();
        std::lock_guard g(rec.mutex);
        rec.table.sync_into(rec.shadow);
    }

    // ---- inspection ------------------------------------------------------

    CellView view(CellId cell) {
        auto& rec = record(cell);
        return CellView{rec.id, &memory_, &rec.table, &rec.grants, &rec.counters,
                        &rec.state, &rec.generation, &rec.handler};
    }

    CellDescriptor descriptor(CellId cell) const {
        auto& rec = record(cell);
        std::lock_guard g(rec.mutex);
        return describe(rec);
    }

    CellState state(CellId cell) const { return record(cell).state.load(); }

    CounterSnapshot counters(CellId cell) const { return record(cell).counters.snapshot(); }

    /// Only meaningful at quiescent points.
    const EmulatedPageTable& cell_table(CellId cell) const { return record(cell).table; }
    const EmulatedPageTable& shadow_table(CellId cell) const { return record(cell).shadow; }

    bool shadow_matches(CellId cell) const {
        auto& rec = record(cell);
        std::lock_guard g(rec.mutex);
        return rec.table == rec.shadow;
    }

    std::vector<CellId> cells() const {
        std::shared_lock g(cells_mutex_);
        std::vector<CellId> out;
        for (const auto& [id, _] : cells_) out.push_back(id);
        return out;
    }

    /// Sweep of every frame: free blocks and grants must tile the pool with no
    /// overlap, and every present mapping must point at a frame its cell owns.
    AuditReport audit() const {
        AuditReport report;
        report.total_frames = total_frames_;
        struct Interval {
            FrameIndex begin, end;
            std::string tag;
        };
        std::vector<Interval> all;

        std::shared_lock cg(cells_mutex_);
        std::vector<std::unique_lock<std::mutex>> held;
        for (const auto& [id, rec] : cells_) held.emplace_back(rec->mutex);
        for (const auto& pool : pools_) held.emplace_back(pool->mutex);
        held.emplace_back(kernel_mutex_);

        for (const auto& b : kernel_alloc_.free_blocks()) {
            all.push_back({b.start, b.end(), "kernel-free"});
            report.kernel_free += b.frames();
        }
        for (const auto& pool : pools_) {
            for (const auto& b : pool->allocator.free_blocks()) {
                all.push_back({b.start, b.end(), "cpu" + std::to_string(pool->cpu) + "-free"});
                report.per_cpu_free += b.frames();
            }
        }
        for (const auto& [id, rec] : cells_) {
            for (const auto& r : rec->grants.ranges()) {
                all.push_back({r.start_frame, r.end_frame(), "cell" + std::to_string(to_underlying(id))});
                report.granted += r.frames();
            }
            for (const auto& [vpn, e] : rec->table.entries()) {
                if (e.present() && !rec->grants.contains_frame(e.frame)) {
                    report.violations.push_back("cell" + std::to_string(to_underlying(id)) +
                                                " maps frame " + std::to_string(e.frame) +
                                                " outside its grants");
                }
            }
        }
        std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.begin < b.begin; });
        for (std::size_t i = 1; i < all.size(); ++i) {
            if (all[i].begin < all[i - 1].end) {
                report.violations.push_back("overlap: " + all[i - 1].tag + " and " + all[i].tag +
                                            " at frame " + std::to_string(all[i].begin));
            }
        }
        if (!all.empty() && all.back().end > total_frames_) {
            report.violations.push_back("interval beyond pool end");
        }
        if (!report.conservation_ok()) {
            report.violations.push_back("conservation: free + granted != total");
        }
        return report;
    }

    void write_counters_csv(std::ostream& out) const {
        out << "cell_id,mode_switches,vmexits,user_faults,kernel_faults,kernel_lock_acquisitions,io_messages\n";
        std::shared_lock g(cells_mutex_);
        for (const auto& [id, rec] : cells_) {
            auto c = rec->counters.snapshot();
            out << to_underlying(id) << ',' << c.mode_switches << ',' << c.vmexits << ','
                << c.user_faults << ',' << c.kernel_faults << ',' << c.kernel_lock_acquisitions << ','
                << c.io_messages << '\n';
        }
    }

private:
    struct alignas(64) PerCpuPool {
        PerCpuPool(unsigned id, unsigned max_order) : cpu(id), allocator(0, max_order) {}
        unsigned cpu;
        mutable std::mutex mutex;
        BuddyAllocator allocator;
    };

    struct CellRecord {
        CellRecord(CellId cell, const LaunchSpec& launch) : id(cell), spec(launch) {}

        CellId id;
        mutable std::mutex mutex;
        std::atomic<CellState> state{CellState::NormalProcess};
        std::atomic<std::uint32_t> generation{0};
        LaunchSpec spec;
        GrantSet grants;
        EmulatedPageTable table;
        EmulatedPageTable shadow;
        EventCounters counters;
        FaultHandler handler;
        std::optional<PhysRange> boot_grant;
        std::optional<PhysRange> inherited_grant;
    };

    static KernelConfig validate(const KernelConfig& c) {
        if (c.page_size != kPageSize) {
            throw Error(ErrorCode::Config, "page_size must be 4096");
        }
        if (c.pool_bytes == 0 || c.pool_bytes % kPageSize != 0) {
            throw Error(ErrorCode::Config, "pool_bytes must be a non-zero multiple of the page size");
        }
        if (c.num_cpus == 0) throw Error(ErrorCode::Config, "num_cpus must be positive");
        if (c.refill_quantum & (c.refill_quantum - 1)) {
            throw Error(ErrorCode::Config, "refill_quantum must be a power of two");
        }
        if (c.refill_quantum > frames_in_order(kKernelMaxOrder)) {
            throw Error(ErrorCode::Config, "refill_quantum exceeds the largest kernel block");
        }
        if (c.pool_bytes / kPageSize < std::uint64_t{c.num_cpus} * std::max<std::uint64_t>(1, c.refill_quantum)) {
            throw Error(ErrorCode::Config, "pool smaller than one per-CPU delegation per CPU");
        }
        return c;
    }

    CellRecord& record(CellId cell) const {
        std::shared_lock g(cells_mutex_);
        auto it = cells_.find(cell);
        if (it == cells_.end()) throw Error(ErrorCode::InvalidArgument, "unknown cell");
        return *it->second;
    }

    static void transition(CellRecord& rec, CellState to) {
        auto from = rec.state.load();
        if (!valid_transition(from, to)) {
            throw Error(ErrorCode::InvalidState, std::string("illegal transition ") +
                                                     std::string(to_string(from)) + " -> " +
                                                     std::string(to_string(to)));
        }
        rec.state.store(to);
    }

    void count_lock(EventCounters& counters) {
        lock_acquisitions_.fetch_add(1, std::memory_order_relaxed);
        EventCounters::bump(counters.kernel_lock_acquisitions);
    }

    std::optional<std::pair<FrameIndex, GrantOrigin>> allocate_frames(unsigned cpu, unsigned order,
                                                                      EventCounters& counters) {
        if (per_cpu_enabled() && order <= quantum_order_) {
            auto& pool = *pools_.at(cpu);
            std::lock_guard g(pool.mutex);
            if (pool.allocator.free_frames() < config_.refill_watermark || !pool.allocator.can_allocate(order)) {
                refill_pool(pool, counters);
            }
            if (auto f = pool.allocator.allocate(order)) {
                return std::pair{*f, GrantOrigin{static_cast<int>(cpu)}};
            }
        }
        std::lock_guard g(kernel_mutex_);
        count_lock(counters);
        if (auto f = kernel_alloc_.allocate(order)) return std::pair{*f, GrantOrigin{}};
        return std::nullopt;
    }

    void refill_pool(PerCpuPool& pool, EventCounters& counters) {
        std::lock_guard g(kernel_mutex_);
        count_lock(counters);
        if (auto f = kernel_alloc_.allocate(quantum_order_)) {
            kernel_alloc_.transfer_out(*f);
            pool.allocator.donate(*f, quantum_order_);
        }
    }

    void release_frames(const PhysRange& range, GrantOrigin origin, EventCounters& counters) {
        if (!origin.is_kernel()) {
            auto& pool = *pools_.at(static_cast<unsigned>(origin.cpu));
            std::lock_guard g(pool.mutex);
            pool.allocator.release(range.start_frame, range.order);
            if (pool.allocator.free_frames() > 4 * config_.refill_quantum) {
                std::lock_guard kg(kernel_mutex_);
                count_lock(counters);
                while (pool.allocator.free_frames() > 2 * config_.refill_quantum) {
                    auto block = pool.allocator.pop_largest_free(kernel_alloc_.max_order());
                    if (!block) break;
                    kernel_alloc_.donate(block->start, block->order);
                }
            }
            return;
        }
        std::lock_guard g(kernel_mutex_);
        count_lock(counters);
        kernel_alloc_.release(range.start_frame, range.order);
    }

    PhysRange kalloc_locked(CellRecord& rec, unsigned cpu, std::uint64_t bytes) {
        if (bytes == 0) throw Error(ErrorCode::InvalidArgument, "kalloc of zero bytes");
        const unsigned order = order_for_bytes(bytes);
        if (order > kernel_alloc_.max_order()) {
            throw Error(ErrorCode::Oversize, "request exceeds the largest kernel chunk");
        }
        auto got = allocate_frames(cpu, order, rec.counters);
        if (!got) throw Error(ErrorCode::OutOfMemory, "reserved pool exhausted");
        PhysRange range{got->first, order, rec.id};
        rec.grants.insert(range, got->second);
        if (config_.scrub_grants) memory_.scrub(range.start_frame, range.frames());
        return range;
    }

    void kfree_locked(CellRecord& rec, const PhysRange& range) {
        auto origin = rec.grants.erase(range);
        if (!origin) throw Error(ErrorCode::AclViolation, "range is not granted to this cell");
        release_frames(range, *origin, rec.counters);
        if (rec.boot_grant && rec.boot_grant->start_frame == range.start_frame) rec.boot_grant.reset();
    }

    void reclaim(CellRecord& rec) {
        for (const auto& e : rec.grants.entries()) release_frames(e.range, e.origin, rec.counters);
        rec.grants.clear();
        rec.table.clear();
        rec.shadow.clear();
        rec.handler = nullptr;
        rec.boot_grant.reset();
        rec.inherited_grant.reset();
    }

    /// Boot protocol: mode switch, grant, page-table upload, lock inherited
    /// frames, handler registration, mode switch.
    void boot(CellRecord& rec, bool replacing) {
        if (!replacing) transition(rec, CellState::Booting);
        EventCounters::bump(rec.counters.mode_switches);

        const auto& spec = rec.spec;
        if (spec.requested_bytes > 0) rec.boot_grant = kalloc_locked(rec, spec.home_cpu, spec.requested_bytes);

        EmulatedPageTable process_table;
        if (spec.inherited_pages > 0) {
            rec.inherited_grant = kalloc_locked(rec, spec.home_cpu, spec.inherited_pages * kPageSize);
            for (std::uint64_t i = 0; i < spec.inherited_pages; ++i) {
                process_table.map(kInheritedBaseVpn + i, rec.inherited_grant->start_frame + i);
            }
        }
        rec.table = process_table;
        rec.shadow = process_table;
        lock_inherited(rec);

        if (spec.privileged_features.has(Feature::UserFaultHandler)) rec.handler = demand_paging_handler;

        EventCounters::bump(rec.counters.mode_switches);
        rec.state.store(CellState::Online);
    }

    static void lock_inherited(CellRecord& rec) {
        rec.table.lock_all_present();
        rec.table.sync_into(rec.shadow);
    }

    CellDescriptor crash_replace_locked(CellRecord& rec) {
        reclaim(rec);
        transition(rec, CellState::Replaced);
        rec.counters.reset();
        rec.generation.fetch_add(1);
        try {
            boot(rec, true);
        } catch (const Error& e) {
            reclaim(rec);
            throw Error(ErrorCode::LaunchRefused, std::string("replacement failed: ") + e.what());
        }
        return describe(rec);
    }

    VmexitResponse service(CellRecord& rec, const Grow& grow) {
        VmexitResponse resp;
        try {
            resp.range = kalloc_locked(rec, rec.spec.home_cpu, grow.bytes);
            resp.ok = true;
        } catch (const Error& e) {
            resp.error = e.code();
        }
        rec.table.sync_into(rec.shadow);
        return resp;
    }

    VmexitResponse service(CellRecord& rec, const Shrink& shrink) {
        VmexitResponse resp;
        const auto& r = shrink.range;
        if (!rec.grants.contains(r)) {
            resp.error = ErrorCode::AclViolation;
        } else if (rec.table.any_locked_frame_in(r.start_frame, r.end_frame())) {
            resp.error = ErrorCode::LockedMapping;
        } else if (rec.table.any_frame_in(r.start_frame, r.end_frame())) {
            resp.error = ErrorCode::InvalidState;
        } else {
            kfree_locked(rec, r);
            resp.ok = true;
        }
        rec.table.sync_into(rec.shadow);
        return resp;
    }

    VmexitResponse service(CellRecord& rec, const SyncTables&) {
        rec.table.sync_into(rec.shadow);
        return VmexitResponse{true, std::nullopt, std::nullopt, std::nullopt};
    }

    VmexitResponse service(CellRecord& rec, const CrashNotify&) {
        transition(rec, CellState::Crashed);
        VmexitResponse resp;
        try {
            resp.replacement = crash_replace_locked(rec);
            resp.ok = true;
        } catch (const Error& e) {
            resp.error = e.code();
        }
        return resp;
    }

    CellDescriptor describe(const CellRecord& rec) const {
        CellDescriptor d;
        d.cell_id = rec.id;
        d.state = rec.state.load();
        d.grants = rec.grants.ranges();
        d.privileged_features = rec.spec.privileged_features;
        d.home_cpu = rec.spec.home_cpu;
        d.spec = rec.spec;
        d.counters = rec.counters.snapshot();
        d.generation = rec.generation.load();
        d.boot_grant = rec.boot_grant;
        d.inherited_grant = rec.inherited_grant;
        return d;
    }

    KernelConfig config_;
    std::uint64_t total_frames_;
    PhysicalMemory memory_;

    mutable std::mutex kernel_mutex_;
    BuddyAllocator kernel_alloc_;
    unsigned quantum_order_;
    std::atomic<std::uint64_t> lock_acquisitions_{0};

    std::vector<std::unique_ptr<PerCpuPool>> pools_;

    mutable std::shared_mutex cells_mutex_;
    std::map<CellId, std::unique_ptr<CellRecord>> cells_;
    std::uint32_t next_cell_id_ = 1;
};

}  // namespace xcell
