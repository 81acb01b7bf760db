#pragma once

#include <pthread.h>
#include <sched.h>

#include <algorithm>
#include <barrier>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "xcell/cell_runtime.hpp"
#include "xcell/fiber.hpp"
#include "xcell/io_engine.hpp"
#include "xcell/kernel.hpp"
#include "xcell/shared_kernel.hpp"

namespace xcell::bench {

enum class Mode { Xos, Shared };

enum class Workload {
    MicroSbrk,
    MicroMmap,
    MicroMallocFree,
    MicroMalloc,
    ScaleBrk,
    ScaleMmap,
    ScalePagefault,
    ScaleFutexlike,
    Isolation,
};

inline std::string_view to_string(Mode m) noexcept { return m == Mode::Xos ? "xos" : "shared"; }

inline Mode parse_mode(std::string_view s) {
    if (s == "xos" || s == "XOS") return Mode::Xos;
    if (s == "shared" || s == "SHARED_BASELINE" || s == "baseline") return Mode::Shared;
    throw Error(ErrorCode::Config, "unknown mode '" + std::string(s) + "'");
}

inline constexpr std::pair<Workload, std::string_view> kWorkloadNames[] = {
    {Workload::MicroSbrk, "MICRO_SBRK"},           {Workload::MicroMmap, "MICRO_MMAP"},
    {Workload::MicroMallocFree, "MICRO_MALLOC_FREE"}, {Workload::MicroMalloc, "MICRO_MALLOC"},
    {Workload::ScaleBrk, "SCALE_BRK"},             {Workload::ScaleMmap, "SCALE_MMAP"},
    {Workload::ScalePagefault, "SCALE_PAGEFAULT"}, {Workload::ScaleFutexlike, "SCALE_FUTEXLIKE"},
    {Workload::Isolation, "ISOLATION"},
};

inline std::string_view to_string(Workload w) noexcept {
    for (auto [k, name] : kWorkloadNames) {
        if (k == w) return name;
    }
    return "?";
}

/// Accepts "MICRO_MMAP", "micro_mmap" or "micro-mmap".
inline Workload parse_workload(std::string_view s) {
    std::string up(s);
    for (auto& c : up) c = c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    for (auto [k, name] : kWorkloadNames) {
        if (name == up) return k;
    }
    throw Error(ErrorCode::Config, "unknown workload '" + std::string(s) + "'");
}

inline bool is_micro(Workload w) noexcept {
    return w == Workload::MicroSbrk || w == Workload::MicroMmap || w == Workload::MicroMallocFree ||
           w == Workload::MicroMalloc;
}

struct ExperimentSpec {
    Mode mode = Mode::Xos;
    Workload workload = Workload::MicroMallocFree;
    unsigned threads = 1;
    std::vector<std::uint64_t> size_sweep{4 * KiB};
    /// Operations per run (micro) or per thread (scalability).
    std::uint64_t iterations = 1;
    unsigned runs = 10;
    std::uint64_t seed = 1;
    std::uint64_t pool_bytes = 2 * GiB;
    /// Largest sweep point honoured; 0 means min(1 GB, pool / 2).
    std::uint64_t max_sweep_bytes = 0;

    std::uint64_t sweep_cap() const {
        return max_sweep_bytes ? max_sweep_bytes : std::min<std::uint64_t>(1 * GiB, pool_bytes / 2);
    }

    void validate() const {
        for (auto s : size_sweep) {
            if (s == 0 || s % kPageSize != 0) {
                throw Error(ErrorCode::Config, "sweep sizes must be non-zero page multiples");
            }
        }
        if (threads == 0) throw Error(ErrorCode::Config, "threads must be positive");
    }
};

// ---- statistics ----------------------------------------------------------

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample.
inline std::uint64_t percentile(std::vector<std::uint64_t> samples, double p) {
    if (samples.empty()) return 0;
    std::sort(samples.begin(), samples.end());
    const auto n = samples.size();
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return samples[rank - 1];
}

struct LatencyStats {
    double mean = 0;
    std::uint64_t p50 = 0, p99 = 0, max = 0;
};

inline LatencyStats summarize(const std::vector<std::uint64_t>& samples) {
    LatencyStats s;
    if (samples.empty()) return s;
    s.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
    s.p50 = percentile(samples, 50);
    s.p99 = percentile(samples, 99);
    s.max = *std::max_element(samples.begin(), samples.end());
    return s;
}

// ---- reports -------------------------------------------------------------

struct ReportRow {
    std::string experiment;
    Mode mode = Mode::Xos;
    unsigned threads = 1;
    std::uint64_t size_bytes = 0;
    double throughput_ops_s = 0;
    LatencyStats latency;
    CounterSnapshot counters;
    bool skipped = false;
    bool saturated = false;
};

inline constexpr std::string_view kCsvHeader =
    "experiment,mode,threads,size_bytes,throughput_ops_s,mean_ns,p50_ns,p99_ns,max_ns,vmexits,mode_switches,"
    "user_faults,kernel_faults,lock_acq";

inline void emit_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
    out << kCsvHeader << '\n';
    for (const auto& r : rows) {
        out << r.experiment << ',' << to_string(r.mode) << ',' << r.threads << ',' << r.size_bytes << ',';
        if (r.skipped) {
            out << "SKIPPED,,,,,,,,,\n";
            continue;
        }
        out << std::fixed << std::setprecision(1) << r.throughput_ops_s << ',' << r.latency.mean << ','
            << std::defaultfloat << r.latency.p50 << ',' << r.latency.p99 << ',' << r.latency.max << ','
            << r.counters.vmexits << ',' << r.counters.mode_switches << ',' << r.counters.user_faults << ','
            << r.counters.kernel_faults << ',' << r.counters.kernel_lock_acquisitions << '\n';
    }
}

/// Ratio table pairing xos and shared rows with the same experiment, thread
/// count and size.
inline void emit_summary(std::ostream& out, const std::vector<ReportRow>& rows) {
    struct Key {
        std::string experiment;
        unsigned threads;
        std::uint64_t size;
        auto operator<=>(const Key&) const = default;
    };
    std::map<Key, std::pair<const ReportRow*, const ReportRow*>> pairs;
    for (const auto& r : rows) {
        if (r.skipped) continue;
        auto& slot = pairs[{r.experiment, r.threads, r.size_bytes}];
        (r.mode == Mode::Xos ? slot.first : slot.second) = &r;
    }
    out << std::left << std::setw(20) << "experiment" << std::setw(8) << "threads" << std::setw(10) << "size"
        << std::setw(16) << "xos ops/s" << std::setw(16) << "shared ops/s" << std::setw(12) << "tput x/s"
        << "p99 s/x\n";
    for (const auto& [k, p] : pairs) {
        out << std::left << std::setw(20) << k.experiment << std::setw(8) << k.threads << std::setw(10)
            << format_bytes(k.size);
        auto num = [&](const ReportRow* r) {
            std::ostringstream s;
            if (r) {
                s << std::fixed << std::setprecision(0) << r->throughput_ops_s;
            } else {
                s << "-";
            }
            return s.str();
        };
        out << std::setw(16) << num(p.first) << std::setw(16) << num(p.second);
        std::ostringstream tr, pr;
        if (p.first && p.second && p.second->throughput_ops_s > 0) {
            tr << std::fixed << std::setprecision(2) << p.first->throughput_ops_s / p.second->throughput_ops_s;
        } else {
            tr << "-";
        }
        if (p.first && p.second && p.first->latency.p99 > 0) {
            pr << std::fixed << std::setprecision(2)
               << static_cast<double>(p.second->latency.p99) / static_cast<double>(p.first->latency.p99);
        } else {
            pr << "-";
        }
        out << std::setw(12) << tr.str() << pr.str();
        if ((p.first && p.first->saturated) || (p.second && p.second->saturated)) out << "  (saturated)";
        out << '\n';
    }
}

/// Row-level invariants: percentile ordering, and no kernel involvement for
/// in-cell micro operations.
inline std::vector<std::string> check_rows(const std::vector<ReportRow>& rows) {
    std::vector<std::string> out;
    for (const auto& r : rows) {
        if (r.skipped) continue;
        const std::string where = r.experiment + "/" + std::string(to_string(r.mode)) + "/" +
                                  std::to_string(r.threads) + "/" + std::to_string(r.size_bytes);
        if (!(r.latency.p50 <= r.latency.p99 && r.latency.p99 <= r.latency.max)) {
            out.push_back(where + ": p50 <= p99 <= max does not hold");
        }
        if (r.mode == Mode::Xos && r.experiment != "ISOLATION" && r.counters.kernel_faults != 0) {
            out.push_back(where + ": kernel faults in a cell");
        }
    }
    return out;
}

inline void write_report(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
    if (rows.empty()) throw Error(ErrorCode::InvalidArgument, "no rows to report");
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write report " + path.string());
    emit_csv(out, rows);
    if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

// ---- workload generation -------------------------------------------------

/// Byte-identical input for both modes: allocation chunk sizes (each at most
/// 64 MB, the runtime's largest block) and a page touch order.
struct MicroTrace {
    std::uint64_t size = 0;
    std::vector<std::uint64_t> chunks;
    std::vector<std::uint32_t> touch_pages;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) noexcept {
    std::uint64_t x = seed ^ (a * 0x9e3779b97f4a7c15ull) ^ (b * 0xc2b2ae3d27d4eb4full);
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdull;
    x ^= x >> 33;
    return x;
}

inline MicroTrace make_micro_trace(std::uint64_t seed, std::uint64_t size, unsigned run) {
    MicroTrace t;
    t.size = size;
    for (std::uint64_t left = size; left > 0;) {
        const auto c = std::min(left, kRuntimeChunkBytes);
        t.chunks.push_back(c);
        left -= c;
    }
    const auto pages = static_cast<std::uint32_t>(size / kPageSize);
    t.touch_pages.resize(pages);
    std::iota(t.touch_pages.begin(), t.touch_pages.end(), 0u);
    std::mt19937_64 rng(mix_seed(seed, size, run));
    std::shuffle(t.touch_pages.begin(), t.touch_pages.end(), rng);
    return t;
}

inline constexpr std::uint64_t kChunkPages = kRuntimeChunkBytes / kPageSize;

/// One micro operation. Returns nanoseconds of the timed part.
template <class Mem>
std::uint64_t run_micro_op(Mem& m, Workload w, const MicroTrace& t, std::vector<Vaddr>& scratch) {
    using clock = std::chrono::steady_clock;
    auto ns = [](auto d) { return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(d).count()); };
    const auto t0 = clock::now();
    switch (w) {
        case Workload::MicroSbrk: {
            const Vaddr base = m.sbrk(static_cast<std::int64_t>(t.size));
            for (auto p : t.touch_pages) m.touch(base + std::uint64_t{p} * kPageSize, AccessKind::Write, 1);
            m.sbrk(-static_cast<std::int64_t>(t.size));
            return ns(clock::now() - t0);
        }
        case Workload::MicroMmap: {
            const Vaddr base = m.mmap(t.size, PagingPolicy::DemandPaging);
            for (auto p : t.touch_pages) m.touch(base + std::uint64_t{p} * kPageSize, AccessKind::Write, 1);
            m.munmap(base);
            return ns(clock::now() - t0);
        }
        case Workload::MicroMalloc:
        case Workload::MicroMallocFree: {
            scratch.clear();
            for (auto c : t.chunks) scratch.push_back(m.malloc(c));
            for (auto p : t.touch_pages) {
                m.touch(scratch[p / kChunkPages] + (p % kChunkPages) * kPageSize, AccessKind::Write, 1);
            }
            std::uint64_t elapsed = 0;
            if (w == Workload::MicroMalloc) elapsed = ns(clock::now() - t0);
            for (auto a : scratch) m.free(a);
            return w == Workload::MicroMalloc ? elapsed : ns(clock::now() - t0);
        }
        default: throw Error(ErrorCode::InvalidArgument, "not a micro workload");
    }
}

// ---- backends --------------------------------------------------------------

/// One XOS cell and its runtime on a private kernel.
struct XosWorld {
    std::unique_ptr<Kernel> kernel;
    std::vector<std::unique_ptr<CellRuntime>> cells;

    XosWorld(std::uint64_t pool_bytes, unsigned cells_n, std::uint64_t grant_bytes) {
        KernelConfig c;
        c.pool_bytes = pool_bytes;
        c.num_cpus = cells_n;
        if (pool_bytes / kPageSize < std::uint64_t{cells_n} * c.refill_quantum * 8) c.refill_quantum = 0;
        kernel = Kernel::reserve_boot_pool(c);
        for (unsigned i = 0; i < cells_n; ++i) {
            LaunchSpec s;
            s.requested_bytes = grant_bytes;
            s.home_cpu = i;
            auto id = kernel->launch_cell(s).cell_id;
            cells.push_back(std::make_unique<CellRuntime>(*kernel, id));
        }
    }
};

/// Throws InvalidState when the kernel's frame sweep finds a violation.
inline void audit_or_throw(const Kernel& k) {
    const auto report = k.audit();
    if (report.ok()) return;
    std::string what = "kernel audit failed";
    if (!report.conservation_ok()) what += ": frames do not reconcile";
    for (const auto& v : report.violations) what += "; " + v;
    throw Error(ErrorCode::InvalidState, what);
}

struct SharedWorld {
    std::unique_ptr<SharedKernel> kernel;
    std::vector<std::unique_ptr<SharedProcess>> procs;

    SharedWorld(std::uint64_t pool_bytes, unsigned procs_n) : kernel(std::make_unique<SharedKernel>(pool_bytes)) {
        for (unsigned i = 0; i < procs_n; ++i) procs.push_back(std::make_unique<SharedProcess>(*kernel));
    }
};

inline unsigned host_cpus() noexcept { return std::max(1u, std::thread::hardware_concurrency()); }

/// Pins the calling thread to `cpu` modulo the host CPU count.
inline bool pin_current_thread(unsigned cpu) noexcept {
    cpu_set_t set;
    CPU_ZERO(&set);
    CPU_SET(cpu % host_cpus(), &set);
    return pthread_setaffinity_np(pthread_self(), sizeof(set), &set) == 0;
}

// ---- microbenchmarks -----------------------------------------------------

template <class Mem>
ReportRow measure_micro(Mem& m, const ExperimentSpec& spec, std::uint64_t size) {
    ReportRow row;
    row.experiment = std::string(to_string(spec.workload));
    row.mode = spec.mode;
    row.threads = 1;
    row.size_bytes = size;
    std::vector<Vaddr> scratch;
    // warm-up run: grows the cell heap to the working set before measuring
    run_micro_op(m, spec.workload, make_micro_trace(spec.seed, size, 0), scratch);

    std::vector<std::uint64_t> samples;
    samples.reserve(spec.runs * spec.iterations);
    const auto before = m.counters();
    double total_ns = 0;
    for (unsigned run = 0; run < spec.runs; ++run) {
        const auto trace = make_micro_trace(spec.seed, size, run + 1);
        for (std::uint64_t i = 0; i < spec.iterations; ++i) {
            const auto ns = run_micro_op(m, spec.workload, trace, scratch);
            samples.push_back(ns);
            total_ns += static_cast<double>(ns);
        }
    }
    row.counters = m.counters() - before;
    row.latency = summarize(samples);
    row.throughput_ops_s = total_ns > 0 ? static_cast<double>(samples.size()) * 1e9 / total_ns : 0;
    return row;
}

/// Runs a micro workload over the size sweep in the spec's mode.
inline std::vector<ReportRow> run_micro(const ExperimentSpec& spec) {
    spec.validate();
    if (!is_micro(spec.workload)) throw Error(ErrorCode::InvalidArgument, "run_micro needs a MICRO_* workload");
    std::vector<ReportRow> rows;
    if (spec.iterations == 0 || spec.runs == 0) return rows;

    std::uint64_t largest = 0;
    for (auto s : spec.size_sweep) {
        if (s <= spec.sweep_cap()) largest = std::max(largest, s);
    }
    std::unique_ptr<XosWorld> xos;
    std::unique_ptr<SharedWorld> shared;
    if (largest > 0) {
        if (spec.mode == Mode::Xos) {
            // the initial grant covers the working set, so measured runs never refill
            const std::uint64_t grant =
                std::min({std::bit_ceil(2 * largest), frames_in_order(kKernelMaxOrder) * kPageSize,
                          std::bit_floor(spec.pool_bytes / 2)});
            xos = std::make_unique<XosWorld>(spec.pool_bytes, 1, grant);
        } else {
            shared = std::make_unique<SharedWorld>(spec.pool_bytes, 1);
        }
    }
    for (auto size : spec.size_sweep) {
        if (size > spec.sweep_cap()) {
            ReportRow r;
            r.experiment = std::string(to_string(spec.workload));
            r.mode = spec.mode;
            r.size_bytes = size;
            r.skipped = true;
            rows.push_back(r);
            continue;
        }
        rows.push_back(xos ? measure_micro(*xos->cells[0], spec, size) : measure_micro(*shared->procs[0], spec, size));
    }
    if (xos) audit_or_throw(*xos->kernel);
    return rows;
}

// ---- scalability ---------------------------------------------------------

/// Per-thread state for the scalability workloads.
template <class Mem>
struct ScaleWorker {
    Mem& mem;
    Workload workload;
    std::uint64_t op_bytes;
    Vaddr fault_region = 0;
    std::uint64_t fault_next = 0;
    std::uint64_t fault_pages = 0;

    void op() {
        const std::uint64_t pages = op_bytes / kPageSize;
        switch (workload) {
            case Workload::ScaleBrk: {
                const Vaddr base = mem.sbrk(static_cast<std::int64_t>(op_bytes));
                for (std::uint64_t p = 0; p < pages; ++p) mem.touch(base + p * kPageSize, AccessKind::Write, 1);
                mem.sbrk(-static_cast<std::int64_t>(op_bytes));
                break;
            }
            case Workload::ScaleMmap: {
                const Vaddr base = mem.mmap(op_bytes, PagingPolicy::DemandPaging);
                for (std::uint64_t p = 0; p < pages; ++p) mem.touch(base + p * kPageSize, AccessKind::Write, 1);
                mem.munmap(base);
                break;
            }
            case Workload::ScalePagefault: {
                if (fault_next == fault_pages) {
                    if (fault_region) mem.munmap(fault_region);
                    fault_pages = 4096;
                    fault_region = mem.mmap(fault_pages * kPageSize, PagingPolicy::DemandPaging);
                    fault_next = 0;
                }
                mem.touch(fault_region + fault_next++ * kPageSize, AccessKind::Write, 1);
                break;
            }
            case Workload::MicroMalloc:
            case Workload::MicroMallocFree: {
                const Vaddr a = mem.malloc(op_bytes);
                for (std::uint64_t p = 0; p < pages; ++p) mem.touch(a + p * kPageSize, AccessKind::Write, 1);
                mem.free(a);
                break;
            }
            default: throw Error(ErrorCode::InvalidArgument, "workload has no scalability form");
        }
    }

    void finish() {
        if (fault_region) mem.munmap(fault_region);
        fault_region = 0;
    }
};

namespace detail {

/// Wake/wait ping between two fibers of one cell; one op is one round trip.
inline FiberTask ping_side(FiberScheduler& s, FiberEvent& mine, FiberEvent& other, std::uint64_t rounds,
                           bool starts) {
    for (std::uint64_t i = 0; i < rounds; ++i) {
        if (starts) {
            other.notify();
            co_await mine.wait(s, i);
        } else {
            co_await other.wait(s, i);
            mine.notify();
        }
    }
}

inline void fiber_pings(std::uint64_t rounds) {
    FiberScheduler s;
    FiberEvent a, b;
    s.spawn(ping_side(s, a, b, rounds, true));
    s.spawn(ping_side(s, a, b, rounds, false));
    s.run();
}

/// Baseline futex round trip: a wait and a wake, each a kernel crossing that
/// takes the shared hash-bucket lock.
inline void shared_pings(SharedKernel& k, EventCounters& c, std::uint64_t rounds) {
    for (std::uint64_t i = 0; i < rounds; ++i) {
        kernel_crossing(c);
        k.with_lock(c, [](BuddyAllocator&) {});
        kernel_crossing(c);
        k.with_lock(c, [](BuddyAllocator&) {});
    }
}

}  // namespace detail

struct ScaleMeasurement {
    double ops_per_s = 0;
    std::vector<std::uint64_t> latencies;
    CounterSnapshot counters;
};

/// Aggregate throughput of `threads` workers, each doing `iterations` ops.
inline ScaleMeasurement measure_scale(Mode mode, Workload w, unsigned threads, std::uint64_t iterations,
                                      std::uint64_t op_bytes, std::uint64_t pool_bytes) {
    using clock = std::chrono::steady_clock;
    ScaleMeasurement out;
    std::unique_ptr<XosWorld> xos;
    std::unique_ptr<SharedWorld> shared;
    std::vector<EventCounters> ping_counters(threads);
    if (mode == Mode::Xos) {
        xos = std::make_unique<XosWorld>(pool_bytes, threads, kRuntimeChunkBytes);
    } else {
        shared = std::make_unique<SharedWorld>(pool_bytes, threads);
    }
    std::vector<std::vector<std::uint64_t>> lat(threads);
    std::vector<CounterSnapshot> before(threads), after(threads);
    std::barrier sync(static_cast<std::ptrdiff_t>(threads) + 1);
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            int arrived = 0;
            try {
                pin_current_thread(t);
                auto body = [&](auto& mem) {
                    ScaleWorker<std::remove_reference_t<decltype(mem)>> worker{mem, w, op_bytes};
                    // warm-up outside the window
                    if (w != Workload::ScaleFutexlike) {
                        for (int i = 0; i < 8; ++i) worker.op();
                    }
                    before[t] = mem.counters();
                    sync.arrive_and_wait();
                    ++arrived;
                    auto& mine = lat[t];
                    mine.reserve(iterations);
                    for (std::uint64_t i = 0; i < iterations; ++i) {
                        const auto t0 = clock::now();
                        if (w == Workload::ScaleFutexlike) {
                            if (mode == Mode::Xos) {
                                detail::fiber_pings(1);
                            } else {
                                detail::shared_pings(*shared->kernel, ping_counters[t], 1);
                            }
                        } else {
                            worker.op();
                        }
                        mine.push_back(static_cast<std::uint64_t>(
                            std::chrono::duration_cast<std::chrono::nanoseconds>(clock::now() - t0).count()));
                    }
                    sync.arrive_and_wait();
                    ++arrived;
                    after[t] = mem.counters();
                    worker.finish();
                };
                if (xos) {
                    body(*xos->cells[t]);
                } else {
                    body(*shared->procs[t]);
                }
            } catch (...) {
                errors[t] = std::current_exception();
                if (arrived < 2) sync.arrive_and_drop();
            }
        });
    }
    sync.arrive_and_wait();
    const auto start = clock::now();
    sync.arrive_and_wait();
    const auto end = clock::now();
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    if (xos) audit_or_throw(*xos->kernel);
    const double secs = std::chrono::duration<double>(end - start).count();
    out.ops_per_s = secs > 0 ? static_cast<double>(iterations * threads) / secs : 0;
    for (unsigned t = 0; t < threads; ++t) {
        out.counters += after[t] - before[t];
        out.counters += ping_counters[t].snapshot();
        out.latencies.insert(out.latencies.end(), lat[t].begin(), lat[t].end());
    }
    return out;
}

/// Throughput at 1..spec.threads workers in the spec's mode. The op size is
/// the first sweep point.
inline std::vector<ReportRow> run_scalability(const ExperimentSpec& spec, std::ostream* warn = &std::cerr) {
    spec.validate();
    std::vector<ReportRow> rows;
    if (spec.iterations == 0) return rows;
    if (spec.threads > host_cpus() && warn) {
        *warn << "warning: " << spec.threads << " threads on " << host_cpus()
              << " CPUs; workers are oversubscribed\n";
    }
    const std::uint64_t op_bytes = spec.size_sweep.empty() ? 4 * KiB : spec.size_sweep.front();
    for (unsigned n = 1; n <= spec.threads; ++n) {
        auto m = measure_scale(spec.mode, spec.workload, n, spec.iterations, op_bytes, spec.pool_bytes);
        ReportRow r;
        r.experiment = std::string(to_string(spec.workload));
        r.mode = spec.mode;
        r.threads = n;
        r.size_bytes = op_bytes;
        r.throughput_ops_s = m.ops_per_s;
        r.latency = summarize(m.latencies);
        r.counters = m.counters;
        rows.push_back(r);
    }
    return rows;
}

// ---- isolation -----------------------------------------------------------

struct IsolationOptions {
    unsigned stress_cells = 3;
    std::uint64_t stress_bytes = 32 * MiB;
    double rate = 150;          // requests per second
    double duration_s = 10;
    std::uint64_t request_bytes = 256 * KiB;
    std::uint64_t seed = 1;
    std::uint64_t pool_bytes = 2 * GiB;
    std::filesystem::path sandbox_dir;  // I/O echo target; a temp dir when empty
};

struct LatencySample {
    std::uint64_t request_id = 0;
    std::int64_t start_ns = 0;  // scheduled arrival
    std::int64_t end_ns = 0;
    double normalized_latency = 0;

    std::uint64_t latency_ns() const noexcept { return static_cast<std::uint64_t>(end_ns - start_ns); }
};

struct IsolationRun {
    Mode mode = Mode::Xos;
    std::vector<LatencySample> samples;
    CounterSnapshot victim_counters;
    std::uint64_t stress_ops = 0;
    bool saturated = false;
    double achieved_rate = 0;
};

struct IsolationResult {
    std::vector<IsolationRun> runs;
    std::vector<ReportRow> rows;

    const IsolationRun* run(Mode m) const {
        for (const auto& r : runs) {
            if (r.mode == m) return &r;
        }
        return nullptr;
    }
};

/// Poisson arrival offsets in nanoseconds from the start of the window.
inline std::vector<std::int64_t> poisson_arrivals(std::uint64_t seed, double rate, double duration_s) {
    std::vector<std::int64_t> out;
    if (rate <= 0 || duration_s <= 0) return out;
    std::mt19937_64 rng(seed);
    std::exponential_distribution<double> gap(rate);
    double t = 0;
    while (true) {
        t += gap(rng);
        if (t >= duration_s) break;
        out.push_back(static_cast<std::int64_t>(t * 1e9));
    }
    return out;
}

namespace detail {

template <class Mem>
void stress_loop(Mem& mem, std::uint64_t bytes, const std::atomic<bool>& stop, std::atomic<std::uint64_t>& ops) {
    const std::uint64_t pages = bytes / kPageSize;
    while (!stop.load(std::memory_order_relaxed)) {
        std::vector<Vaddr> chunks;
        for (std::uint64_t left = bytes; left > 0;) {
            const auto c = std::min(left, kRuntimeChunkBytes);
            chunks.push_back(mem.malloc(c));
            left -= c;
        }
        for (std::uint64_t p = 0; p < pages && !stop.load(std::memory_order_relaxed); ++p) {
            mem.touch(chunks[p / kChunkPages] + (p % kChunkPages) * kPageSize, AccessKind::Write, 1);
        }
        for (auto c : chunks) mem.free(c);
        ops.fetch_add(1, std::memory_order_relaxed);
    }
}

}  // namespace detail

/// Latency-critical request loop next to `stress_cells` memory hogs, in one
/// mode. Each request allocates, touches and frees `request_bytes`, then
/// issues one message-based write (a direct crossing + write in baseline).
inline IsolationRun run_isolation_mode(Mode mode, const IsolationOptions& opt) {
    using clock = std::chrono::steady_clock;
    IsolationRun out;
    out.mode = mode;
    const unsigned cells = opt.stress_cells + 1;
    const std::uint64_t stress_grant = std::bit_ceil(std::max(opt.stress_bytes, kRuntimeChunkBytes));
    const auto arrivals = poisson_arrivals(opt.seed, opt.rate, opt.duration_s);

    std::filesystem::path sandbox = opt.sandbox_dir;
    const bool temp_sandbox = sandbox.empty();
    if (temp_sandbox) {
        sandbox = std::filesystem::temp_directory_path() /
                  ("xcell-isolation-" + std::to_string(::getpid()) + "-" + std::string(to_string(mode)));
    }
    std::filesystem::create_directories(sandbox);

    std::unique_ptr<XosWorld> xos;
    std::unique_ptr<SharedWorld> shared;
    std::unique_ptr<IoEngine> engine;
    int direct_fd = -1;
    int cell_fd = -1;
    CellId victim_id{};
    if (mode == Mode::Xos) {
        xos = std::make_unique<XosWorld>(opt.pool_bytes, cells, stress_grant);
        victim_id = xos->cells[0]->id();
        IoEngineConfig ic;
        ic.sandbox_dir = sandbox;
        ic.servers = 1;
        engine = std::make_unique<IoEngine>(*xos->kernel, ic);
        engine->attach_cell(victim_id);
        engine->start();
        auto r = engine->call(victim_id, IoRequest::open("victim.log", O_CREAT | O_WRONLY | O_TRUNC));
        if (!r.ok()) throw Error(ErrorCode::Io, "victim cannot open its log");
        cell_fd = static_cast<int>(r.result);
    } else {
        shared = std::make_unique<SharedWorld>(opt.pool_bytes, cells);
        direct_fd = ::open((sandbox / "victim.log").c_str(), O_CREAT | O_WRONLY | O_TRUNC | O_CLOEXEC, 0644);
        if (direct_fd < 0) throw Error(ErrorCode::Io, "victim cannot open its log");
    }
    const std::string echo(64, 'e');
    EventCounters direct_io;

    auto request = [&](auto& mem) {
        const std::uint64_t pages = opt.request_bytes / kPageSize;
        const Vaddr a = mem.malloc(opt.request_bytes);
        for (std::uint64_t p = 0; p < pages; ++p) mem.touch(a + p * kPageSize, AccessKind::Write, 1);
        mem.free(a);
        if (engine) {
            engine->call(victim_id, IoRequest::write(cell_fd, echo));
        } else {
            kernel_crossing(direct_io);
            if (::write(direct_fd, echo.data(), echo.size()) < 0) throw Error(ErrorCode::Io, "echo write failed");
        }
    };

    std::atomic<bool> stop{false};
    std::atomic<std::uint64_t> stress_ops{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    std::vector<std::thread> stress;
    const bool pin = host_cpus() >= cells;
    for (unsigned i = 1; i < cells; ++i) {
        stress.emplace_back([&, i] {
            if (pin) pin_current_thread(i);
            try {
                if (xos) {
                    detail::stress_loop(*xos->cells[i], opt.stress_bytes, stop, stress_ops);
                } else {
                    detail::stress_loop(*shared->procs[i], opt.stress_bytes, stop, stress_ops);
                }
            } catch (...) {
                std::lock_guard g(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    }

    std::thread victim([&] {
        if (pin) pin_current_thread(0);
        auto body = [&](auto& mem) {
            request(mem);  // warm-up
            const auto before = mem.counters();
            const auto t0 = clock::now();
            out.samples.reserve(arrivals.size());
            for (std::size_t i = 0; i < arrivals.size(); ++i) {
                const auto due = t0 + std::chrono::nanoseconds(arrivals[i]);
                std::this_thread::sleep_until(due);
                request(mem);
                const auto end = clock::now();
                LatencySample s;
                s.request_id = i;
                s.start_ns = arrivals[i];
                s.end_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(end - t0).count();
                out.samples.push_back(s);
            }
            out.victim_counters = mem.counters() - before;
            const double elapsed = std::chrono::duration<double>(clock::now() - t0).count();
            out.achieved_rate = elapsed > 0 ? static_cast<double>(arrivals.size()) / elapsed : 0;
            // backlog: the loop overran its window by more than 10%
            out.saturated = elapsed > opt.duration_s * 1.1;
        };
        try {
            if (xos) {
                body(*xos->cells[0]);
            } else {
                body(*shared->procs[0]);
            }
        } catch (...) {
            std::lock_guard g(error_mutex);
            if (!error) error = std::current_exception();
        }
    });
    victim.join();
    stop.store(true);
    for (auto& t : stress) t.join();
    if (error) {
        if (engine) engine->stop();
        if (direct_fd >= 0) ::close(direct_fd);
        std::rethrow_exception(error);
    }
    out.stress_ops = stress_ops.load();
    if (engine) {
        out.victim_counters.io_messages = xos->kernel->counters(victim_id).io_messages;
        engine->call(victim_id, IoRequest::close(cell_fd));
        engine->stop();
        audit_or_throw(*xos->kernel);
    }
    if (direct_fd >= 0) ::close(direct_fd);
    if (temp_sandbox) {
        std::error_code ec;
        std::filesystem::remove_all(sandbox, ec);
    }
    return out;
}

/// Runs the isolation experiment in each requested mode with the same seed,
/// then normalizes every latency to the largest seen across all modes.
inline IsolationResult run_isolation(const IsolationOptions& opt, std::vector<Mode> modes = {Mode::Xos, Mode::Shared},
                                     std::ostream* warn = &std::cerr) {
    if (host_cpus() < 2 && warn) {
        *warn << "warning: isolation expects at least 2 CPUs; this host has " << host_cpus()
              << ", so all cells time-share one CPU\n";
    }
    IsolationResult res;
    std::uint64_t worst = 0;
    for (auto m : modes) {
        res.runs.push_back(run_isolation_mode(m, opt));
        for (const auto& s : res.runs.back().samples) worst = std::max(worst, s.latency_ns());
    }
    for (auto& run : res.runs) {
        std::vector<std::uint64_t> lat;
        for (auto& s : run.samples) {
            s.normalized_latency = worst ? static_cast<double>(s.latency_ns()) / static_cast<double>(worst) : 0;
            lat.push_back(s.latency_ns());
        }
        ReportRow r;
        r.experiment = "ISOLATION";
        r.mode = run.mode;
        r.threads = opt.stress_cells + 1;
        r.size_bytes = opt.request_bytes;
        r.throughput_ops_s = run.achieved_rate;
        r.latency = summarize(lat);
        r.counters = run.victim_counters;
        r.saturated = run.saturated;
        res.rows.push_back(r);
    }
    return res;
}

/// CDF table: one line per sample in latency order.
inline void write_cdf(std::ostream& out, const IsolationResult& res) {
    out << "mode,latency_ns,normalized_latency,cumulative_fraction\n";
    for (const auto& run : res.runs) {
        std::vector<const LatencySample*> sorted;
        for (const auto& s : run.samples) sorted.push_back(&s);
        std::sort(sorted.begin(), sorted.end(),
                  [](auto* a, auto* b) { return a->latency_ns() < b->latency_ns(); });
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            out << to_string(run.mode) << ',' << sorted[i]->latency_ns() << ',' << std::setprecision(6)
                << sorted[i]->normalized_latency << ',' << static_cast<double>(i + 1) / static_cast<double>(sorted.size())
                << '\n';
        }
    }
}

}  // namespace xcell::bench
