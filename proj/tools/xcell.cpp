// xcell: desk-scale experiments comparing partitioned cells with a
// shared-kernel baseline.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "xcell/bench.hpp"
#include "xcell/config.hpp"
#include "xcell/io_trace.hpp"

namespace {

using namespace xcell;
using namespace xcell::bench;

constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitInvariant = 3;

struct BenchArgs {
    std::string workload;
    std::string mode = "both";
    unsigned threads = 1;
    std::string sizes = "4K..64M";
    std::uint64_t iters = 1;
    unsigned runs = 10;
    std::uint64_t seed = 1;
    std::string pool_bytes = "2G";
    std::string max_sweep;
    std::string out;
    std::string config;
};

struct IsolationArgs {
    unsigned stress_cells = 3;
    std::string stress_bytes = "32M";
    std::string request_bytes = "256K";
    double rate = 150;
    double duration = 10;
    std::uint64_t seed = 1;
    std::string pool_bytes = "2G";
    std::string mode = "both";
    std::string out;
    std::string cdf;
    std::string config;
};

struct TraceArgs {
    std::uint64_t seed = 1;
    std::uint64_t ops = 10000;
    std::string out;
    std::string sandbox;
    std::string replay;
    std::string direct_dir;
};

std::vector<Mode> modes_of(const std::string& m) {
    if (m == "both") return {Mode::Xos, Mode::Shared};
    return {parse_mode(m)};
}

// Values from a config file win over command-line flags.
void apply_config(BenchArgs& a) {
    if (a.config.empty()) return;
    const auto kv = KeyValueConfig::load(a.config);
    if (auto v = kv.get("workload")) a.workload = *v;
    if (auto v = kv.get("mode")) a.mode = *v;
    if (auto v = kv.get_uint("threads")) a.threads = static_cast<unsigned>(*v);
    if (auto v = kv.get("sizes")) a.sizes = *v;
    if (auto v = kv.get_uint("iters")) a.iters = *v;
    if (auto v = kv.get_uint("runs")) a.runs = static_cast<unsigned>(*v);
    if (auto v = kv.get_uint("seed")) a.seed = *v;
    if (auto v = kv.get("pool_bytes")) a.pool_bytes = *v;
    if (auto v = kv.get("max_sweep")) a.max_sweep = *v;
    if (auto v = kv.get("out")) a.out = *v;
}

void apply_config(IsolationArgs& a) {
    if (a.config.empty()) return;
    const auto kv = KeyValueConfig::load(a.config);
    if (auto v = kv.get_uint("stress_cells")) a.stress_cells = static_cast<unsigned>(*v);
    if (auto v = kv.get("stress_bytes")) a.stress_bytes = *v;
    if (auto v = kv.get("request_bytes")) a.request_bytes = *v;
    if (auto v = kv.get_double("rate")) a.rate = *v;
    if (auto v = kv.get_double("duration")) a.duration = *v;
    if (auto v = kv.get_uint("seed")) a.seed = *v;
    if (auto v = kv.get("pool_bytes")) a.pool_bytes = *v;
    if (auto v = kv.get("mode")) a.mode = *v;
    if (auto v = kv.get("out")) a.out = *v;
    if (auto v = kv.get("cdf")) a.cdf = *v;
}

int finish(const std::vector<ReportRow>& rows, const std::string& out) {
    if (rows.empty()) {
        std::cout << "no rows (zero iterations)\n";
        return 0;
    }
    if (out.empty()) {
        emit_csv(std::cout, rows);
    } else {
        write_report(out, rows);
        std::cout << "wrote " << out << '\n';
    }
    std::cout << '\n';
    emit_summary(std::cout, rows);
    const auto bad = check_rows(rows);
    for (const auto& b : bad) std::cerr << "invariant violated: " << b << '\n';
    return bad.empty() ? 0 : kExitInvariant;
}

IsolationOptions isolation_options(const IsolationArgs& a) {
    IsolationOptions o;
    o.stress_cells = a.stress_cells;
    o.stress_bytes = parse_bytes(a.stress_bytes);
    o.request_bytes = parse_bytes(a.request_bytes);
    o.rate = a.rate;
    o.duration_s = a.duration;
    o.seed = a.seed;
    o.pool_bytes = parse_bytes(a.pool_bytes);
    return o;
}

int run_isolation_cmd(const IsolationArgs& a) {
    const auto res = run_isolation(isolation_options(a), modes_of(a.mode));
    if (!a.cdf.empty()) {
        std::ofstream cdf(a.cdf);
        if (!cdf) throw Error(ErrorCode::Io, "cannot write " + a.cdf);
        write_cdf(cdf, res);
    }
    const auto* x = res.run(Mode::Xos);
    const auto* s = res.run(Mode::Shared);
    int rc = finish(res.rows, a.out);
    if (x && x->victim_counters.kernel_lock_acquisitions != 0) {
        std::cerr << "invariant violated: victim cell took " << x->victim_counters.kernel_lock_acquisitions
                  << " kernel locks\n";
        rc = kExitInvariant;
    }
    if (x && s) {
        const auto px = res.rows[0].latency.p99;
        const auto ps = res.rows[1].latency.p99;
        std::cout << "p99 shared/xos = " << std::fixed << std::setprecision(2)
                  << (px ? static_cast<double>(ps) / static_cast<double>(px) : 0.0) << "\n";
    }
    for (const auto& r : res.rows) {
        if (r.saturated) std::cerr << "warning: " << to_string(r.mode) << " victim could not keep the arrival rate\n";
    }
    return rc;
}

int run_bench_cmd(BenchArgs a) {
    apply_config(a);
    const auto workload = parse_workload(a.workload);
    if (workload == Workload::Isolation) {
        IsolationArgs i;
        i.mode = a.mode;
        i.seed = a.seed;
        i.pool_bytes = a.pool_bytes;
        i.out = a.out;
        return run_isolation_cmd(i);
    }
    ExperimentSpec spec;
    spec.workload = workload;
    spec.threads = a.threads;
    spec.size_sweep = parse_size_sweep(a.sizes);
    spec.iterations = a.iters;
    spec.runs = a.runs;
    spec.seed = a.seed;
    spec.pool_bytes = parse_bytes(a.pool_bytes);
    if (!a.max_sweep.empty()) spec.max_sweep_bytes = parse_bytes(a.max_sweep);
    std::vector<ReportRow> rows;
    for (auto m : modes_of(a.mode)) {
        spec.mode = m;
        auto part = is_micro(workload) && spec.threads == 1 ? run_micro(spec) : run_scalability(spec);
        rows.insert(rows.end(), part.begin(), part.end());
    }
    return finish(rows, a.out);
}

int run_trace_cmd(const TraceArgs& a) {
    namespace fs = std::filesystem;
    std::vector<TraceOp> ops;
    if (!a.replay.empty()) {
        std::ifstream in(a.replay);
        if (!in) throw Error(ErrorCode::Io, "cannot read " + a.replay);
        ops = read_trace(in);
    } else {
        ops = generate_io_trace(a.seed, a.ops);
    }
    const fs::path sandbox = a.sandbox.empty() ? fs::temp_directory_path() / "xcell-trace-engine" : fs::path(a.sandbox);
    const fs::path direct = a.direct_dir.empty() ? fs::temp_directory_path() / "xcell-trace-direct" : fs::path(a.direct_dir);
    for (const auto& d : {sandbox, direct}) {
        fs::remove_all(d);
        fs::create_directories(d);
    }

    auto kernel = Kernel::reserve_boot_pool(64 * MiB, 1);
    const CellId cell = kernel->launch_cell(LaunchSpec{}).cell_id;
    IoEngineConfig cfg;
    cfg.sandbox_dir = sandbox;
    cfg.audit = true;
    IoEngine engine(*kernel, cfg);
    auto& ring = engine.attach_cell(cell);
    engine.start();

    std::ofstream out;
    if (!a.out.empty()) {
        out.open(a.out);
        if (!out) throw Error(ErrorCode::Io, "cannot write " + a.out);
    }
    int mismatches = 0;
    {
        EngineExecutor via_engine(engine, cell);
        DirectExecutor via_posix(direct);
        std::uint64_t ticket = 0;
        for (const auto& op : ops) {
            const auto e = via_engine.execute(op);
            const auto d = via_posix.execute(op);
            if (e.result != d.result || e.errcode != d.errcode || e.payload != d.payload) ++mismatches;
            if (out.is_open()) write_trace_line(out, ticket, op, e);
            ++ticket;
        }
    }
    engine.stop();
    const auto diffs = compare_directories(sandbox, direct);
    for (const auto& d : diffs) std::cerr << d << '\n';
    std::cout << ops.size() << " ops, " << mismatches << " result mismatches, " << diffs.size()
              << " file differences, issued " << ring.issued() << ", completed " << ring.completed() << ", failed "
              << ring.failed() << ", audit violations " << ring.audit_violations().size() << '\n';
    const bool ok = mismatches == 0 && diffs.empty() && ring.audit_violations().empty() &&
                    ring.issued() == ring.completed() + ring.failed() && ring.in_flight() == 0;
    return ok ? 0 : kExitInvariant;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"xcell: partitioned cells vs a shared-kernel baseline"};
    app.require_subcommand(1);

    BenchArgs bench;
    auto* b = app.add_subcommand("bench", "micro or scalability workload");
    b->add_option("workload", bench.workload, "MICRO_SBRK, MICRO_MMAP, MICRO_MALLOC_FREE, MICRO_MALLOC, SCALE_BRK, "
                                              "SCALE_MMAP, SCALE_PAGEFAULT, SCALE_FUTEXLIKE or ISOLATION")
        ->required();
    b->add_option("--mode", bench.mode, "xos, shared or both")->capture_default_str();
    b->add_option("--threads", bench.threads, "workers; >1 sweeps 1..N")->capture_default_str();
    b->add_option("--sizes", bench.sizes, "sweep, e.g. 4K..1G or 4K,1M")->capture_default_str();
    b->add_option("--iters", bench.iters, "operations per run (micro) or per thread (scalability)")
        ->capture_default_str();
    b->add_option("--runs", bench.runs, "repetitions for micro workloads")->capture_default_str();
    b->add_option("--seed", bench.seed)->capture_default_str();
    b->add_option("--pool-bytes", bench.pool_bytes)->capture_default_str();
    b->add_option("--max-sweep", bench.max_sweep, "largest size honoured; default min(1G, pool/2)");
    b->add_option("--out", bench.out, "CSV report path; stdout when omitted");
    b->add_option("--config", bench.config, "key = value file; its values override flags");

    IsolationArgs iso;
    auto* i = app.add_subcommand("isolation", "victim latency next to memory-hungry stress cells");
    i->add_option("--stress-cells", iso.stress_cells)->capture_default_str();
    i->add_option("--stress-bytes", iso.stress_bytes)->capture_default_str();
    i->add_option("--request-bytes", iso.request_bytes)->capture_default_str();
    i->add_option("--rate", iso.rate, "requests per second")->capture_default_str();
    i->add_option("--duration", iso.duration, "seconds per mode")->capture_default_str();
    i->add_option("--seed", iso.seed)->capture_default_str();
    i->add_option("--pool-bytes", iso.pool_bytes)->capture_default_str();
    i->add_option("--mode", iso.mode, "xos, shared or both")->capture_default_str();
    i->add_option("--out", iso.out, "CSV report path");
    i->add_option("--cdf", iso.cdf, "CDF table path");
    i->add_option("--config", iso.config, "key = value file; its values override flags");

    TraceArgs trace;
    auto* t = app.add_subcommand("io-trace", "run a syscall trace through the I/O engine and directly, then compare");
    t->add_option("--seed", trace.seed)->capture_default_str();
    t->add_option("--ops", trace.ops)->capture_default_str();
    t->add_option("--replay", trace.replay, "trace file to replay instead of generating one");
    t->add_option("--out", trace.out, "write the engine-side trace here");
    t->add_option("--sandbox", trace.sandbox, "engine sandbox directory");
    t->add_option("--direct-dir", trace.direct_dir, "directory for direct execution");

    CLI11_PARSE(app, argc, argv);

    try {
        if (b->parsed()) return run_bench_cmd(bench);
        if (i->parsed()) {
            apply_config(iso);
            return run_isolation_cmd(iso);
        }
        if (t->parsed()) return run_trace_cmd(trace);
    } catch (const Error& e) {
        std::cerr << "xcell: " << e.what() << '\n';
        switch (e.code()) {
            case ErrorCode::Config:
            case ErrorCode::InvalidArgument: return kExitUsage;
            case ErrorCode::InvalidState: return kExitInvariant;
            default: return kExitError;
        }
    } catch (const std::exception& e) {
        std::cerr << "xcell: " << e.what() << '\n';
        return kExitError;
    }
    return 0;
}
