#include <gtest/gtest.h>

#include <sstream>

#include "temp_dir.hpp"
#include "xcell/io_trace.hpp"

using namespace xcell;
using xcell::testing::TempDir;

TEST(Fnv1a, PublishedVectors) {
    EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ull);
    EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cull);
    EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ull);
}

TEST(TraceGenerator, DeterministicAndBalanced) {
    auto a = generate_io_trace(5, 2000);
    auto b = generate_io_trace(5, 2000);
    ASSERT_EQ(a.size(), 2000u);
    std::map<int, int> open;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].call, b[i].call);
        EXPECT_EQ(a[i].handle, b[i].handle);
        EXPECT_EQ(a[i].fill_seed, b[i].fill_seed);
        if (a[i].call == Syscall::Open) {
            open[a[i].handle] = 1;
        } else {
            ASSERT_TRUE(open.contains(a[i].handle)) << "op " << i << " uses a closed handle";
            if (a[i].call == Syscall::Close) open.erase(a[i].handle);
        }
    }
    EXPECT_TRUE(open.empty());
    const auto other = generate_io_trace(6, 2000);
    bool differs = false;
    for (std::size_t i = 0; i < other.size() && !differs; ++i) {
        differs = other[i].call != a[i].call || other[i].len != a[i].len || other[i].path != a[i].path;
    }
    EXPECT_TRUE(differs);
}

TEST(TraceEquivalence, EngineMatchesDirectExecution) {
    TempDir root("xcell-trace");
    KernelConfig kc;
    kc.pool_bytes = 64 * MiB;
    auto kernel = Kernel::reserve_boot_pool(kc);
    IoEngineConfig ic;
    ic.sandbox_dir = root / "engine";
    ic.audit = true;
    IoEngine engine(*kernel, ic);
    auto cell = kernel->launch_cell(LaunchSpec{}).cell_id;
    auto& ring = engine.attach_cell(cell);
    engine.start();

    const auto trace = generate_io_trace(42, 2000);
    DirectExecutor direct(root / "direct");
    EngineExecutor via(engine, cell);
    std::ostringstream direct_csv, engine_csv;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const auto d = direct.execute(trace[i]);
        const auto e = via.execute(trace[i]);
        ASSERT_EQ(d.result, e.result) << "op " << i;
        ASSERT_EQ(d.errcode, e.errcode) << "op " << i;
        ASSERT_EQ(d.payload, e.payload) << "op " << i;
        write_trace_line(direct_csv, i, trace[i], d);
        write_trace_line(engine_csv, i, trace[i], e);
    }
    engine.stop();
    EXPECT_EQ(direct_csv.str(), engine_csv.str());
    EXPECT_TRUE(compare_directories(root / "direct", root / "engine").empty());
    EXPECT_TRUE(ring.audit_violations().empty());
    EXPECT_EQ(ring.issued(), trace.size());
    EXPECT_EQ(ring.issued(), ring.completed() + ring.failed() + ring.in_flight());
    EXPECT_EQ(ring.in_flight(), 0u);
}

TEST(TraceCsv, RoundTripsThroughReader) {
    TempDir root("xcell-trace");
    const auto trace = generate_io_trace(9, 300);
    DirectExecutor direct(root / "d");
    std::ostringstream csv;
    for (std::size_t i = 0; i < trace.size(); ++i) write_trace_line(csv, i, trace[i], direct.execute(trace[i]));
    std::istringstream in(csv.str());
    const auto back = read_trace(in);
    ASSERT_EQ(back.size(), trace.size());
    for (std::size_t i = 0; i < trace.size(); ++i) {
        EXPECT_EQ(back[i].call, trace[i].call);
        EXPECT_EQ(back[i].path, trace[i].path);
        EXPECT_EQ(back[i].flags, trace[i].flags);
        EXPECT_EQ(back[i].len, trace[i].len);
        EXPECT_EQ(back[i].fill_seed, trace[i].fill_seed);
    }
    // replaying the parsed trace reproduces the same files
    DirectExecutor replay(root / "r");
    for (const auto& op : back) replay.execute(op);
    EXPECT_TRUE(compare_directories(root / "d", root / "r").empty());
}

TEST(CompareDirectories, ReportsDifferences) {
    TempDir a("xcell-cmp"), b("xcell-cmp");
    std::ofstream(a / "x") << "1";
    std::ofstream(b / "x") << "2";
    std::ofstream(a / "only") << "";
    auto d = compare_directories(a.path(), b.path());
    EXPECT_EQ(d.size(), 2u);
}
