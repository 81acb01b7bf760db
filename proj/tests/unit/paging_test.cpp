#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "xcell/cell_runtime.hpp"

using namespace xcell;

namespace {

std::unique_ptr<Kernel> small_kernel(std::uint64_t bytes = 512 * MiB) {
    KernelConfig c;
    c.pool_bytes = bytes;
    c.refill_quantum = 0;
    return Kernel::reserve_boot_pool(c);
}

CellId launch(Kernel& k, std::uint64_t bytes, bool user_handler = true, std::uint64_t inherited = 0) {
    LaunchSpec s;
    s.requested_bytes = bytes;
    s.inherited_pages = inherited;
    if (!user_handler) s.privileged_features = FeatureSet{};
    return k.launch_cell(s).cell_id;
}

}  // namespace

TEST(PageTable, MapUnmapAndDoubleMap) {
    EmulatedPageTable t;
    t.map(10, 100);
    ASSERT_NE(t.find(10), nullptr);
    EXPECT_TRUE(t.find(10)->present());
    EXPECT_EQ(t.find(10)->frame, 100u);
    try {
        t.map(10, 101);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DoubleMap);
    }
    auto e = t.unmap(10);
    ASSERT_TRUE(e);
    EXPECT_EQ(e->frame, 100u);
    EXPECT_FALSE(t.unmap(10));
    EXPECT_EQ(t.size(), 0u);
}

TEST(PageTable, LockedEntriesCannotBeUnmapped) {
    EmulatedPageTable t;
    t.map(1, 1);
    t.map(2, 2);
    EXPECT_EQ(t.lock_all_present(), 2u);
    EXPECT_THROW(t.unmap(1), Error);
    EXPECT_TRUE(t.any_locked_frame_in(0, 3));
    EXPECT_FALSE(t.any_locked_frame_in(3, 10));
}

TEST(PageTable, MapCheckedRejectsFramesOutsideGrants) {
    GrantSet acl;
    acl.insert(PhysRange{64, 4, CellId{1}}, GrantOrigin{});
    EmulatedPageTable t;
    map_checked(t, acl, 1, 64);
    map_checked(t, acl, 2, 79);
    try {
        map_checked(t, acl, 3, 80);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::AclViolation);
    }
    EXPECT_FALSE(t.mapped(3));
}

TEST(PageTable, SyncIsIdempotentAndIncremental) {
    EmulatedPageTable t, shadow;
    for (Vpn v = 0; v < 100; ++v) t.map(v, v);
    t.sync_into(shadow);
    EXPECT_EQ(shadow, t);
    const auto epoch = shadow.epoch();
    t.sync_into(shadow);
    EXPECT_EQ(shadow.epoch(), epoch);
    EXPECT_EQ(shadow, t);

    t.unmap(5);
    t.map(500, 7);
    t.mark_dirty(6);
    t.sync_into(shadow);
    EXPECT_EQ(shadow, t);
    ASSERT_NE(shadow.find(6), nullptr);
    EXPECT_TRUE(shadow.find(6)->dirty());
}

TEST(PageTable, SyncSurvivesChangeLogOverflow) {
    EmulatedPageTable t, shadow;
    t.map(1, 1);
    t.sync_into(shadow);
    for (int round = 0; round < 5000; ++round) {
        t.map(2, 2);
        t.unmap(2);
    }
    t.map(3, 3);
    t.sync_into(shadow);
    EXPECT_EQ(shadow, t);
}

TEST(PageTable, RandomMapUnmapMatchesReferenceMap) {
    std::mt19937 rng(7);
    EmulatedPageTable t, shadow;
    std::map<Vpn, FrameIndex> ref;
    for (int op = 0; op < 20000; ++op) {
        Vpn v = rng() % 512;
        if (ref.contains(v)) {
            t.unmap(v);
            ref.erase(v);
        } else {
            t.map(v, v * 3);
            ref[v] = v * 3;
        }
        if (op % 97 == 0) {
            t.sync_into(shadow);
            ASSERT_EQ(shadow, t);
        }
    }
    ASSERT_EQ(t.size(), ref.size());
    for (auto [v, f] : ref) EXPECT_EQ(t.find(v)->frame, f);
}

TEST(FaultTrace, CsvHeaderAndRows) {
    std::ostringstream out;
    write_fault_trace_csv(out, CellId{3},
                          {{0x1000, FaultKind::NotPresent, FaultResolver::UserHandler, 120}});
    EXPECT_EQ(out.str(), "cell_id,vaddr,kind,resolved_by,latency_ns\n3,0x1000,not_present,user,120\n");
}

TEST(Faults, DemandRegionFaultsOncePerPage) {
    auto k = small_kernel();
    auto cell = launch(*k, 64 * MiB);
    CellRuntime rt(*k, cell);
    const Vaddr base = rt.mmap(64 * MiB, PagingPolicy::DemandPaging);
    for (std::uint64_t p = 0; p < 16384; ++p) rt.touch(base + p * kPageSize, AccessKind::Write, 1);
    auto c = rt.counters();
    EXPECT_EQ(c.user_faults, 16384u);
    EXPECT_EQ(c.kernel_faults, 0u);
    for (std::uint64_t p = 0; p < 16384; ++p) {
        EXPECT_EQ(rt.touch(base + p * kPageSize, AccessKind::Read), 1u);
    }
    EXPECT_EQ(rt.counters().user_faults, 16384u);
    EXPECT_EQ(rt.table().size(), 16384u);
}

TEST(Faults, PrePagedRegionNeverFaults) {
    auto k = small_kernel();
    auto cell = launch(*k, 64 * MiB);
    CellRuntime rt(*k, cell);
    const Vaddr base = rt.mmap(64 * MiB, PagingPolicy::PrePaging);
    for (std::uint64_t p = 0; p < 16384; ++p) rt.touch(base + p * kPageSize, AccessKind::Read);
    EXPECT_EQ(rt.counters().user_faults, 0u);
    EXPECT_EQ(rt.counters().kernel_faults, 0u);
}

TEST(Faults, PrefetchHandlerHalvesFaultCount) {
    auto k = small_kernel();
    auto cell = launch(*k, 8 * MiB);
    k->register_fault_handler(cell, prefetch_two_handler);
    CellRuntime rt(*k, cell);
    for (std::uint64_t pages : {1u, 2u, 255u, 256u}) {
        const auto before = rt.counters().user_faults;
        const Vaddr base = rt.mmap(pages * kPageSize, PagingPolicy::DemandPaging);
        for (std::uint64_t p = 0; p < pages; ++p) rt.touch(base + p * kPageSize, AccessKind::Read);
        EXPECT_EQ(rt.counters().user_faults - before, (pages + 1) / 2) << pages << " pages";
    }
}

TEST(Faults, WithoutUserHandlerKernelResolvesAndSyncs) {
    auto k = small_kernel();
    auto cell = launch(*k, 4 * MiB, false);
    CellRuntime rt(*k, cell);
    const Vaddr base = rt.mmap(16 * kPageSize, PagingPolicy::DemandPaging);
    for (int p = 0; p < 16; ++p) rt.touch(base + p * kPageSize, AccessKind::Write, 9);
    EXPECT_EQ(rt.counters().user_faults, 0u);
    EXPECT_EQ(rt.counters().kernel_faults, 16u);
    // the last write dirtied a page after the final sync
    k->handle_vmexit(cell, SyncTables{});
    EXPECT_TRUE(k->shadow_matches(cell));
}

TEST(Faults, TouchOutsideRegionsCrashesCell) {
    auto k = small_kernel();
    auto cell = launch(*k, 4 * MiB);
    CellRuntime rt(*k, cell);
    try {
        rt.touch(0xdead'0000, AccessKind::Read);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SegmentationFault);
    }
    EXPECT_EQ(k->state(cell), CellState::Crashed);
}

TEST(Faults, GuardPageBetweenRegionsIsUnmapped) {
    auto k = small_kernel();
    auto cell = launch(*k, 4 * MiB);
    CellRuntime rt(*k, cell);
    const Vaddr a = rt.mmap(kPageSize, PagingPolicy::PrePaging);
    const Vaddr b = rt.mmap(kPageSize, PagingPolicy::PrePaging);
    EXPECT_EQ(b - a, 2 * kPageSize);
    EXPECT_EQ(rt.region_at(a + kPageSize), nullptr);
}

TEST(Faults, FaultTraceRecordsResolver) {
    auto k = small_kernel();
    auto cell = launch(*k, 4 * MiB);
    CellRuntime rt(*k, cell);
    rt.enable_fault_trace(true);
    const Vaddr base = rt.mmap(4 * kPageSize, PagingPolicy::DemandPaging);
    for (int p = 0; p < 4; ++p) rt.touch(base + p * kPageSize, AccessKind::Read);
    ASSERT_EQ(rt.fault_trace().size(), 4u);
    EXPECT_EQ(rt.fault_trace()[2].vaddr, base + 2 * kPageSize);
    EXPECT_EQ(rt.fault_trace()[2].resolved_by, FaultResolver::UserHandler);
}

TEST(Shadow, TwoCellsKeepSeparateTables) {
    auto k = small_kernel();
    auto a = launch(*k, 4 * MiB);
    auto b = launch(*k, 4 * MiB);
    CellRuntime ra(*k, a), rb(*k, b);
    ra.malloc(8 * kPageSize, PagingPolicy::PrePaging);
    rb.malloc(3 * kPageSize, PagingPolicy::PrePaging);
    k->handle_vmexit(a, SyncTables{});
    k->handle_vmexit(b, SyncTables{});
    EXPECT_EQ(k->shadow_table(a).size(), 8u);
    EXPECT_EQ(k->shadow_table(b).size(), 3u);
    EXPECT_TRUE(k->shadow_matches(a));
    EXPECT_TRUE(k->shadow_matches(b));
    EXPECT_TRUE(k->audit().ok());

    // a cannot map b's frames
    auto vb = k->view(b);
    auto va = k->view(a);
    const FrameIndex foreign = vb.grants->ranges().front().start_frame;
    EXPECT_THROW(map_checked(*va.table, *va.grants, 0x9999, foreign), Error);
}

TEST(Shadow, GrowSyncsAtEveryExit) {
    auto k = small_kernel(1 * GiB);
    auto cell = launch(*k, 64 * MiB);
    CellRuntime rt(*k, cell);
    std::mt19937 rng(11);
    std::vector<Vaddr> live;
    for (int op = 0; op < 3000; ++op) {
        if (live.empty() || rng() % 2) {
            live.push_back(rt.malloc((1 + rng() % 8) * kPageSize, PagingPolicy::PrePaging));
        } else {
            std::size_t i = rng() % live.size();
            rt.free(live[i]);
            live.erase(live.begin() + static_cast<std::ptrdiff_t>(i));
        }
        if (op % 500 == 0) {
            ASSERT_TRUE(k->handle_vmexit(cell, Grow{64 * MiB}).ok);
            ASSERT_TRUE(k->shadow_matches(cell));
        }
    }
}

TEST(InheritedPages, LockedAndReclaimedOnCrash) {
    auto k = small_kernel();
    auto cell = launch(*k, 0, true, 10);
    CellRuntime rt(*k, cell);
    const Vaddr base = kInheritedBaseVpn << kPageShift;
    for (int p = 0; p < 10; ++p) rt.touch(base + p * kPageSize, AccessKind::Write, 5);
    EXPECT_EQ(rt.counters().user_faults, 0u);
    auto d = k->descriptor(cell);
    auto resp = k->handle_vmexit(cell, Shrink{*d.inherited_grant});
    EXPECT_EQ(resp.error, ErrorCode::LockedMapping);

    const auto free_before = k->kernel_free_frames();
    k->report_crash(cell);
    auto r = k->crash_replace(cell);
    EXPECT_EQ(k->kernel_free_frames(), free_before);  // same block handed back out
    EXPECT_EQ(k->cell_table(cell).size(), 10u);
    EXPECT_EQ(r.generation, 1u);
    EXPECT_THROW(rt.malloc(kPageSize), Error);  // the old runtime belongs to generation 0
}
