#include <gtest/gtest.h>

#include <random>

#include "bitmap_buddy_oracle.hpp"
#include "xcell/cell_runtime.hpp"

using namespace xcell;
using xcell::testing::BitmapBuddyOracle;

namespace {

std::unique_ptr<Kernel> make_kernel(std::uint64_t bytes = 2 * GiB) {
    KernelConfig c;
    c.pool_bytes = bytes;
    c.refill_quantum = 0;
    return Kernel::reserve_boot_pool(c);
}

CellId launch(Kernel& k, std::uint64_t bytes) {
    LaunchSpec s;
    s.requested_bytes = bytes;
    return k.launch_cell(s).cell_id;
}

}  // namespace

TEST(Malloc, ServedFromHeapWithoutVmexit) {
    auto k = make_kernel();
    auto cell = launch(*k, 64 * MiB);
    CellRuntime rt(*k, cell);
    const auto before = rt.counters();
    Vaddr a = rt.malloc(4 * KiB);
    EXPECT_NE(a, 0u);
    auto delta = rt.counters() - before;
    EXPECT_EQ(delta.vmexits, 0u);
    EXPECT_EQ(delta.kernel_lock_acquisitions, 0u);
    EXPECT_EQ(rt.heap_free_frames(), 16384u - 1);
}

TEST(Malloc, ZeroBytesIsInvalid) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 4 * MiB));
    try {
        rt.malloc(0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
    }
}

TEST(Malloc, SteadyStateRestoresFreeLists) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 64 * MiB));
    const auto initial = rt.heap_free_blocks();
    const auto before = rt.counters();
    for (int i = 0; i < 1000; ++i) rt.free(rt.malloc(4 * KiB));
    EXPECT_EQ(rt.heap_free_blocks(), initial);
    EXPECT_EQ((rt.counters() - before).vmexits, 0u);
}

TEST(Malloc, PlacementMatchesBitmapOracle) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 4 * MiB));
    const auto& grant = rt.backing_grants().front();
    BitmapBuddyOracle oracle(grant.start_frame, grant.frames(), kRuntimeMaxOrder);
    std::mt19937 rng(3);
    std::vector<Vaddr> live;
    for (int op = 0; op < 600; ++op) {
        if (live.empty() || rng() % 3) {
            const std::uint64_t bytes = (1 + rng() % 40) * kPageSize;
            auto want = oracle.allocate(order_for_bytes(bytes));
            if (!want) continue;  // would trigger a GROW; out of scope here
            Vaddr a = rt.malloc(bytes);
            ASSERT_EQ(rt.region_at(a)->block->start, *want);
            live.push_back(a);
        } else {
            std::size_t i = rng() % live.size();
            oracle.release(rt.region_at(live[i])->block->start);
            rt.free(live[i]);
            live.erase(live.begin() + static_cast<std::ptrdiff_t>(i));
        }
        ASSERT_EQ(rt.heap_free_blocks(), oracle.free_blocks()) << "op " << op;
    }
}

TEST(Malloc, FreeOfForeignAddressIsRejected) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 4 * MiB));
    Vaddr a = rt.malloc(8 * KiB);
    try {
        rt.free(a + kPageSize);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidFree);
    }
    rt.free(a);
    EXPECT_THROW(rt.free(a), Error);
}

TEST(Malloc, OversizeRequest) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 4 * MiB));
    try {
        rt.malloc(65 * MiB);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::Oversize);
    }
}

TEST(Malloc, RandomWorkloadWithinGrantNeverExits) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 64 * MiB));
    std::mt19937 rng(99);
    std::vector<Vaddr> live;
    const auto before = rt.counters();
    std::uint64_t live_pages = 0;
    for (int op = 0; op < 100000; ++op) {
        const bool alloc = live.empty() || (rng() % 2 && live_pages < 4096);
        if (alloc) {
            const std::uint64_t pages = 1 + rng() % 16;
            live.push_back(rt.malloc(pages * kPageSize));
            live_pages += std::bit_ceil(pages);
        } else {
            std::size_t i = rng() % live.size();
            live_pages -= frames_in_order(rt.region_at(live[i])->block->order);
            rt.free(live[i]);
            live[i] = live.back();
            live.pop_back();
        }
    }
    const auto delta = rt.counters() - before;
    EXPECT_EQ(delta.vmexits, 0u);
    EXPECT_EQ(delta.kernel_lock_acquisitions, 0u);
}

TEST(Sbrk, ZeroReturnsCurrentBreak) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 4 * MiB));
    EXPECT_EQ(rt.sbrk(0), kBrkBase);
    EXPECT_EQ(rt.brk(), kBrkBase);
}

TEST(Sbrk, GigabyteTouchedPageByPage) {
    auto k = make_kernel(2 * GiB);
    auto cell = launch(*k, 64 * MiB);
    CellRuntime rt(*k, cell);
    const Vaddr base = rt.sbrk(static_cast<std::int64_t>(1 * GiB));
    EXPECT_EQ(base, kBrkBase);
    for (std::uint64_t p = 0; p < 262144; ++p) rt.touch(base + p * kPageSize, AccessKind::Write, 1);
    EXPECT_EQ(rt.counters().user_faults, 262144u);
    EXPECT_EQ(rt.counters().kernel_faults, 0u);
    // the 64 MB boot grant plus 15 GROW chunks
    EXPECT_EQ(rt.counters().vmexits, 15u);
    EXPECT_TRUE(k->audit().ok());
}

TEST(Sbrk, GrowThenShrinkRestoresHeap) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 4 * MiB));
    const auto blocks = rt.heap_free_blocks();
    const Vaddr prev = rt.sbrk(64 * 1024);
    for (int p = 0; p < 16; ++p) rt.touch(prev + p * kPageSize, AccessKind::Write, 2);
    EXPECT_EQ(rt.brk(), prev + 64 * 1024);
    EXPECT_EQ(rt.sbrk(-64 * 1024), prev + 64 * 1024);
    EXPECT_EQ(rt.brk(), prev);
    EXPECT_EQ(rt.heap_free_blocks(), blocks);
    EXPECT_EQ(rt.table().size(), 0u);
    EXPECT_THROW(rt.sbrk(-1), Error);
}

TEST(Mmap, PrePagedAndDemandFaultCounts) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 64 * MiB));
    const Vaddr pre = rt.mmap(1 * MiB, PagingPolicy::PrePaging);
    const Vaddr dem = rt.mmap(1 * MiB, PagingPolicy::DemandPaging);
    for (int p = 0; p < 256; ++p) rt.touch(pre + p * kPageSize, AccessKind::Read);
    EXPECT_EQ(rt.counters().user_faults, 0u);
    for (int p = 0; p < 256; ++p) rt.touch(dem + p * kPageSize, AccessKind::Read);
    EXPECT_EQ(rt.counters().user_faults, 256u);
    rt.munmap(pre);
    rt.munmap(dem);
    EXPECT_EQ(rt.heap_free_frames(), 16384u);
}

TEST(Mmap, OddLengthPrePagedUsesGreedyBlocks) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 64 * MiB));
    const Vaddr a = rt.mmap(7 * kPageSize, PagingPolicy::PrePaging);
    const auto* r = rt.region_at(a);
    ASSERT_EQ(r->blocks.size(), 3u);
    EXPECT_EQ(r->blocks[0].order, 2u);
    EXPECT_EQ(r->blocks[1].order, 1u);
    EXPECT_EQ(r->blocks[2].order, 0u);
    EXPECT_EQ(rt.heap_free_frames(), 16384u - 7);
}

TEST(Refill, EmptyHeapIssuesOneGrow) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 0));
    EXPECT_EQ(rt.heap_total_frames(), 0u);
    rt.malloc(4 * KiB);
    EXPECT_EQ(rt.counters().vmexits, 1u);
    EXPECT_EQ(rt.heap_total_frames(), 16384u);
}

TEST(Refill, FreeHeapNeedsNoGrow) {
    auto k = make_kernel();
    CellRuntime rt(*k, launch(*k, 64 * MiB));
    rt.malloc(32 * MiB);
    rt.malloc(32 * MiB);
    EXPECT_EQ(rt.counters().vmexits, 0u);
    rt.malloc(4 * KiB);
    EXPECT_EQ(rt.counters().vmexits, 1u);
}

TEST(Refill, ExhaustedKernelSurfacesOutOfMemory) {
    auto k = make_kernel(64 * MiB);
    CellRuntime rt(*k, launch(*k, 64 * MiB));
    rt.malloc(64 * MiB);
    try {
        rt.malloc(4 * KiB);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::OutOfMemory);
    }
}

TEST(Shrink, ReleasesFullyFreeGrantsOnly) {
    auto k = make_kernel(512 * MiB);
    auto cell = launch(*k, 64 * MiB);
    CellRuntime rt(*k, cell);
    Vaddr a = rt.malloc(64 * MiB);
    Vaddr b = rt.malloc(4 * KiB);  // forces a second chunk
    EXPECT_EQ(rt.backing_grants().size(), 2u);
    rt.free(a);
    const auto kernel_before = k->kernel_free_frames();
    EXPECT_EQ(rt.release_free_grants(), 16384u);
    EXPECT_EQ(rt.backing_grants().size(), 1u);
    EXPECT_EQ(k->kernel_free_frames(), kernel_before + 16384u);
    rt.free(b);
    EXPECT_TRUE(k->audit().ok());
}

TEST(Lifecycle, RuntimeOfReplacedGenerationIsStale) {
    auto k = make_kernel();
    auto cell = launch(*k, 4 * MiB);
    CellRuntime rt(*k, cell);
    k->handle_vmexit(cell, CrashNotify{});
    try {
        rt.malloc(4 * KiB);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidState);
    }
    CellRuntime fresh(*k, cell);
    EXPECT_NO_THROW(fresh.malloc(4 * KiB));
}
