#include <gtest/gtest.h>

#include <thread>

#include "xcell/shared_kernel.hpp"

using namespace xcell;

TEST(SharedBaseline, EveryOperationCrossesAndLocks) {
    SharedKernel k(64 * MiB);
    SharedProcess p(k);
    for (int i = 0; i < 100; ++i) p.free(p.malloc(4 * KiB));
    const auto c = p.counters();
    EXPECT_EQ(c.mode_switches, 400u);  // two crossings per iteration
    EXPECT_EQ(c.vmexits, 0u);
    EXPECT_EQ(c.kernel_lock_acquisitions, 0u);  // nothing was touched, nothing to free
    EXPECT_EQ(k.free_frames(), k.total_frames());
}

TEST(SharedBaseline, FaultsGoThroughKernelWithLock) {
    SharedKernel k(64 * MiB);
    SharedProcess p(k);
    const Vaddr base = p.mmap(1 * MiB, PagingPolicy::DemandPaging);
    for (int i = 0; i < 256; ++i) p.touch(base + i * kPageSize, AccessKind::Write, 3);
    auto c = p.counters();
    EXPECT_EQ(c.kernel_faults, 256u);
    EXPECT_EQ(c.user_faults, 0u);
    EXPECT_EQ(c.kernel_lock_acquisitions, 256u);
    EXPECT_EQ(k.free_frames(), k.total_frames() - 256);
    for (int i = 0; i < 256; ++i) EXPECT_EQ(p.touch(base + i * kPageSize, AccessKind::Read), 3u);
    EXPECT_EQ(p.counters().kernel_faults, 256u);
    p.munmap(base);
    EXPECT_EQ(k.free_frames(), k.total_frames());
    EXPECT_EQ(p.counters().kernel_lock_acquisitions, 257u);
}

TEST(SharedBaseline, PrePagedTakesOneLockAndNoFaults) {
    SharedKernel k(64 * MiB);
    SharedProcess p(k);
    const Vaddr base = p.mmap(64 * KiB, PagingPolicy::PrePaging);
    for (int i = 0; i < 16; ++i) p.touch(base + i * kPageSize, AccessKind::Read);
    EXPECT_EQ(p.counters().kernel_faults, 0u);
    EXPECT_EQ(p.counters().kernel_lock_acquisitions, 1u);
}

TEST(SharedBaseline, SbrkRoundTripAndErrors) {
    SharedKernel k(64 * MiB);
    SharedProcess p(k);
    EXPECT_EQ(p.sbrk(0), kBrkBase);
    const Vaddr prev = p.sbrk(64 * 1024);
    for (int i = 0; i < 16; ++i) p.touch(prev + i * kPageSize, AccessKind::Write, 1);
    p.sbrk(-64 * 1024);
    EXPECT_EQ(p.brk(), kBrkBase);
    EXPECT_EQ(k.free_frames(), k.total_frames());
    EXPECT_THROW(p.sbrk(-1), Error);
    EXPECT_THROW(p.free(0x1234), Error);
    EXPECT_THROW(p.touch(0x5000, AccessKind::Read), Error);
    EXPECT_THROW(p.malloc(0), Error);
}

TEST(SharedBaseline, ExhaustionIsReported) {
    SharedKernel k(1 * MiB);
    SharedProcess p(k);
    EXPECT_THROW(p.mmap(2 * MiB, PagingPolicy::PrePaging), Error);
    EXPECT_EQ(k.free_frames(), k.total_frames());
}

TEST(SharedBaseline, ConcurrentProcessesShareOnePool) {
    SharedKernel k(64 * MiB);
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
        threads.emplace_back([&] {
            SharedProcess p(k);
            for (int i = 0; i < 50; ++i) {
                const Vaddr a = p.malloc(64 * KiB);
                for (int j = 0; j < 16; ++j) p.touch(a + j * kPageSize, AccessKind::Write, 1);
                p.free(a);
            }
        });
    }
    for (auto& t : threads) t.join();
    EXPECT_EQ(k.free_frames(), k.total_frames());
    EXPECT_EQ(k.lock_acquisitions(), 4u * 50u * 17u);
}

TEST(SharedBaseline, DestructorReturnsFrames) {
    SharedKernel k(16 * MiB);
    {
        SharedProcess p(k);
        const Vaddr a = p.malloc(1 * MiB, PagingPolicy::PrePaging);
        (void)a;
        EXPECT_LT(k.free_frames(), k.total_frames());
    }
    EXPECT_EQ(k.free_frames(), k.total_frames());
}
