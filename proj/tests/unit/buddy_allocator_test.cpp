#include <gtest/gtest.h>

#include <random>

#include "bitmap_buddy_oracle.hpp"
#include "xcell/buddy_allocator.hpp"

using namespace xcell;
using xcell::testing::BitmapBuddyOracle;

TEST(BuddyAllocator, SplitsAndKeepsLowerHalf) {
    BuddyAllocator a(0, 4);
    a.add_range(0, 16);
    auto f = a.allocate(0);
    ASSERT_TRUE(f);
    EXPECT_EQ(*f, 0u);
    // 16 = 1 + 1 + 2 + 4 + 8 after splitting down to order 0
    std::vector<FrameBlock> expect{{1, 0}, {2, 1}, {4, 2}, {8, 3}};
    EXPECT_EQ(a.free_blocks(), expect);
    EXPECT_EQ(a.free_frames(), 15u);
}

TEST(BuddyAllocator, FreeingBothHalvesCoalescesParent) {
    BuddyAllocator a(0, 3);
    a.add_range(0, 8);
    auto x = a.allocate(2);
    auto y = a.allocate(2);
    ASSERT_TRUE(x && y);
    EXPECT_TRUE(a.free_blocks().empty());
    a.release(*x, 2);
    a.release(*y, 2);
    std::vector<FrameBlock> expect{{0, 3}};
    EXPECT_EQ(a.free_blocks(), expect);
}

TEST(BuddyAllocator, NoCoalescingAboveMaxOrder) {
    BuddyAllocator a(0, 2);
    a.add_range(0, 16);
    std::vector<FrameBlock> expect{{0, 2}, {4, 2}, {8, 2}, {12, 2}};
    EXPECT_EQ(a.free_blocks(), expect);
}

TEST(BuddyAllocator, RejectsForeignAndMismatchedRelease) {
    BuddyAllocator a(0, 4);
    a.add_range(0, 16);
    auto f = a.allocate(1);
    ASSERT_TRUE(f);
    EXPECT_THROW(a.release(*f, 2), Error);
    EXPECT_THROW(a.release(9, 0), Error);
    a.release(*f, 1);
    EXPECT_THROW(a.release(*f, 1), Error);
}

TEST(BuddyAllocator, OversizeAndExhaustion) {
    BuddyAllocator a(0, 2);
    a.add_range(0, 4);
    EXPECT_FALSE(a.allocate(3));
    EXPECT_TRUE(a.allocate(2));
    EXPECT_FALSE(a.allocate(0));
}

TEST(BuddyAllocator, WithdrawFreeCarvesAndRefusesBusyFrames) {
    BuddyAllocator a(0, 4);
    a.add_range(0, 16);
    EXPECT_TRUE(a.withdraw_free(4, 4));
    EXPECT_EQ(a.total_frames(), 12u);
    std::vector<FrameBlock> expect{{0, 2}, {8, 3}};
    EXPECT_EQ(a.free_blocks(), expect);

    auto f = a.allocate(2);
    ASSERT_EQ(*f, 0u);
    EXPECT_FALSE(a.withdraw_free(0, 8));
    EXPECT_EQ(a.total_frames(), 12u);
}

TEST(BuddyAllocator, TransferOutAndDonateRoundTrip) {
    BuddyAllocator a(0, 4);
    a.add_range(0, 16);
    auto f = a.allocate(3);
    a.transfer_out(*f);
    EXPECT_EQ(a.total_frames(), 8u);
    a.donate(*f, 3);
    std::vector<FrameBlock> expect{{0, 4}};
    EXPECT_EQ(a.free_blocks(), expect);
    EXPECT_EQ(a.total_frames(), 16u);
}

TEST(BuddyAllocator, DonateRejectsMisalignedBlocks) {
    BuddyAllocator a(0, 4);
    EXPECT_THROW(a.donate(2, 2), Error);
    EXPECT_THROW(a.donate(0, 5), Error);
}

namespace {

void fuzz_against_oracle(FrameIndex base, std::uint64_t total, unsigned max_order, std::uint64_t seed, int ops) {
    BuddyAllocator a(0, max_order);
    a.add_range(base, total);
    BitmapBuddyOracle oracle(base, total, max_order);
    ASSERT_EQ(a.free_blocks(), oracle.free_blocks());

    std::mt19937_64 rng(seed);
    std::vector<std::pair<FrameIndex, unsigned>> live;
    for (int i = 0; i < ops; ++i) {
        if (live.empty() || rng() % 100 < 55) {
            unsigned order = static_cast<unsigned>(rng() % (max_order + 2));
            auto got = a.allocate(order);
            auto want = oracle.allocate(order);
            ASSERT_EQ(got, want) << "op " << i << " order " << order;
            if (got) live.emplace_back(*got, order);
        } else {
            auto idx = rng() % live.size();
            auto [s, o] = live[idx];
            live.erase(live.begin() + static_cast<long>(idx));
            a.release(s, o);
            ASSERT_TRUE(oracle.release(s));
        }
        ASSERT_EQ(a.free_blocks(), oracle.free_blocks()) << "op " << i;
        ASSERT_EQ(a.free_frames(), oracle.free_frames());
        std::uint64_t outstanding = 0;
        for (auto [s, o] : live) outstanding += frames_in_order(o);
        ASSERT_EQ(a.free_frames() + outstanding, a.total_frames());
    }
}

}  // namespace

TEST(BuddyAllocatorProperty, MatchesBitmapOracleOnAlignedPool) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) fuzz_against_oracle(0, 1024, 10, seed, 3000);
}

TEST(BuddyAllocatorProperty, MatchesBitmapOracleOnUnalignedPool) {
    for (std::uint64_t seed = 11; seed <= 14; ++seed) fuzz_against_oracle(3, 1000, 8, seed, 3000);
}

TEST(BuddyAllocatorProperty, MatchesBitmapOracleWithLowMaxOrder) {
    fuzz_against_oracle(0, 512, 4, 99, 3000);
}
