#pragma once

#include <sys/mman.h>

#include <cerrno>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>

#include "xcell/types.hpp"

namespace xcell {

/// Emulated physical memory: one anonymous reservation carved by frame index.
/// Frames are real bytes, so touches in benchmarks hit real memory.
class PhysicalMemory {
public:
    explicit PhysicalMemory(std::uint64_t frames) : frames_(frames) {
        if (frames == 0) return;
        void* p = ::mmap(nullptr, frames * kPageSize, PROT_READ | PROT_WRITE,
                         MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
        if (p == MAP_FAILED) {
            throw Error(ErrorCode::OutOfMemory,
                        std::string("cannot reserve physical pool: ") + std::strerror(errno));
        }
        base_ = static_cast<std::byte*>(p);
    }

    PhysicalMemory(const PhysicalMemory&) = delete;
    PhysicalMemory& operator=(const PhysicalMemory&) = delete;

    PhysicalMemory(PhysicalMemory&& other) noexcept
        : base_(std::exchange(other.base_, nullptr)), frames_(std::exchange(other.frames_, 0)) {}

    PhysicalMemory& operator=(PhysicalMemory&& other) noexcept {
        if (this != &other) {
            unmap();
            base_ = std::exchange(other.base_, nullptr);
            frames_ = std::exchange(other.frames_, 0);
        }
        return *this;
    }

    ~PhysicalMemory() { unmap(); }

    std::uint64_t frames() const noexcept { return frames_; }

    std::byte* frame(FrameIndex index) const noexcept { return base_ + index * kPageSize; }

    /// Zeroes frames that change protection domain. Large ranges are dropped
    /// back to the host instead, which reads as zero and releases RSS.
    void scrub(FrameIndex start, std::uint64_t count) const noexcept {
        if (count >= kDropThreshold && ::madvise(frame(start), count * kPageSize, MADV_DONTNEED) == 0) return;
        std::memset(frame(start), 0, count * kPageSize);
    }

    static constexpr std::uint64_t kDropThreshold = 16;

private:
    void unmap() noexcept {
        if (base_) ::munmap(base_, frames_ * kPageSize);
        base_ = nullptr;
    }

    std::byte* base_ = nullptr;
    std::uint64_t frames_ = 0;
};

}  // namespace xcell
