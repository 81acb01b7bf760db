#pragma once

#include <coroutine>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

#include "xcell/types.hpp"

namespace xcell {

enum class FiberState { Runnable, Waiting, Done };

/// Coroutine return type for fiber bodies. Pass state as coroutine
/// parameters; a lambda's captures die with the closure object.
class FiberTask {
public:
    struct promise_type {
        std::exception_ptr error;

        FiberTask get_return_object() {
            return FiberTask(std::coroutine_handle<promise_type>::from_promise(*this));
        }
        std::suspend_always initial_suspend() noexcept { return {}; }
        std::suspend_always final_suspend() noexcept { return {}; }
        void return_void() noexcept {}
        void unhandled_exception() noexcept { error = std::current_exception(); }
    };

    FiberTask() = default;
    explicit FiberTask(std::coroutine_handle<promise_type> h) : handle_(h) {}
    FiberTask(FiberTask&& other) noexcept : handle_(std::exchange(other.handle_, {})) {}
    FiberTask& operator=(FiberTask&& other) noexcept {
        if (this != &other) {
            if (handle_) handle_.destroy();
            handle_ = std::exchange(other.handle_, {});
        }
        return *this;
    }
    FiberTask(const FiberTask&) = delete;
    FiberTask& operator=(const FiberTask&) = delete;
    ~FiberTask() {
        if (handle_) handle_.destroy();
    }

    std::coroutine_handle<promise_type> handle() const noexcept { return handle_; }

private:
    std::coroutine_handle<promise_type> handle_;
};

struct FiberLogEntry {
    enum class Kind { Run, Wait, Done };
    int fiber = 0;
    Kind kind = Kind::Run;
    std::optional<std::uint32_t> ticket;

    friend bool operator==(const FiberLogEntry&, const FiberLogEntry&) = default;
};

/// Cooperative round-robin scheduler for the fibers of one cell. Confined to
/// the cell's worker thread, so at most one fiber executes at a time.
class FiberScheduler {
public:
    using ReadyCheck = std::function<bool()>;

    /// Called when no fiber is runnable, before waiting fibers are re-polled.
    /// Typically drives the I/O engine or yields the host thread.
    void set_idle_hook(std::function<void()> hook) { idle_ = std::move(hook); }
    void enable_log(bool on) { logging_ = on; }
    const std::vector<FiberLogEntry>& log() const noexcept { return log_; }

    int spawn(FiberTask task) {
        const int id = static_cast<int>(fibers_.size());
        fibers_.push_back(Fiber{std::move(task), FiberState::Runnable, {}, {}});
        runnable_.push_back(id);
        return id;
    }

    FiberState state(int fiber) const { return fibers_.at(fiber).state; }
    std::optional<std::uint32_t> waiting_ticket(int fiber) const { return fibers_.at(fiber).ticket; }
    int current() const noexcept { return current_; }

    /// Runs until every fiber is done. Rethrows the first fiber exception.
    void run() {
        while (live() > 0) {
            poll_waiting();
            if (runnable_.empty()) {
                if (idle_) {
                    idle_();
                } else {
                    std::this_thread::yield();
                }
                poll_waiting();
                if (runnable_.empty()) continue;
            }
            const int id = runnable_.front();
            runnable_.pop_front();
            resume(id);
        }
    }

    /// Moves the current fiber to the back of the run queue.
    auto yield() {
        struct Awaiter {
            FiberScheduler& s;
            bool await_ready() const noexcept { return false; }
            void await_suspend(std::coroutine_handle<>) { s.runnable_.push_back(s.current_); }
            void await_resume() const noexcept {}
        };
        return Awaiter{*this};
    }

    /// Parks the current fiber until `ready` returns true. `ticket` is only
    /// recorded for the log and for inspection.
    auto wait_until(ReadyCheck ready, std::optional<std::uint32_t> ticket = std::nullopt) {
        struct Awaiter {
            FiberScheduler& s;
            ReadyCheck ready;
            std::optional<std::uint32_t> ticket;
            bool await_ready() const noexcept { return false; }
            void await_suspend(std::coroutine_handle<>) { s.park(std::move(ready), ticket); }
            void await_resume() const noexcept {}
        };
        return Awaiter{*this, std::move(ready), ticket};
    }

private:
    struct Fiber {
        FiberTask task;
        FiberState state;
        ReadyCheck ready;
        std::optional<std::uint32_t> ticket;
    };

    std::size_t live() const {
        std::size_t n = 0;
        for (const auto& f : fibers_) n += f.state != FiberState::Done;
        return n;
    }

    void park(ReadyCheck ready, std::optional<std::uint32_t> ticket) {
        auto& f = fibers_[current_];
        f.state = FiberState::Waiting;
        f.ready = std::move(ready);
        f.ticket = ticket;
        waiting_.push_back(current_);
        if (logging_) log_.push_back({current_, FiberLogEntry::Kind::Wait, ticket});
    }

    void poll_waiting() {
        for (auto it = waiting_.begin(); it != waiting_.end();) {
            auto& f = fibers_[*it];
            if (f.ready()) {
                f.state = FiberState::Runnable;
                f.ready = nullptr;
                f.ticket.reset();
                runnable_.push_back(*it);
                it = waiting_.erase(it);
            } else {
                ++it;
            }
        }
    }

    void resume(int id) {
        current_ = id;
        if (logging_) log_.push_back({id, FiberLogEntry::Kind::Run, std::nullopt});
        auto h = fibers_[id].task.handle();
        h.resume();
        current_ = -1;
        if (h.done()) {
            fibers_[id].state = FiberState::Done;
            if (logging_) log_.push_back({id, FiberLogEntry::Kind::Done, std::nullopt});
            if (auto err = h.promise().error) std::rethrow_exception(err);
        }
    }

    std::vector<Fiber> fibers_;
    std::deque<int> runnable_;
    std::vector<int> waiting_;
    int current_ = -1;
    std::function<void()> idle_;
    bool logging_ = false;
    std::vector<FiberLogEntry> log_;
};

/// Futex-like wait/wake between fibers of one scheduler.
class FiberEvent {
public:
    /// Parks until the generation differs from `expected`, like a futex wait
    /// on the generation word.
    auto wait(FiberScheduler& s, std::uint64_t expected) {
        return s.wait_until([this, expected] { return generation_ != expected; });
    }
    auto wait(FiberScheduler& s) { return wait(s, generation_); }
    void notify() noexcept { ++generation_; }
    std::uint64_t generation() const noexcept { return generation_; }

private:
    std::uint64_t generation_ = 0;
};

}  // namespace xcell
