#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "xcell/fiber.hpp"
#include "xcell/kernel.hpp"
#include "xcell/types.hpp"

namespace xcell {

enum class IoStatus : std::uint16_t { Free = 0, Submitted, Dispatched, Completed, Failed };

constexpr std::string_view to_string(IoStatus s) noexcept {
    switch (s) {
        case IoStatus::Free: return "FREE";
        case IoStatus::Submitted: return "SUBMITTED";
        case IoStatus::Dispatched: return "DISPATCHED";
        case IoStatus::Completed: return "COMPLETED";
        case IoStatus::Failed: return "FAILED";
    }
    return "?";
}

enum class Syscall : std::uint16_t { Open = 1, Close = 2, Read = 3, Write = 4, Fsync = 5 };

constexpr std::string_view to_string(Syscall s) noexcept {
    switch (s) {
        case Syscall::Open: return "open";
        case Syscall::Close: return "close";
        case Syscall::Read: return "read";
        case Syscall::Write: return "write";
        case Syscall::Fsync: return "fsync";
    }
    return "unknown";
}

struct alignas(64) IoMessage {
    std::atomic<std::uint16_t> status{0};
    std::uint16_t syscall = 0;
    std::uint16_t cell = 0;
    std::int16_t errcode = 0;
    std::uint32_t ticket = 0;
    std::uint32_t payload_len = 0;
    std::uint64_t args[4] = {};
    std::int64_t result = 0;
    std::uint32_t payload_offset = 0;
    std::uint32_t reserved = 0;

    IoStatus load_status(std::memory_order order = std::memory_order_acquire) const noexcept {
        return static_cast<IoStatus>(status.load(order));
    }
};
static_assert(sizeof(IoMessage) == 64, "message header must fit one cache line");

constexpr bool valid_io_transition(IoStatus from, IoStatus to) noexcept {
    switch (from) {
        case IoStatus::Free: return to == IoStatus::Submitted;
        case IoStatus::Submitted: return to == IoStatus::Dispatched;
        case IoStatus::Dispatched: return to == IoStatus::Completed || to == IoStatus::Failed;
        case IoStatus::Completed:
        case IoStatus::Failed: return to == IoStatus::Free;
    }
    return false;
}

/// Fixed-slot ring shared by one cell (producer) and the dispatcher
/// (consumer), plus one payload slot per message.
class SharedRing {
public:
    SharedRing(std::uint32_t slots, std::uint32_t data_slot_bytes, bool audit)
        : mask_(slots - 1), data_slot_bytes_(data_slot_bytes), audit_(audit),
          slots_(std::make_unique<IoMessage[]>(slots)),
          data_(std::size_t{slots} * data_slot_bytes),
          log_(audit ? slots : 0) {
        if (slots == 0 || (slots & (slots - 1))) {
            throw Error(ErrorCode::Config, "ring slot count must be a power of two");
        }
        for (std::uint32_t i = 0; i < slots; ++i) {
            slots_[i].payload_offset = i * data_slot_bytes;
            if (audit_) log_[i].push_back(IoStatus::Free);
        }
    }

    std::uint32_t slot_count() const noexcept { return mask_ + 1; }
    std::uint32_t data_slot_bytes() const noexcept { return data_slot_bytes_; }
    IoMessage& slot_for(std::uint32_t ticket) noexcept { return slots_[ticket & mask_]; }
    const IoMessage& slot_for(std::uint32_t ticket) const noexcept { return slots_[ticket & mask_]; }
    std::span<std::byte> payload(const IoMessage& m) {
        return {data_.data() + m.payload_offset, data_slot_bytes_};
    }

    /// Moves a slot along the status automaton. Throws on an illegal or
    /// contended transition.
    void transition(IoMessage& m, IoStatus from, IoStatus to) {
        if (!valid_io_transition(from, to)) {
            throw Error(ErrorCode::InvalidState, "illegal message transition " + std::string(to_string(from)) +
                                                     " -> " + std::string(to_string(to)));
        }
        std::unique_lock<std::mutex> g;
        if (audit_) g = std::unique_lock(log_mutex_);
        auto expected = static_cast<std::uint16_t>(from);
        if (!m.status.compare_exchange_strong(expected, static_cast<std::uint16_t>(to),
                                              std::memory_order_acq_rel)) {
            throw Error(ErrorCode::InvalidState, "message was not in state " + std::string(to_string(from)));
        }
        if (audit_) log_[static_cast<std::size_t>(&m - slots_.get())].push_back(to);
        switch (to) {
            case IoStatus::Submitted: issued_.fetch_add(1, std::memory_order_relaxed); break;
            case IoStatus::Completed: completed_.fetch_add(1, std::memory_order_relaxed); break;
            case IoStatus::Failed: failed_.fetch_add(1, std::memory_order_relaxed); break;
            default: break;
        }
    }

    /// Producer cursor: the next ticket to issue.
    std::uint32_t head() const noexcept { return head_.load(std::memory_order_acquire); }
    std::uint32_t claim_ticket() noexcept { return head_.fetch_add(1, std::memory_order_acq_rel); }
    /// Consumer cursor: the next ticket the dispatcher expects.
    std::uint32_t& tail() noexcept { return tail_; }

    std::uint64_t issued() const noexcept { return issued_.load(); }
    std::uint64_t completed() const noexcept { return completed_.load(); }
    std::uint64_t failed() const noexcept { return failed_.load(); }

    std::uint64_t in_flight() const noexcept {
        std::uint64_t n = 0;
        for (std::uint32_t i = 0; i <= mask_; ++i) {
            auto s = slots_[i].load_status();
            n += s == IoStatus::Submitted || s == IoStatus::Dispatched;
        }
        return n;
    }

    /// Checks every slot's log against the automaton. Empty when clean.
    std::vector<std::string> audit_violations() const {
        std::vector<std::string> out;
        if (!audit_) return out;
        std::lock_guard g(log_mutex_);
        for (std::size_t i = 0; i < log_.size(); ++i) {
            const auto& l = log_[i];
            if (l.empty() || l.front() != IoStatus::Free) {
                out.push_back("slot " + std::to_string(i) + ": log does not start FREE");
                continue;
            }
            for (std::size_t j = 1; j < l.size(); ++j) {
                if (!valid_io_transition(l[j - 1], l[j])) {
                    out.push_back("slot " + std::to_string(i) + ": " + std::string(to_string(l[j - 1])) +
                                  " -> " + std::string(to_string(l[j])));
                }
            }
        }
        return out;
    }

    std::vector<IoStatus> slot_log(std::uint32_t slot) const {
        std::lock_guard g(log_mutex_);
        return log_.at(slot);
    }

private:
    std::uint32_t mask_;
    std::uint32_t data_slot_bytes_;
    bool audit_;
    std::unique_ptr<IoMessage[]> slots_;
    std::vector<std::byte> data_;
    alignas(64) std::atomic<std::uint32_t> head_{0};
    alignas(64) std::uint32_t tail_ = 0;
    std::atomic<std::uint64_t> issued_{0}, completed_{0}, failed_{0};
    mutable std::mutex log_mutex_;
    std::vector<std::vector<IoStatus>> log_;
};

struct IoRequest {
    Syscall syscall = Syscall::Close;
    std::array<std::uint64_t, 4> args{};
    std::string payload;

    static IoRequest open(std::string_view path, int flags, int mode = 0644) {
        return {Syscall::Open, {static_cast<std::uint64_t>(flags), static_cast<std::uint64_t>(mode)},
                std::string(path)};
    }
    static IoRequest close(int fd) { return {Syscall::Close, {static_cast<std::uint64_t>(fd)}, {}}; }
    static IoRequest read(int fd, std::uint64_t len) {
        return {Syscall::Read, {static_cast<std::uint64_t>(fd), len}, {}};
    }
    static IoRequest write(int fd, std::string bytes) {
        return {Syscall::Write, {static_cast<std::uint64_t>(fd)}, std::move(bytes)};
    }
    static IoRequest fsync(int fd) { return {Syscall::Fsync, {static_cast<std::uint64_t>(fd)}, {}}; }
};

struct IoCompletion {
    IoStatus status = IoStatus::Failed;
    std::int64_t result = 0;
    int errcode = 0;
    std::string payload;

    bool ok() const noexcept { return status == IoStatus::Completed; }
};

struct SubmitOutcome {
    enum class Kind { Submitted, RingFull, Rejected };
    Kind kind = Kind::Rejected;
    std::uint32_t ticket = 0;
    int errcode = 0;

    bool submitted() const noexcept { return kind == Kind::Submitted; }
};

/// The cell's own view of its I/O context. Servers keep a replica that is
/// brought up to date before each serve.
struct CellIoContext {
    std::uint64_t version = 0;
    std::set<int> fds;

    friend bool operator==(const CellIoContext&, const CellIoContext&) = default;
};

struct IoEngineConfig {
    std::filesystem::path sandbox_dir;
    unsigned servers = 2;
    std::uint32_t ring_slots = 64;
    std::uint32_t data_slot_bytes = 4096;
    bool audit = false;

    void apply(const KeyValueConfig& kv) {
        if (auto v = kv.get("sandbox_dir")) sandbox_dir = *v;
        if (auto v = kv.get_uint("io_servers")) servers = static_cast<unsigned>(*v);
        if (auto v = kv.get_uint("ring_slots")) ring_slots = static_cast<std::uint32_t>(*v);
        if (auto v = kv.get_bytes("data_slot_bytes")) data_slot_bytes = static_cast<std::uint32_t>(*v);
    }
};

/// Message-based syscall subsystem: one shared ring per attached cell, a
/// polling dispatcher, and a pool of serving threads, each bound to at most
/// one cell.
///
/// Without start() nothing runs in the background and the owner drives the
/// pipeline with poll_dispatch() and serve_pending(). After start() a
/// dispatcher thread and one thread per server do the same work.
class IoEngine {
public:
    IoEngine(Kernel& kernel, IoEngineConfig config) : kernel_(kernel), config_(std::move(config)) {
        if (config_.servers == 0) throw Error(ErrorCode::Config, "io engine needs at least one server");
        if (config_.sandbox_dir.empty()) throw Error(ErrorCode::Config, "io engine needs a sandbox directory");
        std::filesystem::create_directories(config_.sandbox_dir);
        sandbox_fd_ = ::open(config_.sandbox_dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
        if (sandbox_fd_ < 0) throw Error(ErrorCode::Io, "cannot open sandbox " + config_.sandbox_dir.string());
        for (unsigned i = 0; i < config_.servers; ++i) servers_.push_back(std::make_unique<Server>(i));
    }

    IoEngine(const IoEngine&) = delete;
    IoEngine& operator=(const IoEngine&) = delete;

    ~IoEngine() {
        stop();
        for (auto& s : servers_) s->close_all();
        if (sandbox_fd_ >= 0) ::close(sandbox_fd_);
    }

    const IoEngineConfig& config() const noexcept { return config_; }

    // ---- attachment ------------------------------------------------------

    SharedRing& attach_cell(CellId cell) {
        if (kernel_.state(cell) != CellState::Online) {
            throw Error(ErrorCode::AttachRefused, "only online cells can attach");
        }
        std::lock_guard g(attach_mutex_);
        if (cells_.contains(cell)) throw Error(ErrorCode::AttachRefused, "cell already attached");
        Server* free_server = nullptr;
        for (auto& s : servers_) {
            if (!s->bound.load()) {
                free_server = s.get();
                break;
            }
        }
        if (!free_server) throw Error(ErrorCode::AttachRefused, "serving-thread pool exhausted");
        auto att = std::make_shared<Attachment>(cell, *free_server, config_, kernel_.view(cell).counters);
        {
            std::lock_guard sg(free_server->mutex);
            free_server->attachment = att;
            free_server->replica = {};
            free_server->replica_version = 0;
            free_server->served_cells.clear();
        }
        free_server->bound.store(true);
        cells_.emplace(cell, att);
        publish_rings();
        return att->ring;
    }

    /// Unbinds the cell's server. Refused while messages are in flight.
    void detach_cell(CellId cell) {
        std::lock_guard g(attach_mutex_);
        auto it = cells_.find(cell);
        if (it == cells_.end()) throw Error(ErrorCode::InvalidArgument, "cell is not attached");
        auto& att = *it->second;
        if (att.ring.in_flight() > 0) throw Error(ErrorCode::InvalidState, "messages still in flight");
        {
            std::lock_guard sg(att.server.mutex);
            att.server.close_all();
            att.server.attachment.reset();
            att.server.queue.clear();
        }
        att.server.bound.store(false);
        cells_.erase(it);
        publish_rings();
    }

    bool attached(CellId cell) const {
        std::lock_guard g(attach_mutex_);
        return cells_.contains(cell);
    }

    unsigned idle_servers() const {
        unsigned n = 0;
        for (const auto& s : servers_) n += !s->bound.load();
        return n;
    }

    /// Server index bound to `cell`.
    unsigned server_of(CellId cell) const { return attachment(cell).server.id; }

    SharedRing& ring(CellId cell) { return attachment(cell).ring; }
    const CellIoContext& context(CellId cell) const { return attachment(cell).context; }

    CellIoContext replica(CellId cell) const {
        auto& att = attachment(cell);
        std::lock_guard g(att.server.mutex);
        return att.server.replica;
    }

    /// Cells the server has processed messages for since its last binding.
    std::set<std::uint16_t> served_cells(unsigned server) const {
        std::lock_guard g(servers_.at(server)->mutex);
        return servers_.at(server)->served_cells;
    }

    // ---- cell side -------------------------------------------------------

    SubmitOutcome submit(CellId cell, const IoRequest& req) {
        auto& att = attachment(cell);
        auto& ring = att.ring;
        if (req.payload.size() > ring.data_slot_bytes() ||
            (req.syscall == Syscall::Read && req.args[1] > ring.data_slot_bytes())) {
            return {SubmitOutcome::Kind::Rejected, 0, E2BIG};
        }
        const std::uint32_t ticket = ring.head();
        IoMessage& m = ring.slot_for(ticket);
        if (m.load_status() != IoStatus::Free) return {SubmitOutcome::Kind::RingFull, 0, EAGAIN};
        ring.claim_ticket();
        m.syscall = static_cast<std::uint16_t>(req.syscall);
        m.cell = static_cast<std::uint16_t>(to_underlying(cell));
        m.ticket = ticket;
        m.errcode = 0;
        m.result = 0;
        for (int i = 0; i < 4; ++i) m.args[i] = req.args[i];
        m.payload_len = static_cast<std::uint32_t>(req.payload.size());
        if (!req.payload.empty()) std::memcpy(ring.payload(m).data(), req.payload.data(), req.payload.size());
        ring.transition(m, IoStatus::Free, IoStatus::Submitted);
        EventCounters::bump(att.counters->io_messages);
        ring_doorbell();
        return {SubmitOutcome::Kind::Submitted, ticket, 0};
    }

    bool is_done(CellId cell, std::uint32_t ticket) { return finished(attachment(cell).ring, ticket); }

    static bool finished(const SharedRing& ring, std::uint32_t ticket) {
        const IoMessage& m = ring.slot_for(ticket);
        auto s = m.load_status();
        return m.ticket == ticket && (s == IoStatus::Completed || s == IoStatus::Failed);
    }

    /// Consumes a finished message, frees its slot, and applies descriptor
    /// changes to the cell context.
    IoCompletion reap(CellId cell, std::uint32_t ticket) {
        auto& att = attachment(cell);
        auto& ring = att.ring;
        IoMessage& m = ring.slot_for(ticket);
        const IoStatus s = m.load_status();
        if (m.ticket != ticket || (s != IoStatus::Completed && s != IoStatus::Failed)) {
            throw Error(ErrorCode::InvalidState, "ticket has not finished");
        }
        IoCompletion c;
        c.status = s;
        c.result = m.result;
        c.errcode = m.errcode;
        if (s == IoStatus::Completed && m.syscall == static_cast<std::uint16_t>(Syscall::Read)) {
            auto data = ring.payload(m);
            c.payload.assign(reinterpret_cast<const char*>(data.data()), m.payload_len);
        }
        if (s == IoStatus::Completed) {
            const auto call = static_cast<Syscall>(m.syscall);
            if (call == Syscall::Open || call == Syscall::Close) {
                std::lock_guard g(att.context_mutex);
                if (call == Syscall::Open) {
                    att.context.fds.insert(static_cast<int>(m.result));
                } else {
                    att.context.fds.erase(static_cast<int>(m.args[0]));
                }
                ++att.context.version;
                att.context_version.store(att.context.version, std::memory_order_release);
            }
        }
        ring.transition(m, s, IoStatus::Free);
        return c;
    }

    /// Blocking call from a plain thread. Drives the pipeline itself when the
    /// engine has not been started.
    IoCompletion call(CellId cell, const IoRequest& req) {
        SubmitOutcome sub;
        while (true) {
            sub = submit(cell, req);
            if (sub.kind != SubmitOutcome::Kind::RingFull) break;
            progress();
        }
        if (!sub.submitted()) {
            IoCompletion c;
            c.errcode = sub.errcode;
            c.result = -sub.errcode;
            return c;
        }
        if (running_.load()) {
            auto& att = attachment(cell);
            std::unique_lock g(att.done_mutex);
            att.done_cv.wait(g, [&] { return finished(att.ring, sub.ticket) || !running_.load(); });
        }
        while (!is_done(cell, sub.ticket)) progress();
        return reap(cell, sub.ticket);
    }

    /// Issues `req` from inside a fiber: yields while the ring is full, parks
    /// the fiber in WAITING(ticket) until the message finishes.
    auto fiber_call(FiberScheduler& sched, CellId cell, IoRequest req) {
        struct Awaitable {
            IoEngine& engine;
            FiberScheduler& sched;
            CellId cell;
            IoRequest req;
            std::optional<std::uint32_t> ticket;
            std::optional<IoCompletion> rejected;

            bool await_ready() {
                auto sub = engine.submit(cell, req);
                if (sub.kind == SubmitOutcome::Kind::Rejected) {
                    IoCompletion c;
                    c.errcode = sub.errcode;
                    c.result = -sub.errcode;
                    rejected = c;
                    return true;
                }
                if (sub.submitted()) ticket = sub.ticket;
                return false;
            }
            void await_suspend(std::coroutine_handle<> h) {
                // a full ring parks the fiber until it can submit
                auto& self = *this;
                auto ready = [&self] {
                    if (!self.ticket) {
                        auto sub = self.engine.submit(self.cell, self.req);
                        if (!sub.submitted()) return false;
                        self.ticket = sub.ticket;
                    }
                    return self.engine.is_done(self.cell, *self.ticket);
                };
                (void)h;
                sched.wait_until(ready, ticket).await_suspend(h);
            }
            IoCompletion await_resume() {
                if (rejected) return *rejected;
                return engine.reap(cell, *ticket);
            }
        };
        return Awaitable{*this, sched, cell, std::move(req), std::nullopt, std::nullopt};
    }

    /// Idle hook for a cell's fiber scheduler.
    std::function<void()> idle_hook() {
        return [this] { progress(); };
    }

    // ---- kernel side -----------------------------------------------------

    /// Scans every ring and moves SUBMITTED messages to their cell's server.
    std::size_t poll_dispatch() {
        std::shared_ptr<const RingList> rings = std::atomic_load(&rings_);
        std::size_t n = 0;
        for (const auto& att : *rings) {
            if (att->paused.load(std::memory_order_relaxed)) continue;
            auto& ring = att->ring;
            std::uint32_t& tail = ring.tail();
            std::vector<std::uint32_t> batch;
            while (true) {
                IoMessage& m = ring.slot_for(tail);
                if (m.load_status() != IoStatus::Submitted || m.ticket != tail) break;
                ring.transition(m, IoStatus::Submitted, IoStatus::Dispatched);
                batch.push_back(tail);
                ++tail;
            }
            if (batch.empty()) continue;
            n += batch.size();
            {
                std::lock_guard g(att->server.mutex);
                for (auto t : batch) att->server.queue.push_back(t);
            }
            att->server.cv.notify_one();
        }
        return n;
    }

    /// Serves every queued message for `cell` on the calling thread.
    std::size_t serve_pending(CellId cell) { return serve_server(attachment(cell).server, false); }

    /// Brings the server-side replica of `cell`'s context up to date.
    void sync_context(CellId cell) {
        auto& att = attachment(cell);
        std::lock_guard g(att.server.mutex);
        sync_locked(att);
    }

    /// Drives dispatch and service once when not started; otherwise yields.
    void progress() {
        if (running_.load(std::memory_order_relaxed)) {
            std::this_thread::yield();
            return;
        }
        poll_dispatch();
        for (auto& s : servers_) {
            if (s->bound.load()) serve_server(*s, false);
        }
    }

    /// Stops dispatch for one cell. Messages stay SUBMITTED until resume.
    void pause(CellId cell) { attachment(cell).paused.store(true); }
    void resume(CellId cell) {
        attachment(cell).paused.store(false);
        ring_doorbell();
    }

    void start() {
        if (running_.exchange(true)) return;
        for (auto& s : servers_) {
            s->thread = std::thread([this, srv = s.get()] { server_loop(*srv); });
        }
        dispatcher_ = std::thread([this] { dispatcher_loop(); });
    }

    void stop() {
        if (!running_.exchange(false)) return;
        {
            std::lock_guard g(doorbell_mutex_);
            doorbell_ = true;
        }
        doorbell_cv_.notify_all();
        dispatcher_.join();
        for (auto& s : servers_) {
            {
                std::lock_guard g(s->mutex);
            }
            s->cv.notify_all();
            s->thread.join();
        }
        // release callers blocked in call()
        std::vector<std::shared_ptr<Attachment>> attached;
        {
            std::lock_guard g(attach_mutex_);
            for (auto& [_, att] : cells_) attached.push_back(att);
        }
        for (auto& att : attached) att->signal_completion();
    }

    bool running() const noexcept { return running_.load(); }

private:
    struct Server;

    struct Attachment {
        Attachment(CellId c, Server& s, const IoEngineConfig& cfg, EventCounters* ctr)
            : cell(c), server(s), ring(cfg.ring_slots, cfg.data_slot_bytes, cfg.audit), counters(ctr) {}
        CellId cell;
        Server& server;
        SharedRing ring;
        EventCounters* counters;
        std::atomic<bool> paused{false};
        std::mutex context_mutex;
        CellIoContext context;
        std::atomic<std::uint64_t> context_version{0};
        // Blocking callers sleep here. A condition variable rather than
        // atomic::wait, whose spin phase yields the CPU on a busy host.
        std::mutex done_mutex;
        std::condition_variable done_cv;

        void signal_completion() {
            { std::lock_guard g(done_mutex); }
            done_cv.notify_all();
        }
    };

    struct Server {
        explicit Server(unsigned i) : id(i) {}

        void close_all() {
            for (auto& [_, host] : host_fds) ::close(host);
            host_fds.clear();
        }

        unsigned id;
        std::atomic<bool> bound{false};
        mutable std::mutex mutex;
        std::condition_variable cv;
        std::deque<std::uint32_t> queue;
        std::shared_ptr<Attachment> attachment;
        CellIoContext replica;
        std::uint64_t replica_version = 0;
        std::map<int, int> host_fds;  // cell fd -> host fd
        std::set<std::uint16_t> served_cells;
        std::thread thread;
    };

    using RingList = std::vector<std::shared_ptr<Attachment>>;

    Attachment& attachment(CellId cell) const {
        std::lock_guard g(attach_mutex_);
        auto it = cells_.find(cell);
        if (it == cells_.end()) throw Error(ErrorCode::InvalidArgument, "cell is not attached");
        return *it->second;
    }

    void publish_rings() {
        auto list = std::make_shared<RingList>();
        for (const auto& [_, att] : cells_) list->push_back(att);
        std::atomic_store(&rings_, std::shared_ptr<const RingList>(std::move(list)));
    }

    void ring_doorbell() {
        if (!running_.load(std::memory_order_relaxed)) return;
        std::atomic_thread_fence(std::memory_order_seq_cst);
        if (dispatcher_sleeping_.load()) {
            {
                std::lock_guard g(doorbell_mutex_);
                doorbell_ = true;
            }
            doorbell_cv_.notify_one();
        }
    }

    void sync_locked(Attachment& att) {
        Server& s = att.server;
        if (s.replica_version == att.context_version.load(std::memory_order_acquire)) return;
        std::lock_guard g(att.context_mutex);
        s.replica = att.context;
        s.replica_version = att.context.version;
    }

    std::size_t serve_server(Server& s, bool block) {
        std::size_t n = 0;
        std::unique_lock g(s.mutex);
        if (block) {
            s.cv.wait(g, [&] { return !s.queue.empty() || !running_.load(); });
        }
        while (!s.queue.empty() && s.attachment) {
            const std::uint32_t ticket = s.queue.front();
            s.queue.pop_front();
            Attachment& att = *s.attachment;
            sync_locked(att);
            IoMessage& m = att.ring.slot_for(ticket);
            s.served_cells.insert(m.cell);
            execute(s, att, m);
            att.signal_completion();
            ++n;
        }
        return n;
    }

    void execute(Server& s, Attachment& att, IoMessage& m) {
        auto fail = [&](int err) {
            m.errcode = static_cast<std::int16_t>(err);
            m.result = -err;
            att.ring.transition(m, IoStatus::Dispatched, IoStatus::Failed);
        };
        auto done = [&](std::int64_t result) {
            m.result = result;
            att.ring.transition(m, IoStatus::Dispatched, IoStatus::Completed);
        };
        auto host_fd = [&](std::uint64_t fd) -> int {
            const int cfd = static_cast<int>(fd);
            if (!s.replica.fds.contains(cfd)) return -1;
            auto it = s.host_fds.find(cfd);
            return it == s.host_fds.end() ? -1 : it->second;
        };
        auto payload = att.ring.payload(m);

        switch (static_cast<Syscall>(m.syscall)) {
            case Syscall::Open: {
                std::string path(reinterpret_cast<const char*>(payload.data()), m.payload_len);
                if (!sandboxed(path)) return fail(EACCES);
                const int h = ::openat(sandbox_fd_, path.c_str(), static_cast<int>(m.args[0]) | O_CLOEXEC,
                                       static_cast<mode_t>(m.args[1]));
                if (h < 0) return fail(errno);
                int cfd = 3;
                while (s.replica.fds.contains(cfd) || s.host_fds.contains(cfd)) ++cfd;
                s.host_fds[cfd] = h;
                return done(cfd);
            }
            case Syscall::Close: {
                const int h = host_fd(m.args[0]);
                if (h < 0) return fail(EBADF);
                s.host_fds.erase(static_cast<int>(m.args[0]));
                if (::close(h) != 0) return fail(errno);
                return done(0);
            }
            case Syscall::Read: {
                const int h = host_fd(m.args[0]);
                if (h < 0) return fail(EBADF);
                const ssize_t r = ::read(h, payload.data(), static_cast<std::size_t>(m.args[1]));
                if (r < 0) return fail(errno);
                m.payload_len = static_cast<std::uint32_t>(r);
                return done(r);
            }
            case Syscall::Write: {
                const int h = host_fd(m.args[0]);
                if (h < 0) return fail(EBADF);
                const ssize_t r = ::write(h, payload.data(), m.payload_len);
                if (r < 0) return fail(errno);
                return done(r);
            }
            case Syscall::Fsync: {
                const int h = host_fd(m.args[0]);
                if (h < 0) return fail(EBADF);
                if (::fsync(h) != 0) return fail(errno);
                return done(0);
            }
        }
        fail(ENOSYS);
    }

    static bool sandboxed(const std::string& path) {
        if (path.empty() || path.front() == '/') return false;
        for (const auto& part : std::filesystem::path(path)) {
            if (part == "..") return false;
        }
        return true;
    }

    void dispatcher_loop() {
        // on a single CPU a yield only hands the slice to whoever else is runnable
        const unsigned spin_rounds = std::thread::hardware_concurrency() > 1 ? 64 : 0;
        unsigned idle_rounds = 0;
        while (running_.load(std::memory_order_relaxed)) {
            if (poll_dispatch() > 0) {
                idle_rounds = 0;
                continue;
            }
            if (++idle_rounds < spin_rounds) {
                std::this_thread::yield();
                continue;
            }
            std::unique_lock g(doorbell_mutex_);
            dispatcher_sleeping_.store(true);
            g.unlock();
            // re-check after publishing the sleeping flag so no submit is missed
            std::atomic_thread_fence(std::memory_order_seq_cst);
            if (poll_dispatch() == 0) {
                g.lock();
                doorbell_cv_.wait_for(g, std::chrono::milliseconds(1), [&] { return doorbell_; });
                doorbell_ = false;
                g.unlock();
            }
            dispatcher_sleeping_.store(false);
            idle_rounds = 0;
        }
    }

    void server_loop(Server& s) {
        while (running_.load(std::memory_order_relaxed)) serve_server(s, true);
    }

    Kernel& kernel_;
    IoEngineConfig config_;
    int sandbox_fd_ = -1;
    std::vector<std::unique_ptr<Server>> servers_;

    mutable std::mutex attach_mutex_;
    std::map<CellId, std::shared_ptr<Attachment>> cells_;
    std::shared_ptr<const RingList> rings_ = std::make_shared<RingList>();

    std::atomic<bool> running_{false};
    std::thread dispatcher_;
    std::mutex doorbell_mutex_;
    std::condition_variable doorbell_cv_;
    bool doorbell_ = false;
    std::atomic<bool> dispatcher_sleeping_{false};
};

}  // namespace xcell
