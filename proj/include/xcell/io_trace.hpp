#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "xcell/io_engine.hpp"

namespace xcell {

inline std::uint64_t fnv1a(std::string_view bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Deterministic payload for a write: `len` bytes derived from `seed`.
inline std::string fill_bytes(std::uint32_t seed, std::size_t len) {
    std::string out(len, '\0');
    std::uint64_t x = seed * 0x9e3779b97f4a7c15ull + 1;
    for (std::size_t i = 0; i < len; ++i) {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        out[i] = static_cast<char>('a' + x % 26);
    }
    return out;
}

/// One call of a syscall trace. Files are named by `handle`, a symbolic
/// descriptor resolved to a real fd by each executor.
struct TraceOp {
    Syscall call = Syscall::Fsync;
    int handle = 0;
    std::string path;
    int flags = 0;
    std::uint32_t len = 0;
    std::uint32_t fill_seed = 0;
};

struct TraceResult {
    std::int64_t result = 0;
    int errcode = 0;
    int fd = -1;
    std::string payload;  // written or read bytes
};

/// Random open/write/read/fsync/close trace over a small set of file names.
inline std::vector<TraceOp> generate_io_trace(std::uint64_t seed, std::size_t ops, std::uint32_t max_len = 4096,
                                              int file_names = 16, std::size_t max_open = 8) {
    std::mt19937_64 rng(seed);
    std::vector<TraceOp> trace;
    std::vector<int> open;
    int next_handle = 0;
    const int open_flags[] = {O_CREAT | O_RDWR, O_CREAT | O_RDWR | O_TRUNC, O_CREAT | O_WRONLY | O_APPEND,
                              O_CREAT | O_RDWR | O_APPEND};
    while (trace.size() < ops) {
        const std::size_t remaining = ops - trace.size();
        TraceOp op;
        const auto roll = rng() % 100;
        if (open.size() >= remaining) {
            // drain so the trace ends with every file closed
            op.call = Syscall::Close;
            op.handle = open.back();
            open.pop_back();
        } else if (open.empty() || (roll < 15 && open.size() < max_open)) {
            op.call = Syscall::Open;
            op.handle = next_handle++;
            op.path = "file" + std::to_string(rng() % static_cast<std::uint64_t>(file_names));
            op.flags = open_flags[rng() % 4];
            open.push_back(op.handle);
        } else if (roll < 25) {
            const std::size_t i = rng() % open.size();
            op.call = Syscall::Close;
            op.handle = open[i];
            open.erase(open.begin() + static_cast<std::ptrdiff_t>(i));
        } else if (roll < 65) {
            op.call = Syscall::Write;
            op.handle = open[rng() % open.size()];
            op.len = 1 + static_cast<std::uint32_t>(rng() % max_len);
            op.fill_seed = static_cast<std::uint32_t>(rng());
        } else if (roll < 95) {
            op.call = Syscall::Read;
            op.handle = open[rng() % open.size()];
            op.len = 1 + static_cast<std::uint32_t>(rng() % max_len);
        } else {
            op.call = Syscall::Fsync;
            op.handle = open[rng() % open.size()];
        }
        trace.push_back(std::move(op));
    }
    return trace;
}

/// Runs trace ops with plain POSIX calls inside `dir`.
class DirectExecutor {
public:
    explicit DirectExecutor(const std::filesystem::path& dir) {
        std::filesystem::create_directories(dir);
        dirfd_ = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
        if (dirfd_ < 0) throw Error(ErrorCode::Io, "cannot open " + dir.string());
    }
    ~DirectExecutor() {
        for (auto& [_, fd] : fds_) ::close(fd);
        ::close(dirfd_);
    }
    DirectExecutor(const DirectExecutor&) = delete;
    DirectExecutor& operator=(const DirectExecutor&) = delete;

    TraceResult execute(const TraceOp& op) {
        TraceResult r;
        auto fail = [&] {
            r.errcode = errno;
            r.result = -errno;
            return r;
        };
        switch (op.call) {
            case Syscall::Open: {
                const int fd = ::openat(dirfd_, op.path.c_str(), op.flags | O_CLOEXEC, 0644);
                if (fd < 0) return fail();
                fds_[op.handle] = fd;
                r.fd = next_virtual_fd();
                virtual_[op.handle] = r.fd;
                r.result = r.fd;
                return r;
            }
            case Syscall::Close: {
                auto it = fds_.find(op.handle);
                if (it == fds_.end()) {
                    r.errcode = EBADF;
                    r.result = -EBADF;
                    return r;
                }
                r.fd = virtual_[op.handle];
                ::close(it->second);
                fds_.erase(it);
                virtual_.erase(op.handle);
                return r;
            }
            case Syscall::Write: {
                r.fd = virtual_.at(op.handle);
                r.payload = fill_bytes(op.fill_seed, op.len);
                const ssize_t n = ::write(fds_.at(op.handle), r.payload.data(), r.payload.size());
                if (n < 0) return fail();
                r.result = n;
                return r;
            }
            case Syscall::Read: {
                r.fd = virtual_.at(op.handle);
                r.payload.resize(op.len);
                const ssize_t n = ::read(fds_.at(op.handle), r.payload.data(), op.len);
                if (n < 0) {
                    r.payload.clear();
                    return fail();
                }
                r.payload.resize(static_cast<std::size_t>(n));
                r.result = n;
                return r;
            }
            case Syscall::Fsync: {
                r.fd = virtual_.at(op.handle);
                if (::fsync(fds_.at(op.handle)) != 0) return fail();
                return r;
            }
        }
        r.errcode = ENOSYS;
        r.result = -ENOSYS;
        return r;
    }

private:
    // mirrors the engine's lowest-free-from-3 numbering
    int next_virtual_fd() const {
        int fd = 3;
        for (bool taken = true; taken;) {
            taken = false;
            for (const auto& [_, v] : virtual_) {
                if (v == fd) {
                    taken = true;
                    ++fd;
                }
            }
        }
        return fd;
    }

    int dirfd_ = -1;
    std::map<int, int> fds_;
    std::map<int, int> virtual_;
};

/// Runs trace ops as messages through an attached cell of an IoEngine.
class EngineExecutor {
public:
    EngineExecutor(IoEngine& engine, CellId cell) : engine_(engine), cell_(cell) {}

    TraceResult execute(const TraceOp& op) {
        TraceResult r;
        IoRequest req;
        switch (op.call) {
            case Syscall::Open: req = IoRequest::open(op.path, op.flags, 0644); break;
            case Syscall::Close: req = IoRequest::close(fd_of(op.handle)); break;
            case Syscall::Write:
                r.payload = fill_bytes(op.fill_seed, op.len);
                req = IoRequest::write(fd_of(op.handle), r.payload);
                break;
            case Syscall::Read: req = IoRequest::read(fd_of(op.handle), op.len); break;
            case Syscall::Fsync: req = IoRequest::fsync(fd_of(op.handle)); break;
        }
        const auto c = engine_.call(cell_, req);
        r.result = c.result;
        r.errcode = c.ok() ? 0 : c.errcode;
        if (op.call == Syscall::Read) r.payload = c.payload;
        if (op.call == Syscall::Open) {
            if (c.ok()) fds_[op.handle] = static_cast<int>(c.result);
            r.fd = c.ok() ? static_cast<int>(c.result) : -1;
        } else {
            r.fd = fd_of(op.handle);
            if (op.call == Syscall::Close) fds_.erase(op.handle);
        }
        return r;
    }

private:
    int fd_of(int handle) const {
        auto it = fds_.find(handle);
        return it == fds_.end() ? -1 : it->second;
    }

    IoEngine& engine_;
    CellId cell_;
    std::map<int, int> fds_;
};

/// One trace line: `ticket,syscall,arg0,arg1,arg2,payload_hash`. Open lists
/// path, flags and the resulting fd; write lists fd, len, fill_seed; read
/// lists fd, requested len, bytes returned.
inline void write_trace_line(std::ostream& out, std::uint64_t ticket, const TraceOp& op, const TraceResult& r) {
    out << ticket << ',' << to_string(op.call) << ',';
    switch (op.call) {
        case Syscall::Open: out << op.path << ',' << op.flags << ',' << r.fd; break;
        case Syscall::Write: out << r.fd << ',' << op.len << ',' << op.fill_seed; break;
        case Syscall::Read: out << r.fd << ',' << op.len << ',' << r.result; break;
        case Syscall::Close:
        case Syscall::Fsync: out << r.fd << ",,"; break;
    }
    out << ",0x" << std::hex << fnv1a(r.payload) << std::dec << '\n';
}

/// Parses trace lines back into ops. Each open's recorded fd becomes the
/// handle of the file until it is closed.
inline std::vector<TraceOp> read_trace(std::istream& in) {
    std::vector<TraceOp> ops;
    std::map<int, int> handle_of_fd;
    int next_handle = 0;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line.front() == '#') continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() < 5) throw Error(ErrorCode::Config, "trace line " + std::to_string(lineno) + ": too few fields");
        auto num = [&](const std::string& s) { return s.empty() ? 0L : std::stol(s); };
        TraceOp op;
        const std::string& call = f[1];
        if (call == "open") {
            op.call = Syscall::Open;
            op.path = f[2];
            op.flags = static_cast<int>(num(f[3]));
            op.handle = next_handle++;
            handle_of_fd[static_cast<int>(num(f[4]))] = op.handle;
        } else {
            const int fd = static_cast<int>(num(f[2]));
            auto it = handle_of_fd.find(fd);
            op.handle = it == handle_of_fd.end() ? -1 : it->second;
            if (call == "write") {
                op.call = Syscall::Write;
                op.len = static_cast<std::uint32_t>(num(f[3]));
                op.fill_seed = static_cast<std::uint32_t>(std::stoul(f[4]));
            } else if (call == "read") {
                op.call = Syscall::Read;
                op.len = static_cast<std::uint32_t>(num(f[3]));
            } else if (call == "fsync") {
                op.call = Syscall::Fsync;
            } else if (call == "close") {
                op.call = Syscall::Close;
                handle_of_fd.erase(fd);
            } else {
                throw Error(ErrorCode::Config, "trace line " + std::to_string(lineno) + ": unknown syscall " + call);
            }
        }
        ops.push_back(std::move(op));
    }
    return ops;
}

/// Lists differences between two directory trees (regular files only).
inline std::vector<std::string> compare_directories(const std::filesystem::path& a, const std::filesystem::path& b) {
    namespace fs = std::filesystem;
    auto collect = [](const fs::path& root) {
        std::map<std::string, std::string> files;
        for (const auto& e : fs::recursive_directory_iterator(root)) {
            if (!e.is_regular_file()) continue;
            std::ifstream in(e.path(), std::ios::binary);
            std::ostringstream s;
            s << in.rdbuf();
            files[fs::relative(e.path(), root).string()] = s.str();
        }
        return files;
    };
    const auto fa = collect(a);
    const auto fb = collect(b);
    std::vector<std::string> diffs;
    for (const auto& [name, content] : fa) {
        auto it = fb.find(name);
        if (it == fb.end()) {
            diffs.push_back("only in " + a.string() + ": " + name);
        } else if (it->second != content) {
            diffs.push_back("contents differ: " + name);
        }
    }
    for (const auto& [name, _] : fb) {
        if (!fa.contains(name)) diffs.push_back("only in " + b.string() + ": " + name);
    }
    return diffs;
}

}  // namespace xcell
