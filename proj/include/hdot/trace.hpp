#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

namespace hdot {

enum class TraceKind : std::uint8_t {
    spawn,
    ready,
    start,
    body_done,
    complete,
    request_bound,
    request_done,
    steal,
};

const char* to_string(TraceKind k);
bool trace_kind_from_string(std::string_view s, TraceKind& out);

/// Well-known worker ids for non-worker execution contexts.
inline constexpr std::int32_t kMainContext = -1;
inline constexpr std::int32_t kProgressContext = -2;

struct TraceEvent {
    std::int64_t ts_ns = 0;
    std::int32_t rank = 0;
    std::int32_t worker = 0;
    std::uint64_t task = 0;
    TraceKind kind = TraceKind::spawn;
    std::string label;
};

/// Collects TraceEvents into per-context buffers. A plain buffer belongs to
/// exactly one thread and appends without synchronisation; shared buffers
/// (progress engine, cross-rank completion paths) lock internally. merged()
/// is called once after the run.
class TraceLog {
public:
    class Buffer {
    public:
        void emit(TraceEvent ev) {
            if (locked_) {
                std::lock_guard<std::mutex> g(mu_);
                events_.push_back(std::move(ev));
            } else {
                events_.push_back(std::move(ev));
            }
        }

    private:
        friend class TraceLog;
        explicit Buffer(bool locked) : locked_(locked) {}
        bool locked_;
        std::mutex mu_;
        std::vector<TraceEvent> events_;
    };

    TraceLog() : t0_(std::chrono::steady_clock::now()) {}

    Buffer* make_buffer(bool locked = false) {
        std::lock_guard<std::mutex> g(mu_);
        buffers_.emplace_back(new Buffer(locked));
        return buffers_.back().get();
    }

    std::int64_t now_ns() const {
        return std::chrono::duration_cast<std::chrono::nanoseconds>(
                   std::chrono::steady_clock::now() - t0_)
            .count();
    }

    /// All events from all buffers, sorted by timestamp.
    std::vector<TraceEvent> merged() const;

private:
    std::chrono::steady_clock::time_point t0_;
    mutable std::mutex mu_;
    std::vector<std::unique_ptr<Buffer>> buffers_;
};

/// JSON-lines trace file IO. One event per line, each line independently
/// parseable.
void write_trace_jsonl(const std::vector<TraceEvent>& events, const std::string& path);
std::vector<TraceEvent> read_trace_jsonl(const std::string& path);

}  // namespace hdot
