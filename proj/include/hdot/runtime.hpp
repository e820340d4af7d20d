#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "hdot/errors.hpp"
#include "hdot/region.hpp"
#include "hdot/trace.hpp"

namespace hdot {

class TaskContext;
struct TaskRec;

/// Shared liveness state between ranks, the communicator and the watchdog.
/// Every unit of global progress (task start/completion, message match,
/// request completion) bumps the tick counter; the watchdog aborts the run
/// when it stalls.
struct ProgressState {
    std::atomic<std::uint64_t> ticks{0};
    std::atomic<bool> poisoned{false};

    void bump() { ticks.fetch_add(1, std::memory_order_relaxed); }

    void poison(const std::string& why) {
        {
            std::lock_guard<std::mutex> g(mu_);
            if (diagnostic_.empty()) diagnostic_ = why;
        }
        poisoned.store(true, std::memory_order_release);
    }

    std::string diagnostic() const {
        std::lock_guard<std::mutex> g(mu_);
        return diagnostic_;
    }

private:
    mutable std::mutex mu_;
    std::string diagnostic_;
};

enum class StealPolicy : std::uint8_t { random_victim, no_steal };

struct RuntimeConfig {
    int workers = 1;
    std::uint64_t seed = 0;
    int rank = 0;
    StealPolicy steal = StealPolicy::random_victim;
    TraceLog* trace = nullptr;                 // optional
    std::shared_ptr<ProgressState> progress;   // optional; shared when multi-rank
};

/// One rank's task runtime: buffer registry, dependency graph, worker pool.
class Runtime {
public:
    explicit Runtime(RuntimeConfig cfg = {});
    ~Runtime();

    Runtime(const Runtime&) = delete;
    Runtime& operator=(const Runtime&) = delete;

    /// Register a dependency-only buffer of len elements (len > 0).
    BufferId register_buffer(std::uint64_t len);

    /// Register a buffer bound to real storage. Bound buffers can be used as
    /// reduction targets and as message payload/destination regions.
    template <typename T>
    BufferId register_buffer(std::span<T> storage) {
        return register_bound(storage.data(), storage.size(), sizeof(T));
    }

    /// Resolve a region of a bound buffer to its storage bytes.
    std::span<std::byte> resolve(const RegionRef& region);

    /// Element size of a bound buffer (0 for dependency-only buffers).
    std::size_t elem_size(BufferId id) const;

    /// Execute root as the main context; returns after an implicit final
    /// taskwait with every task completed, or throws the first error.
    void run(std::function<void(TaskContext&)> root);

    /// Progress-engine callback: one bound request of the task finished.
    void notify_request_done(TaskId task);

    const RuntimeConfig& config() const;

    struct Impl;

private:
    friend class TaskContext;
    BufferId register_bound(void* data, std::uint64_t len, std::size_t elem_size);
    std::unique_ptr<Impl> impl_;
};

/// Execution context handed to every task body and to the root body. All
/// spawning, synchronisation, deferral and reduction-slot access goes
/// through it.
class TaskContext {
public:
    /// Create a task. Containment of nested accesses against the parent's
    /// declared regions is validated here. Returns the task id.
    TaskId spawn(std::vector<Access> accesses, std::function<void(TaskContext&)> body,
                 std::string label = {});

    /// Block until every task created by this context so far (and all their
    /// descendants) has completed. Worker contexts execute other ready tasks
    /// while they wait.
    void taskwait();

    /// Defer this task's completion until n notify_request_done calls arrive.
    /// May be called repeatedly; counts accumulate.
    void defer_completion(int n);

    /// Private reduction slot for the reduction access at access_index,
    /// initialised to the operator's identity on first touch per worker.
    template <typename T>
    T* reduction_slot(std::size_t access_index) {
        return static_cast<T*>(reduction_slot_raw(access_index, sizeof(T)));
    }

    bool is_task() const;  // false only for the root context
    int worker() const { return worker_; }
    int rank() const;
    TaskId id() const;
    Runtime& runtime() const { return *rt_; }

private:
    friend class Runtime;
    friend struct Runtime::Impl;
    TaskContext(Runtime* rt, TaskRec* task, int worker)
        : rt_(rt), task_(task), worker_(worker) {}
    void* reduction_slot_raw(std::size_t access_index, std::size_t elem_size);

    Runtime* rt_;
    TaskRec* task_;
    int worker_;
};

}  // namespace hdot
