#include "hdot/runtime.hpp"

#include <algorithm>
#include <cassert>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <random>
#include <thread>

namespace hdot {

namespace {

// Canonical reduction operators. Identity comparison is by pointer.
template <typename T>
void fill_zero(void* dst, std::size_t count) {
    T* p = static_cast<T*>(dst);
    std::fill(p, p + count, T{});
}

template <typename T>
void combine_sum(void* dst, const void* src, std::size_t count) {
    T* d = static_cast<T*>(dst);
    const T* s = static_cast<const T*>(src);
    for (std::size_t i = 0; i < count; ++i) d[i] += s[i];
}

void fill_lowest_f64(void* dst, std::size_t count) {
    double* p = static_cast<double*>(dst);
    std::fill(p, p + count, -std::numeric_limits<double>::infinity());
}

void combine_max_f64(void* dst, const void* src, std::size_t count) {
    double* d = static_cast<double*>(dst);
    const double* s = static_cast<const double*>(src);
    for (std::size_t i = 0; i < count; ++i) d[i] = std::max(d[i], s[i]);
}

const ReductionOp kSumF64{"sum.f64", sizeof(double), &fill_zero<double>, &combine_sum<double>};
const ReductionOp kSumI64{"sum.i64", sizeof(std::int64_t), &fill_zero<std::int64_t>,
                          &combine_sum<std::int64_t>};
const ReductionOp kMaxF64{"max.f64", sizeof(double), &fill_lowest_f64, &combine_max_f64};

}  // namespace

const ReductionOp* red_sum_f64() { return &kSumF64; }
const ReductionOp* red_sum_i64() { return &kSumI64; }
const ReductionOp* red_max_f64() { return &kMaxF64; }

// ---------------------------------------------------------------------------
// Dependency graph internals.
//
// Every access of a task claims the covered fragments of its buffer, in
// program order, as nodes on per-fragment chains. Nested tasks' accesses
// claim nodes on a subchain hosted by the parent's node covering the same
// fragment, so an outer weak access reserves a position that its children
// later fill in ("graph pass-through"). A node is satisfied when every
// earlier node on its chain is released or commutes with it and the hosting
// node (transitively) is satisfied; a task is ready when all its strong
// nodes are satisfied. Strong nodes release when the task completes; weak
// nodes release per fragment once the owner's body returned and all hosted
// child nodes released; reduction nodes release when their scope combines.
// ---------------------------------------------------------------------------

enum class TaskState : std::uint8_t { created, blocked, ready, running, body_done, completed };

enum class ClaimKind : std::uint8_t { read, write, reduce, weak_read, weak_write };

namespace {

ClaimKind claim_kind(Mode m) {
    switch (m) {
        case Mode::in: return ClaimKind::read;
        case Mode::out:
        case Mode::inout: return ClaimKind::write;
        case Mode::weak_in: return ClaimKind::weak_read;
        case Mode::weak_out:
        case Mode::weak_inout: return ClaimKind::weak_write;
        case Mode::reduction: return ClaimKind::reduce;
    }
    return ClaimKind::write;
}

bool is_weak_claim(ClaimKind k) { return k == ClaimKind::weak_read || k == ClaimKind::weak_write; }

}  // namespace

struct ClaimNode;
struct AccessRec;
struct ReductionScope;

struct Chain {
    std::vector<ClaimNode*> nodes;  // owned via Impl::all_nodes
    std::size_t cursor = 0;         // nodes before cursor are released
    int unreleased = 0;
    ClaimNode* owner = nullptr;  // hosting node; null for a root chain
};

struct ClaimNode {
    TaskRec* task = nullptr;
    AccessRec* acc = nullptr;
    ClaimKind kind = ClaimKind::read;
    bool released = false;
    bool satisfied = false;
    std::uint64_t lo = 0, hi = 0;  // fragment bounds
    ReductionScope* scope = nullptr;
    Chain* chain = nullptr;
    std::unique_ptr<Chain> sub;  // created when the first child registers
};

struct ReductionScope {
    const ReductionOp* op = nullptr;
    BufferId buffer = 0;
    std::uint64_t lo = 0, hi = 0;
    std::vector<TaskRec*> members;
    std::size_t completed = 0;
    bool combined = false;
    std::vector<std::unique_ptr<std::byte[]>> slots;  // one per worker, lazy
    std::vector<ClaimNode*> nodes;                    // all instances, incl. clones
};

struct AccessRec {
    Access spec;
    std::vector<ClaimNode*> nodes;
    ReductionScope* scope = nullptr;
};

struct TaskRec {
    TaskId id = 0;
    std::string label;
    std::function<void(TaskContext&)> body;
    TaskRec* parent = nullptr;
    TaskState state = TaskState::created;
    std::uint32_t deps_pending = 0;
    std::uint32_t live_children = 0;
    std::uint32_t pending_requests = 0;
    bool body_returned = false;
    std::vector<std::unique_ptr<AccessRec>> accesses;
};

struct Fragment {
    std::uint64_t lo = 0, hi = 0;
    std::unique_ptr<Chain> chain;
};

struct BufferRec {
    std::uint64_t len = 0;
    std::byte* base = nullptr;
    std::size_t elem = 0;  // 0: dependency-only
    std::vector<Fragment> fragments;  // sorted, disjoint cover of [0, len)
};

struct Runtime::Impl {
    RuntimeConfig cfg;
    std::shared_ptr<ProgressState> progress;

    std::mutex graph_mu;
    std::condition_variable done_cv;  // completion changes, waited with graph_mu

    std::vector<BufferRec> buffers;
    std::vector<std::unique_ptr<TaskRec>> tasks;
    std::vector<std::unique_ptr<ClaimNode>> all_nodes;
    std::vector<std::unique_ptr<ReductionScope>> scopes;

    struct WorkerState {
        std::deque<TaskRec*> queue;
        std::mutex mu;
        std::mt19937_64 rng;
        TraceLog::Buffer* trace = nullptr;
        std::thread thread;
    };
    std::vector<std::unique_ptr<WorkerState>> workers;
    std::mutex sleep_mu;
    std::condition_variable sleep_cv;
    std::atomic<int> ready_count{0};

    std::atomic<bool> done{false};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex err_mu;

    TraceLog::Buffer* main_trace = nullptr;
    TraceLog::Buffer* async_trace = nullptr;  // request-done events, locked
    std::atomic<std::uint64_t> rr_push{0};

    bool started = false;
    bool shut_down = false;
    TaskRec* root = nullptr;

    // --- error handling ---

    void fail(std::exception_ptr e) {
        {
            std::lock_guard<std::mutex> g(err_mu);
            if (!first_error) first_error = e;
        }
        failed.store(true, std::memory_order_release);
        sleep_cv.notify_all();
        done_cv.notify_all();
    }

    bool aborting() const {
        return failed.load(std::memory_order_acquire) ||
               (progress && progress->poisoned.load(std::memory_order_acquire));
    }

    void throw_if_poisoned() const {
        if (progress && progress->poisoned.load(std::memory_order_acquire))
            throw WatchdogError(progress->diagnostic());
    }

    // --- tracing ---

    void emit(TraceLog::Buffer* buf, std::int64_t ts, int worker, const TaskRec* t,
              TraceKind kind) {
        if (!buf) return;
        buf->emit(TraceEvent{ts, cfg.rank, worker, t->id, kind, t->label});
    }

    TraceLog::Buffer* worker_buf(int w) {
        if (!cfg.trace) return nullptr;
        if (w == kMainContext) return main_trace;
        return workers[static_cast<std::size_t>(w)]->trace;
    }

    std::int64_t now() const { return cfg.trace ? cfg.trace->now_ns() : 0; }

    // --- graph engine ---

    struct Cascade {
        std::vector<TaskRec*> now_ready;
        std::deque<Chain*> dirty;
    };

    bool compatible(const ClaimNode* before, const ClaimNode* n) const {
        if (before->task == n->task) return true;
        const bool before_read = before->kind == ClaimKind::read || before->kind == ClaimKind::weak_read;
        const bool n_read = n->kind == ClaimKind::read || n->kind == ClaimKind::weak_read;
        if (before_read && n_read) return true;
        if (before->kind == ClaimKind::reduce && n->kind == ClaimKind::reduce &&
            before->scope == n->scope)
            return true;
        return false;
    }

    bool chain_entered(const Chain* c) const {
        while (c->owner) {
            if (!c->owner->satisfied) return false;
            c = c->owner->chain;
        }
        return true;
    }

    bool preds_ok(const Chain* c, std::size_t idx) const {
        for (std::size_t j = c->cursor; j < idx; ++j) {
            const ClaimNode* m = c->nodes[j];
            if (m->released) continue;
            if (!compatible(m, c->nodes[idx])) return false;
        }
        return true;
    }

    void mark_ready_locked(TaskRec* t, Cascade& casc) {
        t->state = TaskState::ready;
        casc.now_ready.push_back(t);
    }

    void satisfy(ClaimNode* n, Cascade& casc) {
        n->satisfied = true;
        if (is_weak_claim(n->kind)) {
            if (n->sub) casc.dirty.push_back(n->sub.get());
            return;
        }
        TaskRec* t = n->task;
        assert(t->deps_pending > 0);
        if (--t->deps_pending == 0 && t->state == TaskState::blocked) mark_ready_locked(t, casc);
    }

    void release_node(ClaimNode* n, Cascade& casc) {
        if (n->released) return;
        n->released = true;
        Chain* c = n->chain;
        --c->unreleased;
        casc.dirty.push_back(c);
        if (c->owner) try_release_weak(c->owner, casc);
    }

    void try_release_weak(ClaimNode* n, Cascade& casc) {
        if (n->released || !is_weak_claim(n->kind)) return;
        if (!n->task->body_returned) return;
        if (n->sub && n->sub->unreleased > 0) return;
        release_node(n, casc);
    }

    void scan_chain(Chain* c, Cascade& casc) {
        while (c->cursor < c->nodes.size() && c->nodes[c->cursor]->released) ++c->cursor;
        const bool entered = chain_entered(c);
        for (std::size_t i = c->cursor; i < c->nodes.size(); ++i) {
            ClaimNode* n = c->nodes[i];
            if (n->released) continue;
            if (is_weak_claim(n->kind) && n->task->body_returned &&
                (!n->sub || n->sub->unreleased == 0)) {
                // Transparent: body done and nothing registered underneath.
                release_node(n, casc);
                continue;
            }
            if (!n->satisfied && entered && preds_ok(c, i)) satisfy(n, casc);
        }
    }

    void process(Cascade& casc) {
        while (!casc.dirty.empty()) {
            Chain* c = casc.dirty.front();
            casc.dirty.pop_front();
            scan_chain(c, casc);
        }
    }

    // --- fragments ---

    BufferRec& buffer(BufferId id) {
        if (id >= buffers.size()) throw UsageError("unknown buffer id");
        return buffers[id];
    }

    ClaimNode* new_node(TaskRec* t, AccessRec* acc, ClaimKind kind, std::uint64_t lo,
                        std::uint64_t hi, Chain* chain) {
        all_nodes.push_back(std::make_unique<ClaimNode>());
        ClaimNode* n = all_nodes.back().get();
        n->task = t;
        n->acc = acc;
        n->kind = kind;
        n->lo = lo;
        n->hi = hi;
        n->chain = chain;
        return n;
    }

    void clone_chain(const Chain& src, Chain& dst, std::uint64_t lo, std::uint64_t hi) {
        dst.cursor = src.cursor;
        dst.unreleased = src.unreleased;
        for (const ClaimNode* n : src.nodes) {
            ClaimNode* n2 = new_node(n->task, n->acc, n->kind, lo, hi, &dst);
            n2->released = n->released;
            n2->satisfied = n->satisfied;
            n2->scope = n->scope;
            if (n->acc) n->acc->nodes.push_back(n2);
            if (n->scope) n->scope->nodes.push_back(n2);
            if (!n2->released && !n2->satisfied && !is_weak_claim(n2->kind))
                ++n2->task->deps_pending;
            if (n->sub) {
                n2->sub = std::make_unique<Chain>();
                n2->sub->owner = n2;
                clone_chain(*n->sub, *n2->sub, lo, hi);
            }
            dst.nodes.push_back(n2);
        }
    }

    // Split the fragment containing pos so that pos becomes a boundary.
    void ensure_boundary(BufferRec& b, std::uint64_t pos) {
        if (pos == 0 || pos >= b.len) return;
        auto it = std::upper_bound(b.fragments.begin(), b.fragments.end(), pos,
                                   [](std::uint64_t p, const Fragment& f) { return p < f.hi; });
        assert(it != b.fragments.end());
        Fragment& f = *it;
        if (f.lo == pos) return;
        Fragment right;
        right.lo = pos;
        right.hi = f.hi;
        right.chain = std::make_unique<Chain>();
        clone_chain(*f.chain, *right.chain, pos, f.hi);
        f.hi = pos;
        for (ClaimNode* n : f.chain->nodes) clamp_subtree(n, f.lo, pos);
        b.fragments.insert(it + 1, std::move(right));
    }

    void clamp_subtree(ClaimNode* n, std::uint64_t lo, std::uint64_t hi) {
        n->lo = lo;
        n->hi = hi;
        if (n->sub)
            for (ClaimNode* m : n->sub->nodes) clamp_subtree(m, lo, hi);
    }

    // Fragment index range covering [lo, hi) after boundaries are ensured.
    std::pair<std::size_t, std::size_t> fragment_span(BufferRec& b, std::uint64_t lo,
                                                      std::uint64_t hi) {
        auto first = std::lower_bound(b.fragments.begin(), b.fragments.end(), lo,
                                      [](const Fragment& f, std::uint64_t p) { return f.lo < p; });
        assert(first != b.fragments.end() && first->lo == lo);
        std::size_t i = static_cast<std::size_t>(first - b.fragments.begin());
        std::size_t j = i;
        while (j < b.fragments.size() && b.fragments[j].hi <= hi) ++j;
        assert(j > i && b.fragments[j - 1].hi == hi);
        return {i, j};
    }

    // --- registration ---

    AccessRec* find_host_access(TaskRec* parent, const Access& a) {
        for (auto& pa : parent->accesses) {
            if (!contains(pa->spec.region, a.region)) continue;
            if (pa->spec.mode == Mode::reduction) continue;
            if (may_write(a.mode) && !may_write(pa->spec.mode)) continue;
            return pa.get();
        }
        return nullptr;
    }

    Chain* host_chain(AccessRec* host, const Fragment& f) {
        for (ClaimNode* n : host->nodes) {
            if (n->lo == f.lo && n->hi == f.hi) {
                if (!n->sub) {
                    n->sub = std::make_unique<Chain>();
                    n->sub->owner = n;
                }
                return n->sub.get();
            }
        }
        throw Error("internal: host access has no node on fragment");
    }

    ReductionScope* decide_scope(TaskRec* t, const Access& a,
                                 const std::vector<Chain*>& chains) {
        ReductionScope* open = nullptr;
        std::size_t open_tails = 0;
        for (Chain* c : chains) {
            if (c->nodes.empty()) continue;
            ClaimNode* tail = c->nodes.back();
            if (tail->kind == ClaimKind::reduce && !tail->scope->combined) {
                ++open_tails;
                if (!open) open = tail->scope;
                else if (open != tail->scope)
                    throw ProtocolError("reduction scopes overlap inconsistently");
            }
        }
        if (open_tails == 0) {
            scopes.push_back(std::make_unique<ReductionScope>());
            ReductionScope* s = scopes.back().get();
            s->op = a.op;
            s->buffer = a.region.buffer;
            s->lo = a.region.lo;
            s->hi = a.region.hi;
            s->slots.resize(static_cast<std::size_t>(cfg.workers));
            s->members.push_back(t);
            return s;
        }
        if (open_tails != chains.size())
            throw ProtocolError("reduction region partially overlaps an open reduction scope");
        if (open->op != a.op)
            throw ProtocolError(std::string("mixing reduction operators on one open scope: ") +
                                open->op->name + " vs " + a.op->name);
        if (open->lo != a.region.lo || open->hi != a.region.hi || open->buffer != a.region.buffer)
            throw ProtocolError("reduction region does not match the open scope region");
        open->members.push_back(t);
        return open;
    }

    void register_task_locked(TaskRec* t, Cascade& casc) {
        for (auto& ar : t->accesses) {
            const Access& a = ar->spec;
            BufferRec& b = buffer(a.region.buffer);
            if (a.region.lo >= a.region.hi || a.region.hi > b.len)
                throw UsageError("bad access region");
            if (a.mode == Mode::reduction) {
                if (!a.op) throw UsageError("reduction access without operator");
                if (!b.base) throw UsageError("reduction target buffer is not bound to storage");
                if (b.elem != a.op->elem_size)
                    throw UsageError("reduction operator element size mismatch");
            }

            AccessRec* host = nullptr;
            if (t->parent && t->parent->parent != nullptr) {
                // Nested task (parent is not the root): containment required.
                host = find_host_access(t->parent, a);
                if (!host)
                    throw ContainmentError("nested task access [" + std::to_string(a.region.lo) +
                                           "," + std::to_string(a.region.hi) +
                                           ") not contained in any region declared by parent '" +
                                           t->parent->label + "'");
            } else if (t->parent && t->parent->parent == nullptr) {
                // Child of the root context: registers on root chains.
                host = nullptr;
            }

            ensure_boundary(b, a.region.lo);
            ensure_boundary(b, a.region.hi);
            auto [i0, i1] = fragment_span(b, a.region.lo, a.region.hi);

            std::vector<Chain*> chains;
            chains.reserve(i1 - i0);
            for (std::size_t i = i0; i < i1; ++i) {
                Fragment& f = b.fragments[i];
                chains.push_back(host ? host_chain(host, f) : f.chain.get());
            }

            if (a.mode == Mode::reduction) ar->scope = decide_scope(t, a, chains);

            const ClaimKind kind = claim_kind(a.mode);
            for (std::size_t ci = 0; ci < chains.size(); ++ci) {
                Chain* c = chains[ci];
                const Fragment& f = b.fragments[i0 + ci];
                ClaimNode* n = new_node(t, ar.get(), kind, f.lo, f.hi, c);
                n->scope = ar->scope;
                ar->nodes.push_back(n);
                if (ar->scope) ar->scope->nodes.push_back(n);
                c->nodes.push_back(n);
                ++c->unreleased;
                const std::size_t idx = c->nodes.size() - 1;
                if (chain_entered(c) && preds_ok(c, idx)) {
                    n->satisfied = true;
                    // A fresh node has no subchain yet; nothing to cascade.
                } else if (!is_weak_claim(kind)) {
                    ++t->deps_pending;
                }
            }
        }
        if (t->deps_pending == 0) {
            t->state = TaskState::ready;
        } else {
            t->state = TaskState::blocked;
        }
    }

    // --- completion ---

    void combine_scope(ReductionScope* s, Cascade& casc) {
        BufferRec& b = buffers[s->buffer];
        std::byte* target = b.base + s->lo * b.elem;
        const std::size_t count = static_cast<std::size_t>(s->hi - s->lo);
        for (auto& slot : s->slots) {
            if (!slot) continue;
            s->op->combine(target, slot.get(), count);
            slot.reset();
        }
        s->combined = true;
        for (ClaimNode* n : s->nodes) release_node(n, casc);
    }

    void complete_locked(TaskRec* t, Cascade& casc) {
        assert(t->state != TaskState::completed);
        t->state = TaskState::completed;
        if (progress) progress->bump();
        emit(async_trace ? async_trace : main_trace, now(), kProgressContext, t,
             TraceKind::complete);
        for (auto& ar : t->accesses) {
            if (ar->scope) {
                ReductionScope* s = ar->scope;
                ++s->completed;
                if (s->completed == s->members.size() && !s->combined) combine_scope(s, casc);
            } else if (!is_weak(ar->spec.mode)) {
                for (ClaimNode* n : ar->nodes) release_node(n, casc);
            } else {
                for (ClaimNode* n : ar->nodes) try_release_weak(n, casc);
            }
        }
        TaskRec* p = t->parent;
        if (p) {
            assert(p->live_children > 0);
            --p->live_children;
            if (p->live_children == 0 && p->body_returned && p->pending_requests == 0 &&
                p->state != TaskState::completed)
                complete_locked(p, casc);
        }
        done_cv.notify_all();
    }

    void maybe_complete_locked(TaskRec* t, Cascade& casc) {
        if (t->body_returned && t->live_children == 0 && t->pending_requests == 0 &&
            t->state != TaskState::completed)
            complete_locked(t, casc);
    }

    // --- scheduling ---

    void push_ready(const std::vector<TaskRec*>& ts, int from_worker) {
        if (ts.empty()) return;
        for (TaskRec* t : ts) {
            std::size_t target;
            if (from_worker >= 0) {
                target = static_cast<std::size_t>(from_worker);
            } else {
                target = static_cast<std::size_t>(rr_push.fetch_add(1)) % workers.size();
            }
            WorkerState& w = *workers[target];
            {
                std::lock_guard<std::mutex> g(w.mu);
                w.queue.push_back(t);
            }
            ready_count.fetch_add(1, std::memory_order_release);
        }
        std::lock_guard<std::mutex> g(sleep_mu);
        sleep_cv.notify_all();
    }

    TaskRec* try_pop(int w) {
        WorkerState& me = *workers[static_cast<std::size_t>(w)];
        {
            std::lock_guard<std::mutex> g(me.mu);
            if (!me.queue.empty()) {
                TaskRec* t = me.queue.front();
                me.queue.pop_front();
                ready_count.fetch_sub(1, std::memory_order_release);
                return t;
            }
        }
        if (cfg.steal == StealPolicy::no_steal || workers.size() == 1) return nullptr;
        // Random victim, FIFO steal.
        std::size_t start = me.rng() % workers.size();
        for (std::size_t k = 0; k < workers.size(); ++k) {
            std::size_t v = (start + k) % workers.size();
            if (v == static_cast<std::size_t>(w)) continue;
            WorkerState& victim = *workers[v];
            std::lock_guard<std::mutex> g(victim.mu);
            if (!victim.queue.empty()) {
                TaskRec* t = victim.queue.front();
                victim.queue.pop_front();
                ready_count.fetch_sub(1, std::memory_order_release);
                if (auto* buf = worker_buf(w))
                    buf->emit(TraceEvent{now(), cfg.rank, w, t->id, TraceKind::steal, t->label});
                return t;
            }
        }
        return nullptr;
    }

    void execute(Runtime* rt, TaskRec* t, int w) {
        {
            std::lock_guard<std::mutex> g(graph_mu);
            t->state = TaskState::running;
        }
        if (progress) progress->bump();
        emit(worker_buf(w), now(), w, t, TraceKind::start);
        TaskContext ctx(rt, t, w);
        try {
            t->body(ctx);
        } catch (...) {
            fail(std::current_exception());
        }
        t->body = nullptr;
        emit(worker_buf(w), now(), w, t, TraceKind::body_done);
        Cascade casc;
        {
            std::lock_guard<std::mutex> g(graph_mu);
            t->body_returned = true;
            if (t->state == TaskState::running) t->state = TaskState::body_done;
            for (auto& ar : t->accesses)
                if (is_weak(ar->spec.mode))
                    for (ClaimNode* n : ar->nodes) try_release_weak(n, casc);
            process(casc);
            maybe_complete_locked(t, casc);
            process(casc);
        }
        push_ready(casc.now_ready, w);
    }

    void worker_loop(Runtime* rt, int w) {
        while (true) {
            if (done.load(std::memory_order_acquire) || aborting()) break;
            TaskRec* t = try_pop(w);
            if (t) {
                execute(rt, t, w);
                continue;
            }
            std::unique_lock<std::mutex> lk(sleep_mu);
            sleep_cv.wait_for(lk, std::chrono::microseconds(200), [&] {
                return ready_count.load(std::memory_order_acquire) > 0 ||
                       done.load(std::memory_order_acquire) || aborting();
            });
        }
    }
};

// ---------------------------------------------------------------------------
// Runtime public surface.
// ---------------------------------------------------------------------------

Runtime::Runtime(RuntimeConfig cfg) : impl_(std::make_unique<Impl>()) {
    if (cfg.workers < 1) throw UsageError("workers must be >= 1");
    impl_->cfg = cfg;
    impl_->progress = cfg.progress;
    for (int i = 0; i < cfg.workers; ++i) {
        auto ws = std::make_unique<Impl::WorkerState>();
        ws->rng.seed(cfg.seed * 0x9e3779b97f4a7c15ULL + 0x1234567ULL + static_cast<std::uint64_t>(i));
        if (cfg.trace) ws->trace = cfg.trace->make_buffer();
        impl_->workers.push_back(std::move(ws));
    }
    if (cfg.trace) {
        impl_->main_trace = cfg.trace->make_buffer();
        impl_->async_trace = cfg.trace->make_buffer(/*locked=*/true);
    }
}

Runtime::~Runtime() = default;

const RuntimeConfig& Runtime::config() const { return impl_->cfg; }

BufferId Runtime::register_buffer(std::uint64_t len) {
    return register_bound(nullptr, len, 0);
}

BufferId Runtime::register_bound(void* data, std::uint64_t len, std::size_t elem_size) {
    if (len == 0) throw UsageError("register_buffer: len must be > 0");
    std::lock_guard<std::mutex> g(impl_->graph_mu);
    BufferRec b;
    b.len = len;
    b.base = static_cast<std::byte*>(data);
    b.elem = data ? elem_size : 0;
    Fragment f;
    f.lo = 0;
    f.hi = len;
    f.chain = std::make_unique<Chain>();
    b.fragments.push_back(std::move(f));
    impl_->buffers.push_back(std::move(b));
    return static_cast<BufferId>(impl_->buffers.size() - 1);
}

std::span<std::byte> Runtime::resolve(const RegionRef& region) {
    std::lock_guard<std::mutex> g(impl_->graph_mu);
    BufferRec& b = impl_->buffer(region.buffer);
    if (!b.base) throw UsageError("resolve: buffer is not bound to storage");
    if (region.lo >= region.hi || region.hi > b.len) throw UsageError("resolve: bad region");
    return {b.base + region.lo * b.elem, (region.hi - region.lo) * b.elem};
}

std::size_t Runtime::elem_size(BufferId id) const {
    std::lock_guard<std::mutex> g(impl_->graph_mu);
    return impl_->buffer(id).elem;
}

void Runtime::run(std::function<void(TaskContext&)> root) {
    Impl& im = *impl_;
    if (im.started || im.shut_down) throw UsageError("runtime already ran");
    im.started = true;

    im.tasks.push_back(std::make_unique<TaskRec>());
    TaskRec* rt_root = im.tasks.back().get();
    rt_root->id = 0;
    rt_root->label = "main";
    rt_root->state = TaskState::running;
    im.root = rt_root;

    for (int i = 0; i < im.cfg.workers; ++i) {
        Impl::WorkerState* ws = im.workers[static_cast<std::size_t>(i)].get();
        ws->thread = std::thread([this, i] { impl_->worker_loop(this, i); });
    }

    TaskContext ctx(this, rt_root, kMainContext);
    try {
        root(ctx);
        ctx.taskwait();  // implicit final taskwait
    } catch (...) {
        im.fail(std::current_exception());
    }

    {
        Impl::Cascade casc;
        std::lock_guard<std::mutex> g(im.graph_mu);
        rt_root->body_returned = true;
        im.maybe_complete_locked(rt_root, casc);
        im.process(casc);
        // Root spawns nothing after its body; any now_ready here is unreachable.
    }

    im.done.store(true, std::memory_order_release);
    im.sleep_cv.notify_all();
    for (auto& ws : im.workers)
        if (ws->thread.joinable()) ws->thread.join();
    im.shut_down = true;

    if (im.failed.load()) {
        std::lock_guard<std::mutex> g(im.err_mu);
        if (im.first_error) std::rethrow_exception(im.first_error);
        throw Error("runtime failed");
    }
    if (rt_root->state != TaskState::completed) throw Error("runtime ended with incomplete tasks");
}

void Runtime::notify_request_done(TaskId task) {
    Impl& im = *impl_;
    Impl::Cascade casc;
    {
        std::lock_guard<std::mutex> g(im.graph_mu);
        if (task >= im.tasks.size()) throw UsageError("notify_request_done: unknown task");
        TaskRec* t = im.tasks[task].get();
        if (t->pending_requests == 0)
            throw ProtocolError("notify_request_done without a matching defer_completion");
        --t->pending_requests;
        if (im.async_trace)
            im.async_trace->emit(TraceEvent{im.now(), im.cfg.rank, kProgressContext, t->id,
                                            TraceKind::request_done, t->label});
        im.maybe_complete_locked(t, casc);
        im.process(casc);
    }
    if (im.progress) im.progress->bump();
    im.push_ready(casc.now_ready, kMainContext);
}

// ---------------------------------------------------------------------------
// TaskContext.
// ---------------------------------------------------------------------------

TaskId TaskContext::spawn(std::vector<Access> accesses, std::function<void(TaskContext&)> body,
                          std::string label) {
    Runtime::Impl& im = *rt_->impl_;
    if (im.shut_down) throw UsageError("spawn after runtime shutdown");
    Runtime::Impl::Cascade casc;
    TaskId id;
    bool ready_now = false;
    std::int64_t ts;
    {
        std::lock_guard<std::mutex> g(im.graph_mu);
        im.tasks.push_back(std::make_unique<TaskRec>());
        TaskRec* t = im.tasks.back().get();
        id = static_cast<TaskId>(im.tasks.size() - 1);
        t->id = id;
        t->label = std::move(label);
        t->body = std::move(body);
        t->parent = task_;
        ++task_->live_children;
        for (auto& a : accesses) {
            t->accesses.push_back(std::make_unique<AccessRec>());
            t->accesses.back()->spec = a;
        }
        im.register_task_locked(t, casc);
        im.process(casc);
        ready_now = (t->state == TaskState::ready);
        ts = im.now();
        if (auto* buf = im.worker_buf(worker_)) {
            im.emit(buf, ts, worker_, t, TraceKind::spawn);
            if (ready_now) im.emit(buf, ts, worker_, t, TraceKind::ready);
        }
        if (ready_now) casc.now_ready.push_back(t);
        // Tasks made ready transitively by registration (none in practice,
        // registration only adds constraints) are in casc.now_ready already.
        for (TaskRec* rt : casc.now_ready)
            if (rt->state == TaskState::blocked) rt->state = TaskState::ready;
    }
    // Emit `ready` for tasks that became ready other than the spawned one.
    if (im.cfg.trace) {
        for (TaskRec* t : casc.now_ready) {
            if (t->id == id) continue;
            if (auto* buf = im.worker_buf(worker_))
                im.emit(buf, im.now(), worker_, t, TraceKind::ready);
        }
    }
    im.push_ready(casc.now_ready, worker_);
    return id;
}

void TaskContext::taskwait() {
    Runtime::Impl& im = *rt_->impl_;
    if (worker_ == kMainContext) {
        std::unique_lock<std::mutex> lk(im.graph_mu);
        im.done_cv.wait(lk, [&] { return task_->live_children == 0 || im.aborting(); });
        lk.unlock();
        im.throw_if_poisoned();
        if (im.failed.load()) {
            // Surface worker-side failures to the main context.
            std::lock_guard<std::mutex> g(im.err_mu);
            if (im.first_error) std::rethrow_exception(im.first_error);
        }
        return;
    }
    // Help while waiting: run other ready tasks on this worker.
    while (true) {
        {
            std::lock_guard<std::mutex> g(im.graph_mu);
            if (task_->live_children == 0) return;
        }
        im.throw_if_poisoned();
        if (im.failed.load()) return;  // unwind quietly; run() reports the first error
        TaskRec* t = im.try_pop(worker_);
        if (t) {
            im.execute(rt_, t, worker_);
            continue;
        }
        std::unique_lock<std::mutex> lk(im.sleep_mu);
        im.sleep_cv.wait_for(lk, std::chrono::microseconds(100));
    }
}

void TaskContext::defer_completion(int n) {
    if (n < 0) throw UsageError("defer_completion: negative count");
    if (!is_task()) throw UsageError("defer_completion outside a task");
    if (n == 0) return;
    Runtime::Impl& im = *rt_->impl_;
    std::lock_guard<std::mutex> g(im.graph_mu);
    task_->pending_requests += static_cast<std::uint32_t>(n);
}

void* TaskContext::reduction_slot_raw(std::size_t access_index, std::size_t elem_size) {
    Runtime::Impl& im = *rt_->impl_;
    if (access_index >= task_->accesses.size()) throw UsageError("reduction_slot: bad index");
    AccessRec* ar = task_->accesses[access_index].get();
    if (!ar->scope) throw UsageError("reduction_slot: access is not a reduction");
    if (ar->scope->op->elem_size != elem_size)
        throw UsageError("reduction_slot: element type mismatch");
    if (worker_ < 0) throw UsageError("reduction_slot: no worker context");
    std::lock_guard<std::mutex> g(im.graph_mu);
    ReductionScope* s = ar->scope;
    auto& slot = s->slots[static_cast<std::size_t>(worker_)];
    if (!slot) {
        const std::size_t count = static_cast<std::size_t>(s->hi - s->lo);
        slot.reset(new std::byte[count * s->op->elem_size]);
        s->op->fill_identity(slot.get(), count);
    }
    return slot.get();
}

bool TaskContext::is_task() const { return task_->parent != nullptr || task_->id != 0; }

int TaskContext::rank() const { return rt_->impl_->cfg.rank; }

TaskId TaskContext::id() const { return task_->id; }

}  // namespace hdot
