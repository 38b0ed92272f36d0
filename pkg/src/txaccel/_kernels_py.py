"""Pure-Python list scheduling and event replay.

Mirrors the compiled kernels line for line; used when the extension is
not built and as the oracle in equivalence tests.
"""
from __future__ import annotations

import heapq

import numpy as np

MEM = 4
NCLS = 4
BUF_ACT, BUF_WEIGHT, BUF_MASK = 0, 1, 2

STATUS_OK = 0
STATUS_OVERFLOW = 1
STATUS_DEADLOCK = 2


def _successors(n, dep_ptr, dep_idx):
    cnt = np.zeros(n + 1, dtype=np.int64)
    for o in range(n):
        for e in range(dep_ptr[o], dep_ptr[o + 1]):
            cnt[dep_idx[e] + 1] += 1
    ptr = np.cumsum(cnt)
    idx = np.empty(ptr[-1], dtype=np.int64)
    fill = ptr[:-1].copy()
    for o in range(n):
        for e in range(dep_ptr[o], dep_ptr[o + 1]):
            d = dep_idx[e]
            idx[fill[d]] = o
            fill[d] += 1
    return ptr, idx


def _insert_pool(row, w, f):
    """Replace the w smallest (leading) free times with f, keep sorted."""
    rest = row[w:]
    pos = int(np.searchsorted(rest, f, side="right"))
    row[:pos] = rest[:pos]
    row[pos:pos + w] = f
    # rest[pos:] already sits at row[pos + w:]


def list_schedule(cls, width, dur, dep_ptr, dep_idx, num_pes, module_count, policy=0):
    """Greedy list scheduling. Ready ops are taken lowest id first; compute
    ops go to the PE with the earliest start for their module class, then
    fewest operands produced elsewhere, then least accumulated work, then
    lowest index. Memory ops share one pipe. Returns (pe, est_start)."""
    n = len(cls)
    cls = np.asarray(cls, dtype=np.int64)
    width = np.asarray(width, dtype=np.int64)
    dur = np.asarray(dur, dtype=np.int64)
    dep_ptr = np.asarray(dep_ptr, dtype=np.int64)
    dep_idx = np.asarray(dep_idx, dtype=np.int64)
    succ_ptr, succ_idx = _successors(n, dep_ptr, dep_idx)
    remaining = np.diff(dep_ptr).astype(np.int64)
    ready_t = np.zeros(n, dtype=np.int64)
    pe = np.full(n, -1, dtype=np.int32)
    est = np.zeros(n, dtype=np.int64)
    pools = [np.zeros((num_pes, max(1, int(module_count[c]))), dtype=np.int64) for c in range(NCLS)]
    load = np.zeros(num_pes, dtype=np.int64)
    nonloc = np.zeros(num_pes, dtype=np.int64)
    pidx = np.arange(num_pes)
    mem_free = 0
    rr = 0
    heap = [o for o in range(n) if remaining[o] == 0]
    heapq.heapify(heap)
    done = 0
    while heap:
        o = heapq.heappop(heap)
        done += 1
        c = cls[o]
        if c == MEM:
            s = max(ready_t[o], mem_free)
            mem_free = s + dur[o]
        else:
            w = width[o]
            pool = pools[c]
            if policy == 1:
                p = rr % num_pes
                rr += 1
            else:
                total = 0
                touched = []
                for e in range(dep_ptr[o], dep_ptr[o + 1]):
                    q = pe[dep_idx[e]]
                    if q >= 0:
                        nonloc[q] -= 1
                        total += 1
                        touched.append(q)
                starts = np.maximum(ready_t[o], pool[:, w - 1])
                nl = nonloc + total
                cand = starts == starts.min()
                nlc = np.where(cand, nl, np.iinfo(np.int64).max)
                cand &= nlc == nlc.min()
                lc = np.where(cand, load, np.iinfo(np.int64).max)
                cand &= lc == lc.min()
                p = int(pidx[cand][0])
                for q in touched:
                    nonloc[q] += 1
            s = max(ready_t[o], pool[p, w - 1])
            _insert_pool(pool[p], w, s + dur[o])
            load[p] += dur[o] * w
            pe[o] = p
        est[o] = s
        f = s + dur[o]
        for e in range(succ_ptr[o], succ_ptr[o + 1]):
            u = succ_idx[e]
            if f > ready_t[u]:
                ready_t[u] = f
            remaining[u] -= 1
            if remaining[u] == 0:
                heapq.heappush(heap, u)
    if done != n:
        raise ValueError("dependency graph has a cycle")
    return pe, est


def replay(cls, pe, width, dur, dep_ptr, dep_idx, order, num_pes, module_count,
           mem_latency, bank, num_banks, res_buf, res_bytes, attached, capacity):
    """Event-driven execution of in-order per-(PE, class) queues and one
    in-order memory stream. Returns (start, finish, peak[3], spill, status,
    blocked_op)."""
    n = len(cls)
    cls = np.asarray(cls, dtype=np.int64)
    pe = np.asarray(pe, dtype=np.int64)
    width = np.asarray(width, dtype=np.int64)
    dur = np.asarray(dur, dtype=np.int64)
    dep_ptr = np.asarray(dep_ptr, dtype=np.int64)
    dep_idx = np.asarray(dep_idx, dtype=np.int64)
    succ_ptr, succ_idx = _successors(n, dep_ptr, dep_idx)
    remaining = np.diff(dep_ptr).astype(np.int64)
    users = np.diff(succ_ptr).astype(np.int64)
    ready_t = np.zeros(n, dtype=np.int64)
    start = np.full(n, -1, dtype=np.int64)
    finish = np.full(n, -1, dtype=np.int64)
    delegated = np.zeros(n, dtype=bool)
    for o in range(n):
        if attached[o] >= 0:
            delegated[attached[o]] = True

    nq = num_pes * NCLS
    queues = [[] for _ in range(nq)]
    mem = []
    for o in order:
        if cls[o] == MEM:
            mem.append(int(o))
        else:
            queues[pe[o] * NCLS + cls[o]].append(int(o))
    qh = [0] * nq
    qlast = [0] * nq
    pools = [np.zeros(max(1, int(module_count[q % NCLS])), dtype=np.int64) for q in range(nq)]
    mh = 0
    mem_last = 0
    bus_free = 0
    bank_free = np.zeros(max(1, num_banks), dtype=np.int64)
    mem_blocked = False
    occ = [0, 0, 0]
    peak = [0, 0, 0]
    spill = 0
    heap = []
    status = STATUS_OK
    blocked_op = -1

    def issue_queue(q):
        row = pools[q]
        while qh[q] < len(queues[q]):
            o = queues[q][qh[q]]
            if remaining[o] > 0:
                break
            w = width[o]
            s = max(ready_t[o], qlast[q], row[w - 1])
            f = s + dur[o]
            _insert_pool(row, w, f)
            qlast[q] = s
            start[o] = s
            finish[o] = f
            heapq.heappush(heap, (f, o))
            qh[q] += 1

    def issue_mem(now, force=False):
        nonlocal mh, mem_last, bus_free, mem_blocked, status, blocked_op, spill
        while mh < len(mem):
            o = mem[mh]
            if remaining[o] > 0:
                return
            s = max(ready_t[o], mem_last, bank_free[bank[o]])
            if res_buf[o] == BUF_WEIGHT:
                b = res_bytes[o]
                if b > capacity[BUF_WEIGHT]:
                    status = STATUS_OVERFLOW
                    blocked_op = o
                    return
                if occ[BUF_WEIGHT] + b > capacity[BUF_WEIGHT]:
                    if not force:
                        mem_blocked = True
                        blocked_op = o
                        return
                    # nothing in flight can free space: evict, refetch later
                    spill += min(b, occ[BUF_WEIGHT] + b - capacity[BUF_WEIGHT])
                    force = False
                if mem_blocked:
                    s = max(s, now)
                occ[BUF_WEIGHT] += b
                if occ[BUF_WEIGHT] > peak[BUF_WEIGHT]:
                    peak[BUF_WEIGHT] = occ[BUF_WEIGHT]
            mem_blocked = False
            blocked_op = -1
            data = max(s + mem_latency, bus_free)
            f = data + dur[o]
            bus_free = f
            bank_free[bank[o]] = f
            mem_last = s
            start[o] = s
            finish[o] = f
            heapq.heappush(heap, (f, o))
            mh += 1

    def free(o):
        b = res_buf[o]
        if b >= 0:
            occ[b] -= res_bytes[o]

    def release(o):
        if not delegated[o]:
            free(o)
        if attached[o] >= 0:
            free(attached[o])

    for q in range(nq):
        if queues[q]:
            issue_queue(q)
    issue_mem(0)
    done = 0
    t = 0
    while True:
        if not heap:
            if status == STATUS_OK and mem_blocked and mh < len(mem):
                issue_mem(t, True)
                continue
            break
        if status != STATUS_OK:
            break
        t, o = heapq.heappop(heap)
        done += 1
        b = res_buf[o]
        if b == BUF_ACT or b == BUF_MASK:
            occ[b] += res_bytes[o]
            if occ[b] > peak[b]:
                peak[b] = occ[b]
            if occ[b] > capacity[b]:
                spill += min(res_bytes[o], occ[b] - capacity[b])
        if users[o] == 0:
            release(o)
        for e in range(dep_ptr[o], dep_ptr[o + 1]):
            d = dep_idx[e]
            users[d] -= 1
            if users[d] == 0:
                release(d)
        for e in range(succ_ptr[o], succ_ptr[o + 1]):
            u = succ_idx[e]
            if t > ready_t[u]:
                ready_t[u] = t
            remaining[u] -= 1
            if remaining[u] == 0 and cls[u] != MEM:
                issue_queue(pe[u] * NCLS + cls[u])
        issue_mem(t)
    if status == STATUS_OK and done != n:
        status = STATUS_OVERFLOW if mem_blocked else STATUS_DEADLOCK
    return start, finish, np.array(peak, dtype=np.int64), int(spill), int(status), int(blocked_op)
