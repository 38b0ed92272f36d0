# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled list scheduling and event replay; same contract as _kernels_py."""
import numpy as np
cimport numpy as cnp

ctypedef long long i64

cdef int MEM = 4
cdef int NCLS = 4
cdef int BUF_WEIGHT = 1


# ---------------------------------------------------------------- heaps

cdef inline bint _less(i64[:] ht, i64[:] ho, Py_ssize_t a, Py_ssize_t b) nogil:
    if ht[a] != ht[b]:
        return ht[a] < ht[b]
    return ho[a] < ho[b]


cdef inline void _swap(i64[:] ht, i64[:] ho, Py_ssize_t a, Py_ssize_t b) nogil:
    cdef i64 t = ht[a]
    ht[a] = ht[b]
    ht[b] = t
    t = ho[a]
    ho[a] = ho[b]
    ho[b] = t


cdef inline void _push(i64[:] ht, i64[:] ho, Py_ssize_t *size, i64 t, i64 o) nogil:
    cdef Py_ssize_t i = size[0]
    cdef Py_ssize_t p
    ht[i] = t
    ho[i] = o
    size[0] += 1
    while i > 0:
        p = (i - 1) >> 1
        if _less(ht, ho, i, p):
            _swap(ht, ho, i, p)
            i = p
        else:
            break


cdef inline void _pop(i64[:] ht, i64[:] ho, Py_ssize_t *size, i64 *t, i64 *o) nogil:
    cdef Py_ssize_t i = 0, l, r, m
    t[0] = ht[0]
    o[0] = ho[0]
    size[0] -= 1
    ht[0] = ht[size[0]]
    ho[0] = ho[size[0]]
    while True:
        l = 2 * i + 1
        r = l + 1
        m = i
        if l < size[0] and _less(ht, ho, l, m):
            m = l
        if r < size[0] and _less(ht, ho, r, m):
            m = r
        if m == i:
            break
        _swap(ht, ho, i, m)
        i = m


cdef inline void _insert_pool(i64[:] pool, Py_ssize_t base, Py_ssize_t m, Py_ssize_t w, i64 f) nogil:
    # pool[base:base+m] sorted; drop the w leading entries, insert w copies of f
    cdef Py_ssize_t i = 0
    while w + i < m and pool[base + w + i] <= f:
        pool[base + i] = pool[base + w + i]
        i += 1
    cdef Py_ssize_t j
    for j in range(w):
        pool[base + i + j] = f


def _successors(Py_ssize_t n, i64[:] dep_ptr, i64[:] dep_idx):
    cdef cnp.ndarray[i64, ndim=1] ptr = np.zeros(n + 1, dtype=np.int64)
    cdef Py_ssize_t o, e
    for o in range(n):
        for e in range(dep_ptr[o], dep_ptr[o + 1]):
            ptr[dep_idx[e] + 1] += 1
    for o in range(n):
        ptr[o + 1] += ptr[o]
    cdef cnp.ndarray[i64, ndim=1] idx = np.empty(ptr[n], dtype=np.int64)
    cdef cnp.ndarray[i64, ndim=1] fill = ptr[:n].copy()
    cdef i64 d
    for o in range(n):
        for e in range(dep_ptr[o], dep_ptr[o + 1]):
            d = dep_idx[e]
            idx[fill[d]] = o
            fill[d] += 1
    return ptr, idx


def list_schedule(cls_in, width_in, dur_in, dep_ptr_in, dep_idx_in, int num_pes, module_count, int policy=0):
    cdef i64[:] cls = np.ascontiguousarray(cls_in, dtype=np.int64)
    cdef i64[:] width = np.ascontiguousarray(width_in, dtype=np.int64)
    cdef i64[:] dur = np.ascontiguousarray(dur_in, dtype=np.int64)
    cdef i64[:] dep_ptr = np.ascontiguousarray(dep_ptr_in, dtype=np.int64)
    cdef i64[:] dep_idx = np.ascontiguousarray(dep_idx_in, dtype=np.int64)
    cdef Py_ssize_t n = cls.shape[0]
    sp, si = _successors(n, dep_ptr, dep_idx)
    cdef i64[:] succ_ptr = sp
    cdef i64[:] succ_idx = si
    cdef i64[:] remaining = np.diff(np.asarray(dep_ptr)).astype(np.int64)
    cdef i64[:] ready_t = np.zeros(n, dtype=np.int64)
    pe_arr = np.full(n, -1, dtype=np.int32)
    est_arr = np.zeros(n, dtype=np.int64)
    cdef int[:] pe = pe_arr
    cdef i64[:] est = est_arr
    cdef i64 mc[4]
    cdef i64 pbase[4]
    cdef Py_ssize_t c, p, q, e, u
    cdef i64 o
    cdef i64 total_slots = 0
    for c in range(NCLS):
        mc[c] = max(1, int(module_count[c]))
        pbase[c] = total_slots
        total_slots += mc[c] * num_pes
    cdef i64[:] pools = np.zeros(total_slots, dtype=np.int64)
    cdef i64[:] load = np.zeros(num_pes, dtype=np.int64)
    cdef i64[:] cnt = np.zeros(num_pes, dtype=np.int64)
    cdef i64[:] ht = np.zeros(n + 1, dtype=np.int64)
    cdef i64[:] ho = np.zeros(n + 1, dtype=np.int64)
    cdef Py_ssize_t hsize = 0
    cdef i64 mem_free = 0, rr = 0, s, f, w, t, total, best_s, best_nl, best_ld, sp_, nl
    cdef Py_ssize_t best, done = 0, base
    for o in range(n):
        if remaining[o] == 0:
            _push(ht, ho, &hsize, o, o)
    with nogil:
        while hsize > 0:
            _pop(ht, ho, &hsize, &t, &o)
            done += 1
            c = cls[o]
            if c == MEM:
                s = ready_t[o]
                if mem_free > s:
                    s = mem_free
                mem_free = s + dur[o]
            else:
                w = width[o]
                if policy == 1:
                    best = rr % num_pes
                    rr += 1
                else:
                    total = 0
                    for e in range(dep_ptr[o], dep_ptr[o + 1]):
                        q = pe[dep_idx[e]]
                        if q >= 0:
                            cnt[q] += 1
                            total += 1
                    best = -1
                    best_s = 0
                    best_nl = 0
                    best_ld = 0
                    for p in range(num_pes):
                        sp_ = pools[pbase[c] + p * mc[c] + w - 1]
                        if ready_t[o] > sp_:
                            sp_ = ready_t[o]
                        nl = total - cnt[p]
                        if (best < 0 or sp_ < best_s or (sp_ == best_s and (nl < best_nl or
                                (nl == best_nl and load[p] < best_ld)))):
                            best = p
                            best_s = sp_
                            best_nl = nl
                            best_ld = load[p]
                    for e in range(dep_ptr[o], dep_ptr[o + 1]):
                        q = pe[dep_idx[e]]
                        if q >= 0:
                            cnt[q] = 0
                base = pbase[c] + best * mc[c]
                s = pools[base + w - 1]
                if ready_t[o] > s:
                    s = ready_t[o]
                _insert_pool(pools, base, mc[c], w, s + dur[o])
                load[best] += dur[o] * w
                pe[o] = <int>best
            est[o] = s
            f = s + dur[o]
            for e in range(succ_ptr[o], succ_ptr[o + 1]):
                u = succ_idx[e]
                if f > ready_t[u]:
                    ready_t[u] = f
                remaining[u] -= 1
                if remaining[u] == 0:
                    _push(ht, ho, &hsize, u, u)
    if done != n:
        raise ValueError("dependency graph has a cycle")
    return pe_arr, est_arr


def replay(cls_in, pe_in, width_in, dur_in, dep_ptr_in, dep_idx_in, order_in, int num_pes, module_count,
           i64 mem_latency, bank_in, int num_banks, res_buf_in, res_bytes_in, attached_in, capacity_in):
    cdef i64[:] cls = np.ascontiguousarray(cls_in, dtype=np.int64)
    cdef i64[:] pe = np.ascontiguousarray(pe_in, dtype=np.int64)
    cdef i64[:] width = np.ascontiguousarray(width_in, dtype=np.int64)
    cdef i64[:] dur = np.ascontiguousarray(dur_in, dtype=np.int64)
    cdef i64[:] dep_ptr = np.ascontiguousarray(dep_ptr_in, dtype=np.int64)
    cdef i64[:] dep_idx = np.ascontiguousarray(dep_idx_in, dtype=np.int64)
    cdef i64[:] order = np.ascontiguousarray(order_in, dtype=np.int64)
    cdef i64[:] bank = np.ascontiguousarray(bank_in, dtype=np.int64)
    cdef i64[:] res_buf = np.ascontiguousarray(res_buf_in, dtype=np.int64)
    cdef i64[:] res_bytes = np.ascontiguousarray(res_bytes_in, dtype=np.int64)
    cdef i64[:] attached = np.ascontiguousarray(attached_in, dtype=np.int64)
    cdef i64[:] capacity = np.ascontiguousarray(capacity_in, dtype=np.int64)
    cdef Py_ssize_t n = cls.shape[0]
    sp, si = _successors(n, dep_ptr, dep_idx)
    cdef i64[:] succ_ptr = sp
    cdef i64[:] succ_idx = si
    cdef i64[:] remaining = np.diff(np.asarray(dep_ptr)).astype(np.int64)
    cdef i64[:] users = np.diff(np.asarray(succ_ptr)).astype(np.int64)
    cdef i64[:] ready_t = np.zeros(n, dtype=np.int64)
    start_arr = np.full(n, -1, dtype=np.int64)
    finish_arr = np.full(n, -1, dtype=np.int64)
    cdef i64[:] start = start_arr
    cdef i64[:] finish = finish_arr
    cdef char[:] delegated = np.zeros(n, dtype=np.int8)
    cdef Py_ssize_t q, e, u, d, i
    cdef i64 o
    for o in range(n):
        if attached[o] >= 0:
            delegated[attached[o]] = 1

    # queues in CSR form, filled in the given order
    cdef Py_ssize_t nq = num_pes * NCLS
    cdef i64[:] qcount = np.zeros(nq + 1, dtype=np.int64)
    cdef Py_ssize_t nmem = 0
    for i in range(n):
        o = order[i]
        if cls[o] == MEM:
            nmem += 1
        else:
            qcount[pe[o] * NCLS + cls[o] + 1] += 1
    for q in range(nq):
        qcount[q + 1] += qcount[q]
    cdef i64[:] qops = np.zeros(max(1, n - nmem), dtype=np.int64)
    cdef i64[:] qfill = np.asarray(qcount[:nq]).copy()
    cdef i64[:] mem = np.zeros(max(1, nmem), dtype=np.int64)
    cdef Py_ssize_t mfill = 0
    for i in range(n):
        o = order[i]
        if cls[o] == MEM:
            mem[mfill] = o
            mfill += 1
        else:
            q = pe[o] * NCLS + cls[o]
            qops[qfill[q]] = o
            qfill[q] += 1
    cdef i64[:] qh = np.asarray(qcount[:nq]).copy()
    cdef i64[:] qlast = np.zeros(nq, dtype=np.int64)
    cdef i64 mc[4]
    cdef Py_ssize_t c
    for c in range(NCLS):
        mc[c] = max(1, int(module_count[c]))
    # pool of queue q starts at pe * stride + class offset
    cdef i64 coff[4]
    cdef i64 stride = 0
    for c in range(NCLS):
        coff[c] = stride
        stride += mc[c]
    cdef i64[:] pools = np.zeros(max(1, stride * num_pes), dtype=np.int64)
    cdef i64[:] bank_free = np.zeros(max(1, num_banks), dtype=np.int64)
    cdef i64[:] ht = np.zeros(n + 1, dtype=np.int64)
    cdef i64[:] ho = np.zeros(n + 1, dtype=np.int64)
    cdef Py_ssize_t hsize = 0
    cdef i64 occ[3]
    cdef i64 peak[3]
    for i in range(3):
        occ[i] = 0
        peak[i] = 0
    cdef i64 spill = 0, mem_last = 0, bus_free = 0, t, s, f, w, b, data, now
    cdef Py_ssize_t mh = 0, done = 0, base
    cdef int status = 0
    cdef i64 blocked_op = -1
    cdef bint mem_blocked = False

    with nogil:
        # initial issue of every queue and the memory stream
        for q in range(nq):
            _issue_queue(q, qops, qcount, qh, qlast, pools, coff, mc, stride, cls, pe, width, dur,
                         remaining, ready_t, start, finish, ht, ho, &hsize)
        now = 0
        _issue_mem(now, mem, nmem, &mh, &mem_last, &bus_free, bank_free, bank, mem_latency,
                   remaining, ready_t, res_buf, res_bytes, capacity, occ, peak, &mem_blocked,
                   &status, &blocked_op, dur, start, finish, ht, ho, &hsize, False, &spill)
        t = 0
        while True:
            if hsize == 0:
                if status == 0 and mem_blocked and mh < nmem:
                    _issue_mem(t, mem, nmem, &mh, &mem_last, &bus_free, bank_free, bank, mem_latency,
                               remaining, ready_t, res_buf, res_bytes, capacity, occ, peak, &mem_blocked,
                               &status, &blocked_op, dur, start, finish, ht, ho, &hsize, True, &spill)
                    continue
                break
            if status != 0:
                break
            _pop(ht, ho, &hsize, &t, &o)
            done += 1
            b = res_buf[o]
            if b == 0 or b == 2:
                occ[b] += res_bytes[o]
                if occ[b] > peak[b]:
                    peak[b] = occ[b]
                if occ[b] > capacity[b]:
                    if res_bytes[o] < occ[b] - capacity[b]:
                        spill += res_bytes[o]
                    else:
                        spill += occ[b] - capacity[b]
            if users[o] == 0:
                _release(o, delegated, attached, res_buf, res_bytes, occ)
            for e in range(dep_ptr[o], dep_ptr[o + 1]):
                d = dep_idx[e]
                users[d] -= 1
                if users[d] == 0:
                    _release(d, delegated, attached, res_buf, res_bytes, occ)
            for e in range(succ_ptr[o], succ_ptr[o + 1]):
                u = succ_idx[e]
                if t > ready_t[u]:
                    ready_t[u] = t
                remaining[u] -= 1
                if remaining[u] == 0 and cls[u] != MEM:
                    _issue_queue(pe[u] * NCLS + cls[u], qops, qcount, qh, qlast, pools, coff, mc, stride,
                                 cls, pe, width, dur, remaining, ready_t, start, finish, ht, ho, &hsize)
            _issue_mem(t, mem, nmem, &mh, &mem_last, &bus_free, bank_free, bank, mem_latency,
                       remaining, ready_t, res_buf, res_bytes, capacity, occ, peak, &mem_blocked,
                       &status, &blocked_op, dur, start, finish, ht, ho, &hsize, False, &spill)
    if status == 0 and done != n:
        status = 1 if mem_blocked else 2
    return (start_arr, finish_arr, np.array([peak[0], peak[1], peak[2]], dtype=np.int64),
            int(spill), int(status), int(blocked_op))


cdef inline void _free(Py_ssize_t o, i64[:] res_buf, i64[:] res_bytes, i64 *occ) nogil:
    cdef i64 b = res_buf[o]
    if b >= 0:
        occ[b] -= res_bytes[o]


cdef inline void _release(Py_ssize_t o, char[:] delegated, i64[:] attached, i64[:] res_buf,
                          i64[:] res_bytes, i64 *occ) nogil:
    if not delegated[o]:
        _free(o, res_buf, res_bytes, occ)
    if attached[o] >= 0:
        _free(attached[o], res_buf, res_bytes, occ)


cdef void _issue_queue(Py_ssize_t q, i64[:] qops, i64[:] qcount, i64[:] qh, i64[:] qlast, i64[:] pools,
                       i64 *coff, i64 *mc, i64 stride, i64[:] cls, i64[:] pe, i64[:] width, i64[:] dur,
                       i64[:] remaining, i64[:] ready_t, i64[:] start, i64[:] finish,
                       i64[:] ht, i64[:] ho, Py_ssize_t *hsize) nogil:
    cdef Py_ssize_t c = q % NCLS
    cdef Py_ssize_t p = q // NCLS
    cdef Py_ssize_t base = p * stride + coff[c]
    cdef Py_ssize_t o
    cdef i64 w, s, f
    while qh[q] < qcount[q + 1]:
        o = qops[qh[q]]
        if remaining[o] > 0:
            break
        w = width[o]
        s = ready_t[o]
        if qlast[q] > s:
            s = qlast[q]
        if pools[base + w - 1] > s:
            s = pools[base + w - 1]
        f = s + dur[o]
        _insert_pool(pools, base, mc[c], w, f)
        qlast[q] = s
        start[o] = s
        finish[o] = f
        _push(ht, ho, hsize, f, o)
        qh[q] += 1


cdef void _issue_mem(i64 now, i64[:] mem, Py_ssize_t nmem, Py_ssize_t *mh, i64 *mem_last, i64 *bus_free,
                     i64[:] bank_free, i64[:] bank, i64 mem_latency, i64[:] remaining, i64[:] ready_t,
                     i64[:] res_buf, i64[:] res_bytes, i64[:] capacity, i64 *occ, i64 *peak,
                     bint *mem_blocked, int *status, i64 *blocked_op, i64[:] dur, i64[:] start,
                     i64[:] finish, i64[:] ht, i64[:] ho, Py_ssize_t *hsize, bint force, i64 *spill) nogil:
    cdef Py_ssize_t o
    cdef i64 s, b, data, f
    while mh[0] < nmem:
        o = mem[mh[0]]
        if remaining[o] > 0:
            return
        s = ready_t[o]
        if mem_last[0] > s:
            s = mem_last[0]
        if bank_free[bank[o]] > s:
            s = bank_free[bank[o]]
        if res_buf[o] == BUF_WEIGHT:
            b = res_bytes[o]
            if b > capacity[BUF_WEIGHT]:
                status[0] = 1
                blocked_op[0] = o
                return
            if occ[BUF_WEIGHT] + b > capacity[BUF_WEIGHT]:
                if not force:
                    mem_blocked[0] = True
                    blocked_op[0] = o
                    return
                # nothing in flight can free space: evict, refetch later
                if b < occ[BUF_WEIGHT] + b - capacity[BUF_WEIGHT]:
                    spill[0] += b
                else:
                    spill[0] += occ[BUF_WEIGHT] + b - capacity[BUF_WEIGHT]
                force = False
            if mem_blocked[0] and now > s:
                s = now
            occ[BUF_WEIGHT] += b
            if occ[BUF_WEIGHT] > peak[BUF_WEIGHT]:
                peak[BUF_WEIGHT] = occ[BUF_WEIGHT]
        mem_blocked[0] = False
        blocked_op[0] = -1
        data = s + mem_latency
        if bus_free[0] > data:
            data = bus_free[0]
        f = data + dur[o]
        bus_free[0] = f
        bank_free[bank[o]] = f
        mem_last[0] = s
        start[o] = s
        finish[o] = f
        _push(ht, ho, hsize, f, o)
        mh[0] += 1
