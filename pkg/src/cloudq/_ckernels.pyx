# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; semantics match ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY

cnp.import_array()

BACKEND = "cython"

DEF DEADLINE = 0
DEF COMPLETION = 1


def rvi(double[::1] h, const double[::1] Lsum, const double[:, ::1] Dk,
        const cnp.int64_t[:, ::1] up, const cnp.int64_t[:, ::1] down,
        const double[:, ::1] probs, const cnp.uint8_t[:, ::1] blocked,
        double lam, double C, double Lu, double tol, long max_iter, long ref):
    cdef Py_ssize_t S = Dk.shape[0], n = Dk.shape[1]
    cdef bint control = probs.shape[0] == 0
    cdef bint has_blocked = blocked.shape[0] > 0
    cdef double[::1] w = np.empty(S)
    cdef double g_lo = np.nan, g_hi = np.nan, best, d, num, delta, hs, scale, shift
    cdef Py_ssize_t s, k
    cdef long it = 0
    with nogil:
        while it < max_iter:
            it += 1
            g_lo = INFINITY
            g_hi = -INFINITY
            for s in range(S):
                hs = h[s]
                if control:
                    best = C
                    for k in range(n):
                        if has_blocked and blocked[s, k]:
                            continue
                        d = h[up[s, k]] - hs
                        if d < best:
                            best = d
                    num = lam * best
                else:
                    num = probs[s, 0] * C
                    for k in range(n):
                        num += probs[s, k + 1] * (h[up[s, k]] - hs)
                    num = lam * num
                num = Lsum[s] + num
                for k in range(n):
                    num += Dk[s, k] * (h[down[s, k]] - hs)
                delta = num / Lu
                if Lu * delta < g_lo:
                    g_lo = Lu * delta
                if Lu * delta > g_hi:
                    g_hi = Lu * delta
                w[s] = hs + delta
            shift = w[ref]
            for s in range(S):
                h[s] = w[s] - shift
            scale = fabs(g_hi)
            if scale < 1.0:
                scale = 1.0
            if g_hi - g_lo <= tol * scale:
                break
    actions = np.full(S, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] act = actions
    cdef long bk
    if control:
        for s in range(S):
            hs = h[s]
            bk = 0
            best = INFINITY
            for k in range(n):
                if has_blocked and blocked[s, k]:
                    continue
                d = h[up[s, k]] - hs
                if d < best:
                    best = d
                    bk = k + 1
            act[s] = bk if best <= C else 0
    return it, g_lo, g_hi, actions


# binary min-heap keyed lexicographically on (time, job, kind)
cdef inline bint _less(double ta, long ja, int ka, double tb, long jb, int kb) nogil:
    if ta != tb:
        return ta < tb
    if ja != jb:
        return ja < jb
    return ka < kb


cdef struct Heap:
    double* t
    long* job
    int* kind
    long size


cdef inline void _push(Heap* hp, double t, long job, int kind) nogil:
    cdef long i = hp.size, parent
    hp.size += 1
    while i > 0:
        parent = (i - 1) >> 1
        if _less(t, job, kind, hp.t[parent], hp.job[parent], hp.kind[parent]):
            hp.t[i] = hp.t[parent]
            hp.job[i] = hp.job[parent]
            hp.kind[i] = hp.kind[parent]
            i = parent
        else:
            break
    hp.t[i] = t
    hp.job[i] = job
    hp.kind[i] = kind


cdef inline void _pop(Heap* hp) nogil:
    # removes the root
    cdef long last = hp.size - 1, i = 0, c
    cdef double t = hp.t[last]
    cdef long job = hp.job[last]
    cdef int kind = hp.kind[last]
    hp.size = last
    while True:
        c = 2 * i + 1
        if c >= last:
            break
        if c + 1 < last and _less(hp.t[c + 1], hp.job[c + 1], hp.kind[c + 1],
                                  hp.t[c], hp.job[c], hp.kind[c]):
            c += 1
        if _less(hp.t[c], hp.job[c], hp.kind[c], t, job, kind):
            hp.t[i] = hp.t[c]
            hp.job[i] = hp.job[c]
            hp.kind[i] = hp.kind[c]
            i = c
        else:
            break
    if last > 0:
        hp.t[i] = t
        hp.job[i] = job
        hp.kind[i] = kind


def simulate(const double[::1] interarrival, const double[::1] patience,
             const double[::1] work, const double[::1] route_u,
             const cnp.int64_t[::1] m, const double[::1] mu, double theta, bint des,
             int mode, const double[::1] cum_probs, const cnp.int64_t[::1] table,
             const cnp.int64_t[::1] dims, double t_warm):
    cdef Py_ssize_t n = m.shape[0], J = interarrival.shape[0]
    cdef Py_ssize_t j, k, a, idx
    arrival_np = np.cumsum(np.asarray(interarrival))
    cdef double[::1] arrival_time = arrival_np
    cdef double t_end = arrival_time[J - 1] if J > 0 else 0.0

    strides_np = np.ones(n, dtype=np.int64)
    cdef cnp.int64_t[::1] strides = strides_np
    for k in range(n - 2, -1, -1):
        strides[k] = strides[k + 1] * dims[k + 1]

    cdef cnp.int64_t[::1] X = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] busy = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] fifo = np.zeros((n, max(J, 1)), dtype=np.int64)
    cdef cnp.int64_t[::1] head = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] tail = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] node_of = np.zeros(max(J, 1), dtype=np.int64)
    cdef cnp.int8_t[::1] state = np.zeros(max(J, 1), dtype=np.int8)

    heap_t_np = np.empty(2 * J + 1)
    heap_j_np = np.empty(2 * J + 1, dtype=np.int64)
    heap_k_np = np.empty(2 * J + 1, dtype=np.int32)
    cdef double[::1] heap_t = heap_t_np
    cdef cnp.int64_t[::1] heap_j = heap_j_np
    cdef int[::1] heap_k = heap_k_np
    cdef Heap hp
    hp.t = &heap_t[0]
    hp.job = <long*> &heap_j[0]
    hp.kind = &heap_k[0]
    hp.size = 0

    abandon_np = np.zeros(n, dtype=np.int64)
    abandon_w_np = np.zeros(n, dtype=np.int64)
    area_np = np.zeros(n)
    excess_np = np.zeros(n)
    cdef cnp.int64_t[::1] abandon = abandon_np
    cdef cnp.int64_t[::1] abandon_w = abandon_w_np
    cdef double[::1] area = area_np
    cdef double[::1] excess_area = excess_np
    cdef long completions = 0, external = 0, external_w = 0, arrivals_w = 0
    cdef double t_prev = t_warm if t_warm > 0 else 0.0
    cdef double t, t_arr, u, dt
    cdef long job, j2, in_sys = 0
    cdef int kind, s
    cdef bint in_window

    with nogil:
        j = 0
        while True:
            t_arr = arrival_time[j] if j < J else INFINITY
            if hp.size > 0 and hp.t[0] < t_arr:
                t = hp.t[0]
                job = hp.job[0]
                kind = hp.kind[0]
                _pop(&hp)
                if t > t_end:
                    break
                k = node_of[job]
                if kind == DEADLINE:
                    s = state[job]
                    if s == 0 or (s == 1 and des):
                        if t > t_prev:
                            dt = t - t_prev
                            for a in range(n):
                                area[a] += dt * X[a]
                                if X[a] > m[a]:
                                    excess_area[a] += dt * (X[a] - m[a])
                            t_prev = t
                        state[job] = 2
                        X[k] -= 1
                        abandon[k] += 1
                        if t >= t_warm:
                            abandon_w[k] += 1
                        if s == 1:
                            busy[k] -= 1
                            while head[k] < tail[k]:
                                j2 = fifo[k, head[k]]
                                head[k] += 1
                                if state[j2] == 0:
                                    state[j2] = 1
                                    busy[k] += 1
                                    _push(&hp, t + work[j2] / mu[k], j2, COMPLETION)
                                    break
                else:
                    if state[job] == 1:
                        if t > t_prev:
                            dt = t - t_prev
                            for a in range(n):
                                area[a] += dt * X[a]
                                if X[a] > m[a]:
                                    excess_area[a] += dt * (X[a] - m[a])
                            t_prev = t
                        state[job] = 2
                        X[k] -= 1
                        busy[k] -= 1
                        completions += 1
                        while head[k] < tail[k]:
                            j2 = fifo[k, head[k]]
                            head[k] += 1
                            if state[j2] == 0:
                                state[j2] = 1
                                busy[k] += 1
                                _push(&hp, t + work[j2] / mu[k], j2, COMPLETION)
                                break
                continue
            if j >= J:
                break
            t = t_arr
            if t > t_prev:
                dt = t - t_prev
                for a in range(n):
                    area[a] += dt * X[a]
                    if X[a] > m[a]:
                        excess_area[a] += dt * (X[a] - m[a])
                t_prev = t
            in_window = t >= t_warm
            if in_window:
                arrivals_w += 1
            if mode == 0:
                u = route_u[j]
                a = 0
                while a < n and u >= cum_probs[a]:
                    a += 1
            else:
                idx = 0
                for k in range(n):
                    idx += (X[k] if X[k] < dims[k] - 1 else dims[k] - 1) * strides[k]
                a = table[idx]
            if a == 0:
                external += 1
                if in_window:
                    external_w += 1
            else:
                k = a - 1
                node_of[j] = k
                X[k] += 1
                if busy[k] < m[k]:
                    busy[k] += 1
                    state[j] = 1
                    _push(&hp, t + work[j] / mu[k], j, COMPLETION)
                    if des:
                        _push(&hp, t + patience[j] / theta, j, DEADLINE)
                else:
                    state[j] = 0
                    fifo[k, tail[k]] = j
                    tail[k] += 1
                    _push(&hp, t + patience[j] / theta, j, DEADLINE)
            j += 1
        if t_end > t_prev:
            dt = t_end - t_prev
            for a in range(n):
                area[a] += dt * X[a]
                if X[a] > m[a]:
                    excess_area[a] += dt * (X[a] - m[a])
    for k in range(n):
        in_sys += X[k]
    return {
        "arrivals": int(J),
        "arrivals_window": int(arrivals_w),
        "external": int(external),
        "external_window": int(external_w),
        "abandon": abandon_np,
        "abandon_window": abandon_w_np,
        "completions": int(completions),
        "in_system_end": int(in_sys),
        "area": area_np,
        "excess_area": excess_np,
        "window": max(t_end - t_warm, 0.0),
    }
