"""Pure-Python/NumPy implementations of the hot kernels.

These define the reference semantics; ``_ckernels.pyx`` mirrors them
statement for statement.  See :mod:`cloudq.kernels` for the selection logic.
"""

import heapq

import numpy as np

BACKEND = "python"

_DEADLINE = 0
_COMPLETION = 1


def rvi(h, Lsum, Dk, up, down, probs, blocked, lam, C, Lu, tol, max_iter, ref):
    """Relative value iteration on a uniformized product chain.

    ``probs`` of shape ``(S, n+1)`` fixes a randomized policy (column 0 is the
    external node); an empty array means optimize.  When optimizing, a nonempty
    0/1 array ``blocked`` of shape ``(S, n)`` removes actions.  ``h`` is updated
    in place.
    Stops once the gain bracket ``Lu * span(T h - h)`` is at most
    ``tol * max(1, gain)``.

    Returns ``(iterations, gain_lo, gain_hi, actions)``; ``actions`` holds the
    greedy action per state (all -1 when a policy was given).
    """
    S, n = Dk.shape
    control = probs.size == 0
    g_lo = g_hi = np.nan
    it = 0
    while it < max_iter:
        it += 1
        diff = h[up] - h[:, None]
        if control:
            if blocked.size:
                diff = np.where(blocked, np.inf, diff)
            arrival = lam * np.minimum(C, diff.min(axis=1))
        else:
            arrival = lam * (probs[:, 0] * C + (probs[:, 1:] * diff).sum(axis=1))
        num = Lsum + arrival + (Dk * (h[down] - h[:, None])).sum(axis=1)
        delta = num / Lu
        g_lo = Lu * delta.min()
        g_hi = Lu * delta.max()
        w = h + delta
        h[:] = w - w[ref]
        if g_hi - g_lo <= tol * max(1.0, abs(g_hi)):
            break
    actions = np.full(S, -1, dtype=np.int64)
    if control:
        actions[:] = greedy_actions(h, up, C, blocked)
    return it, g_lo, g_hi, actions


def greedy_actions(h, up, C, blocked=None):
    """Lowest-index basic node with the smallest ``h(s+e_k) - h(s)``, if at most ``C``."""
    diff = h[up] - h[:, None]
    if blocked is not None and blocked.size:
        diff = np.where(blocked, np.inf, diff)
    k = diff.argmin(axis=1)
    best = diff[np.arange(len(h)), k]
    return np.where(best <= C, k + 1, 0).astype(np.int64)


def simulate(interarrival, patience, work, route_u, m, mu, theta, des, mode,
             cum_probs, table, dims, t_warm):
    """Job-level event simulation of one replication.

    Each job ``j`` carries a unit-rate patience ``patience[j]`` (scaled by
    ``1/theta``) and unit-rate work ``work[j]`` (scaled by ``1/mu_k`` at its
    node).  ``mode`` 0 routes by the cumulative probabilities ``cum_probs``
    with uniform ``route_u[j]``; mode 1 looks up ``table`` at the occupancy
    vector clipped to ``dims - 1``.

    Returns a dict of counters; ``*_window`` entries only count events at
    or after ``t_warm``.
    """
    n = len(m)
    J = len(interarrival)
    arrival_time = np.cumsum(interarrival)
    t_end = float(arrival_time[-1]) if J else 0.0
    strides = np.ones(n, dtype=np.int64)
    for k in range(n - 2, -1, -1):
        strides[k] = strides[k + 1] * dims[k + 1]

    X = [0] * n
    busy = [0] * n
    fifo = [[] for _ in range(n)]
    head = [0] * n
    node_of = [0] * J
    state = [0] * J  # 0 waiting, 1 in service, 2 gone
    heap = []

    abandon = np.zeros(n, dtype=np.int64)
    abandon_w = np.zeros(n, dtype=np.int64)
    area = np.zeros(n)
    excess_area = np.zeros(n)
    completions = 0
    external = 0
    external_w = 0
    arrivals_w = 0
    t_prev = t_warm if t_warm > 0 else 0.0

    def advance(t):
        nonlocal t_prev
        if t > t_prev:
            dt = t - t_prev
            for k in range(n):
                area[k] += dt * X[k]
                if X[k] > m[k]:
                    excess_area[k] += dt * (X[k] - m[k])
            t_prev = t

    def start_next(k, t):
        q = fifo[k]
        while head[k] < len(q):
            j2 = q[head[k]]
            head[k] += 1
            if state[j2] == 0:
                state[j2] = 1
                busy[k] += 1
                heapq.heappush(heap, (t + work[j2] / mu[k], j2, _COMPLETION))
                return

    j = 0
    while True:
        t_arr = arrival_time[j] if j < J else np.inf
        if heap and heap[0][0] < t_arr:
            t, job, kind = heapq.heappop(heap)
            if t > t_end:
                break
            k = node_of[job]
            if kind == _DEADLINE:
                s = state[job]
                if s == 0 or (s == 1 and des):
                    advance(t)
                    state[job] = 2
                    X[k] -= 1
                    abandon[k] += 1
                    if t >= t_warm:
                        abandon_w[k] += 1
                    if s == 1:
                        busy[k] -= 1
                        start_next(k, t)
            else:
                if state[job] == 1:
                    advance(t)
                    state[job] = 2
                    X[k] -= 1
                    busy[k] -= 1
                    completions += 1
                    start_next(k, t)
            continue
        if j >= J:
            break
        t = float(t_arr)
        advance(t)
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
                idx += min(X[k], dims[k] - 1) * strides[k]
            a = int(table[idx])
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
                heapq.heappush(heap, (t + work[j] / mu[k], j, _COMPLETION))
                if des:
                    heapq.heappush(heap, (t + patience[j] / theta, j, _DEADLINE))
            else:
                state[j] = 0
                fifo[k].append(j)
                heapq.heappush(heap, (t + patience[j] / theta, j, _DEADLINE))
        j += 1
    advance(t_end)
    return {
        "arrivals": J,
        "arrivals_window": arrivals_w,
        "external": external,
        "external_window": external_w,
        "abandon": abandon,
        "abandon_window": abandon_w,
        "completions": completions,
        "in_system_end": int(sum(X)),
        "area": area,
        "excess_area": excess_area,
        "window": max(t_end - t_warm, 0.0),
    }
