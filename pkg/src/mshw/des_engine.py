"""Event-driven simulation of the G/Ph/n+GI queue.

Two disciplines are available:

``original``
    Each queued customer carries its own patience deadline; a freed server
    takes the head of the FIFO queue; every customer in service runs its own
    exponential phase clock.

``perturbed``
    Service in phase k is one pooled exponential clock at rate ``Z_k nu_k``
    and abandonment is one clock at rate ``L alpha`` (``L`` = queue length)
    that removes the head of the queue.  With exponential patience this has
    the same generator as ``original``.

State is sampled on a uniform grid.  Counting processes are recorded
exactly; time integrals (busy time per phase, integrals of the positive
and negative parts of X) are exact for the piecewise-constant sample path.
"""
from __future__ import annotations

import csv
import heapq
import math
import random
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Optional

import numpy as np

from .ode_maps import GridPath, grid_size
from .scenario import OVERLOADED, Scenario

ORIGINAL = "original"
PERTURBED = "perturbed"
DISCIPLINES = (ORIGINAL, PERTURBED)
EMPTY = "empty"
STATIONARY = "stationary-phase-mix"
INITIALS = (EMPTY, STATIONARY)

# event-log kinds
ARRIVE, ENTER, ROUTE, DEPART, ABANDON, INIT_SERVICE, INIT_QUEUE = range(7)
KIND_NAMES = ("arrive", "enter", "route", "depart", "abandon", "init_service", "init_queue")

EVENT_DTYPE = np.dtype([("t", "f8"), ("kind", "i1"), ("cid", "i8"), ("src", "i2"), ("dst", "i2")])

# heap tie ranks: completion, arrival, abandonment
_SERVICE, _ARRIVAL, _PATIENCE = 0, 1, 2
_QUEUED, _IN_SERVICE, _GONE = 0, 1, 2


class SimulationError(ValueError):
    pass


class InvalidHorizon(SimulationError):
    pass


class PerturbedNeedsExpPatience(SimulationError):
    pass


class MissingEventLog(RuntimeError):
    pass


def replication_seed(seed: int, n: int, rep: int) -> int:
    """Independent 64-bit stream seed for replication ``rep`` of system size ``n``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(n), int(rep)))
    return int(ss.generate_state(2, dtype=np.uint64).view(np.uint64)[0])


@dataclass(eq=False)
class SimPath:
    """One replication sampled on ``grid``.

    Integer arrays are exact.  ``T`` holds cumulative busy time per phase and
    ``IXp``/``IXm`` the integrals of ``X^+`` and ``X^-``.
    """

    grid: np.ndarray
    n: int
    K: int
    X: np.ndarray
    Z: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    E: np.ndarray
    T: np.ndarray
    IXp: np.ndarray
    IXm: np.ndarray
    end_time: float
    discipline: str = ORIGINAL
    events: Optional[np.ndarray] = field(default=None, repr=False)
    _W: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def Y(self) -> np.ndarray:
        return self.Q + self.Z

    @property
    def idle(self) -> np.ndarray:
        """Idle servers ``I(t) = X(t)^-``."""
        return np.maximum(-self.X, 0)

    @property
    def W(self) -> np.ndarray:
        if self._W is None:
            self._W = virtual_wait_path(self)
        return self._W

    @property
    def AQ(self) -> np.ndarray:
        return queued_abandoners(self)

    def to_csv(self, path) -> None:
        has_log = self.events is not None
        W = self.W if has_log else np.full(self.grid.size, np.nan)
        AQ = self.AQ if has_log else np.full(self.grid.size, -1)
        head = (
            ["t", "X"]
            + [f"Z{k + 1}" for k in range(self.K)]
            + [f"Q{k + 1}" for k in range(self.K)]
            + ["A", "B", "D", "W", "AQ"]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            for i, t in enumerate(self.grid):
                w.writerow(
                    [repr(float(t)), int(self.X[i])]
                    + self.Z[i].tolist()
                    + self.Q[i].tolist()
                    + [int(self.A[i]), int(self.B[i]), int(self.D[i]), repr(float(W[i])), int(AQ[i])]
                )


# ---------------------------------------------------------------------------


def run(
    sc: Scenario,
    n: int,
    horizon: float,
    grid_dt: float,
    seed: int,
    rep: int = 0,
    discipline: str = ORIGINAL,
    initial: str = EMPTY,
    record_log: bool = True,
    margin: float = 0.0,
) -> SimPath:
    """Simulate one replication and sample it on ``0, grid_dt, ..., horizon``.

    Events keep being generated until ``horizon + margin`` so that quantities
    looking ahead in time (the virtual waiting time) are available up to the
    horizon.  The random stream is derived from ``(seed, n, rep)``.
    """
    if not (horizon > 0 and math.isfinite(horizon)):
        raise InvalidHorizon(f"horizon must be positive and finite, got {horizon}")
    if not (0 < grid_dt <= horizon):
        raise InvalidHorizon(f"grid_dt must lie in (0, horizon], got {grid_dt}")
    if margin < 0:
        raise InvalidHorizon("margin must be >= 0")
    if n < 1:
        raise SimulationError("n must be >= 1")
    if discipline not in DISCIPLINES:
        raise SimulationError(f"unknown discipline {discipline!r}")
    if initial not in INITIALS:
        raise SimulationError(f"unknown initial condition {initial!r}")
    if discipline == PERTURBED and not sc.patience.is_exponential:
        raise PerturbedNeedsExpPatience("the perturbed discipline needs exponential patience")

    grid = np.arange(grid_size(grid_dt, horizon)) * grid_dt
    rnd = random.Random(replication_seed(seed, n, rep))
    sim = _Simulator(sc, n, rnd, grid, horizon + margin, record_log)
    sim.initialise(initial)
    if discipline == ORIGINAL:
        sim.run_original()
    else:
        sim.run_perturbed()
    return sim.finish(discipline)


class _Simulator:
    def __init__(self, sc: Scenario, n: int, rnd: random.Random, grid, t_end: float, record_log: bool):
        ph = sc.ph
        self.sc, self.n, self.K, self.rnd = sc, n, ph.K, rnd
        self.nu = ph.nu.tolist()
        self.cum_p = list(accumulate(ph.p.tolist()))
        self.cum_p[-1] = 1.0
        self.cum_gamma = list(accumulate(ph.gamma.tolist()))
        self.cum_gamma[-1] = 1.0
        self.cum_route = [list(accumulate(row)) for row in ph.P.tolist()]
        self.grid = grid
        self.t_end = t_end
        self.log = [] if record_log else None
        self.rate = sc.arrival_rate(n)
        self.draw_iat, first = sc.arrival.sampler(self.rate, rnd)
        self.next_arrival = first
        self.draw_patience = sc.patience.sampler(rnd)

        K = self.K
        self.Z = [0] * K
        self.Q = [0] * K
        self.Tacc = [0.0] * K
        self.X = -n
        self.A = self.B = self.D = self.E = 0
        self.ixp = self.ixm = 0.0
        self.last = 0.0
        self.busy = 0
        # per-customer state
        self.first = []
        self.phase = []
        self.status = []
        self.queue = deque()
        self.rows = []
        self.gi = 0

    # -- helpers -----------------------------------------------------------

    def _pick(self, cum) -> int:
        return bisect_right(cum, self.rnd.random()) if len(cum) > 1 else 0

    def _route(self, k: int) -> int:
        """Next phase after a phase-k completion; ``K`` means exit."""
        u = self.rnd.random()
        return bisect_right(self.cum_route[k], u)

    def _advance(self, t: float) -> None:
        """Write grid rows strictly before ``t`` and integrate up to ``t``."""
        grid, rows = self.grid, self.rows
        ng = grid.size
        while self.gi < ng and grid[self.gi] < t:
            rows.append(
                (self.X, self.A, self.B, self.D, self.E, self.last, self.ixp, self.ixm,
                 *self.Z, *self.Q, *self.Tacc)
            )
            self.gi += 1
        dtau = t - self.last
        if dtau > 0:
            Z, Tacc = self.Z, self.Tacc
            for k in range(self.K):
                Tacc[k] += Z[k] * dtau
            X = self.X
            if X > 0:
                self.ixp += X * dtau
            elif X < 0:
                self.ixm -= X * dtau
            self.last = t

    def _new_customer(self, first: int) -> int:
        cid = len(self.first)
        self.first.append(first)
        self.phase.append(first)
        self.status.append(_QUEUED)
        return cid

    def initialise(self, initial: str) -> None:
        if initial == EMPTY:
            return
        n, log = self.n, self.log
        for _ in range(n):
            k = self._pick(self.cum_gamma)
            cid = self._new_customer(k)
            self.status[cid] = _IN_SERVICE
            self.Z[k] += 1
            if log is not None:
                log.append((0.0, INIT_SERVICE, cid, -1, k))
        self.busy = n
        self.X = 0
        if self.sc.regime == OVERLOADED:
            for _ in range(int(round(n * self.sc.q))):
                k = self._pick(self.cum_p)
                cid = self._new_customer(k)
                self.queue.append(cid)
                self.Q[k] += 1
                self.X += 1
                if log is not None:
                    log.append((0.0, INIT_QUEUE, cid, -1, k))

    # -- original discipline -----------------------------------------------

    def run_original(self) -> None:
        rnd, nu, log, K, n = self.rnd, self.nu, self.log, self.K, self.n
        heap = []
        seq = 0
        for cid, st in enumerate(self.status):
            if st == _IN_SERVICE:
                heapq.heappush(heap, (rnd.expovariate(nu[self.phase[cid]]), _SERVICE, seq, cid))
                seq += 1
            else:
                deadline = self.draw_patience()
                heapq.heappush(heap, (deadline, _PATIENCE, seq, cid))
                seq += 1
        heapq.heappush(heap, (self.next_arrival, _ARRIVAL, seq, -1))
        seq += 1

        Z, Q, status, phase, first, queue = self.Z, self.Q, self.status, self.phase, self.first, self.queue
        t_end = self.t_end
        while heap:
            t, kind, _, cid = heapq.heappop(heap)
            if t > t_end:
                break
            if kind == _PATIENCE and status[cid] != _QUEUED:
                continue
            self._advance(t)
            if kind == _ARRIVAL:
                k = self._pick(self.cum_p)
                cid = self._new_customer(k)
                self.E += 1
                self.X += 1
                if log is not None:
                    log.append((t, ARRIVE, cid, -1, k))
                if self.busy < n:
                    self.busy += 1
                    status[cid] = _IN_SERVICE
                    Z[k] += 1
                    self.B += 1
                    if log is not None:
                        log.append((t, ENTER, cid, -1, k))
                    heapq.heappush(heap, (t + rnd.expovariate(nu[k]), _SERVICE, seq, cid))
                    seq += 1
                else:
                    queue.append(cid)
                    Q[k] += 1
                    patience = self.draw_patience()
                    if patience != math.inf:
                        heapq.heappush(heap, (t + patience, _PATIENCE, seq, cid))
                        seq += 1
                heapq.heappush(heap, (t + self.draw_iat(), _ARRIVAL, seq, -1))
                seq += 1
            elif kind == _SERVICE:
                k = phase[cid]
                j = self._route(k)
                Z[k] -= 1
                if j < K:
                    Z[j] += 1
                    phase[cid] = j
                    if log is not None:
                        log.append((t, ROUTE, cid, k, j))
                    heapq.heappush(heap, (t + rnd.expovariate(nu[j]), _SERVICE, seq, cid))
                    seq += 1
                    continue
                status[cid] = _GONE
                self.D += 1
                self.X -= 1
                self.busy -= 1
                if log is not None:
                    log.append((t, DEPART, cid, k, K))
                while queue and status[queue[0]] != _QUEUED:
                    queue.popleft()
                if queue:
                    nxt = queue.popleft()
                    f = first[nxt]
                    Q[f] -= 1
                    Z[f] += 1
                    status[nxt] = _IN_SERVICE
                    self.busy += 1
                    self.B += 1
                    if log is not None:
                        log.append((t, ENTER, nxt, -1, f))
                    heapq.heappush(heap, (t + rnd.expovariate(nu[f]), _SERVICE, seq, nxt))
                    seq += 1
            else:
                f = first[cid]
                status[cid] = _GONE
                Q[f] -= 1
                self.A += 1
                self.X -= 1
                if log is not None:
                    log.append((t, ABANDON, cid, f, -1))
        self._advance(max(t_end, self.grid[-1]) + 1.0)

    # -- perturbed discipline ----------------------------------------------

    def run_perturbed(self) -> None:
        rnd, nu, log, K, n = self.rnd, self.nu, self.log, self.K, self.n
        alpha = self.sc.alpha
        Z, Q, first, queue = self.Z, self.Q, self.first, self.queue
        in_phase = [deque() for _ in range(K)]
        for cid, st in enumerate(self.status):
            if st == _IN_SERVICE:
                in_phase[self.phase[cid]].append(cid)
        t = 0.0
        t_arr = self.next_arrival
        t_end = self.t_end
        while True:
            rates = [Z[k] * nu[k] for k in range(K)]
            total_service = sum(rates)
            total = total_service + len(queue) * alpha
            t_clock = t + rnd.expovariate(total) if total > 0 else math.inf
            if t_arr <= t_clock:
                t = t_arr
                if t > t_end:
                    break
                self._advance(t)
                k = self._pick(self.cum_p)
                cid = self._new_customer(k)
                self.E += 1
                self.X += 1
                if log is not None:
                    log.append((t, ARRIVE, cid, -1, k))
                if self.busy < n:
                    self.busy += 1
                    Z[k] += 1
                    self.B += 1
                    in_phase[k].append(cid)
                    if log is not None:
                        log.append((t, ENTER, cid, -1, k))
                else:
                    queue.append(cid)
                    Q[k] += 1
                t_arr = t + self.draw_iat()
                continue
            t = t_clock
            if t > t_end:
                break
            self._advance(t)
            u = rnd.random() * total
            if u < total_service:
                k = 0
                acc = rates[0]
                while u >= acc and k < K - 1:
                    k += 1
                    acc += rates[k]
                cid = in_phase[k].popleft()
                j = self._route(k)
                Z[k] -= 1
                if j < K:
                    Z[j] += 1
                    in_phase[j].append(cid)
                    if log is not None:
                        log.append((t, ROUTE, cid, k, j))
                    continue
                self.D += 1
                self.X -= 1
                self.busy -= 1
                if log is not None:
                    log.append((t, DEPART, cid, k, K))
                if queue:
                    nxt = queue.popleft()
                    f = first[nxt]
                    Q[f] -= 1
                    Z[f] += 1
                    in_phase[f].append(nxt)
                    self.busy += 1
                    self.B += 1
                    if log is not None:
                        log.append((t, ENTER, nxt, -1, f))
            else:
                cid = queue.popleft()
                f = first[cid]
                Q[f] -= 1
                self.A += 1
                self.X -= 1
                if log is not None:
                    log.append((t, ABANDON, cid, f, -1))
        self._advance(max(t_end, self.grid[-1]) + 1.0)

    # -- output ------------------------------------------------------------

    def finish(self, discipline: str) -> SimPath:
        K = self.K
        rows = np.array(self.rows, dtype=float)
        grid = self.grid
        X = rows[:, 0].astype(np.int64)
        last = rows[:, 5]
        gap = grid - last
        Z = rows[:, 8 : 8 + K].astype(np.int64)
        Q = rows[:, 8 + K : 8 + 2 * K].astype(np.int64)
        T = rows[:, 8 + 2 * K :] + Z * gap[:, None]
        IXp = rows[:, 6] + np.maximum(X, 0) * gap
        IXm = rows[:, 7] + np.maximum(-X, 0) * gap
        events = None
        if self.log is not None:
            events = np.array(self.log, dtype=EVENT_DTYPE) if self.log else np.empty(0, EVENT_DTYPE)
        return SimPath(
            grid=grid,
            n=self.n,
            K=K,
            X=X,
            Z=Z,
            Q=Q,
            A=rows[:, 1].astype(np.int64),
            B=rows[:, 2].astype(np.int64),
            D=rows[:, 3].astype(np.int64),
            E=rows[:, 4].astype(np.int64),
            T=T,
            IXp=IXp,
            IXm=IXm,
            end_time=self.t_end,
            discipline=discipline,
            events=events,
        )


# ---------------------------------------------------------------------------
# pathwise checks


def check_invariants(path: SimPath, atol: float = 1e-8) -> list[str]:
    """Return a list of violated accounting identities (empty when all hold)."""
    bad = []
    n, X, Z, Q = path.n, path.X, path.Z, path.Q
    eZ = Z.sum(axis=1)
    if not np.array_equal(eZ, n - np.maximum(-X, 0)):
        bad.append("e'Z != n - X^-")
    if not np.array_equal(X, X[0] + path.E - path.D - path.A):
        bad.append("X != X(0) + E - D - A")
    if not np.array_equal(eZ, eZ[0] + path.B - path.D):
        bad.append("e'Z != e'Z(0) + B - D")
    if not np.array_equal(np.maximum(X, 0), Q.sum(axis=1)):
        bad.append("X^+ != e'Q")
    for name in ("A", "B", "D", "E"):
        if (np.diff(getattr(path, name)) < 0).any():
            bad.append(f"{name} decreases")
    if (Z < 0).any() or (Z > n).any():
        bad.append("Z outside [0, n]")
    if (Q < 0).any():
        bad.append("Q negative")
    # T is the integral of Z: its increments are bounded by the sup of Z over each step
    dT = np.diff(path.T, axis=0)
    if (dT < -atol).any() or (dT > n * path.dt + atol).any():
        bad.append("T increments out of range")
    if abs(path.T[0]).max() > atol:
        bad.append("T(0) != 0")
    if path.events is not None:
        ev = path.events
        gi = np.searchsorted(ev["t"], path.grid, side="right")
        departs = np.cumsum(ev["kind"] == DEPART)
        D_log = np.concatenate([[0], departs])[gi]
        if not np.array_equal(D_log, path.D):
            bad.append("D != logged completions routed to exit")
    return bad


# ---------------------------------------------------------------------------
# event-log derived quantities


def _require_log(path: SimPath) -> np.ndarray:
    if path.events is None:
        raise MissingEventLog("this quantity needs the event log; run with record_log=True")
    return path.events


def customer_times(path: SimPath) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-customer ``(arrival, queue_exit, abandoned)`` in arrival order.

    Customers present at time 0 arrive at 0; ``queue_exit`` is the time the
    customer left the waiting room (entering service or abandoning) and
    ``inf`` if it was still waiting at the end of the run.
    """
    ev = _require_log(path)
    ncust = int(ev["cid"].max()) + 1 if ev.size else 0
    arrive = np.full(ncust, np.inf)
    qexit = np.full(ncust, np.inf)
    abandoned = np.zeros(ncust, dtype=bool)
    kind, cid, t = ev["kind"], ev["cid"], ev["t"]
    m = (kind == ARRIVE) | (kind == INIT_QUEUE) | (kind == INIT_SERVICE)
    arrive[cid[m]] = t[m]
    m = (kind == ENTER) | (kind == ABANDON) | (kind == INIT_SERVICE)
    qexit[cid[m]] = t[m]
    abandoned[cid[kind == ABANDON]] = True
    return arrive, qexit, abandoned


def virtual_wait(path: SimPath, times) -> np.ndarray:
    """Offered waiting time ``W(t)`` at arbitrary times.

    ``W(t)`` is the delay an infinitely patient customer arriving at ``t``
    would see: zero if a server is idle, otherwise the first service
    completion after every customer ahead of it has left the waiting room.
    NaN where the answer lies beyond the simulated horizon.
    """
    ev = _require_log(path)
    times = np.asarray(times, dtype=float)
    kind, et = ev["kind"], ev["t"]
    ups = np.sort(et[kind == ARRIVE])
    downs = np.sort(et[(kind == DEPART) | (kind == ABANDON)])
    X = path.X[0] + np.searchsorted(ups, times, side="right") - np.searchsorted(downs, times, side="right")
    return _offered_wait(path, times, X)


def virtual_wait_path(path: SimPath) -> np.ndarray:
    """:func:`virtual_wait` on the sampling grid."""
    return _offered_wait(path, path.grid, path.X)


def _offered_wait(path: SimPath, times: np.ndarray, X: np.ndarray) -> np.ndarray:
    ev = _require_log(path)
    arrive, qexit, _ = customer_times(path)
    departs = ev["t"][ev["kind"] == DEPART]
    ahead_exit = np.maximum.accumulate(qexit) if qexit.size else qexit
    W = np.zeros(times.size)
    busy = X >= 0
    if not busy.any():
        return W
    tg = times[busy]
    j = np.searchsorted(arrive, tg, side="right")
    tau = tg.copy()
    has = j > 0
    tau[has] = np.maximum(tg[has], ahead_exit[j[has] - 1])
    idx = np.searchsorted(departs, tau, side="right")
    d = np.full(tg.size, np.nan)
    ok = np.isfinite(tau) & (idx < departs.size)
    d[ok] = departs[idx[ok]]
    W[busy] = d - tg
    return W


def zeta(path: SimPath, W: Optional[np.ndarray] = None) -> np.ndarray:
    """``zeta(t) = min(t, inf{s : s + W(s) > t})`` evaluated on the grid."""
    grid = path.grid
    if W is None:
        W = path.W
    reach = grid + np.where(np.isnan(W), np.inf, W)
    run_max = np.maximum.accumulate(reach)
    idx = np.searchsorted(run_max, grid, side="right")
    out = grid.copy()
    inside = idx < grid.size
    out[inside] = np.minimum(grid[inside], grid[idx[inside]])
    return out


def queued_abandoners(path: SimPath) -> np.ndarray:
    """Number of customers waiting at ``t`` who will eventually abandon."""
    arrive, qexit, abandoned = customer_times(path)
    a = np.sort(arrive[abandoned])
    e = np.sort(qexit[abandoned])
    g = path.grid
    return np.searchsorted(a, g, side="right") - np.searchsorted(e, g, side="right")


def _grid_counts(path: SimPath, mask: np.ndarray, cols: np.ndarray, width: int) -> np.ndarray:
    """Cumulative per-column counts of the masked events at each grid time."""
    ev = path.events
    g = path.grid
    out = np.zeros((g.size, width))
    gi = np.searchsorted(g, ev["t"][mask], side="left")
    keep = gi < g.size
    np.add.at(out, (gi[keep], cols[keep]), 1.0)
    return np.cumsum(out, axis=0)


def routing_counts(path: SimPath) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid-sampled ``(C, Nk, Phi0)``.

    ``C[:, k, j]`` counts phase-k completions routed to phase j,
    ``Nk[:, k]`` all phase-k completions and ``Phi0[:, j]`` service entries
    (after time 0) whose first phase is j.
    """
    ev = _require_log(path)
    K = path.K
    kind = ev["kind"]
    done = (kind == ROUTE) | (kind == DEPART)
    src = ev["src"].astype(np.int64)
    dst = ev["dst"].astype(np.int64)
    routed = kind == ROUTE
    C = _grid_counts(path, routed, src[routed] * K + dst[routed], K * K).reshape(-1, K, K)
    Nk = _grid_counts(path, done, src[done], K)
    enter = kind == ENTER
    Phi0 = _grid_counts(path, enter, dst[enter], K)
    return C, Nk, Phi0


def martingale(path: SimPath, sc: Scenario) -> np.ndarray:
    """``M(t) = sum_k (C_k - p^k N_k) - (I - P')(N - nu * T)`` on the grid."""
    ph = sc.ph
    C, Nk, _ = routing_counts(path)
    routed = C.sum(axis=1) - Nk @ ph.P
    compensated = (Nk - path.T * ph.nu) @ (np.eye(ph.K) - ph.P)
    return routed - compensated


def reconstruct_UV(path: SimPath, sc: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Driving paths ``(U, V)`` for which ``(X, Z - n gamma) = Phi(U, V)``.

    Built from logged primitives::

        U = X(0) + E_hat + (lambda_n - n mu) t + e'M - A + alpha int X^+
        V = (I - p e') Z_hat(0) + (Phi0(B) - p B) + (I - p e') M

    The ``-A + alpha int X^+`` pair makes the identity hold for any patience
    law; with exponential patience it is a martingale correction.
    """
    ph = sc.ph
    n, t = path.n, path.grid
    rate = sc.arrival_rate(n)
    M = martingale(path, sc)
    _, _, Phi0 = routing_counts(path)
    E_hat = path.E - rate * t
    U = path.X[0] + E_hat + (rate - n * ph.mu) * t + M.sum(axis=1) - path.A + sc.alpha * path.IXp
    Zhat0 = path.Z[0] - n * ph.gamma
    G = np.eye(ph.K) - np.outer(ph.p, np.ones(ph.K))
    V = (G @ Zhat0)[None, :] + Phi0 - np.outer(path.B, ph.p) + M @ G.T
    return U, V


def reconstruct_overloaded(path: SimPath, sc: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Inputs ``(u, v)`` with ``(X - n q, Z - n gamma) = Psi(u, v)``.

    Starts from :func:`reconstruct_UV` and moves the idle-server terms,
    ``alpha int X^-`` and ``p X^-``, into the drivers together with the
    fluid centring ``n (q + (lambda - mu) t)``.
    """
    U, V = reconstruct_UV(path, sc)
    n, t = path.n, path.grid
    Xm = np.maximum(-path.X, 0)
    u = U - n * (sc.q + (sc.lam - sc.mu) * t) - sc.alpha * path.IXm
    v = V - np.outer(Xm, sc.ph.p)
    return u, v


def as_grid_path(x, z, dt) -> GridPath:
    return GridPath.from_parts(np.asarray(x, dtype=float), np.asarray(z, dtype=float), dt)


# ---------------------------------------------------------------------------
# event-log text format: "time kind customer_id phase", phases 1-based, K+1 = exit


def write_event_log(path: SimPath, fname) -> None:
    ev = _require_log(path)
    K = path.K
    with open(fname, "w") as fh:
        fh.write(f"# K={K} n={path.n}\n")
        for t, kind, cid, src, dst in ev.tolist():
            if kind == ABANDON:
                phase = src + 1
            elif kind == DEPART:
                phase = K + 1
            else:
                phase = dst + 1
            fh.write(f"{t!r} {KIND_NAMES[kind]} {cid} {phase}\n")


def read_event_log(fname) -> tuple[np.ndarray, int]:
    """Parse a file from :func:`write_event_log`; returns ``(events, K)``."""
    kinds = {name: i for i, name in enumerate(KIND_NAMES)}
    K = None
    out = []
    where = {}
    with open(fname) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("K="):
                        K = int(tok[2:])
                continue
            ts, name, cs, ps = line.split()
            t, kind, cid, phase = float(ts), kinds[name], int(cs), int(ps) - 1
            if kind in (ARRIVE, ENTER, INIT_SERVICE, INIT_QUEUE):
                out.append((t, kind, cid, -1, phase))
                where[cid] = phase
            elif kind == ROUTE:
                out.append((t, kind, cid, where[cid], phase))
                where[cid] = phase
            elif kind == DEPART:
                out.append((t, kind, cid, where.pop(cid), phase))
            else:
                out.append((t, kind, cid, phase, -1))
    if K is None:
        raise ValueError("event log lacks the '# K=' header")
    return np.array(out, dtype=EVENT_DTYPE), K
