"""Discrete-event engine for the n-server queue under pluggable routing.

The engine keeps the head count X, the FIFO buffer Q and per-server busy
flags, and enforces work conservation structurally: an arrival that finds an
idle server is routed immediately, a departure that leaves work in the buffer
pulls the head-of-line job onto the freed server, and service is never
interrupted or migrated.  Service completions are realized by drawing a fresh
exponential duration at each assignment, which is equal in law to running
per-server Poisson clocks against the busy-time integrals but costs O(1) per
event; the busy-time integrals themselves are still tracked for the analysis
stage.

Event-time ties are broken (departure before arrival, then server index) so
that runs are reproducible even when floating point collides.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError
from .sampling import SamplePlan
from .scenario import ArrivalLaw, RateProfile

AUDIT_MODE_MAX_N = 10_000   # full event recording up to this size, grid above

_DEPART = 0
_ARRIVE = 1


class PolicyKind(str, Enum):
    PI0 = "PI0"                      # rank-based, needs a SamplePlan
    FSF = "FSF"                      # true-rate fastest-first
    RANDOM_IDLE = "RandomIdle"
    LOWEST_INDEX = "LowestIndex"
    SLOWEST_FIRST = "SlowestFirst"   # diagnostic anti-policy


def parse_policy(name: str) -> PolicyKind:
    for p in PolicyKind:
        if p.value.lower() == str(name).lower():
            return p
    raise ConfigurationError(f"unknown policy {name!r}; choose from "
                             + ", ".join(p.value for p in PolicyKind))


def choose_server(policy: PolicyKind, idle_set, context=None,
                  rng: np.random.Generator | None = None) -> int:
    """Reference routing rule over an explicit idle set.

    context carries the rank array for PI0 and the rate array for
    FSF/SlowestFirst.  The engine uses an equivalent priority heap; this
    function is the plain statement of the rule, used directly for tests.
    """
    idle = sorted(int(k) for k in idle_set)
    if not idle:
        raise ValueError("choose_server called with an empty idle set")
    if policy is PolicyKind.PI0:
        rank = context
        return max(idle, key=lambda k: rank[k])
    if policy is PolicyKind.FSF:
        rates = context
        return max(idle, key=lambda k: (rates[k], -k))
    if policy is PolicyKind.SLOWEST_FIRST:
        rates = context
        return min(idle, key=lambda k: (rates[k], k))
    if policy is PolicyKind.LOWEST_INDEX:
        return idle[0]
    if policy is PolicyKind.RANDOM_IDLE:
        return idle[int(rng.integers(0, len(idle)))]
    raise ConfigurationError(f"unknown policy {policy!r}")


def renewal_stream(arrival: ArrivalLaw, lambda_n: float, rng: np.random.Generator):
    """Generator of absolute arrival times: the i-th is sum_{j<=i} U(j)/lambda_n."""
    if lambda_n <= 0:
        raise ConfigurationError(f"lambda_n={lambda_n} must be positive")
    nxt = arrival.block_sampler(rng)
    t = 0.0
    while True:
        t += nxt() / lambda_n
        yield t


@dataclass
class RecordOptions:
    """Recording granularity and optional audit extras.

    mode "full" records every event (default for n <= AUDIT_MODE_MAX_N),
    "grid" thins to a uniform grid of step grid_step.  server_class is an
    optional int array (values 0/1/2) driving the per-class idle counters;
    job_log keeps per-job routing records for the FIFO / non-interruption
    audits.
    """

    mode: str = "auto"
    grid_step: float | None = None
    server_class: np.ndarray | None = None
    partition_meta: dict | None = None
    job_log: bool = False
    meta: dict = field(default_factory=dict)


@dataclass
class PathRecord:
    """Piecewise-constant trajectory recorded at event (or grid) times.

    Values are right-continuous: the row at time t holds the post-event
    state.  idle_rate_integral is the running integral of the summed rates
    of idle servers, the tracker behind the drift-decomposition residual.
    """

    t: np.ndarray
    X: np.ndarray
    Q: np.ndarray
    I: np.ndarray
    I_class: np.ndarray          # shape (3, len(t))
    A: np.ndarray
    idle_rate_integral: np.ndarray
    queue_integral: np.ndarray
    meta: dict
    summary: dict
    # audit extras (full mode only; empty arrays otherwise)
    event_kind: np.ndarray = field(default_factory=lambda: np.empty(0, np.int8))
    srv_departed: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    srv_routed: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    busy0: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint8))
    jobs: dict | None = None     # arrays: arr_t, route_t, server, dep_t

    @property
    def n(self) -> int:
        return self.meta["n"]

    def index_at(self, tq: float) -> int:
        """Index of the last recorded row at or before tq (right-continuous value)."""
        i = int(np.searchsorted(self.t, tq, side="right")) - 1
        if i < 0:
            raise ValueError(f"no recorded state at or before t={tq}")
        return i

    def x_at(self, tq: float) -> int:
        return int(self.X[self.index_at(tq)])

    def to_csv(self, path) -> None:
        cols = ("t", "X", "Q", "I", "I_class_0", "I_class_1", "I_class_2",
                "A", "idle_rate_integral")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            ic = self.I_class
            for j in range(len(self.t)):
                fh.write(f"{float(self.t[j])!r},{self.X[j]},{self.Q[j]},{self.I[j]},"
                         f"{ic[0, j]},{ic[1, j]},{ic[2, j]},{self.A[j]},"
                         f"{float(self.idle_rate_integral[j])!r}\n")

    # Compact binary layout (documented in the README):
    #   magic b'HWQP', u32 version=1, u32 meta_len, meta_len bytes of JSON meta,
    #   u64 n_rows, then contiguous little-endian columns in order
    #   t <f8, X <i8, Q <i8, I <i8, I_class <i4 (3 rows back to back),
    #   A <i8, idle_rate_integral <f8, queue_integral <f8.
    def to_binary(self, path) -> None:
        meta_blob = json.dumps({"n": self.meta["n"], "policy": self.meta.get("policy"),
                                "seed": self.meta.get("seed")}, sort_keys=True).encode()
        rows = len(self.t)
        with open(path, "wb") as fh:
            fh.write(b"HWQP")
            fh.write(struct.pack("<II", 1, len(meta_blob)))
            fh.write(meta_blob)
            fh.write(struct.pack("<Q", rows))
            fh.write(np.ascontiguousarray(self.t, "<f8").tobytes())
            fh.write(np.ascontiguousarray(self.X, "<i8").tobytes())
            fh.write(np.ascontiguousarray(self.Q, "<i8").tobytes())
            fh.write(np.ascontiguousarray(self.I, "<i8").tobytes())
            fh.write(np.ascontiguousarray(self.I_class, "<i4").tobytes())
            fh.write(np.ascontiguousarray(self.A, "<i8").tobytes())
            fh.write(np.ascontiguousarray(self.idle_rate_integral, "<f8").tobytes())
            fh.write(np.ascontiguousarray(self.queue_integral, "<f8").tobytes())

    @staticmethod
    def from_binary(path) -> "PathRecord":
        with open(path, "rb") as fh:
            if fh.read(4) != b"HWQP":
                raise ValueError(f"{path} is not a path record")
            version, meta_len = struct.unpack("<II", fh.read(8))
            if version != 1:
                raise ValueError(f"unsupported path record version {version}")
            meta = json.loads(fh.read(meta_len))
            rows, = struct.unpack("<Q", fh.read(8))

            def col(dtype):
                a = np.frombuffer(fh.read(rows * np.dtype(dtype).itemsize), dtype)
                return a.copy()

            t = col("<f8"); X = col("<i8"); Q = col("<i8"); I = col("<i8")
            ic = np.frombuffer(fh.read(3 * rows * 4), "<i4").reshape(3, rows).copy()
            A = col("<i8"); idle = col("<f8"); qint = col("<f8")
        return PathRecord(t=t, X=X, Q=Q, I=I, I_class=ic, A=A,
                          idle_rate_integral=idle, queue_integral=qint,
                          meta=meta, summary={})


def _priority(policy: PolicyKind, n: int, rates: np.ndarray,
              plan: SamplePlan | None) -> tuple[np.ndarray, str]:
    """Static routing priority per server (smaller = routed to first) and the
    name of the ordering used for the initial idle assignment."""
    idx = np.arange(n)
    if policy is PolicyKind.PI0:
        return (n - plan.rank).astype(np.int64), "rank"
    if policy is PolicyKind.FSF:
        order = np.lexsort((idx, -rates))
        prio = np.empty(n, np.int64); prio[order] = idx
        return prio, "rate_desc"
    if policy is PolicyKind.SLOWEST_FIRST:
        order = np.lexsort((idx, rates))
        prio = np.empty(n, np.int64); prio[order] = idx
        return prio, "rate_asc"
    if policy is PolicyKind.LOWEST_INDEX:
        return idx.copy(), "index"
    if policy is PolicyKind.RANDOM_IDLE:
        # no static preference; fall back to the LowestIndex ordering for the
        # initial idle assignment (flagged in metadata)
        return idx.copy(), "lowest_index_fallback"
    raise ConfigurationError(f"unknown policy {policy!r}")


def simulate(profile: RateProfile, arrival: ArrivalLaw, lambda_n: float,
             policy: PolicyKind, *, horizon: float, rng: np.random.Generator,
             plan: SamplePlan | None = None, x0: int | None = None,
             record: RecordOptions | None = None,
             assert_invariants: bool = False) -> PathRecord:
    """Run one trajectory and return its recorded path.

    lambda_n == 0 disables arrivals entirely (a test hook for draining runs);
    negative values are rejected.  x0 defaults to n (all servers busy, empty
    buffer).  With x0 < n the n - x0 least-preferred servers under the
    policy's initial ordering start idle; with x0 > n the excess waits in the
    buffer.
    """
    if lambda_n < 0:
        raise ConfigurationError(f"lambda_n={lambda_n} must be >= 0")
    if horizon <= 0:
        raise ConfigurationError(f"horizon={horizon} must be positive")
    if policy is PolicyKind.PI0 and plan is None:
        raise ConfigurationError("policy PI0 requires a SamplePlan")
    n = profile.n_realized
    if plan is not None and plan.n != n:
        raise ConfigurationError(f"plan built for n={plan.n}, profile has n={n}")
    x0 = n if x0 is None else int(x0)
    if x0 < 0:
        raise ConfigurationError(f"x0={x0} must be >= 0")

    record = record or RecordOptions()
    mode = record.mode
    if mode == "auto":
        mode = "full" if n <= AUDIT_MODE_MAX_N else "grid"
    if mode == "grid":
        step = record.grid_step or horizon / 100.0
        if step <= 0:
            raise ConfigurationError(f"grid_step={step} must be positive")
        grid = np.arange(0.0, horizon + step * 1e-9, step)
    elif mode != "full":
        raise ConfigurationError(f"unknown recording mode {record.mode!r}")

    rates = np.asarray(profile.rates, dtype=np.float64)
    rates_l = rates.tolist()
    means_l = (1.0 / rates).tolist()
    if record.server_class is not None:
        if len(record.server_class) != n:
            raise ConfigurationError("server_class length does not match n")
        cls_l = [int(c) for c in record.server_class]
    else:
        cls_l = None

    prio_arr, init_order = _priority(policy, n, rates, plan)
    prio = prio_arr.tolist()
    server_of_prio = np.empty(n, np.int64)
    server_of_prio[prio_arr] = np.arange(n)
    server_of_prio_l = server_of_prio.tolist()
    random_policy = policy is PolicyKind.RANDOM_IDLE

    # --- initial state --------------------------------------------------
    i0 = max(n - x0, 0)
    busy = [1] * n
    if i0 > 0:
        by_pref = np.argsort(prio_arr, kind="stable")  # most preferred first
        for k in by_pref[n - i0:]:
            busy[int(k)] = 0
    Q = max(x0 - n, 0)
    X = x0

    std_buf = rng.standard_exponential(4096)
    std_pos = 0

    def std_exp() -> float:
        nonlocal std_buf, std_pos
        if std_pos == len(std_buf):
            std_buf = rng.standard_exponential(4096)
            std_pos = 0
        v = std_buf[std_pos]
        std_pos += 1
        return v

    heap: list = []
    idle_heap: list = []
    idle_list: list = []
    idle_pos = [-1] * n
    idle_rate = 0.0
    ic = [0, 0, 0]
    busy_since = [0.0] * n
    busy_accum = [0.0] * n
    cur_job = [-1] * n

    job_log = record.job_log
    jobs_arr_t: list = []
    jobs_route_t: list = []
    jobs_server: list = []
    jobs_dep_t: list = []

    def new_job(arr_t: float) -> int:
        jobs_arr_t.append(arr_t)
        jobs_route_t.append(math.nan)
        jobs_server.append(-1)
        jobs_dep_t.append(math.nan)
        return len(jobs_arr_t) - 1

    fifo: list = []   # job ids waiting, head at index fifo_head
    fifo_head = 0

    for k in range(n):
        if busy[k]:
            heapq.heappush(heap, (std_exp() * means_l[k], _DEPART, k))
            if job_log:
                j = new_job(0.0)
                jobs_route_t[j] = 0.0
                jobs_server[j] = k
                cur_job[k] = j
        else:
            if random_policy:
                idle_pos[k] = len(idle_list)
                idle_list.append(k)
            else:
                heapq.heappush(idle_heap, prio[k])
            idle_rate += rates_l[k]
            if cls_l is not None:
                ic[cls_l[k]] += 1
    if job_log:
        for _ in range(Q):
            fifo.append(new_job(0.0))

    arrivals_on = lambda_n > 0
    if arrivals_on:
        next_u = arrival.block_sampler(rng)
        arr_clock = next_u() / lambda_n
        heapq.heappush(heap, (arr_clock, _ARRIVE, -1))

    # --- recording buffers ----------------------------------------------
    rec_t: list = [0.0]
    rec_X: list = [X]
    rec_Q: list = [Q]
    rec_I: list = [n - X + Q]
    rec_ic0: list = [ic[0]]; rec_ic1: list = [ic[1]]; rec_ic2: list = [ic[2]]
    rec_A: list = [0]
    rec_idle: list = [0.0]
    rec_qint: list = [0.0]
    rec_kind: list = [-1]
    rec_dep: list = [-1]
    rec_route: list = [-1]
    full = mode == "full"
    if not full:
        gi = 1 if len(grid) > 0 and grid[0] == 0.0 else 0

    t = 0.0
    idle_int = 0.0
    q_int = 0.0
    x_int = 0.0
    A_cum = 0
    D_cum = 0
    n_waited = 0

    push = heapq.heappush
    pop = heapq.heappop

    while heap:
        te, kind, key = pop(heap)
        if te > horizon:
            break
        if not full:
            # flush grid points strictly before this event with the pre-event
            # state; a grid point equal to te gets the post-event state below
            while gi < len(grid) and grid[gi] < te:
                g = float(grid[gi])
                rec_t.append(g); rec_X.append(X); rec_Q.append(Q); rec_I.append(n - X + Q)
                rec_ic0.append(ic[0]); rec_ic1.append(ic[1]); rec_ic2.append(ic[2])
                rec_A.append(A_cum)
                rec_idle.append(idle_int + idle_rate * (g - t))
                rec_qint.append(q_int + Q * (g - t))
                gi += 1
        dt = te - t
        idle_int += idle_rate * dt
        q_int += Q * dt
        x_int += X * dt
        t = te
        routed = -1
        departed = -1
        if kind == _DEPART:
            k = key
            departed = k
            D_cum += 1
            X -= 1
            if job_log:
                jobs_dep_t[cur_job[k]] = t
                cur_job[k] = -1
            if Q > 0:
                # head-of-line job onto the freed server, fresh duration
                Q -= 1
                routed = k
                push(heap, (t + std_exp() * means_l[k], _DEPART, k))
                if job_log:
                    j = fifo[fifo_head]
                    fifo_head += 1
                    jobs_route_t[j] = t
                    jobs_server[j] = k
                    cur_job[k] = j
            else:
                busy[k] = 0
                busy_accum[k] += t - busy_since[k]
                idle_rate += rates_l[k]
                if cls_l is not None:
                    ic[cls_l[k]] += 1
                if random_policy:
                    idle_pos[k] = len(idle_list)
                    idle_list.append(k)
                else:
                    push(idle_heap, prio[k])
        else:
            A_cum += 1
            X += 1
            if job_log:
                j = new_job(t)
            if random_policy:
                have_idle = bool(idle_list)
            else:
                have_idle = bool(idle_heap)
            if have_idle:
                if random_policy:
                    i = int(rng.integers(0, len(idle_list)))
                    k = idle_list[i]
                    last = idle_list[-1]
                    idle_list[i] = last
                    idle_pos[last] = i
                    idle_list.pop()
                    idle_pos[k] = -1
                else:
                    k = server_of_prio_l[pop(idle_heap)]
                routed = k
                busy[k] = 1
                busy_since[k] = t
                idle_rate -= rates_l[k]
                if cls_l is not None:
                    ic[cls_l[k]] -= 1
                push(heap, (t + std_exp() * means_l[k], _DEPART, k))
                if job_log:
                    jobs_route_t[j] = t
                    jobs_server[j] = k
                    cur_job[k] = j
            else:
                Q += 1
                n_waited += 1
                if job_log:
                    fifo.append(j)
            arr_clock += next_u() / lambda_n
            push(heap, (arr_clock, _ARRIVE, -1))
        if full:
            rec_t.append(t); rec_X.append(X); rec_Q.append(Q); rec_I.append(n - X + Q)
            rec_ic0.append(ic[0]); rec_ic1.append(ic[1]); rec_ic2.append(ic[2])
            rec_A.append(A_cum)
            rec_idle.append(idle_int)
            rec_qint.append(q_int)
            rec_kind.append(kind)
            rec_dep.append(departed)
            rec_route.append(routed)
        if assert_invariants:
            assert Q == max(X - n, 0), f"buffer {Q} != (X-n)+ at t={t}"
            assert (n - X + Q) == max(n - X, 0), f"idle count mismatch at t={t}"
            assert X == x0 + A_cum - D_cum, f"flow balance broken at t={t}"
            assert sum(busy) == X - Q, f"busy flags disagree with X-Q at t={t}"

    # close out integrals and grid rows at the horizon
    dt = horizon - t
    idle_int += idle_rate * dt
    q_int += Q * dt
    x_int += X * dt
    if not full:
        while gi < len(grid):
            g = float(grid[gi])
            rec_t.append(g); rec_X.append(X); rec_Q.append(Q); rec_I.append(n - X + Q)
            rec_ic0.append(ic[0]); rec_ic1.append(ic[1]); rec_ic2.append(ic[2])
            rec_A.append(A_cum)
            rec_idle.append(idle_int - idle_rate * (horizon - g))
            rec_qint.append(q_int - Q * (horizon - g))
            gi += 1
    busy_time = np.array(busy_accum)
    for k in range(n):
        if busy[k]:
            busy_time[k] += horizon - busy_since[k]

    meta = {
        "n": n,
        "policy": policy.value,
        "lambda_n": lambda_n,
        "x0": x0,
        "horizon": horizon,
        "arrival_family": arrival.family,
        "arrival_scv": arrival.scv,
        "record_mode": mode,
        "init_order": init_order,
        "partition": record.partition_meta,
    }
    meta.update(record.meta)
    summary = {
        "arrivals": A_cum,
        "departures": D_cum,
        "n_waited": n_waited,
        "idle_rate_integral_end": idle_int,
        "queue_integral_end": q_int,
        "x_integral_end": x_int,
        "time_avg_x": x_int / horizon,
        "busy_time": busy_time,
    }
    jobs = None
    if job_log:
        jobs = {
            "arr_t": np.array(jobs_arr_t),
            "route_t": np.array(jobs_route_t),
            "server": np.array(jobs_server, dtype=np.int64),
            "dep_t": np.array(jobs_dep_t),
        }
    return PathRecord(
        t=np.array(rec_t),
        X=np.array(rec_X, dtype=np.int64),
        Q=np.array(rec_Q, dtype=np.int64),
        I=np.array(rec_I, dtype=np.int64),
        I_class=np.array([rec_ic0, rec_ic1, rec_ic2], dtype=np.int32),
        A=np.array(rec_A, dtype=np.int64),
        idle_rate_integral=np.array(rec_idle),
        queue_integral=np.array(rec_qint),
        meta=meta,
        summary=summary,
        event_kind=np.array(rec_kind, dtype=np.int8) if full else np.empty(0, np.int8),
        srv_departed=np.array(rec_dep, dtype=np.int64) if full else np.empty(0, np.int64),
        srv_routed=np.array(rec_route, dtype=np.int64) if full else np.empty(0, np.int64),
        busy0=np.array([1] * n, np.uint8) if x0 >= n else _busy0_array(n, prio_arr, i0),
        jobs=jobs,
    )


def _busy0_array(n: int, prio_arr: np.ndarray, i0: int) -> np.ndarray:
    b = np.ones(n, np.uint8)
    by_pref = np.argsort(prio_arr, kind="stable")
    b[by_pref[n - i0:]] = 0
    return b
