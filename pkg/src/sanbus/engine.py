"""Cycle-synchronous simulation kernel for bus-architecture models.

Per-cycle micro-order (fixed; both the compiled kernel and the pure-Python
reference follow it exactly):

1. in-flight accesses tick down; finished holders free their buses and start
   a freshly sampled compute phase,
2. compute phases tick down; expired PEs issue a request (hierarchical PEs
   draw the request kind),
3. one fixed-priority grant scan over all pending requests; winners sample a
   connection time and occupy their buses in the same cycle,
4. losers are (re)classified: a needed bus held since an earlier cycle means
   residual wait, otherwise the request lost to a same-cycle winner and full
   waits; waiters already classified keep their phase until a bus in their
   resource set is released,
5. every PE's phase for the cycle is recorded.

A single run is strictly single-threaded and deterministic in (model, seed).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from numba import njit

from . import model as m
from .stochastics import _draw, _next_unit, derive_state


class EngineInvariantError(RuntimeError):
    """A per-cycle structural invariant (e.g. bus mutual exclusion) failed."""


@dataclass(frozen=True)
class SimConfig:
    total_cycles: int
    warmup_cycles: int
    batches: int
    seed: int

    def __post_init__(self):
        if self.total_cycles <= 0:
            raise ValueError("total_cycles must be positive")
        if not 0 <= self.warmup_cycles < self.total_cycles:
            raise ValueError("need 0 <= warmup_cycles < total_cycles")
        if self.batches < 1:
            raise ValueError("batches must be >= 1")
        if self.measured_cycles % self.batches:
            raise ValueError(
                f"measured cycles {self.measured_cycles} not divisible into "
                f"{self.batches} equal batches")

    @property
    def measured_cycles(self) -> int:
        return self.total_cycles - self.warmup_cycles

    @property
    def batch_cycles(self) -> int:
        return self.measured_cycles // self.batches

    @classmethod
    def from_measured(cls, measured_cycles: int, *, seed: int,
                      warmup_cycles: int | None = None,
                      batches: int = 30) -> "SimConfig":
        if warmup_cycles is None:
            warmup_cycles = measured_cycles // 10
        return cls(warmup_cycles + measured_cycles, warmup_cycles, batches, seed)


@dataclass(eq=False)
class OccupancyAccumulator:
    """Time-weighted phase occupancy and request statistics, per batch.

    For every (pe, phase): cycles spent and sojourn entries; per pe: requests
    issued, requests granted, and total waiting cycles of granted requests
    (grant cycle minus issue cycle).
    """

    kind: m.ArchitectureKind
    pe_names: tuple[str, ...]
    batch_cycles: int
    occupancy: np.ndarray         # int64 (batches, n, 7)
    entries: np.ndarray           # int64 (batches, n, 7)
    requests_issued: np.ndarray   # int64 (batches, n, 2)  per request kind
    requests_granted: np.ndarray  # int64 (batches, n, 2)
    wait_cycles: np.ndarray       # int64 (batches, n, 2)

    @property
    def n_batches(self) -> int:
        return self.occupancy.shape[0]

    @property
    def n_pes(self) -> int:
        return self.occupancy.shape[1]

    @property
    def measured_cycles(self) -> int:
        return self.n_batches * self.batch_cycles

    def total_occupancy(self) -> np.ndarray:
        return self.occupancy.sum(axis=0)

    def phase_probs(self) -> np.ndarray:
        """Grand phase-occupancy fractions, shape (n, 7); rows sum to 1."""
        return self.total_occupancy() / self.measured_cycles

    def batch_phase_probs(self) -> np.ndarray:
        return self.occupancy / self.batch_cycles

    def phase_prob(self, pe_idx: int, code: int) -> float:
        return float(self.total_occupancy()[pe_idx, code]) / self.measured_cycles

    def sojourn_mean(self, pe_idx: int, code: int) -> float:
        """Mean cycles per visit to a phase; NaN when the phase was never entered."""
        n_entries = int(self.entries.sum(axis=0)[pe_idx, code])
        if n_entries == 0:
            return float("nan")
        return float(self.total_occupancy()[pe_idx, code]) / n_entries

    def request_rate(self, pe_idx: int, kind: m.RequestKind | None = None) -> float:
        issued = self.requests_issued.sum(axis=0)[pe_idx]
        total = issued.sum() if kind is None else issued[kind]
        return float(total) / self.measured_cycles

    def mean_wait(self, pe_idx: int, kind: m.RequestKind | None = None) -> float:
        granted = self.requests_granted.sum(axis=0)[pe_idx]
        waits = self.wait_cycles.sum(axis=0)[pe_idx]
        if kind is not None:
            granted, waits = granted[kind], waits[kind]
        else:
            granted, waits = granted.sum(), waits.sum()
        if granted == 0:
            return 0.0
        return float(waits) / float(granted)


@dataclass(frozen=True)
class PendingRequest:
    kind: m.RequestKind
    need: int
    is_new: bool


@dataclass(frozen=True)
class CycleResolution:
    granted: tuple[tuple[int, m.RequestKind], ...]   # in grant-scan order
    reclassified: dict[int, int]                     # pe -> new waiting phase code


def resolve_requests(
    pending: Mapping[int, PendingRequest],
    pre_busy: int,
    released: int,
    order: tuple[tuple[int, m.RequestKind], ...],
) -> CycleResolution:
    """Arbitrate one cycle's pending requests and classify the losers.

    `pre_busy` holds buses occupied by accesses begun in earlier cycles (the
    mid-access set); `released` holds buses freed this cycle.  Waiters are
    re-classified only when a bus in their resource set was released (they
    had a chance to win); otherwise they keep their current waiting phase.
    """
    busy = pre_busy
    granted: list[tuple[int, m.RequestKind]] = []
    granted_set: set[int] = set()
    for i, kind in order:
        req = pending.get(i)
        if req is not None and req.kind == kind and not busy & req.need:
            busy |= req.need
            granted.append((i, kind))
            granted_set.add(i)
    reclassified: dict[int, int] = {}
    for i, req in pending.items():
        if i in granted_set:
            continue
        if not (req.is_new or req.need & released):
            continue
        sync = None
        if not req.need & pre_busy:
            sync = next(str(g) for g, gk in granted
                        if pending[g].need & req.need)
        outcome = m.GrantOutcome(
            granted=False,
            resource_mid_access=bool(req.need & pre_busy),
            sync_event=sync,
        )
        reclassified[i] = m.classify_request(req.kind, outcome)
    return CycleResolution(tuple(granted), reclassified)


# ---------------------------------------------------------------------------
# mutable simulation state (shared array layout for both execution paths)

_N_STREAMS = 4  # purposes: 0 compute, 1 local connect, 2 global connect, 3 kind


class _SimState:
    __slots__ = ("clock", "phase", "rem", "pend_kind", "issue", "holders",
                 "rng", "occ", "entered", "entries", "issued", "granted",
                 "waitsum")

    def __init__(self, model: m.Model, seed: int):
        n = model.n_pes
        self.clock = 0
        self.phase = np.zeros(n, np.int64)
        self.rem = np.zeros(n, np.int64)
        self.pend_kind = np.full(n, -1, np.int64)
        self.issue = np.zeros(n, np.int64)
        self.holders = np.full(model.n_buses, -1, np.int64)
        self.rng = np.empty((n, _N_STREAMS), np.uint64)
        for i in range(n):
            for p in range(_N_STREAMS):
                self.rng[i, p] = derive_state(seed, i, p)
        self.occ = np.zeros((n, m.N_PHASE_CODES), np.int64)
        self.entered = np.zeros(n, np.int64)
        self.entries = np.zeros((n, m.N_PHASE_CODES), np.int64)
        self.issued = np.zeros((n, 2), np.int64)
        self.granted = np.zeros((n, 2), np.int64)
        self.waitsum = np.zeros((n, 2), np.int64)
        # cycle 0: every PE starts a compute phase
        tables = model.tables()
        for i in range(n):
            v, s = _draw(tables.fam[i, 0], tables.par_a[i, 0],
                         tables.par_b[i, 0], tables.par_c[i, 0], self.rng[i, 0])
            self.rng[i, 0] = s
            self.rem[i] = v
            self.entries[i, m.CP] += 1

    def flush_spans(self):
        """Close open occupancy spans at the current cycle (segment boundary)."""
        for i in range(len(self.phase)):
            self.occ[i, self.phase[i]] += self.clock - self.entered[i]
            self.entered[i] = self.clock

    def reset_counters(self):
        self.occ[:] = 0
        self.entries[:] = 0
        self.issued[:] = 0
        self.granted[:] = 0
        self.waitsum[:] = 0


# ---------------------------------------------------------------------------
# compiled kernel

@njit(cache=True)
def _kernel(ncycles, clock, n, nbus,
            phase, rem, pend_kind, issue, holders, rng,
            need, order_pe, order_kind,
            fam, pa, pb, pc, local_prob, is_hbb,
            occ, entered, entries, issued, granted_ct, waitsum,
            check):
    nslots = order_pe.shape[0]
    just_completed = np.zeros(n, np.int64)
    just_issued = np.zeros(n, np.int64)
    for _ in range(ncycles):
        clock += 1
        released = np.int64(0)
        for i in range(n):
            just_completed[i] = 0
            just_issued[i] = 0
        # 1. access completions free buses and restart compute
        for i in range(n):
            ph = phase[i]
            if ph == 1 or ph == 4:
                rem[i] -= 1
                if rem[i] == 0:
                    k = 0 if ph == 1 else 1
                    released |= need[i, k]
                    for b in range(nbus):
                        if holders[b] == i:
                            holders[b] = -1
                    occ[i, ph] += clock - entered[i]
                    entered[i] = clock
                    phase[i] = 0
                    entries[i, 0] += 1
                    just_completed[i] = 1
                    v, s = _draw(fam[i, 0], pa[i, 0], pb[i, 0], pc[i, 0],
                                 rng[i, 0])
                    rng[i, 0] = s
                    rem[i] = v
        pre_busy = np.int64(0)
        for b in range(nbus):
            if holders[b] >= 0:
                pre_busy |= np.int64(1) << b
        # 2. compute expiries issue requests
        for i in range(n):
            if phase[i] == 0 and just_completed[i] == 0:
                rem[i] -= 1
                if rem[i] == 0:
                    if is_hbb == 1:
                        s, u = _next_unit(rng[i, 3])
                        rng[i, 3] = s
                        pend_kind[i] = 0 if u < local_prob[i] else 1
                    else:
                        pend_kind[i] = 0
                    issue[i] = clock
                    issued[i, pend_kind[i]] += 1
                    just_issued[i] = 1
        # 3. fixed-priority grant scan (non-blocking, non-preemptive)
        busy = pre_busy
        for si in range(nslots):
            i = order_pe[si]
            k = order_kind[si]
            if pend_kind[i] == k:
                mask = need[i, k]
                if busy & mask == 0:
                    busy |= mask
                    for b in range(nbus):
                        if (mask >> b) & 1:
                            holders[b] = i
                    ph_new = 1 if k == 0 else 4
                    occ[i, phase[i]] += clock - entered[i]
                    entered[i] = clock
                    phase[i] = ph_new
                    entries[i, ph_new] += 1
                    waitsum[i, k] += clock - issue[i]
                    granted_ct[i, k] += 1
                    pend_kind[i] = -1
                    p = 1 + k
                    v, s = _draw(fam[i, p], pa[i, p], pb[i, p], pc[i, p],
                                 rng[i, p])
                    rng[i, p] = s
                    rem[i] = v
        # 4. (re)classify losers: mid-access bus -> residual wait, else full
        for i in range(n):
            k = pend_kind[i]
            if k >= 0:
                mask = need[i, k]
                if just_issued[i] == 1 or (mask & released) != 0:
                    base = 3 if (mask & pre_busy) != 0 else 2
                    ph_new = base + (3 if k == 1 else 0)
                    occ[i, phase[i]] += clock - entered[i]
                    entered[i] = clock
                    phase[i] = ph_new
                    entries[i, ph_new] += 1
        if check == 1:
            for b in range(nbus):
                h = holders[b]
                if h >= 0:
                    ph = phase[h]
                    if ph != 1 and ph != 4:
                        return -clock
                    if (need[h, 0 if ph == 1 else 1] >> b) & 1 == 0:
                        return -clock
            for i in range(n):
                ph = phase[i]
                if ph == 1 or ph == 4:
                    if rem[i] <= 0:
                        return -clock
                    mask = need[i, 0 if ph == 1 else 1]
                    for b in range(nbus):
                        if (mask >> b) & 1 and holders[b] != i:
                            return -clock
    return clock


# ---------------------------------------------------------------------------
# pure-Python reference path (same draws, same micro-order, readable)

def _advance_reference(state: _SimState, model: m.Model,
                       tables: m.ModelTables) -> None:
    n = model.n_pes
    clock = state.clock + 1
    released = 0
    just_completed: set[int] = set()
    just_issued: set[int] = set()

    def move(i: int, code: int):
        state.occ[i, state.phase[i]] += clock - state.entered[i]
        state.entered[i] = clock
        state.phase[i] = code
        state.entries[i, code] += 1

    for i in range(n):
        ph = int(state.phase[i])
        if ph in m.ACCESS_CODES:
            state.rem[i] -= 1
            if state.rem[i] == 0:
                kind = m.RequestKind.LOCAL if ph == m.ACC_L else m.RequestKind.GLOBAL
                released |= model.need_masks[i][kind]
                for b in range(model.n_buses):
                    if state.holders[b] == i:
                        state.holders[b] = -1
                move(i, m.CP)
                just_completed.add(i)
                v, s = _draw(tables.fam[i, 0], tables.par_a[i, 0],
                             tables.par_b[i, 0], tables.par_c[i, 0],
                             state.rng[i, 0])
                state.rng[i, 0] = s
                state.rem[i] = v

    pre_busy = 0
    for b in range(model.n_buses):
        if state.holders[b] >= 0:
            pre_busy |= 1 << b

    for i in range(n):
        if int(state.phase[i]) == m.CP and i not in just_completed:
            state.rem[i] -= 1
            if state.rem[i] == 0:
                if model.kind == m.ArchitectureKind.HBB:
                    s, u = _next_unit(state.rng[i, 3])
                    state.rng[i, 3] = s
                    kind = (m.RequestKind.LOCAL if u < tables.local_prob[i]
                            else m.RequestKind.GLOBAL)
                else:
                    kind = m.RequestKind.LOCAL
                state.pend_kind[i] = int(kind)
                state.issue[i] = clock
                state.issued[i, int(kind)] += 1
                just_issued.add(i)

    pending = {
        i: PendingRequest(m.RequestKind(int(state.pend_kind[i])),
                          model.need_masks[i][int(state.pend_kind[i])],
                          i in just_issued)
        for i in range(n) if state.pend_kind[i] >= 0
    }
    result = resolve_requests(pending, pre_busy, released, model.scan_order)

    for i, kind in result.granted:
        mask = model.need_masks[i][kind]
        for b in range(model.n_buses):
            if (mask >> b) & 1:
                state.holders[b] = i
        move(i, m.access_code(kind))
        state.waitsum[i, int(kind)] += clock - state.issue[i]
        state.granted[i, int(kind)] += 1
        state.pend_kind[i] = -1
        p = 1 + int(kind)
        v, s = _draw(tables.fam[i, p], tables.par_a[i, p], tables.par_b[i, p],
                     tables.par_c[i, p], state.rng[i, p])
        state.rng[i, p] = s
        state.rem[i] = v

    for i, code in result.reclassified.items():
        move(i, code)

    state.clock = clock


def _check_state(state: _SimState, model: m.Model) -> None:
    holders = state.holders
    for b in range(model.n_buses):
        h = int(holders[b])
        if h >= 0:
            ph = int(state.phase[h])
            if ph not in m.ACCESS_CODES:
                raise EngineInvariantError(
                    f"cycle {state.clock}: bus {model.buses[b]} held by "
                    f"{model.pe_names[h]} which is not accessing")
    for i in range(model.n_pes):
        ph = int(state.phase[i])
        if ph in m.ACCESS_CODES:
            kind = m.RequestKind.LOCAL if ph == m.ACC_L else m.RequestKind.GLOBAL
            mask = model.need_masks[i][kind]
            if state.rem[i] <= 0:
                raise EngineInvariantError(
                    f"cycle {state.clock}: {model.pe_names[i]} accessing with "
                    "no remaining cycles")
            for b in range(model.n_buses):
                if (mask >> b) & 1 and int(holders[b]) != i:
                    raise EngineInvariantError(
                        f"cycle {state.clock}: {model.pe_names[i]} accessing "
                        f"without holding {model.buses[b]} (mutual exclusion)")


class Simulation:
    """Stepwise simulation of a validated model (pure-Python reference path).

    `advance_cycle` applies the documented micro-order once and returns the
    resulting snapshot; `run` drives a full warmup + batches schedule.  The
    fast path (`simulate`) produces bit-identical traces via the compiled
    kernel.
    """

    def __init__(self, model: m.Model, config: SimConfig, *,
                 check_invariants: bool = False):
        self.model = model
        self.config = config
        self.check_invariants = check_invariants
        self.tables = model.tables()
        self.state = _SimState(model, config.seed)

    def advance_cycle(self) -> m.GlobalState:
        _advance_reference(self.state, self.model, self.tables)
        if self.check_invariants:
            _check_state(self.state, self.model)
        return self.snapshot()

    def snapshot(self) -> m.GlobalState:
        st = self.state
        phases = tuple(m.code_to_phase(int(c), self.model.kind)
                       for c in st.phase)
        holders = tuple(
            self.model.pe_names[int(h)] if h >= 0 else None
            for h in st.holders)
        remaining = {self.model.pe_names[i]: int(st.rem[i])
                     for i in range(self.model.n_pes)
                     if int(st.phase[i]) in m.ACCESS_CODES}
        return m.GlobalState(st.clock, phases, holders, remaining)

    def run(self) -> OccupancyAccumulator:
        def advance(k: int):
            for _ in range(k):
                _advance_reference(self.state, self.model, self.tables)
                if self.check_invariants:
                    _check_state(self.state, self.model)
        return _run_segments(self.state, self.model, self.config, advance)


def _run_segments(state: _SimState, model: m.Model, config: SimConfig,
                  advance: Callable[[int], None]) -> OccupancyAccumulator:
    n = model.n_pes
    if config.warmup_cycles:
        advance(config.warmup_cycles)
        state.flush_spans()
        state.reset_counters()
    shape = (config.batches, n, m.N_PHASE_CODES)
    occupancy = np.zeros(shape, np.int64)
    entries = np.zeros(shape, np.int64)
    issued = np.zeros((config.batches, n, 2), np.int64)
    granted = np.zeros((config.batches, n, 2), np.int64)
    waits = np.zeros((config.batches, n, 2), np.int64)
    for b in range(config.batches):
        advance(config.batch_cycles)
        state.flush_spans()
        occupancy[b] = state.occ
        entries[b] = state.entries
        issued[b] = state.issued
        granted[b] = state.granted
        waits[b] = state.waitsum
        state.reset_counters()
    return OccupancyAccumulator(model.kind, model.pe_names,
                                config.batch_cycles, occupancy, entries,
                                issued, granted, waits)


def simulate(model: m.Model, config: SimConfig, *,
             check_invariants: bool = False,
             reference: bool = False) -> OccupancyAccumulator:
    """Run warmup plus all measured batches; deterministic in (model, seed)."""
    if reference:
        return Simulation(model, config,
                          check_invariants=check_invariants).run()
    tables = model.tables()
    state = _SimState(model, config.seed)
    check = 1 if check_invariants else 0

    def advance(k: int):
        new_clock = _kernel(
            k, state.clock, model.n_pes, model.n_buses,
            state.phase, state.rem, state.pend_kind, state.issue,
            state.holders, state.rng,
            tables.need, tables.order_pe, tables.order_kind,
            tables.fam, tables.par_a, tables.par_b, tables.par_c,
            tables.local_prob, 1 if tables.is_hbb else 0,
            state.occ, state.entered, state.entries,
            state.issued, state.granted, state.waitsum,
            check)
        if new_clock < 0:
            raise EngineInvariantError(
                f"bus mutual-exclusion or holder consistency failed at "
                f"cycle {-new_clock}")
        state.clock = int(new_clock)

    return _run_segments(state, model, config, advance)
