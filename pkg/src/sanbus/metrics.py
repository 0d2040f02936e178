"""Performance reports: bandwidth, processor utilization, queue length, wait.

Per PE: BW is the steady-state probability of an accessing phase, PU adds
the compute probability, queue length is the waiting-phase probability mass,
and waiting time is measured per granted request (grant cycle minus issue
cycle).  Simulated estimates carry 95% batch-means confidence intervals.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import model as m
from .engine import OccupancyAccumulator

log = logging.getLogger(__name__)

LITTLES_LAW_WARN = 0.05


@dataclass(frozen=True)
class Estimate:
    value: float
    lo: float | None = None
    hi: float | None = None


@dataclass(frozen=True)
class PeMetrics:
    bw: Estimate
    pu: Estimate
    qlen: Estimate
    wait: Estimate
    # hierarchical (two-bus) decomposition; None on a single shared bus
    bw_local: Estimate | None = None
    bw_global: Estimate | None = None
    qlen_local: Estimate | None = None
    qlen_global: Estimate | None = None
    wait_local: Estimate | None = None
    wait_global: Estimate | None = None
    phase_probs: dict[m.Phase, float] = field(default_factory=dict)


@dataclass(frozen=True)
class MemoryMetrics:
    bw: Estimate
    qlen: Estimate


@dataclass(frozen=True)
class MetricsReport:
    source: str  # "simulation" | "oracle"
    kind: m.ArchitectureKind
    pes: dict[str, PeMetrics]
    memories: dict[str, MemoryMetrics]
    measured_cycles: int | None = None


def _t975(df: int) -> float:
    return float(stats.t.ppf(0.975, df))


def _estimate(grand: float, batch_values: np.ndarray) -> Estimate:
    """Point value from grand totals; CI half-width from the batch spread."""
    vals = np.asarray(batch_values, dtype=float)
    vals = vals[~np.isnan(vals)]
    if vals.size < 2:
        return Estimate(grand)
    half = _t975(vals.size - 1) * vals.std(ddof=1) / math.sqrt(vals.size)
    return Estimate(grand, grand - half, grand + half)


def _memory_masks(model: m.Model) -> list[tuple[list[int], list[int]]]:
    """Per memory: (PE indices accessing it locally, indices accessing globally)."""
    out = []
    for b in range(model.n_buses):
        local = [i for i in range(model.n_pes) if model.home_bus_index[i] == b]
        glob = [i for i in range(model.n_pes)
                if model.kind == m.ArchitectureKind.HBB
                and model.home_bus_index[i] != b]
        out.append((local, glob))
    return out


def compute_report(acc: OccupancyAccumulator, model: m.Model) -> MetricsReport:
    """Turn an occupancy accumulator into the per-PE/per-memory report."""
    if acc.measured_cycles == 0:
        raise ValueError("accumulator holds zero measured cycles")
    hbb = model.kind == m.ArchitectureKind.HBB
    grand = acc.phase_probs()              # (n, 7)
    per_batch = acc.batch_phase_probs()    # (B, n, 7)

    def occ_est(i: int, codes: tuple[int, ...]) -> Estimate:
        return _estimate(float(grand[i, list(codes)].sum()),
                         per_batch[:, i, list(codes)].sum(axis=1))

    def wait_est(i: int, kinds: tuple[int, ...]) -> Estimate:
        waits = acc.wait_cycles[:, i, list(kinds)].sum(axis=1).astype(float)
        grants = acc.requests_granted[:, i, list(kinds)].sum(axis=1).astype(float)
        total_grants = grants.sum()
        point = float(waits.sum() / total_grants) if total_grants else 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            batch_vals = np.where(grants > 0, waits / grants, np.nan)
        return _estimate(point, batch_vals)

    pes: dict[str, PeMetrics] = {}
    for i, name in enumerate(model.pe_names):
        access = (m.ACC_L, m.ACC_G) if hbb else (m.ACC_L,)
        waiting = (m.FW_L, m.RW_L, m.FW_G, m.RW_G) if hbb else (m.FW_L, m.RW_L)
        bw = occ_est(i, access)
        pu = occ_est(i, (m.CP,) + access)
        qlen = occ_est(i, waiting)
        wait = wait_est(i, (0, 1) if hbb else (0,))
        extras = {}
        if hbb:
            extras = dict(
                bw_local=occ_est(i, (m.ACC_L,)),
                bw_global=occ_est(i, (m.ACC_G,)),
                qlen_local=occ_est(i, (m.FW_L, m.RW_L)),
                qlen_global=occ_est(i, (m.FW_G, m.RW_G)),
                wait_local=wait_est(i, (0,)),
                wait_global=wait_est(i, (1,)),
            )
        probs = {m.code_to_phase(c, model.kind): float(grand[i, c])
                 for c in model.phase_codes}
        pes[name] = PeMetrics(bw=bw, pu=pu, qlen=qlen, wait=wait,
                              phase_probs=probs, **extras)

    memories: dict[str, MemoryMetrics] = {}
    for b, (local_idx, global_idx) in enumerate(_memory_masks(model)):
        terms = [(i, (m.ACC_L,), (m.FW_L, m.RW_L)) for i in local_idx] + \
                [(i, (m.ACC_G,), (m.FW_G, m.RW_G)) for i in global_idx]
        bw_grand = sum(float(grand[i, list(cs)].sum()) for i, cs, _ in terms)
        bw_batches = sum(per_batch[:, i, list(cs)].sum(axis=1) for i, cs, _ in terms)
        q_grand = sum(float(grand[i, list(ws)].sum()) for i, _, ws in terms)
        q_batches = sum(per_batch[:, i, list(ws)].sum(axis=1) for i, _, ws in terms)
        memories[model.memories[b]] = MemoryMetrics(
            bw=_estimate(bw_grand, bw_batches),
            qlen=_estimate(q_grand, q_batches))

    return MetricsReport("simulation", model.kind, pes, memories,
                         acc.measured_cycles)


def littles_check(report: MetricsReport, acc: OccupancyAccumulator,
                  eps: float = 1e-9) -> float:
    """Max over PEs of |L - lambda W| / max(L, eps); warns above 5%.

    L comes from waiting-phase occupancy, lambda from issued requests, W from
    per-request waits of granted requests, so the identity carries edge
    effects of at most one in-flight wait per PE.
    """
    worst = 0.0
    for i, name in enumerate(acc.pe_names):
        lam = acc.request_rate(i)
        if lam == 0.0:
            continue
        l_bar = report.pes[name].qlen.value
        resid = abs(l_bar - lam * acc.mean_wait(i)) / max(l_bar, eps)
        worst = max(worst, resid)
    if worst > LITTLES_LAW_WARN:
        log.warning("Little's-law residual %.3f exceeds %.0f%% threshold "
                    "(short run or heavy truncation?)", worst,
                    LITTLES_LAW_WARN * 100)
    return worst
