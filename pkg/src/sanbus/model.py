"""Architecture description and the per-PE automaton: phases, guards, validation.

A processing element cycles through a compute phase and, per request, an
access phase guarded by fixed-priority arbitration.  A request that loses
arbitration in the same cycle another PE is granted enters a full wait (it
waits out the winner's entire connection time); a request that finds its
resource mid-access enters a residual wait.  Hierarchical (two-bus) systems
split the access/wait phases into local and global variants: a local access
holds the home bus, a global access atomically holds both buses.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum

import numpy as np

from .stochastics import (
    DurationDistribution,
    MomentPair,
    fit_two_moment,
    geometric_for_mean,
)


class ValidationError(ValueError):
    """An architecture description violates a structural invariant."""


class ArchitectureKind(str, Enum):
    SSB = "ssb"  # single shared bus
    HBB = "hbb"  # two buses joined by a bridge


class RequestKind(IntEnum):
    LOCAL = 0   # home bus only (the only kind on an SSB)
    GLOBAL = 1  # home bus + remote bus, held together


class Phase(str, Enum):
    """Per-PE phase; a PE is in exactly one phase every cycle."""

    COMPUTE = "cp"
    ACCESS = "ac"
    FULL_WAIT = "fw"
    RESIDUAL_WAIT = "rw"
    LOCAL_ACCESS = "lac"
    LOCAL_FULL_WAIT = "lfw"
    LOCAL_RESIDUAL_WAIT = "lrw"
    GLOBAL_ACCESS = "gac"
    GLOBAL_FULL_WAIT = "gfw"
    GLOBAL_RESIDUAL_WAIT = "grw"


# Compact phase codes used by the engine kernel and the oracle state vectors:
# compute, then (access, full wait, residual wait) per request kind.
CP = 0
ACC_L, FW_L, RW_L = 1, 2, 3
ACC_G, FW_G, RW_G = 4, 5, 6
N_PHASE_CODES = 7

_SSB_PHASES = {CP: Phase.COMPUTE, ACC_L: Phase.ACCESS, FW_L: Phase.FULL_WAIT,
               RW_L: Phase.RESIDUAL_WAIT}
_HBB_PHASES = {CP: Phase.COMPUTE,
               ACC_L: Phase.LOCAL_ACCESS, FW_L: Phase.LOCAL_FULL_WAIT,
               RW_L: Phase.LOCAL_RESIDUAL_WAIT,
               ACC_G: Phase.GLOBAL_ACCESS, FW_G: Phase.GLOBAL_FULL_WAIT,
               RW_G: Phase.GLOBAL_RESIDUAL_WAIT}

ACCESS_CODES = (ACC_L, ACC_G)
WAIT_CODES = (FW_L, RW_L, FW_G, RW_G)


def access_code(kind: RequestKind) -> int:
    return ACC_L if kind == RequestKind.LOCAL else ACC_G


def waiting_code(kind: RequestKind, residual: bool) -> int:
    base = RW_L if residual else FW_L
    return base + (3 if kind == RequestKind.GLOBAL else 0)


def phase_codes_for(kind: ArchitectureKind) -> tuple[int, ...]:
    if kind == ArchitectureKind.SSB:
        return (CP, ACC_L, FW_L, RW_L)
    return (CP, ACC_L, FW_L, RW_L, ACC_G, FW_G, RW_G)


def code_to_phase(code: int, kind: ArchitectureKind) -> Phase:
    table = _SSB_PHASES if kind == ArchitectureKind.SSB else _HBB_PHASES
    return table[code]


@dataclass(frozen=True)
class PeParams:
    """Input parameters of one processing element.

    `connect` describes the single connection-time distribution of an SSB
    PE; hierarchical PEs instead carry `local_prob` (probability a request
    is local) plus `local_connect`/`global_connect` moment pairs.
    """

    name: str
    priority: int
    mean_compute: float
    connect: MomentPair | None = None
    local_prob: float | None = None
    local_connect: MomentPair | None = None
    global_connect: MomentPair | None = None
    home_bus: str | None = None


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: ArchitectureKind
    buses: tuple[str, ...]
    pes: tuple[PeParams, ...]
    memories: tuple[str, ...] = ()


@dataclass(frozen=True)
class GlobalState:
    """Snapshot of the composed system: one phase per PE plus bus occupancy."""

    cycle: int
    phases: tuple[Phase, ...]
    holders: tuple[str | None, ...]       # per bus, the holding PE if any
    remaining: dict[str, int] = field(default_factory=dict)  # active accesses


@dataclass(frozen=True)
class GrantOutcome:
    """Arbitration outcome for one pending request in one cycle."""

    granted: bool
    resource_mid_access: bool           # some needed bus held since an earlier cycle
    sync_event: str | None = None       # PE granted this cycle on an overlapping bus


@dataclass(frozen=True)
class TransitionGuardResult:
    alpha1_enabled: bool                # request may be granted this cycle
    alpha3_enabled: bool                # residual wait: a needed bus is mid-access
    sync_event: str | None              # full wait: the same-cycle winner synced with


def classify_request(kind: RequestKind, outcome: GrantOutcome) -> int:
    """Phase code a pending request lands in, given its arbitration outcome.

    Exactly one of access / full wait / residual wait applies: granted wins;
    otherwise a needed bus already mid-access forces a residual wait; the
    only remaining way to lose is to a same-cycle grant, a full wait.
    """
    if outcome.granted:
        return access_code(kind)
    if outcome.resource_mid_access:
        return waiting_code(kind, residual=True)
    if outcome.sync_event is None:
        raise ValueError(
            "request lost arbitration with all resources free and no "
            "same-cycle winner: no pending request or broken grant scan"
        )
    return waiting_code(kind, residual=False)


def evaluate_guards(
    requested: frozenset[str],
    free_buses: frozenset[str],
    mid_access_holders: dict[str, str],
    same_cycle_winners: dict[str, str],
) -> TransitionGuardResult:
    """Evaluate the grant/wait guards for one request against bus occupancy.

    `mid_access_holders` maps buses held by accesses begun in earlier cycles;
    `same_cycle_winners` maps buses granted earlier in this cycle's scan.
    """
    alpha3 = any(b in mid_access_holders for b in requested)
    sync = next((same_cycle_winners[b] for b in sorted(requested)
                 if b in same_cycle_winners), None)
    alpha1 = not alpha3 and sync is None and requested <= free_buses
    return TransitionGuardResult(alpha1, alpha3, sync)


@dataclass(frozen=True)
class Model:
    """Validated architecture, normalized for simulation and exact solving.

    PEs are ordered by descending priority; index 0 is the highest-priority
    PE and doubles as the arbitration scan position within each request
    class.  On a hierarchical architecture every global request outranks
    every local request, with the PE order applied inside each class.
    """

    kind: ArchitectureKind
    buses: tuple[str, ...]
    memories: tuple[str, ...]
    pes: tuple[PeParams, ...]
    compute_dists: tuple[DurationDistribution, ...]
    connect_dists: tuple[tuple[DurationDistribution | None, ...], ...]  # [pe][kind]
    home_bus_index: tuple[int, ...]
    need_masks: tuple[tuple[int, int], ...]   # [pe][kind] bus bitmask (0 if kind unused)
    scan_order: tuple[tuple[int, RequestKind], ...]

    @property
    def n_pes(self) -> int:
        return len(self.pes)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def pe_names(self) -> tuple[str, ...]:
        return tuple(pe.name for pe in self.pes)

    def pe_index(self, name: str) -> int:
        return self.pe_names.index(name)

    @property
    def phase_codes(self) -> tuple[int, ...]:
        return phase_codes_for(self.kind)

    def request_kinds(self, pe_idx: int) -> tuple[RequestKind, ...]:
        if self.kind == ArchitectureKind.SSB:
            return (RequestKind.LOCAL,)
        xl = self.pes[pe_idx].local_prob
        if xl == 1.0:
            return (RequestKind.LOCAL,)
        if xl == 0.0:
            return (RequestKind.GLOBAL,)
        return (RequestKind.LOCAL, RequestKind.GLOBAL)

    def tables(self) -> "ModelTables":
        return _build_tables(self)


@dataclass(frozen=True)
class ModelTables:
    """Model constants flattened into arrays for the engine kernel."""

    need: np.ndarray         # int64[n, 2]
    order_pe: np.ndarray     # int64[n_slots]
    order_kind: np.ndarray   # int64[n_slots]
    fam: np.ndarray          # int64[n, 3]   purposes: compute, local, global
    par_a: np.ndarray        # float64[n, 3]
    par_b: np.ndarray        # float64[n, 3]
    par_c: np.ndarray        # float64[n, 3]
    local_prob: np.ndarray   # float64[n]
    is_hbb: bool


def _build_tables(model: Model) -> ModelTables:
    n = model.n_pes
    need = np.zeros((n, 2), np.int64)
    fam = np.zeros((n, 3), np.int64)
    par_a = np.zeros((n, 3), np.float64)
    par_b = np.zeros((n, 3), np.float64)
    par_c = np.zeros((n, 3), np.float64)
    local_prob = np.ones(n, np.float64)
    for i in range(n):
        for kind in (RequestKind.LOCAL, RequestKind.GLOBAL):
            need[i, kind] = model.need_masks[i][kind]
        fam[i, 0], par_a[i, 0], par_b[i, 0], par_c[i, 0] = \
            model.compute_dists[i].kernel_params()
        for kind in (RequestKind.LOCAL, RequestKind.GLOBAL):
            dist = model.connect_dists[i][kind]
            if dist is not None:
                fam[i, 1 + kind], par_a[i, 1 + kind], par_b[i, 1 + kind], \
                    par_c[i, 1 + kind] = dist.kernel_params()
        if model.kind == ArchitectureKind.HBB:
            local_prob[i] = model.pes[i].local_prob
    order_pe = np.array([pe for pe, _ in model.scan_order], np.int64)
    order_kind = np.array([int(k) for _, k in model.scan_order], np.int64)
    return ModelTables(need, order_pe, order_kind, fam, par_a, par_b, par_c,
                       local_prob, model.kind == ArchitectureKind.HBB)


def _check_moments(pe: str, field_name: str, mp: MomentPair | None):
    if mp is None:
        return
    # MomentPair validates itself on construction; re-raise with context for
    # values smuggled in via replace()/dataclass bypass.
    if mp.mean < 1:
        raise ValidationError(f"{pe}.{field_name}: mean {mp.mean} < 1 cycle")
    if mp.second_moment < mp.mean**2 - 1e-9:
        raise ValidationError(
            f"{pe}.{field_name}: second moment {mp.second_moment} < mean^2"
        )


def validate_architecture(spec: ArchitectureSpec) -> Model:
    """Check all structural invariants and return the normalized model."""
    if not spec.pes:
        raise ValidationError("at least one PE required")
    if spec.kind == ArchitectureKind.SSB and len(spec.buses) != 1:
        raise ValidationError(
            f"single-shared-bus architecture needs exactly 1 bus, got {len(spec.buses)}")
    if spec.kind == ArchitectureKind.HBB and len(spec.buses) != 2:
        raise ValidationError(
            f"bus-bridge architecture needs exactly 2 buses, got {len(spec.buses)}")
    if len(set(spec.buses)) != len(spec.buses):
        raise ValidationError("duplicate bus identifiers")

    memories = spec.memories or tuple(f"mem{i + 1}" for i in range(len(spec.buses)))
    if len(memories) != len(spec.buses):
        raise ValidationError("need exactly one memory per bus")

    names = [pe.name for pe in spec.pes]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate PE names")
    priorities = [pe.priority for pe in spec.pes]
    if len(set(priorities)) != len(priorities):
        raise ValidationError("duplicate priority: PE priorities must be pairwise distinct")

    pes = []
    for pe in spec.pes:
        if pe.mean_compute < 1:
            raise ValidationError(f"{pe.name}.mean_compute must be >= 1 cycle")
        home = pe.home_bus if pe.home_bus is not None else spec.buses[0]
        if home not in spec.buses:
            raise ValidationError(f"{pe.name}: unknown bus reference {home!r}")
        if spec.kind == ArchitectureKind.SSB:
            if pe.connect is None:
                raise ValidationError(f"{pe.name}: connect moments required for SSB")
            _check_moments(pe.name, "connect", pe.connect)
        else:
            if pe.local_prob is None:
                raise ValidationError(f"{pe.name}: local_prob required for HBB PE")
            if not 0.0 <= pe.local_prob <= 1.0:
                raise ValidationError(f"{pe.name}.local_prob must be in [0, 1]")
            if pe.local_connect is None or pe.global_connect is None:
                raise ValidationError(
                    f"{pe.name}: local_connect and global_connect required for HBB PE")
            _check_moments(pe.name, "local_connect", pe.local_connect)
            _check_moments(pe.name, "global_connect", pe.global_connect)
        pes.append(replace(pe, home_bus=home))

    pes.sort(key=lambda pe: -pe.priority)  # index 0 = highest priority

    compute_dists = tuple(geometric_for_mean(pe.mean_compute) for pe in pes)
    connect_dists = []
    need_masks = []
    home_idx = []
    for pe in pes:
        hb = spec.buses.index(pe.home_bus)
        home_idx.append(hb)
        if spec.kind == ArchitectureKind.SSB:
            connect_dists.append((fit_two_moment(pe.connect), None))
            need_masks.append((1 << hb, 0))
        else:
            connect_dists.append((fit_two_moment(pe.local_connect),
                                  fit_two_moment(pe.global_connect)))
            all_mask = (1 << len(spec.buses)) - 1
            need_masks.append((1 << hb, all_mask))

    if spec.kind == ArchitectureKind.SSB:
        order = tuple((i, RequestKind.LOCAL) for i in range(len(pes)))
    else:
        order = tuple((i, RequestKind.GLOBAL) for i in range(len(pes))) + \
            tuple((i, RequestKind.LOCAL) for i in range(len(pes)))

    return Model(
        kind=spec.kind,
        buses=tuple(spec.buses),
        memories=tuple(memories),
        pes=tuple(pes),
        compute_dists=compute_dists,
        connect_dists=tuple(connect_dists),
        home_bus_index=tuple(home_idx),
        need_masks=tuple(need_masks),
        scan_order=order,
    )
