"""Fixed-priority, non-preemptive, multi-resource grant logic.

One scan per cycle walks the (pe, request-kind) priority order from highest
to lowest and grants every request whose entire resource set is still free,
marking the set busy for the remainder of the scan.  A stalled high-priority
request does not reserve buses: lower-priority requests with disjoint free
resource sets are still granted (non-blocking scan).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class Request:
    pe: str
    resources: frozenset[str]
    issued_at: int = 0


@dataclass(frozen=True)
class GrantDecision:
    granted: tuple[tuple[str, frozenset[str]], ...]
    still_pending: tuple[str, ...]


def scan(
    requested: Sequence[bool],
    need: Sequence[int],
    busy: int,
) -> tuple[list[int], int]:
    """Core grant scan over priority-ordered slots using bus bitmasks.

    Returns the granted slot indices (in scan order) and the final busy mask.
    Busy buses are never revoked; a request is granted only if its whole mask
    is free at its turn.
    """
    granted = []
    for slot in range(len(requested)):
        if requested[slot] and not busy & need[slot]:
            busy |= need[slot]
            granted.append(slot)
    return granted, busy


def grant(
    pending: Sequence[Request],
    busy: set[str] | frozenset[str],
    priority_order: Sequence[tuple[str, frozenset[str]]],
) -> GrantDecision:
    """Arbitrate pending requests against busy buses.

    `priority_order` lists every admissible (pe, resource set) pair from
    highest to lowest priority; each pending request must match one of them.
    """
    buses = sorted({b for _, res in priority_order for b in res})
    bus_bit = {b: 1 << i for i, b in enumerate(buses)}
    for req in pending:
        for b in req.resources:
            if b not in bus_bit:
                raise ValueError(f"request by {req.pe} names unknown bus {b!r}")

    slot_of = {}
    for slot, (pe, res) in enumerate(priority_order):
        slot_of[(pe, frozenset(res))] = slot
    requested = [False] * len(priority_order)
    req_by_slot: dict[int, Request] = {}
    for req in pending:
        key = (req.pe, frozenset(req.resources))
        if key not in slot_of:
            raise ValueError(
                f"request {req.pe} for {sorted(req.resources)} has no priority slot")
        slot = slot_of[key]
        requested[slot] = True
        req_by_slot[slot] = req

    need = [sum(bus_bit[b] for b in res) for _, res in priority_order]
    busy_mask = sum(bus_bit[b] for b in busy)
    granted_slots, _ = scan(requested, need, busy_mask)

    granted = tuple((req_by_slot[s].pe, frozenset(priority_order[s][1]))
                    for s in granted_slots)
    granted_pes = {pe for pe, _ in granted}
    still = tuple(req.pe for req in pending if req.pe not in granted_pes)
    return GrantDecision(granted, still)
