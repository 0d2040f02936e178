"""Seeded random-number streams and integer duration distributions fitted to moments.

All durations are positive integer cycle counts.  Streams are counter-based
(splitmix64) so that a (seed, stream id) pair always reproduces the same
sample sequence, in pure Python and inside the compiled simulation kernel
alike.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# distribution family codes shared with the engine kernel
FAMILY_DETERMINISTIC = 0
FAMILY_GEOMETRIC = 1
FAMILY_TWO_POINT = 2


def _mix64(x: int) -> int:
    """splitmix64 output scrambler on a 64-bit value."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


def stable_id(token: str | int) -> int:
    """Map a stream-id token to a 64-bit integer, stable across processes."""
    if isinstance(token, int):
        return token & _MASK64
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def derive_state(seed: int, *tokens: str | int) -> int:
    """Derive an initial splitmix64 state from a seed and stream-id tokens."""
    x = _mix64(seed & _MASK64)
    for tok in tokens:
        x = _mix64((x + _GOLDEN) ^ ((stable_id(tok) * _MIX1) & _MASK64))
    return x


@njit(cache=True)
def _next_u64(state):
    state = state + np.uint64(_GOLDEN)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return state, z ^ (z >> np.uint64(31))


@njit(cache=True)
def _next_unit(state):
    """Advance the stream; return a uniform double in [0, 1) with 53 random bits."""
    state, z = _next_u64(state)
    return state, (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _draw(family, a, b, c, state):
    """Draw one duration.  Parameter slots per family:

    deterministic: a = value (consumes no randomness)
    geometric:     a = p, b = ln(1 - p)
    two-point:     a = low, b = high, c = P(low)
    """
    if family == FAMILY_DETERMINISTIC:
        return np.int64(a), state
    state, u = _next_unit(state)
    if family == FAMILY_GEOMETRIC:
        if a >= 1.0:
            return np.int64(1), state
        return np.int64(1) + np.int64(math.log(1.0 - u) / b), state
    if u < c:
        return np.int64(a), state
    return np.int64(b), state


@dataclass(frozen=True)
class MomentPair:
    """First and second moment of an integer-cycle duration."""

    mean: float
    second_moment: float

    def __post_init__(self):
        if self.mean < 1:
            raise ValueError(f"duration mean must be >= 1 cycle, got {self.mean}")
        if self.second_moment < self.mean**2 - 1e-9:
            raise ValueError(
                f"second moment {self.second_moment} < mean^2 {self.mean ** 2}: "
                "variance would be negative"
            )

    @property
    def variance(self) -> float:
        return self.second_moment - self.mean**2

    @classmethod
    def geometric(cls, mean: float) -> "MomentPair":
        """Moment pair of the geometric distribution with the given mean."""
        return cls(mean, 2.0 * mean * mean - mean)


@dataclass(frozen=True)
class Deterministic:
    value: int

    @property
    def mean(self) -> float:
        return float(self.value)

    @property
    def second_moment(self) -> float:
        return float(self.value) ** 2

    def kernel_params(self):
        return FAMILY_DETERMINISTIC, float(self.value), 0.0, 0.0


@dataclass(frozen=True)
class Geometric:
    """Geometric on {1, 2, ...}: P(k) = (1-p)^(k-1) p, mean 1/p."""

    p: float

    @property
    def mean(self) -> float:
        return 1.0 / self.p

    @property
    def second_moment(self) -> float:
        return (2.0 - self.p) / (self.p * self.p)

    def kernel_params(self):
        ln_1mp = -math.inf if self.p >= 1.0 else math.log(1.0 - self.p)
        return FAMILY_GEOMETRIC, self.p, ln_1mp, 0.0


@dataclass(frozen=True)
class TwoPointMixture:
    """Mixture of two integer support points; matches a mean exactly and a
    second moment exactly when an integer pair exists, else as closely as the
    integer lattice allows (deviation recorded)."""

    low: int
    high: int
    p_low: float
    target_second_moment: float

    @property
    def mean(self) -> float:
        return self.p_low * self.low + (1.0 - self.p_low) * self.high

    @property
    def second_moment(self) -> float:
        return self.p_low * self.low**2 + (1.0 - self.p_low) * self.high**2

    @property
    def fit_deviation(self) -> float:
        """Absolute gap between achieved and requested second moment."""
        return abs(self.second_moment - self.target_second_moment)

    def kernel_params(self):
        return FAMILY_TWO_POINT, float(self.low), float(self.high), self.p_low


DurationDistribution = Deterministic | Geometric | TwoPointMixture


def geometric_for_mean(mean: float) -> Geometric:
    """Memoryless default used when a duration is specified by its mean alone."""
    if mean < 1:
        raise ValueError(f"duration mean must be >= 1 cycle, got {mean}")
    return Geometric(1.0 / mean)


def _is_integer(x: float, tol: float = 1e-9) -> bool:
    return abs(x - round(x)) <= tol


def fit_two_moment(target: MomentPair) -> DurationDistribution:
    """Fit a positive-integer distribution with mean exactly target.mean.

    Preference order: point mass (zero variance), geometric (when the moments
    sit exactly on the geometric relation m2 = 2 m^2 - m), then a two-point
    mixture {1, b} and finally a searched pair {a, b}.  The mean is always
    matched exactly; the second moment is exact whenever an integer support
    pair solves the moment equations, otherwise the closest lattice fit is
    returned with the gap recorded on the distribution.
    """
    m, m2 = target.mean, target.second_moment
    if m == 1.0:
        if m2 > 1.0 + 1e-9:
            raise ValueError(
                "mean 1 forces a point mass at 1; second moment "
                f"{m2} > 1 is infeasible on positive integers"
            )
        return Deterministic(1)
    if _is_integer(m) and math.isclose(m2, m * m, rel_tol=1e-12, abs_tol=1e-12):
        return Deterministic(int(round(m)))
    if math.isclose(m2, 2 * m * m - m, rel_tol=1e-12, abs_tol=1e-9):
        return Geometric(1.0 / m)

    # two-point search: for a < m <= b the achieved second moment is
    # m (a + b) - a b, so b solves (m2 - m a) / (m - a) when exact.
    best: TwoPointMixture | None = None
    for a in range(1, int(math.floor(m)) + 1):
        if a >= m:
            break
        b_real = (m2 - m * a) / (m - a)
        for b in {int(math.floor(b_real)), int(math.ceil(b_real))}:
            if b <= a or b < m:
                continue
            p_low = (b - m) / (b - a)
            if not (0.0 <= p_low <= 1.0):
                continue
            cand = TwoPointMixture(a, b, p_low, m2)
            if best is None or cand.fit_deviation < best.fit_deviation - 1e-12:
                best = cand
            elif (
                abs(cand.fit_deviation - best.fit_deviation) <= 1e-12
                and (cand.high - cand.low) < (best.high - best.low)
            ):
                best = cand
    if best is None:
        raise ValueError(f"no feasible integer two-point fit for {target}")
    return best


@dataclass
class RngStream:
    """A single reproducible sample stream, identified by (seed, pe, purpose)."""

    seed: int
    pe: str | int
    purpose: str | int
    state: int = 0

    def __post_init__(self):
        if self.state == 0:
            self.state = derive_state(self.seed, self.pe, self.purpose)

    def next_u64(self) -> int:
        s, z = _next_u64(np.uint64(self.state))
        self.state = int(s)
        return int(z)

    def uniform(self) -> float:
        s, u = _next_unit(np.uint64(self.state))
        self.state = int(s)
        return float(u)


def sample(dist: DurationDistribution, stream: RngStream) -> int:
    """Draw one integer duration (>= 1), advancing the stream deterministically."""
    fam, a, b, c = dist.kernel_params()
    v, s = _draw(fam, a, b, c, np.uint64(stream.state))
    stream.state = int(s)
    return int(v)
