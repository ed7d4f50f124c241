"""Actively odd-parity pairing and its finite-key formula chain."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .decoy import chernoff_lower, chernoff_upper
from .domain import InsufficientStatistics, SecurityParams


@dataclass
class RawKeyPair:
    """Z-window raw keys; bit convention: Alice sends -> 1, Bob sends -> 0."""

    alice_bits: np.ndarray
    bob_bits: np.ndarray
    tags: Optional[np.ndarray] = None

    def __post_init__(self):
        self.alice_bits = np.asarray(self.alice_bits, dtype=np.int8)
        self.bob_bits = np.asarray(self.bob_bits, dtype=np.int8)
        if self.alice_bits.shape != self.bob_bits.shape:
            raise ValueError("alice_bits and bob_bits differ in length")

    @property
    def n_t(self) -> int:
        return int(self.alice_bits.size)

    @property
    def qber(self) -> float:
        return float(np.mean(self.alice_bits != self.bob_bits)) if self.n_t else float("nan")


@dataclass
class AoppOutcome:
    alice_out: np.ndarray
    bob_out: np.ndarray
    n_g: int
    n_odd: int
    pairs: np.ndarray = field(repr=False, default=None)
    survived: np.ndarray = field(repr=False, default=None)

    @property
    def nt_prime(self) -> int:
        return int(self.alice_out.size)

    @property
    def survived_error_rate(self) -> float:
        if not self.alice_out.size:
            return float("nan")
        return float(np.mean(self.alice_out != self.bob_out))


def aopp_pair(raw: RawKeyPair, seed: int) -> AoppOutcome:
    """Run AOPP on a raw key pair.

    Bob pairs every bit of his minority value with a distinct, uniformly
    random bit of the other value, and lists each pair in random order.
    Alice keeps the pairs whose bits have odd parity on her side too; both
    then keep the bit at the first listed position. ``n_odd`` comes from an
    independent random two-by-two grouping of Bob's whole string.
    """
    if raw.n_t < 2:
        raise InsufficientStatistics("aopp", "need at least two raw bits")
    rng = np.random.default_rng(seed)
    b = raw.bob_bits
    ones = np.flatnonzero(b == 1)
    zeros = np.flatnonzero(b == 0)
    if ones.size == 0 or zeros.size == 0:
        raise InsufficientStatistics("aopp", "Bob's raw key has no 0s or no 1s; no pairs possible")
    n_g = min(ones.size, zeros.size)
    ones = rng.permutation(ones)[:n_g]
    zeros = rng.permutation(zeros)[:n_g]
    flip = rng.random(n_g) < 0.5
    first = np.where(flip, zeros, ones)
    second = np.where(flip, ones, zeros)
    pairs = np.stack([first, second], axis=1)

    a = raw.alice_bits
    survived = (a[first] ^ a[second]).astype(bool)
    keep = first[survived]

    order = rng.permutation(raw.n_t)
    half = raw.n_t // 2
    n_odd = int(np.count_nonzero(b[order[:half]] != b[order[half : 2 * half]]))
    return AoppOutcome(a[keep].copy(), b[keep].copy(), int(n_g), n_odd, pairs, survived)


@dataclass(frozen=True)
class ZComposition:
    """Expected or observed Z-window effective events split by Bob's bit.

    bob1 = Bob did not send (Alice-only -> correct, neither -> error);
    bob0 = Bob sent (Bob-only -> correct, both -> error).
    """

    bob1_correct: float
    bob1_error: float
    bob0_correct: float
    bob0_error: float

    @property
    def n_t(self) -> float:
        return self.bob1_correct + self.bob1_error + self.bob0_correct + self.bob0_error

    @property
    def n_bob1(self) -> float:
        return self.bob1_correct + self.bob1_error

    @property
    def n_bob0(self) -> float:
        return self.bob0_correct + self.bob0_error

    @property
    def qber(self) -> float:
        return (self.bob1_error + self.bob0_error) / self.n_t


def aopp_expected(comp: ZComposition) -> Dict[str, float]:
    """Mean AOPP observables for a raw key of the given composition."""
    n_t = comp.n_t
    n1, n0 = comp.n_bob1, comp.n_bob0
    if n1 <= 0 or n0 <= 0:
        raise InsufficientStatistics("aopp", "Bob's raw key has no 0s or no 1s")
    e1 = comp.bob1_error / n1
    e0 = comp.bob0_error / n0
    n_g = min(n1, n0)
    q = n1 / n_t
    survive = (1 - e0) * (1 - e1) + e0 * e1
    return {
        "n_g": n_g,
        "n_odd": n_t * q * (1 - q),
        "nt_prime": n_g * survive,
        "ez_prime": e0 * e1 / survive if survive > 0 else 0.0,
        "q": q,
    }


def simulate_raw_keys(comp: ZComposition, seed: int) -> RawKeyPair:
    """Shuffled raw key pair with exactly the (rounded) composition counts."""
    rng = np.random.default_rng(seed)
    counts = [int(round(x)) for x in (comp.bob1_correct, comp.bob1_error, comp.bob0_correct, comp.bob0_error)]
    # (alice, bob): A-only (1,1), neither (0,1), B-only (0,0), both (1,0)
    patterns = [(1, 1), (0, 1), (0, 0), (1, 0)]
    a = np.concatenate([np.full(c, p[0], np.int8) for c, p in zip(counts, patterns)])
    b = np.concatenate([np.full(c, p[1], np.int8) for c, p in zip(counts, patterns)])
    perm = rng.permutation(a.size)
    return RawKeyPair(a[perm], b[perm])


def aopp_finite_key(
    n1_lb: float,
    n10_lb: float,
    n01_lb: float,
    e1ph_ub: float,
    n_t: float,
    n_g: float,
    n_odd: float,
    sec: SecurityParams,
    finite: bool = True,
) -> Tuple[float, float, Dict[str, float]]:
    """Untagged-pair count and phase-flip rate after AOPP.

    ``n1_lb`` is the already Chernoff-lowered number of untagged bits.
    With ``finite=False`` every Chernoff map is the identity (infinite-key
    check); the de Finetti term ``r`` is still evaluated from ``sec.eps_rk``.

    The post-AOPP phase-error count is bounded on ``2 (n - r) e (1 - e)``:
    a pair carries a phase flip when exactly one of its two bits does.

    Returns:
        ``(n1_prime, e1ph_prime, diagnostics)``.

    Raises:
        InsufficientStatistics: if ``n_odd <= 0``, ``n <= 0``, ``k <= 0`` or ``n <= r``.
    """
    lo = (lambda x: chernoff_lower(x, sec.eps_chernoff)) if finite else (lambda x: x)
    hi = (lambda x: chernoff_upper(x, sec.eps_chernoff)) if finite else (lambda x: x)
    if n_odd <= 0:
        raise InsufficientStatistics("aopp", "n_odd must be positive")
    if n_t <= 0 or n1_lb <= 0:
        raise InsufficientStatistics("aopp", "no untagged bits")
    u = n_g / (2.0 * n_odd)
    frac = n1_lb / n_t
    n = lo(frac * frac * u * n_t / 2.0)
    k = u * n1_lb - 2.0 * n
    if n <= 0:
        raise InsufficientStatistics("aopp", "no untagged pairs after the Chernoff correction")
    if k <= 0:
        raise InsufficientStatistics("aopp", f"k = {k:.4g} not positive")
    r = (2.0 * n + k) / k * math.log(3.0 * k * k / sec.eps_rk)
    if n <= r:
        raise InsufficientStatistics("aopp", f"untagged pairs n = {n:.4g} do not exceed r = {r:.4g}")
    m_bar = hi(2.0 * n * e1ph_ub)
    e_tau = min(m_bar / (2.0 * n - r), 0.5)
    m_s = hi(2.0 * (n - r) * e_tau * (1.0 - e_tau)) + r
    e1ph_prime = min(m_s / n, 0.5)
    diag = {"u": u, "n": n, "k": k, "r": r, "M_bar": m_bar, "e_tau": e_tau, "M_s": m_s,
            "n10_lb": n10_lb, "n01_lb": n01_lb}
    return n, e1ph_prime, diag
