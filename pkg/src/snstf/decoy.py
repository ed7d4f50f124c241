"""Decoy-state bounds on single-photon yields and the phase-flip error rate.

Observed counts are turned into bounds on their expected values with the
multiplicative Chernoff inversion, each term pushed in the direction that
makes the final bound worse (lower yields, higher phase error).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .domain import CountLedger, InsufficientStatistics, ProtocolParams, SecurityParams

# Rows pooled into each decoy source; the mismatched-basis rows (Z vacuum
# against an X decoy) are vacuum-paired sources too.
SOURCE_ROWS: Dict[str, Tuple[str, ...]] = {
    "oo": ("XX00", "ZX00", "XZ00"),
    "ox": ("XX01", "ZX01"),
    "oy": ("XX02", "ZX02"),
    "xo": ("XX10", "XZ10"),
    "yo": ("XX20", "XZ20"),
    "zo": ("ZX30",),
    "oz": ("XZ03",),
}


def chernoff_upper(x: float, eps: float) -> float:
    """x(1 + d) with d solving exp(-d^2 x / (2 + d)) = eps."""
    if x < 0:
        raise ValueError(f"chernoff_upper: negative count {x}")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    beta = -math.log(eps)
    return x + 0.5 * (beta + math.sqrt(beta * beta + 8.0 * beta * x))


def chernoff_lower(x: float, eps: float) -> float:
    """x(1 - d) with d solving exp(-d^2 x / 2) = eps, floored at zero."""
    if x < 0:
        raise ValueError(f"chernoff_lower: negative count {x}")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    beta = -math.log(eps)
    return max(0.0, x - math.sqrt(2.0 * beta * x))


@dataclass
class CountingRates:
    """Pooled (detections, pulses) per decoy source plus the X-window errors."""

    counts: Dict[str, Tuple[float, float]]
    m_x: float = 0.0
    n_x: float = 0.0

    def rate(self, src: str) -> float:
        n, big_n = self.counts[src]
        if big_n <= 0:
            raise InsufficientStatistics("decoy", f"source {src} has no sent pulses")
        return n / big_n

    @property
    def t_x(self) -> float:
        if self.n_x <= 0:
            raise InsufficientStatistics("decoy", "no pulses in the X windows")
        return self.m_x / self.n_x

    def expected_rate(self, src: str, direction: int, eps: float, finite: bool = True) -> float:
        """Chernoff bound on the expected rate; direction +1 upper, -1 lower."""
        n, big_n = self.counts[src]
        if big_n <= 0:
            raise InsufficientStatistics("decoy", f"source {src} has no sent pulses")
        if not finite:
            return n / big_n
        return (chernoff_upper(n, eps) if direction > 0 else chernoff_lower(n, eps)) / big_n

    def expected_t_x(self, eps: float, finite: bool = True) -> float:
        if self.n_x <= 0:
            raise InsufficientStatistics("decoy", "no pulses in the X windows")
        return (chernoff_upper(self.m_x, eps) if finite else self.m_x) / self.n_x


def counting_rates(ledger: CountLedger, params: ProtocolParams) -> CountingRates:
    """Pool ledger rows into decoy sources and read the X11 window tallies.

    When the ledger does not record how many pulse pairs fell into the X
    window, that number is the XX11 pulse count times the accepted phase
    fraction ``2 ds / pi`` (uniform relative phase).
    """
    counts = {}
    for src, rows in SOURCE_ROWS.items():
        counts[src] = (
            float(sum(ledger.detected_of(r) for r in rows)),
            float(sum(ledger.sent_of(r) for r in rows)),
        )
    w = ledger.x11
    n_x = w.n_sent
    if n_x is None:
        n_x = ledger.sent_of("XX11") * 2.0 * math.radians(ledger.ds_half_deg) / math.pi
    return CountingRates(counts, m_x=float(w.errors), n_x=float(n_x))


@dataclass
class DecoyBounds:
    s01_lb: float = 0.0
    s10_lb: float = 0.0
    s1_lb: float = 0.0
    n10_lb: float = 0.0
    n01_lb: float = 0.0
    e1ph_ub: float = 0.0
    flags: List[str] = field(default_factory=list)


def _single_photon_bound(s_x: float, s_y: float, s_o: float, mu1: float, mu2: float) -> float:
    num = mu2 * mu2 * math.exp(mu1) * s_x - mu1 * mu1 * math.exp(mu2) * s_y - (mu2 * mu2 - mu1 * mu1) * s_o
    return num / (mu2 * mu1 * (mu2 - mu1))


def yield_lower_bounds(
    rates: CountingRates,
    params: ProtocolParams,
    sec: Optional[SecurityParams] = None,
    finite: bool = True,
) -> DecoyBounds:
    """Lower bounds on the expected single-photon counting rates s01, s10.

    Negative raw bounds are clamped to zero and flagged.
    """
    eps = (sec or SecurityParams()).eps_chernoff
    mu1, mu2 = params.mu1, params.mu2
    if not 0 < mu1 < mu2:
        raise ValueError("mu1 < mu2 required")
    s_oo = rates.expected_rate("oo", +1, eps, finite)
    out = DecoyBounds()
    raw = {}
    for name, sx, sy in (("s01", "ox", "oy"), ("s10", "xo", "yo")):
        val = _single_photon_bound(
            rates.expected_rate(sx, -1, eps, finite),
            rates.expected_rate(sy, +1, eps, finite),
            s_oo,
            mu1,
            mu2,
        )
        if val < 0:
            out.flags.append(f"{name} lower bound negative before clamping ({val:.3g})")
        raw[name] = min(max(val, 0.0), 1.0)
    out.s01_lb, out.s10_lb = raw["s01"], raw["s10"]
    out.s1_lb = 0.5 * (out.s01_lb + out.s10_lb)
    return out


def z_single_photon_weight(params: ProtocolParams) -> float:
    """Expected number of Z windows with exactly one single-photon sender per unit yield."""
    return params.n_total * params.pz**2 * params.eps_send * (1 - params.eps_send) * params.mu_z * math.exp(-params.mu_z)


def untagged_bit_bounds(bounds: DecoyBounds, params: ProtocolParams) -> Tuple[float, float]:
    """Expected untagged bits 1 and 0: (<n10>, <n01>)."""
    w = z_single_photon_weight(params)
    return w * bounds.s10_lb, w * bounds.s01_lb


def phase_error_upper(
    rates: CountingRates,
    bounds: DecoyBounds,
    params: ProtocolParams,
    sec: Optional[SecurityParams] = None,
    finite: bool = True,
) -> float:
    """Upper bound on the expected phase-flip error rate of untagged bits.

    Raises:
        InsufficientStatistics: when the single-photon yield bound is zero.
    """
    eps = (sec or SecurityParams()).eps_chernoff
    if bounds.s1_lb <= 0:
        raise InsufficientStatistics("decoy", "single-photon yield lower bound is zero; phase error undefined")
    mu1 = params.mu1
    t_x = rates.expected_t_x(eps, finite)
    s_oo = rates.expected_rate("oo", -1, eps, finite)
    damp = math.exp(-2.0 * mu1)
    e = (t_x - damp * s_oo / 2.0) / (2.0 * damp * mu1 * bounds.s1_lb)
    return min(max(e, 0.0), 0.5)


def decoy_analysis(
    ledger: CountLedger,
    params: ProtocolParams,
    sec: Optional[SecurityParams] = None,
    finite: bool = True,
) -> DecoyBounds:
    rates = counting_rates(ledger, params)
    b = yield_lower_bounds(rates, params, sec, finite)
    b.n10_lb, b.n01_lb = untagged_bit_bounds(b, params)
    b.e1ph_ub = phase_error_upper(rates, b, params, sec, finite)
    return b
