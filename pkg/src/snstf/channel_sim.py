"""Monte Carlo and mean-field models of the optical layer.

Detection model: phase-randomised weak coherent pulses from Alice and Bob meet
at Charlie's 50:50 beam splitter. Output-port intensities are

    I+- = (eta_a mu_a + eta_b mu_b +- 2 sqrt(eta_a mu_a eta_b mu_b) cos D) / 2

with D = theta_a - theta_b - psi. A fraction ``misalignment`` of each port is
routed to the other one, and each detector clicks with probability
``1 - (1 - dark) exp(-I)``. Only one-detector events are kept.

Timing: 100 signal pulse pairs per 1 us period (the first 500 ns), then 4
reference pulses at 550/650/750/850 ns. The channel phase psi drifts linearly
inside each microsecond at a Gaussian rate redrawn every microsecond. The
phase estimate for an estimation block of ``ref_block_us`` periods is the
mean of psi over that block's reference pulses plus Gaussian shot noise.

Simulation runs in fixed-size blocks with independent counter-derived random
streams, so results do not depend on the number of worker threads. Each block
starts with a fresh uniformly random channel phase.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from .aopp import RawKeyPair
from .domain import (
    MU1,
    MU2,
    MUZ,
    VAC,
    ChannelModel,
    CountLedger,
    ProtocolParams,
    WindowTally,
    all_cells,
    cell_key,
)

PULSES_PER_US = 100
SIGNAL_SPACING_US = 0.005
REF_TIMES_US = (0.55, 0.65, 0.75, 0.85)
DEFAULT_BLOCK_PAIRS = 1_000_000

_BASES = "ZX"


@dataclass(frozen=True)
class PulseChoice:
    """One sender's choice for a single time window."""

    basis: str
    intensity_index: int
    phase_slice: int = 0
    z_bit: Optional[int] = None

    def __post_init__(self):
        allowed = (VAC, MUZ) if self.basis == "Z" else (VAC, MU1, MU2)
        if self.basis not in ("Z", "X") or self.intensity_index not in allowed:
            raise ValueError(f"intensity {self.intensity_index} not allowed in basis {self.basis!r}")


@dataclass(frozen=True)
class DriftState:
    phase_offset: float
    rng_stream: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phase_offset", float(np.mod(self.phase_offset, 2 * np.pi)))


@dataclass(frozen=True)
class DetectionRecord:
    which_detector: str  # "1", "2", "both" or "none"
    window: Tuple[str, str]
    estimated_psi: float

    @property
    def effective(self) -> bool:
        return self.which_detector in ("1", "2")


def port_click_probs(mu_a, mu_b, delta, channel: ChannelModel):
    """Vectorised per-detector click probabilities (D1 = constructive port)."""
    ia = channel.eta_a * np.asarray(mu_a, dtype=float)
    ib = channel.eta_b * np.asarray(mu_b, dtype=float)
    cross = 2.0 * np.sqrt(ia * ib) * np.cos(delta)
    i_plus = 0.5 * (ia + ib + cross)
    i_minus = 0.5 * (ia + ib - cross)
    m = channel.misalignment
    i1 = (1.0 - m) * i_plus + m * i_minus
    i2 = (1.0 - m) * i_minus + m * i_plus
    keep = 1.0 - channel.dark_rate
    # clip guards against tiny negative intensities from cos rounding
    p1 = -np.expm1(np.log(keep) - np.clip(i1, 0.0, None)) if keep < 1.0 else -np.expm1(-np.clip(i1, 0.0, None))
    p2 = -np.expm1(np.log(keep) - np.clip(i2, 0.0, None)) if keep < 1.0 else -np.expm1(-np.clip(i2, 0.0, None))
    return p1, p2


def click_probabilities(
    choice_a: PulseChoice,
    choice_b: PulseChoice,
    psi: float,
    channel: ChannelModel,
    params: ProtocolParams,
) -> Tuple[float, float]:
    s = params.n_phase_slices
    delta = 2 * np.pi * (choice_a.phase_slice - choice_b.phase_slice) / s - psi
    p1, p2 = port_click_probs(
        params.intensity(choice_a.intensity_index),
        params.intensity(choice_b.intensity_index),
        delta,
        channel,
    )
    return float(p1), float(p2)


def one_detector(p1, p2):
    """Probabilities of (only D1, only D2) clicking."""
    return p1 * (1.0 - p2), p2 * (1.0 - p1)


# --- sender choice distribution -------------------------------------------

def choice_probabilities(params: ProtocolParams) -> dict:
    """P(basis, intensity code) for one sender."""
    pz, e = params.pz, params.eps_send
    return {
        ("Z", VAC): pz * (1 - e),
        ("Z", MUZ): pz * e,
        ("X", VAC): (1 - pz) * params.p0,
        ("X", MU1): (1 - pz) * params.p1,
        ("X", MU2): (1 - pz) * params.p2,
    }


def _draw_choices(rng: np.random.Generator, n: int, params: ProtocolParams):
    is_x = rng.random(n) >= params.pz
    u = rng.random(n)
    z_code = np.where(u < params.eps_send, MUZ, VAC)
    x_code = np.where(u < params.p0, VAC, np.where(u < params.p0 + params.p1, MU1, MU2))
    code = np.where(is_x, x_code, z_code).astype(np.int8)
    slices = rng.integers(0, params.n_phase_slices, n)
    return is_x.astype(np.int8), code, slices


# --- phase drift and estimation --------------------------------------------

def _block_us(channel: ChannelModel) -> int:
    return max(1, int(round(channel.ref_block_us)))


def _drift_and_estimate(rng: np.random.Generator, n: int, channel: ChannelModel):
    """True channel phase per pulse and the estimate in force for each pulse."""
    n_us = -(-n // PULSES_PER_US)
    k_blk = _block_us(channel)
    n_est = -(-n_us // k_blk)
    n_us_pad = n_est * k_blk
    omega = rng.normal(0.0, channel.phase_drift_sigma, n_us_pad) if channel.phase_drift_sigma > 0 else np.zeros(n_us_pad)
    start = rng.uniform(0.0, 2 * np.pi) + np.concatenate(([0.0], np.cumsum(omega)[:-1]))
    idx = np.arange(n)
    k = idx // PULSES_PER_US
    t_in = (idx % PULSES_PER_US) * SIGNAL_SPACING_US
    psi = start[k] + omega[k] * t_in
    ref_mean_per_us = start + omega * np.mean(REF_TIMES_US)
    est = ref_mean_per_us.reshape(n_est, k_blk).mean(axis=1)
    if channel.phase_est_sigma > 0:
        est = est + rng.normal(0.0, channel.phase_est_sigma, n_est)
    psi_est = est[k // k_blk]
    return psi, psi_est


@lru_cache(maxsize=64)
def residual_variances(phase_drift_sigma: float, block_us: int, phase_est_sigma: float) -> np.ndarray:
    """Variance of (true - estimated) phase for each signal slot of a block.

    Exact for the drift model used by :func:`simulate`: the residual is a
    linear combination of the per-microsecond Gaussian rates.
    """
    n_slots = block_us * PULSES_PER_US
    coeff = np.zeros((n_slots, block_us))
    for s in range(n_slots):
        k, j = divmod(s, PULSES_PER_US)
        coeff[s, :k] = 1.0
        coeff[s, k] = j * SIGNAL_SPACING_US
    ref = np.zeros(block_us)
    r_mean = float(np.mean(REF_TIMES_US))
    for k in range(block_us):
        row = np.zeros(block_us)
        row[:k] = 1.0
        row[k] = r_mean
        ref += row
    ref /= block_us
    resid = coeff - ref
    return phase_drift_sigma**2 * np.sum(resid**2, axis=1) + phase_est_sigma**2


# --- Monte Carlo ------------------------------------------------------------

def _block_stream(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block,))))


def _cell_ids(bx_a, c_a, bx_b, c_b):
    return ((bx_a.astype(np.int64) * 2 + bx_b) * 4 + c_a) * 4 + c_b


def _simulate_block(params: ProtocolParams, channel: ChannelModel, n: int, seed: int, block: int, want_keys: bool):
    rng = _block_stream(seed, block)
    bx_a, c_a, sl_a = _draw_choices(rng, n, params)
    bx_b, c_b, sl_b = _draw_choices(rng, n, params)
    psi, psi_est = _drift_and_estimate(rng, n, channel)

    mus = np.array([0.0, params.mu1, params.mu2, params.mu_z])
    theta = 2 * np.pi * (sl_a - sl_b) / params.n_phase_slices
    p1, p2 = port_click_probs(mus[c_a], mus[c_b], theta - psi, channel)
    c1 = rng.random(n) < p1
    c2 = rng.random(n) < p2
    eff = c1 ^ c2
    ch2 = c2  # detector index of an effective event: D2 when c2 set

    cid = _cell_ids(bx_a, c_a, bx_b, c_b)
    sent = np.bincount(cid, minlength=64)
    det1 = np.bincount(cid[eff & ~ch2], minlength=64)
    det2 = np.bincount(cid[eff & ch2], minlength=64)

    led = CountLedger(n_total=n, ds_half_deg=params.ds_half_deg)
    for name in all_cells():
        i = _cell_index(name)
        led.sent[name] = int(sent[i])
        led.detected[name] = int(det1[i] + det2[i])
        led.detected_ch[name] = (int(det1[i]), int(det2[i]))

    cos_est = np.cos(theta - psi_est)
    thr = math.cos(math.radians(params.ds_half_deg))
    xx = (bx_a == 1) & (bx_b == 1)
    for code, attr in ((MU1, "x11"), (MU2, "x22")):
        sel = xx & (c_a == code) & (c_b == code) & (np.abs(cos_est) >= thr)
        expect_d1 = cos_est > 0
        hit1 = sel & eff & ~ch2
        hit2 = sel & eff & ch2
        setattr(
            led,
            attr,
            WindowTally(
                detected=(int(hit1.sum()), int(hit2.sum())),
                correct=(int((hit1 & expect_d1).sum()), int((hit2 & ~expect_d1).sum())),
                n_sent=int(sel.sum()),
            ),
        )

    zz = (bx_a == 0) & (bx_b == 0) & eff
    a_bit = (c_a[zz] == MUZ).astype(np.int8)
    b_bit = (c_b[zz] != MUZ).astype(np.int8)
    n_err = int(np.count_nonzero(a_bit != b_bit))
    led.zz_error = n_err
    led.zz_correct = int(a_bit.size - n_err)
    keys = (a_bit, b_bit) if want_keys else None
    return led, keys


@lru_cache(maxsize=None)
def _cell_index(name: str) -> int:
    bp, ca, cb = name[:2], int(name[2]), int(name[3])
    return ((_BASES.index(bp[0]) * 2 + _BASES.index(bp[1])) * 4 + ca) * 4 + cb


def simulate(
    params: ProtocolParams,
    channel: ChannelModel,
    n_pairs: int,
    seed: int,
    workers: int = 1,
    block_pairs: int = DEFAULT_BLOCK_PAIRS,
    return_raw_keys: bool = False,
):
    """Monte Carlo run of ``n_pairs`` pulse pairs.

    Returns the merged :class:`CountLedger`, or ``(ledger, RawKeyPair)`` when
    ``return_raw_keys`` is set. Deterministic in ``seed`` for any ``workers``.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    quantum = _block_us(channel) * PULSES_PER_US
    block_pairs = max(quantum, -(-block_pairs // quantum) * quantum)
    sizes = [block_pairs] * (n_pairs // block_pairs)
    if n_pairs % block_pairs:
        sizes.append(n_pairs % block_pairs)

    def run(i):
        return _simulate_block(params, channel, sizes[i], seed, i, return_raw_keys)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(i) for i in range(len(sizes))]

    ledger = parts[0][0]
    for led, _ in parts[1:]:
        ledger = ledger + led
    if not return_raw_keys:
        return ledger
    a = np.concatenate([k[0] for _, k in parts])
    b = np.concatenate([k[1] for _, k in parts])
    return ledger, RawKeyPair(a, b)


# --- mean-field companion ---------------------------------------------------

_UNIFORM_NODES = 128


def _one_det_uniform(mu_a: float, mu_b: float, channel: ChannelModel) -> Tuple[float, float]:
    """(D1-only, D2-only) probabilities averaged over a uniform phase."""
    d = 2 * np.pi * np.arange(_UNIFORM_NODES) / _UNIFORM_NODES
    p1, p2 = port_click_probs(mu_a, mu_b, d, channel)
    o1, o2 = one_detector(p1, p2)
    return float(np.mean(o1)), float(np.mean(o2))


def window_one_det(mu: float, channel: ChannelModel, ds_half_deg: float, n_leg: int = 24, n_herm: int = 16):
    """Mean (correct, wrong) one-detector probabilities inside the + window.

    The accepted offset is uniform on [-ds, ds]; the residual phase error is
    the zero-mean Gaussian mixture of :func:`residual_variances` (one
    component per signal slot of an estimation block).
    """
    ds = math.radians(ds_half_deg)
    xa, wa = np.polynomial.legendre.leggauss(n_leg)
    sd = np.sqrt(residual_variances(channel.phase_drift_sigma, _block_us(channel), channel.phase_est_sigma))
    if not np.any(sd):
        g, wg, sd = np.zeros(1), np.ones(1), np.zeros(1)
    else:
        g, wg = np.polynomial.hermite_e.hermegauss(n_herm)
        wg = wg / np.sqrt(2 * np.pi)
    delta = ds * xa[:, None, None] + sd[None, :, None] * g[None, None, :]
    p1, p2 = port_click_probs(mu, mu, delta, channel)
    o1, o2 = one_detector(p1, p2)
    w = (wa / 2.0)[:, None, None] * wg[None, None, :] / sd.size
    return float(np.sum(w * o1)), float(np.sum(w * o2))


def expected_ledger(params: ProtocolParams, channel: ChannelModel, n_pairs: Optional[float] = None) -> CountLedger:
    """Real-valued expected counts for ``n_pairs`` (default ``params.n_total``).

    Assumes the estimated channel phase is uniform modulo the phase-slice
    spacing, which holds for any drifting channel over long runs.
    """
    n = float(params.n_total if n_pairs is None else n_pairs)
    probs = choice_probabilities(params)
    led = CountLedger(n_total=n, ds_half_deg=params.ds_half_deg)
    for name in all_cells():
        bp, ca, cb = name[:2], int(name[2]), int(name[3])
        p = probs[(bp[0], ca)] * probs[(bp[1], cb)]
        o1, o2 = _one_det_uniform(params.intensity(ca), params.intensity(cb), channel)
        led.sent[name] = n * p
        led.detected[name] = n * p * (o1 + o2)
        led.detected_ch[name] = (n * p * o1, n * p * o2)

    frac = 2.0 * math.radians(params.ds_half_deg) / math.pi
    for code, attr in ((MU1, "x11"), (MU2, "x22")):
        n_win = led.sent[cell_key("XX", code, code)] * frac
        good, bad = window_one_det(params.intensity(code), channel, params.ds_half_deg)
        # the pi-window mirrors the 0-window with detectors swapped
        half = n_win / 2.0
        setattr(
            led,
            attr,
            WindowTally(
                detected=(half * (good + bad), half * (good + bad)),
                correct=(half * good, half * good),
                n_sent=n_win,
            ),
        )
    led.zz_error = led.detected["ZZ00"] + led.detected["ZZ33"]
    led.zz_correct = led.detected["ZZ03"] + led.detected["ZZ30"]
    return led
