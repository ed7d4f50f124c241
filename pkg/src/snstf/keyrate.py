"""Final key rate, PLOB references, the full analysis pipeline and sweeps."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .aopp import RawKeyPair, ZComposition, aopp_expected, aopp_finite_key, aopp_pair
from .channel_sim import expected_ledger, simulate
from .decoy import chernoff_lower, counting_rates, decoy_analysis
from .domain import (
    ChannelModel,
    CountLedger,
    InsufficientStatistics,
    KeyRateReport,
    ProtocolParams,
    SecurityParams,
    ValidationError,
    WindowTally,
    binary_entropy,
)

# Chernoff maps applied in one finite-key analysis: five in the yield bounds,
# two in the phase-error bound, one for n1 and three in the AOPP chain.
CHERNOFF_INVOCATIONS = 11


def key_rate(
    n1_prime: float,
    e1ph_prime: float,
    nt_prime: float,
    ez_prime: float,
    n_total: float,
    sec: SecurityParams,
) -> float:
    """Secret bits per pulse pair, clamped at zero."""
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    return max(0.0, key_length(n1_prime, e1ph_prime, nt_prime, ez_prime, sec) / n_total)


def key_length(n1_prime: float, e1ph_prime: float, nt_prime: float, ez_prime: float, sec: SecurityParams) -> float:
    """Unclamped extractable key length (may be negative)."""
    return (
        n1_prime * (1.0 - binary_entropy(e1ph_prime))
        - sec.f * nt_prime * binary_entropy(ez_prime)
        - 2.0 * math.log2(2.0 / sec.eps_cor)
        - 2.0 * math.log2(1.0 / (math.sqrt(2.0) * sec.eps_pa * sec.eps_hat))
    )


def plob_bound(eta: float, mode: str = "absolute", detector_eta: Optional[float] = None) -> float:
    """Repeaterless capacity ``-log2(1 - eta)``.

    ``absolute`` uses ``eta`` as given (channel only); ``relative`` multiplies
    in ``detector_eta`` first. ``eta == 1`` returns ``inf``.
    """
    if mode not in ("absolute", "relative"):
        raise ValueError(f"unknown PLOB mode {mode!r}")
    if mode == "relative" and detector_eta is not None:
        eta = eta * detector_eta
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"transmittance {eta} outside (0, 1]")
    if eta == 1.0:
        return math.inf
    return -math.log1p(-eta) / math.log(2.0)


def plob_pair(channel: ChannelModel) -> Tuple[float, float]:
    """(absolute, relative) PLOB of a channel, per pulse pair."""
    fiber = channel.fiber_eta_a * channel.fiber_eta_b
    dev = channel.device_eff_a * channel.device_eff_b
    return plob_bound(fiber), plob_bound(fiber, "relative", dev)


# --- Z-window composition ---------------------------------------------------

def z_composition(ledger: CountLedger, params: ProtocolParams) -> Tuple[ZComposition, bool]:
    """Split Z-window effective events by Bob's bit.

    Exact when the ledger carries the four ZZ sub-cells. Otherwise estimated:
    correct events are split between Alice-only and Bob-only in the ratio of
    the single-sender rows ZX30 and XZ03, and the "nobody sent" errors are
    the expected vacuum rate times the not-sending windows.

    Returns:
        ``(composition, estimated)``.
    """
    d = ledger.detected
    if all(k in d for k in ("ZZ00", "ZZ03", "ZZ30", "ZZ33")):
        return ZComposition(d["ZZ30"], d["ZZ00"], d["ZZ03"], d["ZZ33"]), False
    rates = counting_rates(ledger, params)
    s_zo, s_oz = rates.rate("zo"), rates.rate("oz")
    if s_zo + s_oz <= 0:
        raise InsufficientStatistics("aopp", "no single-sender Z detections to split the raw key")
    a_only = ledger.zz_correct * s_zo / (s_zo + s_oz)
    neither = ledger.sent_of("ZZ") * (1.0 - params.eps_send) ** 2 * rates.rate("oo")
    neither = min(neither, ledger.zz_error)
    comp = ZComposition(a_only, neither, ledger.zz_correct - a_only, ledger.zz_error - neither)
    return comp, True


# --- full pipeline ----------------------------------------------------------

def analyze(
    ledger: CountLedger,
    params: ProtocolParams,
    sec: Optional[SecurityParams] = None,
    *,
    channel: Optional[ChannelModel] = None,
    finite: bool = True,
    aopp_observed: Optional[Dict[str, float]] = None,
) -> KeyRateReport:
    """Decoy bounds, AOPP chain and key rate for one ledger.

    AOPP observables come, in order of preference, from ``aopp_observed``
    (an actual pairing run), from survivor tallies recorded in the ledger,
    or from their expectation given the Z-window composition. ``n_g`` and
    ``n_odd`` are estimated from the composition unless observed.

    Insufficient statistics at any stage give a report with ``rate = 0`` and
    ``diagnostics["failed_stage"]`` set.

    Raises:
        ValidationError: if the ledger violates a count invariant.
    """
    sec = sec or SecurityParams()
    ledger.check()
    if ledger.n_total:
        params = replace(params, n_total=float(ledger.n_total))
    params = replace(params, ds_half_deg=ledger.ds_half_deg)
    rep = KeyRateReport()
    if channel is not None:
        rep.plob_abs, rep.plob_rel = plob_pair(channel)
    rep.diagnostics["chernoff_invocations"] = CHERNOFF_INVOCATIONS if finite else 0
    rep.diagnostics["chernoff_eps_total"] = CHERNOFF_INVOCATIONS * sec.eps_chernoff if finite else 0.0
    rep.diagnostics["qber_z"] = ledger.qber_z
    rep.diagnostics["qber_x11"] = ledger.x11.qber
    try:
        b = decoy_analysis(ledger, params, sec, finite)
        rep.flags += b.flags
        rep.s01_lb, rep.s10_lb, rep.s1_lb = b.s01_lb, b.s10_lb, b.s1_lb
        rep.n10_lb, rep.n01_lb, rep.e1ph_ub = b.n10_lb, b.n01_lb, b.e1ph_ub
        n1_exp = b.n10_lb + b.n01_lb
        rep.n1_lb = chernoff_lower(n1_exp, sec.eps_chernoff) if finite else n1_exp

        if ledger.n_t <= 0:
            raise InsufficientStatistics("aopp", "no Z-window effective events")
        comp, estimated = z_composition(ledger, params)
        expct = aopp_expected(comp)
        rep.diagnostics["bob_one_fraction"] = expct["q"]
        rep.diagnostics["composition_estimated"] = estimated
        obs = dict(aopp_observed or {})
        if ledger.survived_bits is not None and "nt_prime" not in obs:
            obs["nt_prime"] = ledger.survived_bits
            if ledger.qber_z_after is not None:
                obs["ez_prime"] = ledger.qber_z_after
        n_g = obs.get("n_g", expct["n_g"])
        n_odd = obs.get("n_odd", expct["n_odd"])
        rep.nt_prime = obs.get("nt_prime", expct["nt_prime"])
        rep.ez_prime = obs.get("ez_prime", expct["ez_prime"])
        rep.diagnostics["n_g"] = n_g
        rep.diagnostics["n_odd"] = n_odd
        rep.diagnostics["n_odd_estimated"] = "n_odd" not in obs

        n1p, e1p, diag = aopp_finite_key(
            rep.n1_lb, b.n10_lb, b.n01_lb, b.e1ph_ub, ledger.n_t, n_g, n_odd, sec, finite
        )
        rep.diagnostics.update(diag)
        rep.n1_prime, rep.e1ph_prime = n1p, e1p
        rep.rate = key_rate(n1p, e1p, rep.nt_prime, rep.ez_prime, params.n_total, sec)
    except InsufficientStatistics as exc:
        rep.rate = 0.0
        rep.diagnostics["failed_stage"] = exc.stage
        rep.flags.append(str(exc))
    return rep


def window_ledger(ledger: CountLedger, ds_half_deg: float, detected: float, qber: float) -> CountLedger:
    """Copy of ``ledger`` with the X11 window replaced by an aggregate tally.

    Used for per-window tables that publish only total detections and a QBER;
    the channel split is then unknown and everything is booked on channel 1.
    """
    errors = round(detected * qber)
    out = replace(ledger, ds_half_deg=ds_half_deg)
    out.x11 = WindowTally(detected=(detected, 0), correct=(detected - errors, 0), n_sent=None)
    return out


def window_sweep(
    ledger: CountLedger,
    windows: Sequence[Tuple[float, float, float]],
    params: ProtocolParams,
    sec: Optional[SecurityParams] = None,
) -> Tuple[float, List[Tuple[float, float]]]:
    """Rate for each ``(ds_half_deg, x11_detections, x11_qber)`` row.

    Returns the best half-window and the ``(ds, rate)`` list.
    """
    out = []
    for ds, det, q in windows:
        rep = analyze(window_ledger(ledger, ds, det, q), params, sec)
        out.append((ds, rep.rate))
    best = max(out, key=lambda t: t[1])[0]
    return best, out


# --- curves -----------------------------------------------------------------

@dataclass
class RateCurvePoint:
    total_loss_db: float
    rate_per_pulse: float
    plob_abs: float
    plob_rel: float
    params_used: ProtocolParams
    qber_z: float = float("nan")
    qber_x11: float = float("nan")
    error: Optional[str] = None


def expected_rate(
    params: ProtocolParams,
    channel: ChannelModel,
    sec: Optional[SecurityParams] = None,
    finite: bool = True,
) -> KeyRateReport:
    """Pipeline on the mean-field ledger of ``params`` over ``channel``."""
    return analyze(expected_ledger(params, channel), params, sec, channel=channel, finite=finite)


def monte_carlo_rate(
    params: ProtocolParams,
    channel: ChannelModel,
    n_pairs: int,
    seed: int,
    sec: Optional[SecurityParams] = None,
    workers: int = 1,
) -> KeyRateReport:
    """Pipeline on a simulated ledger, with AOPP run on the simulated raw keys."""
    led, raw = simulate(params, channel, n_pairs, seed, workers=workers, return_raw_keys=True)
    return analyze_simulated(led, raw, params, seed, sec, channel)


def analyze_simulated(
    led: CountLedger,
    raw: RawKeyPair,
    params: ProtocolParams,
    seed: int,
    sec: Optional[SecurityParams] = None,
    channel: Optional[ChannelModel] = None,
) -> KeyRateReport:
    obs = None
    try:
        out = aopp_pair(raw, seed)
        obs = {"n_g": out.n_g, "n_odd": out.n_odd, "nt_prime": out.nt_prime,
               "ez_prime": out.survived_error_rate if out.nt_prime else 0.0}
    except InsufficientStatistics:
        pass
    p = replace(params, n_total=float(led.n_total))
    return analyze(led, p, sec, channel=channel, aopp_observed=obs)


def simulate_rate_curve(
    params_template: ProtocolParams,
    channel_template: ChannelModel,
    loss_grid_db: Sequence[float],
    sec: Optional[SecurityParams] = None,
    mode: str = "expected",
    n_pairs: Optional[int] = None,
    seed: int = 0,
    workers: int = 1,
) -> List[RateCurvePoint]:
    """Key rate against total fiber loss.

    Each point rescales the template channel's fiber loss to the grid value.
    Failures at a point are recorded in ``RateCurvePoint.error``.
    """
    if not len(loss_grid_db):
        raise ValueError("loss grid is empty")
    if mode not in ("expected", "monte_carlo"):
        raise ValueError(f"unknown mode {mode!r}")

    def point(i_loss):
        i, loss = i_loss
        ch = channel_template.with_total_loss(loss)
        pa, pr = plob_pair(ch)
        try:
            if mode == "expected":
                rep = expected_rate(params_template, ch, sec)
            else:
                n = int(n_pairs or params_template.n_total)
                rep = monte_carlo_rate(params_template, ch, n, seed + i, sec)
            err = rep.diagnostics.get("failed_stage")
            return RateCurvePoint(loss, rep.rate, pa, pr, params_template,
                                  rep.diagnostics.get("qber_z", float("nan")),
                                  rep.diagnostics.get("qber_x11", float("nan")),
                                  None if err is None else f"insufficient statistics at {err}")
        except (ValueError, ValidationError) as exc:
            return RateCurvePoint(loss, 0.0, pa, pr, params_template, error=str(exc))

    items = list(enumerate(loss_grid_db))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(point, items))
    return [point(it) for it in items]


# --- optimizer ----------------------------------------------------------------

OPT_FIELDS = ("mu1", "mu2", "mu_z", "p1", "p2", "pz", "eps_send", "ds_half_deg")
OPT_STEPS = {"mu1": 0.02, "mu2": 0.05, "mu_z": 0.05, "p1": 0.05, "p2": 0.02,
             "pz": 0.05, "eps_send": 0.03, "ds_half_deg": 2.0}


def optimize_params(
    channel: Optional[ChannelModel],
    n_total: float,
    sec: Optional[SecurityParams],
    init: ProtocolParams,
    *,
    fields: Sequence[str] = OPT_FIELDS,
    steps: Optional[Dict[str, float]] = None,
    objective: Optional[Callable[[ProtocolParams], float]] = None,
    max_evals: int = 400,
    min_step_frac: float = 1e-3,
) -> ProtocolParams:
    """Coordinate descent with shrinking steps, maximizing the key rate.

    The default objective is the expected-mode rate over ``channel`` at
    ``n_total`` pulses. Candidate points that break a parameter invariant are
    skipped. Returns ``init`` (with ``n_total`` applied) when nothing beats it.
    """
    sec = sec or SecurityParams()
    init = replace(init, n_total=float(n_total))
    if init.violations():
        raise ValidationError(init.violations())
    if objective is None:
        if channel is None:
            raise ValueError("channel required for the default objective")

        def objective(p: ProtocolParams) -> float:
            return expected_rate(p, channel, sec).rate

    step = dict(OPT_STEPS)
    step.update(steps or {})
    step = {k: step[k] for k in fields}
    floor = {k: v * min_step_frac for k, v in step.items()}
    best, best_val = init, objective(init)
    evals = 1
    while evals < max_evals and any(step[k] > floor[k] for k in fields):
        improved = False
        for k in fields:
            for sign in (1.0, -1.0):
                cand = replace(best, **{k: getattr(best, k) + sign * step[k]})
                if cand.violations():
                    continue
                val = objective(cand)
                evals += 1
                if val > best_val:
                    best, best_val, improved = cand, val, True
                    break
                if evals >= max_evals:
                    break
        if not improved:
            step = {k: v / 2.0 for k, v in step.items()}
    return best
