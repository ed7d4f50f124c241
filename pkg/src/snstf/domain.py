"""Shared vocabulary for the SNS twin-field QKD toolkit.

All dataclasses here are frozen; build a modified copy with
:func:`dataclasses.replace` instead of mutating.

Units: intensities are mean photon numbers per pulse, transmittances are
linear (use :func:`db_to_linear` at the config boundary), phases are radians
except ``ds_half_deg``, time is microseconds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np

# Intensity codes used in ledger keys ("Sent-XX12" etc.).
VAC, MU1, MU2, MUZ = 0, 1, 2, 3
BASIS_PAIRS = ("ZZ", "ZX", "XZ", "XX")
Z_CODES = (VAC, MUZ)
X_CODES = (VAC, MU1, MU2)


class ValidationError(ValueError):
    """Raised when one or more invariants are violated.

    ``violations`` holds one human-readable message per broken invariant.
    """

    def __init__(self, violations: Iterable[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InsufficientStatistics(RuntimeError):
    """An analysis precondition failed (the key rate is then zero)."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


def db_to_linear(loss_db: float) -> float:
    return 10.0 ** (-loss_db / 10.0)


def linear_to_db(eta: float) -> float:
    return -10.0 * math.log10(eta)


def binary_entropy(x: float) -> float:
    """Shannon binary entropy in bits, with h(0) = h(1) = 0."""
    x = float(x)
    if not 0.0 <= x <= 1.0 or math.isnan(x):
        raise ValueError(f"binary_entropy: argument {x!r} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def lambda_from_ds(ds_half_deg: float) -> float:
    """Post-selection threshold ``lambda`` for a half-window in degrees.

    ``1 - |cos(delta)| <= lambda`` accepts ``delta`` within ``ds_half_deg``
    of 0 or pi.
    """
    return 1.0 - math.cos(math.radians(ds_half_deg))


def ds_from_lambda(lam: float) -> float:
    return math.degrees(math.acos(1.0 - lam))


@dataclass(frozen=True)
class ProtocolParams:
    """Everything Alice and Bob choose before the run."""

    mu1: float = 0.100
    mu2: float = 0.298
    mu_z: float = 0.422
    p1: float = 0.846
    p2: float = 0.076
    pz: float = 0.735
    eps_send: float = 0.269
    n_phase_slices: int = 16
    ds_half_deg: float = 10.0
    n_total: float = 1.679e12

    @property
    def p0(self) -> float:
        return 1.0 - self.p1 - self.p2

    @property
    def lam(self) -> float:
        return lambda_from_ds(self.ds_half_deg)

    def intensity(self, code: int) -> float:
        return {VAC: 0.0, MU1: self.mu1, MU2: self.mu2, MUZ: self.mu_z}[code]

    def violations(self) -> List[str]:
        v = []
        if not (0.0 < self.mu1 < self.mu2):
            v.append("mu1 < mu2 required (and mu1 > 0)")
        if self.mu_z <= 0.0:
            v.append("mu_z must be positive")
        if self.p1 < 0.0 or self.p2 < 0.0:
            v.append("p1, p2 must be non-negative")
        if self.p1 + self.p2 > 1.0 + 1e-12:
            v.append("probability overflow: p1 + p2 > 1")
        if not 0.0 <= self.pz <= 1.0:
            v.append("pz outside [0, 1]")
        if not 0.0 <= self.eps_send <= 1.0:
            v.append("eps_send outside [0, 1]")
        if self.n_phase_slices < 2 or self.n_phase_slices % 2:
            v.append("n_phase_slices must be even and >= 2")
        if not 0.0 < self.ds_half_deg <= 90.0:
            v.append("ds_half_deg outside (0, 90]")
        if not self.n_total > 0:
            v.append("n_total must be positive")
        return v


@dataclass(frozen=True)
class ChannelModel:
    """Lossy, phase-drifting channel from both senders to Charlie.

    ``eta_a``/``eta_b`` are end-to-end arm efficiencies (fiber, optics and
    detector). ``device_eff_a``/``device_eff_b`` is the non-fiber part of each,
    needed only to split off the fiber transmittance for PLOB references.
    ``ref_counts`` is the mean number of detected reference photons per phase
    estimation block; the estimate's noise std is ``1/sqrt(ref_counts)``.
    """

    eta_a: float
    eta_b: float
    dark_rate: float = 7e-9
    phase_drift_sigma: float = 0.03
    ref_block_us: float = 10.0
    misalignment: float = 0.0
    ref_counts: float = math.inf
    device_eff_a: float = 1.0
    device_eff_b: float = 1.0

    @classmethod
    def from_loss_db(
        cls,
        loss_a_db: float,
        loss_b_db: float,
        device_eff_a: float = 1.0,
        device_eff_b: float = 1.0,
        **kwargs: Any,
    ) -> "ChannelModel":
        return cls(
            eta_a=db_to_linear(loss_a_db) * device_eff_a,
            eta_b=db_to_linear(loss_b_db) * device_eff_b,
            device_eff_a=device_eff_a,
            device_eff_b=device_eff_b,
            **kwargs,
        )

    @property
    def fiber_eta_a(self) -> float:
        return self.eta_a / self.device_eff_a

    @property
    def fiber_eta_b(self) -> float:
        return self.eta_b / self.device_eff_b

    @property
    def fiber_loss_db(self) -> float:
        """Total Alice-to-Bob fiber loss through Charlie."""
        return linear_to_db(self.fiber_eta_a * self.fiber_eta_b)

    @property
    def phase_est_sigma(self) -> float:
        return 0.0 if math.isinf(self.ref_counts) else 1.0 / math.sqrt(self.ref_counts)

    def with_total_loss(self, total_loss_db: float) -> "ChannelModel":
        """Same devices, fiber loss rescaled to ``total_loss_db``.

        The Alice/Bob loss difference of this channel is preserved.
        """
        la = linear_to_db(self.fiber_eta_a)
        lb = linear_to_db(self.fiber_eta_b)
        shift = (total_loss_db - (la + lb)) / 2.0
        return ChannelModel(
            eta_a=db_to_linear(la + shift) * self.device_eff_a,
            eta_b=db_to_linear(lb + shift) * self.device_eff_b,
            dark_rate=self.dark_rate,
            phase_drift_sigma=self.phase_drift_sigma,
            ref_block_us=self.ref_block_us,
            misalignment=self.misalignment,
            ref_counts=self.ref_counts,
            device_eff_a=self.device_eff_a,
            device_eff_b=self.device_eff_b,
        )

    def violations(self) -> List[str]:
        v = []
        for name in ("eta_a", "eta_b"):
            val = getattr(self, name)
            if not 0.0 < val <= 1.0:
                v.append(f"{name} outside (0, 1]")
        for name in ("device_eff_a", "device_eff_b"):
            val = getattr(self, name)
            if not 0.0 < val <= 1.0:
                v.append(f"{name} outside (0, 1]")
        if not 0.0 <= self.dark_rate < 1.0:
            v.append("dark_rate outside [0, 1)")
        if self.phase_drift_sigma < 0.0:
            v.append("phase_drift_sigma must be >= 0")
        if self.ref_block_us <= 0.0:
            v.append("ref_block_us must be positive")
        if not 0.0 <= self.misalignment <= 0.5:
            v.append("misalignment outside [0, 0.5]")
        if not self.ref_counts > 0:
            v.append("ref_counts must be positive")
        return v


@dataclass(frozen=True)
class SecurityParams:
    f: float = 1.1
    eps_cor: float = 1e-10
    eps_pa: float = 1e-10
    eps_hat: float = 1e-10
    eps_rk: float = 1e-9
    eps_chernoff: float = 1e-10

    def violations(self) -> List[str]:
        v = []
        for name in ("eps_cor", "eps_pa", "eps_hat", "eps_rk", "eps_chernoff"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                v.append(f"{name} outside (0, 1)")
        if self.f < 1.0:
            v.append("f must be >= 1")
        return v


def validate(
    params: ProtocolParams,
    channel: Optional[ChannelModel] = None,
    sec: Optional[SecurityParams] = None,
) -> Tuple[ProtocolParams, Optional[ChannelModel], Optional[SecurityParams]]:
    """Check every invariant and return the configuration unchanged.

    Raises:
        ValidationError: naming each violated invariant.
    """
    v = list(params.violations())
    if channel is not None:
        v += channel.violations()
    if sec is not None:
        v += sec.violations()
    if v:
        raise ValidationError(v)
    return params, channel, sec


def cell_key(basis_pair: str, code_a: int, code_b: int) -> str:
    return f"{basis_pair}{code_a}{code_b}"


def all_cells() -> List[str]:
    """Every (basis pair, intensity pair) cell the protocol can produce."""
    out = []
    for bp in BASIS_PAIRS:
        ca = Z_CODES if bp[0] == "Z" else X_CODES
        cb = Z_CODES if bp[1] == "Z" else X_CODES
        out += [cell_key(bp, a, b) for a in ca for b in cb]
    return out


@dataclass
class WindowTally:
    """Phase-post-selected tallies for one decoy pair (X11 or X22).

    ``n_sent`` is the number of pulse pairs whose phases passed the window;
    ``None`` when unknown (replayed ledgers), in which case it is estimated
    from the window width.
    """

    detected: Tuple[float, float] = (0, 0)
    correct: Tuple[float, float] = (0, 0)
    n_sent: Optional[float] = None

    @property
    def total(self) -> float:
        return self.detected[0] + self.detected[1]

    @property
    def errors(self) -> float:
        return self.total - self.correct[0] - self.correct[1]

    @property
    def qber(self) -> float:
        return self.errors / self.total if self.total else float("nan")

    def __add__(self, other: "WindowTally") -> "WindowTally":
        ns = None if self.n_sent is None or other.n_sent is None else self.n_sent + other.n_sent
        return WindowTally(
            detected=(self.detected[0] + other.detected[0], self.detected[1] + other.detected[1]),
            correct=(self.correct[0] + other.correct[0], self.correct[1] + other.correct[1]),
            n_sent=ns,
        )


@dataclass
class CountLedger:
    """Sent/detected tallies keyed like the published table ("ZX01").

    ``sent`` and ``detected`` may hold the aggregate key ``"ZZ"`` instead of
    the four Z-window sub-cells when those were not recorded.
    ``detected_ch`` optionally splits one-detector counts by detector.
    Values are ints for tallies and floats for expectations.
    """

    sent: Dict[str, float] = field(default_factory=dict)
    detected: Dict[str, float] = field(default_factory=dict)
    detected_ch: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    x11: WindowTally = field(default_factory=WindowTally)
    x22: WindowTally = field(default_factory=WindowTally)
    zz_error: float = 0
    zz_correct: float = 0
    n_total: float = 0
    ds_half_deg: float = 10.0
    survived_bits: Optional[float] = None
    qber_z_after: Optional[float] = None

    def sent_of(self, key: str) -> float:
        if key == "ZZ" and "ZZ" not in self.sent:
            return sum(v for k, v in self.sent.items() if k.startswith("ZZ"))
        return self.sent.get(key, 0)

    def detected_of(self, key: str) -> float:
        if key == "ZZ" and "ZZ" not in self.detected:
            return sum(v for k, v in self.detected.items() if k.startswith("ZZ"))
        return self.detected.get(key, 0)

    @property
    def n_t(self) -> float:
        return self.zz_error + self.zz_correct

    @property
    def qber_z(self) -> float:
        return self.zz_error / self.n_t if self.n_t else float("nan")

    def violations(self) -> List[str]:
        v = []
        for k, d in self.detected.items():
            s = self.sent.get(k)
            if s is None:
                if d:
                    v.append(f"Detected-{k} has no matching Sent-{k}")
                continue
            if d > s:
                v.append(f"Detected-{k} ({d}) exceeds Sent-{k} ({s})")
            if d < 0 or s < 0:
                v.append(f"negative tally in cell {k}")
        for name, w in (("XX11", self.x11), ("XX22", self.x22)):
            for ch in (0, 1):
                if w.correct[ch] > w.detected[ch]:
                    v.append(f"Correct-{name}-Ds-Ch{ch + 1} exceeds Detected-{name}-Ds-Ch{ch + 1}")
            if w.n_sent is not None and w.total > w.n_sent:
                v.append(f"{name} window detections exceed window pulses")
        zz_det = self.detected_of("ZZ")
        if zz_det and abs(zz_det - self.n_t) > 1e-6 * max(1.0, zz_det):
            v.append("zz_error + zz_correct must equal the Z-window detections")
        return v

    def check(self) -> "CountLedger":
        v = self.violations()
        if v:
            raise ValidationError(v)
        return self

    def __add__(self, other: "CountLedger") -> "CountLedger":
        def merge(a: Dict[str, float], b: Dict[str, float]) -> Dict[str, float]:
            out = dict(a)
            for k, val in b.items():
                out[k] = out.get(k, 0) + val
            return out

        ch = dict(self.detected_ch)
        for k, (c1, c2) in other.detected_ch.items():
            o1, o2 = ch.get(k, (0, 0))
            ch[k] = (o1 + c1, o2 + c2)
        if self.ds_half_deg != other.ds_half_deg:
            raise ValueError("cannot merge ledgers with different post-selection windows")
        return CountLedger(
            sent=merge(self.sent, other.sent),
            detected=merge(self.detected, other.detected),
            detected_ch=ch,
            x11=self.x11 + other.x11,
            x22=self.x22 + other.x22,
            zz_error=self.zz_error + other.zz_error,
            zz_correct=self.zz_correct + other.zz_correct,
            n_total=self.n_total + other.n_total,
            ds_half_deg=self.ds_half_deg,
        )


@dataclass
class KeyRateReport:
    s01_lb: float = 0.0
    s10_lb: float = 0.0
    s1_lb: float = 0.0
    n10_lb: float = 0.0
    n01_lb: float = 0.0
    n1_lb: float = 0.0
    e1ph_ub: float = 0.0
    n1_prime: float = 0.0
    e1ph_prime: float = 0.0
    nt_prime: float = 0.0
    ez_prime: float = 0.0
    rate: float = 0.0
    plob_abs: float = float("nan")
    plob_rel: float = float("nan")
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    flags: List[str] = field(default_factory=list)

    def as_dict(self) -> Dict[str, Any]:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("diagnostics", "flags")}
        out["diagnostics"] = {k: _plain(v) for k, v in self.diagnostics.items()}
        out["flags"] = list(self.flags)
        return {k: _plain(v) for k, v in out.items()}


def _plain(v: Any) -> Any:
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


# Published operating point of the 511 km field run.
PAPER_PARAMS = ProtocolParams()
PAPER_SECURITY = SecurityParams()


def paper_channel(misalignment: float = 0.045, ref_counts: float = 1000.0) -> ChannelModel:
    """Channel built from the published loss and component efficiency tables.

    Device efficiency per arm = PC * DWDM * CIR * PBS * sum over outputs of
    (BS split * SNSPD efficiency). ``misalignment`` defaults to the value
    that reproduces the published X11 error rate at a 10 degree half-window.
    """
    dev_a = 0.991 * 0.931 * 0.889 * 0.825 * (0.453 * 0.770 + 0.444 * 0.910)
    dev_b = 0.991 * 0.920 * 0.869 * 0.775 * (0.437 * 0.770 + 0.440 * 0.910)
    return ChannelModel.from_loss_db(
        44.5,
        44.6,
        device_eff_a=dev_a,
        device_eff_b=dev_b,
        dark_rate=7e-9,
        phase_drift_sigma=0.03,
        ref_block_us=10.0,
        misalignment=misalignment,
        ref_counts=ref_counts,
    )
