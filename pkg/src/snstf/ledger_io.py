"""Plain-text ledger and configuration files.

Format: ``[section]`` headers, ``Key = value`` lines, ``#`` comments and blank
lines. Ledger keys follow the published naming (``Sent-ZX01``,
``Detected-XX11-Ds-Ch1``, ``Correct-XX11-Ds-Ch2``, ``Detected-ZZError``).
Files parse to an ordered section -> key -> raw-string map, so
parse -> serialize -> parse is the identity.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from typing import Dict, List, Optional, Tuple

from .domain import (
    ChannelModel,
    CountLedger,
    ProtocolParams,
    SecurityParams,
    WindowTally,
    all_cells,
    linear_to_db,
)


class LedgerParseError(ValueError):
    def __init__(self, line: int, column: int, message: str, source: str = "<text>"):
        self.line, self.column, self.source = line, column, source
        super().__init__(f"{source}:{line}:{column}: {message}")


@dataclass
class KeyValueFile:
    sections: Dict[str, Dict[str, str]] = field(default_factory=dict)
    positions: Dict[Tuple[str, str], Tuple[int, int]] = field(default_factory=dict, compare=False, repr=False)
    source: str = field(default="<text>", compare=False, repr=False)

    def get(self, section: str, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.sections.get(section, {}).get(key, default)

    def number(self, section: str, key: str, default=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return _to_number(raw)
        except ValueError:
            line, col = self.positions.get((section, key), (0, 0))
            raise LedgerParseError(line, col, f"{key}: not a number: {raw!r}", self.source) from None


def _to_number(raw: str):
    s = raw.strip()
    if s.endswith("%"):
        return float(s[:-1]) / 100.0
    try:
        return int(s)
    except ValueError:
        return float(s)


def parse_text(text: str, source: str = "<text>") -> KeyValueFile:
    out = KeyValueFile(source=source)
    section = ""
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        col = len(line) - len(line.lstrip()) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]") or len(stripped) < 3:
                raise LedgerParseError(ln, col, "malformed section header", source)
            section = stripped[1:-1].strip()
            out.sections.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise LedgerParseError(ln, col, "expected 'Key = value'", source)
        key, _, val = stripped.partition("=")
        key, val = key.strip(), val.strip()
        if not key:
            raise LedgerParseError(ln, col, "empty key", source)
        if not val:
            raise LedgerParseError(ln, line.index("=") + 2, f"{key}: missing value", source)
        sec = out.sections.setdefault(section, {})
        if key in sec:
            raise LedgerParseError(ln, col, f"duplicate key {key!r} in [{section}]", source)
        sec[key] = val
        out.positions[(section, key)] = (ln, line.index(val, line.index("=")) + 1)
    return out


def serialize(kv: KeyValueFile, header: Optional[List[str]] = None) -> str:
    lines = [f"# {h}" for h in header or []]
    for name, items in kv.sections.items():
        if name:
            lines.append(f"[{name}]")
        lines += [f"{k} = {v}" for k, v in items.items()]
        lines.append("")
    return "\n".join(lines)


def read_file(path: str) -> KeyValueFile:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), source=str(path))


# --- ledgers -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float) and v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v) if isinstance(v, float) else str(v)


def ledger_from_kv(kv: KeyValueFile) -> CountLedger:
    """Build a :class:`CountLedger` from the ``[run]`` and ``[counts]`` sections."""
    c = kv.sections.get("counts")
    if c is None:
        raise LedgerParseError(1, 1, "missing [counts] section", kv.source)
    led = CountLedger(
        n_total=kv.number("run", "N-total", 0),
        ds_half_deg=float(kv.number("run", "Ds-half-deg", 10.0)),
    )
    for key in c:
        if key.startswith("Sent-"):
            led.sent[key[5:]] = kv.number("counts", key)
        elif key.startswith("Detected-") and len(key) in (13, 11) and key[9:11] in ("ZZ", "ZX", "XZ", "XX"):
            led.detected[key[9:]] = kv.number("counts", key)
    for cell in all_cells():
        k1, k2 = f"Detected-{cell}-Ch1", f"Detected-{cell}-Ch2"
        if k1 in c and k2 in c:
            led.detected_ch[cell] = (kv.number("counts", k1), kv.number("counts", k2))
    for name in ("XX11", "XX22"):
        det = tuple(kv.number("counts", f"Detected-{name}-Ds-Ch{i}", 0) for i in (1, 2))
        cor = tuple(kv.number("counts", f"Correct-{name}-Ds-Ch{i}", 0) for i in (1, 2))
        setattr(led, "x" + name[2:], WindowTally(det, cor, kv.number("counts", f"Sent-{name}-Ds")))
    led.zz_error = kv.number("counts", "Detected-ZZError", 0)
    led.zz_correct = kv.number("counts", "Detected-ZZCorrect", 0)
    led.survived_bits = kv.number("counts", "Survived-bits")
    led.qber_z_after = kv.number("published", "QBER-Z-after")
    return led


def ledger_to_kv(led: CountLedger, published: Optional[Dict[str, str]] = None) -> KeyValueFile:
    kv = KeyValueFile()
    kv.sections["run"] = {"N-total": _fmt(led.n_total), "Ds-half-deg": _fmt(led.ds_half_deg)}
    c: Dict[str, str] = {}
    keys = [k for k in ["ZZ"] + all_cells() if k in led.sent or k in led.detected]
    for k in keys:
        if k in led.sent:
            c[f"Sent-{k}"] = _fmt(led.sent[k])
        if k in led.detected:
            c[f"Detected-{k}"] = _fmt(led.detected[k])
    for k, (a, b) in led.detected_ch.items():
        c[f"Detected-{k}-Ch1"], c[f"Detected-{k}-Ch2"] = _fmt(a), _fmt(b)
    for name, w in (("XX11", led.x11), ("XX22", led.x22)):
        if w.n_sent is not None:
            c[f"Sent-{name}-Ds"] = _fmt(w.n_sent)
        for i in (0, 1):
            c[f"Detected-{name}-Ds-Ch{i + 1}"] = _fmt(w.detected[i])
            c[f"Correct-{name}-Ds-Ch{i + 1}"] = _fmt(w.correct[i])
    c["Detected-ZZError"] = _fmt(led.zz_error)
    c["Detected-ZZCorrect"] = _fmt(led.zz_correct)
    if led.survived_bits is not None:
        c["Survived-bits"] = _fmt(led.survived_bits)
    kv.sections["counts"] = c
    pub = dict(published or {})
    if led.qber_z_after is not None:
        pub.setdefault("QBER-Z-after", _fmt(led.qber_z_after))
    if pub:
        kv.sections["published"] = pub
    return kv


def load_ledger(path: str) -> Tuple[CountLedger, KeyValueFile]:
    kv = read_file(path)
    return ledger_from_kv(kv), kv


# --- parameter configs -------------------------------------------------------

_PROTOCOL_KEYS = {f.name: f.name for f in fields(ProtocolParams)}
_SECURITY_KEYS = {f.name: f.name for f in fields(SecurityParams)}
_CHANNEL_KEYS = ("dark_rate", "phase_drift_sigma", "ref_block_us", "misalignment", "ref_counts",
                 "device_eff_a", "device_eff_b")


def config_from_kv(kv: KeyValueFile) -> Tuple[ProtocolParams, ChannelModel, SecurityParams]:
    """``[protocol]``, ``[channel]`` and ``[security]`` sections to dataclasses.

    The channel takes ``loss_a_db``/``loss_b_db`` (fiber only) plus the
    optional fields of :class:`ChannelModel`.
    """
    def pick(section: str, allowed) -> dict:
        out = {}
        for key in kv.sections.get(section, {}):
            if key not in allowed:
                line, col = kv.positions.get((section, key), (0, 0))
                raise LedgerParseError(line, col, f"unknown key {key!r} in [{section}]", kv.source)
            out[key] = kv.number(section, key)
        return out

    p = ProtocolParams(**pick("protocol", _PROTOCOL_KEYS))
    if "n_phase_slices" in kv.sections.get("protocol", {}):
        p = replace(p, n_phase_slices=int(p.n_phase_slices))
    s = SecurityParams(**pick("security", _SECURITY_KEYS))
    ch = pick("channel", ("loss_a_db", "loss_b_db") + _CHANNEL_KEYS)
    la, lb = ch.pop("loss_a_db", 44.5), ch.pop("loss_b_db", 44.6)
    c = ChannelModel.from_loss_db(la, lb, **ch)
    return p, c, s


def config_to_kv(params: ProtocolParams, channel: ChannelModel, sec: SecurityParams) -> KeyValueFile:
    kv = KeyValueFile()
    kv.sections["protocol"] = {f.name: _fmt(getattr(params, f.name)) for f in fields(ProtocolParams)}
    chan = {"loss_a_db": repr(linear_to_db(channel.fiber_eta_a)), "loss_b_db": repr(linear_to_db(channel.fiber_eta_b))}
    for k in _CHANNEL_KEYS:
        v = getattr(channel, k)
        chan[k] = "inf" if isinstance(v, float) and math.isinf(v) else _fmt(v)
    kv.sections["channel"] = chan
    kv.sections["security"] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(SecurityParams)}
    return kv


def config_echo(params: ProtocolParams, channel: ChannelModel, sec: SecurityParams, extra: Optional[Dict] = None) -> List[str]:
    """Header lines describing a run; every output file starts with these."""
    lines = serialize(config_to_kv(params, channel, sec)).splitlines()
    lines = [ln for ln in lines if ln]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    return lines


# --- shipped fixtures --------------------------------------------------------

FIXTURES = ("paper_ledger.txt", "paper_windows.csv", "paper_params.txt")


def fixture_path(name: str) -> str:
    if name not in FIXTURES:
        raise KeyError(name)
    return str(resources.files("snstf").joinpath("data", name))


def paper_ledger() -> Tuple[CountLedger, KeyValueFile]:
    return load_ledger(fixture_path("paper_ledger.txt"))


def paper_config() -> Tuple[ProtocolParams, ChannelModel, SecurityParams]:
    return config_from_kv(read_file(fixture_path("paper_params.txt")))


@dataclass(frozen=True)
class WindowRow:
    ds_half_deg: float
    x11_detections: int
    x11_qber: float
    x22_detections: int
    x22_qber: float
    published_rate: float


def read_windows(path: Optional[str] = None) -> List[WindowRow]:
    """Per-window X tallies: ``ds_half_deg,x11_detections,x11_qber,x22_detections,x22_qber,rate``."""
    path = path or fixture_path("paper_windows.csv")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    rows = []
    reader = csv.DictReader(io.StringIO("\n".join(ln for ln in text.splitlines() if not ln.startswith("#"))))
    for i, r in enumerate(reader, start=2):
        try:
            rows.append(WindowRow(float(r["ds_half_deg"]), int(r["x11_detections"]), float(r["x11_qber"]),
                                  int(r["x22_detections"]), float(r["x22_qber"]), float(r["rate"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise LedgerParseError(i, 1, f"bad window row: {exc}", path) from None
    return rows
