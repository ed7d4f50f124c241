import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import expm

from snstf.channel_sim import (
    DriftState,
    PulseChoice,
    _drift_and_estimate,
    click_probabilities,
    expected_ledger,
    one_detector,
    port_click_probs,
    residual_variances,
    simulate,
    window_one_det,
)
from snstf.domain import MU1, MUZ, PAPER_PARAMS, VAC, ChannelModel, all_cells, paper_channel


def _fock_two_mode(alpha, beta, cutoff=14):
    """Two-mode coherent product state through a 50:50 beam splitter in a truncated Fock basis."""
    from math import factorial

    n = np.arange(cutoff)
    fac = np.array([math.sqrt(factorial(k)) for k in n])
    ca = np.exp(-abs(alpha) ** 2 / 2) * alpha**n / fac
    cb = np.exp(-abs(beta) ** 2 / 2) * beta**n / fac
    psi = np.kron(ca, cb)
    a = np.diag(np.sqrt(n[1:]), 1)
    eye = np.eye(cutoff)
    A, B = np.kron(a, eye), np.kron(eye, a)
    gen = A.conj().T @ B - A @ B.conj().T
    out = expm(np.pi / 4 * gen) @ psi
    return (np.abs(out) ** 2).reshape(cutoff, cutoff)


def _oracle_one_det(mu_a, mu_b, delta, eta, dark):
    probs = _fock_two_mode(math.sqrt(eta * mu_a), math.sqrt(eta * mu_b) * np.exp(-1j * delta))
    # label as D1 the mode that takes all light at delta = 0
    ref = _fock_two_mode(math.sqrt(eta * mu_a), math.sqrt(eta * mu_b))
    if ref[0, :].sum() > ref[:, 0].sum():
        probs = probs.T
    p_vac1 = probs[0, :].sum()
    p_vac2 = probs[:, 0].sum()
    p_both_vac = probs[0, 0]
    k = 1 - dark
    only1 = k * p_vac2 - k * k * p_both_vac
    only2 = k * p_vac1 - k * k * p_both_vac
    return only1, only2


def test_both_vacuum_gives_dark_counts():
    ch = ChannelModel(eta_a=0.3, eta_b=0.2, dark_rate=1e-3)
    a = PulseChoice("X", VAC, 3)
    b = PulseChoice("X", VAC, 0)
    assert click_probabilities(a, b, 0.7, ch, PAPER_PARAMS) == pytest.approx((1e-3, 1e-3), rel=1e-12)


def test_perfect_visibility_symmetry():
    d, eta, mu = 2e-6, 0.4, 0.1
    ch = ChannelModel(eta_a=eta, eta_b=eta, dark_rate=d)
    a = PulseChoice("X", MU1, 5)
    p1, p2 = click_probabilities(a, PulseChoice("X", MU1, 5), 0.0, ch, PAPER_PARAMS)
    assert p2 == pytest.approx(d, rel=1e-9)
    # all light from both arms, 2 eta mu, exits the constructive port
    assert p1 == pytest.approx(1 - (1 - d) * math.exp(-2 * eta * mu), rel=1e-12)


@pytest.mark.parametrize("eta,delta", [(1e-4, math.pi / 2), (0.5, math.pi / 2), (0.5, 1.0), (0.9, 2.5)])
def test_clicks_match_fock_space_oracle(eta, delta):
    d = 1e-5
    ch = ChannelModel(eta_a=eta, eta_b=eta, dark_rate=d)
    p1, p2 = port_click_probs(0.1, 0.1, delta, ch)
    o1, o2 = one_detector(p1, p2)
    r1, r2 = _oracle_one_det(0.1, 0.1, delta, eta, d)
    assert float(o1) == pytest.approx(r1, rel=1e-9)
    assert float(o2) == pytest.approx(r2, rel=1e-9)


def test_misalignment_mixes_ports():
    ch = ChannelModel(eta_a=0.5, eta_b=0.5, misalignment=0.1)
    p1, p2 = port_click_probs(0.2, 0.2, 0.0, ch)
    assert float(p2) == pytest.approx(1 - math.exp(-0.1 * 0.5 * 0.4))
    assert float(p1) == pytest.approx(1 - math.exp(-0.9 * 0.5 * 0.4))


def test_choice_invariants():
    with pytest.raises(ValueError):
        PulseChoice("Z", MU1)
    with pytest.raises(ValueError):
        PulseChoice("X", MUZ)
    assert DriftState(7.0).phase_offset == pytest.approx(7.0 - 2 * math.pi)


def test_no_sending_no_dark_gives_empty_z():
    p = replace(PAPER_PARAMS, eps_send=0.0)
    ch = replace(paper_channel(), dark_rate=0.0)
    led = simulate(p, ch, 200_000, seed=3)
    assert led.zz_error == 0 and led.zz_correct == 0
    assert led.detected_of("ZZ") == 0


def test_simulate_is_deterministic_across_threads():
    ch = paper_channel().with_total_loss(40.0)
    a = simulate(PAPER_PARAMS, ch, 250_000, seed=11, block_pairs=50_000)
    b = simulate(PAPER_PARAMS, ch, 250_000, seed=11, block_pairs=50_000, workers=3)
    c = simulate(PAPER_PARAMS, ch, 250_000, seed=12, block_pairs=50_000)
    assert a == b
    assert a != c
    assert not a.violations()
    assert sum(a.sent.values()) == 250_000


def test_raw_keys_match_ledger_tallies():
    ch = paper_channel().with_total_loss(40.0)
    led, raw = simulate(PAPER_PARAMS, ch, 300_000, seed=2, return_raw_keys=True)
    assert raw.n_t == led.n_t
    assert int(np.sum(raw.alice_bits != raw.bob_bits)) == led.zz_error
    # Alice sends -> 1, Bob sends -> 0
    assert int(np.sum((raw.alice_bits == 1) & (raw.bob_bits == 1))) == led.detected["ZZ30"]
    assert int(np.sum((raw.alice_bits == 0) & (raw.bob_bits == 0))) == led.detected["ZZ03"]


def test_window_acceptance_fraction():
    # one phase-estimation block per simulation block, so every block sees
    # an independent uniform channel phase
    ds = 15.0
    p = replace(PAPER_PARAMS, ds_half_deg=ds, pz=0.0, p1=1.0, p2=0.0)
    n_blocks, size = 600, 1000
    led = simulate(p, paper_channel(), n_blocks * size, seed=5, block_pairs=size)
    frac = 2 * ds / 180.0
    # acceptance given the estimate psi: share of the 16 slice differences in the window
    psi = np.linspace(0, 2 * np.pi, 20001)[:-1]
    diffs = 2 * np.pi * np.arange(16) / 16
    f = (np.abs(np.cos(diffs[None, :] - psi[:, None])) >= math.cos(math.radians(ds))).mean(axis=1)
    assert f.mean() == pytest.approx(frac, rel=1e-3)
    var = n_blocks * (size * np.mean(f * (1 - f)) + size**2 * f.var())
    assert abs(led.x11.n_sent - n_blocks * size * frac) < 3 * math.sqrt(var)


def test_residual_variance_model_matches_drift_sampler():
    ch = ChannelModel(eta_a=0.1, eta_b=0.1, phase_drift_sigma=0.03, ref_block_us=10, ref_counts=math.inf)
    rng = np.random.default_rng(0)
    n_blocks = 3000
    psi, est = _drift_and_estimate(rng, n_blocks * 1000, ch)
    resid = (psi - est).reshape(n_blocks, 1000)
    emp = resid.var(axis=0)
    model = residual_variances(0.03, 10, 0.0)
    assert emp.mean() == pytest.approx(model.mean(), rel=0.05)
    assert emp[-1] == pytest.approx(model[-1], rel=0.1)


def test_narrow_window_without_drift_is_dark_limited():
    ch = ChannelModel(eta_a=1e-2, eta_b=1e-2, dark_rate=1e-5, phase_drift_sigma=0.0, misalignment=0.0)
    p = replace(PAPER_PARAMS, ds_half_deg=3.0, pz=0.0, p1=1.0, p2=0.0)
    led = simulate(p, ch, 2_000_000, seed=8)
    good, bad = window_one_det(p.mu1, ch, 3.0)
    expect_q = bad / (good + bad)
    # the wrong port only sees dark counts plus the 1 - cos(3 deg) leakage
    dark_only = 1e-5 / (1e-2 * 0.2)
    assert expect_q < 2 * dark_only
    w = led.x11
    sigma = math.sqrt(w.total * expect_q * (1 - expect_q))
    assert abs(w.errors - w.total * expect_q) < 4 * sigma + 2


def test_expected_ledger_lossless_quadrature():
    ch = ChannelModel(eta_a=1.0, eta_b=1.0, dark_rate=0.0)
    led = expected_ledger(PAPER_PARAMS, ch, n_pairs=1.0)
    mu = PAPER_PARAMS.mu_z

    def one_det(delta):
        i_p = mu * (1 + math.cos(delta))
        i_m = mu * (1 - math.cos(delta))
        p1, p2 = 1 - math.exp(-i_p), 1 - math.exp(-i_m)
        return p1 * (1 - p2) + p2 * (1 - p1)

    ref = integrate.quad(one_det, 0, 2 * math.pi)[0] / (2 * math.pi)
    prob_cell = led.sent["ZZ33"]
    assert led.detected["ZZ33"] / prob_cell == pytest.approx(ref, rel=1e-10)
    half = math.exp(-mu / 2)
    assert led.detected["ZZ30"] / led.sent["ZZ30"] == pytest.approx(2 * half * (1 - half), rel=1e-12)


def test_expected_ledger_all_vacuum_is_dark_only():
    d = 3e-7
    ch = replace(paper_channel(), dark_rate=d)
    led = expected_ledger(PAPER_PARAMS, ch, n_pairs=1.0)
    for cell in all_cells():
        if cell[2] == "0" and cell[3] == "0":
            assert led.detected[cell] / led.sent[cell] == pytest.approx(2 * d * (1 - d), rel=1e-9)


def test_simulation_converges_to_expected_ledger():
    ch = paper_channel().with_total_loss(30.0)
    n = 2_000_000
    led = simulate(PAPER_PARAMS, ch, n, seed=21)
    exp = expected_ledger(PAPER_PARAMS, ch, n_pairs=n)
    for cell in all_cells():
        mean = exp.detected[cell]
        assert abs(led.detected[cell] - mean) <= 5 * math.sqrt(mean) + 3, cell
    for attr in ("x11", "x22"):
        o, e = getattr(led, attr), getattr(exp, attr)
        assert abs(o.total - e.total) <= 5 * math.sqrt(e.total) + 3
        assert abs(o.errors - e.errors) <= 5 * math.sqrt(e.errors) + 3
