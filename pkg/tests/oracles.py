"""Brute-force reference values for single-photon yields and phase errors."""
import math

import numpy as np

from snstf.channel_sim import _block_us, residual_variances


def true_single_photon_yield(eta, d):
    # one photon, other side vacuum: P(exactly one detector clicks), by photon-path enumeration
    p_no_click = 1 - d
    go1 = go2 = eta / 2
    lost = 1 - eta
    only1 = go1 * p_no_click + lost * d * p_no_click
    only2 = go2 * p_no_click + lost * d * p_no_click
    return only1 + only2


def true_phase_error(mu1, ch, ds_half_deg, n_leg=48, n_herm=24):
    """Single-photon X-window error yield / single-photon yield, by direct enumeration.

    A single photon shared between both arms reaches D+ or D- with
    probabilities (eta_a + eta_b +- 2 sqrt(eta_a eta_b) cos delta) / 4.
    """
    ea, eb, d, m = ch.eta_a, ch.eta_b, ch.dark_rate, ch.misalignment
    ds = math.radians(ds_half_deg)
    xa, wa = np.polynomial.legendre.leggauss(n_leg)
    sd = np.sqrt(residual_variances(ch.phase_drift_sigma, _block_us(ch), ch.phase_est_sigma))
    if np.any(sd):
        g, wg = np.polynomial.hermite_e.hermegauss(n_herm)
        wg = wg / math.sqrt(2 * math.pi)
    else:
        g, wg, sd = np.zeros(1), np.ones(1), np.zeros(1)
    delta = ds * xa[:, None, None] + sd[None, :, None] * g[None, None, :]
    right = (ea + eb + 2 * math.sqrt(ea * eb) * np.cos(delta)) / 4
    wrong = (ea + eb - 2 * math.sqrt(ea * eb) * np.cos(delta)) / 4
    right, wrong = (1 - m) * right + m * wrong, (1 - m) * wrong + m * right
    lost = 1 - (ea + eb) / 2
    err = (1 - d) * (wrong + lost * d)
    w = (wa / 2)[:, None, None] * wg[None, None, :] / sd.size
    err_yield = float(np.sum(w * err))
    s1 = 0.5 * (true_single_photon_yield(ea, d) + true_single_photon_yield(eb, d))
    return err_yield / s1
