"""Engineered scenes shared by the unit and acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.linalg import null_space

from specsr.bss import sam_pairs
from specsr.cube import HyperCube
from specsr.simulate import DESK6, gaussian_srt, hsi_wavelengths, smooth_abundances, smooth_spectra


def twin_scene(seed: int = 0, n_sources: int = 4, size: int = 24, m: int = 32, range_eps: float = 2e-3):
    """Scene whose first two endmembers differ only by a near-null-space direction of ``D``.

    Returns ``(hsi, d, endmembers, abundances)``. ``e_1 = e_0 + delta`` with
    ``delta`` mostly in ``null(D)`` plus a small range component, so the pair
    is well separated in the hyperspectral space but nearly collinear after
    the spectral response.
    """
    rng = np.random.default_rng(seed)
    wl = hsi_wavelengths(m)
    d = gaussian_srt(wl, DESK6).d
    e = smooth_spectra(rng, wl, n_sources)
    ns = null_space(d)
    bump = np.exp(-0.5 * ((wl - wl[m // 2]) / 250.0) ** 2) * np.sin(wl / 90.0)
    delta = ns @ (ns.T @ bump)
    delta *= 0.25 * np.linalg.norm(e[:, 0]) / np.linalg.norm(delta)
    delta += range_eps * np.linalg.norm(e[:, 0]) * d.T @ rng.normal(size=d.shape[0])
    # shrink the step if it would push the twin below a reflectance of 0.02
    neg = delta < 0
    t = min(1.0, np.min((e[neg, 0] - 0.02) / -delta[neg])) if neg.any() else 1.0
    e[:, 1] = e[:, 0] + t * delta
    a = smooth_abundances(rng, n_sources, size, size)
    hsi = HyperCube(e @ a, size, size, wl)
    return hsi, d, e, a


def best_match_sam(est, ref):
    """Per-endmember SAM (degrees) under the best column permutation."""
    angles = sam_pairs(np.hstack([est, ref]))[: est.shape[1], est.shape[1] :]
    n = ref.shape[1]
    best = min(itertools.permutations(range(n)), key=lambda p: sum(angles[p[k], k] for k in range(n)))
    return np.array([angles[best[k], k] for k in range(n)]), best


def pure_pixel_scene(seed=0, n=5, size=36, m=32, sigma=0.0):
    rng = np.random.default_rng(seed)
    wl = hsi_wavelengths(m)
    e = smooth_spectra(rng, wl, n)
    a = smooth_abundances(rng, n, size, size)
    y = e @ a + sigma * rng.standard_normal((m, size * size))
    return HyperCube(y, size, size, wl), e, a
