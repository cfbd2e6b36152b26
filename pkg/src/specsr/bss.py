"""Blind source separation: model order by MDL, endmembers by VCA, abundances by FCLS."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cube import HyperCube, write_envi
from .errors import DegenerateData, DimensionMismatch, InvalidSpec, RankDeficient

KKT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class UnmixResult:
    n_sources: int
    endmembers: np.ndarray  # M x N
    abundances: np.ndarray  # N x L
    indices: tuple[int, ...] = ()


# ---------------------------------------------------------------------------
# MDL
# ---------------------------------------------------------------------------


def mdl_curve(y: HyperCube, n_max: int) -> np.ndarray:
    """Description length for ``k = 0..n_max`` from the correlation eigenvalues.

        MDL(k) = -L (p-k) log(geo(l_{k+1..p}) / arith(l_{k+1..p})) + k (2p-k) log(L) / 2

    The correlation is uncentered so that ``N`` mixed sources give rank ``N``.
    """
    m, n = y.data.shape
    if not (n > m >= n_max >= 1):
        raise InvalidSpec(f"need L > M >= n_max >= 1, got L={n}, M={m}, n_max={n_max}")
    r = y.data @ y.data.T / n
    if not np.all(np.isfinite(r)):
        raise RankDeficient("correlation matrix is not finite")
    lam = np.linalg.eigvalsh(r)[::-1]
    if lam[0] <= 0:
        raise RankDeficient("correlation matrix is zero")
    # rounding noise in a rank-deficient matrix can give tiny or negative eigenvalues
    lam = np.maximum(lam, lam[0] * m * np.finfo(float).eps)
    out = np.empty(n_max + 1)
    for k in range(n_max + 1):
        tail = lam[k:]
        log_ratio = np.mean(np.log(tail)) - np.log(np.mean(tail))
        out[k] = -n * (m - k) * log_ratio + 0.5 * k * (2 * m - k) * np.log(n)
    return out


def estimate_order_mdl(y: HyperCube, n_max: int) -> int:
    return int(np.argmin(mdl_curve(y, n_max)))


# ---------------------------------------------------------------------------
# VCA
# ---------------------------------------------------------------------------


def _top_subspace(r: np.ndarray, d: int) -> np.ndarray:
    u, _, _ = np.linalg.svd(r)
    return u[:, :d]


def vca(y: HyperCube, n: int, seed: int = 0, return_indices: bool = False):
    """Vertex component analysis; returns ``n`` pixel spectra (M x n).

    The projection is chosen by estimated SNR: above ``15 + 10 log10(n)`` dB
    the data are projected projectively onto the top-``n`` subspace,
    otherwise onto the top-``(n-1)`` principal components plus a constant
    coordinate. Extreme-projection ties go to the lowest pixel index.
    """
    data = y.data
    m, npix = data.shape
    if not 1 <= n <= min(m, npix):
        raise InvalidSpec(f"n must be in [1, min(M, L)] = [1, {min(m, npix)}], got {n}")
    if np.all(data == data[:, :1]):
        raise DegenerateData("all pixels are identical")
    rng = np.random.default_rng(seed)

    r_m = data.mean(axis=1, keepdims=True)
    r_o = data - r_m
    ud = _top_subspace(r_o @ r_o.T / npix, n)
    x_p = ud.T @ r_o
    p_y = np.sum(data**2) / npix
    p_x = np.sum(x_p**2) / npix + float(np.sum(r_m**2))
    noise = p_y - p_x
    signal = p_x - n / m * p_y
    snr = np.inf if noise <= 0 else 10 * np.log10(max(signal, 1e-300) / noise)
    snr_th = 15 + 10 * np.log10(n)

    if snr < snr_th:
        d = n - 1
        x = x_p[:d]
        c = np.sqrt(np.max(np.sum(x**2, axis=0))) if d else 1.0
        proj = np.vstack([x, np.full((1, npix), c)])
    else:
        ud = _top_subspace(data @ data.T / npix, n)
        x = ud.T @ data
        u = x.mean(axis=1, keepdims=True)
        denom = (u.T @ x).ravel()
        if np.any(np.abs(denom) < 1e-300):
            raise DegenerateData("projective normalization hit a zero pixel")
        proj = x / denom

    a = np.zeros((n, n))
    a[-1, 0] = 1.0
    idx: list[int] = []
    for i in range(n):
        w = rng.normal(size=n)
        f = w - a @ np.linalg.pinv(a) @ w
        nf = np.linalg.norm(f)
        if nf == 0:
            raise DegenerateData("projection direction vanished")
        v = np.abs(f @ proj) / nf
        j = int(np.argmax(v))  # first maximum = lowest pixel index
        a[:, i] = proj[:, j]
        idx.append(j)
    e = data[:, idx].copy()
    return (e, tuple(idx)) if return_indices else e


# ---------------------------------------------------------------------------
# FCLS
# ---------------------------------------------------------------------------


def _eq_solve(h, f, free):
    """Minimize ``a'Ha/2 - f'a`` on ``free`` coordinates with ``sum(a) = 1``."""
    k = len(free)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = h[np.ix_(free, free)]
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    sol = np.linalg.solve(kkt, np.concatenate([f[free], [1.0]]))
    return sol[:k]


def _active_set(h, f, a0, tol=KKT_TOL, max_iter=200):
    """Primal active-set QP on the unit simplex starting from feasible ``a0``."""
    n = len(f)
    a = a0.copy()
    active = a <= 0
    for _ in range(max_iter):
        free = np.flatnonzero(~active)
        cand = np.zeros(n)
        cand[free] = _eq_solve(h, f, free)
        step = cand - a
        neg = free[cand[free] < 0]
        if neg.size:
            ratios = a[neg] / (a[neg] - cand[neg])
            j = int(np.argmin(ratios))
            a = a + ratios[j] * step
            a[neg[j]] = 0.0
            active[neg[j]] = True
            continue
        a = cand
        grad = h @ a - f
        nu = grad[free].mean()
        lam = grad - nu
        lam[free] = 0.0
        if np.all(lam >= -tol * max(1.0, np.abs(grad).max())):
            return a
        active[int(np.argmin(lam))] = False
    return a


def fcls(y: HyperCube, endmembers: np.ndarray) -> np.ndarray:
    """Abundances (N x L) on the unit simplex minimizing ``||E a - y_l||`` per pixel."""
    e = np.asarray(endmembers, dtype=float)
    if e.ndim != 2 or e.shape[0] != y.n_bands:
        raise DimensionMismatch(f"endmembers {e.shape} do not match {y.n_bands} bands")
    n = e.shape[1]
    if np.linalg.matrix_rank(e) < n:
        raise RankDeficient("endmember matrix is not full column rank")
    h = e.T @ e
    f_all = e.T @ y.data  # N x L
    # sum-to-one solution for every pixel at once
    hinv = np.linalg.inv(h)
    one = np.ones(n)
    s = one @ hinv @ one
    ls = hinv @ f_all
    ab = ls + np.outer(hinv @ one, (1.0 - one @ ls) / s)
    bad = np.flatnonzero(np.any(ab < 0, axis=0))
    for j in bad:
        f = f_all[:, j]
        # best vertex as a feasible start
        vert = 0.5 * np.diag(h) - f
        a0 = np.zeros(n)
        a0[int(np.argmin(vert))] = 1.0
        ab[:, j] = _active_set(h, f, a0)
    ab = np.maximum(ab, 0.0)
    return ab / ab.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# Pipeline and export
# ---------------------------------------------------------------------------


def unmix(y: HyperCube, n_opt: int | None = None, seed: int = 0, n_max: int | None = None) -> UnmixResult:
    if n_opt is None:
        n_max = min(y.n_bands - 1, 15) if n_max is None else n_max
        n_opt = estimate_order_mdl(y, n_max)
        if n_opt < 1:
            raise DegenerateData("MDL found no sources")
    e, idx = vca(y, n_opt, seed, return_indices=True)
    a = fcls(y, e)
    return UnmixResult(n_opt, e, a, idx)


def sam_pairs(e: np.ndarray) -> np.ndarray:
    """Pairwise spectral angles (degrees) between the columns of ``e``."""
    u = e / np.linalg.norm(e, axis=0, keepdims=True)
    diff = np.linalg.norm(u[:, :, None] - u[:, None, :], axis=0)
    summ = np.linalg.norm(u[:, :, None] + u[:, None, :], axis=0)
    return np.degrees(2.0 * np.arctan2(diff, summ))


def abundance_cube(result: UnmixResult, like: HyperCube) -> HyperCube:
    """Abundances as an N-band cube on ``like``'s grid; bands are labeled 1..N."""
    return HyperCube(result.abundances, like.width, like.height, np.arange(1.0, result.n_sources + 1))


def export_unmix(result: UnmixResult, like: HyperCube, out_dir) -> list[Path]:
    """Write the abundance cube, one single-band cube per source, and endmembers.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_envi(abundance_cube(result, like), out / "abundances")]
    for k in range(result.n_sources):
        band = HyperCube(result.abundances[k : k + 1], like.width, like.height, np.array([float(k + 1)]))
        written.append(write_envi(band, out / f"abundance_{k + 1:02d}"))
    path = out / "endmembers.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength"] + [f"source_{k + 1}" for k in range(result.n_sources)])
        for wl, row in zip(like.wavelengths, result.endmembers):
            w.writerow([repr(float(wl))] + [repr(float(v)) for v in row])
    written.append(path)
    return written
