"""Total-variation functionals and proximal maps.

``prox_tv1d_taut_string`` is the exact solver (Condat's direct algorithm,
which returns the derivative of the taut string through the tube of
half-width ``w`` around the running sum of ``z``). The split Bregman solver
is iterative and is checked against it.
"""

from __future__ import annotations

import warnings

import numba
import numpy as np
import torch

from .cube import HyperCube
from .errors import ShapeMismatch, TooFewBands, TooFewPixels


class NonConvergence(RuntimeWarning):
    """Iterative solver stopped at its iteration cap before meeting tolerance."""


# ---------------------------------------------------------------------------
# TV functionals
# ---------------------------------------------------------------------------


def tv_spec(y: HyperCube) -> float:
    """Mean absolute spectral first difference, ``sum |Y[m+1,l]-Y[m,l]| / (L (M-1))``."""
    m, n = y.data.shape
    if m < 2:
        raise TooFewBands("spectral TV needs at least 2 bands")
    return float(np.abs(np.diff(y.data, axis=0)).sum() / (n * (m - 1)))


def tv_spat(y: HyperCube) -> float:
    """Mean absolute horizontal and vertical forward difference over all bands."""
    if y.width < 2 or y.height < 2:
        raise TooFewPixels("spatial TV needs width and height >= 2")
    img = y.image()
    dh = np.abs(np.diff(img, axis=2))
    dv = np.abs(np.diff(img, axis=1))
    return float((dh.sum() + dv.sum()) / (dh.size + dv.size))


# ---------------------------------------------------------------------------
# 1-D TV prox: exact
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _tv1d_exact(y, lam, out):
    n = y.shape[0]
    if n == 0:
        return
    if lam <= 0.0 or n == 1:
        for i in range(n):
            out[i] = y[i]
        return
    k = 0
    k0 = 0
    kplus = 0
    kminus = 0
    twolam = 2.0 * lam
    minlam = -lam
    umin = lam
    umax = minlam
    vmin = y[0] - lam
    vmax = y[0] + lam
    while True:
        while k == n - 1:
            if umin < 0.0:
                while True:
                    out[k0] = vmin
                    k0 += 1
                    if k0 > kminus:
                        break
                k = k0
                kminus = k0
                vmin = y[k0]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                while True:
                    out[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                k = k0
                kplus = k0
                vmax = y[k0]
                umax = minlam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                while True:
                    out[k0] = vmin
                    k0 += 1
                    if k0 > k:
                        break
                return
        umin += y[k + 1] - vmin
        if umin < minlam:
            while True:
                out[k0] = vmin
                k0 += 1
                if k0 > kminus:
                    break
            k = k0
            kplus = k0
            kminus = k0
            vmin = y[k0]
            vmax = vmin + twolam
            umin = lam
            umax = minlam
        else:
            umax += y[k + 1] - vmax
            if umax > lam:
                while True:
                    out[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                k = k0
                kplus = k0
                kminus = k0
                vmax = y[k0]
                vmin = vmax - twolam
                umin = lam
                umax = minlam
            else:
                k += 1
                if umin >= lam:
                    kminus = k
                    vmin += (umin - lam) / (kminus - k0 + 1)
                    umin = lam
                if umax <= minlam:
                    kplus = k
                    vmax += (umax + lam) / (kplus - k0 + 1)
                    umax = minlam


@numba.njit(cache=True)
def _tv1d_exact_columns(z, lam, out):
    # z, out: (n, L) C-contiguous; each column is one signal
    n, L = z.shape
    col = np.empty(n)
    res = np.empty(n)
    for j in range(L):
        for i in range(n):
            col[i] = z[i, j]
        _tv1d_exact(col, lam, res)
        for i in range(n):
            out[i, j] = res[i]


def _check_weight(w: float) -> float:
    w = float(w)
    if not np.isfinite(w) or w < 0:
        raise ValueError(f"TV weight must be finite and >= 0, got {w}")
    return w


def prox_tv1d_taut_string(z, w: float) -> np.ndarray:
    """Exact ``argmin_v w * sum|v[i+1]-v[i]| + 0.5 * ||v - z||^2``."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeMismatch("expected a 1-D signal")
    if not np.all(np.isfinite(z)):
        raise ValueError("signal must be finite")
    out = np.empty_like(z)
    _tv1d_exact(z, _check_weight(w), out)
    return out


# ---------------------------------------------------------------------------
# 1-D TV prox: split Bregman
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _split_bregman(z, w, iters, mu, tol, out):
    n = z.shape[0]
    m = n - 1
    # warm start d = Dz so that w = 0 is a fixed point from the first iteration
    d = np.empty(m)
    for i in range(m):
        d[i] = z[i + 1] - z[i]
    b = np.zeros(m)
    v = z.copy()
    # (I + mu D^T D) is tridiagonal; precompute its Thomas factorization
    diag = np.empty(n)
    for i in range(n):
        deg = 0.0
        if i > 0:
            deg += 1.0
        if i < n - 1:
            deg += 1.0
        diag[i] = 1.0 + mu * deg
    off = -mu
    cp = np.empty(n)
    denom = np.empty(n)
    denom[0] = diag[0]
    cp[0] = off / denom[0] if n > 1 else 0.0
    for i in range(1, n):
        denom[i] = diag[i] - off * cp[i - 1]
        cp[i] = off / denom[i]
    rhs = np.empty(n)
    thr = w / mu
    change = 0.0
    it = 0
    for it in range(1, iters + 1):
        # rhs = z + mu D^T (d - b), with (D^T q)[i] = q[i-1] - q[i]
        for i in range(n):
            acc = 0.0
            if i > 0:
                acc += d[i - 1] - b[i - 1]
            if i < m:
                acc -= d[i] - b[i]
            rhs[i] = z[i] + mu * acc
        # forward / backward substitution
        rhs[0] = rhs[0] / denom[0]
        for i in range(1, n):
            rhs[i] = (rhs[i] - off * rhs[i - 1]) / denom[i]
        for i in range(n - 2, -1, -1):
            rhs[i] -= cp[i] * rhs[i + 1]
        change = 0.0
        for i in range(n):
            c = abs(rhs[i] - v[i])
            if c > change:
                change = c
            v[i] = rhs[i]
        for i in range(m):
            s = v[i + 1] - v[i] + b[i]
            if s > thr:
                d[i] = s - thr
            elif s < -thr:
                d[i] = s + thr
            else:
                d[i] = 0.0
            c = abs(s - d[i] - b[i])
            if c > change:
                change = c
            b[i] = s - d[i]
        if change <= tol:
            break
    for i in range(n):
        out[i] = v[i]
    return it, change


def prox_tv1d_split_bregman(
    z,
    w: float,
    iters: int = 1000,
    mu: float = 1.0,
    tol: float = 1e-10,
    return_info: bool = False,
):
    """Split Bregman iterations for the 1-D TV prox.

    Stops early once the largest iterate change drops to ``tol``; a few
    hundred iterations are typical at ``mu = 1`` for signals of length <= 64.
    Emits a :class:`NonConvergence` warning if the last iterate change is
    still above ``tol`` at ``iters``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if mu <= 0:
        raise ValueError("mu must be > 0")
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ShapeMismatch("expected a 1-D signal")
    if not np.all(np.isfinite(z)):
        raise ValueError("signal must be finite")
    w = _check_weight(w)
    out = np.empty_like(z)
    if z.size < 2:
        out[:] = z
        it, change = 1, 0.0
    else:
        it, change = _split_bregman(z, w, int(iters), float(mu), float(tol), out)
    converged = change <= tol
    if not converged:
        warnings.warn(
            f"split Bregman stopped after {it} iterations, last change {change:.3g}",
            NonConvergence,
            stacklevel=2,
        )
    if return_info:
        return out, {"iterations": it, "last_change": change, "converged": converged}
    return out


def tv1d_objective(v, z, w: float) -> float:
    v = np.asarray(v, float)
    z = np.asarray(z, float)
    return float(w * np.abs(np.diff(v)).sum() + 0.5 * np.sum((v - z) ** 2))


# ---------------------------------------------------------------------------
# Spectral TV prox over a cube
# ---------------------------------------------------------------------------


def column_weight(w: float, m: int, n_pixels: int) -> float:
    """Per-spectrum TV weight equivalent to ``w * tv_spec`` on an (m, n_pixels) cube."""
    return w / (n_pixels * (m - 1))


def prox_tv_columns(z: np.ndarray, lam: float) -> np.ndarray:
    """Exact 1-D TV prox of every column of ``z`` with a common weight ``lam``."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    out = np.empty_like(z)
    _tv1d_exact_columns(z, _check_weight(lam), out)
    return out


def prox_spectral_tv(z: HyperCube, w: float) -> HyperCube:
    """``argmin_V w * tv_spec(V) + 0.5 ||V - Z||_F^2``, solved spectrum by spectrum."""
    if z.n_bands < 2:
        raise TooFewBands("spectral TV prox needs at least 2 bands")
    lam = column_weight(_check_weight(w), z.n_bands, z.n_pixels)
    return z.with_data(prox_tv_columns(z.data, lam))


@numba.njit(cache=True)
def _segment_backward(v, g, gz, gl):
    # v, g, gz: (n, L); gl: (L,) per-column dv/dlam contracted with g
    n, L = v.shape
    for j in range(L):
        a = 0
        acc_lam = 0.0
        while a < n:
            b = a
            while b + 1 < n and v[b + 1, j] == v[a, j]:
                b += 1
            cnt = b - a + 1
            sg = 0.0
            for i in range(a, b + 1):
                sg += g[i, j]
            for i in range(a, b + 1):
                gz[i, j] = sg / cnt
            s_left = 0.0
            if a > 0:
                s_left = 1.0 if v[a, j] > v[a - 1, j] else -1.0
            s_right = 0.0
            if b < n - 1:
                s_right = 1.0 if v[b + 1, j] > v[b, j] else -1.0
            # segment value = mean(z_seg) - lam (s_left - s_right) / cnt
            acc_lam += sg * (-(s_left - s_right) / cnt)
            a = b + 1
        gl[j] = acc_lam


class SpectralTvProx(torch.autograd.Function):
    """Differentiable columnwise TV prox of an (M, L) tensor with scalar weight ``lam``.

    On each constant run of the output the solution equals the run mean of the
    input shifted by ``lam`` times the jump signs at its ends, which gives the
    exact (almost-everywhere) Jacobian.
    """

    @staticmethod
    def forward(ctx, z, lam):
        zn = z.detach().cpu().numpy().astype(np.float64)
        v = prox_tv_columns(zn, float(lam))
        ctx.save_for_backward(torch.from_numpy(v))
        ctx.lam_shape = lam.shape
        return torch.from_numpy(v).to(z.dtype)

    @staticmethod
    def backward(ctx, grad):
        (v,) = ctx.saved_tensors
        g = np.ascontiguousarray(grad.detach().cpu().numpy().astype(np.float64))
        gz = np.empty_like(g)
        gl = np.empty(g.shape[1])
        _segment_backward(np.ascontiguousarray(v.numpy()), g, gz, gl)
        glam = torch.tensor(gl.sum(), dtype=grad.dtype).reshape(ctx.lam_shape)
        return torch.from_numpy(gz).to(grad.dtype), glam


def spectral_tv_prox_torch(z: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """Apply :class:`SpectralTvProx` to an (M, L) or (B, M, L) tensor."""
    if z.dim() == 2:
        return SpectralTvProx.apply(z, lam)
    return torch.stack([SpectralTvProx.apply(zi, lam) for zi in z])


def denoiser_rir_forward(z: HyperCube, p) -> HyperCube:
    """Run a :class:`specsr.layers.RirDenoiser` on a cube (float64, no grad)."""
    from .layers import cube_to_tensor, tensor_to_cube

    if p.channels != z.n_bands:
        raise ShapeMismatch(f"denoiser width {p.channels} != {z.n_bands} bands")
    with torch.no_grad():
        out = p(cube_to_tensor(z))
    return tensor_to_cube(out, z)
