"""ADMM unfolding for ``min_Y ||Y_S - D Y||_F^2 + REG(V)  s.t.  Y = V``.

One stage is

    V <- prox_{REG/rho}(Y - U)
    Y <- (1/rho) (I - (2/rho) D^T Phi D) X,   X = 2 D^T Y_S + rho (V + U),
         Phi = (I + (2/rho) D D^T)^{-1}
    U <- U - Y + V

and the last stage stops after the V-update, returning ``V``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .cube import HyperCube, MultiResCube
from .errors import DimensionMismatch, InvalidSpec, ShapeMismatch, SingularSystem
from .layers import DTYPE, RirDenoiser
from .prox import column_weight, prox_spectral_tv, spectral_tv_prox_torch
from .simulate import interp_matrix, spectral_upsample_init

STRATEGIES = ("mathematical", "hybrid", "learnable")


@dataclass(frozen=True)
class UnfoldConfig:
    stages: int = 4
    strategy: str = "learnable"
    rho: float = 1.0
    learn_rho: bool = True
    share_d: bool = True
    phi_mode: str = "learned"
    tv_weight: float = 1.0
    denoiser_blocks: int = 2
    denoiser_convs: int = 2
    tol: float = 1e-6

    @classmethod
    def mathematical(cls, **kw) -> "UnfoldConfig":
        base = dict(stages=20, strategy="mathematical", learn_rho=False, phi_mode="exact")
        base.update(kw)
        return cls(**base)

    @property
    def prox(self) -> str:
        return "denoiser" if self.strategy == "learnable" else "spectral_tv"

    def validate(self) -> None:
        if self.stages < 1:
            raise InvalidSpec("stages must be >= 1")
        if self.strategy not in STRATEGIES:
            raise InvalidSpec(f"strategy must be one of {STRATEGIES}")
        if not self.rho > 0:
            raise InvalidSpec("rho must be > 0")
        if self.phi_mode not in ("exact", "learned"):
            raise InvalidSpec("phi_mode must be 'exact' or 'learned'")
        if self.tv_weight < 0:
            raise InvalidSpec("tv_weight must be >= 0")


def xavier_srt(m_m: int, m: int, seed: int = 0) -> np.ndarray:
    """Zero-mean Gaussian with Xavier-normal variance ``2 / (M + M_m)``."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, math.sqrt(2.0 / (m + m_m)), size=(m_m, m))


def exact_phi(d: np.ndarray, rho: float) -> np.ndarray:
    """``(I + (2/rho) D D^T)^{-1}``, symmetrized."""
    if not rho > 0:
        raise SingularSystem("rho must be positive")
    mm = d.shape[0]
    phi = np.linalg.solve(np.eye(mm) + (2.0 / rho) * d @ d.T, np.eye(mm))
    return 0.5 * (phi + phi.T)


@dataclass
class UnfoldState:
    y_h: HyperCube
    u: HyperCube
    d: np.ndarray
    rho: float
    v: HyperCube | None = None
    phi_mode: str = "exact"
    phi: np.ndarray | None = None
    strategy: str = "mathematical"
    tv_weight: float = 0.0
    denoiser: RirDenoiser | None = None
    residuals: list[float] = field(default_factory=list)

    def current_phi(self) -> np.ndarray:
        if self.phi_mode == "exact" or self.phi is None:
            return exact_phi(self.d, self.rho)
        return 0.5 * (self.phi + self.phi.T)


def _as_cube(y_s) -> HyperCube:
    return y_s.cube if isinstance(y_s, MultiResCube) else y_s


def init_state(
    y_s,
    d: np.ndarray | None,
    cfg: UnfoldConfig,
    wavelengths_h,
    seed: int = 0,
    phi: np.ndarray | None = None,
    denoiser: RirDenoiser | None = None,
) -> UnfoldState:
    """``U = 0``, ``Y_H`` = spectral interpolation of ``Y_S``, ``D`` Xavier-normal if not given."""
    cfg.validate()
    cube = _as_cube(y_s)
    m = len(wavelengths_h)
    d = xavier_srt(cube.n_bands, m, seed) if d is None else np.asarray(d, dtype=float)
    if d.shape != (cube.n_bands, m):
        raise DimensionMismatch(f"D has shape {d.shape}, expected {(cube.n_bands, m)}")
    y0 = spectral_upsample_init(cube, wavelengths_h)
    zero = y0.with_data(np.zeros_like(y0.data))
    if cfg.phi_mode == "learned" and phi is None:
        phi = exact_phi(d, cfg.rho)
    return UnfoldState(
        y_h=y0,
        u=zero,
        d=d,
        rho=cfg.rho,
        phi_mode=cfg.phi_mode,
        phi=phi,
        strategy=cfg.strategy,
        tv_weight=cfg.tv_weight,
        denoiser=denoiser,
    )


def v_step(state: UnfoldState, y_prev: HyperCube | None = None, u_prev: HyperCube | None = None) -> HyperCube:
    """Proximal map of the regularizer applied to the noisy image ``Y - U``."""
    y_prev = state.y_h if y_prev is None else y_prev
    u_prev = state.u if u_prev is None else u_prev
    if y_prev.data.shape != u_prev.data.shape:
        raise ShapeMismatch("Y and U must share a shape")
    z = y_prev.with_data(y_prev.data - u_prev.data)
    if state.strategy == "learnable":
        if state.denoiser is None:
            raise InvalidSpec("learnable strategy needs a denoiser")
        from .prox import denoiser_rir_forward

        return denoiser_rir_forward(z, state.denoiser)
    return prox_spectral_tv(z, state.tv_weight / state.rho)


def _woodbury(d: np.ndarray, phi: np.ndarray, rho: float, y_s_flat: np.ndarray, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    x = 2.0 * d.T @ y_s_flat + rho * (v + u)
    return (x - (2.0 / rho) * (d.T @ (phi @ (d @ x)))) / rho


def y_step_closed_form(state: UnfoldState, y_s_flat: np.ndarray, v_new: HyperCube) -> HyperCube:
    """Data step via the matrix inversion lemma with the exact ``Phi``."""
    if not state.rho > 0:
        raise SingularSystem("rho must be positive")
    phi = exact_phi(state.d, state.rho)
    return v_new.with_data(_woodbury(state.d, phi, state.rho, np.asarray(y_s_flat), v_new.data, state.u.data))


def y_step_learned(state: UnfoldState, y_s_flat: np.ndarray, v_new: HyperCube) -> HyperCube:
    """Same two-track operator with a free symmetric ``Phi`` (raw parameter symmetrized)."""
    if state.phi is None:
        raise ShapeMismatch("learned Y-step needs a Phi parameter")
    mm = state.d.shape[0]
    if state.phi.shape != (mm, mm):
        raise ShapeMismatch(f"Phi has shape {state.phi.shape}, expected {(mm, mm)}")
    phi = 0.5 * (state.phi + state.phi.T)
    return v_new.with_data(_woodbury(state.d, phi, state.rho, np.asarray(y_s_flat), v_new.data, state.u.data))


def dual_update(u: HyperCube, y_new: HyperCube, v_new: HyperCube) -> HyperCube:
    if not (u.data.shape == y_new.data.shape == v_new.data.shape):
        raise ShapeMismatch("U, Y and V must share a shape")
    return u.with_data(u.data - y_new.data + v_new.data)


def constraint_residual(y: HyperCube, v: HyperCube) -> float:
    nv = np.linalg.norm(v.data)
    return float(np.linalg.norm(y.data - v.data) / nv) if nv > 0 else float(np.linalg.norm(y.data))


def run_stages(state: UnfoldState, y_s, stages: int, tol: float = 0.0) -> HyperCube:
    """Run ``stages`` unfolded iterations in place on ``state`` and return the final ``V``.

    With ``tol > 0`` the loop stops as soon as ``||Y - V||_F / ||V||_F <= tol``.
    """
    y_s_flat = _as_cube(y_s).data
    if y_s_flat.shape[0] != state.d.shape[0]:
        raise DimensionMismatch(f"Y_S has {y_s_flat.shape[0]} bands, D has {state.d.shape[0]} rows")
    learned = state.phi_mode == "learned" and state.strategy != "mathematical"
    for k in range(stages):
        state.v = v_step(state)
        if k == stages - 1:
            break
        y_new = (y_step_learned if learned else y_step_closed_form)(state, y_s_flat, state.v)
        state.u = dual_update(state.u, y_new, state.v)
        state.y_h = y_new
        r = constraint_residual(state.y_h, state.v)
        state.residuals.append(r)
        if tol > 0 and r <= tol:
            break
    return state.v


def run_unfolding(
    y_s,
    cfg: UnfoldConfig,
    params: "UnfoldNet | None" = None,
    *,
    d: np.ndarray | None = None,
    wavelengths_h=None,
    return_state: bool = False,
):
    """Super-resolve ``y_s`` spectrally.

    The mathematical strategy runs the numpy solver with the supplied ``d``;
    the other strategies evaluate a trained :class:`UnfoldNet` (``params``).
    """
    cfg.validate()
    cube = _as_cube(y_s)
    if params is not None:
        with torch.no_grad():
            ys = torch.as_tensor(np.array(cube.image()), dtype=DTYPE).unsqueeze(0)
            out = params(ys.to(params.dtype))
        wl = params.wavelengths_h
        return HyperCube.from_image(out[0].to(torch.float64).numpy(), wl)
    if cfg.strategy != "mathematical":
        raise InvalidSpec(f"strategy {cfg.strategy!r} needs trained parameters")
    if d is None or wavelengths_h is None:
        raise InvalidSpec("mathematical strategy needs D and the HSI wavelengths")
    state = init_state(cube, d, cfg, wavelengths_h)
    v = run_stages(state, cube, cfg.stages, cfg.tol)
    return (v, state) if return_state else v


# ---------------------------------------------------------------------------
# Trainable network
# ---------------------------------------------------------------------------


class UnfoldNet(nn.Module):
    """Batched torch version of the unfolding, trainable end to end.

    Input ``ys`` is (B, M_m, H, W); output is ``V^K`` as (B, M, H, W).
    """

    def __init__(
        self,
        cfg: UnfoldConfig,
        wavelengths_m,
        wavelengths_h,
        d0: np.ndarray | None = None,
        seed: int = 0,
        dtype=DTYPE,
    ):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        self.wavelengths_h = np.asarray(wavelengths_h, dtype=float)
        self.wavelengths_m = np.asarray(wavelengths_m, dtype=float)
        m, mm = len(self.wavelengths_h), len(self.wavelengths_m)
        self.m, self.mm = m, mm
        self.register_buffer("interp", torch.as_tensor(interp_matrix(wavelengths_m, wavelengths_h), dtype=dtype))
        d0 = xavier_srt(mm, m, seed) if d0 is None else np.array(d0, dtype=float)
        if d0.shape != (mm, m):
            raise DimensionMismatch(f"D has shape {d0.shape}, expected {(mm, m)}")
        log_rho = torch.tensor(math.log(cfg.rho), dtype=dtype)
        learned = cfg.strategy != "mathematical"
        if learned:
            n_d = 1 if cfg.share_d else cfg.stages - 1 or 1
            self.d = nn.ParameterList(nn.Parameter(torch.as_tensor(d0, dtype=dtype).clone()) for _ in range(n_d))
        else:
            self.register_buffer("d_fixed", torch.as_tensor(d0, dtype=dtype))
        if learned and cfg.learn_rho:
            self.log_rho = nn.Parameter(log_rho)
        else:
            self.register_buffer("log_rho", log_rho)
        if learned and cfg.phi_mode == "learned":
            self.phi_raw = nn.Parameter(torch.as_tensor(exact_phi(d0, cfg.rho), dtype=dtype))
        else:
            self.phi_raw = None
        if cfg.prox == "denoiser":
            gen = torch.Generator().manual_seed(seed + 1)
            self.denoisers = nn.ModuleList(
                RirDenoiser(m, cfg.denoiser_blocks, cfg.denoiser_convs, gen=gen, dtype=dtype)
                for _ in range(cfg.stages)
            )
        else:
            self.denoisers = None

    @property
    def rho(self) -> torch.Tensor:
        return torch.exp(self.log_rho)

    def stage_d(self, k: int) -> torch.Tensor:
        if self.cfg.strategy == "mathematical":
            return self.d_fixed
        return self.d[0] if len(self.d) == 1 else self.d[min(k, len(self.d) - 1)]

    def phi(self, d: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
        if self.phi_raw is not None:
            return 0.5 * (self.phi_raw + self.phi_raw.T)
        eye = torch.eye(d.shape[0], dtype=d.dtype)
        return torch.linalg.solve(eye + (2.0 / rho) * d @ d.T, eye)

    def init(self, ys: torch.Tensor) -> torch.Tensor:
        b, mm, h, w = ys.shape
        return torch.clamp(torch.einsum("ij,bjl->bil", self.interp, ys.reshape(b, mm, h * w)), 0.0, 1.0)

    def prox(self, k: int, z: torch.Tensor, rho: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, m, n = z.shape
        if self.denoisers is not None:
            return self.denoisers[k](z.reshape(b, m, h, w)).reshape(b, m, n)
        lam = self.cfg.tv_weight * column_weight(1.0, m, n) / rho
        return spectral_tv_prox_torch(z, lam)

    def forward(self, ys: torch.Tensor) -> torch.Tensor:
        b, mm, h, w = ys.shape
        if mm != self.mm:
            raise ShapeMismatch(f"input has {mm} bands, network expects {self.mm}")
        s = ys.reshape(b, mm, h * w)
        y = self.init(ys)
        u = torch.zeros_like(y)
        rho = self.rho
        v = y
        for k in range(self.cfg.stages):
            v = self.prox(k, y - u, rho, h, w)
            if k == self.cfg.stages - 1:
                break
            d = self.stage_d(k)
            phi = self.phi(d, rho)
            x = 2.0 * torch.einsum("ji,bjl->bil", d, s) + rho * (v + u)
            dx = torch.einsum("ij,bjl->bil", d, x)
            y = (x - (2.0 / rho) * torch.einsum("ji,bjl->bil", d, torch.einsum("ij,bjl->bil", phi, dx))) / rho
            u = u - y + v
        return v.reshape(b, self.m, h, w)
