"""Losses, gradient checks, ADAM and end-to-end training of the pipeline.

Gradients come from torch reverse mode; every parameter block is checked
against central finite differences (``pipeline_grad_check``) and each
primitive op has its own check in the ``grad_check`` registry.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .cube import HyperCube
from .errors import CheckpointError, DataEmpty, InvalidSpec, NonFinite, ShapeMismatch
from .layers import DTYPE, ReflectConv, ResBlock
from .pipeline import Pipeline, PipelineConfig
from .simulate import Pair

# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    """``l1(Y~_H) + l1(Y*) + lambda (TV_spec(Y~_H) + TV_spat(Y*))``.

    With ``normalize`` the l1 terms are divided by ``M * L`` and the batch
    terms are averaged; otherwise every term is summed over the batch.
    """

    lambda_: float = 1e-4
    normalize: bool = True

    def __post_init__(self):
        if not self.lambda_ >= 0:
            raise InvalidSpec("lambda must be >= 0")


def tv_spec_t(y: torch.Tensor) -> torch.Tensor:
    """Per-sample spectral TV of a (B, M, H, W) tensor."""
    b, m, h, w = y.shape
    return (y[:, 1:] - y[:, :-1]).abs().sum(dim=(1, 2, 3)) / (h * w * (m - 1))


def tv_spat_t(y: torch.Tensor) -> torch.Tensor:
    b, m, h, w = y.shape
    dh = (y[..., 1:] - y[..., :-1]).abs().sum(dim=(1, 2, 3))
    dv = (y[:, :, 1:] - y[:, :, :-1]).abs().sum(dim=(1, 2, 3))
    return (dh + dv) / (m * (h * (w - 1) + (h - 1) * w))


def loss_tensor(y_tilde: torch.Tensor, y_star: torch.Tensor, y_gt: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    if not (y_tilde.shape == y_star.shape == y_gt.shape):
        raise ShapeMismatch(f"loss inputs {tuple(y_tilde.shape)}, {tuple(y_star.shape)}, {tuple(y_gt.shape)}")
    l1 = (y_tilde - y_gt).abs().sum(dim=(1, 2, 3)) + (y_star - y_gt).abs().sum(dim=(1, 2, 3))
    if spec.normalize:
        l1 = l1 / y_gt[0].numel()
    per_sample = l1 + spec.lambda_ * (tv_spec_t(y_tilde) + tv_spat_t(y_star))
    return per_sample.mean() if spec.normalize else per_sample.sum()


def loss_total(y_h_tilde: HyperCube, y_star: HyperCube, y_gt: HyperCube, spec: LossSpec = LossSpec()) -> float:
    cubes = (y_h_tilde, y_star, y_gt)
    if len({(c.n_bands, c.height, c.width) for c in cubes}) != 1:
        raise ShapeMismatch("loss inputs must share a shape")
    t = [torch.as_tensor(np.array(c.image()), dtype=DTYPE).unsqueeze(0) for c in cubes]
    return float(loss_tensor(*t, spec))


# ---------------------------------------------------------------------------
# Finite-difference checks
# ---------------------------------------------------------------------------


def relative_errors(analytic: torch.Tensor, numeric: torch.Tensor) -> torch.Tensor:
    """``|a - n| / max(|a|, |n|, 1e-3 max|n|)`` per coordinate.

    The floor keeps coordinates whose true gradient is ~0 (e.g. behind a
    ReLU that is off for every sample) from dividing by rounding noise.
    """
    floor = max(1e-3 * float(numeric.abs().max()), 1e-12)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(floor, dtype=numeric.dtype))
    return (analytic - numeric).abs() / denom


def fd_check(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], eps: float = 1e-5,
             max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error of autograd vs central differences over ``tensors``.

    ``fn`` must evaluate a scalar from the current values of ``tensors``
    (leaf tensors with ``requires_grad``).
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for t in tensors:
            flat = t.data.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and idx.size > max_coords:
                idx = np.sort(rng.choice(idx, max_coords, replace=False))
            num = torch.empty(idx.size, dtype=t.dtype)
            for j, i in enumerate(idx):
                old = flat[i].item()
                flat[i] = old + eps
                fp = fn().item()
                flat[i] = old - eps
                fm = fn().item()
                flat[i] = old
                num[j] = (fp - fm) / (2 * eps)
            ana = t.grad.reshape(-1)[torch.as_tensor(idx)]
            worst = max(worst, float(relative_errors(ana, num).max()))
    return worst


def _op_fc_sigmoid(g, p):
    n = p.get("n", 5)
    w = torch.randn(n, n, generator=g, dtype=DTYPE, requires_grad=True)
    b = torch.randn(n, generator=g, dtype=DTYPE, requires_grad=True)
    x = torch.randn(3, n, generator=g, dtype=DTYPE)
    c = torch.randn(3, n, generator=g, dtype=DTYPE)
    return (lambda: (c * torch.sigmoid(x @ w.T + b)).sum()), [w, b]


def _op_relu(g, p):
    n = p.get("n", 20)
    x = torch.randn(n, generator=g, dtype=DTYPE)
    x = (x.sign() * (x.abs() + 0.1)).requires_grad_(True)  # |x| >= 0.1 >> eps
    c = torch.randn(n, generator=g, dtype=DTYPE)
    return (lambda: (c * F.relu(x)).sum()), [x]


def _op_conv3x3(g, p):
    conv = ReflectConv(p.get("c_in", 2), p.get("c_out", 3), 3, gen=g)
    x = torch.randn(1, conv.weight.shape[1], 5, 5, generator=g, dtype=DTYPE, requires_grad=True)
    c = torch.randn(1, conv.weight.shape[0], 5, 5, generator=g, dtype=DTYPE)
    return (lambda: (c * conv(x)).sum()), [conv.weight, conv.bias, x]


def _op_pool_replicate(g, p):
    x = torch.randn(1, 2, 4, 6, generator=g, dtype=DTYPE, requires_grad=True)
    c = torch.randn(1, 2, 4, 6, generator=g, dtype=DTYPE)

    def fn():
        up = F.avg_pool2d(x, 2).repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
        return (c * up).sum()

    return fn, [x]


def _woodbury_parts(g, p):
    mm, m, n = p.get("m_m", 3), p.get("m", 8), p.get("n", 5)
    d = torch.randn(mm, m, generator=g, dtype=DTYPE, requires_grad=True)
    log_rho = torch.tensor(math.log(p.get("rho", 1.5)), dtype=DTYPE, requires_grad=True)
    s = torch.randn(mm, n, generator=g, dtype=DTYPE)
    vu = torch.randn(m, n, generator=g, dtype=DTYPE)
    c = torch.randn(m, n, generator=g, dtype=DTYPE)
    return d, log_rho, s, vu, c


def _woodbury(d, rho, phi, s, vu):
    x = 2.0 * d.T @ s + rho * vu
    return (x - (2.0 / rho) * d.T @ (phi @ (d @ x))) / rho


def _exact_phi_t(d, rho):
    eye = torch.eye(d.shape[0], dtype=d.dtype)
    return torch.linalg.solve(eye + (2.0 / rho) * d @ d.T, eye)


def _op_woodbury_d(g, p):
    d, log_rho, s, vu, c = _woodbury_parts(g, p)

    def fn():
        rho = torch.exp(log_rho)
        return (c * _woodbury(d, rho, _exact_phi_t(d, rho), s, vu)).sum()

    return fn, [d]


def _op_woodbury_rho(g, p):
    d, log_rho, s, vu, c = _woodbury_parts(g, p)

    def fn():
        rho = torch.exp(log_rho)
        return (c * _woodbury(d, rho, _exact_phi_t(d, rho), s, vu)).sum()

    return fn, [log_rho]


def _op_woodbury_phi(g, p):
    d, log_rho, s, vu, c = _woodbury_parts(g, p)
    phi = _exact_phi_t(d.detach(), 1.5).contiguous().clone().requires_grad_(True)

    def fn():
        sym = 0.5 * (phi + phi.T)
        return (c * _woodbury(d, torch.exp(log_rho), sym, s, vu)).sum()

    return fn, [phi, d]


def _op_l1(g, p):
    x = torch.randn(3, 7, generator=g, dtype=DTYPE)
    x = (x.sign() * (x.abs() + 0.1)).requires_grad_(True)
    return (lambda: x.abs().sum()), [x]


def _op_tv_spec(g, p):
    x = torch.randn(1, 5, 3, 4, generator=g, dtype=DTYPE, requires_grad=True)
    return (lambda: tv_spec_t(x).sum()), [x]


def _op_tv_spat(g, p):
    x = torch.randn(1, 2, 4, 5, generator=g, dtype=DTYPE, requires_grad=True)
    return (lambda: tv_spat_t(x).sum()), [x]


GRAD_OPS: dict[str, Callable] = {
    "fc_sigmoid": _op_fc_sigmoid,
    "relu": _op_relu,
    "conv3x3": _op_conv3x3,
    "pool_replicate": _op_pool_replicate,
    "woodbury_d": _op_woodbury_d,
    "woodbury_rho": _op_woodbury_rho,
    "woodbury_phi": _op_woodbury_phi,
    "l1": _op_l1,
    "tv_spec": _op_tv_spec,
    "tv_spat": _op_tv_spat,
}


def grad_check(op_name: str, params: dict | None = None, eps: float = 1e-6) -> float:
    """Worst relative error of the op's analytic gradient vs central differences.

    ``params`` may carry ``seed`` and op-specific sizes.
    """
    params = params or {}
    if op_name not in GRAD_OPS:
        raise KeyError(f"unknown op {op_name!r}; known: {sorted(GRAD_OPS)}")
    g = torch.Generator().manual_seed(params.get("seed", 0))
    fn, tensors = GRAD_OPS[op_name](g, params)
    return fd_check(fn, tensors, eps)


def parameter_blocks(pipe: Pipeline) -> dict[str, list[torch.nn.Parameter]]:
    """Trainable parameters grouped as D, rho, Phi, denoiser, fusion (empty blocks dropped)."""
    blocks: dict[str, list] = {"D": [], "rho": [], "phi": [], "denoiser": [], "fusion": []}
    for name, p in pipe.named_parameters():
        if name.startswith("unfold.d."):
            blocks["D"].append(p)
        elif name == "unfold.log_rho":
            blocks["rho"].append(p)
        elif name == "unfold.phi_raw":
            blocks["phi"].append(p)
        elif name.startswith("unfold.denoisers."):
            blocks["denoiser"].append(p)
        elif name.startswith("fuse."):
            blocks["fusion"].append(p)
        else:
            raise KeyError(f"unclassified parameter {name}")
    return {k: v for k, v in blocks.items() if v}


def kink_margin(pipe: Pipeline, ys: torch.Tensor, y_gt: torch.Tensor) -> float:
    """Smallest distance to a non-differentiable point of the loss at this input.

    Covers every ReLU pre-activation, the l1 residuals and the TV differences.
    Finite differences are only trustworthy when this exceeds ``10 * eps``.
    """
    pre: list[torch.Tensor] = []
    hooks = []
    for mod in pipe.modules():
        if isinstance(mod, ResBlock):
            for conv in mod.convs[:-1]:
                hooks.append(conv.register_forward_hook(lambda m, i, o: pre.append(o.detach())))
    hooks.append(pipe.fuse.entry.register_forward_hook(lambda m, i, o: pre.append(o.detach())))
    try:
        with torch.no_grad():
            y_tilde, y_star = pipe(ys)
    finally:
        for h in hooks:
            h.remove()
    spec_diff = (y_tilde[:, 1:] - y_tilde[:, :-1]).abs()
    # exact zeros are merged runs of the TV prox; they stay merged under small perturbations
    spec_diff = spec_diff[spec_diff > 0]
    parts = pre + [
        y_tilde - y_gt,
        y_star - y_gt,
        y_star[..., 1:] - y_star[..., :-1],
        y_star[:, :, 1:] - y_star[:, :, :-1],
    ]
    if spec_diff.numel():
        parts.append(spec_diff)
    return min(float(t.abs().min()) for t in parts)


def toy_problem(unfold_cfg, eps: float = 1e-5, seed: int = 0, max_tries: int = 100):
    """2-band -> 6-band 4x4 pipeline with random data, redrawn until ``kink_margin > 10 eps``.

    Returns ``(pipeline, ys, y_gt, seed_used)``.
    """
    from .fuse import FusionConfig

    wl_h = tuple(np.linspace(400.0, 1000.0, 6).tolist())
    wl_m = (500.0, 800.0)
    for s in range(seed, seed + max_tries):
        g = torch.Generator().manual_seed(s)
        pc = PipelineConfig(wl_h, wl_m, ("HR", "HR"), unfold_cfg, FusionConfig(), seed=s)
        pipe = Pipeline(pc)
        ys = torch.rand(2, 2, 4, 4, generator=g, dtype=DTYPE)
        y_gt = torch.rand(2, 6, 4, 4, generator=g, dtype=DTYPE)
        if kink_margin(pipe, ys, y_gt) > 10 * eps:
            return pipe, ys, y_gt, s
    raise RuntimeError("no kink-free toy problem found")


def pipeline_grad_check(
    pipe: Pipeline,
    ys: torch.Tensor,
    y_gt: torch.Tensor,
    spec: LossSpec = LossSpec(),
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-block worst relative error of the loss gradient vs central differences."""

    def fn():
        y_tilde, y_star = pipe(ys)
        return loss_tensor(y_tilde, y_star, y_gt, spec)

    return {
        name: fd_check(fn, params, eps, max_coords, seed)
        for name, params in parameter_blocks(pipe).items()
    }


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    base_lr: float = 1e-4
    milestones: tuple[int, ...] = (30, 60, 90)
    gamma: float = 0.5

    @classmethod
    def for_params(cls, params, **kw) -> "OptimState":
        params = list(params)
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-indexed ``epoch``: halved once each milestone has passed."""
        return self.base_lr * self.gamma ** sum(epoch > e for e in self.milestones)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: OptimState, hyper: AdamHyper = AdamHyper()) -> list[torch.Tensor]:
    """One bias-corrected ADAM update; moments in ``state`` are updated in place."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer state must align")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFinite("non-finite gradient")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps))
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    milestones: tuple[int, ...] = (30, 60, 90)
    gamma: float = 0.5
    seed: int = 0
    val_fraction: float = 0.125
    lambda_: float = 1e-4
    normalize_loss: bool = True

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidSpec("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise InvalidSpec("lr must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise InvalidSpec("val_fraction must be in [0, 1)")

    @property
    def loss(self) -> LossSpec:
        return LossSpec(self.lambda_, self.normalize_loss)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    pipeline: Pipeline
    history: list[EpochRecord] = field(default_factory=list)
    optim: OptimState | None = None


def stack_pairs(pairs: Sequence[Pair], dtype=DTYPE) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.stack([torch.as_tensor(np.array(p.y_s.cube.image()), dtype=dtype) for p in pairs])
    yh = torch.stack([torch.as_tensor(np.array(p.y_h.image()), dtype=dtype) for p in pairs])
    return ys, yh


def fit_srt(pairs: Sequence[Pair]) -> np.ndarray:
    """Least-squares ``D`` with ``Y_S ~= D Y_H`` over all training pairs."""
    if not pairs:
        raise DataEmpty("no pairs to fit D")
    yh = np.concatenate([p.y_h.data for p in pairs], axis=1)
    ys = np.concatenate([p.y_s.cube.data for p in pairs], axis=1)
    return np.linalg.lstsq(yh.T, ys.T, rcond=None)[0].T


def pipeline_config_for(pair: Pair, unfold_cfg, fusion_cfg, seed: int = 0) -> PipelineConfig:
    return PipelineConfig(
        wavelengths_h=tuple(pair.y_h.wavelengths.tolist()),
        wavelengths_m=tuple(pair.y_s.cube.wavelengths.tolist()),
        res_class=tuple(pair.y_s.res_class),
        unfold=unfold_cfg,
        fusion=fusion_cfg,
        seed=seed,
    )


def evaluate_loss(pipe: Pipeline, ys, yh, spec: LossSpec, batch_size: int = 16) -> float:
    """Loss over a whole set, batched without gradients (NaN for an empty set)."""
    if len(ys) == 0:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(ys), batch_size):
            yt, yst = pipe(ys[i : i + batch_size])
            part = float(loss_tensor(yt, yst, yh[i : i + batch_size], spec))
            total += part * len(yt) if spec.normalize else part
    return total / len(ys) if spec.normalize else total


def train(
    pairs: Sequence[Pair],
    pcfg: PipelineConfig,
    tcfg: TrainConfig = TrainConfig(),
    *,
    val_pairs: Sequence[Pair] | None = None,
    d0: np.ndarray | None = None,
    log_path=None,
    checkpoint_path=None,
    verbose: bool = False,
) -> TrainResult:
    """Train every learnable parameter of a fresh pipeline on ``pairs``.

    Without ``val_pairs`` the last ``val_fraction`` of ``pairs`` is held out.
    History row 0 holds the losses before the first update. On a non-finite
    loss or gradient the parameters are rolled back to the end of the last
    good epoch, saved if ``checkpoint_path`` is set, and NonFinite is raised.
    """
    tcfg.validate()
    pairs = list(pairs)
    if not pairs:
        raise DataEmpty("training set is empty")
    if val_pairs is None:
        n_val = int(math.floor(len(pairs) * tcfg.val_fraction))
        if n_val and n_val < len(pairs):
            pairs, val_pairs = pairs[:-n_val], pairs[-n_val:]
        else:
            val_pairs = []
    torch.manual_seed(tcfg.seed)
    if d0 is None and pcfg.unfold.strategy == "mathematical":
        d0 = fit_srt(pairs)
    pipe = Pipeline(pcfg, d0=d0)
    ys, yh = stack_pairs(pairs, pipe.dtype)
    vys, vyh = stack_pairs(val_pairs, pipe.dtype) if val_pairs else (ys[:0], yh[:0])
    spec = tcfg.loss
    params = [p for p in pipe.parameters() if p.requires_grad]
    state = OptimState.for_params(params, base_lr=tcfg.lr, milestones=tcfg.milestones, gamma=tcfg.gamma)
    gen = torch.Generator().manual_seed(tcfg.seed)

    history = [EpochRecord(0, state.lr_at(1), evaluate_loss(pipe, ys, yh, spec), evaluate_loss(pipe, vys, vyh, spec))]
    good = {k: v.clone() for k, v in pipe.state_dict().items()}
    log = _open_log(log_path)
    _log_row(log, history[0])
    try:
        for epoch in range(1, tcfg.epochs + 1):
            lr = state.lr_at(epoch)
            order = torch.randperm(len(ys), generator=gen)
            total, count = 0.0, 0
            for i in range(0, len(ys), tcfg.batch_size):
                idx = order[i : i + tcfg.batch_size]
                yt, yst = pipe(ys[idx])
                loss = loss_tensor(yt, yst, yh[idx], spec)
                if not torch.isfinite(loss):
                    raise NonFinite(f"non-finite loss at epoch {epoch}")
                for p in params:
                    p.grad = None
                loss.backward()
                # a parameter the loss never reaches (e.g. the Y-step of a 1-stage net) has zero gradient
                grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in params]
                new = adam_step(params, grads, state, AdamHyper(lr=lr))
                with torch.no_grad():
                    for p, q in zip(params, new):
                        p.copy_(q)
                total += loss.item() * len(idx)
                count += len(idx)
            val = evaluate_loss(pipe, vys, vyh, spec)
            rec = EpochRecord(epoch, lr, total / count, val)
            history.append(rec)
            _log_row(log, rec)
            good = {k: v.clone() for k, v in pipe.state_dict().items()}
            if verbose:
                print(f"epoch {epoch:3d} lr {lr:.2e} train {rec.train_loss:.6f} val {rec.val_loss:.6f}")
    except NonFinite:
        pipe.load_state_dict(good)
        if checkpoint_path is not None:
            save_checkpoint(pipe, checkpoint_path)
        raise
    finally:
        if log is not None:
            log[0].close()
    if checkpoint_path is not None:
        save_checkpoint(pipe, checkpoint_path)
    return TrainResult(pipe, history, state)


def _open_log(path):
    if path is None:
        return None
    fh = open(path, "w", newline="")
    w = csv.writer(fh)
    w.writerow(["epoch", "lr", "train_loss", "val_loss"])
    return fh, w


def _log_row(log, rec: EpochRecord) -> None:
    if log is not None:
        log[1].writerow([rec.epoch, repr(rec.lr), repr(rec.train_loss), repr(rec.val_loss)])
        log[0].flush()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SPSRCKPT"
VERSION = 1


def save_checkpoint(pipe: Pipeline, path) -> Path:
    """Magic, version, config echo, then named float64 little-endian tensors."""
    path = Path(path)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = pipe.cfg.to_text().encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    sd = pipe.state_dict()
    buf.write(struct.pack("<I", len(sd)))
    for name, t in sd.items():
        enc = name.encode()
        arr = t.detach().to(torch.float64).numpy().astype("<f8")
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, dtype=DTYPE) -> Pipeline:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_cfg,) = struct.unpack("<I", take(4))
    cfg = PipelineConfig.from_text(bytes(take(n_cfg)).decode())
    (n_t,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_t):
        (n_name,) = struct.unpack("<H", take(2))
        name = bytes(take(n_name)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = torch.as_tensor(arr.copy(), dtype=dtype)
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    d0 = tensors.get("unfold.d_fixed", tensors.get("unfold.d.0"))
    pipe = Pipeline(cfg, d0=None if d0 is None else d0.to(torch.float64).numpy(), dtype=dtype)
    try:
        pipe.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint tensors do not match its config: {exc}") from exc
    return pipe
