"""Unfolding + fusion pipeline and its text configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from .cube import HyperCube, MultiResCube
from .errors import InvalidSpec, ShapeMismatch
from .fuse import FusionConfig, FusionNet
from .layers import DTYPE, param_count
from .unfold import UnfoldConfig, UnfoldNet


def _fmt_floats(xs) -> str:
    return ",".join(repr(float(x)) for x in xs)


@dataclass(frozen=True)
class PipelineConfig:
    wavelengths_h: tuple[float, ...]
    wavelengths_m: tuple[float, ...]
    res_class: tuple[str, ...]
    unfold: UnfoldConfig = field(default_factory=UnfoldConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    seed: int = 0

    @property
    def m(self) -> int:
        return len(self.wavelengths_h)

    @property
    def m_m(self) -> int:
        return len(self.wavelengths_m)

    @property
    def hr_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.res_class) if c == "HR"]

    def to_text(self) -> str:
        lines = [
            f"wavelengths_h = {_fmt_floats(self.wavelengths_h)}",
            f"wavelengths_m = {_fmt_floats(self.wavelengths_m)}",
            f"res_class = {','.join(self.res_class)}",
            f"seed = {self.seed}",
        ]
        lines += [f"unfold.{k} = {v}" for k, v in asdict(self.unfold).items()]
        lines += [f"fusion.{k} = {v}" for k, v in asdict(self.fusion).items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                if "=" not in line:
                    raise InvalidSpec(f"malformed config line {line!r}")
                k, v = (t.strip() for t in line.split("=", 1))
                kv[k] = v
        sub = {"unfold": ({}, UnfoldConfig), "fusion": ({}, FusionConfig)}
        for k, v in kv.items():
            if "." in k:
                prefix, name = k.split(".", 1)
                if prefix not in sub:
                    raise InvalidSpec(f"unknown config key {k!r}")
                sub[prefix][0][name] = v
            elif k not in ("wavelengths_h", "wavelengths_m", "res_class", "seed"):
                raise InvalidSpec(f"unknown config key {k!r}")
        out = {}
        for prefix, (raw, klass) in sub.items():
            known = {f.name for f in fields(klass)}
            extra = set(raw) - known
            if extra:
                raise InvalidSpec(f"unknown {prefix} keys {sorted(extra)}")
            typed = {}
            for f in fields(klass):
                if f.name in raw:
                    typed[f.name] = _coerce(raw[f.name], f.type)
            out[prefix] = klass(**typed)
        return cls(
            wavelengths_h=tuple(float(x) for x in kv["wavelengths_h"].split(",")),
            wavelengths_m=tuple(float(x) for x in kv["wavelengths_m"].split(",")),
            res_class=tuple(kv["res_class"].split(",")),
            unfold=out["unfold"],
            fusion=out["fusion"],
            seed=int(kv.get("seed", 0)),
        )


def _coerce(value: str, typ):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if name == "bool":
        if value not in ("True", "False"):
            raise InvalidSpec(f"bad boolean {value!r}")
        return value == "True"
    if name == "int":
        return int(value)
    if name == "float":
        return float(value)
    return value


class Pipeline(nn.Module):
    """``Y_S -> (Y~_H, Y*)``: unfolding followed by fusion."""

    def __init__(self, cfg: PipelineConfig, d0: np.ndarray | None = None, dtype=DTYPE):
        super().__init__()
        self.cfg = cfg
        self.unfold = UnfoldNet(cfg.unfold, cfg.wavelengths_m, cfg.wavelengths_h, d0=d0, seed=cfg.seed, dtype=dtype)
        self.fuse = FusionNet(cfg.m, len(cfg.hr_indices), cfg.fusion, seed=cfg.seed, dtype=dtype)
        self.hr_idx = cfg.hr_indices

    @property
    def dtype(self):
        return self.unfold.dtype

    def forward(self, ys: torch.Tensor):
        if ys.shape[1] != self.cfg.m_m:
            raise ShapeMismatch(f"input has {ys.shape[1]} bands, pipeline expects {self.cfg.m_m}")
        y_tilde = self.unfold(ys)
        y_star = self.fuse(y_tilde, ys[:, self.hr_idx])
        return y_tilde, y_star

    def n_params(self) -> int:
        return param_count(self)

    def superresolve(self, y_s: MultiResCube, fuse: bool = True) -> tuple[HyperCube, HyperCube]:
        """Inference on one cube; returns ``(Y~_H, Y*)``."""
        cube = y_s.cube
        if tuple(y_s.res_class) != tuple(self.cfg.res_class):
            raise ShapeMismatch(f"input resolution classes {y_s.res_class} != {self.cfg.res_class}")
        with torch.no_grad():
            ys = torch.as_tensor(np.array(cube.image()), dtype=self.dtype).unsqueeze(0)
            y_tilde, y_star = self(ys) if fuse else (self.unfold(ys), None)
        wl = np.asarray(self.cfg.wavelengths_h)
        yt = HyperCube.from_image(y_tilde[0].to(torch.float64).numpy(), wl)
        ystar = HyperCube.from_image(y_star[0].to(torch.float64).numpy(), wl) if y_star is not None else yt
        return yt, ystar
