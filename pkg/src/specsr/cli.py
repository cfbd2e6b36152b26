"""Command-line interface: simulate, train, superresolve, unmix, evaluate, bench.

Every parameter is a ``key``: it can come from ``--config FILE`` (``key =
value`` lines) and be overridden by ``--key value``. The fully resolved
configuration is echoed on stdout. Exit codes: 0 ok, 2 configuration
error, 3 I/O error, 4 environment (noisy benchmark machine), 1 other.
"""

from __future__ import annotations

import argparse
import csv
import io
import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import (
    CheckpointError,
    DimensionMismatch,
    HeaderParse,
    InvalidSpec,
    MissingHrBands,
    PayloadSizeMismatch,
    ShapeMismatch,
    SpecSRError,
    UnsupportedInterleave,
)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_IO, EXIT_ENV = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v: str) -> tuple[int, ...]:
    return tuple(int(t) for t in str(v).replace(" ", "").split(",") if t)


@dataclass(frozen=True)
class Key:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str


COMMON = [
    Key("seed", int, 0, "master random seed"),
    Key("deterministic", _bool, False, "force ordered reductions / deterministic kernels"),
    Key("threads", int, 0, "cap on internal threads (0 = all cores)"),
]

SCENE = [
    Key("width", int, 24, "scene width in pixels (multiple of 6)"),
    Key("height", int, 24, "scene height in pixels (multiple of 6)"),
    Key("bands_h", int, 32, "hyperspectral band count M"),
    Key("bands_m", int, 6, "multispectral band count M_m (6 or 12)"),
    Key("n_sources", int, 4, "endmembers per scene"),
    Key("noise_sigma", float, 0.0, "additive Gaussian noise on the HSI"),
    Key("library_size", int, 8, "shared material library size (0 = free random spectra)"),
    Key("library_jitter", float, 0.03, "per-scene smooth jitter of library spectra"),
    Key("blur_sigma", float, 1.0, "Gaussian blur before MED/LOW decimation"),
]

MODEL = [
    Key("strategy", str, "learnable", "mathematical | hybrid | learnable"),
    Key("stages", int, 4, "unfolded stages K"),
    Key("rho", float, 1.0, "initial ADMM penalty"),
    Key("learn_rho", _bool, True, "train rho"),
    Key("share_d", _bool, True, "one D for every stage"),
    Key("phi_mode", str, "learned", "exact | learned"),
    Key("tv_weight", float, 1.0, "spectral TV weight for the TV prox"),
    Key("denoiser_blocks", int, 2, "residual blocks per denoiser"),
    Key("denoiser_convs", int, 2, "convolutions per residual block"),
    Key("res_blocks", int, 2, "fusion residual blocks"),
    Key("spectral_attention", _bool, True, "use the spectral attention weights"),
    Key("spatial_attention", _bool, True, "use the spatial attention weights"),
]

TRAIN = [
    Key("n_pairs", int, 64, "training pairs"),
    Key("n_val", int, 8, "validation pairs"),
    Key("epochs", int, 60, "training epochs"),
    Key("batch_size", int, 8, "batch size"),
    Key("lr", float, 1e-3, "base learning rate"),
    Key("milestones", _int_list, (30, 60, 90), "epochs after which lr is halved"),
    Key("lambda", float, 1e-4, "TV loss weight"),
]

COMMANDS: dict[str, dict[str, Any]] = {
    "simulate": dict(
        help="generate a synthetic (MSI, HSI) pair",
        keys=SCENE + [Key("out", str, None, "output directory")],
        required=("out",),
    ),
    "train": dict(
        help="train the pipeline on synthetic pairs",
        keys=SCENE + MODEL + TRAIN + [Key("out", str, None, "output directory")],
        required=("out",),
    ),
    "superresolve": dict(
        help="spectrally super-resolve a multi-resolution MSI",
        keys=[
            Key("input", str, None, "multi-resolution MSI (.hdr)"),
            Key("out", str, None, "output HSI path (.hdr)"),
            Key("checkpoint", str, "", "trained checkpoint"),
            Key("strategy", str, "", "set to 'mathematical' to run without a checkpoint"),
            Key("srt", str, "", "SRT matrix CSV (mathematical mode without checkpoint)"),
            Key("stages", int, 20, "stages for the mathematical mode"),
            Key("rho", float, 1.0, "ADMM penalty for the mathematical mode"),
            Key("tv_weight", float, 1.0, "spectral TV weight for the mathematical mode"),
        ],
        required=("input", "out"),
    ),
    "unmix": dict(
        help="MDL + VCA + FCLS unmixing of a cube",
        keys=[
            Key("input", str, None, "input cube (.hdr)"),
            Key("out", str, None, "output directory"),
            Key("n_sources", int, 0, "number of sources (0 = estimate by MDL)"),
            Key("n_max", int, 15, "largest order considered by MDL"),
        ],
        required=("input", "out"),
    ),
    "evaluate": dict(
        help="PSNR / SAM / RMSE / SSIM of a cube against a reference",
        keys=[
            Key("input", str, None, "reconstructed cube (.hdr)"),
            Key("reference", str, None, "reference cube (.hdr)"),
            Key("csv", str, "", "write the metric row to this CSV"),
            Key("sam_map", str, "", "write the SAM map cube here"),
        ],
        required=("input", "reference"),
    ),
    "bench": dict(
        help="runtime scaling of the inference core versus pixel count",
        keys=[
            Key("sizes", _int_list, (64, 128, 256, 512), "square image sides"),
            Key("reps", int, 3, "repetitions per size"),
            Key("strategy", str, "learnable", "mathematical | hybrid | learnable"),
            Key("stages", int, 4, "unfolded stages"),
            Key("bands_h", int, 32, "hyperspectral band count"),
            Key("bands_m", int, 6, "multispectral band count"),
            Key("max_cv", float, 0.5, "fail (exit 4) if std/median exceeds this"),
            Key("out", str, "", "write the report CSV here"),
        ],
        required=(),
    ),
}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specsr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"], description=spec["help"])
        p.add_argument("--config", default=None, help="key = value file; flags override it")
        for key in COMMON + spec["keys"]:
            dflt = key.default if not isinstance(key.default, tuple) else ",".join(map(str, key.default))
            p.add_argument(f"--{key.name}", dest=key.name, default=None, metavar=key.type.__name__.lstrip("_").upper(),
                           help=f"{key.help} (default: {dflt})")
    return parser


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {line!r}")
        k, v = (t.strip() for t in line.split("=", 1))
        out[k] = v
    return out


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults < config file < flags, with type conversion."""
    keys = {k.name: k for k in COMMON + COMMANDS[command]["keys"]}
    raw: dict[str, Any] = {}
    if ns.config:
        try:
            text = Path(ns.config).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {ns.config}: {exc}") from exc
        file_kv = parse_config_text(text)
        unknown = sorted(set(file_kv) - set(keys))
        if unknown:
            raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
        raw.update(file_kv)
    for name in keys:
        v = getattr(ns, name, None)
        if v is not None:
            raw[name] = v
    cfg = {}
    for name, key in keys.items():
        if name in raw:
            try:
                cfg[name] = key.type(raw[name])
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}: {exc}") from exc
        else:
            cfg[name] = key.default
    missing = [k for k in COMMANDS[command]["required"] if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    return cfg


def format_config(cfg: dict[str, Any]) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(map(str, v))
        return str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items())


def tune_allocator() -> bool:
    """Keep large tensor buffers on the glibc heap instead of fresh mmaps.

    Without this every large temporary is a new mapping that is zero-filled
    page by page, which adds a size-dependent system-time cost. Returns
    False where glibc's ``mallopt`` is unavailable.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    m_trim_threshold, m_top_pad, m_mmap_max = -1, -2, -4
    ok = libc.mallopt(m_mmap_max, 0) == 1
    ok &= libc.mallopt(m_trim_threshold, 2**31 - 1) == 1
    ok &= libc.mallopt(m_top_pad, 64 * 2**20) == 1
    return bool(ok)


def apply_runtime(cfg: dict[str, Any]) -> None:
    import torch

    if cfg["threads"] > 0:
        torch.set_num_threads(cfg["threads"])
        try:
            import numba

            numba.set_num_threads(min(cfg["threads"], numba.config.NUMBA_NUM_THREADS))
        except (ImportError, ValueError):
            pass
    if cfg["deterministic"]:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg["seed"])


def _require_file(path: str) -> Path:
    p = Path(path)
    if p.suffix == "":
        p = p.with_suffix(".hdr")
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    return p


def _prepare_out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _scene_spec(cfg, seed):
    from .simulate import SceneSpec

    spec = SceneSpec(
        width=cfg["width"], height=cfg["height"], bands_h=cfg["bands_h"], bands_m=cfg["bands_m"],
        n_sources=cfg["n_sources"], seed=seed, noise_sigma=cfg["noise_sigma"],
        library_size=cfg["library_size"], library_jitter=cfg["library_jitter"],
    )
    spec.validate()
    return spec


def cmd_simulate(cfg) -> int:
    from .cube import write_envi, write_multires, write_srt_csv
    from .simulate import gaussian_srt, make_pair, sensor_for

    spec = _scene_spec(cfg, cfg["seed"])
    out = _prepare_out_dir(cfg["out"])
    bands = sensor_for(spec.bands_m)
    pair = make_pair(spec, bands, blur_sigma=cfg["blur_sigma"])
    write_envi(pair.y_h, out / "hsi")
    write_multires(pair.y_s, out / "msi")
    write_srt_csv(gaussian_srt(pair.y_h.wavelengths, bands), out / "srt.csv")
    (out / "config.txt").write_text(format_config(cfg))
    print(f"wrote {out / 'hsi.hdr'}, {out / 'msi.hdr'}, {out / 'srt.csv'}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    from .fuse import FusionConfig
    from .learn import TrainConfig, pipeline_config_for, train
    from .simulate import make_dataset, sensor_for
    from .unfold import UnfoldConfig

    out = _prepare_out_dir(cfg["out"])
    bands = sensor_for(cfg["bands_m"])
    pairs = make_dataset(cfg["n_pairs"], _scene_spec(cfg, cfg["seed"]), cfg["blur_sigma"], bands)
    val = make_dataset(cfg["n_val"], _scene_spec(cfg, cfg["seed"] + 100_000), cfg["blur_sigma"], bands)
    ucfg = UnfoldConfig(
        stages=cfg["stages"], strategy=cfg["strategy"], rho=cfg["rho"], learn_rho=cfg["learn_rho"],
        share_d=cfg["share_d"], phi_mode=cfg["phi_mode"], tv_weight=cfg["tv_weight"],
        denoiser_blocks=cfg["denoiser_blocks"], denoiser_convs=cfg["denoiser_convs"],
    )
    ucfg.validate()
    fcfg = FusionConfig(cfg["res_blocks"], cfg["spectral_attention"], cfg["spatial_attention"])
    tcfg = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], milestones=cfg["milestones"],
        seed=cfg["seed"], val_fraction=0.0, lambda_=cfg["lambda"],
    )
    pcfg = pipeline_config_for(pairs[0], ucfg, fcfg, seed=cfg["seed"])
    res = train(pairs, pcfg, tcfg, val_pairs=val or None, log_path=out / "train_log.csv",
                checkpoint_path=out / "model.ckpt")
    (out / "config.txt").write_text(format_config(cfg))
    last = res.history[-1]
    print(f"epochs = {last.epoch}, train_loss = {last.train_loss!r}, val_loss = {last.val_loss!r}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'train_log.csv'}")
    return EXIT_OK


def cmd_superresolve(cfg) -> int:
    from .cube import read_multires, read_srt_csv, write_envi
    from .learn import load_checkpoint
    from .simulate import hsi_wavelengths
    from .unfold import UnfoldConfig, run_unfolding

    tune_allocator()
    y_s = read_multires(_require_file(cfg["input"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg["checkpoint"]:
        pipe = load_checkpoint(_require_ckpt(cfg["checkpoint"]))
        if y_s.cube.n_bands != pipe.cfg.m_m or tuple(y_s.res_class) != tuple(pipe.cfg.res_class):
            raise ShapeMismatch(
                f"checkpoint expects {pipe.cfg.m_m} bands {','.join(pipe.cfg.res_class)}; "
                f"input has {y_s.cube.n_bands} bands {','.join(y_s.res_class)}"
            )
        t0 = time.perf_counter()
        _, y_star = pipe.superresolve(y_s)
        elapsed = time.perf_counter() - t0
    elif cfg["strategy"] == "mathematical":
        if not cfg["srt"]:
            raise ConfigError("mathematical mode without a checkpoint needs --srt")
        srt = read_srt_csv(_require_any(cfg["srt"]))
        if srt.d.shape[0] != y_s.cube.n_bands:
            raise DimensionMismatch(f"SRT has {srt.d.shape[0]} rows, input has {y_s.cube.n_bands} bands")
        ucfg = UnfoldConfig.mathematical(stages=cfg["stages"], rho=cfg["rho"], tv_weight=cfg["tv_weight"])
        t0 = time.perf_counter()
        y_star = run_unfolding(y_s, ucfg, d=srt.d, wavelengths_h=hsi_wavelengths(srt.d.shape[1]))
        elapsed = time.perf_counter() - t0
    else:
        raise ConfigError("give --checkpoint, or --strategy mathematical with --srt")
    write_envi(y_star, out.with_suffix("") if out.suffix == ".hdr" else out)
    print(f"time_s = {elapsed:.6f}, pixels = {y_star.n_pixels}")
    return EXIT_OK


def _require_ckpt(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


def _require_any(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    return p


def cmd_unmix(cfg) -> int:
    from .bss import export_unmix, unmix
    from .cube import read_envi

    y = read_envi(_require_file(cfg["input"]))
    out = _prepare_out_dir(cfg["out"])
    res = unmix(y, cfg["n_sources"] or None, seed=cfg["seed"], n_max=cfg["n_max"])
    export_unmix(res, y, out)
    print(f"n_sources = {res.n_sources}")
    print("pixel_indices = " + ",".join(map(str, res.indices)))
    return EXIT_OK


def cmd_evaluate(cfg) -> int:
    from .cube import read_envi
    from .metrics import evaluate

    x = read_envi(_require_file(cfg["input"]))
    ref = read_envi(_require_file(cfg["reference"]))
    rep = evaluate(x, ref)
    sys.stdout.write(rep.to_table())
    sys.stdout.write(rep.to_csv())
    if cfg["csv"]:
        Path(cfg["csv"]).write_text(rep.to_csv())
    if cfg["sam_map"]:
        rep.write_sam_map(cfg["sam_map"])
    return EXIT_OK


@dataclass
class BenchReport:
    pixels: list[int]
    medians: list[float]
    cvs: list[float]
    reps: int
    slope: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pixels", "reps", "median_s", "cv"])
        for p, m, c in zip(self.pixels, self.medians, self.cvs):
            w.writerow([p, self.reps, f"{m:.6f}", f"{c:.4f}"])
        return buf.getvalue() + f"# log-log slope = {self.slope:.4f}\n"


def run_bench(sizes, reps: int, strategy: str = "learnable", stages: int = 4, bands_h: int = 32,
              bands_m: int = 6, seed: int = 0) -> BenchReport:
    """Median inference time of the unfold+fuse core per image size (I/O excluded)."""
    import torch

    from .fuse import FusionConfig
    from .pipeline import Pipeline, PipelineConfig
    from .simulate import gaussian_srt, hsi_wavelengths, sensor_for
    from .unfold import UnfoldConfig

    if len(set(sizes)) < 3:
        raise ConfigError("bench needs at least 3 distinct sizes")
    bands = sensor_for(bands_m)
    wl_h = hsi_wavelengths(bands_h)
    ucfg = UnfoldConfig(stages=stages, strategy=strategy)
    if strategy == "mathematical":
        ucfg = UnfoldConfig.mathematical(stages=stages)
    pcfg = PipelineConfig(tuple(wl_h.tolist()), tuple(b.center for b in bands), tuple(b.res for b in bands),
                          ucfg, FusionConfig(), seed)
    pipe = Pipeline(pcfg, d0=gaussian_srt(wl_h, bands).d)
    gen = torch.Generator().manual_seed(seed)
    pixels, medians, cvs = [], [], []
    with torch.no_grad():
        warm = torch.rand(1, bands_m, 24, 24, generator=gen, dtype=pipe.dtype)
        pipe(warm)
        for s in sizes:
            x = torch.rand(1, bands_m, s, s, generator=gen, dtype=pipe.dtype)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                pipe(x)
                times.append(time.perf_counter() - t0)
            med = statistics.median(times)
            pixels.append(s * s)
            medians.append(med)
            cvs.append(statistics.pstdev(times) / med if reps > 1 else 0.0)
    slope = float(np.polyfit(np.log(pixels), np.log(medians), 1)[0])
    return BenchReport(pixels, medians, cvs, reps, slope)


def cmd_bench(cfg) -> int:
    tune_allocator()
    rep = run_bench(cfg["sizes"], cfg["reps"], cfg["strategy"], cfg["stages"], cfg["bands_h"], cfg["bands_m"],
                    cfg["seed"])
    text = rep.to_csv()
    sys.stdout.write(text)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text)
    if max(rep.cvs) > cfg["max_cv"]:
        print(f"timing too noisy: max std/median = {max(rep.cvs):.3f} > {cfg['max_cv']}", file=sys.stderr)
        return EXIT_ENV
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "superresolve": cmd_superresolve,
    "unmix": cmd_unmix,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}

CONFIG_ERRORS = (ConfigError, InvalidSpec, ShapeMismatch, DimensionMismatch, MissingHrBands)
IO_ERRORS = (OSError, HeaderParse, PayloadSizeMismatch, UnsupportedInterleave, CheckpointError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for bad flags
        return int(exc.code or 0)
    try:
        cfg = resolve(ns.command, ns)
        sys.stdout.write(f"# {ns.command}: resolved config\n" + format_config(cfg))
        apply_runtime(cfg)
        return HANDLERS[ns.command](cfg)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IO_ERRORS as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SpecSRError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


def entry() -> None:  # console script
    sys.exit(main())


if __name__ == "__main__":
    entry()
