"""Experiment pipeline: simulate observations, run the three methods, sweep lambda, write reports.

Methods:

* ``central``: the whole-image problem, one bound-constrained solve;
* ``independent``: every block solved alone, then blended with the weights;
* ``proposed``: blocks coupled by Douglas-Rachford consensus.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .consensus import DrConfig, ObjectiveParams, blend, initial_anchor, run_distributed
from .imaging import Region, as_image, chop, read_png, read_raw, write_png, write_raw
from .metrics import QualityReport, snr, ssim, write_reports
from .objective import LocalObjective, global_objective
from .operators import LocalBlurOperator, ShiftVariantOperator
from .partition import build_layout, build_weights, write_manifest
from .psf import PsfGrid, airy_psf, delta_psf, save_psf_grid, shift_variant_psf_grid, uniform_psf_grid
from .solver import SolverConfig, minimize

__all__ = [
    "METHODS",
    "ExperimentConfig",
    "Observation",
    "MethodResult",
    "synthetic_image",
    "splitmix64",
    "gaussian_noise",
    "load_reference",
    "simulate_observation",
    "make_layout",
    "block_psfs",
    "run_centralized",
    "run_independent",
    "run_proposed",
    "run_method",
    "score",
    "sweep_and_report",
]

log = logging.getLogger(__name__)

METHODS = ("central", "independent", "proposed")
PSF_KINDS = ("airy", "gaussian_grid", "delta")


def _default_lambdas():
    return tuple(float(v) for v in np.logspace(-4, -1, 7))


@dataclass(frozen=True)
class ExperimentConfig:
    reference: str = ""  # PNG or raw file; empty selects the synthetic test image
    synthetic_size: int = 256
    photon_max: float = 6000.0
    psf: str = "airy"
    psf_support: int = 63
    airy_radius: float = 6.0
    fwhm_center: tuple = (3.5, 3.5)
    fwhm_corner: tuple = (16.5, 10.5)
    simulation_grid: int = 9  # PSF grid used to blur in the gaussian_grid case
    noise_var: float = 400.0
    grid_rows: int = 2
    grid_cols: int = 2
    regime: str = "shift_invariant"
    overlap: int | None = None
    lambdas: tuple = field(default_factory=_default_lambdas)
    overlaps: tuple = ()  # optional overlap sweep
    delta: float = 100.0
    gamma: float = 1e-3
    rho: float = 1.0
    outer_iterations: int = 25
    inner_initial: int = 10
    inner_increment: int = 10
    central_budget: int = 1000
    seed: int = 0
    transport: str = "inprocess"
    output_dir: str = "out"
    pad_fast: bool = False

    def __post_init__(self):
        if self.psf not in PSF_KINDS:
            raise ValueError(f"psf must be one of {PSF_KINDS}, got {self.psf!r}")
        if not self.lambdas:
            raise ValueError("lambda list is empty")
        if any(v < 0 for v in self.lambdas):
            raise ValueError("lambda values must be nonnegative")
        positive = ("photon_max", "psf_support", "airy_radius", "delta", "gamma", "central_budget",
                    "outer_iterations", "grid_rows", "grid_cols", "synthetic_size", "simulation_grid")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise_var < 0:
            raise ValueError("noise variance must be nonnegative")
        if self.psf_support % 2 == 0:
            raise ValueError(f"PSF support must be odd, got {self.psf_support}")

    # -- text form: key=value lines -------------------------------------------------

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line without '=': {raw!r}")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return cls().with_overrides(values)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, values: dict) -> "ExperimentConfig":
        """Copy with fields replaced; string values are parsed by field type."""
        known = {f.name: f for f in dataclasses.fields(self)}
        parsed = {}
        for k, v in values.items():
            if k not in known:
                raise ValueError(f"unknown config key {k!r}")
            parsed[k] = _parse_value(getattr(self, k), k, v) if isinstance(v, str) else v
        return dataclasses.replace(self, **parsed)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(t)) if isinstance(t, float) else str(t) for t in v)
            elif v is None:
                v = ""
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @property
    def margin(self) -> int:
        return (self.psf_support - 1) // 2

    def dr_config(self) -> DrConfig:
        return DrConfig(self.gamma, self.rho, self.outer_iterations, self.inner_initial, self.inner_increment)

    def params(self, lam: float) -> ObjectiveParams:
        # sigma^2 = 0 has no likelihood weight; fall back to unit weights
        return ObjectiveParams(lam, self.delta, self.noise_var if self.noise_var > 0 else 1.0)


_INT_TUPLES = ("overlaps",)
_NONE_INT = ("overlap",)


def _parse_value(current, key, text):
    if key in _NONE_INT:
        return None if text in ("", "none", "None") else int(text)
    if key in _INT_TUPLES:
        return tuple(int(t) for t in text.split(",") if t.strip())
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {text!r}")
    if isinstance(current, tuple):
        return tuple(float(t) for t in text.split(",") if t.strip())
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


# -- inputs -------------------------------------------------------------------


def synthetic_image(size: int = 256) -> np.ndarray:
    """Deterministic structured test image in ``[0, 1]``: ramps, sharp shapes, textures, lines."""
    if size < 16:
        raise ValueError("synthetic image needs at least 16 pixels per side")
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    img = 0.25 + 0.25 * xx + 0.15 * yy + 0.05 * np.sin(2 * np.pi * (1.5 * xx + 0.5 * yy))

    def box(y0, x0, y1, x1):
        return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)

    img[box(0.12, 0.10, 0.40, 0.38)] = 0.85
    img[box(0.20, 0.18, 0.32, 0.30)] = 0.15
    disk = (yy - 0.70) ** 2 + (xx - 0.28) ** 2 < 0.16 ** 2
    img[disk] = 0.70
    ring = np.abs(np.hypot(yy - 0.70, xx - 0.28) - 0.08) < 0.015
    img[ring] = 0.30
    # grating with slowly varying frequency and a checkerboard patch
    grating = box(0.10, 0.55, 0.45, 0.90)
    img[grating] = 0.5 + 0.3 * np.sin(2 * np.pi * (12 + 10 * yy[grating]) * xx[grating])
    checker = box(0.58, 0.58, 0.88, 0.88)
    cells = (np.floor(yy * 40) + np.floor(xx * 40)) % 2
    img[checker] = np.where(cells[checker] > 0, 0.9, 0.45)
    # thin diagonal lines
    for k, level in ((0.0, 0.95), (0.04, 0.05)):
        line = np.abs((yy - xx) - (0.48 + k)) < 1.2 / size
        img[line & (yy > 0.45) & (yy < 0.95)] = level
    # smooth blob
    img += 0.2 * np.exp(-((yy - 0.50) ** 2 + (xx - 0.48) ** 2) / (2 * 0.05 ** 2))
    return np.clip(img, 0.02, 1.0)


_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)


def splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    """SplitMix64 output for ``state = seed + (counter + 1) * golden``, vectorized (wrapping uint64)."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (counters.astype(np.uint64) + np.uint64(1)) * _SM_GAMMA
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def gaussian_noise(shape, seed: int) -> np.ndarray:
    """Standard normal field from a counter-based generator.

    Pair ``k`` uses counters ``2k`` and ``2k+1``; each 64-bit output maps to the
    uniform ``((z >> 11) + 0.5) / 2^53`` and Box-Muller turns the pair into
    ``(r cos, r sin)``, filling the array in row-major order.
    """
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    z = splitmix64(seed, np.arange(2 * pairs, dtype=np.uint64))
    u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n].reshape(shape)


def load_reference(config: ExperimentConfig) -> np.ndarray:
    """Reference image on the estimate domain, scaled linearly so its maximum is the photon maximum."""
    if config.reference:
        path = Path(config.reference)
        img = read_raw(path) if path.suffix == ".raw" else read_png(path, 1.0)
    else:
        img = synthetic_image(config.synthetic_size)
    img = as_image(img)
    top = float(img.max())
    if top <= 0:
        raise ValueError("reference image has no positive pixels")
    if min(img.shape) <= config.psf_support:
        raise ValueError(f"reference {img.shape} is not larger than the PSF support {config.psf_support}")
    return img * (config.photon_max / top)


@dataclass
class Observation:
    observed: np.ndarray
    truth: np.ndarray  # estimate domain
    blurred: np.ndarray  # noiseless observation
    psf_grid: PsfGrid  # PSFs at the deblurring grid points
    operator: object  # the operator used to simulate


def make_layout(config: ExperimentConfig, observed_shape, overlap=None):
    ov = config.overlap if overlap is None else overlap
    return build_layout(observed_shape[0], observed_shape[1], config.grid_rows, config.grid_cols,
                        config.psf_support, config.regime, ov)


def _deblur_grid(config, layout) -> PsfGrid:
    if config.psf == "gaussian_grid":
        return shift_variant_psf_grid(layout.rows, layout.cols, layout.image_h, layout.image_w,
                                      config.psf_support, config.fwhm_center, config.fwhm_corner,
                                      grid_y=layout.grid_y, grid_x=layout.grid_x)
    psf = airy_psf(config.psf_support, config.airy_radius) if config.psf == "airy" else delta_psf(config.psf_support)
    return PsfGrid(tuple(tuple(psf for _ in range(layout.cols)) for _ in range(layout.rows)),
                   layout.grid_y, layout.grid_x)


def simulate_observation(config: ExperimentConfig, truth: np.ndarray | None = None) -> Observation:
    """Blur the reference (valid region) and add seeded white Gaussian noise of variance ``noise_var``."""
    truth = load_reference(config) if truth is None else as_image(truth)
    m = config.margin
    h, w = truth.shape[0] - 2 * m, truth.shape[1] - 2 * m
    if h < 1 or w < 1:
        raise ValueError(f"reference {truth.shape} too small for PSF support {config.psf_support}")
    if config.psf == "gaussian_grid":
        g = config.simulation_grid
        sim_layout = build_layout(h, w, g, g, config.psf_support, "smooth_variant")
        sim_grid = shift_variant_psf_grid(g, g, h, w, config.psf_support, config.fwhm_center, config.fwhm_corner)
        psfs = [sim_grid.at(b.row, b.col) for b in sim_layout.blocks]
        op = ShiftVariantOperator(sim_layout, psfs, build_weights(sim_layout))
    else:
        psf = airy_psf(config.psf_support, config.airy_radius) if config.psf == "airy" else delta_psf(config.psf_support)
        op = LocalBlurOperator(psf, truth.shape)
    if config.psf == "delta":
        # the identity kernel is an exact crop; the FFT path would add roundoff
        blurred = chop(truth, Region(m, m, h, w)).copy()
    else:
        blurred = op.apply(truth)
    observed = blurred + math.sqrt(config.noise_var) * gaussian_noise(blurred.shape, config.seed)
    layout = make_layout(config, observed.shape)
    return Observation(observed, truth, blurred, _deblur_grid(config, layout), op)


def block_psfs(layout, grid: PsfGrid) -> list:
    return [grid.at(b.row, b.col) for b in layout.blocks]


# -- methods ------------------------------------------------------------------


@dataclass
class MethodResult:
    method: str
    lam: float
    image: np.ndarray  # estimate domain
    report: QualityReport | None = None
    trace: object = None
    iterations: int = 0


def _uniform(psfs) -> bool:
    k0 = psfs[0].kernel
    return all(p is psfs[0] or np.array_equal(p.kernel, k0) for p in psfs)


def central_operator(config, observed_shape, psf_grid, pad_fast=False):
    """Whole-image operator: one FFT blur when all PSFs agree, else the interpolated composite."""
    layout = make_layout(config, observed_shape)
    psfs = block_psfs(layout, psf_grid)
    if _uniform(psfs):
        return LocalBlurOperator(psfs[0], layout.estimate_shape, pad_fast)
    return ShiftVariantOperator(layout, psfs, build_weights(layout), pad_fast)


def run_centralized(config: ExperimentConfig, observed, psf_grid, lam, budget=None, op=None):
    op = central_operator(config, observed.shape, psf_grid, config.pad_fast) if op is None else op
    p = config.params(lam)
    budget = config.central_budget if budget is None else budget

    def fun(x):
        return global_objective(observed, op, p.lam, p.delta, x, p.data_weight, p.isotropic)

    x0 = initial_anchor(observed, config.margin)
    x, rep = minimize(fun, x0, SolverConfig(max_iter=budget))
    return MethodResult("central", lam, x, iterations=rep.iterations)


def run_independent(config: ExperimentConfig, observed, psf_grid, lam, overlap=None):
    layout = make_layout(config, observed.shape, overlap)
    weights = build_weights(layout)
    psfs = block_psfs(layout, psf_grid)
    p = config.params(lam)
    u0 = initial_anchor(observed, layout.margin)
    xs = []
    for b, psf in zip(layout.blocks, psfs):
        op = LocalBlurOperator(psf, b.estimate.shape, config.pad_fast)
        obj = LocalObjective(chop(observed, b.observed), op, p.data_weight, p.lam, p.delta, isotropic=p.isotropic)
        x, _ = minimize(obj.eval, chop(u0, b.estimate), SolverConfig(max_iter=config.central_budget))
        xs.append(x)
    return MethodResult("independent", lam, blend(layout, weights, xs))


def run_proposed(config: ExperimentConfig, observed, psf_grid, lam, overlap=None, transport=None):
    layout = make_layout(config, observed.shape, overlap)
    psfs = block_psfs(layout, psf_grid)
    res = run_distributed(layout, observed, psfs, config.params(lam), config.dr_config(),
                          transport=transport or config.transport, pad_fast=config.pad_fast)
    return MethodResult("proposed", lam, res.image, trace=res.trace)


def run_method(method: str, config, observed, psf_grid, lam, **kw) -> MethodResult:
    if method == "central":
        return run_centralized(config, observed, psf_grid, lam)
    if method == "independent":
        return run_independent(config, observed, psf_grid, lam, **kw)
    if method == "proposed":
        return run_proposed(config, observed, psf_grid, lam, **kw)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def score(truth, estimate, margin, photon_max, method="", lam=0.0) -> QualityReport:
    """SNR and SSIM on the observed-domain crop of two estimate-domain images."""
    h, w = truth.shape[0] - 2 * margin, truth.shape[1] - 2 * margin
    crop = Region(margin, margin, h, w)
    a, b = chop(truth, crop), chop(estimate, crop)
    return QualityReport(method, float(lam), snr(a, b), ssim(a, b, photon_max))


# -- sweeps -------------------------------------------------------------------


def version_string() -> str:
    """``git describe``-style version, falling back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def inputs_hash(config: ExperimentConfig, truth: np.ndarray) -> str:
    h = hashlib.sha256()
    cfg = dataclasses.replace(config, output_dir="")
    h.update(cfg.to_text().encode())
    h.update(np.ascontiguousarray(truth, dtype="<f8").tobytes())
    return h.hexdigest()


def _lam_tag(lam: float) -> str:
    return f"{lam:.6g}"


def sweep_and_report(config: ExperimentConfig, methods=METHODS, obs: Observation | None = None) -> list:
    """Run every method at every lambda, writing images, traces, ``metrics.csv`` and ``manifest.txt``.

    With ``config.overlaps`` set, ``overlap.csv`` additionally records the
    independent and proposed methods at each overlap width.
    """
    if not config.lambdas:
        raise ValueError("lambda list is empty")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    out = Path(config.output_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    obs = simulate_observation(config) if obs is None else obs
    m = config.margin
    write_raw(out / "observed.raw", obs.observed)
    write_raw(out / "truth.raw", obs.truth)
    save_psf_grid(out / "psf_grid", obs.psf_grid)
    layout = make_layout(config, obs.observed.shape)
    write_manifest(out / "layout.txt", layout)
    (out / "config.txt").write_text(config.to_text())

    reports = [score(obs.truth, initial_anchor(obs.observed, m), m, config.photon_max, "observed", 0.0)]
    images = []
    central_op = central_operator(config, obs.observed.shape, obs.psf_grid, config.pad_fast) if "central" in methods else None
    for lam in config.lambdas:
        for method in methods:
            if method == "central":
                res = run_centralized(config, obs.observed, obs.psf_grid, lam, op=central_op)
            else:
                res = run_method(method, config, obs.observed, obs.psf_grid, lam)
            rep = score(obs.truth, res.image, m, config.photon_max, method, lam)
            reports.append(rep)
            name = f"images/{method}_lam{_lam_tag(lam)}.raw"
            write_raw(out / name, res.image)
            images.append(name)
            if res.trace is not None:
                res.trace.write_csv(out / "traces" / f"{method}_lam{_lam_tag(lam)}.csv")
                res.trace.write_timing_csv(out / "traces" / f"{method}_lam{_lam_tag(lam)}_timing.csv")
            log.info("%s lam=%g: SNR %.4f dB, SSIM %.4f", method, lam, rep.snr_db, rep.ssim)
    write_reports(out / "metrics.csv", reports)

    if config.overlaps:
        rows = []
        for ov in config.overlaps:
            for lam in config.lambdas:
                for method in ("independent", "proposed"):
                    if method not in methods:
                        continue
                    res = run_method(method, config, obs.observed, obs.psf_grid, lam, overlap=ov)
                    rep = score(obs.truth, res.image, m, config.photon_max, method, lam)
                    rows.append((ov, rep))
        with open(out / "overlap.csv", "w") as fh:
            fh.write("overlap,method,lambda,snr_db,ssim\n")
            for ov, r in rows:
                fh.write(f"{ov},{r.method},{r.lam!r},{r.snr_db!r},{r.ssim!r}\n")

    manifest = {
        "version": version_string(),
        "seed": config.seed,
        "inputs_sha256": inputs_hash(config, obs.truth),
        "methods": list(methods),
        "lambdas": [float(v) for v in config.lambdas],
        "images": images,
    }
    (out / "manifest.txt").write_text(
        "\n".join(f"{k}={json.dumps(v) if isinstance(v, list) else v}" for k, v in manifest.items()) + "\n"
    )
    return reports


def write_observation(out, config: ExperimentConfig, obs: Observation) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_raw(out / "observed.raw", obs.observed)
    write_raw(out / "truth.raw", obs.truth)
    write_png(out / "observed.png", obs.observed, config.photon_max)
    write_png(out / "truth.png", obs.truth, config.photon_max)
    save_psf_grid(out / "psf_grid", obs.psf_grid)
    (out / "config.txt").write_text(config.to_text())
