"""Deterministic synthetic stand-in for a full-wave simulator.

A design is turned into a small damped 2D wave system whose per-cell wave
speed is higher under metal than over bare substrate.  The port is a
distributed functional concentrated on patch 1: the excitation and the
"voltage" readout use the displacement field weighted by a blurred patch-1
footprint, the "current" readout uses the same weights on the velocity
field.  Input impedance is their ratio, and S11 follows from the usual
reflection formula.

This is NOT an electromagnetic model.  It is a genuine linear PDE (so the
Fourier/rationality results hold exactly) that reacts smoothly to geometry.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .czp import LOG_FLOOR, CZPModel, FrequencyResponse, czp_from_rational, s11_from_impedance
from .errors import CZPError, InvalidArgument, OracleError
from .geometry import DesignSpace, DesignVector, rasterize_rectangles, sample_design
from .linsys import LinearSystem, SpectralDecomposition, build_field_2d, eigendecompose
from .spectral import (ComplexSpectrum, FrequencyGrid, RationalFunction, analytic_fourier_single_sided,
                       canonical_grid, exact_rational, transfer_function)

ORACLE_VERSION = "wave2d-1"


@dataclass(frozen=True)
class OracleConfig:
    raster_res: int = 1            # physics cells per mm
    supersample: int = 10          # sub-cell raster used to compute coverage
    blur_sigma_mm: float = 1.0     # smoothing of the material/port maps
    metal_speed: float = 3.0
    substrate_speed: float = 1.0
    damping: float = 0.3
    z0: float = 50.0
    impedance_scale: float = 250.0
    omega_per_ghz: float = 0.3     # model angular frequency = omega_per_ghz * f[GHz]
    floor: float = LOG_FLOOR
    grid: tuple = field(default_factory=lambda: tuple(canonical_grid().values.tolist()))
    version: str = ORACLE_VERSION

    def __post_init__(self):
        if self.damping <= 0:
            raise InvalidArgument("damping must be positive")
        if self.raster_res < 1 or self.supersample < 1:
            raise InvalidArgument("raster_res and supersample must be >= 1")
        if min(self.metal_speed, self.substrate_speed, self.z0, self.impedance_scale,
               self.omega_per_ghz) <= 0:
            raise InvalidArgument("speeds, z0, impedance_scale and omega_per_ghz must be positive")
        object.__setattr__(self, "grid", tuple(float(v) for v in self.grid))

    @property
    def frequency_grid(self) -> FrequencyGrid:
        return FrequencyGrid(np.array(self.grid), "GHz")

    @property
    def omega_grid(self) -> FrequencyGrid:
        return FrequencyGrid(self.omega_per_ghz * np.array(self.grid), "rad")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OracleConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "grid" in known:
            known["grid"] = tuple(known["grid"])
        return cls(**known)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class OracleSystem:
    """Everything the oracle computes before forming the response."""
    system: LinearSystem
    spectral: SpectralDecomposition
    initial: np.ndarray
    b_v: np.ndarray
    b_i: np.ndarray
    port_weights: np.ndarray
    cfg: OracleConfig

    def impedance(self) -> ComplexSpectrum:
        phi = analytic_fourier_single_sided(self.spectral, self.initial, self.cfg.omega_grid)
        return transfer_function(self.b_v, self.b_i, phi)

    def s11_functionals(self) -> tuple[np.ndarray, np.ndarray]:
        """(numerator, denominator) functionals with S11 = num.phi / den.phi."""
        r = self.cfg.z0
        return self.b_v - r * self.b_i, self.b_v + r * self.b_i


def _coverage(rects, space: DesignSpace, cfg: OracleConfig) -> np.ndarray:
    ss = cfg.raster_res * cfg.supersample
    if len(rects) == 0:
        h, w = int(round(space.height * ss)), int(round(space.width * ss))
        cov = np.zeros((h, w))
    else:
        cov = rasterize_rectangles(rects, space.width, space.height, ss).channels.max(axis=0)
    cov = gaussian_filter(cov, cfg.blur_sigma_mm * ss, mode="constant")
    h, w = cov.shape
    f = cfg.supersample
    return cov.reshape(h // f, f, w // f, f).mean(axis=(1, 3))


def build_oracle_system(space: DesignSpace, rects, port_rect, cfg: OracleConfig) -> OracleSystem:
    """Assemble the field system for arbitrary metal rectangles and a port
    footprint rectangle (all in mm)."""
    rects = np.asarray(rects, float).reshape(-1, 4)
    cov = _coverage(rects, space, cfg)
    speed = cfg.substrate_speed + (cfg.metal_speed - cfg.substrate_speed) * cov
    system = build_field_2d(speed, cfg.damping, 1.0 / cfg.raster_res)
    wt = _coverage(np.asarray(port_rect, float).reshape(1, 4), space, cfg).ravel()
    total = wt.sum()
    if total <= 0:
        raise OracleError("port footprint does not overlap the substrate")
    wt = wt / total
    zeros = np.zeros_like(wt)
    b_v = np.concatenate([-cfg.impedance_scale * wt, zeros])
    b_i = np.concatenate([zeros, wt])
    initial = np.concatenate([wt, zeros])
    spec = eigendecompose(system)
    return OracleSystem(system, spec, initial, b_v, b_i, wt, cfg)


def oracle_system(space: DesignSpace, design: DesignVector, cfg: OracleConfig) -> OracleSystem:
    rects = space.rectangles(design)
    return build_oracle_system(space, rects, rects[0], cfg)


def _respond(osys: OracleSystem) -> FrequencyResponse:
    z_in = osys.impedance()
    _, resp = s11_from_impedance(z_in, osys.cfg.z0, osys.cfg.floor)
    return FrequencyResponse(osys.cfg.frequency_grid, resp.log_mag)


def simulate_s11(space: DesignSpace, design: DesignVector, cfg: OracleConfig | None = None
                 ) -> FrequencyResponse:
    """Natural-log |S11| of a design on the configured GHz grid."""
    cfg = cfg or OracleConfig()
    space.design(design.locations)
    try:
        return _respond(oracle_system(space, design, cfg))
    except CZPError as exc:
        exc.context.setdefault("design", design.locations.tolist())
        raise


def simulate_substrate_only(space: DesignSpace, cfg: OracleConfig | None = None
                            ) -> FrequencyResponse:
    """Response with no metal at all; the port keeps patch 1's footprint at
    its lowest allowed position."""
    cfg = cfg or OracleConfig()
    p = space.patches[0]
    x, y = p.x_range[0], p.y_range[0]
    port = [x, y, x + p.size[0], y + p.size[1]]
    return _respond(build_oracle_system(space, np.zeros((0, 4)), port, cfg))


def exact_impedance(osys: OracleSystem) -> RationalFunction:
    """Closed-form Z_in as a rational function of model angular frequency."""
    return exact_rational(osys.spectral, osys.initial, osys.b_v, osys.b_i)


def exact_s11_czp(osys: OracleSystem) -> CZPModel:
    """CZP model (GHz) reproducing the unfloored oracle log|S11| exactly."""
    num, den = osys.s11_functionals()
    rf = exact_rational(osys.spectral, osys.initial, num, den)
    m = czp_from_rational(rf, "rad", pole_eps=0.0)
    a = osys.cfg.omega_per_ghz
    # equal root counts, so rescaling omega = a*f leaves log_c0 unchanged
    return CZPModel(m.log_c0, m.zeros / a, m.poles / a, "GHz", 0.0)


# -------------------------------------------------------------------- dataset


@dataclass
class DatasetRecord:
    design: DesignVector
    response: FrequencyResponse
    oracle: dict


def record_seed(seed: int, index: int) -> list[int]:
    return [int(seed), int(index)]


def _record_line(args) -> str:
    space, cfg, seed, i = args
    design = sample_design(space, record_seed(seed, i))
    meta = {"version": cfg.version, "cfg_hash": cfg.hash()}
    try:
        resp = simulate_s11(space, design, cfg)
    except CZPError as exc:
        return json.dumps({"index": i, "skipped": True, "design": design.locations.tolist(),
                           "error": exc.to_dict(), "oracle": meta}, sort_keys=True)
    return json.dumps({"index": i, "design": design.locations.tolist(),
                       "response": resp.log_mag.tolist(), "oracle": meta}, sort_keys=True)


def generate_lines(space: DesignSpace, n: int, seed: int, cfg: OracleConfig, workers: int = 1):
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    jobs = [(space, cfg, seed, i) for i in range(n)]
    if workers <= 1:
        yield from map(_record_line, jobs)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map() yields in submission order, so output order never depends on
        # which worker finishes first
        yield from pool.map(_record_line, jobs, chunksize=max(1, n // (4 * workers)))


def generate_dataset(space: DesignSpace, n: int, seed: int, cfg: OracleConfig | None,
                     out_path: str, workers: int = 1) -> dict:
    cfg = cfg or OracleConfig()
    tmp = f"{out_path}.tmp{os.getpid()}"
    ok = skipped = 0
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for line in generate_lines(space, n, seed, cfg, workers):
            if '"skipped": true' in line:
                skipped += 1
            else:
                ok += 1
            fh.write(line + "\n")
    os.replace(tmp, out_path)
    return {"path": str(out_path), "records": ok, "skipped": skipped, "n": n, "seed": seed,
            "oracle_version": cfg.version, "cfg_hash": cfg.hash()}


def read_dataset(path: str, grid: FrequencyGrid | None = None) -> list[DatasetRecord]:
    grid = grid or canonical_grid()
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("skipped"):
                continue
            resp = FrequencyResponse(grid, np.asarray(rec["response"], float))
            out.append(DatasetRecord(DesignVector(np.asarray(rec["design"], float)), resp,
                                     rec.get("oracle", {})))
    return out


# ------------------------------------------------------------------ touchstone


def to_s1p(resp: FrequencyResponse, z0: float = 50.0) -> str:
    """Magnitude-only one-port Touchstone text (MA format, angle 0)."""
    lines = ["! |S11| magnitude only; phase not modelled", f"# GHz S MA R {z0:g}"]
    for f, v in zip(resp.grid.values, resp.log_mag):
        lines.append(f"{f:.17g} {np.exp(v):.17g} 0")
    return "\n".join(lines) + "\n"


def from_s1p(text: str) -> FrequencyResponse:
    scale = {"HZ": 1e-9, "KHZ": 1e-6, "MHZ": 1e-3, "GHZ": 1.0}
    unit = 1.0
    freqs, mags = [], []
    for raw in text.splitlines():
        line = raw.split("!", 1)[0].strip()
        if not line:
            continue
        if line.startswith("#"):
            opts = line[1:].upper().split()
            if "MA" not in opts:
                raise InvalidArgument("only MA format is supported", header=line)
            unit = next((scale[o] for o in opts if o in scale), 1.0)
            continue
        parts = line.split()
        freqs.append(float(parts[0]) * unit)
        mags.append(float(parts[1]))
    if not freqs:
        raise InvalidArgument("no data lines in touchstone text")
    return FrequencyResponse(FrequencyGrid(np.array(freqs), "GHz"), np.log(np.array(mags)))
