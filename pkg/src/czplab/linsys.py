"""Discretized linear PDE systems ``dphi/dt = A phi``.

Builders produce second-order wave systems in first-order block form::

    A = [[0,      I  ],
         [c^2 L, -g I]]

where ``L`` is the Dirichlet finite-difference Laplacian and ``g`` a uniform
velocity damping that pushes every eigenvalue into the open left half-plane.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, InstabilityError, InvalidArgument, NotDiagonalizable

DEFAULT_CELL_CAP = 2000
DIVERGENCE_NORM = 1e12
DEFECT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class LinearSystem:
    a_matrix: np.ndarray
    grid_meta: dict
    damping: float = 0.0
    wave_speed_map: np.ndarray | None = None
    # symmetric part of the stiffness block (Laplacian / dx^2); lets
    # eigendecompose use a half-size symmetric solve
    laplacian: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidArgument("a_matrix must be square", shape=list(a.shape))
        if not np.all(np.isfinite(a)):
            raise InvalidArgument("a_matrix has non-finite entries")
        a.setflags(write=False)
        object.__setattr__(self, "a_matrix", a)

    @property
    def state_dim(self) -> int:
        return self.a_matrix.shape[0]

    def safe_dt(self, margin: float = 0.9) -> float:
        """RK4 step bound from a Gershgorin estimate of the spectral radius."""
        radius = float(np.max(np.sum(np.abs(self.a_matrix), axis=1)))
        if radius == 0.0:
            return math.inf
        return margin * 2.78 / radius

    def to_dict(self) -> dict:
        n = self.state_dim
        return {
            "format": "czplab.linear-system",
            "version": 1,
            "state_dim": n,
            "damping": self.damping,
            "grid_meta": self.grid_meta,
            "wave_speed_map": None if self.wave_speed_map is None
            else np.asarray(self.wave_speed_map, float).tolist(),
            "a_matrix": self.a_matrix.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSystem":
        n = int(d["state_dim"])
        a = np.asarray(d["a_matrix"], dtype=float).reshape(n, n)
        speed = d.get("wave_speed_map")
        meta = dict(d["grid_meta"])
        lap = None
        if meta.get("kind") == "1d":
            lap = laplacian_1d(int(meta["n_cells"]), float(meta["dx"]))
        elif meta.get("kind") == "2d":
            lap = laplacian_2d(int(meta["height"]), int(meta["width"]), float(meta["dx"]))
        return cls(a, meta, float(d["damping"]),
                   None if speed is None else np.asarray(speed, float), lap)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "LinearSystem":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_times, N)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    right_vectors: np.ndarray
    inverse_vectors: np.ndarray
    condition_estimate: float

    def reconstruct(self) -> np.ndarray:
        return (self.right_vectors * self.eigenvalues) @ self.inverse_vectors


def _second_order_block(stiffness: np.ndarray, damping: float) -> np.ndarray:
    n = stiffness.shape[0]
    a = np.zeros((2 * n, 2 * n))
    a[:n, n:] = np.eye(n)
    a[n:, :n] = stiffness
    a[n:, n:] = -damping * np.eye(n)
    return a


def laplacian_1d(n_cells: int, dx: float = 1.0) -> np.ndarray:
    lap = -2.0 * np.eye(n_cells) + np.eye(n_cells, k=1) + np.eye(n_cells, k=-1)
    return lap / dx**2


def laplacian_2d(height: int, width: int, dx: float = 1.0) -> np.ndarray:
    """5-point Laplacian on a row-major H x W grid with zero Dirichlet walls."""
    n = height * width
    lap = -4.0 * np.eye(n)
    idx = np.arange(n).reshape(height, width)
    right = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    down = idx[:-1, :].ravel(), idx[1:, :].ravel()
    for i, j in (right, down):
        lap[i, j] = 1.0
        lap[j, i] = 1.0
    return lap / dx**2


def build_wave_system_1d(n_cells: int, wave_speed: float = 1.0, damping: float = 0.1,
                         dx: float = 1.0) -> LinearSystem:
    if n_cells < 2 or dx <= 0 or wave_speed <= 0 or damping < 0:
        raise InvalidArgument("need n_cells >= 2, dx > 0, wave_speed > 0, damping >= 0",
                              n_cells=n_cells, dx=dx, wave_speed=wave_speed, damping=damping)
    lap = laplacian_1d(n_cells, dx)
    speed = np.full(n_cells, float(wave_speed))
    a = _second_order_block(wave_speed**2 * lap, damping)
    meta = {"kind": "1d", "n_cells": n_cells, "dx": dx}
    return LinearSystem(a, meta, float(damping), speed, lap)


def build_field_2d(material_map, damping: float = 0.1, dx: float = 1.0,
                   cap: int = DEFAULT_CELL_CAP) -> LinearSystem:
    """Damped 2D wave system with a per-cell wave speed grid (H x W)."""
    speed = np.asarray(material_map, dtype=float)
    if speed.ndim != 2:
        raise InvalidArgument("material_map must be a 2D grid", shape=list(speed.shape))
    h, w = speed.shape
    if h * w > cap:
        raise CapacityError(f"grid of {h}x{w}={h * w} cells exceeds cell cap {cap}",
                            cells=h * w, cap=cap)
    if damping <= 0 or dx <= 0 or np.any(speed <= 0) or not np.all(np.isfinite(speed)):
        raise InvalidArgument("need damping > 0, dx > 0 and positive finite speeds")
    lap = laplacian_2d(h, w, dx)
    c2 = speed.ravel() ** 2
    a = _second_order_block(c2[:, None] * lap, damping)
    meta = {"kind": "2d", "height": h, "width": w, "dx": dx}
    return LinearSystem(a, meta, float(damping), speed, lap)


def integrate(system: LinearSystem, initial, dt: float, horizon: float) -> Trajectory:
    """Classical fixed-step RK4.

    For constant ``A`` the four stages collapse into one propagator
    ``P = I + hA + (hA)^2/2 + (hA)^3/6 + (hA)^4/24`` applied each step.
    """
    phi = np.asarray(initial, dtype=float).copy()
    n = system.state_dim
    if phi.shape != (n,) or not np.all(np.isfinite(phi)):
        raise InvalidArgument("initial state must be a finite vector of length state_dim", n=n)
    if dt <= 0 or horizon <= 0:
        raise InvalidArgument("dt and horizon must be positive", dt=dt, horizon=horizon)
    steps = int(math.ceil(horizon / dt - 1e-9))
    ha = dt * system.a_matrix
    term = np.eye(n)
    prop = np.eye(n)
    for k in range(1, 5):
        term = term @ ha / k
        prop = prop + term
    prop_t = prop.T.copy()

    states = np.empty((steps + 1, n))
    states[0] = phi
    for i in range(1, steps + 1):
        phi = phi @ prop_t
        if not np.isfinite(phi).all() or np.dot(phi, phi) > DIVERGENCE_NORM**2:
            raise InstabilityError(f"integration diverged at step {i}", step=i, dt=dt)
        states[i] = phi
    times = dt * np.arange(steps + 1)
    return Trajectory(times, states)


def _finish(lam, u, u_inv, a) -> SpectralDecomposition:
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(u_inv))):
        raise NotDiagonalizable("eigenvector matrix is singular")
    recon = (u * lam) @ u_inv
    scale = max(np.linalg.norm(a), 1e-300)
    resid = np.linalg.norm(recon - a) / scale
    if not np.isfinite(resid) or resid > DEFECT_TOL:
        raise NotDiagonalizable(f"reconstruction residual {resid:.3g} exceeds {DEFECT_TOL}",
                                residual=float(resid))
    cond = float(np.linalg.norm(u, 2) * np.linalg.norm(u_inv, 2))
    return SpectralDecomposition(lam, u, u_inv, cond)


def _structured_eig(system: LinearSystem) -> SpectralDecomposition:
    lap = system.laplacian
    c = np.asarray(system.wave_speed_map, float).ravel()
    g = system.damping
    # c^2 L = C (C L C) C^-1, and C L C is symmetric
    mu, q = np.linalg.eigh(c[:, None] * lap * c[None, :])
    root = np.sqrt(complex(g * g / 4) + mu.astype(complex))
    if np.min(np.abs(root)) < 1e-7 * max(1.0, float(np.max(np.abs(mu)))):
        raise NotDiagonalizable("critically damped mode: repeated eigenvalue")
    lp, lm = -g / 2 + root, -g / 2 - root
    v = c[:, None] * q
    v_inv = q.T / c[None, :]
    n = len(mu)
    u = np.empty((2 * n, 2 * n), complex)
    u[:n, :n], u[:n, n:] = v, v
    u[n:, :n], u[n:, n:] = v * lp, v * lm
    inv_diff = 1.0 / (lm - lp)
    u_inv = np.empty_like(u)
    u_inv[:n, :n] = (inv_diff * lm)[:, None] * v_inv
    u_inv[:n, n:] = -inv_diff[:, None] * v_inv
    u_inv[n:, :n] = -(inv_diff * lp)[:, None] * v_inv
    u_inv[n:, n:] = inv_diff[:, None] * v_inv
    return _finish(np.concatenate([lp, lm]), u, u_inv, system.a_matrix)


def eigendecompose(system: LinearSystem | np.ndarray, structured: bool = True
                   ) -> SpectralDecomposition:
    """Complex eigendecomposition ``A = U diag(lam) U^-1``.

    Builder-produced systems go through a half-size symmetric solve; anything
    else (or ``structured=False``) uses a dense nonsymmetric eig.
    """
    if not isinstance(system, LinearSystem):
        system = LinearSystem(np.asarray(system, float), {"kind": "raw"})
    if structured and system.laplacian is not None and system.wave_speed_map is not None:
        return _structured_eig(system)
    a = system.a_matrix
    lam, u = np.linalg.eig(a)
    lam = lam.astype(complex)
    u = u.astype(complex)
    try:
        u_inv = np.linalg.inv(u)
    except np.linalg.LinAlgError as exc:
        raise NotDiagonalizable("eigenvector matrix is singular") from exc
    return _finish(lam, u, u_inv, a)
