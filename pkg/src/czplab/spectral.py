"""Temporal Fourier transforms of linear-system trajectories and their exact
rational (constant / zeros / poles) structure.

Frequencies are real ``omega``; internally polynomials are built in
``s = i*omega`` and roots are mapped back with ``omega_root = -i * s_root``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (DegenerateDenominator, IllConditioned, InvalidArgument, NonDecayingMode,
                     SingularPole)
from .linsys import SpectralDecomposition, Trajectory

TAIL_TOL = 1e-6
DEN_EPS = 1e-12
POLE_EPS = 1e-9
CANCEL_TOL = 1e-8
COMPANION_MAX_N = 64
_CHUNK = 8192


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    values: np.ndarray
    unit: str = "rad"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size < 2 or not np.all(np.isfinite(v)) or np.any(np.diff(v) <= 0):
            raise InvalidArgument("frequency grid must be finite, strictly increasing, count >= 2")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def count(self) -> int:
        return self.values.size

    def __len__(self):
        return self.values.size

    def same_as(self, other: "FrequencyGrid", tol: float = 1e-12) -> bool:
        return (self.count == other.count and self.unit == other.unit
                and bool(np.all(np.abs(self.values - other.values) <= tol)))


def canonical_grid() -> FrequencyGrid:
    """0.2 .. 7.0 GHz in 0.1 GHz steps (69 points)."""
    return FrequencyGrid(np.arange(2, 71) / 10.0, unit="GHz")


@dataclass(frozen=True, eq=False)
class ComplexSpectrum:
    grid: FrequencyGrid
    values: np.ndarray  # (..., M); leading axis indexes state components

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        if v.shape[-1] != self.grid.count:
            raise InvalidArgument("spectrum length does not match grid")
        object.__setattr__(self, "values", v)

    def to_csv(self) -> str:
        if self.values.ndim != 1:
            raise InvalidArgument("CSV export needs a single-component spectrum")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["omega", "re", "im"])
        for om, z in zip(self.grid.values, self.values):
            w.writerow([f"{om:.17g}", f"{z.real:.17g}", f"{z.imag:.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, unit: str = "rad") -> "ComplexSpectrum":
        rows = list(csv.reader(io.StringIO(text)))
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
        return cls(FrequencyGrid(data[:, 0], unit), data[:, 1] + 1j * data[:, 2])


@dataclass(frozen=True, eq=False)
class RationalFunction:
    """``c0 * prod(omega - z_k) / prod(omega - p_l)``."""
    c0: complex
    zeros: np.ndarray
    poles: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c0", complex(self.c0))
        object.__setattr__(self, "zeros", _canonical(np.asarray(self.zeros, complex).ravel()))
        object.__setattr__(self, "poles", _canonical(np.asarray(self.poles, complex).ravel()))

    @property
    def k1(self) -> int:
        return self.zeros.size

    @property
    def k2(self) -> int:
        return self.poles.size

    def evaluate(self, omega, eps: float = POLE_EPS) -> np.ndarray:
        om = np.atleast_1d(np.asarray(omega, dtype=complex))
        if self.poles.size:
            dist = np.abs(om[:, None] - self.poles[None, :])
            if np.min(dist) < eps:
                i, j = np.unravel_index(np.argmin(dist), dist.shape)
                raise SingularPole("evaluation point coincides with a pole",
                                   omega=complex(om[i]), pole=complex(self.poles[j]))
        acc = np.full(om.shape, np.log(self.c0) if self.c0 != 0 else -np.inf, dtype=complex)
        for z in self.zeros:
            acc = acc + np.log(om - z)
        for p in self.poles:
            acc = acc - np.log(om - p)
        return np.exp(acc)

    def to_dict(self) -> dict:
        return {"c0": [self.c0.real, self.c0.imag],
                "zeros": [[z.real, z.imag] for z in self.zeros],
                "poles": [[p.real, p.imag] for p in self.poles]}


def _canonical(roots: np.ndarray) -> np.ndarray:
    if roots.size == 0:
        return roots
    order = np.lexsort((roots.imag, roots.real))
    return roots[order]


def _check_decaying(spec: SpectralDecomposition):
    lam = spec.eigenvalues
    bad = lam[lam.real >= -1e-10 * np.maximum(1.0, np.abs(lam))]
    if bad.size:
        raise NonDecayingMode(f"{bad.size} eigenvalue(s) with non-negative real part",
                              eigenvalues=bad[:16])


def numeric_fourier_single_sided(traj: Trajectory, grid: FrequencyGrid,
                                 tail_tol: float = TAIL_TOL) -> ComplexSpectrum:
    """Trapezoid quadrature of ``phi(t) exp(-i w t)`` over the sampled horizon."""
    t = traj.times
    dt = traj.dt
    if t.size < 3 or np.max(np.abs(np.diff(t) - dt)) > 1e-9 * max(dt, 1.0):
        raise InvalidArgument("trajectory must be uniformly sampled")
    norms = np.linalg.norm(traj.states, axis=1)
    peak = float(np.max(norms))
    ratio = float(norms[-1]) / peak if peak > 0 else 0.0
    if ratio > tail_tol:
        rate = -np.log(max(ratio, 1e-300)) / traj.horizon if ratio < 1 else 0.0
        required = np.log(1.0 / tail_tol) / rate if rate > 0 else np.inf
        raise InvalidArgument(f"horizon {traj.horizon:g} too short: tail ratio {ratio:.3g} "
                              f"> {tail_tol:g}", required_horizon=float(required))
    return _trapezoid(t, traj.states, grid)


def _trapezoid(t: np.ndarray, states: np.ndarray, grid: FrequencyGrid) -> ComplexSpectrum:
    dt = t[1] - t[0]
    w = np.full(t.size, dt)
    w[0] = w[-1] = dt / 2
    om = grid.values
    out = np.zeros((states.shape[1], om.size), complex)
    for start in range(0, t.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        kern = np.exp(-1j * np.outer(t[sl], om)) * w[sl, None]
        out += states[sl].T @ kern
    return ComplexSpectrum(grid, out)


def numeric_fourier_double_sided(traj: Trajectory, grid: FrequencyGrid,
                                 tail_tol: float = TAIL_TOL) -> ComplexSpectrum:
    """Quadrature of the even extension ``phi(|t|)`` over ``[-T, T]``."""
    one = numeric_fourier_single_sided(traj, grid, tail_tol)
    # phi(-t) = phi(t): the negative half is the conjugate kernel
    neg = _trapezoid(traj.times, traj.states, FrequencyGrid(-grid.values[::-1]))
    return ComplexSpectrum(grid, one.values + neg.values[:, ::-1])


def _modal(spec: SpectralDecomposition, initial) -> np.ndarray:
    return spec.inverse_vectors @ np.asarray(initial, dtype=complex)


def analytic_fourier_single_sided(spec: SpectralDecomposition, initial,
                                  grid: FrequencyGrid) -> ComplexSpectrum:
    _check_decaying(spec)
    nu = _modal(spec, initial)
    kern = 1.0 / (1j * grid.values[None, :] - spec.eigenvalues[:, None])
    return ComplexSpectrum(grid, spec.right_vectors @ (nu[:, None] * kern))


def analytic_fourier_double_sided(spec: SpectralDecomposition, initial,
                                  grid: FrequencyGrid) -> ComplexSpectrum:
    _check_decaying(spec)
    nu = _modal(spec, initial)
    lam = spec.eigenvalues[:, None]
    kern = -2.0 * lam / (lam**2 + grid.values[None, :] ** 2)
    return ComplexSpectrum(grid, spec.right_vectors @ (nu[:, None] * kern))


def transfer_function(b1, b2, spectrum: ComplexSpectrum,
                      eps_den: float = DEN_EPS) -> ComplexSpectrum:
    num = np.asarray(b1, dtype=complex) @ spectrum.values
    den = np.asarray(b2, dtype=complex) @ spectrum.values
    small = np.abs(den) < eps_den
    if np.any(small):
        raise DegenerateDenominator("denominator vanishes on the grid",
                                    omega=spectrum.grid.values[small].tolist())
    return ComplexSpectrum(spectrum.grid, num / den)


# ---------------------------------------------------------------- exact form


def _pencil_roots(lam: np.ndarray, nu: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Roots (in s) of ``P(s) = sum_i mu_i nu_i prod_{k!=i} (s - lam_k)``.

    They are the finite generalized eigenvalues of the Rosenbrock pencil
    ``[[diag(lam), nu], [mu^T, 0]] - s [[I, 0], [0, 0]]``.
    """
    n = lam.size
    a = np.zeros((n + 1, n + 1), complex)
    a[:n, :n] = np.diag(lam)
    a[:n, n] = nu
    a[n, :n] = mu
    b = np.zeros_like(a)
    b[:n, :n] = np.eye(n)
    ab = scipy.linalg.eig(a, b, right=False, homogeneous_eigvals=True)
    alpha, beta = ab[0], ab[1]
    scale = max(1.0, float(np.max(np.abs(lam))))
    finite = np.abs(beta) > 1e-13 * np.abs(alpha)
    roots = alpha[finite] / beta[finite]
    # spurious roots from rounding of a vanishing leading coefficient sit
    # near infinity; they only contribute a constant factor
    return roots[np.abs(roots) < 1e8 * scale]


def _companion_roots(lam: np.ndarray, r: np.ndarray) -> np.ndarray:
    n = lam.size
    coeffs = np.zeros(n, complex)
    for i in range(n):
        coeffs += r[i] * np.poly(np.delete(lam, i))
    nz = np.flatnonzero(np.abs(coeffs) > 1e-14 * np.max(np.abs(coeffs)))
    if nz.size == 0:
        return np.zeros(0, complex)
    return np.roots(coeffs[nz[0]:])


def _cancel(z1: np.ndarray, z2: np.ndarray, tol: float = CANCEL_TOL):
    keep1 = np.ones(z1.size, bool)
    keep2 = np.ones(z2.size, bool)
    if z1.size and z2.size:
        dist = np.abs(z1[:, None] - z2[None, :])
        scale = np.maximum(1.0, np.abs(z1))[:, None]
        order = np.argsort(dist, axis=None, kind="stable")
        for flat in order:
            i, j = divmod(int(flat), z2.size)
            if dist[i, j] > tol * scale[i, 0]:
                break
            if keep1[i] and keep2[j]:
                keep1[i] = keep2[j] = False
    return z1[keep1], z2[keep2]


def _residue_ratio(lam, r1, r2, s):
    k = 1.0 / (s[:, None] - lam[None, :])
    return (k @ r1) / (k @ r2)


def exact_rational(spec: SpectralDecomposition, initial, b1, b2,
                   method: str = "pencil", check_tol: float = 1e-4) -> RationalFunction:
    """Closed-form constant/zeros/poles of ``b1^T phi_hat(w) / b2^T phi_hat(w)``.

    ``method="companion"`` expands both numerators into monomial coefficients
    and takes companion-matrix roots (only sound for small systems);
    ``"pencil"`` obtains the same roots as generalized eigenvalues without
    forming coefficients.
    """
    lam = spec.eigenvalues
    n = lam.size
    nu = _modal(spec, initial)
    mu1 = np.asarray(b1, dtype=complex) @ spec.right_vectors
    mu2 = np.asarray(b2, dtype=complex) @ spec.right_vectors
    r1, r2 = mu1 * nu, mu2 * nu
    if method == "companion":
        if n > COMPANION_MAX_N:
            raise IllConditioned(f"companion route limited to N <= {COMPANION_MAX_N}; "
                                 "use method='pencil' or a smaller system", n=n)
        s1, s2 = _companion_roots(lam, r1), _companion_roots(lam, r2)
    elif method == "pencil":
        s1, s2 = _pencil_roots(lam, nu, mu1), _pencil_roots(lam, nu, mu2)
    else:
        raise InvalidArgument(f"unknown method {method!r}")
    s1, s2 = _cancel(s1, s2)

    # gain from a probe point far from every root and pole
    scale = max(1.0, float(np.max(np.abs(lam))))
    angles = np.linspace(0.1, 2 * np.pi, 24, endpoint=False)
    probes = np.concatenate([0.5 * scale * np.exp(1j * angles), 2.0 * scale * np.exp(1j * angles)])
    allr = np.concatenate([s1, s2, lam])
    sep = np.min(np.abs(probes[:, None] - allr[None, :]), axis=1) if allr.size else np.ones(probes.size)
    s0 = probes[np.argmax(sep)]
    ratio0 = _residue_ratio(lam, r1, r2, np.array([s0]))[0]
    gain = ratio0 * np.exp(np.sum(np.log(s0 - s2)) - np.sum(np.log(s0 - s1)))

    k1, k2 = s1.size, s2.size
    rf = RationalFunction(gain * (1j) ** (k1 - k2), -1j * s1, -1j * s2)

    check_w = np.linspace(0.0, 1.2 * float(np.max(np.abs(lam.imag))) + 1.0, 64)
    try:
        got = rf.evaluate(check_w)
        want = _residue_ratio(lam, r1, r2, 1j * check_w)
        err = float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300)))
    except SingularPole:
        err = 0.0
    if not np.isfinite(err) or err > check_tol:
        raise IllConditioned(f"rational reconstruction mismatch {err:.3g}; try a smaller N",
                             mismatch=err, n=n)
    return rf


# ----------------------------------------------------------- equivalence check


def decay_horizon(spec: SpectralDecomposition, tail: float = TAIL_TOL) -> float:
    """Time after which every mode has decayed by at least ``tail``."""
    _check_decaying(spec)
    return float(np.log(1.0 / tail) / np.min(-spec.eigenvalues.real))


def fourier_equivalence(n: int = 8, gamma: float = 0.1, dt: float = 1e-3, n_freq: int = 64,
                        omega_max: float = 4.0, seed: int = 0, horizon: float | None = None,
                        tail: float = TAIL_TOL) -> dict:
    """Relative L2 error between quadrature of a simulated trajectory and the
    closed-form single- and double-sided transforms of a 1D damped wave."""
    from .linsys import build_wave_system_1d, eigendecompose, integrate

    system = build_wave_system_1d(n, 1.0, gamma)
    spec = eigendecompose(system)
    rng = np.random.default_rng(seed)
    x0 = np.concatenate([rng.standard_normal(n), np.zeros(n)])
    if horizon is None:
        horizon = decay_horizon(spec, tail)
    grid = FrequencyGrid(np.linspace(0.0, omega_max, n_freq), "rad")
    traj = integrate(system, x0, dt, horizon)
    out = {"n": n, "gamma": gamma, "dt": dt, "horizon": horizon, "n_freq": n_freq,
           "omega_max": omega_max, "seed": seed}
    for name, num, ana in (("single", numeric_fourier_single_sided, analytic_fourier_single_sided),
                           ("double", numeric_fourier_double_sided, analytic_fourier_double_sided)):
        a = ana(spec, x0, grid).values
        q = num(traj, grid, tail_tol=1.0).values
        out[f"{name}_rel_error"] = float(np.linalg.norm(q - a) / np.linalg.norm(a))
    return out
