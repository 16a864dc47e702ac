"""Constant-zeros-poles log-magnitude model, the impedance -> S11 map, the
shrinkage loss, and multi-start least-squares fitting."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateImpedance, FitFailure, InvalidArgument, SingularPole
from .spectral import ComplexSpectrum, FrequencyGrid, RationalFunction

POLE_EPS = 1e-3
LOG_FLOOR = -11.5
SHRINK_A = 10.0
SHRINK_C = 0.2
MODEL_VERSION = 1


def _softplus(u):
    return np.logaddexp(0.0, u)


def _softplus_inv(y):
    y = np.asarray(y, float)
    return np.where(y > 30, y, np.log(np.expm1(np.maximum(y, 1e-300))))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sorted_roots(r: np.ndarray) -> np.ndarray:
    if r.size == 0:
        return r
    return r[np.lexsort((r.imag, r.real))]


@dataclass(frozen=True, eq=False)
class CZPModel:
    log_c0: float
    zeros: np.ndarray
    poles: np.ndarray
    unit: str = "GHz"
    pole_eps: float = field(default=POLE_EPS, repr=False)

    def __post_init__(self):
        z = np.asarray(self.zeros, complex).ravel()
        p = np.asarray(self.poles, complex).ravel()
        if z.size != p.size:
            raise InvalidArgument("CZP model needs equal zero and pole counts",
                                  zeros=z.size, poles=p.size)
        if p.size and np.min(np.abs(p.imag)) < self.pole_eps:
            raise SingularPole(f"pole within {self.pole_eps} of the real axis",
                               pole=complex(p[np.argmin(np.abs(p.imag))]))
        object.__setattr__(self, "zeros", z)
        object.__setattr__(self, "poles", p)
        object.__setattr__(self, "log_c0", float(self.log_c0))

    @property
    def k(self) -> int:
        return self.zeros.size

    def folded(self) -> "CZPModel":
        """Conjugate roots into the upper half-plane (identical on real omega)."""
        fold = lambda r: r.real + 1j * np.abs(r.imag)  # noqa: E731
        return CZPModel(self.log_c0, fold(self.zeros), fold(self.poles), self.unit, self.pole_eps)

    def to_dict(self) -> dict:
        return {"version": MODEL_VERSION, "K": self.k, "log_c0": self.log_c0,
                "zeros": [[z.real, z.imag] for z in self.zeros],
                "poles": [[p.real, p.imag] for p in self.poles],
                "unit": self.unit}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CZPModel":
        if int(d.get("version", MODEL_VERSION)) != MODEL_VERSION:
            raise InvalidArgument("unsupported CZP model version", version=d.get("version"))
        pair = lambda xs: np.array([complex(a, b) for a, b in xs], dtype=complex)  # noqa: E731
        return cls(d["log_c0"], pair(d["zeros"]), pair(d["poles"]), d.get("unit", "GHz"))

    @classmethod
    def from_json(cls, text: str) -> "CZPModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class FrequencyResponse:
    grid: FrequencyGrid
    log_mag: np.ndarray  # natural log of |S11|

    def __post_init__(self):
        v = np.asarray(self.log_mag, dtype=float).ravel()
        if v.size != self.grid.count:
            raise InvalidArgument("response length does not match grid")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("response has non-finite values")
        object.__setattr__(self, "log_mag", v)

    @property
    def db(self) -> np.ndarray:
        return self.log_mag * (20.0 / np.log(10.0))

    @classmethod
    def from_db(cls, grid: FrequencyGrid, db) -> "FrequencyResponse":
        return cls(grid, np.asarray(db, float) * (np.log(10.0) / 20.0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"freq_{self.grid.unit}", "log_mag", "db"])
        for f, v, d in zip(self.grid.values, self.log_mag, self.db):
            w.writerow([f"{f:.17g}", f"{v:.17g}", f"{d:.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FrequencyResponse":
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        unit = rows[0][0].split("_", 1)[1] if rows[0][0].startswith("freq_") else "GHz"
        data = np.array([[float(x) for x in r[:2]] for r in rows[1:]])
        return cls(FrequencyGrid(data[:, 0], unit), data[:, 1])


# ------------------------------------------------------------------ evaluation


def _log_terms(roots: np.ndarray, om: np.ndarray) -> np.ndarray:
    # 0.5 * log |w - r|^2, one row per root
    d = (om[None, :] - roots.real[:, None]) ** 2 + roots.imag[:, None] ** 2
    return 0.5 * np.log(d)


def eval_log_s11(model: CZPModel, grid: FrequencyGrid) -> FrequencyResponse:
    """``log|c0| + sum_k log(|w - z_k| / |w - p_k|)`` in natural log."""
    om = grid.values
    out = np.full(om.shape, model.log_c0)
    if model.k:
        # canonical order makes the sums independent of input ordering
        out = out + np.sum(_log_terms(_sorted_roots(model.zeros), om), axis=0)
        out = out - np.sum(_log_terms(_sorted_roots(model.poles), om), axis=0)
    return FrequencyResponse(grid, out)


def eval_rational(rf: RationalFunction, omega: float, eps: float = 1e-9) -> complex:
    return complex(rf.evaluate(np.array([omega]), eps=eps)[0])


def s11_from_impedance(z_in: ComplexSpectrum, z0: float = 50.0,
                       floor: float = LOG_FLOOR) -> tuple[ComplexSpectrum, FrequencyResponse]:
    zn = np.asarray(z_in.values, complex) / z0
    den = zn + 1.0
    if np.any(np.abs(den) < 1e-12):
        bad = z_in.grid.values[np.abs(den) < 1e-12]
        raise DegenerateImpedance("Z_in/Z0 = -1 on the grid", omega=bad.tolist())
    s11 = (zn - 1.0) / den
    mag = np.abs(s11)
    with np.errstate(divide="ignore"):
        logm = np.where(mag > 0, np.log(np.maximum(mag, 1e-300)), -np.inf)
    logm = np.maximum(logm, floor)
    return ComplexSpectrum(z_in.grid, s11), FrequencyResponse(z_in.grid, logm)


def czp_from_rational(rf: RationalFunction, unit: str = "rad", far: float = 1e9,
                      pole_eps: float = POLE_EPS) -> CZPModel:
    """Log-magnitude CZP model of a rational function.

    Roots are folded into the upper half-plane; the shorter root list is
    padded with a distant root whose almost-constant factor is absorbed into
    the constant.
    """
    z = rf.zeros.real + 1j * np.abs(rf.zeros.imag)
    p = rf.poles.real + 1j * np.abs(rf.poles.imag)
    log_c0 = float(np.log(abs(rf.c0)))
    pad = z.size - p.size
    if pad > 0:
        p = np.concatenate([p, np.full(pad, 1j * far)])
        log_c0 += pad * np.log(far)
    elif pad < 0:
        z = np.concatenate([z, np.full(-pad, 1j * far)])
        log_c0 += pad * np.log(far)
    return CZPModel(log_c0, z, p, unit, pole_eps)


def smoothness_bound(model: CZPModel, grid: FrequencyGrid) -> float:
    """Upper bound on ``max |diff(eval_log_s11)|`` for a uniform-ish grid."""
    if model.k == 0:
        return 0.0
    step = float(np.max(np.diff(grid.values)))
    dz = float(np.min(np.abs(grid.values[:, None] - model.zeros[None, :])))
    return model.k * step * (1.0 / model.pole_eps + 1.0 / dz)


def first_difference_ok(model: CZPModel, grid: FrequencyGrid) -> bool:
    resp = eval_log_s11(model, grid).log_mag
    return bool(np.max(np.abs(np.diff(resp))) <= smoothness_bound(model, grid) * (1 + 1e-12))


# ------------------------------------------------------------------------ loss


def shrinkage_loss(pred, target, a: float = SHRINK_A, c: float = SHRINK_C) -> float:
    """``mean(l^2 / (1 + exp(a (c - l))))`` with ``l = |pred - target|``."""
    p = pred.log_mag if isinstance(pred, FrequencyResponse) else np.asarray(pred, float)
    t = target.log_mag if isinstance(target, FrequencyResponse) else np.asarray(target, float)
    if isinstance(pred, FrequencyResponse) and isinstance(target, FrequencyResponse):
        if not pred.grid.same_as(target.grid):
            raise InvalidArgument("prediction and target grids differ")
    if p.shape != t.shape:
        raise InvalidArgument("prediction and target shapes differ")
    if a <= 0:
        raise InvalidArgument("shrinkage sharpness a must be positive", a=a)
    l = np.abs(p - t)
    return float(np.mean(l * l * _sigmoid(a * (l - c))))


def mse_loss(pred, target) -> float:
    p = pred.log_mag if isinstance(pred, FrequencyResponse) else np.asarray(pred, float)
    t = target.log_mag if isinstance(target, FrequencyResponse) else np.asarray(target, float)
    return float(np.mean((p - t) ** 2))


# ---------------------------------------------------------------------- fitting


@dataclass
class FitReport:
    model: CZPModel
    final_loss: float
    iterations: int
    restarts_used: int
    converged: bool
    restart_losses: list = field(default_factory=list)


def levenberg_marquardt(fun, jac, x0, max_iters: int = 500, ftol: float = 1e-15,
                        gtol: float = 1e-14, lam0: float = 1e-3):
    """Minimize ``||fun(x)||^2`` with Marquardt-scaled damping.

    Returns ``(x, cost, iterations, converged)``.
    """
    x = np.asarray(x0, float).copy()
    r = fun(x)
    cost = float(r @ r)
    lam = lam0
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        j = jac(x)
        g = j.T @ r
        if not np.all(np.isfinite(g)):
            break
        if np.max(np.abs(g)) <= gtol:
            converged = True
            break
        h = j.T @ j
        diag = np.maximum(np.diag(h), 1e-12 * max(1.0, float(np.max(np.diag(h)))))
        improved = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(h + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            xn = x + step
            rn = fun(xn)
            cn = float(rn @ rn)
            if np.isfinite(cn) and cn < cost:
                rel = (cost - cn) / max(cost, 1e-300)
                x, r, cost = xn, rn, cn
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 4.0
        if not improved:
            converged = True
            break
        if rel < ftol or cost < 1e-30:
            converged = True
            break
    return x, cost, it, converged


class _CZPResidual:
    """Residuals and Jacobian of the CZP response over the packed vector
    ``[log_c0, zr(K), zi(K), pr(K), u(K)]`` with ``Im p = eps + softplus(u)``."""

    def __init__(self, om, target, k, eps, loss, a, c):
        self.om, self.target, self.k, self.eps = om, target, k, eps
        self.loss, self.a, self.c = loss, a, c
        self.scale = 1.0 / np.sqrt(om.size)

    def unpack(self, x):
        k = self.k
        return x[0], x[1:1 + k], x[1 + k:1 + 2 * k], x[1 + 2 * k:1 + 3 * k], x[1 + 3 * k:]

    def model(self, x, unit) -> CZPModel:
        c0, zr, zi, pr, u = self.unpack(x)
        return CZPModel(c0, zr + 1j * zi, pr + 1j * (self.eps + _softplus(u)), unit, self.eps)

    def _raw(self, x):
        c0, zr, zi, pr, u = self.unpack(x)
        pi = self.eps + _softplus(u)
        dz_r = self.om[None, :] - zr[:, None]
        dz = dz_r**2 + zi[:, None] ** 2
        dp_r = self.om[None, :] - pr[:, None]
        dp = dp_r**2 + pi[:, None] ** 2
        resp = c0 + 0.5 * np.sum(np.log(dz), 0) - 0.5 * np.sum(np.log(dp), 0)
        return resp - self.target, (dz_r, dz, zi, dp_r, dp, pi, u)

    def residual(self, x):
        e, _ = self._raw(x)
        return self._shape(e) * self.scale

    def _shape(self, e):
        if self.loss == "mse":
            return e
        l = np.abs(e)
        return e * np.sqrt(_sigmoid(self.a * (l - self.c)))

    def jacobian(self, x):
        e, (dz_r, dz, zi, dp_r, dp, pi, u) = self._raw(x)
        m = self.om.size
        cols = [np.ones((m, 1)),
                (-dz_r / dz).T, (zi[:, None] / dz).T,
                (dp_r / dp).T, (-(pi[:, None] / dp) * _sigmoid(u)[:, None]).T]
        j = np.concatenate(cols, axis=1)
        if self.loss != "mse":
            l = np.abs(e)
            s = _sigmoid(self.a * (l - self.c))
            # d/de [e sqrt(s(a(|e|-c)))]
            ds = np.sqrt(s) + e * 0.5 / np.sqrt(s) * s * (1 - s) * self.a * np.sign(e)
            j = j * ds[:, None]
        return j * self.scale


def _init_params(om, target, k, rng, eps):
    lo, hi = float(om[0]), float(om[-1])
    pr = np.sort(rng.uniform(lo, hi, k))
    pi = rng.uniform(0.1, 1.0, k)
    span = (hi - lo) / max(k, 1)
    zr = pr + rng.normal(0.0, 0.3 * span, k)
    zi = pi * rng.uniform(0.2, 1.0, k)
    u = _softplus_inv(np.maximum(pi - eps, 1e-6))
    return np.concatenate([[float(np.mean(target))], zr, zi, pr, u])


def fit_czp(target: FrequencyResponse, k: int, restarts: int = 8, max_iters: int = 400,
            loss: str = "mse", a: float = SHRINK_A, c: float = SHRINK_C, seed: int = 0,
            pole_eps: float = POLE_EPS) -> FitReport:
    """Multi-start Levenberg-Marquardt fit of a degree-``k`` CZP model.

    Each restart draws its initial roots from ``default_rng([seed, restart])``
    so results do not depend on how restarts are scheduled; the best restart is
    chosen by ``(loss, restart index)``.
    """
    om = target.grid.values
    if k < 0:
        raise InvalidArgument("degree must be non-negative", k=k)
    if om.size < 2 * k + 1:
        raise InvalidArgument(f"grid of {om.size} points too small for K={k}", k=k)
    if loss not in ("mse", "shrinkage"):
        raise InvalidArgument(f"unknown loss {loss!r}")
    y = target.log_mag
    if k == 0:
        c0 = float(np.mean(y)) if loss == "mse" else _fit_constant_shrink(y, a, c)
        model = CZPModel(c0, [], [], target.grid.unit, pole_eps)
        fl = _loss_of(model, target, loss, a, c)
        return FitReport(model, fl, 0, 1, True, [fl])

    prob = _CZPResidual(om, y, k, pole_eps, loss, a, c)
    results = []
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        x0 = _init_params(om, y, k, rng, pole_eps)
        x, _, iters, conv = levenberg_marquardt(prob.residual, prob.jacobian, x0, max_iters)
        try:
            model = prob.model(x, target.grid.unit).folded()
            fl = _loss_of(model, target, loss, a, c)
        except (SingularPole, InvalidArgument):
            fl, model = float("inf"), None
        results.append((fl if np.isfinite(fl) else float("inf"), r, model, iters, conv))
    finite = [t for t in results if np.isfinite(t[0])]
    if not finite:
        raise FitFailure("every restart diverged", restart_losses=[t[0] for t in results])
    best = min(finite, key=lambda t: (t[0], t[1]))
    return FitReport(best[2], best[0], best[3], restarts, bool(best[4]),
                     [t[0] for t in results])


def _fit_constant_shrink(y, a, c):
    # 1D minimization of a smooth convex-ish objective; bracket by data range
    from scipy.optimize import minimize_scalar
    res = minimize_scalar(lambda v: shrinkage_loss(np.full_like(y, v), y, a, c),
                          bounds=(float(np.min(y)), float(np.max(y)) + 1e-12), method="bounded",
                          options={"xatol": 1e-12})
    return float(res.x)


def _loss_of(model, target, loss, a, c) -> float:
    pred = eval_log_s11(model, target.grid)
    return mse_loss(pred, target) if loss == "mse" else shrinkage_loss(pred, target, a, c)


def match_zero_pole_sets(m1: CZPModel, m2: CZPModel) -> float:
    """Total complex distance under optimal pairing, zeros and poles matched
    separately (both models folded to the upper half-plane first)."""
    if m1.k != m2.k:
        raise InvalidArgument("models have different degrees", k1=m1.k, k2=m2.k)
    if m1.k == 0:
        return 0.0
    f1, f2 = m1.folded(), m2.folded()
    total = 0.0
    for a, b in ((f1.zeros, f2.zeros), (f1.poles, f2.poles)):
        cost = np.abs(a[:, None] - b[None, :])
        i, j = linear_sum_assignment(cost)
        total += float(cost[i, j].sum())
    return total
