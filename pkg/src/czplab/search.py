"""Sequential patch placement, dual-band reward and black-box design search.

The reward works in dB: ``r_low = min over 2.4-2.5 GHz of (-6 - |S11|dB)``,
``r_high`` likewise over 5.1-7.0 GHz, and ``total = r_low + min(1, r_high)``.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .czp import FrequencyResponse
from .errors import InvalidArgument, InvalidState
from .geometry import DesignSpace, DesignVector, rasterize
from .spectral import FrequencyGrid, canonical_grid

LOW_BAND = (2.4, 2.5)
HIGH_BAND = (5.1, 7.0)
TARGET_DB = -6.0
HIGH_CLAMP = 1.0
_BAND_TOL = 1e-9


# ----------------------------------------------------------------- environment


@dataclass(frozen=True)
class PlacementState:
    placed: tuple = ()          # ((patch_id, x, y), ...)
    next_patch: int | None = 0
    n_patches: int = 5

    def one_hot(self, patch_id: int) -> np.ndarray:
        v = np.zeros(self.n_patches)
        v[patch_id] = 1.0
        return v

    def observation(self) -> np.ndarray:
        """Flat vector: placed (one-hot, x, y) rows zero-padded to M rows,
        followed by the next patch's one-hot id."""
        rows = np.zeros((self.n_patches, self.n_patches + 2))
        for r, (pid, x, y) in enumerate(self.placed):
            rows[r, :self.n_patches] = self.one_hot(pid)
            rows[r, self.n_patches:] = (x, y)
        nxt = np.zeros(self.n_patches) if self.next_patch is None else self.one_hot(self.next_patch)
        return np.concatenate([rows.ravel(), nxt])

    @property
    def terminal(self) -> bool:
        return self.next_patch is None


class PlacementEnv:
    """Places patches 1..M in order; the action is the bottom-left corner of
    the next patch.  Out-of-range actions are clamped and logged."""

    def __init__(self, space: DesignSpace | None = None):
        self.space = space or DesignSpace()
        self.log: list[dict] = []

    def reset(self) -> PlacementState:
        self.log = []
        return PlacementState((), 0, self.space.m)

    def step(self, state: PlacementState, action):
        if state.terminal:
            raise InvalidState("episode already terminated")
        pid = state.next_patch
        p = self.space.patches[pid]
        ax, ay = (float(v) for v in action)
        x = float(np.clip(ax, *p.x_range))
        y = float(np.clip(ay, *p.y_range))
        self.log.append({"step": len(state.placed), "patch": pid + 1, "action_x": ax,
                         "action_y": ay, "x": x, "y": y, "clamped": (x, y) != (ax, ay)})
        placed = state.placed + ((pid, x, y),)
        if pid + 1 == self.space.m:
            design = DesignVector(np.array([[x, y] for _, x, y in placed]))
            return PlacementState(placed, None, self.space.m), design, 0.0
        return PlacementState(placed, pid + 1, self.space.m), None, 0.0


# ---------------------------------------------------------------------- reward


@dataclass(frozen=True)
class RewardBreakdown:
    r_low: float
    r_high: float
    r_high_clamped: float
    total: float

    @property
    def success(self) -> bool:
        return self.r_low >= 0.0 and self.r_high >= 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["success"] = self.success
        return d


def band_mask(grid: FrequencyGrid, band: tuple[float, float]) -> np.ndarray:
    f = grid.values
    return (f >= band[0] - _BAND_TOL) & (f <= band[1] + _BAND_TOL)


def reward_db(db, grid: FrequencyGrid | None = None, target: float = TARGET_DB) -> RewardBreakdown:
    """Reward of a dB response sampled on the canonical grid."""
    grid = grid or canonical_grid()
    if not grid.same_as(canonical_grid()):
        raise InvalidArgument("reward needs a response on the canonical grid")
    db = np.asarray(db, float)
    if db.shape != (grid.count,):
        raise InvalidArgument("response length does not match the grid", got=list(db.shape))
    r_low = float(np.min(target - db[band_mask(grid, LOW_BAND)]))
    r_high = float(np.min(target - db[band_mask(grid, HIGH_BAND)]))
    clamped = min(HIGH_CLAMP, r_high)
    return RewardBreakdown(r_low, r_high, clamped, r_low + clamped)


def reward(resp: FrequencyResponse, target: float = TARGET_DB) -> RewardBreakdown:
    return reward_db(resp.db, resp.grid, target)


def rewards_from_log(log_mag: np.ndarray) -> np.ndarray:
    """Vectorized total reward for a batch of natural-log responses (B, 69)."""
    grid = canonical_grid()
    db = np.asarray(log_mag, float) * (20.0 / np.log(10.0))
    low = np.min(TARGET_DB - db[:, band_mask(grid, LOW_BAND)], axis=1)
    high = np.min(TARGET_DB - db[:, band_mask(grid, HIGH_BAND)], axis=1)
    return low + np.minimum(HIGH_CLAMP, high)


# ---------------------------------------------------------------------- search


@dataclass(frozen=True)
class SearchConfig:
    method: str = "cem"          # "cem" | "random"
    budget: int = 10000          # total objective evaluations
    population: int = 200
    elite_frac: float = 0.1
    init_std_frac: float = 0.5   # initial std as a fraction of each range
    min_std: float = 1e-6
    smoothing: float = 0.5       # weight kept on the previous mean/std
    seed: int = 0
    top_k: int = 10

    def __post_init__(self):
        if self.method not in ("cem", "random"):
            raise InvalidArgument(f"unknown search method {self.method!r}")
        if self.budget < self.population or self.population < 2:
            raise InvalidArgument("need budget >= population >= 2")
        if not 0 < self.elite_frac <= 1:
            raise InvalidArgument("elite_frac must be in (0, 1]")


@dataclass
class SearchResult:
    top: list                              # [(DesignVector, reward)]
    history: list = field(default_factory=list)   # per-iteration dicts
    episodes: list = field(default_factory=list)  # (iteration, index, reward, *flat)

    def episodes_csv(self, dims: int) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "candidate", "reward"] + [f"h{i}" for i in range(dims)])
        for row in self.episodes:
            w.writerow([row[0], row[1], repr(float(row[2]))] + [repr(float(v)) for v in row[3:]])
        return buf.getvalue()

    def top_json(self) -> list:
        return [{"rank": i, "design": d.locations.tolist(), "surrogate_reward": r}
                for i, (d, r) in enumerate(self.top)]


def select_elites(rewards: np.ndarray, n_elite: int) -> np.ndarray:
    """Indices of the best ``n_elite`` rewards; ties go to the lower index."""
    return np.argsort(-np.asarray(rewards, float), kind="stable")[:n_elite]


def _top_k(xs: np.ndarray, rs: np.ndarray, k: int) -> list:
    order = np.argsort(-rs, kind="stable")
    seen, out = set(), []
    for i in order:
        key = xs[i].tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append((DesignVector(xs[i].reshape(-1, 2).copy()), float(rs[i])))
        if len(out) == k:
            break
    return out


def search(objective, space: DesignSpace, scfg: SearchConfig) -> SearchResult:
    """Maximize ``objective(batch of flat designs (P, 2M)) -> rewards (P,)``.

    CEM keeps a per-dimension Gaussian, samples a population, clamps it to
    the ranges and refits mean/std to the elite fraction.  Random search
    samples uniformly over the ranges with the same evaluation budget.
    """
    lo, hi = space.lower, space.upper
    rng = np.random.default_rng([scfg.seed, 31])
    iters = scfg.budget // scfg.population
    n_elite = max(1, int(round(scfg.elite_frac * scfg.population)))
    mean = 0.5 * (lo + hi)
    std = np.maximum(scfg.init_std_frac * (hi - lo), scfg.min_std)
    all_x, all_r, episodes, history = [], [], [], []
    for it in range(iters):
        if scfg.method == "cem":
            pop = space.clamp(mean + std * rng.standard_normal((scfg.population, lo.size)))
        else:
            pop = rng.uniform(lo, hi, (scfg.population, lo.size))
        r = np.asarray(objective(pop), float)
        if r.shape != (scfg.population,):
            raise InvalidArgument("objective must return one reward per candidate")
        if scfg.method == "cem":
            elite = pop[select_elites(r, n_elite)]
            keep = scfg.smoothing
            mean = (1 - keep) * elite.mean(axis=0) + keep * mean
            std = np.maximum((1 - keep) * elite.std(axis=0) + keep * std, scfg.min_std)
        all_x.append(pop)
        all_r.append(r)
        for j in range(scfg.population):
            episodes.append((it, j, float(r[j]), *pop[j]))
        history.append({"iteration": it, "best": float(r.max()), "mean_reward": float(r.mean()),
                        "mean": mean.tolist(), "std": std.tolist()})
    xs, rs = np.concatenate(all_x), np.concatenate(all_r)
    return SearchResult(_top_k(xs, rs, scfg.top_k), history, episodes)


def surrogate_objective(params, cfg, space: DesignSpace, res: int = 10, chunk: int = 100):
    """Batch objective backed by a trained surrogate."""
    from .surrogate import forward, prepare_input

    def objective(pop: np.ndarray) -> np.ndarray:
        out = []
        for s in range(0, len(pop), chunk):
            x = np.stack([prepare_input(rasterize(space, DesignVector(h.reshape(-1, 2)), res), cfg)
                          for h in pop[s:s + chunk]])
            out.append(rewards_from_log(forward(params, x, cfg)))
        return np.concatenate(out)
    return objective


# ---------------------------------------------------------------- verification


def _verify_one(args):
    from .oracle import simulate_s11
    space, design, ocfg = args
    resp = simulate_s11(space, design, ocfg)
    return resp, reward(resp)


def verify(designs, space: DesignSpace, oracle_cfg=None, surrogate_rewards=None,
           workers: int = 1) -> list[dict]:
    """Oracle response, reward and success flag for each design, in order."""
    from .oracle import OracleConfig
    ocfg = oracle_cfg or OracleConfig()
    jobs = [(space, d, ocfg) for d in designs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_verify_one, jobs))
    else:
        results = [_verify_one(j) for j in jobs]
    rows = []
    for i, (d, (resp, rb)) in enumerate(zip(designs, results)):
        row = {"design_id": i, "design": d.locations.tolist(), "oracle_r_low": rb.r_low,
               "oracle_r_high": rb.r_high, "oracle_total": rb.total, "success": rb.success,
               "oracle_response": resp.log_mag.tolist()}
        if surrogate_rewards is not None:
            row["surrogate_reward"] = float(surrogate_rewards[i])
            row["gap"] = float(surrogate_rewards[i]) - rb.total
        rows.append(row)
    return rows


def verification_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["design_id", "oracle_r_low", "oracle_r_high", "oracle_total", "success"]
    extra = [c for c in ("surrogate_reward", "gap") if rows and c in rows[0]]
    w.writerow(cols + extra)
    for r in rows:
        w.writerow([r["design_id"]] + [repr(float(r[c])) for c in cols[1:4]]
                   + [str(r["success"]).lower()] + [repr(float(r[c])) for c in extra])
    return buf.getvalue()
