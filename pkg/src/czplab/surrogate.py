"""Image-to-response surrogate with a filter-based tokenizer and either a raw
69-point head or a constant/zeros/poles head.

Pipeline per sample::

    image (3 x H x W) --avg-pool--> + 2 coordinate channels --> I (P x 5)
    X = I Wf + bf                      (P x C)   per-pixel features
    A = softmax_over_pixels(X Wt)      (P x L)   attention maps
    T = A^T X                          (L x C)   tokens
    v = trunk(flatten(T))
    raw head:  y = Wo v + bo
    czp head:  log_c0, zeros, poles = heads(v);  y = CZP response on the grid
"""
from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .czp import LOG_FLOOR, POLE_EPS, SHRINK_A, SHRINK_C, CZPModel
from .errors import InvalidArgument, NumericError
from .geometry import AntennaImage, DesignSpace, rasterize

CKPT_MAGIC = b"CZPP"
CKPT_VERSION = 1


@dataclass
class SurrogateConfig:
    head: str = "czp"           # "raw" | "czp"
    k: int = 20                 # CZP degree
    n_freq: int = 69
    freq_lo: float = 0.2
    freq_step: float = 0.1
    image_height: int = 60
    image_width: int = 300
    pool: int = 10
    pixel_hidden: tuple = (32,)  # per-pixel hidden widths before the C features
    features: int = 16          # C
    tokens: int = 16            # L
    attn_init_scale: float = 30.0  # larger = sharper initial attention maps
    trunk: tuple = (128, 128)
    loss: str = "mse"           # "mse" | "shrinkage"
    shrink_a: float = SHRINK_A
    shrink_c: float = SHRINK_C
    pole_eps: float = POLE_EPS
    seed: int = 0
    lr: float = 0.0             # 0 selects the per-head default below
    momentum: float = 0.9
    batch_size: int = 100
    epochs: int = 200
    plateau_patience: int = 20
    plateau_factor: float = 0.5
    grad_clip: float = 10.0

    def __post_init__(self):
        self.trunk = tuple(int(w) for w in self.trunk)
        self.pixel_hidden = tuple(int(w) for w in self.pixel_hidden)
        if self.lr <= 0:
            # the czp head's log-distance terms are stiffer than a linear head
            self.lr = 0.02 if self.head == "raw" else 0.005
        if self.head not in ("raw", "czp"):
            raise InvalidArgument(f"unknown head {self.head!r}")
        if self.loss not in ("mse", "shrinkage"):
            raise InvalidArgument(f"unknown loss {self.loss!r}")
        if self.head == "czp" and self.k < 1:
            raise InvalidArgument("czp head needs K >= 1")
        if self.tokens < 1 or self.features < 1:
            raise InvalidArgument("tokens and features must be positive")
        if self.image_height % self.pool or self.image_width % self.pool:
            raise InvalidArgument("pool size must divide the image dimensions")

    @property
    def grid_values(self) -> np.ndarray:
        return self.freq_lo + self.freq_step * np.arange(self.n_freq)

    @property
    def pooled_shape(self) -> tuple[int, int]:
        return self.image_height // self.pool, self.image_width // self.pool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk"] = list(self.trunk)
        d["pixel_hidden"] = list(self.pixel_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def layout(cfg: SurrogateConfig) -> list[tuple[str, tuple[int, ...]]]:
    c, l = cfg.features, cfg.tokens
    out, width = [], 5
    for i, w in enumerate(cfg.pixel_hidden):
        out += [(f"pix{i}_w", (width, w)), (f"pix{i}_b", (w,))]
        width = w
    out += [("feat_w", (width, c)), ("feat_b", (c,)), ("tok_w", (c, l))]
    width = l * c
    for i, w in enumerate(cfg.trunk):
        out += [(f"fc{i}_w", (width, w)), (f"fc{i}_b", (w,))]
        width = w
    if cfg.head == "raw":
        out += [("out_w", (width, cfg.n_freq)), ("out_b", (cfg.n_freq,))]
    else:
        k = cfg.k
        out += [("c_w", (width, 1)), ("c_b", (1,)),
                ("z_w", (width, 2 * k)), ("z_b", (2 * k,)),
                ("p_w", (width, 2 * k)), ("p_b", (2 * k,))]
    return out


def layout_hash(cfg: SurrogateConfig) -> str:
    text = json.dumps([cfg.head, [[n, list(s)] for n, s in layout(cfg)]])
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class SurrogateParams:
    vector: np.ndarray
    manifest: list
    hash: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise NumericError("parameter vector has non-finite entries")

    def unpack(self) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, shape in self.manifest:
            n = int(np.prod(shape))
            out[name] = self.vector[i:i + n].reshape(shape)
            i += n
        return out

    def check(self, cfg: SurrogateConfig):
        if self.hash != layout_hash(cfg):
            raise InvalidArgument("parameter layout does not match configuration",
                                  params=self.hash, config=layout_hash(cfg))


def pack(arrays: dict, cfg: SurrogateConfig) -> SurrogateParams:
    lay = layout(cfg)
    vec = np.concatenate([np.asarray(arrays[n], float).reshape(-1) for n, _ in lay])
    return SurrogateParams(vec, [[n, list(s)] for n, s in lay], layout_hash(cfg))


def init_params(cfg: SurrogateConfig, response_mean: np.ndarray | None = None,
                sample_inputs: np.ndarray | None = None) -> SurrogateParams:
    """Random initial parameters.

    With ``sample_inputs`` the trunk is rescaled so that, on those samples,
    every trunk pre-activation has zero mean and unit variance.  Token
    features differ only slightly between designs, and without this the
    trunk would start out almost blind to the input.
    """
    rng = np.random.default_rng([cfg.seed, 17])
    arrays = {}
    for name, shape in layout(cfg):
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
    # near-uniform attention would make every token a global pixel average
    arrays["tok_w"] *= cfg.attn_init_scale
    mean = np.zeros(cfg.n_freq) if response_mean is None else np.asarray(response_mean, float)
    if cfg.head == "raw":
        arrays["out_w"] *= 0.1
        arrays["out_b"] = mean.copy()
    else:
        k = cfg.k
        g = cfg.grid_values
        arrays["c_b"] = np.array([float(np.mean(mean))])
        for nm in ("c_w", "z_w", "p_w"):
            arrays[nm] *= 0.05
        re = np.linspace(g[0], g[-1], k)
        # rows: k real parts then k imaginary parts
        arrays["z_b"] = np.concatenate([re + 0.05 * (g[-1] - g[0]) / k, np.full(k, 0.5)])
        arrays["p_b"] = np.concatenate([re, np.full(k, np.log(np.expm1(0.5)))])
    if sample_inputs is not None and len(sample_inputs):
        _standardize_trunk(arrays, cfg, np.asarray(sample_inputs, float))
    return pack(arrays, cfg)


def _standardize_trunk(arrays: dict, cfg: SurrogateConfig, x: np.ndarray) -> None:
    t = {n: ad.Tensor(a) for n, a in arrays.items()}
    toks, _ = _tokens(t, x)
    h = toks.data.reshape(x.shape[0], -1)
    for i in range(len(cfg.trunk)):
        w, b = arrays[f"fc{i}_w"], arrays[f"fc{i}_b"]
        z = h @ w + b
        mu, sd = z.mean(axis=0), z.std(axis=0)
        sd = np.where(sd > 1e-12, sd, 1.0)
        arrays[f"fc{i}_w"] = w / sd
        arrays[f"fc{i}_b"] = (b - mu) / sd
        h = ad.swish(ad.Tensor(h @ arrays[f"fc{i}_w"] + arrays[f"fc{i}_b"])).data


# ------------------------------------------------------------------ input prep


def prepare_input(img: AntennaImage | np.ndarray, cfg: SurrogateConfig) -> np.ndarray:
    """Average-pool the 3 geometry channels and append x/y coordinate
    channels; returns a (P, 5) pixel matrix."""
    ch = img.channels if isinstance(img, AntennaImage) else np.asarray(img, float)
    if ch.shape != (3, cfg.image_height, cfg.image_width):
        raise InvalidArgument("image dimensions do not match configuration",
                              got=list(ch.shape),
                              want=[3, cfg.image_height, cfg.image_width])
    ph, pw = cfg.pooled_shape
    pooled = ch.reshape(3, ph, cfg.pool, pw, cfg.pool).mean(axis=(2, 4))
    ys, xs = np.meshgrid(np.linspace(-1, 1, ph), np.linspace(-1, 1, pw), indexing="ij")
    full = np.concatenate([pooled, xs[None], ys[None]], axis=0)
    return full.reshape(5, -1).T.copy()


def prepare_batch(images, cfg: SurrogateConfig) -> np.ndarray:
    return np.stack([prepare_input(im, cfg) for im in images])


def inputs_from_designs(space: DesignSpace, designs, cfg: SurrogateConfig) -> np.ndarray:
    """Rasterize designs at the configured image size and prepare them."""
    res = int(round(cfg.image_height / space.height))
    return np.stack([prepare_input(rasterize(space, d, res), cfg) for d in designs])


# ---------------------------------------------------------------------- model


def _tensors(params: SurrogateParams, grad: bool) -> dict[str, ad.Tensor]:
    return {n: (ad.param(a) if grad else ad.Tensor(a)) for n, a in params.unpack().items()}


def _tokens(p: dict, x: np.ndarray):
    h = ad.Tensor(x)
    i = 0
    while f"pix{i}_w" in p:
        h = ad.swish(h @ p[f"pix{i}_w"] + p[f"pix{i}_b"])
        i += 1
    feats = h @ p["feat_w"] + p["feat_b"]                     # (B, P, C)
    attn = ad.softmax(feats @ p["tok_w"], axis=1)             # (B, P, L)
    toks = attn.swapaxes(1, 2) @ feats                         # (B, L, C)
    return toks, attn


def _trunk(p: dict, toks, cfg: SurrogateConfig):
    b = toks.shape[0]
    h = toks.reshape(b, cfg.tokens * cfg.features)
    for i in range(len(cfg.trunk)):
        h = ad.swish(h @ p[f"fc{i}_w"] + p[f"fc{i}_b"])
    return h


def _czp_parts(p: dict, v, cfg: SurrogateConfig):
    k = cfg.k
    log_c0 = (v @ p["c_w"] + p["c_b"])[:, 0]
    z = v @ p["z_w"] + p["z_b"]
    q = v @ p["p_w"] + p["p_b"]
    zr, zi = z[:, :k], z[:, k:]
    pr = q[:, :k]
    pi = ad.softplus(q[:, k:]) + cfg.pole_eps
    return log_c0, zr, zi, pr, pi


def _czp_response(parts, cfg: SurrogateConfig):
    log_c0, zr, zi, pr, pi = parts
    om = cfg.grid_values[None, None, :]
    b, k = zr.shape
    dz = (om - zr.reshape(b, k, 1)) ** 2 + zi.reshape(b, k, 1) ** 2
    dp = (om - pr.reshape(b, k, 1)) ** 2 + pi.reshape(b, k, 1) ** 2
    s = (ad.log(dz) - ad.log(dp)).sum(axis=1) * 0.5           # (B, F)
    return s + log_c0.reshape(b, 1)


def _forward(p: dict, x: np.ndarray, cfg: SurrogateConfig):
    toks, attn = _tokens(p, x)
    v = _trunk(p, toks, cfg)
    if cfg.head == "raw":
        return v @ p["out_w"] + p["out_b"], attn
    return _czp_response(_czp_parts(p, v, cfg), cfg), attn


def featurize(params: SurrogateParams, x: np.ndarray, cfg: SurrogateConfig):
    """Tokens (L x C) and attention maps (P x L) for one prepared input."""
    params.check(cfg)
    x = np.asarray(x, float)
    single = x.ndim == 2
    toks, attn = _tokens(_tensors(params, False), x[None] if single else x)
    if single:
        return toks.data[0], attn.data[0]
    return toks.data, attn.data


def forward(params: SurrogateParams, x: np.ndarray, cfg: SurrogateConfig) -> np.ndarray:
    """Predicted natural-log responses, shape (B, n_freq) or (n_freq,)."""
    params.check(cfg)
    x = np.asarray(x, float)
    single = x.ndim == 2
    out, _ = _forward(_tensors(params, False), x[None] if single else x, cfg)
    return out.data[0] if single else out.data


def predict_czp(params: SurrogateParams, x: np.ndarray, cfg: SurrogateConfig) -> list[CZPModel]:
    if cfg.head != "czp":
        raise InvalidArgument("predict_czp needs a czp-head configuration")
    params.check(cfg)
    x = np.asarray(x, float)
    x = x[None] if x.ndim == 2 else x
    p = _tensors(params, False)
    toks, _ = _tokens(p, x)
    log_c0, zr, zi, pr, pi = (t.data for t in _czp_parts(p, _trunk(p, toks, cfg), cfg))
    return [CZPModel(log_c0[i], zr[i] + 1j * zi[i], pr[i] + 1j * pi[i], "GHz", cfg.pole_eps)
            for i in range(x.shape[0])]


def _per_sample_loss(pred, target, cfg: SurrogateConfig):
    err = pred - ad.Tensor(target)
    if cfg.loss == "mse":
        sq = err * err
    else:
        l = ad.absolute(err)
        sq = err * err * ad.sigmoid((l - cfg.shrink_c) * cfg.shrink_a)
    return sq.mean(axis=1)


def loss_and_grad(params: SurrogateParams, batch, cfg: SurrogateConfig):
    """Mean configured loss over the batch and its gradient w.r.t. the flat
    parameter vector."""
    x, y = batch
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape[0] == 0:
        raise InvalidArgument("empty batch")
    params.check(cfg)
    p = _tensors(params, True)
    pred, _ = _forward(p, x, cfg)
    per = _per_sample_loss(pred, y, cfg)
    bad = np.flatnonzero(~np.isfinite(per.data))
    if bad.size:
        raise NumericError("non-finite loss", batch_index=int(bad[0]))
    loss = per.mean()
    loss.backward()
    grad = np.concatenate([
        (p[n].grad if p[n].grad is not None else np.zeros(s)).reshape(-1)
        for n, s in params.manifest])
    return float(loss.data), grad


def evaluate(params: SurrogateParams, x, y, cfg: SurrogateConfig, loss: str | None = None,
             chunk: int = 500):
    """Mean loss and per-sample losses (``loss`` overrides the configured one)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape[0] == 0:
        raise InvalidArgument("cannot evaluate an empty slice")
    use = cfg if loss is None else SurrogateConfig.from_dict({**cfg.to_dict(), "loss": loss})
    per = []
    for s in range(0, x.shape[0], chunk):
        pred = ad.Tensor(forward(params, x[s:s + chunk], cfg))
        per.append(_per_sample_loss(pred, y[s:s + chunk], use).data)
    per = np.concatenate(per)
    return float(np.mean(per)), per


# ------------------------------------------------------------------- training


@dataclass
class TrainReport:
    head: str
    train_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    lr_curve: list = field(default_factory=list)
    best_epoch: int = -1
    final_train_loss: float = float("nan")
    final_val_loss: float = float("nan")
    test_loss: float = float("nan")
    test_mse: float = float("nan")
    baseline_test_mse: float = float("nan")
    config: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")  # kept out of artifacts so reruns are byte-identical
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def curves_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        for i, (t, v, r) in enumerate(zip(self.train_curve, self.val_curve, self.lr_curve)):
            lines.append(f"{i},{t:.17g},{v:.17g},{r:.17g}")
        return "\n".join(lines) + "\n"


def split_indices(n: int, test_frac: float = 0.1, val_frac: float = 0.1, seed: int = 0):
    """Hold out ``test_frac`` for test, then ``val_frac`` of the remainder for
    validation."""
    perm = np.random.default_rng([seed, 99]).permutation(n)
    n_test = int(round(n * test_frac))
    test, rest = perm[:n_test], perm[n_test:]
    n_val = int(round(rest.size * val_frac))
    return np.sort(rest[n_val:]), np.sort(rest[:n_val]), np.sort(test)


def train(x, y, cfg: SurrogateConfig, test_frac: float = 0.1, val_frac: float = 0.1,
          split_seed: int = 0, min_records: int = 100, log=None):
    """Mini-batch gradient descent with momentum, plateau LR halving and
    best-validation checkpointing.  Returns ``(params, report)``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape[0] < min_records:
        raise InvalidArgument(f"dataset has {x.shape[0]} records; need >= {min_records}")
    t0 = time.perf_counter()
    tr, va, te = split_indices(x.shape[0], test_frac, val_frac, split_seed)
    params = init_params(cfg, y[tr].mean(axis=0), x[tr[:256]])
    vec = params.vector.copy()
    vel = np.zeros_like(vec)
    lr = cfg.lr
    rng = np.random.default_rng([cfg.seed, 23])
    report = TrainReport(cfg.head, config=cfg.to_dict(),
                         split={"train": int(tr.size), "val": int(va.size), "test": int(te.size),
                                "seed": split_seed, "test_frac": test_frac, "val_frac": val_frac})
    best_val, best_vec, since_best = np.inf, vec.copy(), 0
    for epoch in range(cfg.epochs):
        order = tr[rng.permutation(tr.size)]
        total = 0.0
        for s in range(0, order.size, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            cur = SurrogateParams(vec, params.manifest, params.hash)
            try:
                loss, grad = loss_and_grad(cur, (x[idx], y[idx]), cfg)
            except NumericError as exc:
                raise NumericError(f"non-finite loss at epoch {epoch}", epoch=epoch,
                                   batch_start=s, **exc.context) from exc
            gn = float(np.linalg.norm(grad))
            if gn > cfg.grad_clip:
                grad = grad * (cfg.grad_clip / gn)
            vel = cfg.momentum * vel - lr * grad
            vec = vec + vel
            total += loss * idx.size
        cur = SurrogateParams(vec, params.manifest, params.hash)
        val = evaluate(cur, x[va], y[va], cfg)[0] if va.size else total / tr.size
        report.train_curve.append(total / tr.size)
        report.val_curve.append(val)
        report.lr_curve.append(lr)
        if val < best_val:
            best_val, best_vec, since_best = val, vec.copy(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                since_best = 0
        if log is not None:
            log(f"epoch {epoch:4d} train {total / tr.size:.5f} val {val:.5f} lr {lr:.2e}")
    best = SurrogateParams(best_vec, params.manifest, params.hash)
    report.final_train_loss = evaluate(best, x[tr], y[tr], cfg)[0]
    report.final_val_loss = float(best_val)
    if te.size:
        report.test_loss = evaluate(best, x[te], y[te], cfg)[0]
        report.test_mse = evaluate(best, x[te], y[te], cfg, loss="mse")[0]
        report.baseline_test_mse = float(np.mean((y[te] - y[tr].mean(axis=0)) ** 2))
    report.wall_time = time.perf_counter() - t0
    return best, report


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(params: SurrogateParams, cfg: SurrogateConfig) -> bytes:
    manifest = json.dumps({"config": cfg.to_dict(), "layout": params.manifest,
                           "hash": params.hash}, sort_keys=True).encode()
    return (CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(manifest)) + manifest
            + params.vector.astype("<f8").tobytes())


def load_checkpoint(blob: bytes) -> tuple[SurrogateParams, SurrogateConfig]:
    if blob[:4] != CKPT_MAGIC:
        raise InvalidArgument("not a surrogate checkpoint")
    version, mlen = struct.unpack("<II", blob[4:12])
    if version != CKPT_VERSION:
        raise InvalidArgument("unsupported checkpoint version", version=version)
    meta = json.loads(blob[12:12 + mlen])
    vec = np.frombuffer(blob[12 + mlen:], dtype="<f8").astype(np.float64)
    cfg = SurrogateConfig.from_dict(meta["config"])
    params = SurrogateParams(vec, meta["layout"], meta["hash"])
    params.check(cfg)
    return params, cfg


def response_floor() -> float:
    return LOG_FLOOR
