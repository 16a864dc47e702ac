"""``czplab`` command line.

Every command resolves its configuration from three layers: the built-in
defaults in ``DEFAULTS``, an optional flat TOML file (``--config``) and
explicit flags.  Artifact-producing commands write a ``manifest.json`` next to
their outputs; ``czplab rerun --manifest m.json --out DIR`` replays it.

Errors are reported as one JSON object on stderr with a nonzero exit code.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .czp import FrequencyResponse, eval_log_s11, first_difference_ok, fit_czp
from .errors import CZPError, InvalidArgument
from .geometry import DesignSpace, DesignVector, image_statistics, rasterize, to_pgm
from .spectral import canonical_grid

OUT_ENV = "CZPLAB_OUT"
DEFAULT_OUT = "czplab-out"

_ORACLE = {"oracle_metal_speed": 3.0, "oracle_substrate_speed": 1.0, "oracle_damping": 0.3,
           "oracle_impedance_scale": 250.0, "oracle_omega_per_ghz": 0.3,
           "oracle_blur_sigma_mm": 1.0, "oracle_z0": 50.0}

# All defaults in one table.  Keys double as TOML keys and (with dashes) flags.
DEFAULTS: dict[str, dict] = {
    "verify-theorem": {"n": 8, "gamma": 0.1, "dt": 1e-3, "n_freq": 64, "omega_max": 4.0,
                       "seed": 0, "horizon": 0.0, "tol": 1e-3},
    "exact-czp": {"design": "", "n": 8, "gamma": 0.1, "seed": 0, "method": "pencil", **_ORACLE},
    "fit": {"input": "", "k": 4, "restarts": 8, "seed": 0, "loss": "mse", "max_iters": 400},
    "gen-data": {"n": 100, "seed": 0, "workers": 1, **_ORACLE},
    "train": {"data": "", "head": "czp", "k": 20, "epochs": 200, "lr": 0.0, "momentum": 0.9,
              "batch_size": 100, "seed": 0, "split_seed": 0, "test_frac": 0.1, "val_frac": 0.1,
              "loss": "mse", "pool": 10, "tokens": 16, "features": 16, "trunk": "128,128",
              "plateau_patience": 20},
    "eval": {"params": "", "data": "", "split": "test", "split_seed": 0, "test_frac": 0.1,
             "val_frac": 0.1},
    "search": {"params": "", "method": "cem", "budget": 10000, "population": 200,
               "elite_frac": 0.1, "smoothing": 0.5, "init_std_frac": 0.5, "seed": 0,
               "top_k": 10, "verify": True, "workers": 1, **_ORACLE},
    "verify-designs": {"designs": "", "workers": 1, **_ORACLE},
    "render": {"design": "", "res": 10, "params": "", **_ORACLE},
}
_INPUT_KEYS = ("input", "data", "params", "design", "designs")
_HELP = {
    "verify-theorem": "closed-form vs quadrature Fourier transforms of a 1D damped wave",
    "exact-czp": "exact constant/zeros/poles of a transfer function or oracle design",
    "fit": "fit a CZP model to a response CSV",
    "gen-data": "generate an oracle dataset (JSON lines)",
    "train": "train the image-to-response surrogate",
    "eval": "evaluate a surrogate checkpoint on a dataset split",
    "search": "surrogate-guided design search with oracle verification",
    "verify-designs": "oracle verification of candidate designs",
    "render": "export image channels, oracle response and attention maps",
}


class UsageError(CZPError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _coerce(key: str, value, default):
    try:
        if isinstance(default, bool):
            return value if isinstance(value, bool) else _bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError, argparse.ArgumentTypeError):
        raise InvalidArgument(f"bad value for {key}: {value!r}", key=key) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="czplab", description="constant/zeros/poles numerical lab")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, table in DEFAULTS.items():
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", default=None, help="flat TOML file of key = value pairs")
        p.add_argument("--out", default=None, help=f"output directory (env {OUT_ENV})")
        for key, default in table.items():
            kind = _bool if isinstance(default, bool) else type(default)
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None,
                           help=f"default: {default!r}")
    p = sub.add_parser("rerun", help="replay a run manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    table = DEFAULTS[command]
    cfg = dict(table)
    if getattr(args, "config", None):
        with open(args.config, "rb") as fh:
            data = tomli.load(fh)
        for key, value in data.items():
            if key == "out":
                cfg["out"] = str(value)
                continue
            if key not in table:
                raise InvalidArgument(f"unknown config key {key!r} for {command}", key=key)
            if isinstance(value, dict):
                raise InvalidArgument("config file must be flat key = value pairs", key=key)
            cfg[key] = _coerce(key, value, table[key])
    for key in table:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _coerce(key, value, table[key])
    if getattr(args, "out", None):
        cfg["out"] = args.out
    cfg.setdefault("out", os.environ.get(OUT_ENV, DEFAULT_OUT))
    return cfg


# ------------------------------------------------------------------ file utils


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()

    def write(self, name: str, data) -> Path:
        path = self.out / name
        atomic_write(path, data)
        self.outputs.append(name)
        return path

    def adopt(self, name: str) -> None:
        self.outputs.append(name)

    def manifest(self) -> dict:
        inputs = {}
        for key in _INPUT_KEYS:
            val = self.cfg.get(key)
            if val:
                inputs[key] = {"path": str(val), "sha256": sha256_file(val)}
        return {"command": self.command, "config": self.cfg,
                "seeds": {k: v for k, v in self.cfg.items() if "seed" in k},
                "inputs": inputs,
                "outputs": {n: sha256_file(self.out / n) for n in sorted(self.outputs)},
                "tool_version": __version__, "wall_time": time.perf_counter() - self.t0}

    def finish(self) -> dict:
        m = self.manifest()
        atomic_write(self.out / "manifest.json", _json(m))
        return m


def _oracle_cfg(cfg: dict):
    from .oracle import OracleConfig
    return OracleConfig(**{k[len("oracle_"):]: v for k, v in cfg.items() if k.startswith("oracle_")})


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise InvalidArgument(f"--{key.replace('_', '-')} is required", key=key)
    if not os.path.exists(cfg[key]):
        raise InvalidArgument(f"file not found: {cfg[key]}", key=key, path=cfg[key])
    return cfg[key]


def read_design(path: str, space: DesignSpace) -> DesignVector:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict) and "design" in data:
        data = data["design"]
    return space.design(DesignVector.from_dict(data).locations)


def read_designs(path: str, space: DesignSpace) -> list[DesignVector]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("designs", data.get("top", [data]))
    out = []
    for item in data:
        if isinstance(item, dict):
            item = item.get("design", item.get("locations"))
        out.append(space.design(np.asarray(item, float)))
    return out


def response_svg(resp: FrequencyResponse, width: int = 640, height: int = 360) -> str:
    """Static dB-vs-GHz line plot."""
    f, db = resp.grid.values, resp.db
    lo = min(-20.0, 5.0 * np.floor(float(db.min()) / 5.0))
    left, right, top, bottom = 60, 20, 20, 40
    pw, ph = width - left - right, height - top - bottom

    def xy(fi, di):
        x = left + pw * (fi - f[0]) / (f[-1] - f[0])
        y = top + ph * (0.0 - di) / (0.0 - lo)
        return f"{x:.2f},{y:.2f}"
    pts = " ".join(xy(a, b) for a, b in zip(f, db))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>']
    for tick in np.arange(0.0, lo - 1e-9, -5.0):
        y = top + ph * (0.0 - tick) / (0.0 - lo)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.2f}" font-size="11" '
                     f'text-anchor="end">{tick:g}</text>')
    for tick in range(1, 8):
        if f[0] <= tick <= f[-1]:
            x = left + pw * (tick - f[0]) / (f[-1] - f[0])
            parts.append(f'<text x="{x:.2f}" y="{height - bottom + 16}" font-size="11" '
                         f'text-anchor="middle">{tick}</text>')
    y6 = top + ph * 6.0 / (0.0 - lo)
    parts.append(f'<line x1="{left}" y1="{y6:.2f}" x2="{left + pw}" y2="{y6:.2f}" '
                 'stroke="#c33" stroke-dasharray="4 3"/>')
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#135" stroke-width="1.5"/>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 6}" font-size="12" '
                 'text-anchor="middle">frequency (GHz)</text>')
    parts.append(f'<text x="14" y="{top + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2})">|S11| (dB)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -------------------------------------------------------------------- commands


def cmd_verify_theorem(cfg: dict, run: Run) -> dict:
    from .spectral import fourier_equivalence
    res = fourier_equivalence(cfg["n"], cfg["gamma"], cfg["dt"], cfg["n_freq"], cfg["omega_max"],
                              cfg["seed"], cfg["horizon"] or None)
    worst = max(res["single_rel_error"], res["double_rel_error"])
    res["max_rel_error"] = worst
    res["tol"] = cfg["tol"]
    res["pass"] = bool(worst <= cfg["tol"])
    run.write("theorem.json", _json(res))
    print(f"max relative error {worst:.3e} "
          f"(single {res['single_rel_error']:.3e}, double {res['double_rel_error']:.3e}) "
          f"{'PASS' if res['pass'] else 'FAIL'} against {cfg['tol']:g}")
    return res


def cmd_exact_czp(cfg: dict, run: Run) -> dict:
    from .spectral import exact_rational
    if cfg["design"]:
        from .oracle import exact_impedance, exact_s11_czp, oracle_system
        space = DesignSpace()
        design = read_design(_require(cfg, "design"), space)
        osys = oracle_system(space, design, _oracle_cfg(cfg))
        rf = exact_impedance(osys)
        model = exact_s11_czp(osys)
        run.write("z_in_rational.json", _json(rf.to_dict()))
        run.write("s11_czp.json", model.to_json() + "\n")
        summary = {"zeros": rf.k1, "poles": rf.k2, "czp_k": model.k}
    else:
        from .linsys import build_wave_system_1d, eigendecompose
        n = cfg["n"]
        system = build_wave_system_1d(n, 1.0, cfg["gamma"])
        rng = np.random.default_rng(cfg["seed"])
        x0 = rng.standard_normal(2 * n)
        b1, b2 = rng.standard_normal(2 * n), rng.standard_normal(2 * n)
        rf = exact_rational(eigendecompose(system), x0, b1, b2, method=cfg["method"])
        run.write("rational.json", _json({"initial": x0.tolist(), "b1": b1.tolist(),
                                          "b2": b2.tolist(), **rf.to_dict()}))
        summary = {"zeros": rf.k1, "poles": rf.k2}
    print(json.dumps(summary))
    return summary


def cmd_fit(cfg: dict, run: Run) -> dict:
    with open(_require(cfg, "input"), encoding="utf-8") as fh:
        target = FrequencyResponse.from_csv(fh.read())
    rep = fit_czp(target, cfg["k"], cfg["restarts"], cfg["max_iters"], cfg["loss"],
                  seed=cfg["seed"])
    run.write("model.json", rep.model.to_json() + "\n")
    run.write("fitted.csv", eval_log_s11(rep.model, target.grid).to_csv())
    summary = {"final_loss": rep.final_loss, "iterations": rep.iterations,
               "converged": rep.converged, "restart_losses": rep.restart_losses}
    run.write("fit_report.json", _json(summary))
    print(f"final loss {rep.final_loss:.3e}")
    return summary


def cmd_gen_data(cfg: dict, run: Run) -> dict:
    from .oracle import generate_dataset
    run.out.mkdir(parents=True, exist_ok=True)
    summary = generate_dataset(DesignSpace(), cfg["n"], cfg["seed"], _oracle_cfg(cfg),
                               str(run.out / "dataset.jsonl"), cfg["workers"])
    run.adopt("dataset.jsonl")
    summary["path"] = "dataset.jsonl"
    run.write("summary.json", _json(summary))
    print(json.dumps(summary))
    return summary


def _surrogate_cfg(cfg: dict, head: str):
    from .surrogate import SurrogateConfig
    return SurrogateConfig(head=head, k=cfg["k"], pool=cfg["pool"], tokens=cfg["tokens"],
                           features=cfg["features"],
                           trunk=tuple(int(w) for w in str(cfg["trunk"]).split(",") if w.strip()),
                           loss=cfg["loss"], seed=cfg["seed"], lr=cfg["lr"],
                           momentum=cfg["momentum"], batch_size=cfg["batch_size"],
                           epochs=cfg["epochs"], plateau_patience=cfg["plateau_patience"])


def load_xy(path: str, scfg, space: DesignSpace):
    from .oracle import read_dataset
    from .surrogate import inputs_from_designs
    recs = read_dataset(path)
    if not recs:
        raise InvalidArgument("dataset has no usable records", path=path)
    x = inputs_from_designs(space, [r.design for r in recs], scfg)
    y = np.stack([r.response.log_mag for r in recs])
    return x, y


def smoothness_summary(params, x, scfg) -> dict:
    from .surrogate import forward, predict_czp
    grid = canonical_grid()
    if scfg.head == "czp":
        ok = [first_difference_ok(m, grid) for m in predict_czp(params, x, scfg)]
        return {"czp_bound_fraction": float(np.mean(ok)), "samples": len(ok)}
    pred = forward(params, x, scfg)
    return {"max_first_difference": float(np.max(np.abs(np.diff(pred, axis=1)))),
            "samples": int(pred.shape[0])}


def cmd_train(cfg: dict, run: Run) -> dict:
    from .surrogate import save_checkpoint, split_indices, train
    space = DesignSpace()
    heads = ["raw", "czp"] if cfg["head"] == "compare" else [cfg["head"]]
    data = _require(cfg, "data")
    out = {}
    for head in heads:
        scfg = _surrogate_cfg(cfg, head)
        x, y = load_xy(data, scfg, space)
        params, rep = train(x, y, scfg, cfg["test_frac"], cfg["val_frac"], cfg["split_seed"])
        _, _, te = split_indices(len(x), cfg["test_frac"], cfg["val_frac"], cfg["split_seed"])
        run.write(f"params_{head}.ckpt", save_checkpoint(params, scfg))
        run.write(f"report_{head}.json", rep.to_json() + "\n")
        run.write(f"curves_{head}.csv", rep.curves_csv())
        smooth = smoothness_summary(params, x[te], scfg) if te.size else {}
        out[head] = {"test_mse": rep.test_mse, "baseline_test_mse": rep.baseline_test_mse,
                     "test_loss": rep.test_loss, "best_epoch": rep.best_epoch,
                     "smoothness": smooth}
        print(f"{head}: test MSE {rep.test_mse:.5f} baseline {rep.baseline_test_mse:.5f} "
              f"ratio {rep.test_mse / rep.baseline_test_mse:.3f}")
    run.write("train_summary.json", _json(out))
    return out


def _load_params(path: str):
    from .surrogate import load_checkpoint
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())


def cmd_eval(cfg: dict, run: Run) -> dict:
    from .surrogate import evaluate, split_indices
    params, scfg = _load_params(_require(cfg, "params"))
    x, y = load_xy(_require(cfg, "data"), scfg, DesignSpace())
    tr, va, te = split_indices(len(x), cfg["test_frac"], cfg["val_frac"], cfg["split_seed"])
    pick = {"train": tr, "val": va, "test": te, "all": np.arange(len(x))}
    if cfg["split"] not in pick:
        raise InvalidArgument(f"unknown split {cfg['split']!r}")
    idx = pick[cfg["split"]]
    mean, per = evaluate(params, x[idx], y[idx], scfg)
    mse, _ = evaluate(params, x[idx], y[idx], scfg, loss="mse")
    res = {"split": cfg["split"], "samples": int(idx.size), "mean_loss": mean, "mse": mse,
           "loss": scfg.loss, "head": scfg.head,
           "baseline_mse": float(np.mean((y[idx] - y[tr].mean(axis=0)) ** 2)),
           "smoothness": smoothness_summary(params, x[idx], scfg)}
    run.write("eval.json", _json(res))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["record", "loss"])
    for i, v in zip(idx, per):
        w.writerow([int(i), repr(float(v))])
    run.write("per_sample.csv", buf.getvalue())
    print(f"{cfg['split']} mean loss {mean:.5f} (mse {mse:.5f}) over {idx.size} samples")
    return res


def cmd_search(cfg: dict, run: Run) -> dict:
    from .search import SearchConfig, search, surrogate_objective, verification_csv, verify
    params, scfg = _load_params(_require(cfg, "params"))
    space = DesignSpace()
    sc = SearchConfig(cfg["method"], cfg["budget"], cfg["population"], cfg["elite_frac"],
                      cfg["init_std_frac"], smoothing=cfg["smoothing"], seed=cfg["seed"],
                      top_k=cfg["top_k"])
    res = search(surrogate_objective(params, scfg, space), space, sc)
    run.write("episodes.csv", res.episodes_csv(2 * space.m))
    run.write("top.json", _json(res.top_json()))
    summary = {"best_surrogate_reward": res.top[0][1] if res.top else None,
               "evaluations": len(res.episodes)}
    if cfg["verify"]:
        rows = verify([d for d, _ in res.top], space, _oracle_cfg(cfg),
                      [r for _, r in res.top], cfg["workers"])
        run.write("verification.csv", verification_csv(rows))
        run.write("verification.json", _json(rows))
        summary["successes"] = int(sum(r["success"] for r in rows))
        summary["verified"] = len(rows)
    print(json.dumps(summary))
    return summary


def cmd_verify_designs(cfg: dict, run: Run) -> dict:
    from .search import verification_csv, verify
    space = DesignSpace()
    designs = read_designs(_require(cfg, "designs"), space)
    rows = verify(designs, space, _oracle_cfg(cfg), None, cfg["workers"])
    run.write("verification.csv", verification_csv(rows))
    run.write("verification.json", _json(rows))
    summary = {"verified": len(rows), "successes": int(sum(r["success"] for r in rows))}
    print(json.dumps(summary))
    return summary


def cmd_render(cfg: dict, run: Run) -> dict:
    from .oracle import simulate_s11, to_s1p
    space = DesignSpace()
    design = read_design(_require(cfg, "design"), space)
    img = rasterize(space, design, cfg["res"])
    for i, name in enumerate(("x_boundary", "y_boundary", "interior")):
        run.write(f"{name}.pgm", to_pgm(img.channels[i]))
    ocfg = _oracle_cfg(cfg)
    resp = simulate_s11(space, design, ocfg)
    run.write("response.csv", resp.to_csv())
    run.write("response.svg", response_svg(resp))
    run.write("response.s1p", to_s1p(resp, ocfg.z0))
    stats = image_statistics(img)
    if cfg["params"]:
        from .surrogate import featurize, forward, prepare_input
        params, scfg = _load_params(_require(cfg, "params"))
        if img.channels.shape[1:] != (scfg.image_height, scfg.image_width):
            raise InvalidArgument("render resolution does not match the surrogate input size")
        x = prepare_input(img, scfg)
        _, attn = featurize(params, x, scfg)
        ph, pw = scfg.pooled_shape
        for j in range(attn.shape[1]):
            a = attn[:, j].reshape(ph, pw)
            run.write(f"attention_{j:02d}.pgm", to_pgm(a / a.max()))
        pred = FrequencyResponse(canonical_grid(), forward(params, x, scfg))
        run.write("surrogate_response.csv", pred.to_csv())
    run.write("image_stats.json", _json(stats))
    print(json.dumps({"shape": stats["shape"], "interior_area": stats["interior_area"]}))
    return stats


COMMANDS = {"verify-theorem": cmd_verify_theorem, "exact-czp": cmd_exact_czp, "fit": cmd_fit,
            "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "search": cmd_search, "verify-designs": cmd_verify_designs, "render": cmd_render}


def run_command(command: str, cfg: dict) -> dict:
    run = Run(command, cfg)
    result = COMMANDS[command](cfg, run)
    manifest = run.finish()
    return {"result": result, "manifest": manifest}


def rerun(manifest_path: str, out: str) -> dict:
    with open(manifest_path, encoding="utf-8") as fh:
        old = json.load(fh)
    cfg = dict(old["config"])
    cfg["out"] = out
    for key, info in old.get("inputs", {}).items():
        if sha256_file(info["path"]) != info["sha256"]:
            raise InvalidArgument(f"input {info['path']} changed since the original run", key=key)
    new = run_command(old["command"], cfg)["manifest"]
    same = new["outputs"] == old["outputs"]
    diff = sorted(k for k in set(old["outputs"]) | set(new["outputs"])
                  if old["outputs"].get(k) != new["outputs"].get(k))
    report = {"identical": same, "differing": diff, "outputs": len(new["outputs"])}
    print(json.dumps(report))
    return report


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "rerun":
            return 0 if rerun(args.manifest, args.out)["identical"] else 1
        run_command(args.command, resolve_config(args.command, args))
        return 0
    except UsageError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 2
    except CZPError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except (OSError, tomli.TOMLDecodeError) as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
