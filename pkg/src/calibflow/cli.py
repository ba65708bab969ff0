"""Command-line drivers for the calibration studies and the pendulum benchmark.

Every command resolves its configuration in four layers (built-in defaults,
named preset, JSON config file, explicit flags), hashes the resolved
document and writes into ``--out``:

    config.json    resolved configuration and its hash
    report.json    metrics, seeds and artifact list (byte-identical on rerun)
    timing.json    wall-clock seconds (the only run-dependent content)
    manifest.json  every output file with its sha256
    *.csv, *.svg   tables and figures

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, gaussim, hypio, metrics
from .flow import FlowConfig, TrainConfig, TrainingAborted, save_checkpoint
from .numcore import RngStream
from .pendulum import MODELS, PendulumConfig

FORMAT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "CALIBFLOW_THREADS"


class UsageError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------------

DEFAULTS = {
    "toy": {
        "dims": None, "hyps": None, "true_sigma": 0.5, "n_seeds": 3,
        "M": 5000, "steps": 2000, "batch": 500, "lr": 0.05,
        "oracle": {"D": 45, "N": 200, "M": 10000},
        "collapse": {"N": 10, "M": 10000, "sigma_max": 2.0, "points": 20},
        "mean": {"N": 5, "sigma": 1.0, "steps": 3000, "dists": ["normal", "exponential"]},
    },
    "landscape": {
        "mu_grid": gaussim.PRESETS["fig1d"]["mu_grid"],
        "sigma_grid": gaussim.PRESETS["fig1d"]["sigma_grid"],
        "true_sigma": 4.0, "true_mu": 0.0, "n_hyps": 5, "n_data": 20000,
        "n_calib_hyps": 200, "n_calib_data": 2000, "ece_budget": 0.05,
    },
    "pendulum": {
        "pendulum": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(PendulumConfig()).items()},
        "split": [0.6, 0.2, 0.2],
        "flow": {"n_blocks": 10, "hidden": 100},
        "train": {"epochs": 200, "batch_size": 64, "lr": 1e-3, "patience": 10, "lam_sample": 0.0},
        "model": "III", "n_samples": 200, "n_scatter": 5,
        "baseline": {"hyps": 200, "steps": 1500},
        "data": None,
    },
    "eval": {"quantiles": 100},
    "calibrate": {"quantiles": 100},
}

PRESETS = {
    "fig1b": ("toy", {"dims": gaussim.PRESETS["fig1b"]["dims"], "hyps": gaussim.PRESETS["fig1b"]["hyps"],
                      "true_sigma": gaussim.PRESETS["fig1b"]["true_sigma"],
                      "n_seeds": len(gaussim.PRESETS["fig1b"]["seeds"])}),
    "fig1d": ("landscape", {k: gaussim.PRESETS["fig1d"][k] for k in
                            ("mu_grid", "sigma_grid", "true_sigma", "true_mu", "n_hyps", "n_data",
                             "n_calib_hyps", "n_calib_data")}),
}


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise UsageError(f"unknown config field {where}{k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def resolve_config(kind: str, seed: int, preset: str | None, config_path: str | None,
                   overrides: dict) -> dict:
    """Defaults, then preset, then config file, then flags; returns the hashable document."""
    block = copy.deepcopy(DEFAULTS[kind])
    file_block = {}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {config_path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"config {config_path}: top level must be an object")
        doc = dict(doc)
        if doc.pop("kind", kind).split()[0] != kind:
            raise UsageError(f"config {config_path} is for another command")
        doc.pop("format_version", None)
        preset = preset or doc.pop("preset", None)
        doc.pop("preset", None)
        if "seed" in doc:
            seed = doc.pop("seed") if seed is None else seed
        file_block = doc
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        target, values = PRESETS[preset]
        if target != kind:
            raise UsageError(f"preset {preset!r} belongs to the {target!r} command")
        block = _merge(block, values, "")
    block = _merge(block, file_block, "")
    block = _merge(block, {k: v for k, v in overrides.items() if v is not None}, "")
    seed = 0 if seed is None else seed
    if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise UsageError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return {"kind": kind, "format_version": FORMAT_VERSION, "seed": seed, "preset": preset,
            "config": block}


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# -- output helpers --------------------------------------------------------------------

class Run:
    """Collects the files one command writes; finalises the report and manifest."""

    def __init__(self, out: Path, doc: dict):
        self.out = Path(out)
        self.doc = doc
        self.hash = config_hash(doc)
        self.files: list[str] = []
        self.t0 = time.perf_counter()
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.out}: {exc}") from exc
        self.json("config.json", {**doc, "config_hash": self.hash})

    def path(self, name: str) -> Path:
        self.files.append(name)
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")
        return p

    def csv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
        return p

    def finish(self, metrics_: dict) -> dict:
        report = {"config_hash": self.hash, "kind": self.doc["kind"], "seed": self.doc["seed"],
                  "version": __version__, "metrics": metrics_,
                  "artifacts": sorted(set(self.files) | {"report.json", "timing.json", "manifest.json"})}
        self.json("report.json", report)
        self.json("timing.json", {"config_hash": self.hash,
                                  "wall_clock_seconds": round(time.perf_counter() - self.t0, 3)})
        entries = {}
        for name in sorted(set(self.files)):
            entries[name] = hashlib.sha256((self.out / name).read_bytes()).hexdigest()
        (self.out / "manifest.json").write_text(json.dumps(
            {"config_hash": self.hash, "files": entries}, indent=1, sort_keys=True) + "\n")
        return report


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _grid(text: str) -> list[float]:
    """``start:stop:num`` (inclusive linspace) or a comma list."""
    try:
        if ":" in text:
            a, b, n = text.split(":")
            return np.linspace(float(a), float(b), int(n)).tolist()
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:num or a comma list, got {text!r}")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        v = 0
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def resolve_threads(flag: int | None) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        if n < 1:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return n
    return flag or 1


def _require_positive(cfg: dict, *fields):
    for f in fields:
        if not isinstance(cfg[f], (int, float)) or cfg[f] <= 0:
            raise UsageError(f"config field {f!r} must be positive, got {cfg[f]!r}")


# -- toy -------------------------------------------------------------------------------

def cmd_toy(args, doc: dict, threads: int) -> dict:
    cfg = doc["config"]
    for f in ("dims", "hyps"):
        if not cfg[f]:
            raise UsageError(f"toy: --{f} is required unless --preset or --config provides it")
        if any(not isinstance(v, int) or v < 1 for v in cfg[f]):
            raise UsageError(f"toy: every entry of {f!r} must be a positive integer")
    _require_positive(cfg, "true_sigma", "n_seeds", "M", "steps", "batch", "lr")
    seed = doc["seed"]
    seeds = [(seed + i) % 2 ** 64 for i in range(cfg["n_seeds"])]
    run = Run(args.out, doc)

    grid = gaussim.grid_study(cfg["dims"], cfg["hyps"], cfg["true_sigma"], seeds, M=cfg["M"],
                              steps=cfg["steps"], batch=cfg["batch"], lr=cfg["lr"], threads=threads)
    run.csv("grid.csv", ["D", "N", "seed", "sigma_hat", "iterations", "converged"],
            [[r["D"], r["N"], r["seed"], r["sigma_hat"], r["iterations"], int(r["converged"])]
             for r in grid.rows])
    table = grid.sigma_table()
    from . import plotting
    plotting.sigma_grid(grid.dims, grid.hyps, table, grid.true_sigma, run.path("sigma_grid.svg"))
    out = {"seeds": seeds, "dims": grid.dims, "hyps": grid.hyps, "true_sigma": grid.true_sigma,
           "sigma_table": table, "trend_violations": grid.trend_violations()}

    oc = cfg["oracle"]
    if oc:
        rows = [gaussim.oracle_comparison(oc["D"], oc["N"], cfg["true_sigma"], M=oc["M"],
                                          rng=RngStream(s).child(1), steps=cfg["steps"], batch=cfg["batch"])
                for s in seeds]
        out["oracle"] = rows
        run.csv("oracle.csv", ["seed", "sigma_hat", "min_mpjpe_fit", "min_mpjpe_oracle", "nll_fit",
                               "nll_oracle"],
                [[s, r["sigma_hat"], r["min_mpjpe_fit"], r["min_mpjpe_oracle"], r["nll_fit"],
                  r["nll_oracle"]] for s, r in zip(seeds, rows)])

    cc = cfg["collapse"]
    if cc:
        grid_s = np.linspace(0.0, cc["sigma_max"], cc["points"])
        col = gaussim.mpjpe_collapse_check(grid_s, M=cc["M"], N=cc["N"], rng=RngStream(seed).child(2))
        out["collapse"] = {k: col[k] for k in ("argmin_sigma", "monotone", "data_variance")}
        run.csv("collapse.csv", ["sigma", "mean_mpjpe_sq"], zip(col["sigma"], col["loss"]))
        plotting.loss_curve(col["sigma"], col["loss"], run.path("collapse.svg"), "sigma",
                            "mean squared error over hypotheses")

    mc = cfg["mean"]
    if mc:
        res = [gaussim.mean_convergence_check(mc["N"], mc["sigma"], d, steps=mc["steps"],
                                              rng=RngStream(seed).child(3, k))
               for k, d in enumerate(mc["dists"])]
        out["mean_convergence"] = [{k: v for k, v in r.to_dict().items() if k not in ("offsets", "ez")}
                                   for r in res]
        run.csv("mean_convergence.csv", ["dist", "offset", "expected_winner_z"],
                [[r.dist, o, e] for r in res for o, e in zip(r.offsets, r.ez)])
        plotting.mean_convergence(res, run.path("mean_convergence.svg"))
    return run.finish(out)


# -- landscape -------------------------------------------------------------------------

def cmd_landscape(args, doc: dict, threads: int) -> dict:
    cfg = doc["config"]
    if any(s <= 0 for s in cfg["sigma_grid"]):
        raise UsageError("landscape: every value of 'sigma_grid' must be positive")
    if len(cfg["mu_grid"]) < 1 or len(cfg["sigma_grid"]) < 2:
        raise UsageError("landscape: 'mu_grid' and 'sigma_grid' need at least 1 and 2 values")
    _require_positive(cfg, "true_sigma", "n_hyps", "n_data", "n_calib_hyps", "n_calib_data", "ece_budget")
    run = Run(args.out, doc)
    surf = gaussim.landscape(cfg["mu_grid"], cfg["sigma_grid"], cfg["true_sigma"], cfg["true_mu"],
                             N=cfg["n_hyps"], M=cfg["n_data"], n_calib_hyps=cfg["n_calib_hyps"],
                             n_calib_data=cfg["n_calib_data"], seed=doc["seed"])
    constrained = gaussim.ece_constrained_minmpjpe(surf, cfg["ece_budget"])
    run.json("surface.json", surf.to_dict())
    run.csv("surface.csv", ["mu", "sigma", "min_mpjpe", "ece"],
            [[m, s, surf.min_mpjpe[i, j], surf.ece[i, j]] for i, m in enumerate(surf.mu_grid)
             for j, s in enumerate(surf.sigma_grid)])
    from . import plotting
    plotting.landscape(surf, run.path("landscape.svg"), constrained)
    cell = (float(np.diff(surf.mu_grid).max()) if len(surf.mu_grid) > 1 else 0.0,
            float(np.diff(surf.sigma_grid).max()))
    return run.finish({
        "true": {"mu": surf.true_mu, "sigma": surf.true_sigma},
        "min_mpjpe_argmin": dict(zip(("mu", "sigma"), surf.argmin_min_mpjpe())),
        "ece_argmin_sigma_at_true_mu": surf.ece_argmin_sigma(surf.true_mu),
        "ece_budget": cfg["ece_budget"],
        "ece_constrained_optimum": {"mu": constrained[0], "sigma": constrained[1]},
        "grid_cell": {"mu": cell[0], "sigma": cell[1]},
    })


# -- pendulum --------------------------------------------------------------------------

def _pendulum_objects(cfg: dict):
    try:
        pcfg = PendulumConfig.from_dict(cfg["pendulum"])
        flow_cfg = FlowConfig(feature_dim=2, context_dim=2, **cfg["flow"])
        train_cfg = TrainConfig(**cfg["train"])
    except TypeError as exc:
        raise UsageError(f"pendulum config: {exc}") from exc
    if cfg["model"] not in MODELS:
        raise UsageError(f"pendulum: 'model' must be I, II or III, got {cfg['model']!r}")
    return pcfg, flow_cfg, train_cfg


def _datasets(cfg: dict, pcfg, seed: int):
    from .pendulum import make_datasets, read_datasets
    if cfg["data"]:
        try:
            ds = read_datasets(cfg["data"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise OSError(f"cannot read dataset directory {cfg['data']}: {exc}") from exc
        if ds.config != pcfg:
            raise UsageError("pendulum: dataset directory was simulated with a different pendulum config")
        return ds
    return make_datasets(pcfg, RngStream(seed).child(0), split=tuple(cfg["split"]))


def _log_rows(run: Run, name: str, logs: dict):
    run.csv(name, ["model", "epoch", "train_loss", "val_nll", "lr"],
            [[m, r["epoch"], r["train_loss"], r["val_nll"], r["lr"]] for m, l in logs.items() for r in l.epochs])


def _progress(model, row):
    print(f"[{model}] epoch {row['epoch']:3d} train {row['train_loss']:.4f} val {row['val_nll']:.4f}",
          file=sys.stderr, flush=True)


def cmd_pendulum(args, doc: dict, threads: int) -> dict:
    from . import plotting
    from .pendulum import (audit_conditions, gaussian_baseline_experiment, train_model,
                           write_datasets, zero_shot_experiment)
    cfg = doc["config"]
    seed = doc["seed"]
    pcfg, flow_cfg, train_cfg = _pendulum_objects(cfg)
    log_fn = _progress if args.verbose else None
    run = Run(args.out, doc)

    if args.action == "simulate":
        ds = _datasets(cfg, pcfg, seed)
        write_datasets(run.out / "data", ds)
        for f in sorted((run.out / "data").iterdir()):
            run.files.append(f"data/{f.name}")
        audit = audit_conditions(ds, RngStream(seed).child(1))
        tr = ds.splits["train"]
        run.csv("train_samples.csv", ["pendulum", "frame", "x1", "y1", "x2", "y2", "x3", "y3"],
                [[p, f, *x.ravel()] for p, f, x in zip(tr.pendulum, tr.frame, tr.x)])
        pick = np.linspace(0, len(tr) - 1, 4).astype(int)
        plotting.pendulum_samples({"observed": tr.c[None, pick]}, tr.x[pick], run.path("samples.svg"))
        return run.finish({"pendulum_config": pcfg.to_dict(), "config_digest": pcfg.digest(), "audit": audit,
                           "n_examples": {k: len(v) for k, v in ds.splits.items()}})

    if args.action == "train":
        ds = _datasets(cfg, pcfg, seed)
        model = cfg["model"]
        # same stream the zero-shot run gives this model, so checkpoints agree
        stream = RngStream(seed).child(2, list(MODELS).index(model))
        params, log = train_model(ds, model, flow_cfg, train_cfg, stream, log_fn)
        save_checkpoint(run.path(f"checkpoint_{model}.json"), params, seed=seed)
        _log_rows(run, "train_log.csv", {model: log})
        plotting.training_curves({model: log}, run.path("training.svg"))
        from .flow import nll
        test = ds.full("test")
        return run.finish({"model": model, "epochs": len(log.epochs), "best_epoch": log.best_epoch,
                           "stop": log.stop_reason, "test_nll_full_context": nll(params, test).item(),
                           "n_parameters": params.n_parameters()})

    if args.action == "zero-shot":
        ds = _datasets(cfg, pcfg, seed) if cfg["data"] else None
        res = zero_shot_experiment(pcfg, seed, flow_cfg, train_cfg, n_samples=cfg["n_samples"],
                                   n_scatter=cfg["n_scatter"], log_fn=log_fn, datasets=ds, threads=threads)
        for m, p in res.params.items():
            save_checkpoint(run.path(f"checkpoint_{m}.json"), p, seed=seed)
        _log_rows(run, "train_log.csv", res.logs)
        run.json("comparison.json", res.report)
        run.csv("node_errors.csv", ["node", "conditional", "prior"],
                [[k + 1, a, b] for k, (a, b) in enumerate(zip(res.report["node_error_conditional"],
                                                              res.report["node_error_prior"]))])
        plotting.pendulum_samples(res.scatter, res.truth, run.path("samples.svg"))
        plotting.training_curves(res.logs, run.path("training.svg"))
        keys = ("test_nll_full_context", "gap_masked_context", "gap_single_context", "zero_shot_closer",
                "node_error_conditional", "node_error_prior", "conditioning_helps", "ece_reference", "audit")
        return run.finish({k: res.report[k] for k in keys})

    if args.action == "baseline":
        ds = _datasets(cfg, pcfg, seed)
        b = cfg["baseline"]
        _require_positive(b, "hyps", "steps")
        rep = gaussian_baseline_experiment(pcfg, seed, n_hyps=b["hyps"], steps=b["steps"], datasets=ds)
        run.csv("sigma.csv", ["dimension", "sigma_nll", "sigma_min_mpjpe", "ratio"],
                [[i, a, c, r] for i, (a, c, r) in enumerate(zip(rep["nll"]["sigma"], rep["min_mpjpe"]["sigma"],
                                                               rep["sigma_ratio"]))])
        plotting.baseline_bars(rep, run.path("baseline.svg"))
        return run.finish(rep)
    raise UsageError(f"unknown pendulum action {args.action!r}")


# -- eval / calibrate ------------------------------------------------------------------

def _load_pair(args):
    try:
        hs = hypio.read_container(args.hypotheses)
        gt = hypio.read_container(args.ground_truth)
    except FileNotFoundError as exc:
        raise OSError(f"cannot read {exc.filename}") from exc
    if not isinstance(hs, metrics.HypothesisSet):
        raise UsageError(f"{args.hypotheses} holds ground truth, not hypotheses")
    if not isinstance(gt, metrics.GroundTruthSet):
        raise UsageError(f"{args.ground_truth} holds hypotheses, not ground truth")
    h, g = hs.hyps, gt.poses
    for axis, name in ((1, "M"), (2, "K"), (3, "D")):
        if h.shape[axis] != g.shape[axis - 1]:
            raise ShapeMismatch(name, h.shape[axis], g.shape[axis - 1])
    return hs, gt


class ShapeMismatch(UsageError):
    def __init__(self, axis: str, hyp: int, gt: int):
        super().__init__(f"{axis} differs: hypotheses have {axis}={hyp}, ground truth has {axis}={gt}")
        self.detail = {"axis": axis, "hypotheses": hyp, "ground_truth": gt}


def _quantiles(cfg) -> np.ndarray:
    q = cfg["quantiles"]
    if isinstance(q, int):
        if q < 2:
            raise UsageError("'quantiles' must be at least 2")
        return np.linspace(1.0 / q, 1.0, q)
    return np.asarray(q, dtype=float)


def _curve_outputs(run: Run, curve, title: str):
    from . import plotting
    run.json("calibration.json", curve.to_dict())
    k = curve.per_keypoint.shape[0]
    run.csv("calibration.csv", ["q", "median"] + [f"keypoint_{i}" for i in range(k)],
            [[q, m, *row] for q, m, row in zip(curve.quantiles, curve.median, curve.per_keypoint.T)])
    plotting.reliability_diagram(curve, run.path("reliability.svg"), title=title)


def cmd_eval(args, doc: dict, threads: int) -> dict:
    hs, gt = _load_pair(args)
    q = _quantiles(doc["config"])
    run = Run(args.out, doc)
    out = metrics.evaluate(hs, gt, q)
    if hs.hyps.shape[0] >= 2:
        _curve_outputs(run, metrics.calibration_curve(hs, gt, q), hs.model_id)
    out["model_id"] = hs.model_id
    run.json("metrics.json", out)
    return run.finish(out)


def cmd_calibrate(args, doc: dict, threads: int) -> dict:
    hs, gt = _load_pair(args)
    if hs.hyps.shape[0] < 2:
        raise UsageError("calibrate needs at least two hypotheses per example")
    q = _quantiles(doc["config"])
    run = Run(args.out, doc)
    curve = metrics.calibration_curve(hs, gt, q)
    _curve_outputs(run, curve, hs.model_id)
    return run.finish({"ece": curve.ece, "N": hs.hyps.shape[0], "M": hs.hyps.shape[1],
                       "K": hs.hyps.shape[2], "model_id": hs.model_id})


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, default=None, help="master seed (default 0)")
    common.add_argument("--config", help="JSON config file; may name a preset")
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--preset", help="named preset: " + ", ".join(sorted(PRESETS)))
    common.add_argument("--threads", type=_positive_int, default=None,
                        help=f"worker processes; {THREADS_ENV} overrides")
    common.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")

    p = argparse.ArgumentParser(prog="calibflow", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"calibflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("toy", parents=[common], help="fitted sigma over hypotheses and dimensions")
    t.add_argument("--dims", type=_int_list, help="comma-separated dimensions D")
    t.add_argument("--hyps", type=_int_list, help="comma-separated hypothesis counts N")
    t.add_argument("--true-sigma", type=float)
    t.add_argument("--n-seeds", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--samples", type=int, dest="M", help="data points per step")
    t.add_argument("--grid-only", action="store_true", help="skip the oracle, collapse and mean checks")

    ls = sub.add_parser("landscape", parents=[common], help="minMPJPE and ECE over a (mu, sigma) grid")
    ls.add_argument("--mu-grid", type=_grid, help="start:stop:num or comma list")
    ls.add_argument("--sigma-grid", type=_grid, help="start:stop:num or comma list")
    ls.add_argument("--ece-budget", type=float)
    ls.add_argument("--hyps", type=int, dest="n_hyps")
    ls.add_argument("--samples", type=int, dest="n_data")

    pp = sub.add_parser("pendulum", help="triple-pendulum benchmark")
    psub = pp.add_subparsers(dest="action", required=True)
    for name, hlp in (("simulate", "simulate and write datasets"), ("train", "train one model"),
                      ("zero-shot", "train models I, II, III and compare"),
                      ("baseline", "Gaussian noise on a frozen regressor")):
        a = psub.add_parser(name, parents=[common], help=hlp)
        a.add_argument("--data", help="dataset directory written by 'pendulum simulate'")
        a.add_argument("--pendulums", type=int, help="number of simulated pendulums")
        a.add_argument("--epochs", type=int)
        a.add_argument("--blocks", type=int, help="flow blocks")
        a.add_argument("--hidden", type=int, help="message width")
        if name == "train":
            a.add_argument("--model", choices=("I", "II", "III"))
        if name == "zero-shot":
            a.add_argument("--samples", type=int, dest="n_samples", help="hypotheses per test example")
        if name == "baseline":
            a.add_argument("--hyps", type=int, help="hypotheses N")
            a.add_argument("--steps", type=int, help="sigma optimisation steps")

    for name, hlp in (("eval", "all metrics for a hypothesis file"),
                      ("calibrate", "calibration curve for a hypothesis file")):
        e = sub.add_parser(name, parents=[common], help=hlp)
        e.add_argument("hypotheses", help="hypothesis container")
        e.add_argument("ground_truth", help="ground-truth container")
        e.add_argument("--quantiles", type=_positive_int, help="number of quantile levels")
    return p


def _overrides(args) -> dict:
    if args.command == "toy":
        ov = {"dims": args.dims, "hyps": args.hyps, "true_sigma": args.true_sigma, "n_seeds": args.n_seeds,
              "steps": args.steps, "M": args.M}
        if args.grid_only:
            ov.update(oracle=False, collapse=False, mean=False)
        return ov
    if args.command == "landscape":
        return {"mu_grid": args.mu_grid, "sigma_grid": args.sigma_grid, "ece_budget": args.ece_budget,
                "n_hyps": args.n_hyps, "n_data": args.n_data}
    if args.command == "pendulum":
        ov = {"data": args.data, "flow": {"n_blocks": args.blocks, "hidden": args.hidden},
              "train": {"epochs": args.epochs}, "pendulum": {"n_pendulums": args.pendulums}}
        ov["model"] = getattr(args, "model", None)
        ov["n_samples"] = getattr(args, "n_samples", None)
        ov["baseline"] = {"hyps": getattr(args, "hyps", None), "steps": getattr(args, "steps", None)}
        return _drop_none(ov)
    return {"quantiles": args.quantiles}


def _drop_none(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            v = _drop_none(v)
            if v:
                out[k] = v
        elif v is not None:
            out[k] = v
    return out


COMMANDS = {"toy": cmd_toy, "landscape": cmd_landscape, "pendulum": cmd_pendulum,
            "eval": cmd_eval, "calibrate": cmd_calibrate}


def _fail(code: int, kind: str, message: str, **detail) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code, **detail}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        threads = resolve_threads(args.threads)
        doc = resolve_config(args.command, args.seed, args.preset, args.config, _overrides(args))
        kind = f"{args.command} {args.action}" if args.command == "pendulum" else args.command
        doc["kind"] = kind
        args.out = Path(args.out or Path("runs") / kind.replace(" ", "-"))
        report = COMMANDS[args.command](args, doc, threads)
    except ShapeMismatch as exc:
        return _fail(EXIT_USAGE, "shape_mismatch", str(exc), **exc.detail)
    except (TrainingAborted, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numerical_failure", str(exc))
    except hypio.ContainerError as exc:
        return _fail(EXIT_IO, "io_failure", str(exc))
    except (UsageError, ValueError) as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io_failure", str(exc))
    print(json.dumps({"out": str(args.out), "config_hash": report["config_hash"]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
