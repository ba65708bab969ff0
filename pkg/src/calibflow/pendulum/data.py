"""Pendulum datasets in flow format, the per-model conditioning audit, and file I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import hypio
from ..flow import KEEP_FRACTIONS, GraphBatch, RelationSet, augment_masks
from ..metrics import GroundTruthSet
from ..numcore import RngStream
from .sim import PendulumConfig, observe, simulate

RELATIONS = RelationSet.chain(3)
SPLITS = ("train", "val", "test")

# which context nodes each model is trained with
MODELS = {
    "I": {"objective": "posterior", "mask": (1, 1, 1)},
    "II": {"objective": "posterior", "mask": (1, 0, 0)},
    "III": {"objective": "masked_context", "mask": (1, 1, 1), "fractions": KEEP_FRACTIONS},
}


class AuditError(ValueError):
    pass


@dataclass
class Split:
    x: np.ndarray            # E x 3 x 2 free-node positions
    c: np.ndarray            # E x 3 x 2 noisy observations of every node
    pendulum: np.ndarray     # E pendulum ids
    frame: np.ndarray        # E frame indices

    def __len__(self) -> int:
        return len(self.x)

    def batch(self, mask=(1, 1, 1)) -> GraphBatch:
        m = np.broadcast_to(np.asarray(mask, dtype=float), (len(self), 3))
        return GraphBatch(RELATIONS, self.x, self.c * m[..., None], m.copy())


@dataclass
class PendulumDatasets:
    config: PendulumConfig
    splits: dict[str, Split]
    seed: int | None = None

    def model_batch(self, split: str, model: str) -> GraphBatch:
        return self.splits[split].batch(MODELS[model]["mask"])

    def full(self, split: str = "test") -> GraphBatch:
        return self.splits[split].batch((1, 1, 1))


def make_datasets(cfg: PendulumConfig, rng: RngStream, split=(0.6, 0.2, 0.2)) -> PendulumDatasets:
    """Simulate, observe and split by pendulum id (no pendulum spans two splits)."""
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {split}")
    traj = simulate(cfg, rng.child(0))
    x = traj.free_nodes                                   # P x T x 3 x 2
    c, _ = observe(x, cfg.noise_std, rng.child(1))
    P, T = x.shape[:2]
    ids = rng.child(2).permutation(P)
    n_train = int(round(split[0] * P))
    n_val = int(round(split[1] * P))
    groups = {"train": ids[:n_train], "val": ids[n_train:n_train + n_val], "test": ids[n_train + n_val:]}
    splits = {}
    for name, pids in groups.items():
        pids = np.sort(pids)
        splits[name] = Split(x[pids].reshape(-1, 3, 2), c[pids].reshape(-1, 3, 2),
                             np.repeat(pids, T), np.tile(np.arange(T), len(pids)))
    return PendulumDatasets(cfg, splits, rng.seed)


def training_masks(ds: PendulumDatasets, model: str, rng: RngStream) -> np.ndarray:
    """The context masks one training epoch of ``model`` would use."""
    model_def = MODELS[model]
    base = np.broadcast_to(np.asarray(model_def["mask"], float), (len(ds.splits["train"]), 3))
    if model_def["objective"] == "masked_context":
        return augment_masks(base, model_def["fractions"], rng)
    return base.copy()


def audit_conditions(ds: PendulumDatasets, rng: RngStream, epochs: int = 5) -> dict:
    """Check every model only sees its permitted conditioning sets; raise on violation."""
    a, b = set(ds.splits["train"].pendulum), set(ds.splits["test"].pendulum)
    v = set(ds.splits["val"].pendulum)
    if a & b or a & v or v & b:
        raise AuditError("a pendulum appears in more than one split")
    report = {}
    for model, model_def in MODELS.items():
        sizes = set()
        for e in range(epochs):
            m = training_masks(ds, model, rng.child(e))
            sizes |= set(m.sum(axis=1).astype(int).tolist())
            if model_def["objective"] == "posterior" and not np.all(m == np.asarray(model_def["mask"])):
                raise AuditError(f"model {model} trained with an unexpected mask")
        if model_def["objective"] == "masked_context":
            sizes.add(0)  # the prior term
            worst = max(int(np.floor(f * 3 + 0.5)) for f in model_def["fractions"])
            if worst >= 3 or 3 in sizes:
                raise AuditError(f"model {model} would observe all three nodes")
        report[model] = sorted(sizes)
    return report


def write_datasets(out_dir, ds: PendulumDatasets) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": ds.config.to_dict(), "config_digest": ds.config.digest(), "seed": ds.seed,
                "models": {k: {**v, "fractions": list(v.get("fractions", ()))} for k, v in MODELS.items()},
                "splits": {}}
    for name, s in ds.splits.items():
        hypio.write_ground_truth(out / f"{name}_x.cfh", GroundTruthSet(s.x, unit="m"))
        hypio.write_ground_truth(out / f"{name}_c.cfh", GroundTruthSet(s.c, unit="m"))
        manifest["splits"][name] = {"pendulum_ids": sorted(set(s.pendulum.tolist())),
                                    "pendulum": s.pendulum.tolist(), "frame": s.frame.tolist()}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_datasets(out_dir) -> PendulumDatasets:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = PendulumConfig.from_dict(manifest["config"])
    if cfg.digest() != manifest["config_digest"]:
        raise ValueError("dataset manifest digest does not match its config")
    splits = {}
    for name, meta in manifest["splits"].items():
        splits[name] = Split(hypio.read_ground_truth(out / f"{name}_x.cfh").poses,
                             hypio.read_ground_truth(out / f"{name}_c.cfh").poses,
                             np.array(meta["pendulum"]), np.array(meta["frame"]))
    return PendulumDatasets(cfg, splits, manifest.get("seed"))
