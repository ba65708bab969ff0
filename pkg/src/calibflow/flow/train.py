"""Training loop (Adam + reduce-on-plateau) and bit-exact JSON checkpoints."""
from __future__ import annotations

import base64
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..numcore import AdamState, NonFiniteGradient, PlateauSchedule, Tape, Tensor, adam_step, plateau_update
from .graph import GraphBatch, RelationSet, augment_masks
from .model import KEEP_FRACTIONS, FlowConfig, FlowError, FlowParams, initialize_actnorm, loss_total, nll

FORMAT_VERSION = 1
OBJECTIVES = ("masked_context", "posterior")


@dataclass
class TrainConfig:
    objective: str = "masked_context"   # prior + augmented posterior; "posterior": given masks only
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 10
    lam_sample: float = 0.0
    fractions: tuple[float, ...] = KEEP_FRACTIONS

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        self.fractions = tuple(self.fractions)


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, params: FlowParams, log: TrainLog):
        super().__init__(msg)
        self.params = params
        self.log = log


def _val_metric(params: FlowParams, val: GraphBatch, cfg: TrainConfig) -> float:
    if cfg.objective == "posterior":
        return nll(params, val).item()
    return 0.5 * (nll(params, val.prior()).item() + nll(params, val).item())


def train(params: FlowParams, train_set: GraphBatch, val_set: GraphBatch, cfg: TrainConfig,
          rng, log_fn=None) -> tuple[FlowParams, TrainLog]:
    """Fit ``params``; returns the parameters with the best validation score.

    For the masked_context objective the validation posterior term uses one fixed
    augmentation of the validation contexts, drawn once from ``rng``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be nonempty")
    order_rng, aug_rng = rng.child(0), rng.child(1)
    if cfg.objective == "masked_context":
        val_set = val_set.with_mask(augment_masks(val_set.mask, cfg.fractions, rng.child(2)))
    if not params.actnorm_initialized:
        first = order_rng.permutation(len(train_set))[: cfg.batch_size]
        params = initialize_actnorm(params, train_set.select(first))
    adam = AdamState(lr=cfg.lr)
    sched = PlateauSchedule(lr=cfg.lr, patience=cfg.patience)
    log = TrainLog()
    best, best_params = np.inf, params
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = order_rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            batch = train_set.select(perm[start:start + cfg.batch_size])
            try:
                with Tape() as tape:
                    if cfg.objective == "masked_context":
                        loss = loss_total(params, batch, aug_rng, cfg.lam_sample, cfg.fractions)
                    else:
                        loss = nll(params, batch)
                        if not np.isfinite(loss.item()):
                            raise FlowError(f"non-finite loss {loss.item()}")
                grads = tape.gradient(loss, params.tensors)
                new = adam_step(params.tensors, grads, adam)
            except (FlowError, NonFiniteGradient) as exc:
                log.stop_reason = f"aborted at epoch {epoch}: {exc}"
                raise TrainingAborted(log.stop_reason, best_params, log) from exc
            params = params.with_tensors(new)
            losses.append(loss.item())
        val = _val_metric(params, val_set, cfg)
        if val < best:
            best, best_params, log.best_epoch = val, params, epoch
        lr, stop = plateau_update(sched, val)
        adam.lr = lr
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_nll": val, "lr": lr,
               "seconds": time.perf_counter() - t0}
        log.epochs.append(row)
        if log_fn:
            log_fn(row)
        if stop:
            log.stop_reason = "learning rate reduced three times"
            break
    else:
        log.stop_reason = f"epoch cap {cfg.epochs}"
    return best_params, log


# -- checkpoints --------------------------------------------------------------

def _blob(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unblob(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).copy()


def checkpoint_dict(params: FlowParams, seed: int | None = None) -> dict:
    rel = params.relations
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(params.config),
        "relations": {"parents": list(rel.parents), "context_to_target": rel.context_to_target.tolist()},
        "seed": seed,
        "actnorm_initialized": params.actnorm_initialized,
        "parameters": {k: _blob(t.data) for k, t in sorted(params.tensors.items())},
    }


def params_from_dict(d: dict) -> FlowParams:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {d.get('format_version')!r}")
    cfg = FlowConfig(**d["config"])
    rel = RelationSet(tuple(d["relations"]["parents"]), np.array(d["relations"]["context_to_target"]))
    tensors = {k: Tensor(_unblob(v), requires_grad=True, name=k) for k, v in d["parameters"].items()}
    return FlowParams(cfg, rel, tensors, bool(d["actnorm_initialized"]))


def save_checkpoint(path, params: FlowParams, seed: int | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(params, seed)))


def load_checkpoint(path) -> FlowParams:
    return params_from_dict(json.loads(Path(path).read_text()))
