"""Sample-based pose metrics and quantile calibration of hypothesis sets.

Arrays follow the layout ``hyps[n, m, k, d]`` (hypothesis, example, keypoint,
coordinate) and ``gt[m, k, d]``.  Functions accept either raw arrays or the
:class:`HypothesisSet` / :class:`GroundTruthSet` containers; the containers
carry a unit tag that the millimetre-based metrics check.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNITS = ("m", "mm")
DEFAULT_QUANTILES = np.linspace(0.01, 1.0, 100)


class UnitError(ValueError):
    pass


@dataclass
class GroundTruthSet:
    poses: np.ndarray
    unit: str = "mm"

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 3 or self.poses.shape[-1] not in (2, 3):
            raise ValueError(f"ground truth must be M x K x D with D in {{2, 3}}, got {self.poses.shape}")
        if not np.all(np.isfinite(self.poses)):
            raise ValueError("ground truth contains non-finite entries")
        if self.unit not in UNITS:
            raise UnitError(f"unknown unit {self.unit!r}")


@dataclass
class HypothesisSet:
    hyps: np.ndarray
    unit: str = "mm"
    seed: int | None = None
    model_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hyps = np.asarray(self.hyps, dtype=np.float64)
        if self.hyps.ndim != 4:
            raise ValueError(f"hypotheses must be N x M x K x D, got shape {self.hyps.shape}")
        if self.hyps.shape[0] < 1:
            raise ValueError("a hypothesis set needs N >= 1")
        if self.unit not in UNITS:
            raise UnitError(f"unknown unit {self.unit!r}")


@dataclass
class CalibrationCurve:
    quantiles: np.ndarray
    per_keypoint: np.ndarray  # K x Q
    median: np.ndarray        # Q
    ece: float

    def to_dict(self) -> dict:
        return {"quantiles": self.quantiles.tolist(), "per_keypoint": self.per_keypoint.tolist(),
                "median": self.median.tolist(), "ece": self.ece}


def _unwrap(obj) -> tuple[np.ndarray, str | None]:
    if isinstance(obj, HypothesisSet):
        return obj.hyps, obj.unit
    if isinstance(obj, GroundTruthSet):
        return obj.poses, obj.unit
    return np.asarray(obj, dtype=np.float64), None


def _pair(hyps, gt) -> tuple[np.ndarray, np.ndarray, str | None]:
    h, hu = _unwrap(hyps)
    g, gu = _unwrap(gt)
    if hu is not None and gu is not None and hu != gu:
        raise UnitError(f"hypotheses are in {hu!r} but ground truth is in {gu!r}")
    if h.ndim != 4:
        raise ValueError(f"hypotheses must be N x M x K x D, got {h.shape}")
    if h.shape[0] < 1:
        raise ValueError("need at least one hypothesis (N >= 1)")
    if h.shape[1:] != g.shape:
        raise ValueError(f"hypotheses {h.shape} do not match ground truth {g.shape}")
    return h, g, hu or gu


def _require_mm(unit: str | None, metric: str) -> None:
    if unit is not None and unit != "mm":
        raise UnitError(f"{metric} is defined in millimetres, data is in {unit!r}")


def joint_errors(pred, gt) -> np.ndarray:
    """Euclidean distance per (..., k) between matching joints."""
    return np.linalg.norm(np.asarray(pred) - np.asarray(gt), axis=-1)


def mpjpe(pred, gt) -> float:
    p, _ = _unwrap(pred)
    g, _ = _unwrap(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} does not match ground truth {g.shape}")
    return float(joint_errors(p, g).mean())


def best_hypothesis(hyps, gt) -> tuple[np.ndarray, np.ndarray]:
    """Index of the lowest-MPJPE hypothesis per example, and its per-joint errors."""
    h, g, _ = _pair(hyps, gt)
    err = joint_errors(h, g[None])          # N x M x K
    idx = err.mean(axis=2).argmin(axis=0)   # M
    return idx, err[idx, np.arange(h.shape[1])]


def min_mpjpe(hyps, gt) -> tuple[float, np.ndarray]:
    """Mean over examples of the best hypothesis' MPJPE, plus the per-example values."""
    h, g, _ = _pair(hyps, gt)
    per_m = joint_errors(h, g[None]).mean(axis=2).min(axis=0)
    return float(per_m.mean()), per_m


def pck(hyps, gt, radius: float = 150.0) -> float:
    h, g, unit = _pair(hyps, gt)
    _require_mm(unit, "PCK")
    _, err = best_hypothesis(h, g)
    return float(100.0 * np.mean(err <= radius))


def cps(hyps, gt, max_radius: float = 300.0) -> float:
    """Area (mm) under the fraction-of-correct-poses curve for r in [0, max_radius].

    A pose is correct at radius r when every joint of its best hypothesis lies
    within r.  The curve is a step function in r, so the area is computed
    exactly as the mean of ``max_radius - clip(max_error, 0, max_radius)``.
    """
    h, g, unit = _pair(hyps, gt)
    _require_mm(unit, "CPS")
    _, err = best_hypothesis(h, g)
    worst = err.max(axis=1)
    return float(np.mean(max_radius - np.clip(worst, 0.0, max_radius)))


def median_pose(hyps) -> np.ndarray:
    h, _ = _unwrap(hyps)
    if h.shape[0] < 1:
        raise ValueError("need at least one hypothesis")
    return np.median(h, axis=0)


def ece(omega, quantiles=None) -> float:
    omega = np.asarray(omega, dtype=np.float64)
    q = DEFAULT_QUANTILES if quantiles is None else np.asarray(quantiles, dtype=np.float64)
    if omega.shape != q.shape:
        raise ValueError(f"curve has {omega.shape} points but the grid has {q.shape}")
    return float(np.mean(np.abs(omega - q)))


def quantile_levels(hyps, gt) -> np.ndarray:
    """Empirical-CDF level of the ground truth's distance from the median, per (m, k).

    Uses the right-continuous CDF ``(1/N) #{n : eps_n <= eps*}``.
    """
    h, g, _ = _pair(hyps, gt)
    if h.shape[0] < 2:
        raise ValueError("calibration needs at least two hypotheses (N >= 2)")
    med = np.median(h, axis=0)
    eps = joint_errors(h, med[None])       # N x M x K
    eps_star = joint_errors(g, med)        # M x K
    return (eps <= eps_star[None]).mean(axis=0)


def calibration_curve(hyps, gt, quantiles=None) -> CalibrationCurve:
    q = DEFAULT_QUANTILES if quantiles is None else np.asarray(quantiles, dtype=np.float64)
    if np.any(np.diff(q) < 0) or q.min() < 0 or q.max() > 1:
        raise ValueError("quantile grid must be ascending within [0, 1]")
    levels = quantile_levels(hyps, gt)     # M x K
    # tolerance keeps k/N == q comparisons exact despite float grids
    hits = levels.T[:, :, None] <= q[None, None, :] + 1e-12   # K x M x Q
    per_k = hits.mean(axis=1)
    med = np.median(per_k, axis=0)
    return CalibrationCurve(q, per_k, med, ece(med, q))


def evaluate(hyps, gt, quantiles=None) -> dict:
    """All metrics for one hypothesis file, as a flat JSON-ready mapping."""
    h, g, unit = _pair(hyps, gt)
    out = {"unit": unit or "unspecified", "N": h.shape[0], "M": h.shape[1], "K": h.shape[2],
           "D": h.shape[3]}
    out["min_mpjpe"], _ = min_mpjpe(h, g)
    if unit in (None, "mm"):
        out["pck150"] = pck(h, g)
        out["cps"] = cps(h, g)
    if h.shape[0] >= 2:
        curve = calibration_curve(h, g, quantiles)
        out["ece"] = curve.ece
    return out
