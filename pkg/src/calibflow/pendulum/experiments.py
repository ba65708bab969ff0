"""Three-model zero-shot comparison and the frozen-regressor Gaussian noise baseline."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .. import gaussim
from ..flow import (FlowConfig, FlowParams, GraphBatch, TrainConfig, TrainLog, init_params, nll,
                    sample)
from ..flow import train as train_flow
from ..metrics import calibration_curve, min_mpjpe
from ..numcore import AdamState, RngStream, Tape, Tensor, ad, adam_step
from .data import MODELS, RELATIONS, PendulumDatasets, audit_conditions, make_datasets
from .sim import PendulumConfig


def default_flow_config() -> FlowConfig:
    return FlowConfig(feature_dim=2, context_dim=2)


def sample_in_chunks(params: FlowParams, batch: GraphBatch, n: int, rng: RngStream,
                     chunk: int = 25) -> np.ndarray:
    """n hypotheses per example (N x E x 3 x 2), sampled ``chunk`` examples at a time."""
    parts = [sample(params, batch.select(np.arange(s, min(s + chunk, len(batch)))), n, rng.child(s)).hyps
             for s in range(0, len(batch), chunk)]
    return np.concatenate(parts, axis=1)


def node_errors(hyps: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Mean distance of samples to the truth, per node."""
    return np.linalg.norm(hyps - x[None], axis=-1).mean(axis=(0, 1))


@dataclass
class ZeroShotResult:
    report: dict
    params: dict[str, FlowParams] = field(repr=False)
    logs: dict[str, TrainLog] = field(repr=False)
    scatter: dict[str, np.ndarray] = field(repr=False)   # model -> N x E x 3 x 2
    truth: np.ndarray = field(repr=False)


def train_model(ds: PendulumDatasets, model: str, flow_cfg: FlowConfig, train_cfg: TrainConfig,
                rng: RngStream, log_fn=None) -> tuple[FlowParams, TrainLog]:
    model_def = MODELS[model]
    cfg = replace(train_cfg, objective=model_def["objective"], fractions=model_def.get("fractions", train_cfg.fractions))
    p0 = init_params(flow_cfg, RELATIONS, rng.child(0))
    return train_flow(p0, ds.model_batch("train", model), ds.model_batch("val", model), cfg, rng.child(1),
                      log_fn=None if log_fn is None else (lambda row: log_fn(model, row)))


def _train_job(job):
    return train_model(*job)


def zero_shot_experiment(pcfg: PendulumConfig, seed: int, flow_cfg: FlowConfig | None = None,
                         train_cfg: TrainConfig | None = None, n_samples: int = 200, n_scatter: int = 5,
                         log_fn=None, datasets: PendulumDatasets | None = None,
                         threads: int = 1) -> ZeroShotResult:
    """Train models I, II, III and compare them on the fully observed test set.

    With ``threads > 1`` the three trainings run in worker processes (no
    per-epoch ``log_fn`` then); every model owns its stream, so results do
    not depend on the worker count.
    """
    rng = RngStream(seed)
    flow_cfg = flow_cfg or default_flow_config()
    train_cfg = train_cfg or TrainConfig()
    ds = datasets or make_datasets(pcfg, rng.child(0))
    audit = audit_conditions(ds, rng.child(1))
    params, logs = {}, {}
    jobs = [(ds, model, flow_cfg, train_cfg, rng.child(2, k)) for k, model in enumerate(MODELS)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            done = list(pool.map(_train_job, jobs))
    else:
        done = [train_model(*job, log_fn) for job in jobs]
    for model, (p, log) in zip(MODELS, done):
        params[model], logs[model] = p, log
    test = ds.full("test")
    nlls = {m: nll(p, test).item() for m, p in params.items()}
    gap_III, gap_II = abs(nlls["III"] - nlls["I"]), abs(nlls["II"] - nlls["I"])

    srng = rng.child(3)
    cond = sample_in_chunks(params["III"], test, n_samples, srng.child(0))
    prior = sample_in_chunks(params["III"], test.prior(), n_samples, srng.child(1))
    err_cond, err_prior = node_errors(cond, test.target), node_errors(prior, test.target)
    ref = sample_in_chunks(params["I"], test, n_samples, srng.child(2))
    ece_I = calibration_curve(ref, test.target).ece

    pick = np.linspace(0, len(test) - 1, n_scatter).astype(int)
    scatter = {"III": cond[:, pick], "prior": prior[:, pick], "I": ref[:, pick]}
    for m in ("II",):
        scatter[m] = sample_in_chunks(params[m], test.select(pick), n_samples, srng.child(3))
    report = {
        "seed": seed,
        "pendulum_config": pcfg.to_dict(),
        "flow_config": flow_cfg.__dict__.copy(),
        "train_config": {**train_cfg.__dict__, "fractions": list(train_cfg.fractions)},
        "audit": audit,
        "n_examples": {k: len(v) for k, v in ds.splits.items()},
        "test_nll_full_context": nlls,
        "gap_masked_context": gap_III,
        "gap_single_context": gap_II,
        "zero_shot_closer": bool(gap_III < gap_II),
        "node_error_conditional": err_cond.tolist(),
        "node_error_prior": err_prior.tolist(),
        "conditioning_helps": bool(np.all(err_cond < err_prior)),
        "ece_reference": ece_I,
        "training": {m: {"epochs": len(l.epochs), "best_epoch": l.best_epoch, "stop": l.stop_reason}
                     for m, l in logs.items()},
        "scatter_examples": pick.tolist(),
    }
    return ZeroShotResult(report, params, logs, scatter, test.target[pick])


# -- Gaussian noise on top of a frozen regressor ------------------------------

@dataclass
class Regressor:
    """Fully connected net c -> x, two tanh hidden layers; frozen once trained."""

    weights: dict[str, np.ndarray]
    x_mean: np.ndarray
    x_std: np.ndarray
    c_mean: np.ndarray
    c_std: np.ndarray

    def forward(self, c: np.ndarray) -> np.ndarray:
        return _mlp({k: Tensor(v) for k, v in self.weights.items()},
                    Tensor((c.reshape(len(c), -1) - self.c_mean) / self.c_std)).data * self.x_std + self.x_mean

    def __call__(self, c: np.ndarray) -> np.ndarray:
        return self.forward(c).reshape(c.shape)


def _mlp(p, h):
    h = ad.tanh(ad.matmul(h, p["w0"]) + p["b0"])
    h = ad.tanh(ad.matmul(h, p["w1"]) + p["b1"])
    return ad.matmul(h, p["w2"]) + p["b2"]


def fit_regressor(c: np.ndarray, x: np.ndarray, c_val: np.ndarray, x_val: np.ndarray, rng: RngStream,
                  hidden: int = 64, steps: int = 3000, lr: float = 3e-3) -> tuple[Regressor, dict]:
    """Full-batch Adam on squared error; keeps the weights with the best validation error."""
    C, X = c.reshape(len(c), -1), x.reshape(len(x), -1)
    cm, cs, xm, xs = C.mean(0), C.std(0), X.mean(0), X.std(0)
    Cn, Xn = (C - cm) / cs, (X - xm) / xs
    Cv, Xv = (c_val.reshape(len(c_val), -1) - cm) / cs, (x_val.reshape(len(x_val), -1) - xm) / xs
    d_in, d_out = C.shape[1], X.shape[1]
    shapes = {"w0": (d_in, hidden), "b0": (hidden,), "w1": (hidden, hidden), "b1": (hidden,),
              "w2": (hidden, d_out), "b2": (d_out,)}
    p = {k: Tensor(rng.normal(s) / math.sqrt(s[0]) if k[0] == "w" else np.zeros(s), requires_grad=True)
         for k, s in shapes.items()}
    state = AdamState(lr=lr)
    best, best_p, best_step = np.inf, p, 0
    for t in range(steps):
        with Tape() as tape:
            r = _mlp(p, Tensor(Cn)) - Xn
            loss = ad.mean(r * r)
        p = adam_step(p, tape.gradient(loss, p), state)
        if t % 25 == 0 or t == steps - 1:
            rv = _mlp(p, Tensor(Cv)).data - Xv
            v = float(np.mean(rv * rv))
            if v < best:
                best, best_p, best_step = v, p, t
    reg = Regressor({k: v.data.copy() for k, v in best_p.items()}, xm, xs, cm, cs)
    return reg, {"val_mse_normalized": best, "best_step": best_step, "steps": steps}


def fit_sigma_nll(residuals: np.ndarray) -> np.ndarray:
    """Maximum-likelihood per-dimension std of zero-mean residuals (closed form)."""
    r = residuals.reshape(len(residuals), -1)
    return np.sqrt(np.mean(r * r, axis=0))


def fit_sigma_minmpjpe(residuals: np.ndarray, N: int, rng: RngStream, steps: int = 1500,
                       batch: int = 250, lr: float = 0.05, init=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension std minimizing minMPJPE of N hypotheses mu + sigma z (mu frozen).

    ``residuals`` are x - mu(c) (E x K x D).  Each step draws fresh z; the
    nearest hypothesis is chosen outside the tape and only its error is
    differentiated, which gives the same subgradient as the min.
    Returns (Polyak-averaged sigma, trace).
    """
    E, K, D = residuals.shape
    s0 = fit_sigma_nll(residuals) if init is None else np.broadcast_to(np.asarray(init, float), (K * D,))
    params = {"log_sigma": Tensor(np.log(s0).reshape(K, D), requires_grad=True)}
    state = AdamState(lr=lr)
    trace = np.empty((steps, K * D))
    b = min(batch, E)
    rows = np.arange(b)
    for t in range(steps):
        r = residuals[rng.integers(0, E, b)]                       # b x K x D
        z = rng.normal((b, N, K, D))
        sig = np.exp(params["log_sigma"].data)
        err = np.linalg.norm(sig * z - r[:, None], axis=-1).mean(-1)   # b x N
        zw = z[rows, err.argmin(axis=1)]
        with Tape() as tape:
            d = ad.exp(params["log_sigma"]) * Tensor(zw) - Tensor(r)
            loss = ad.mean(ad.sqrt(ad.sum(d * d, axis=-1) + 1e-300))
        state.lr = gaussim.decayed_lr(t, steps, lr)
        params = adam_step(params, tape.gradient(loss, params), state)
        trace[t] = np.exp(params["log_sigma"].data).ravel()
    q = max(steps // 4, 1)
    return trace[-q:].mean(axis=0), trace


def gaussian_baseline_experiment(pcfg: PendulumConfig, seed: int, n_hyps: int = 200, steps: int = 1500,
                                 datasets: PendulumDatasets | None = None) -> dict:
    """Fit sigma by minMPJPE and by NLL on a frozen mean predictor; compare on the test split."""
    rng = RngStream(seed)
    ds = datasets or make_datasets(pcfg, rng.child(0))
    tr, va, te = ds.splits["train"], ds.splits["val"], ds.splits["test"]
    reg, reg_info = fit_regressor(tr.c, tr.x, va.c, va.x, rng.child(1))
    res = tr.x - reg(tr.c)
    sig_nll = fit_sigma_nll(res)
    sig_mm, _ = fit_sigma_minmpjpe(res, n_hyps, rng.child(2), steps=steps)
    mu_te = reg(te.c)
    z = rng.child(3).normal((n_hyps,) + te.x.shape)           # common random numbers for both models
    out = {"seed": seed, "n_hyps": n_hyps, "regressor": reg_info,
           "test_mpjpe_of_mean": float(np.linalg.norm(mu_te - te.x, axis=-1).mean())}
    for name, sig in (("nll", sig_nll), ("min_mpjpe", sig_mm)):
        hyps = mu_te[None] + sig.reshape(1, 1, 3, 2) * z
        out[name] = {"sigma": sig.tolist(), "min_mpjpe": min_mpjpe(hyps, te.x)[0],
                     "ece": calibration_curve(hyps, te.x).ece,
                     "nll": gaussim.gaussian_nll((te.x - mu_te).reshape(len(te.x), -1), 0.0, sig)}
    out["sigma_ratio"] = (np.asarray(out["min_mpjpe"]["sigma"]) / sig_nll).tolist()
    out["checks"] = {
        "sigma_minmpjpe_below_nll": bool(np.all(sig_mm < sig_nll)),
        "nll_model_better_calibrated": bool(out["nll"]["ece"] < out["min_mpjpe"]["ece"]),
        "minmpjpe_model_better_min_mpjpe": bool(out["min_mpjpe"]["min_mpjpe"] <= out["nll"]["min_mpjpe"]),
    }
    return out
