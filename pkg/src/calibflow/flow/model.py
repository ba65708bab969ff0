"""Conditional graph normalizing flow: blocks, likelihood, sampling and losses.

One block maps target node features ``z`` (B x n x D_f) as

    actnorm -> split off dimension i = l mod D_f -> two relational
    message-passing layers on the merged graph (x2 | c) produce (s, t) per node
    -> z1 = x1 * exp(s) + t -> cyclic shift of the feature dimensions.

Context features and the root pass through unchanged.  Absent context nodes
are masked, which is the same as removing them from the graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..metrics import HypothesisSet
from ..numcore import Tensor, ad
from .graph import GraphBatch, GraphError, RelationSet, augment_masks

KEEP_FRACTIONS = (0.2, 0.4, 0.6, 0.8)
LOG_2PI = math.log(2 * math.pi)


class FlowError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    feature_dim: int
    context_dim: int
    n_blocks: int = 10
    hidden: int = 100
    root_dim: int = 3
    s_max: float = 2.0
    shift: int = 2

    def __post_init__(self):
        if self.feature_dim < 1 or self.context_dim < 1 or self.n_blocks < 1 or self.hidden < 1:
            raise ValueError(f"invalid flow config {self}")

    def split_index(self, block: int) -> int:
        return block % self.feature_dim

    def roll(self) -> int:
        return self.shift % self.feature_dim


@dataclass(frozen=True)
class FlowParams:
    config: FlowConfig
    relations: RelationSet
    tensors: dict[str, Tensor] = field(compare=False)
    actnorm_initialized: bool = False

    def with_tensors(self, tensors: dict[str, Tensor], **kw) -> "FlowParams":
        return replace(self, tensors=dict(tensors), **kw)

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def _layer_inputs(cfg: FlowConfig, layer: int) -> dict[str, int]:
    if layer == 1:
        return {"forward": cfg.feature_dim - 1, "backward": cfg.feature_dim - 1,
                "context": cfg.context_dim, "root": cfg.root_dim}
    return {"forward": cfg.hidden, "backward": cfg.hidden, "context": cfg.hidden, "root": cfg.root_dim}


def init_params(cfg: FlowConfig, relations: RelationSet, rng) -> FlowParams:
    """Message nets get fan-in scaled random weights and small random biases;
    the last update map is zero so every block starts as the identity."""
    W = cfg.hidden
    t: dict[str, np.ndarray] = {}
    for b in range(cfg.n_blocks):
        t[f"b{b}.an.loc"] = np.zeros(cfg.feature_dim)
        t[f"b{b}.an.log_scale"] = np.zeros(cfg.feature_dim)
        for layer in (1, 2):
            for kind, d_in in _layer_inputs(cfg, layer).items():
                t[f"b{b}.m{layer}.{kind}.w"] = rng.normal((max(d_in, 1), W)) / math.sqrt(max(d_in, 1))
                t[f"b{b}.m{layer}.{kind}.b"] = rng.normal(W, std=0.1)
        t[f"b{b}.g1.w"] = rng.normal((W, W)) / math.sqrt(W)
        t[f"b{b}.g1.b"] = np.zeros(W)
        t[f"b{b}.g2.w"] = np.zeros((W, 2))
        t[f"b{b}.g2.b"] = np.zeros(2)
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()}
    return FlowParams(cfg, relations, tensors)


# -- building blocks ----------------------------------------------------------

def feature_split(H, block: int):
    """(pass-through column i = block mod D_f, remaining columns)."""
    H = ad.as_tensor(H)
    D = H.shape[-1]
    if D < 2:
        raise ValueError(f"feature split needs D_f >= 2, got {D}")
    return _split(H, block % D)


def _split(H: Tensor, i: int):
    D = H.shape[-1]
    x1 = H[..., i:i + 1]
    parts = [p for p in (H[..., :i] if i else None, H[..., i + 1:] if i + 1 < D else None) if p is not None]
    x2 = None if not parts else (parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1))
    return x1, x2


def _unsplit(x1: Tensor, x2: Tensor | None, i: int) -> Tensor:
    if x2 is None:
        return x1
    parts = [p for p in (x2[..., :i] if i else None, x1, x2[..., i:] if i < x2.shape[-1] else None)
             if p is not None]
    return ad.concat(parts, axis=-1)


def _roll(z: Tensor, k: int) -> Tensor:
    D = z.shape[-1]
    k %= D
    if k == 0:
        return z
    return ad.concat([z[..., D - k:], z[..., :D - k]], axis=-1)


def _psi(p: dict[str, Tensor], prefix: str, h) -> Tensor:
    return ad.relu(ad.matmul(h, p[prefix + ".w"]) + p[prefix + ".b"])


def message_pass(h_target: Tensor | None, h_context: Tensor, mask: np.ndarray, root: np.ndarray,
                 relations: RelationSet, p: dict[str, Tensor], prefix: str, hidden: int,
                 update: str):
    """One relational layer.  Returns (updated node states, context embeddings).

    Messages from every relation kind are summed into each target node, then
    the update map ``update`` (an affine layer) is applied.
    """
    for kind in ("forward", "backward", "context", "root"):
        if f"{prefix}.{kind}.w" not in p:
            raise KeyError(f"missing message-net parameters for relation {kind!r} ({prefix})")
    B, n = len(mask), relations.n_targets
    agg = None
    if h_target is not None:
        for kind, (src, dst) in relations.target_edges().items():
            if len(src):
                msg = _psi(p, f"{prefix}.{kind}", ad.gather(h_target, src, axis=1))
                s = ad.scatter_add(msg, dst, n, axis=1)
                agg = s if agg is None else agg + s
    maskt = Tensor(np.asarray(mask)[..., None])
    ctx = _psi(p, f"{prefix}.context", h_context) * maskt
    src, dst = relations.context_edges()
    if len(src):
        s = ad.scatter_add(ad.gather(ctx, src, axis=1), dst, n, axis=1)
        agg = s if agg is None else agg + s
    kids = relations.root_children()
    if len(kids):
        ind = np.zeros((n, 1))
        ind[kids] = 1.0
        s = Tensor(ind) * _psi(p, f"{prefix}.root", Tensor(np.asarray(root)[None, :]))
        agg = s if agg is None else agg + s
    if agg is None:
        agg = Tensor(np.zeros((B, n, hidden)))
    elif agg.shape[0] != B:
        agg = agg + Tensor(np.zeros((B, n, hidden)))
    out = ad.matmul(agg, p[update + ".w"]) + p[update + ".b"]
    return out, ctx


def _shift_and_scale(x2, batch: GraphBatch, p, b: int, cfg: FlowConfig):
    ctx = Tensor(batch.context)
    h1, c1 = message_pass(x2, ctx, batch.mask, batch.root, batch.relations, p, f"b{b}.m1",
                          cfg.hidden, f"b{b}.g1")
    st, _ = message_pass(h1, c1, batch.mask, batch.root, batch.relations, p, f"b{b}.m2",
                         cfg.hidden, f"b{b}.g2")
    s = cfg.s_max * ad.tanh(st[..., 0:1] * (1.0 / cfg.s_max))
    if not np.all(np.isfinite(s.data)):
        raise FlowError(f"non-finite coupling scale in block {b}")
    return s, st[..., 1:2]


def actnorm_forward(z, loc, log_scale):
    """y = (z + loc) * exp(log_scale); per-node log-det is sum(log_scale)."""
    ls = ad.as_tensor(log_scale)
    if np.any(np.isneginf(ls.data)):
        raise FlowError("actnorm scale is zero")
    return (ad.as_tensor(z) + loc) * ad.exp(ls), ad.sum(ls)


def actnorm_inverse(y, loc, log_scale):
    return ad.as_tensor(y) * ad.exp(-ad.as_tensor(log_scale)) - loc


def coupling_forward(x1, s, t):
    z1 = ad.as_tensor(x1) * ad.exp(s) + t
    return z1, ad.sum(s, axis=(1, 2))


def coupling_inverse(z1, s, t):
    return (ad.as_tensor(z1) - t) * ad.exp(-ad.as_tensor(s))


# -- the whole flow -----------------------------------------------------------

def _check(params: FlowParams, batch: GraphBatch):
    cfg = params.config
    if batch.context.shape[2] != cfg.context_dim:
        raise GraphError(f"context dim {batch.context.shape[2]} != configured {cfg.context_dim}")
    if batch.relations.n_targets != params.relations.n_targets:
        raise GraphError("batch and flow disagree on the number of target nodes")


def _block_forward(z: Tensor, batch: GraphBatch, p: dict[str, Tensor], b: int, cfg: FlowConfig):
    n = z.shape[1]
    z, ld_an = actnorm_forward(z, p[f"b{b}.an.loc"], p[f"b{b}.an.log_scale"])
    i = cfg.split_index(b)
    x1, x2 = _split(z, i)
    s, t = _shift_and_scale(x2, batch, p, b, cfg)
    z1, ld = coupling_forward(x1, s, t)
    return _roll(_unsplit(z1, x2, i), cfg.roll()), ld + ld_an * n


def flow_forward(params: FlowParams, batch: GraphBatch, x=None):
    """Map targets to latents.  Returns (z: B x n x D_f, log-det: B)."""
    _check(params, batch)
    if not params.actnorm_initialized:
        raise FlowError("actnorm not initialized; call initialize_actnorm on a batch first")
    z = ad.as_tensor(batch.target if x is None else x)
    logdet = Tensor(np.zeros(z.shape[0]))
    for b in range(params.config.n_blocks):
        z, ld = _block_forward(z, batch, params.tensors, b, params.config)
        logdet = logdet + ld
    return z, logdet


def flow_inverse(params: FlowParams, batch: GraphBatch, z) -> Tensor:
    _check(params, batch)
    cfg, p = params.config, params.tensors
    x = ad.as_tensor(z)
    for b in reversed(range(cfg.n_blocks)):
        x = _roll(x, -cfg.roll())
        i = cfg.split_index(b)
        z1, x2 = _split(x, i)
        s, t = _shift_and_scale(x2, batch, p, b, cfg)
        x = _unsplit(coupling_inverse(z1, s, t), x2, i)
        x = actnorm_inverse(x, p[f"b{b}.an.loc"], p[f"b{b}.an.log_scale"])
    return x


def log_prob(params: FlowParams, batch: GraphBatch, x=None) -> Tensor:
    z, logdet = flow_forward(params, batch, x)
    n_dim = z.shape[1] * z.shape[2]
    out = ad.sum(z * z, axis=(1, 2)) * -0.5 - 0.5 * n_dim * LOG_2PI + logdet
    bad = np.nonzero(~np.isfinite(out.data))[0]
    if bad.size:
        raise FlowError(f"non-finite log-probability for examples {bad.tolist()[:10]}")
    return out


def initialize_actnorm(params: FlowParams, batch: GraphBatch) -> FlowParams:
    """Data-dependent init: each actnorm whitens its input on ``batch``."""
    _check(params, batch)
    cfg = params.config
    tensors = dict(params.tensors)
    z = Tensor(batch.target)
    for b in range(cfg.n_blocks):
        flat = z.data.reshape(-1, cfg.feature_dim)
        mu, sd = flat.mean(0), flat.std(0)
        if np.any(sd <= 0):
            raise FlowError(f"zero variance in actnorm init batch at block {b}: {sd}")
        tensors[f"b{b}.an.loc"] = Tensor(-mu, requires_grad=True, name=f"b{b}.an.loc")
        tensors[f"b{b}.an.log_scale"] = Tensor(-np.log(sd), requires_grad=True, name=f"b{b}.an.log_scale")
        z, _ = _block_forward(z, batch, tensors, b, cfg)
    return replace(params, tensors=tensors, actnorm_initialized=True)


def sample(params: FlowParams, batch: GraphBatch, n_samples: int, rng, unit: str = "m",
           model_id: str = "") -> HypothesisSet:
    """``n_samples`` hypotheses per example of ``batch`` (targets ignored)."""
    rep = batch.repeat_context(n_samples)
    cfg = params.config
    z = rng.normal((len(rep), params.relations.n_targets, cfg.feature_dim))
    x = flow_inverse(params, rep, z).data
    x = x.reshape(len(batch), n_samples, *x.shape[1:]).swapaxes(0, 1)
    return HypothesisSet(x, unit=unit, seed=getattr(rng, "seed", None), model_id=model_id)


def mode_sample(params: FlowParams, batch: GraphBatch) -> Tensor:
    """f^-1(0, c): the image of the source mode."""
    shape = (len(batch), params.relations.n_targets, params.config.feature_dim)
    return flow_inverse(params, batch, np.zeros(shape))


def nll(params: FlowParams, batch: GraphBatch) -> Tensor:
    """Mean negative log-likelihood per example (nats)."""
    return ad.mean(-log_prob(params, batch))


def node_mpjpe(pred, target) -> Tensor:
    """Mean Euclidean error per node, averaged over the batch."""
    d = ad.as_tensor(pred) - target
    return ad.mean(ad.sqrt(ad.sum(d * d, axis=-1) + 1e-12))


def loss_total(params: FlowParams, batch: GraphBatch, rng=None, lam_sample: float = 0.0,
               fractions=KEEP_FRACTIONS, augment: bool = True) -> Tensor:
    """1/2 (L_prior + L_post) + lam_sample * L_sample.

    With ``augment`` the posterior term keeps a random fraction of each
    example's available context nodes; otherwise ``batch.mask`` is used as is.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")

    post = batch.with_mask(augment_masks(batch.mask, fractions, rng)) if augment else batch
    loss = (nll(params, batch.prior()) + nll(params, post)) * 0.5
    if lam_sample:
        loss = loss + node_mpjpe(mode_sample(params, post), batch.target) * lam_sample
    if not np.isfinite(loss.item()):
        raise FlowError(f"non-finite loss {loss.item()}")
    return loss
