"""Gaussian toy studies showing how minMPJPE training miscalibrates.

All studies use a single joint (K = 1) whose D coordinates are drawn from an
isotropic normal.  Gradients of the sample-based objectives are taken by
reparameterisation (``x_hat = mu + sigma * z``) on the numcore tape; the
``min`` over hypotheses is handled by selecting the winning ``z`` first,
which yields the same (sub)gradient as differentiating through the minimum.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import curve_fit

from . import metrics
from .numcore import AdamState, RngStream, Tape, Tensor, ad, adam_step

PRESETS = {
    "fig1b": {"dims": [1, 2, 5, 10, 20, 45, 100], "hyps": [1, 2, 5, 10, 50, 200, 1000],
              "true_sigma": 0.5, "seeds": [0, 1, 2]},
    "fig1d": {"mu_grid": np.linspace(-4.0, 4.0, 41).tolist(),
              "sigma_grid": np.linspace(0.2, 8.2, 41).tolist(),
              "true_sigma": 4.0, "true_mu": 0.0, "n_hyps": 5, "n_data": 20000,
              "n_calib_hyps": 200, "n_calib_data": 2000},
}


# -- shared helpers ---------------------------------------------------------------

def _nearest(delta: np.ndarray, z: np.ndarray, sigma: float) -> np.ndarray:
    """Index of the hypothesis ``sigma * z[b, n]`` closest to ``delta[b]``."""
    # |s z - d|^2 = s^2 |z|^2 - 2 s z.d + |d|^2 ; the last term is constant in n
    score = sigma * sigma * np.einsum("bnd,bnd->bn", z, z) - 2.0 * sigma * np.einsum("bnd,bd->bn", z, delta)
    return score.argmin(axis=1)


def polyak_average(trace: np.ndarray) -> tuple[float, bool]:
    """Average of the final quarter; converged when the last two quarters agree within 2%."""
    q = max(len(trace) // 4, 1)
    tail, prev = trace[-q:].mean(), trace[-2 * q:-q].mean() if len(trace) >= 2 * q else trace.mean()
    return float(tail), bool(abs(tail - prev) <= 0.02 * abs(tail))


def gaussian_nll(x: np.ndarray, mu, sigma) -> float:
    """Mean negative log-likelihood of rows of ``x`` under N(mu, diag(sigma^2))."""
    x = np.atleast_2d(x)
    d = x.shape[1]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (d,))
    r = (x - mu) / sigma
    return float(np.mean(0.5 * np.sum(r * r, axis=1) + np.sum(np.log(sigma)) + 0.5 * d * math.log(2 * math.pi)))


def decayed_lr(step: int, steps: int, lr: float, final_ratio: float = 0.05) -> float:
    return lr * final_ratio ** (step / max(steps - 1, 1))


# -- sigma optimised on minMPJPE over (D, N) ------------------------------------------

@dataclass
class SigmaFit:
    D: int
    N: int
    true_sigma: float
    sigma_hat: float
    iterations: int
    converged: bool
    init_sigma: float
    trace: np.ndarray = field(repr=False, default=None)


def _hypothesis_stats(rng: RngStream, shape, D: int) -> tuple[np.ndarray, np.ndarray]:
    """Projection ``a`` of z ~ N(0, I_D) on a fixed unit vector, and the orthogonal |z|^2.

    The distance |sigma z - delta| depends on z only through these two
    independent quantities (a ~ N(0, 1), rest ~ chi^2 with D - 1 dof), so
    drawing them is exact and costs O(1) instead of O(D) per hypothesis.
    """
    a = rng.normal(shape)
    rest = rng.chisquare(D - 1, shape) if D > 1 else np.zeros(shape)
    return a, rest


def optimize_sigma_minmpjpe(D: int, N: int, true_sigma: float = 0.5, M: int = 5000,
                            rng: RngStream | None = None, steps: int = 2000, batch: int = 500,
                            lr: float = 0.05, init_sigma: float | None = None,
                            max_draws: int = 100_000) -> SigmaFit:
    """Fit the scale of an isotropic normal with the true mean by minimising minMPJPE.

    ``M`` data points are drawn once; every step uses a minibatch of them and
    fresh hypotheses.  For large N the minibatch shrinks so a step draws at
    most ``max_draws`` hypotheses (never below 32 data points).  The returned
    estimate is the average of the last quarter of the iterates.
    """
    if D < 1 or N < 1:
        raise ValueError(f"need D >= 1 and N >= 1, got D={D}, N={N}")
    rng = rng or RngStream(0)
    data = rng.normal((M, D), std=true_sigma)     # mu* = 0, so data are offsets from the mean
    dnorm = np.linalg.norm(data, axis=1)
    init = true_sigma if init_sigma is None else init_sigma
    params = {"log_sigma": Tensor(math.log(init), requires_grad=True)}
    state = AdamState(lr=lr)
    trace = np.empty(steps)
    b = min(batch, M, max(32, max_draws // N))
    rows = np.arange(b)
    for t in range(steps):
        r = dnorm[rng.integers(0, M, b)]
        a, rest = _hypothesis_stats(rng, (b, N), D)
        zz = a * a + rest
        sigma = math.exp(params["log_sigma"].item())
        win = (sigma * zz - 2.0 * a * r[:, None]).argmin(axis=1)
        zz_w, a_w = zz[rows, win], a[rows, win]
        with Tape() as tape:
            s = ad.exp(params["log_sigma"])
            sq = s * s * Tensor(zz_w) - 2.0 * s * Tensor(a_w * r) + Tensor(r * r)
            loss = ad.mean(ad.sqrt(ad.maximum(sq, 1e-300)))
        state.lr = decayed_lr(t, steps, lr)
        params = adam_step(params, tape.gradient(loss, params), state)
        trace[t] = math.exp(params["log_sigma"].item())
    sigma_hat, converged = polyak_average(trace)
    if sigma_hat < 1e-3 * true_sigma:
        converged = True  # collapsed onto the mean; the drift toward 0 is the optimum
    return SigmaFit(D, N, true_sigma, sigma_hat, steps, converged, init, trace)


@dataclass
class GridStudyResult:
    dims: list[int]
    hyps: list[int]
    true_sigma: float
    seeds: list[int]
    rows: list[dict]

    def sigma_table(self) -> np.ndarray:
        """Seed-averaged sigma_hat with shape (len(dims), len(hyps))."""
        tab = np.zeros((len(self.dims), len(self.hyps)))
        for i, d in enumerate(self.dims):
            for j, n in enumerate(self.hyps):
                vals = [r["sigma_hat"] for r in self.rows if r["D"] == d and r["N"] == n]
                tab[i, j] = float(np.mean(vals))
        return tab

    def trend_violations(self, tol: float = 0.05) -> list[str]:
        """Cells breaking 'sigma_hat grows with N, shrinks with D' beyond relative ``tol``."""
        tab = self.sigma_table()
        bad = []
        for i in range(len(self.dims)):
            for j in range(len(self.hyps) - 1):
                if tab[i, j] > tab[i, j + 1] * (1 + tol) + 1e-12:
                    bad.append(f"D={self.dims[i]}: N={self.hyps[j]} -> {self.hyps[j + 1]} "
                               f"sigma {tab[i, j]:.4f} > {tab[i, j + 1]:.4f}")
        for j in range(len(self.hyps)):
            for i in range(len(self.dims) - 1):
                if tab[i, j] * (1 + tol) + 1e-12 < tab[i + 1, j]:
                    bad.append(f"N={self.hyps[j]}: D={self.dims[i]} -> {self.dims[i + 1]} "
                               f"sigma {tab[i, j]:.4f} < {tab[i + 1, j]:.4f}")
        return bad


def _grid_cell(args) -> dict:
    d, n, seed, cell, kw = args
    try:
        fit = optimize_sigma_minmpjpe(d, n, rng=RngStream(seed, cell), **kw)
        return {"D": d, "N": n, "seed": seed, "sigma_hat": fit.sigma_hat,
                "iterations": fit.iterations, "converged": fit.converged}
    except (FloatingPointError, ValueError) as exc:
        return {"D": d, "N": n, "seed": seed, "sigma_hat": float("nan"),
                "iterations": 0, "converged": False, "error": str(exc)}


def grid_study(dims, hyps, true_sigma: float = 0.5, seeds=(0, 1, 2), M: int = 5000,
               steps: int = 2000, batch: int = 500, lr: float = 0.05, threads: int = 1) -> GridStudyResult:
    kw = dict(true_sigma=true_sigma, M=M, steps=steps, batch=batch, lr=lr)
    jobs = [(int(d), int(n), int(s), (i, j), kw)
            for i, d in enumerate(dims) for j, n in enumerate(hyps) for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_grid_cell, jobs))
    else:
        rows = [_grid_cell(j) for j in jobs]
    return GridStudyResult([int(d) for d in dims], [int(n) for n in hyps], true_sigma,
                           [int(s) for s in seeds], rows)


def min_mpjpe_gaussian(x: np.ndarray, mu, sigma, N: int, rng: RngStream, chunk: int = 500) -> float:
    """Monte Carlo minMPJPE of N(mu, sigma^2 I) hypotheses against rows of ``x``."""
    M, D = x.shape
    total = 0.0
    for start in range(0, M, chunk):
        xs = x[start:start + chunk]
        z = rng.normal((N, len(xs), 1, D))
        total += metrics.min_mpjpe(mu + sigma * z, xs[:, None, :])[1].sum()
    return total / M


def oracle_comparison(D: int = 45, N: int = 200, true_sigma: float = 0.5, sigma_hat: float | None = None,
                      M: int = 10000, rng: RngStream | None = None, **fit_kw) -> dict:
    """Score the minMPJPE-fitted normal and the true one on minMPJPE and NLL.

    Both models see the same data and the same standard-normal draws.
    """
    rng = rng or RngStream(0)
    if sigma_hat is None:
        sigma_hat = optimize_sigma_minmpjpe(D, N, true_sigma, rng=rng.child(0), **fit_kw).sigma_hat
    x = rng.child(1).normal((M, D), std=true_sigma)
    mu = np.zeros(D)
    return {
        "D": D, "N": N, "M": M, "true_sigma": true_sigma, "sigma_hat": sigma_hat,
        "min_mpjpe_fit": min_mpjpe_gaussian(x, mu, sigma_hat, N, rng.child(2)),
        "min_mpjpe_oracle": min_mpjpe_gaussian(x, mu, true_sigma, N, rng.child(2)),
        "nll_fit": gaussian_nll(x, mu, sigma_hat),
        "nll_oracle": gaussian_nll(x, mu, true_sigma),
    }


# -- MPJPE collapse and mean convergence --------------------------------------------

def mpjpe_collapse_check(sigma_grid, M: int = 10000, N: int = 10, true_sigma: float = 1.0,
                         rng: RngStream | None = None) -> dict:
    """Mean squared error over hypotheses (not the min) as a function of sigma.

    Common random numbers across the grid keep the curve smooth.
    """
    rng = rng or RngStream(0)
    sigma_grid = np.asarray(sigma_grid, dtype=float)
    x = rng.normal((M, 1), std=true_sigma)
    z = rng.normal((M, N))
    loss = np.array([np.mean((x - s * z) ** 2) for s in sigma_grid])
    return {"sigma": sigma_grid, "loss": loss, "data_variance": float(np.mean(x ** 2)),
            "argmin_sigma": float(sigma_grid[int(np.argmin(loss))]),
            "monotone": bool(np.all(np.diff(loss) > 0))}


def _sample_data(dist: str, rng: RngStream, shape) -> np.ndarray:
    if dist == "normal":
        return rng.normal(shape)
    if dist == "exponential":
        return rng.exponential(shape)
    raise ValueError(f"unknown data distribution {dist!r}")


DATA_MEAN = {"normal": 0.0, "exponential": 1.0}


def _sigmoid_profile(d, amp, slope):
    return amp * np.tanh(0.5 * slope * d)


@dataclass
class MeanConvergence:
    dist: str
    N: int
    sigma: float
    mu_hat: float
    data_mean: float
    sigma_hat: float
    offsets: np.ndarray
    ez: np.ndarray
    sigmoid_amp: float
    sigmoid_slope: float
    sigmoid_rmse: float

    @property
    def error(self) -> float:
        return abs(self.mu_hat - self.data_mean)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["offsets"], d["ez"] = self.offsets.tolist(), self.ez.tolist()
        d["error"] = self.error
        return d


def expected_winner(offset: float, dist: str, N: int, sigma: float, rng: RngStream,
                    M: int = 20000) -> float:
    """Monte Carlo E[z*] when the model mean sits ``offset`` below the data mean."""
    mu = DATA_MEAN[dist] - offset
    x = _sample_data(dist, rng, (M, 1))
    z = rng.normal((M, N, 1))
    idx = _nearest(x - mu, z, sigma)
    return float(z[np.arange(M), idx, 0].mean())


def mean_convergence_check(N: int = 5, sigma: float = 1.0, dist: str = "normal", steps: int = 3000,
                           rng: RngStream | None = None, batch: int = 2000, lr: float = 0.05,
                           fit_sigma: bool = False, init_offset: float = 1.0,
                           offsets=None) -> MeanConvergence:
    """Optimise the mean of q = N(mu, sigma^2) on the squared minMPJPE of N hypotheses.

    Also tabulates E[z*] against (E[x] - mu) and fits ``C * tanh(a d / 2)``.
    """
    rng = rng or RngStream(0)
    target = DATA_MEAN[dist]
    params = {"mu": Tensor(target + init_offset * sigma, requires_grad=True),
              "log_sigma": Tensor(math.log(sigma), requires_grad=fit_sigma)}
    trainable = {k: v for k, v in params.items() if v.requires_grad}
    state = AdamState(lr=lr)
    trace_mu, trace_sigma = np.empty(steps), np.empty(steps)
    for t in range(steps):
        x = _sample_data(dist, rng, (batch, 1))
        z = rng.normal((batch, N, 1))
        s_val = math.exp(params["log_sigma"].item())
        z_best = z[np.arange(batch), _nearest(x - params["mu"].item(), z, s_val)]
        with Tape() as tape:
            r = Tensor(x) - params["mu"] - ad.exp(params["log_sigma"]) * Tensor(z_best)
            loss = ad.mean(r * r)
        state.lr = decayed_lr(t, steps, lr * sigma)
        params.update(adam_step(trainable, tape.gradient(loss, trainable), state))
        trainable = {k: params[k] for k in trainable}
        trace_mu[t] = params["mu"].item()
        trace_sigma[t] = math.exp(params["log_sigma"].item())
    mu_hat, _ = polyak_average(trace_mu)
    sigma_hat = float(trace_sigma[-max(steps // 4, 1):].mean())

    offsets = np.linspace(-3 * sigma, 3 * sigma, 13) if offsets is None else np.asarray(offsets, float)
    prof_rng = rng.child(99)
    ez = np.array([expected_winner(o, dist, N, sigma_hat, prof_rng) for o in offsets])
    try:
        (amp, slope), _ = curve_fit(_sigmoid_profile, offsets, ez, p0=(max(abs(ez).max(), 1e-3), 1.0),
                                    maxfev=10000)
        rmse = float(np.sqrt(np.mean((_sigmoid_profile(offsets, amp, slope) - ez) ** 2)))
    except RuntimeError:
        amp, slope, rmse = float("nan"), float("nan"), float("nan")
    return MeanConvergence(dist, N, sigma, mu_hat, target, sigma_hat, offsets, ez,
                           float(amp), float(slope), rmse)


def brute_force_mean(dist: str, N: int, sigma: float, mu_grid, rng: RngStream, M: int = 200000) -> float:
    """Grid minimiser of the squared minMPJPE over mu, using common random numbers."""
    x = _sample_data(dist, rng, (M, 1))
    z = rng.normal((M, N))
    vals = [np.mean(np.min((x - mu - sigma * z) ** 2, axis=1)) for mu in mu_grid]
    return float(np.asarray(mu_grid)[int(np.argmin(vals))])


# -- (mu, sigma) landscapes --------------------------------------------------------

@dataclass
class LandscapeSurface:
    mu_grid: np.ndarray
    sigma_grid: np.ndarray
    min_mpjpe: np.ndarray   # len(mu) x len(sigma)
    ece: np.ndarray
    true_mu: float
    true_sigma: float
    n_hyps: int
    n_data: int
    n_calib_hyps: int
    n_calib_data: int
    seed: int

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if not isinstance(v, np.ndarray)}
        for k in ("mu_grid", "sigma_grid", "min_mpjpe", "ece"):
            out[k] = getattr(self, k).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LandscapeSurface":
        d = dict(d)
        for k in ("mu_grid", "sigma_grid", "min_mpjpe", "ece"):
            d[k] = np.asarray(d[k], dtype=float)
        return cls(**d)

    def argmin_min_mpjpe(self) -> tuple[float, float]:
        i, j = np.unravel_index(np.argmin(self.min_mpjpe), self.min_mpjpe.shape)
        return float(self.mu_grid[i]), float(self.sigma_grid[j])

    def ece_argmin_sigma(self, mu: float) -> float:
        i = int(np.argmin(np.abs(self.mu_grid - mu)))
        return float(self.sigma_grid[int(np.argmin(self.ece[i]))])

    def ece_manifold(self) -> np.ndarray:
        """Per mu row, the sigma minimising ECE."""
        return self.sigma_grid[np.argmin(self.ece, axis=1)]


def landscape(mu_grid, sigma_grid, true_sigma: float = 4.0, true_mu: float = 0.0, N: int = 5,
              M: int = 20000, n_calib_hyps: int = 200, n_calib_data: int = 2000,
              seed: int = 0) -> LandscapeSurface:
    """minMPJPE and ECE of N(mu, sigma^2) hypotheses against N(true_mu, true_sigma^2) data.

    minMPJPE uses ``N`` hypotheses per data point; the calibration curve needs
    a dense empirical CDF and uses ``n_calib_hyps``.  Every cell shares the
    same random draws.
    """
    mu_grid = np.asarray(mu_grid, dtype=float)
    sigma_grid = np.asarray(sigma_grid, dtype=float)
    if np.any(sigma_grid <= 0):
        raise ValueError("sigma grid must be strictly positive")
    rng = RngStream(seed)
    x = true_mu + true_sigma * rng.normal((M, 1))
    z = rng.normal((M, N))
    xc = true_mu + true_sigma * rng.normal((n_calib_data, 1, 1))
    zc = rng.normal((n_calib_hyps, n_calib_data, 1, 1))
    mm = np.empty((len(mu_grid), len(sigma_grid)))
    ee = np.empty_like(mm)
    for j, s in enumerate(sigma_grid):
        err = np.abs(x[None] - mu_grid[:, None, None] - s * z[None])   # mu x M x N
        mm[:, j] = err.min(axis=2).mean(axis=1)
        for i, mu in enumerate(mu_grid):
            ee[i, j] = metrics.calibration_curve(mu + s * zc, xc).ece
    return LandscapeSurface(mu_grid, sigma_grid, mm, ee, true_mu, true_sigma, N, M,
                            n_calib_hyps, n_calib_data, seed)


def ece_constrained_minmpjpe(surface: LandscapeSurface, ece_budget: float) -> tuple[float, float]:
    """Cell with the lowest minMPJPE among those whose ECE is within budget."""
    feasible = surface.ece <= ece_budget
    if not feasible.any():
        raise ValueError(f"no grid cell has ECE <= {ece_budget}; smallest ECE on the grid is "
                         f"{surface.ece.min():.4f}, use a larger budget")
    masked = np.where(feasible, surface.min_mpjpe, np.inf)
    i, j = np.unravel_index(np.argmin(masked), masked.shape)
    return float(surface.mu_grid[i]), float(surface.sigma_grid[j])
