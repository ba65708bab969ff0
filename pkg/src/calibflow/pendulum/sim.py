"""Planar triple pendulum: RK4 on joint angles, positions by forward kinematics.

Angles are measured from the downward vertical.  Link ``i`` has length
``l_i`` and carries a point mass ``m_i`` at its far end; node 0 is the fixed
pivot at the origin.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..numcore import RngStream


class IntegratorError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PendulumConfig:
    n_pendulums: int = 50
    n_timesteps: int = 25
    velocity_var: float = 10.0
    noise: float = 5e-2
    noise_is_std: bool = False      # read ``noise`` as a variance unless set
    lengths: tuple[float, float, float] = (1.0, 1.0, 1.0)
    masses: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gravity: float = 9.81
    dt: float = 0.02                # interval between recorded frames
    substeps: int = 4               # RK4 steps per frame
    max_energy_drift: float = 1e-4

    def __post_init__(self):
        if min(self.lengths) <= 0 or min(self.masses) <= 0 or self.dt <= 0:
            raise ValueError("lengths, masses and dt must be positive")
        if self.n_pendulums < 1 or self.n_timesteps < 1 or self.substeps < 1:
            raise ValueError("counts must be positive")
        if self.velocity_var < 0 or self.noise < 0:
            raise ValueError("variances must be non-negative")

    @property
    def noise_std(self) -> float:
        return self.noise if self.noise_is_std else float(np.sqrt(self.noise))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "PendulumConfig":
        d = dict(d)
        for k in ("lengths", "masses"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Trajectories:
    """Per pendulum and frame: angles, angular velocities, node positions (4 nodes, x0 fixed)."""

    theta: np.ndarray       # P x T x 3
    omega: np.ndarray       # P x T x 3
    positions: np.ndarray   # P x T x 4 x 2
    energy: np.ndarray      # P x T
    config: PendulumConfig = field(repr=False)

    @property
    def free_nodes(self) -> np.ndarray:
        return self.positions[:, :, 1:]


def _mass_tail(masses) -> np.ndarray:
    m = np.asarray(masses, dtype=float)
    tail = np.cumsum(m[::-1])[::-1]                      # mu_i = sum_{k >= i} m_k
    return tail[np.maximum.outer(np.arange(3), np.arange(3))]


def accelerations(theta: np.ndarray, omega: np.ndarray, cfg: PendulumConfig) -> np.ndarray:
    """Solve M(theta) theta'' = -C(theta, omega) - G(theta) for a batch of states (... x 3)."""
    l = np.asarray(cfg.lengths)
    mu = _mass_tail(cfg.masses)
    tail = np.diag(mu)
    d = theta[..., :, None] - theta[..., None, :]
    ll = np.outer(l, l)
    M = mu * ll * np.cos(d)
    C = np.einsum("...ij,...j->...i", mu * ll * np.sin(d), omega ** 2)
    G = cfg.gravity * tail * l * np.sin(theta)
    return np.linalg.solve(M, (-C - G)[..., None])[..., 0]


def positions(theta: np.ndarray, cfg: PendulumConfig) -> np.ndarray:
    l = np.asarray(cfg.lengths)
    steps = np.stack([l * np.sin(theta), -l * np.cos(theta)], axis=-1)   # ... x 3 x 2
    pos = np.cumsum(steps, axis=-2)
    zero = np.zeros(pos.shape[:-2] + (1, 2))
    return np.concatenate([zero, pos], axis=-2)


def energy(theta: np.ndarray, omega: np.ndarray, cfg: PendulumConfig) -> np.ndarray:
    """Total mechanical energy T + V."""
    l = np.asarray(cfg.lengths)
    m = np.asarray(cfg.masses)
    lw = l * omega
    vx = np.cumsum(lw * np.cos(theta), axis=-1)
    vy = np.cumsum(lw * np.sin(theta), axis=-1)
    kinetic = 0.5 * np.sum(m * (vx ** 2 + vy ** 2), axis=-1)
    y = np.cumsum(-l * np.cos(theta), axis=-1)
    return kinetic + cfg.gravity * np.sum(m * y, axis=-1)


def rest_energy(cfg: PendulumConfig) -> float:
    """Potential energy of the hanging equilibrium (the minimum of T + V)."""
    return -cfg.gravity * float(np.sum(np.diag(_mass_tail(cfg.masses)) * np.asarray(cfg.lengths)))


def energy_drift(e: np.ndarray, cfg: PendulumConfig) -> np.ndarray:
    """|E_t - E_0| relative to the energy above the resting state (P x T)."""
    scale = np.maximum(e[:, :1] - rest_energy(cfg), 1e-12)
    return np.abs(e - e[:, :1]) / scale


def rk4_step(theta, omega, cfg: PendulumConfig):
    h = cfg.dt / cfg.substeps

    def f(th, om):
        return om, accelerations(th, om, cfg)

    k1t, k1o = f(theta, omega)
    k2t, k2o = f(theta + 0.5 * h * k1t, omega + 0.5 * h * k1o)
    k3t, k3o = f(theta + 0.5 * h * k2t, omega + 0.5 * h * k2o)
    k4t, k4o = f(theta + h * k3t, omega + h * k3o)
    return (theta + h / 6 * (k1t + 2 * k2t + 2 * k3t + k4t),
            omega + h / 6 * (k1o + 2 * k2o + 2 * k3o + k4o))


def simulate(cfg: PendulumConfig, rng: RngStream, theta0=None, omega0=None) -> Trajectories:
    """Start hanging straight down with random joint velocities; record ``n_timesteps`` frames.

    Each pendulum draws its initial velocity from its own child stream, so
    pendulum ``p`` is the same regardless of how many are simulated.
    """
    P, T = cfg.n_pendulums, cfg.n_timesteps
    if omega0 is None:
        sd = float(np.sqrt(cfg.velocity_var))
        omega0 = np.stack([rng.child(p).normal(3, std=sd) for p in range(P)])
    th = np.zeros((P, 3)) if theta0 is None else np.array(theta0, dtype=float).reshape(P, 3)
    om = np.array(omega0, dtype=float).reshape(P, 3)
    thetas, omegas = [th], [om]
    for _ in range(T - 1):
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(cfg.substeps):
                th, om = rk4_step(th, om, cfg)
        if not (np.all(np.isfinite(th)) and np.all(np.isfinite(om))):
            raise IntegratorError("non-finite state in pendulum integration")
        thetas.append(th)
        omegas.append(om)
    theta = np.stack(thetas, axis=1)
    omega = np.stack(omegas, axis=1)
    e = energy(theta, omega, cfg)
    drift = energy_drift(e, cfg)
    if drift.max() > cfg.max_energy_drift:
        worst = int(drift.max(axis=1).argmax())
        raise IntegratorError(f"energy drift {drift.max():.2e} on pendulum {worst} exceeds "
                              f"{cfg.max_energy_drift:.0e}; raise substeps")
    return Trajectories(theta, omega, positions(theta, cfg), e, cfg)


def observe(x: np.ndarray, noise_std: float, rng: RngStream, mask=None):
    """Noisy copies c = x + eps of free-node positions (... x 3 x 2); masked nodes are NaN.

    Returns (observations, mask) with mask 1 where a node is observed.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("states must be finite")
    c = x + rng.normal(x.shape, std=noise_std)
    m = np.ones(x.shape[:-1]) if mask is None else np.broadcast_to(np.asarray(mask, float), x.shape[:-1])
    return np.where(m[..., None] > 0, c, np.nan), np.array(m)
