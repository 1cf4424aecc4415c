"""Euler-Maruyama stepping of the interacting and the frozen-law particle systems."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LengthMismatch, NonFiniteState, ShapeMismatch
from .measure import EmpiricalMeasure
from .model import CoefficientSet
from .noise import NoiseBundle, TimeGrid


@dataclass(frozen=True)
class ParticleCloud:
    states: np.ndarray   # (N, d)
    time_index: int
    grid: TimeGrid

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def t(self) -> float:
        return self.grid.t(self.time_index)

    @property
    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states)


@dataclass
class Trajectory:
    """All particle states on the grid, ``states[k]`` being the cloud at ``t_k``."""

    states: np.ndarray   # (K+1, N, d)
    grid: TimeGrid
    noise: NoiseBundle | None = None
    model: CoefficientSet | None = None

    def cloud(self, k: int) -> ParticleCloud:
        return ParticleCloud(self.states[k], k, self.grid)

    @property
    def clouds(self) -> list[ParticleCloud]:
        return [self.cloud(k) for k in range(self.states.shape[0])]

    def measure(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[k])

    @property
    def measures(self) -> list[EmpiricalMeasure]:
        return [self.measure(k) for k in range(self.states.shape[0])]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def euler_update(model, t, X, mu, dt, dW0, dW1):
    """One Euler-Maruyama step for a batch of states driven by law ``mu``.

    ``dW0`` has shape ``(m0,)`` and is shared; ``dW1`` has shape ``(n, m)``.
    """
    b = model.drift(t, X, mu)
    s0 = model.sigma0(t, X, mu)
    s1 = model.sigma1(t, X, mu)
    return X + b * dt + s0 @ dW0 + np.einsum("ndm,nm->nd", s1, dW1)


def _check(Xn, k):
    if not np.all(np.isfinite(Xn)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(Xn), axis=1))[0])
        raise NonFiniteState(k, bad)


def step_ips(model: CoefficientSet, cloud: ParticleCloud, dW0, dW1) -> ParticleCloud:
    """Advance the interacting system by one step using its own empirical measure."""
    X = cloud.states
    dW0 = np.asarray(dW0, dtype=float).reshape(model.dims.m0)
    dW1 = np.asarray(dW1, dtype=float).reshape(len(X), model.dims.m)
    Xn = euler_update(model, cloud.t, X, EmpiricalMeasure(X), cloud.grid.dt, dW0, dW1)
    _check(Xn, cloud.time_index + 1)
    return ParticleCloud(Xn, cloud.time_index + 1, cloud.grid)


def _init_array(model, init, N):
    X0 = np.array(init, dtype=float)
    if X0.ndim == 1:
        X0 = X0[:, None] if model.dims.d == 1 else X0[None]
    if X0.shape != (N, model.dims.d):
        raise ShapeMismatch(f"initial states have shape {X0.shape}, expected ({N}, {model.dims.d})")
    _check(X0, 0)
    return X0


def _check_noise(model, noise):
    if noise.m0 != model.dims.m0 or noise.m != model.dims.m:
        raise ShapeMismatch(f"noise dims (m0={noise.m0}, m={noise.m}) do not match model {model.dims}")


def simulate_ips(model: CoefficientSet, noise: NoiseBundle, init) -> Trajectory:
    """Simulate the N-particle interacting system over the whole grid."""
    _check_noise(model, noise)
    grid = noise.grid
    X = _init_array(model, init, noise.N)
    states = np.empty((grid.K + 1,) + X.shape)
    states[0] = X
    for k in range(grid.K):
        X = euler_update(model, grid.t(k), X, EmpiricalMeasure(X), grid.dt, noise.dW0[k], noise.dW1[:, k])
        _check(X, k + 1)
        states[k + 1] = X
    return Trajectory(states, grid, noise, model)


def simulate_frozen(model: CoefficientSet, noise: NoiseBundle, init,
                    frozen_law: Sequence[EmpiricalMeasure] | Trajectory) -> Trajectory:
    """Decoupled dynamics: the law argument is an exogenous measure sequence.

    Passing a :class:`Trajectory` uses its empirical measures, so feeding a
    run's own output back in with the same noise reproduces it exactly.
    """
    _check_noise(model, noise)
    grid = noise.grid
    laws = frozen_law.measures if isinstance(frozen_law, Trajectory) else list(frozen_law)
    if len(laws) != grid.K + 1:
        raise LengthMismatch(f"frozen law has {len(laws)} entries, grid needs {grid.K + 1}")
    X = _init_array(model, init, noise.N)
    states = np.empty((grid.K + 1,) + X.shape)
    states[0] = X
    for k in range(grid.K):
        X = euler_update(model, grid.t(k), X, laws[k], grid.dt, noise.dW0[k], noise.dW1[:, k])
        _check(X, k + 1)
        states[k + 1] = X
    return Trajectory(states, grid, noise, model)


def conditional_mean(cloud) -> np.ndarray:
    """Particle estimate of the mean of the conditional law."""
    states = cloud.states if isinstance(cloud, ParticleCloud) else np.asarray(cloud)
    if len(states) < 1:
        raise ValueError("empty cloud")
    return states.mean(axis=0)


def moment_report(traj: Trajectory) -> dict:
    """Pathwise second moments ``sup_t |X_t^i|^2`` summarized over particles."""
    sq = np.einsum("kni,kni->kn", traj.states, traj.states)
    sup = sq.max(axis=0)
    return {
        "mean_sup_sq": float(sup.mean()),
        "max_particle_sup_sq": float(sup.max()),
        "initial_second_moment": float(sq[0].mean()),
    }


def export_csv(traj: Trajectory, path) -> None:
    """One row per (step, particle) with full-precision coordinates."""
    K1, N, d = traj.states.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "particle"] + [f"x{j}" for j in range(d)])
        for k in range(K1):
            for i in range(N):
                w.writerow([k, i] + ["%.17g" % v for v in traj.states[k, i]])


def export_summary(traj: Trajectory, path) -> dict:
    summary = {
        "K": traj.grid.K, "T": traj.grid.T, "N": traj.states.shape[1], "d": traj.states.shape[2],
        "terminal_mean": conditional_mean(traj.states[-1]).tolist(),
        **moment_report(traj),
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary
