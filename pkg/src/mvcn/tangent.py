"""Tangent systems of the particle approximation.

Four linear systems share one per-step linear operator:

* ``D0``: derivative with respect to the common increments,
* ``D1``: derivative with respect to one particle's idiosyncratic increments,
* ``w``: first variation of a frozen-law pilot in its initial point,
* ``Gamma``: derivative in the initial law, driven by a pilot source ``Psi``.

The conditional expectation over idiosyncratic noise that appears in the
limit equations is replaced by the particle average over the cloud, which is
exactly the coupling produced by differentiating the empirical projection.

All tangents are the exact derivatives of the Euler scheme: the derivative
with respect to the increment on cell ``[t_s, t_{s+1})`` equals
``sigma(t_s, X_s)`` at ``t_{s+1}`` and is propagated from there.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .engine import Trajectory, _check, _check_noise, _init_array, euler_update
from .errors import DerivativeUnavailable, NotInitialized, PilotOutOfSync
from .measure import EmpiricalMeasure
from .model import CoefficientSet
from .noise import NoiseBundle, companion


def _require_derivatives(model):
    if not model.has_derivatives:
        raise DerivativeUnavailable(f"model {model.name!r} has no derivative callbacks")


class Linearization:
    """The linear map ``D -> D + G D + (coupling) D`` of one Euler step.

    ``G`` gathers the spatial gradients weighted by ``dt``, the common
    increment and each particle's own idiosyncratic increment. The coupling
    is the weighted sum over particles of the Lions kernels, stored densely
    (``O(N^2 d^2)``) or through low-rank factors for separable models.
    """

    def __init__(self, model: CoefficientSet, t: float, X, mu: EmpiricalMeasure, dt: float,
                 dW0, dW1, *, force_dense: bool = False):
        _require_derivatives(model)
        self.model, self.t, self.X, self.mu, self.dt = model, t, X, mu, dt
        self.dW0 = np.asarray(dW0, dtype=float)
        self.dW1 = np.asarray(dW1, dtype=float)
        n = len(X)
        self.G = (model.grad_drift(t, X, mu) * dt
                  + np.einsum("njpq,j->npq", model.grad_sigma0(t, X, mu), self.dW0)
                  + np.einsum("njpq,nj->npq", model.grad_sigma1(t, X, mu), self.dW1))
        self.dense = force_dense or not model.separable
        w = mu.w
        if self.dense:
            C = model.step_kernel(t, X, mu, dt, self.dW0, self.dW1)
            C *= w[None, :, None, None]
            d = X.shape[1]
            # (n, p, k, q) -> (n d) x (k d) matrix acting on stacked tangents
            C = C.reshape(n, n, d, d) if d == 1 else np.ascontiguousarray(C.transpose(0, 2, 1, 3))
            self.C = C.reshape(n * d, n * d)
        else:
            (Ab, Pb), (A0, P0), (A1, P1) = model.lions_factors(t, X, mu, mu.points)
            blocks_A = [Ab[:, 0] * dt]
            blocks_P = [Pb[:, 0]]
            for j in range(A0.shape[1]):
                blocks_A.append(A0[:, j] * self.dW0[j])
                blocks_P.append(P0[:, j])
            for j in range(A1.shape[1]):
                blocks_A.append(A1[:, j] * self.dW1[:, j, None, None])
                blocks_P.append(P1[:, j])
            self.A = np.concatenate(blocks_A, axis=2)                   # (n, d, R)
            self.P = np.concatenate(blocks_P, axis=1) * w[:, None, None]  # (n, R, d)

    def coupling(self, D: np.ndarray) -> np.ndarray:
        """Particle-averaged Lions term applied to tangents ``D`` of shape ``(n, d, q)``."""
        n, d, q = D.shape
        if self.dense:
            return (self.C @ D.reshape(n * d, q)).reshape(n, d, q)
        agg = np.einsum("krd,kdq->rq", self.P, D)
        return np.einsum("ndr,rq->ndq", self.A, agg)

    def apply(self, D: np.ndarray, couple: bool = True) -> np.ndarray:
        out = D + self.G @ D
        if couple:
            out += self.coupling(D)
        return out

    def pilot_source(self, Y, Wv, alpha) -> np.ndarray:
        """Measure-derivative source from pilots ``Y`` with first variations ``Wv``.

        Returns ``sum_p alpha_p K(x_i, y_p) Wv_p`` for every cloud particle,
        where ``K`` combines the drift and both diffusion Lions kernels with
        their increments. Shape ``(n, d, d)``.
        """
        m, t, X, mu = self.model, self.t, self.X, self.mu
        K = (m.lions_drift(t, X, mu, Y) * self.dt
             + np.einsum("npjab,j->npab", m.lions_sigma0(t, X, mu, Y), self.dW0)
             + np.einsum("npjab,nj->npab", m.lions_sigma1(t, X, mu, Y), self.dW1))
        return np.einsum("npab,pbc,p->nac", K, Wv, alpha)


def _cloud_lin(model, cloud_states, t, dt, dW0, dW1, lin, force_dense=False):
    if lin is not None:
        return lin
    return Linearization(model, t, cloud_states, EmpiricalMeasure(cloud_states), dt, dW0, dW1,
                         force_dense=force_dense)


# --- common-noise Malliavin derivative ------------------------------------

@dataclass
class TangentD0:
    """``D^0_s X^i_t`` for a batch of differentiation indices ``s``.

    ``mats`` has shape ``(N, d, S, m0)``. Blocks with ``s > t`` are zero.
    """

    s_indices: np.ndarray
    mats: np.ndarray
    time_index: int
    born: np.ndarray

    @classmethod
    def start(cls, s_indices, N: int, d: int, m0: int, time_index: int = 0):
        s = np.sort(np.atleast_1d(np.asarray(s_indices, dtype=int)))
        if np.any(s < time_index):
            raise NotInitialized("cannot start a tangent after its differentiation time")
        return cls(s, np.zeros((N, d, len(s), m0)), time_index, np.zeros(len(s), bool))

    def sync(self, model, cloud_states, t):
        """Set blocks born at the current index to ``sigma0(t_s, X_s, mu_s)``."""
        new = (self.s_indices == self.time_index) & ~self.born
        if new.any():
            s0 = model.sigma0(t, cloud_states, EmpiricalMeasure(cloud_states))
            self.mats[:, :, new, :] = s0[:, :, None, :]
            self.born = self.born | new
        return self

    def at(self, j: int) -> np.ndarray:
        """Matrices ``(N, d, m0)`` of the j-th differentiation index."""
        return self.mats[:, :, j, :]


def step_tangent_d0(model: CoefficientSet, cloud, tangent: TangentD0, dW0, dW1, *,
                    lin: Linearization | None = None, force_dense: bool = False) -> TangentD0:
    """Advance ``D^0`` from the cloud's time index to the next one."""
    _require_derivatives(model)
    k = cloud.time_index
    if tangent.time_index != k:
        raise NotInitialized(f"tangent at index {tangent.time_index}, cloud at {k}")
    tangent.sync(model, cloud.states, cloud.t)
    lin = _cloud_lin(model, cloud.states, cloud.t, cloud.grid.dt, dW0, dW1, lin, force_dense)
    mats = tangent.mats.copy()
    act = tangent.s_indices < k
    if act.any():
        N, d, _, m0 = mats.shape
        D = mats[:, :, act, :].reshape(N, d, -1)
        mats[:, :, act, :] = lin.apply(D).reshape(N, d, int(act.sum()), m0)
    return TangentD0(tangent.s_indices, mats, k + 1, tangent.born.copy())


@dataclass
class DirectionalD0:
    """``V_t = sum_{s < t} D^0_s X_t h'(t_s) dt`` for Cameron-Martin directions ``h'``.

    By linearity this is the superposition of the ``D0`` blocks weighted by
    ``h'``, propagated with the same step map, so one column per direction
    replaces the whole batch of differentiation indices. ``hprime`` has shape
    ``(K, m0, q)``; ``vecs`` has shape ``(N, d, q)``.
    """

    hprime: np.ndarray
    vecs: np.ndarray
    time_index: int

    @classmethod
    def start(cls, hprime, N: int, d: int):
        h = np.asarray(hprime, dtype=float)
        if h.ndim == 1:
            h = h[:, None, None]
        elif h.ndim == 2:
            h = h[:, :, None]
        return cls(h, np.zeros((N, d, h.shape[2])), 0)


def step_directional_d0(model: CoefficientSet, cloud, tangent: DirectionalD0, dW0, dW1, *,
                        lin: Linearization | None = None) -> DirectionalD0:
    _require_derivatives(model)
    k = cloud.time_index
    if tangent.time_index != k:
        raise NotInitialized(f"tangent at index {tangent.time_index}, cloud at {k}")
    lin = _cloud_lin(model, cloud.states, cloud.t, cloud.grid.dt, dW0, dW1, lin)
    s0 = model.sigma0(cloud.t, cloud.states, lin.mu)
    vecs = lin.apply(tangent.vecs) if k > 0 else tangent.vecs.copy()
    vecs += (s0 @ tangent.hprime[k]) * cloud.grid.dt
    return DirectionalD0(tangent.hprime, vecs, k + 1)


# --- idiosyncratic Malliavin derivative -----------------------------------

@dataclass
class TangentD1:
    """``D^{1,owner}_s X_t``.

    Default mode tracks the owner only (``mats`` shape ``(S, d, m)``) and
    drops the O(1/N) cross-particle responses; ``exact=True`` keeps every
    particle (``mats`` shape ``(N, d, S, m)``) with the full coupling.
    """

    owner: int
    s_indices: np.ndarray
    mats: np.ndarray
    time_index: int
    born: np.ndarray
    exact: bool = False

    @classmethod
    def start(cls, owner: int, s_indices, N: int, d: int, m: int, *, exact=False, time_index=0):
        s = np.sort(np.atleast_1d(np.asarray(s_indices, dtype=int)))
        if np.any(s < time_index):
            raise NotInitialized("cannot start a tangent after its differentiation time")
        shape = (N, d, len(s), m) if exact else (len(s), d, m)
        return cls(int(owner), s, np.zeros(shape), time_index, np.zeros(len(s), bool), exact)

    def sync(self, model, cloud_states, t):
        new = (self.s_indices == self.time_index) & ~self.born
        if new.any():
            s1 = model.sigma1(t, cloud_states, EmpiricalMeasure(cloud_states))[self.owner]
            if self.exact:
                self.mats[self.owner][:, new, :] = s1[:, None, :]
            else:
                self.mats[new] = s1
            self.born = self.born | new
        return self

    def owner_mats(self) -> np.ndarray:
        """``(S, d, m)`` derivative of the owner particle."""
        return self.mats[self.owner].transpose(1, 0, 2) if self.exact else self.mats


def step_tangent_d1(model: CoefficientSet, cloud, tangent: TangentD1, dW0, dW1, *,
                    lin: Linearization | None = None) -> TangentD1:
    _require_derivatives(model)
    k = cloud.time_index
    if tangent.time_index != k:
        raise NotInitialized(f"tangent at index {tangent.time_index}, cloud at {k}")
    tangent.sync(model, cloud.states, cloud.t)
    mats = tangent.mats.copy()
    act = tangent.s_indices < k
    if act.any():
        if tangent.exact:
            lin = _cloud_lin(model, cloud.states, cloud.t, cloud.grid.dt, dW0, dW1, lin)
            N, d, _, m = mats.shape
            D = mats[:, :, act, :].reshape(N, d, -1)
            mats[:, :, act, :] = lin.apply(D).reshape(N, d, int(act.sum()), m)
        else:
            G = lin.G[tangent.owner] if lin is not None else _owner_G(model, cloud, tangent.owner, dW0, dW1)
            mats[act] = mats[act] + G @ mats[act]
    return replace(tangent, mats=mats, time_index=k + 1, born=tangent.born.copy())


def _owner_G(model, cloud, i, dW0, dW1):
    X, mu, t, dt = cloud.states, cloud.measure, cloud.t, cloud.grid.dt
    x = X[i:i + 1]
    dW1 = np.asarray(dW1, dtype=float).reshape(len(X), -1)
    return (model.grad_drift(t, x, mu)[0] * dt
            + np.einsum("jpq,j->pq", model.grad_sigma0(t, x, mu)[0], np.asarray(dW0, dtype=float))
            + np.einsum("jpq,j->pq", model.grad_sigma1(t, x, mu)[0], dW1[i]))


# --- first variation of frozen-law pilots ----------------------------------

@dataclass
class FirstVariation:
    """Jacobians ``w_t`` of pilot flows in their initial points, shape ``(P, d, d)``."""

    mats: np.ndarray
    time_index: int
    s_index: int = 0

    @classmethod
    def start(cls, P: int, d: int, time_index: int = 0):
        return cls(np.broadcast_to(np.eye(d), (P, d, d)).copy(), time_index, time_index)


def pilot_G(model, t, Y, law, dt, dW0, dWp):
    return (model.grad_drift(t, Y, law) * dt
            + np.einsum("njpq,j->npq", model.grad_sigma0(t, Y, law), np.asarray(dW0, dtype=float))
            + np.einsum("njpq,nj->npq", model.grad_sigma1(t, Y, law), np.asarray(dWp, dtype=float)))


def step_first_variation(model: CoefficientSet, pilot_states, law: EmpiricalMeasure,
                         fv: FirstVariation, dW0, dWp, dt: float, t: float) -> FirstVariation:
    """Affine update with spatial gradients at the pilot states and the pilots' own noise."""
    _require_derivatives(model)
    Y = np.atleast_2d(pilot_states)
    G = pilot_G(model, t, Y, law, dt, dW0, np.asarray(dWp, dtype=float).reshape(len(Y), -1))
    return FirstVariation(fv.mats + G @ fv.mats, fv.time_index + 1, fv.s_index)


# --- Lions tangent ---------------------------------------------------------

@dataclass
class LionsTangent:
    """``Gamma_t(v)`` for every cloud particle, with its pilot-driven source ``Psi``.

    ``pilots`` are frozen-law copies started at ``v`` and driven by the
    shared common noise and fresh idiosyncratic streams; their sources are
    averaged with weights ``alpha``.
    """

    v: np.ndarray
    pilots: np.ndarray        # (P, d)
    fv: FirstVariation        # pilot Jacobians
    alpha: np.ndarray         # (P,)
    gammas: np.ndarray        # (N, d, d)
    psi: np.ndarray           # (N, d, d)
    time_index: int

    @classmethod
    def start(cls, v, N: int, d: int, n_pilots: int = 1, pilots=None, alpha=None):
        v = np.asarray(v, dtype=float).reshape(d)
        Y = np.tile(v, (n_pilots, 1)) if pilots is None else np.array(pilots, dtype=float).reshape(-1, d)
        P = len(Y)
        alpha = np.full(P, 1.0 / P) if alpha is None else np.asarray(alpha, dtype=float)
        return cls(v, Y, FirstVariation.start(P, d), alpha,
                   np.zeros((N, d, d)), np.zeros((N, d, d)), 0)


def step_lions_tangent(model: CoefficientSet, cloud, lt: LionsTangent, dW0, dW1, dWp, *,
                       lin: Linearization | None = None) -> LionsTangent:
    """One step of ``Gamma`` (source + propagation) and of its pilots."""
    _require_derivatives(model)
    k = cloud.time_index
    if lt.time_index != k or lt.fv.time_index != k:
        raise PilotOutOfSync(f"Lions tangent at {lt.time_index}, pilot at {lt.fv.time_index}, cloud at {k}")
    t, dt = cloud.t, cloud.grid.dt
    lin = _cloud_lin(model, cloud.states, t, dt, dW0, dW1, lin)
    dWp = np.asarray(dWp, dtype=float).reshape(len(lt.pilots), -1)
    src = lin.pilot_source(lt.pilots, lt.fv.mats, lt.alpha)
    gammas = lin.apply(lt.gammas) + src
    psi = lt.psi + src
    law = lin.mu
    fv = step_first_variation(model, lt.pilots, law, lt.fv, dW0, dWp, dt, t)
    pilots = euler_update(model, t, lt.pilots, law, dt, np.asarray(dW0, dtype=float), dWp)
    _check(pilots, k + 1)
    return LionsTangent(lt.v, pilots, fv, lt.alpha, gammas, psi, k + 1)


# --- full sweeps -------------------------------------------------------------

@dataclass
class SweepResult:
    traj: Trajectory
    d0: TangentD0 | None = None
    d0_dir: DirectionalD0 | None = None
    d0_sup: np.ndarray | None = None        # (N, S) running sup_t ||D_s X_t||^2
    d1: TangentD1 | None = None
    lions: LionsTangent | None = None
    gamma_path: np.ndarray | None = None    # (K+1, N, d, d)
    psi_path: np.ndarray | None = None      # (K+1, N, d, d)
    pilot_path: np.ndarray | None = None    # (K+1, P, d)
    pilot_w_path: np.ndarray | None = None  # (K+1, P, d, d)
    pilot_noise: NoiseBundle | None = None
    extra: dict = field(default_factory=dict)


def default_s_indices(K: int, count: int = 16) -> np.ndarray:
    """All indices when ``K <= 512``, otherwise ``count`` equispaced ones."""
    if K <= 512:
        return np.arange(K)
    return np.unique(np.linspace(0, K - 1, count).round().astype(int))


def sweep(model: CoefficientSet, noise: NoiseBundle, init, *, d0_s=None, d0_hprime=None,
          d1_owner=None,
          d1_s=None, d1_exact=False, lions_v=None, n_pilots: int = 1, pilot_init=None,
          pilot_alpha=None, pilot_noise: NoiseBundle | None = None, pilot_stream_offset: int = 0,
          record_paths: bool = False, force_dense: bool = False) -> SweepResult:
    """Simulate the particle system and the requested tangents in one pass.

    One :class:`Linearization` per step is shared by every tangent family.
    ``record_paths`` keeps the full ``Gamma``/``Psi``/pilot histories needed
    by the measure integration-by-parts weights.
    """
    _check_noise(model, noise)
    _require_derivatives(model)
    grid, N, d = noise.grid, noise.N, model.dims.d
    X = _init_array(model, init, N)
    states = np.empty((grid.K + 1, N, d))
    states[0] = X

    d0 = TangentD0.start(d0_s, N, d, model.dims.m0) if d0_s is not None else None
    d0_sup = np.zeros((N, len(d0.s_indices))) if d0 is not None else None
    dd = DirectionalD0.start(d0_hprime, N, d) if d0_hprime is not None else None
    d1 = None
    if d1_owner is not None:
        d1 = TangentD1.start(d1_owner, np.arange(grid.K) if d1_s is None else d1_s, N, d,
                             model.dims.m, exact=d1_exact)
    lt = None
    if lions_v is not None:
        lt = LionsTangent.start(lions_v, N, d, n_pilots, pilot_init, pilot_alpha)
        if pilot_noise is None:
            pilot_noise = companion(noise, len(lt.pilots), stream_offset=pilot_stream_offset)
        elif pilot_noise.N != len(lt.pilots) or not np.array_equal(pilot_noise.dW0, noise.dW0):
            raise PilotOutOfSync("pilot noise must share the common increments and match the pilot count")
    rec = record_paths and lt is not None
    if rec:
        P = len(lt.pilots)
        gpath = np.zeros((grid.K + 1, N, d, d))
        ppath = np.zeros((grid.K + 1, N, d, d))
        ypath = np.empty((grid.K + 1, P, d))
        wpath = np.empty((grid.K + 1, P, d, d))
        ypath[0], wpath[0] = lt.pilots, lt.fv.mats

    from .engine import ParticleCloud
    for k in range(grid.K):
        t = grid.t(k)
        dW0, dW1 = noise.dW0[k], noise.dW1[:, k]
        mu = EmpiricalMeasure(X)
        cloud = ParticleCloud(X, k, grid)
        lin = Linearization(model, t, X, mu, grid.dt, dW0, dW1, force_dense=force_dense)
        if d0 is not None:
            d0 = step_tangent_d0(model, cloud, d0, dW0, dW1, lin=lin)
        if dd is not None:
            dd = step_directional_d0(model, cloud, dd, dW0, dW1, lin=lin)
        if d1 is not None:
            d1 = step_tangent_d1(model, cloud, d1, dW0, dW1, lin=lin)
        if lt is not None:
            lt = step_lions_tangent(model, cloud, lt, dW0, dW1, pilot_noise.dW1[:, k], lin=lin)
        X = euler_update(model, t, X, mu, grid.dt, dW0, dW1)
        _check(X, k + 1)
        states[k + 1] = X
        if d0 is not None:
            d0.sync(model, X, grid.t(k + 1))
            d0_sup = np.maximum(d0_sup, np.einsum("npsq,npsq->ns", d0.mats, d0.mats))
        if d1 is not None:
            d1.sync(model, X, grid.t(k + 1))
        if rec:
            gpath[k + 1], ppath[k + 1] = lt.gammas, lt.psi
            ypath[k + 1], wpath[k + 1] = lt.pilots, lt.fv.mats

    res = SweepResult(Trajectory(states, grid, noise, model), d0, dd, d0_sup, d1, lt,
                      pilot_noise=pilot_noise)
    if rec:
        res.gamma_path, res.psi_path, res.pilot_path, res.pilot_w_path = gpath, ppath, ypath, wpath
    return res


def frozen_first_variation(model: CoefficientSet, traj: Trajectory, pilot_noise: NoiseBundle,
                           x, record_paths: bool = False):
    """Pilots from ``x`` under the frozen law of ``traj`` and their Jacobians.

    Returns ``(pilot_states_path, w_path)`` of shapes ``(K+1, P, d)`` and
    ``(K+1, P, d, d)`` when ``record_paths``, else the terminal values.
    """
    _require_derivatives(model)
    grid, d = traj.grid, model.dims.d
    P = pilot_noise.N
    Y = _init_array(model, np.tile(np.asarray(x, dtype=float).reshape(d), (P, 1)), P)
    fv = FirstVariation.start(P, d)
    if record_paths:
        ys = np.empty((grid.K + 1, P, d))
        ws = np.empty((grid.K + 1, P, d, d))
        ys[0], ws[0] = Y, fv.mats
    for k in range(grid.K):
        t, law = grid.t(k), traj.measure(k)
        dW0, dWp = pilot_noise.dW0[k], pilot_noise.dW1[:, k]
        fv = step_first_variation(model, Y, law, fv, dW0, dWp, grid.dt, t)
        Y = euler_update(model, t, Y, law, grid.dt, dW0, dWp)
        _check(Y, k + 1)
        if record_paths:
            ys[k + 1], ws[k + 1] = Y, fv.mats
    if record_paths:
        return ys, ws
    return Y, fv.mats


def tangent_moment_report(sup_sq: np.ndarray) -> dict:
    """``sup_s`` of the particle-averaged ``sup_t ||D_s X_t||^2``.

    ``sup_sq`` is the ``(N, S)`` running maximum recorded by :func:`sweep`.
    """
    per_s = sup_sq.mean(axis=0)
    j = int(np.argmax(per_s))
    return {"sup": float(per_s[j]), "argmax_block": j, "per_s": per_s.tolist()}


def terminal_d0_pairing(d0: TangentD0, grad_F: np.ndarray, hprime: np.ndarray, dt: float) -> float:
    """``sum_s <D_s F, h'(t_s)> dt`` for ``F = mean_i f(X^i_T)``.

    ``grad_F`` holds ``nabla f(X^i_T) / N`` per particle, shape ``(N, d)``;
    ``hprime`` is indexed by the tangent's differentiation indices.
    """
    DF = np.einsum("np,npsq->sq", grad_F, d0.mats)       # (S, m0)
    return float(np.sum(DF * hprime[d0.s_indices]) * dt)


def directional_pairing(dd: DirectionalD0, grad_F: np.ndarray) -> np.ndarray:
    """Same pairing from a directional tangent, one value per direction."""
    return np.einsum("np,npq->q", grad_F, dd.vecs)
