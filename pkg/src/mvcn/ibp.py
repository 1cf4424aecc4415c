"""Integration-by-parts weights and the two IBP estimators.

* spatial: ``E1[grad f(X_T^x) w_T Phi] = (1/T) E1[f(X_T^x) int (g Phi) dW1]``
  with ``g(r) = sigma1^T (sigma1 sigma1^T)^{-1} w_r`` along a frozen-law pilot;
* measure: the Lions derivative ``E[grad f(X_T) Gamma_T(v)]`` against
  ``(1/T) E[f(X_T) delta0(h(., v))]`` with
  ``h(r, v) = sigma0^T (sigma0 sigma0^T)^{-1} (Psi_T - Psi_r + Gamma_r)``.

``h`` is not adapted because of ``Psi_T``. Its Skorokhod integral is split
into the Itô integral of the adapted part ``Gamma_r - Psi_r`` and the product
rule applied to the terminal factor ``Psi_T``, whose derivative along the
needed directions is a central difference of the whole particle system in
the common path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .engine import Trajectory, simulate_frozen, simulate_ips
from .errors import EllipticityFailure
from .measure import EmpiricalMeasure
from .model import CoefficientSet
from .noise import CameronMartinDirection, NoiseBundle, bump_common, companion, generate, sample_initial
from .stochcalc import FactoredIntegrand, ito_integral, skorokhod_factored
from .tangent import TangentD0, frozen_first_variation, sweep


# --- test functions ----------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Scalar ``f(x) = phi(a . x)`` with its gradient, vectorized over ``(n, d)``."""

    __test__ = False  # not a pytest class

    name: str
    direction: np.ndarray
    level: float = 0.0
    width: float = 1.0

    def _u(self, X):
        return np.atleast_2d(X) @ self.direction

    def __call__(self, X) -> np.ndarray:
        u = self._u(X)
        if self.name == "linear":
            return u
        if self.name == "sin":
            return np.sin(u)
        return 0.5 * (1.0 + np.tanh((u - self.level) / self.width))

    def scalar_derivative(self, u) -> np.ndarray:
        if self.name == "linear":
            return np.ones_like(u)
        if self.name == "sin":
            return np.cos(u)
        z = np.tanh((u - self.level) / self.width)
        return 0.5 * (1.0 - z * z) / self.width

    def grad(self, X) -> np.ndarray:
        return self.scalar_derivative(self._u(X))[:, None] * self.direction[None, :]


TEST_FUNCTIONS = ("linear", "sin", "indicator")


def test_function(name: str, d: int = 1, direction=None, level: float = 0.0,
                  width: float = 0.25) -> TestFunction:
    """Catalog lookup: ``linear``, ``sin`` or the smoothed ``indicator`` of ``a . x > level``."""
    if name not in TEST_FUNCTIONS:
        raise ValueError(f"unknown test function {name!r}; choose from {TEST_FUNCTIONS}")
    a = np.eye(d)[0] if direction is None else np.asarray(direction, dtype=float).reshape(d)
    return TestFunction(name, a, float(level), float(width))


test_function.__test__ = False


def gaussian_expectation(fn, mean: float, std: float, order: int = 80) -> float:
    """``E[fn(mean + std Z)]`` for standard normal ``Z`` by Gauss-Hermite quadrature."""
    z, w = hermegauss(order)
    return float(np.sum(w * fn(mean + std * z)) / np.sqrt(2.0 * np.pi))


# --- ellipticity ---------------------------------------------------------------

@dataclass
class EllipticityReport:
    min_eigen: float
    delta_required: float
    passed: bool
    which: str
    samples: int = 0

    def as_dict(self):
        return {"min_eigen": self.min_eigen, "delta_required": self.delta_required,
                "pass": self.passed, "which": self.which, "samples": self.samples}


def _sigma(model, which, t, X, mu):
    if which == "common":
        return model.sigma0(t, X, mu)
    if which == "idiosyncratic":
        return model.sigma1(t, X, mu)
    raise ValueError("which must be 'common' or 'idiosyncratic'")


def _clouds(samples):
    if isinstance(samples, Trajectory):
        K1 = samples.states.shape[0]
        stride = max(1, K1 // 64)
        return [(samples.grid.t(k), samples.states[k], samples.measure(k)) for k in range(0, K1, stride)]
    out = []
    for t, X, mu in samples:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out.append((t, X, mu if isinstance(mu, EmpiricalMeasure) else EmpiricalMeasure(mu)))
    return out


def check_ellipticity(model: CoefficientSet, samples, delta: float,
                      which: str = "common") -> EllipticityReport:
    """Smallest eigenvalue of ``sigma sigma^T`` over visited states.

    ``samples`` is a :class:`Trajectory` (up to 64 of its clouds are used)
    or an iterable of ``(t, X, mu)``.
    """
    lo, n = np.inf, 0
    for t, X, mu in _clouds(samples):
        s = _sigma(model, which, t, X, mu)
        ev = np.linalg.eigvalsh(s @ np.swapaxes(s, -1, -2))
        lo = min(lo, float(ev.min()))
        n += len(X)
    lo = max(lo, 0.0) if np.isfinite(lo) else lo
    return EllipticityReport(lo, float(delta), bool(lo >= delta), which, n)


def right_inverse(sig: np.ndarray, delta: float, which: str = "common") -> np.ndarray:
    """``sigma^T (sigma sigma^T)^{-1}`` per point, shape ``(n, w, d)``.

    Eigenvalues below ``delta / 10`` raise :class:`EllipticityFailure`;
    nothing is regularized.
    """
    M = sig @ np.swapaxes(sig, -1, -2)
    ev, U = np.linalg.eigh(M)
    floor = delta / 10.0
    lo = float(ev.min())
    if not lo >= floor or lo <= 0.0:
        raise EllipticityFailure(EllipticityReport(max(lo, 0.0), delta, False, which, len(sig)))
    inv = (U / ev[:, None, :]) @ np.swapaxes(U, -1, -2)
    return np.swapaxes(sig, -1, -2) @ inv


def default_delta(model: CoefficientSet, X0, which: str) -> float:
    """Half the smallest eigenvalue of ``sigma sigma^T`` on the initial cloud."""
    X0 = np.atleast_2d(X0)
    rep = check_ellipticity(model, [(0.0, X0, EmpiricalMeasure(X0))], 0.0, which)
    return 0.5 * rep.min_eigen


def _require(model, X0, delta, which):
    X0 = np.atleast_2d(X0)
    if delta is None:
        delta = default_delta(model, X0, which)
    rep = check_ellipticity(model, [(0.0, X0, EmpiricalMeasure(X0))], delta, which)
    if not rep.passed or rep.min_eigen <= 0.0:
        raise EllipticityFailure(rep)
    return delta


def _mean_se(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    se = x.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.full(np.shape(x.mean(axis=axis)), np.nan)
    return x.mean(axis=axis), se


# --- spatial IBP ---------------------------------------------------------------

@dataclass
class IbpWeightG:
    """``g(r)`` for each pilot, shape ``(K, P, m, d)``."""

    values: np.ndarray
    residual: float


def weight_g(model: CoefficientSet, traj: Trajectory, pilot_path, w_path, delta: float) -> IbpWeightG:
    K = traj.grid.K
    P, d = pilot_path.shape[1:]
    g = np.empty((K, P, model.dims.m, d))
    res = 0.0
    for k in range(K):
        s1 = model.sigma1(traj.grid.t(k), pilot_path[k], traj.measure(k))
        g[k] = right_inverse(s1, delta, "idiosyncratic") @ w_path[k]
        res = max(res, float(np.abs(s1 @ g[k] - w_path[k]).max()))
    return IbpWeightG(g, res)


def spatial_ibp(model: CoefficientSet, x, f: TestFunction, traj: Trajectory,
                pilot_noise: NoiseBundle, Phi=None, delta: float | None = None) -> dict:
    """Both sides of the spatial IBP at ``t = T`` from ``P`` frozen-law pilots started at ``x``.

    ``traj`` supplies the law; ``pilot_noise`` must share its common path.
    Each pilot is one idiosyncratic sample.
    """
    d = model.dims.d
    x = np.asarray(x, dtype=float).reshape(d)
    Phi = np.ones(d) if Phi is None else np.asarray(Phi, dtype=float).reshape(d)
    delta = _require(model, x[None], delta, "idiosyncratic")
    if not np.array_equal(pilot_noise.dW0, traj.noise.dW0):
        raise ValueError("pilot noise must share the common path of the law")
    ys, ws = frozen_first_variation(model, traj, pilot_noise, x, record_paths=True)
    G = weight_g(model, traj, ys, ws, delta)
    T = traj.grid.T
    YT = ys[-1]
    lhs_s = np.einsum("pa,pab,b->p", f.grad(YT), ws[-1], Phi)
    integrand = np.einsum("kpmd,d->pkm", G.values, Phi)           # (P, K, m)
    rhs_s = f(YT) * ito_integral(integrand, pilot_noise.dW1) / T
    lhs, se_l = _mean_se(lhs_s)
    rhs, se_r = _mean_se(rhs_s)
    comb = float(np.hypot(se_l, se_r))
    return {"kind": "spatial", "t": T, "x": x.tolist(), "f": f.name, "Phi": Phi.tolist(),
            "lhs": float(lhs), "rhs": float(rhs), "se_lhs": float(se_l), "se_rhs": float(se_r),
            "se_combined": comb, "samples": int(pilot_noise.N), "weight_residual": G.residual,
            "agree_3se": bool(abs(lhs - rhs) <= 3 * comb)}


# --- measure IBP ---------------------------------------------------------------

@dataclass
class IbpWeightH:
    """``h(r, v)`` split into the adapted part and the terminal factor.

    ``pinv[r, i]`` is ``sigma0^T (sigma0 sigma0^T)^{-1}`` (shape ``(K, N, m0, d)``),
    ``adapted[r, i] = pinv (Gamma_r - Psi_r)`` and ``terminal[i] = Psi_T``,
    so that ``h[r, i] = adapted[r, i] + pinv[r, i] @ terminal[i]``.
    """

    pinv: np.ndarray
    adapted: np.ndarray     # (K, N, m0, d)
    terminal: np.ndarray    # (N, d, d)

    def full(self) -> np.ndarray:
        return self.adapted + self.pinv @ self.terminal[None]

    def shared_pinv(self) -> bool:
        return bool(np.all(self.pinv == self.pinv[:, :1]))


def weight_h(model: CoefficientSet, traj: Trajectory, gamma_path, psi_path, delta: float) -> IbpWeightH:
    K = traj.grid.K
    N, d = traj.states.shape[1:]
    pinv = np.empty((K, N, model.dims.m0, d))
    for k in range(K):
        s0 = model.sigma0(traj.grid.t(k), traj.states[k], traj.measure(k))
        pinv[k] = right_inverse(s0, delta, "common")
    adapted = pinv @ (gamma_path[:-1] - psi_path[:-1])
    return IbpWeightH(pinv, adapted, psi_path[-1].copy())


def weight_h_residual(model, traj, H: IbpWeightH, gamma_path, psi_path) -> float:
    """``max |sigma0 h(r) - (Psi_T - Psi_r + Gamma_r)|`` over the grid."""
    h = H.full()
    res = 0.0
    for k in range(traj.grid.K):
        s0 = model.sigma0(traj.grid.t(k), traj.states[k], traj.measure(k))
        target = psi_path[-1] - psi_path[k] + gamma_path[k]
        res = max(res, float(np.abs(s0 @ h[k] - target).max()))
    return res


def gaussian_bump(v, width: float):
    v = np.asarray(v, dtype=float)
    return lambda X: np.exp(-0.5 * np.sum((np.atleast_2d(X) - v) ** 2, axis=1) / width ** 2)


@dataclass
class MeasureIbpOptions:
    n_pilots: int = 16
    delta: float | None = None
    eps_dpsi: float = 1e-4       # common-path bump for D Psi_T
    fd: bool = True              # measure-bump estimator
    fd_eps: float = 1e-3
    bump_width: float = 0.1
    rhs_particles: int | None = None   # subsample when pinv differs across particles
    workers: int = 1


def _psi_terminal(model, noise, pilot_noise, X0, v, opts, h, eps):
    up = sweep(model, bump_common(noise, h, eps), X0, lions_v=v, n_pilots=opts.n_pilots,
               pilot_noise=bump_common(pilot_noise, h, eps))
    dn = sweep(model, bump_common(noise, h, -eps), X0, lions_v=v, n_pilots=opts.n_pilots,
               pilot_noise=bump_common(pilot_noise, h, -eps))
    return (up.lions.psi - dn.lions.psi) / (2.0 * eps)


def measure_ibp_rep(model: CoefficientSet, v, fns, noise: NoiseBundle, X0,
                    opts: MeasureIbpOptions = MeasureIbpOptions()) -> dict:
    """One common-noise repetition of the measure IBP.

    Returns per-function arrays over the ``d`` components of the Lions
    derivative: ``lhs_gamma``, ``rhs`` and, when enabled, ``lhs_fd``.
    """
    d = model.dims.d
    v = np.asarray(v, dtype=float).reshape(d)
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    delta = _require(model, X0, opts.delta, "common")
    pilot_noise = companion(noise, opts.n_pilots, workers=opts.workers)
    res = sweep(model, noise, X0, lions_v=v, n_pilots=opts.n_pilots, pilot_noise=pilot_noise,
                record_paths=True)
    traj = res.traj
    grid = traj.grid
    T, N = grid.T, noise.N
    H = weight_h(model, traj, res.gamma_path, res.psi_path, delta)

    idx = np.arange(N)
    shared = H.shared_pinv()
    if not shared and opts.rhs_particles is not None and opts.rhs_particles < N:
        idx = np.linspace(0, N - 1, opts.rhs_particles).round().astype(int)

    # sum_r <D_r Psi_T[a, c], pinv(r)[:, a]> dt for each particle, a and c
    corr = np.zeros((N, d, d))
    if np.any(H.terminal != 0.0) or np.any(res.psi_path != 0.0):
        if shared:
            for a in range(d):
                h = CameronMartinDirection(H.pinv[:, 0, :, a], grid.dt)
                corr[:, a, :] = _psi_terminal(model, noise, pilot_noise, X0, v, opts, h,
                                              opts.eps_dpsi)[:, a, :]
        else:
            for i in idx:
                for a in range(d):
                    h = CameronMartinDirection(H.pinv[:, i, :, a], grid.dt)
                    corr[i, a, :] = _psi_terminal(model, noise, pilot_noise, X0, v, opts, h,
                                                  opts.eps_dpsi)[i, a, :]

    dW0 = noise.dW0
    A = np.moveaxis(H.pinv[:, idx], 0, 1)                   # (n, K, m0, d)
    adapted = np.moveaxis(H.adapted[:, idx], 0, 1)          # (n, K, m0, d)
    delta0 = np.empty((len(idx), d))
    for c in range(d):
        fac = FactoredIntegrand(H.terminal[idx, :, c], A,
                                dF_directional=lambda a, _h, c=c: corr[idx, a, c])
        delta0[:, c] = ito_integral(adapted[..., c], dW0) + skorokhod_factored(fac, dW0, grid.dt)

    XT = traj.terminal
    out = {"N": N, "shared_weight": shared, "rhs_particles": int(len(idx)),
           "gamma_spread": float(np.ptp(res.lions.gammas)) if N > 1 else 0.0}
    fd_runs = None
    if opts.fd:
        bump = gaussian_bump(v, opts.bump_width)
        psi = bump(X0)
        norm = psi.mean()
        fd_runs = []
        for c in range(d):
            shift = np.zeros_like(X0)
            shift[:, c] = opts.fd_eps * psi
            laws = [simulate_ips(model, noise, X0 + s * shift) for s in (1.0, -1.0)]
            copies = [simulate_frozen(model, noise, X0, law).terminal for law in laws]
            fd_runs.append((copies, norm))
    for f in fns:
        gT = f.grad(XT)
        fT = f(XT)
        out[f.name] = {
            "lhs_gamma": np.einsum("na,nac->c", gT, res.lions.gammas) / N,
            "rhs": (fT[idx, None] * delta0).mean(axis=0) / T,
        }
        if fd_runs is not None:
            out[f.name]["lhs_fd"] = np.array([
                (f(cp[0]).mean() - f(cp[1]).mean()) / (2.0 * opts.fd_eps) / norm for cp, norm in fd_runs])
    return out


def measure_ibp(model: CoefficientSet, v, fns, grid, N: int, seed: int, reps: int,
                init_law: dict | None = None, opts: MeasureIbpOptions = MeasureIbpOptions(),
                rep_offset: int = 0) -> dict:
    """Measure IBP averaged over ``reps`` independent common paths.

    The duality behind the right-hand side integrates over the common noise,
    so the estimators are averaged over repetitions and their standard errors
    are computed from the repetition means.
    """
    d = model.dims.d
    if isinstance(fns, TestFunction):
        fns = [fns]
    init_law = init_law or {"kind": "normal"}
    X0 = sample_initial(seed, N, d, init_law, rep=rep_offset)
    _require(model, X0, opts.delta, "common")
    per = []
    for r in range(rep_offset, rep_offset + reps):
        noise = generate(grid, N, seed, model.dims.m0, model.dims.m, rep=r, workers=opts.workers)
        X0 = sample_initial(seed, N, d, init_law, rep=r)
        per.append(measure_ibp_rep(model, v, fns, noise, X0, opts))
    report = {"kind": "measure", "t": grid.T, "v": np.atleast_1d(v).tolist(), "N": N,
              "reps": reps, "samples": N * reps, "functions": {}}
    for f in fns:
        row = {}
        for key in ("lhs_gamma", "lhs_fd", "rhs"):
            if key not in per[0][f.name]:
                continue
            vals = np.array([p[f.name][key] for p in per])
            m, se = _mean_se(vals)
            row[key], row["se_" + key] = m.tolist(), se.tolist()
        row.update(_three_way(row))
        report["functions"][f.name] = row
    return report


def _three_way(row, rel: float = 0.05) -> dict:
    """Pairwise agreement within ``rel`` relative plus three combined standard errors."""
    keys = [k for k in ("lhs_gamma", "lhs_fd", "rhs") if k in row]
    flags = {}
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            x, y = np.asarray(row[a]), np.asarray(row[b])
            sx = np.nan_to_num(np.asarray(row["se_" + a]))
            sy = np.nan_to_num(np.asarray(row["se_" + b]))
            tol = rel * np.maximum(np.abs(x), np.abs(y)) + 3 * np.hypot(sx, sy)
            flags[f"agree_{a}_{b}"] = bool(np.all(np.abs(x - y) <= tol))
    return flags


def representation_values(model: CoefficientSet, v, noise: NoiseBundle, X0, s_indices,
                          n_pilots: int = 1, delta: float | None = None):
    """``D0_r X_T h(r, v)`` at the grid indices ``s_indices`` and ``Gamma_T``.

    Returns ``(values, gamma_T)`` with shapes ``(S, N, d, d)`` and ``(N, d, d)``.
    """
    X0 = np.atleast_2d(X0)
    delta = _require(model, X0, delta, "common")
    res = sweep(model, noise, X0, d0_s=s_indices, lions_v=v, n_pilots=n_pilots, record_paths=True)
    H = weight_h(model, res.traj, res.gamma_path, res.psi_path, delta)
    h = H.full()                                          # (K, N, m0, d)
    d0: TangentD0 = res.d0
    vals = np.stack([d0.at(j) @ h[s] for j, s in enumerate(d0.s_indices)])
    return vals, res.lions.gammas

