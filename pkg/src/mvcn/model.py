"""Coefficient interface for McKean-Vlasov dynamics and the builtin model families.

Every coefficient map is vectorized over a batch of evaluation points ``X`` of
shape ``(n, d)`` sharing one measure argument ``mu`` (an
:class:`~mvcn.measure.EmpiricalMeasure`). Matrix conventions:

* ``grad_drift[n]`` is the Jacobian ``J[p, q] = d b_p / d x_q``.
* ``grad_sigma0[n, j]`` is the Jacobian of the j-th column of sigma0.
* ``lions_drift[n, k][p, q]`` is the Lions kernel ``d_mu b_p(t, x_n, mu)(y_k)_q``.

so that every derivative acts on tangent vectors by left multiplication.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import DerivativeUnavailable, NonFiniteInput, ShapeMismatch
from .measure import EmpiricalMeasure, wasserstein2

LIPSCHITZ_SLACK = 1.01


@dataclass(frozen=True)
class Dims:
    d: int
    m0: int
    m: int

    def __post_init__(self):
        for name in ("d", "m0", "m"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeMismatch(f"{name} must be a positive integer, got {v!r}")


def _mat(x, rows=None, cols=None, name="matrix"):
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if (rows is not None and a.shape[0] != rows) or (cols is not None and a.shape[1] != cols):
        raise ShapeMismatch(f"{name} has shape {a.shape}, expected ({rows}, {cols})")
    return a


def _opnorm(a):
    return float(np.linalg.norm(a, 2)) if a.size else 0.0


class CoefficientSet:
    """Base class for the triple (b, sigma0, sigma1) and its first derivatives.

    Subclasses implement the vectorized coefficient and derivative maps.
    Models that only implement the coefficients can still be simulated
    forward; tangent propagation needs the derivative maps and checks
    :attr:`has_derivatives` first.
    """

    name = "custom"
    separable = False
    has_derivatives = True

    def __init__(self, dims: Dims, lipschitz_L: float, derivative_bound: float):
        self.dims = dims
        self.lipschitz_L = float(lipschitz_L)
        self.derivative_bound = float(derivative_bound)

    # coefficients -------------------------------------------------------
    def drift(self, t, X, mu):
        raise NotImplementedError

    def sigma0(self, t, X, mu):
        raise NotImplementedError

    def sigma1(self, t, X, mu):
        raise NotImplementedError

    # derivatives --------------------------------------------------------
    def grad_drift(self, t, X, mu):
        raise DerivativeUnavailable(f"{self.name} does not provide grad_drift")

    def grad_sigma0(self, t, X, mu):
        raise DerivativeUnavailable(f"{self.name} does not provide grad_sigma0")

    def grad_sigma1(self, t, X, mu):
        raise DerivativeUnavailable(f"{self.name} does not provide grad_sigma1")

    def lions_drift(self, t, X, mu, Y):
        raise DerivativeUnavailable(f"{self.name} does not provide lions_drift")

    def lions_sigma0(self, t, X, mu, Y):
        raise DerivativeUnavailable(f"{self.name} does not provide lions_sigma0")

    def lions_sigma1(self, t, X, mu, Y):
        raise DerivativeUnavailable(f"{self.name} does not provide lions_sigma1")

    def step_kernel(self, t, X, mu, dt, dW0, dW1):
        """Lions kernels of one Euler step between the cloud points.

        ``K[i, k] = d_mu b(x_i)(x_k) dt + sum_j d_mu sigma0_j(x_i)(x_k) dW0_j
        + sum_j d_mu sigma1_j(x_i)(x_k) dW1[i, j]`` with ``X`` the support of
        ``mu``; shape ``(n, n, d, d)``.
        """
        Y = mu.points
        return (self.lions_drift(t, X, mu, Y) * dt
                + np.einsum("nkjpq,j->nkpq", self.lions_sigma0(t, X, mu, Y), dW0)
                + np.einsum("nkjpq,nj->nkpq", self.lions_sigma1(t, X, mu, Y), dW1))

    def lions_factors(self, t, X, mu, Y):
        """Low-rank factors of the Lions kernels, for separable models.

        Returns three ``(A, P)`` pairs (drift, sigma0, sigma1) with ``A`` of
        shape ``(n, J, d, r)`` and ``P`` of shape ``(k, J, r, d)`` such that
        the kernel between ``X[i]`` and ``Y[k]`` for column ``j`` equals
        ``A[i, j] @ P[k, j]``. ``J`` is 1 for the drift.
        """
        raise NotImplementedError(f"{self.name} is not separable")

    def params(self) -> dict:
        return {}

    def __repr__(self):
        return f"{type(self).__name__}({self.dims})"


class Constant(CoefficientSet):
    """Zero drift and constant diffusion matrices."""

    name = "constant"
    separable = True

    def __init__(self, s0, s1, lipschitz=None):
        s0 = _mat(s0, name="s0")
        d = s0.shape[0]
        s1 = _mat(s1, rows=d, name="s1")
        super().__init__(Dims(d, s0.shape[1], s1.shape[1]), lipschitz or 1.0, 0.0)
        self.s0, self.s1 = s0, s1

    def drift(self, t, X, mu):
        return np.zeros_like(X)

    def sigma0(self, t, X, mu):
        return np.broadcast_to(self.s0, (len(X),) + self.s0.shape)

    def sigma1(self, t, X, mu):
        return np.broadcast_to(self.s1, (len(X),) + self.s1.shape)

    def grad_drift(self, t, X, mu):
        d = self.dims.d
        return np.zeros((len(X), d, d))

    def grad_sigma0(self, t, X, mu):
        d = self.dims.d
        return np.zeros((len(X), self.dims.m0, d, d))

    def grad_sigma1(self, t, X, mu):
        d = self.dims.d
        return np.zeros((len(X), self.dims.m, d, d))

    def lions_drift(self, t, X, mu, Y):
        d = self.dims.d
        return np.zeros((len(X), len(Y), d, d))

    def lions_sigma0(self, t, X, mu, Y):
        d = self.dims.d
        return np.zeros((len(X), len(Y), self.dims.m0, d, d))

    def lions_sigma1(self, t, X, mu, Y):
        d = self.dims.d
        return np.zeros((len(X), len(Y), self.dims.m, d, d))

    def lions_factors(self, t, X, mu, Y):
        d, m0, m = self.dims.d, self.dims.m0, self.dims.m
        n, k = len(X), len(Y)
        return tuple(
            (np.zeros((n, J, d, 0)), np.zeros((k, J, 0, d))) for J in (1, m0, m)
        )

    def params(self):
        return {"s0": self.s0.tolist(), "s1": self.s1.tolist()}


class LinearMeanField(CoefficientSet):
    """``b(t, x, mu) = a x + c mean(mu)`` with constant diffusions."""

    name = "linear"
    separable = True

    def __init__(self, a, c, s0, s1, lipschitz=None):
        a = _mat(a, name="a")
        d = a.shape[0]
        a = _mat(a, d, d, "a")
        c = _mat(c, d, d, "c")
        s0 = _mat(s0, rows=d, name="s0")
        s1 = _mat(s1, rows=d, name="s1")
        na, nc = _opnorm(a), _opnorm(c)
        super().__init__(Dims(d, s0.shape[1], s1.shape[1]),
                         lipschitz if lipschitz is not None else na + nc, max(na, nc))
        self.a, self.c, self.s0, self.s1 = a, c, s0, s1

    def drift(self, t, X, mu):
        return X @ self.a.T + mu.mean() @ self.c.T

    def sigma0(self, t, X, mu):
        return np.broadcast_to(self.s0, (len(X),) + self.s0.shape)

    def sigma1(self, t, X, mu):
        return np.broadcast_to(self.s1, (len(X),) + self.s1.shape)

    def grad_drift(self, t, X, mu):
        return np.broadcast_to(self.a, (len(X),) + self.a.shape)

    def grad_sigma0(self, t, X, mu):
        d = self.dims.d
        return np.zeros((len(X), self.dims.m0, d, d))

    def grad_sigma1(self, t, X, mu):
        d = self.dims.d
        return np.zeros((len(X), self.dims.m, d, d))

    def lions_drift(self, t, X, mu, Y):
        return np.broadcast_to(self.c, (len(X), len(Y)) + self.c.shape)

    def lions_sigma0(self, t, X, mu, Y):
        d = self.dims.d
        return np.zeros((len(X), len(Y), self.dims.m0, d, d))

    def lions_sigma1(self, t, X, mu, Y):
        d = self.dims.d
        return np.zeros((len(X), len(Y), self.dims.m, d, d))

    def lions_factors(self, t, X, mu, Y):
        d, m0, m = self.dims.d, self.dims.m0, self.dims.m
        n, k = len(X), len(Y)
        drift = (np.broadcast_to(self.c, (n, 1, d, d)), np.broadcast_to(np.eye(d), (k, 1, d, d)))
        return (drift,
                (np.zeros((n, m0, d, 0)), np.zeros((k, m0, 0, d))),
                (np.zeros((n, m, d, 0)), np.zeros((k, m, 0, d))))

    def params(self):
        return {"a": self.a.tolist(), "c": self.c.tolist(),
                "s0": self.s0.tolist(), "s1": self.s1.tolist()}


class TanhInteraction(CoefficientSet):
    """Bounded nonlinear interaction with state- and law-modulated diffusions.

    ``b(t, x, mu) = a x + c * int tanh(kappa (x - y)) mu(dy)`` (tanh taken
    componentwise), and each diffusion is a constant matrix scaled by
    ``1 + rho * tanh(u(x) - u(mean(mu)))`` where ``u`` averages coordinates.
    With ``|rho| < 1`` the diffusions stay within ``[1 - rho, 1 + rho]`` times
    the base matrices, so ellipticity of the base matrix carries over.
    """

    name = "tanh"

    def __init__(self, a, c, kappa, s0, s1, rho0=0.0, rho1=0.0, lipschitz=None):
        a = _mat(a, name="a")
        d = a.shape[0]
        a = _mat(a, d, d, "a")
        c = _mat(c, d, d, "c")
        s0 = _mat(s0, rows=d, name="s0")
        s1 = _mat(s1, rows=d, name="s1")
        kappa, rho0, rho1 = float(kappa), float(rho0), float(rho1)
        if not (abs(rho0) < 1 and abs(rho1) < 1):
            raise ValueError("modulation amplitudes rho0, rho1 must lie in (-1, 1)")
        na, nc = _opnorm(a), _opnorm(c)
        lb = na + nc * abs(kappa)
        l0 = np.linalg.norm(s0) * abs(rho0) / np.sqrt(d)
        l1 = np.linalg.norm(s1) * abs(rho1) / np.sqrt(d)
        col0 = max(np.linalg.norm(s0, axis=0)) * abs(rho0) / np.sqrt(d)
        col1 = max(np.linalg.norm(s1, axis=0)) * abs(rho1) / np.sqrt(d)
        super().__init__(Dims(d, s0.shape[1], s1.shape[1]),
                         lipschitz if lipschitz is not None else max(lb, l0, l1),
                         max(lb, col0, col1))
        self.a, self.c, self.kappa = a, c, kappa
        self.s0, self.s1, self.rho0, self.rho1 = s0, s1, rho0, rho1
        self._memo = None

    def _pair_cache(self, X, Y):
        # all evaluations within one step share the same N^2 tanh
        # grid; checking the inputs is O(N) against O(N^2) to recompute
        memo = self._memo
        if (memo is not None and memo[0].shape == X.shape and memo[1].shape == Y.shape
                and np.array_equal(memo[0], X) and np.array_equal(memo[1], Y)):
            return memo
        th = np.tanh(self.kappa * (X[:, None, :] - Y[None, :, :]))
        th.flags.writeable = False
        memo = (np.array(X), np.array(Y), th, {})
        self._memo = memo
        return memo

    def _pairs(self, X, Y):
        return self._pair_cache(X, Y)[2]

    def _sech2(self, X, Y):
        _, _, th, extra = self._pair_cache(X, Y)
        if "sech2" not in extra:
            s2 = 1.0 - th * th
            s2.flags.writeable = False
            extra["sech2"] = s2
        return extra["sech2"]

    def _z(self, X, mu):
        return X.mean(axis=1) - mu.mean().mean()

    def drift(self, t, X, mu):
        th = self._pairs(X, mu.points)
        return X @ self.a.T + np.tensordot(th, mu.w, axes=(1, 0)) @ self.c.T

    def _sigma(self, base, rho, X, mu):
        phi = 1.0 + rho * np.tanh(self._z(X, mu)) if rho else np.ones(len(X))
        return phi[:, None, None] * base[None]

    def sigma0(self, t, X, mu):
        return self._sigma(self.s0, self.rho0, X, mu)

    def sigma1(self, t, X, mu):
        return self._sigma(self.s1, self.rho1, X, mu)

    def grad_drift(self, t, X, mu):
        sbar = self.kappa * np.tensordot(self._sech2(X, mu.points), mu.w, axes=(1, 0))
        return self.a[None] + self.c[None] * sbar[:, None, :]

    def _slope(self, rho, X, mu):
        # d phi / d x_q, identical for every coordinate q
        return rho * (1.0 - np.tanh(self._z(X, mu)) ** 2) / self.dims.d

    def _grad_sigma(self, base, rho, X, mu):
        d = self.dims.d
        sl = self._slope(rho, X, mu)
        # [n, j, p, q] = base[p, j] * slope_n
        return sl[:, None, None, None] * np.broadcast_to(base.T[:, :, None], (base.shape[1], d, d))[None]

    def grad_sigma0(self, t, X, mu):
        return self._grad_sigma(self.s0, self.rho0, X, mu)

    def grad_sigma1(self, t, X, mu):
        return self._grad_sigma(self.s1, self.rho1, X, mu)

    def lions_drift(self, t, X, mu, Y):
        return -self.c[None, None] * (self.kappa * self._sech2(X, Y))[:, :, None, :]

    def step_kernel(self, t, X, mu, dt, dW0, dW1):
        n, d = X.shape
        K = self.lions_drift(t, X, mu, mu.points) * dt
        # diffusion kernels do not depend on the second point
        g = (np.einsum("njpq,j->npq", -self._grad_sigma(self.s0, self.rho0, X, mu), dW0)
             + np.einsum("njpq,nj->npq", -self._grad_sigma(self.s1, self.rho1, X, mu), dW1))
        K += g[:, None]
        return K

    def lions_sigma0(self, t, X, mu, Y):
        g = -self._grad_sigma(self.s0, self.rho0, X, mu)
        return np.broadcast_to(g[:, None], (len(X), len(Y)) + g.shape[1:])

    def lions_sigma1(self, t, X, mu, Y):
        g = -self._grad_sigma(self.s1, self.rho1, X, mu)
        return np.broadcast_to(g[:, None], (len(X), len(Y)) + g.shape[1:])

    def params(self):
        return {"a": self.a.tolist(), "c": self.c.tolist(), "kappa": self.kappa,
                "s0": self.s0.tolist(), "s1": self.s1.tolist(),
                "rho0": self.rho0, "rho1": self.rho1}


class FunctionalModel(CoefficientSet):
    """User model built from single-point callbacks.

    Coefficient callbacks take ``(t, x, mu)`` with ``x`` of shape ``(d,)``.
    Derivative callbacks are optional; without them the model can only be
    simulated forward. ``grad_sigma0(t, x, mu, j)`` and
    ``lions_sigma0(t, x, mu, y, j)`` return the derivative of column ``j``.
    """

    def __init__(self, dims: Dims, b: Callable, sigma0: Callable, sigma1: Callable, *,
                 lipschitz_L: float, derivative_bound: float = np.inf,
                 grad_b=None, grad_sigma0=None, grad_sigma1=None,
                 lions_b=None, lions_sigma0=None, lions_sigma1=None, name="custom"):
        super().__init__(dims, lipschitz_L, derivative_bound)
        self.name = name
        self._b, self._s0, self._s1 = b, sigma0, sigma1
        self._gb, self._gs0, self._gs1 = grad_b, grad_sigma0, grad_sigma1
        self._lb, self._ls0, self._ls1 = lions_b, lions_sigma0, lions_sigma1
        self.has_derivatives = all(f is not None for f in (
            grad_b, grad_sigma0, grad_sigma1, lions_b, lions_sigma0, lions_sigma1))

    def _need(self, f, what):
        if f is None:
            raise DerivativeUnavailable(f"model {self.name!r} has no {what} callback")
        return f

    def drift(self, t, X, mu):
        return np.array([self._b(t, x, mu) for x in X], dtype=float).reshape(len(X), self.dims.d)

    def sigma0(self, t, X, mu):
        return np.array([self._s0(t, x, mu) for x in X], dtype=float).reshape(len(X), self.dims.d, self.dims.m0)

    def sigma1(self, t, X, mu):
        return np.array([self._s1(t, x, mu) for x in X], dtype=float).reshape(len(X), self.dims.d, self.dims.m)

    def grad_drift(self, t, X, mu):
        f = self._need(self._gb, "grad_b")
        return np.array([f(t, x, mu) for x in X], dtype=float)

    def grad_sigma0(self, t, X, mu):
        f = self._need(self._gs0, "grad_sigma0")
        return np.array([[f(t, x, mu, j) for j in range(self.dims.m0)] for x in X], dtype=float)

    def grad_sigma1(self, t, X, mu):
        f = self._need(self._gs1, "grad_sigma1")
        return np.array([[f(t, x, mu, j) for j in range(self.dims.m)] for x in X], dtype=float)

    def lions_drift(self, t, X, mu, Y):
        f = self._need(self._lb, "lions_b")
        return np.array([[f(t, x, mu, y) for y in Y] for x in X], dtype=float)

    def lions_sigma0(self, t, X, mu, Y):
        f = self._need(self._ls0, "lions_sigma0")
        return np.array([[[f(t, x, mu, y, j) for j in range(self.dims.m0)] for y in Y] for x in X], dtype=float)

    def lions_sigma1(self, t, X, mu, Y):
        f = self._need(self._ls1, "lions_sigma1")
        return np.array([[[f(t, x, mu, y, j) for j in range(self.dims.m)] for y in Y] for x in X], dtype=float)


BUILTIN_MODELS = {"constant": Constant, "linear": LinearMeanField, "tanh": TanhInteraction}


def build_model(name: str, params: dict) -> CoefficientSet:
    """Instantiate a builtin model from its config name and parameter dict."""
    try:
        cls = BUILTIN_MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    return cls(**params)


# operations ---------------------------------------------------------------

def _point_and_measure(model, x, mu):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (model.dims.d,):
        raise ShapeMismatch(f"x has shape {x.shape}, model expects ({model.dims.d},)")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("evaluation point is not finite")
    if not isinstance(mu, EmpiricalMeasure):
        mu = EmpiricalMeasure(mu)
    if mu.dim != model.dims.d:
        raise ShapeMismatch(f"measure lives in R^{mu.dim}, model in R^{model.dims.d}")
    mu.check_finite()
    return x, mu


def eval_coefficients(model: CoefficientSet, t: float, x, mu):
    """Evaluate (b, sigma0, sigma1) at a single point."""
    x, mu = _point_and_measure(model, x, mu)
    X = x[None]
    b = np.asarray(model.drift(t, X, mu))[0]
    s0 = np.asarray(model.sigma0(t, X, mu))[0]
    s1 = np.asarray(model.sigma1(t, X, mu))[0]
    dm = model.dims
    if b.shape != (dm.d,) or s0.shape != (dm.d, dm.m0) or s1.shape != (dm.d, dm.m):
        raise ShapeMismatch("coefficient shapes disagree with the declared dims")
    return b.copy(), s0.copy(), s1.copy()


class DerivativeSet(NamedTuple):
    grad_b: np.ndarray        # (d, d)
    lions_b: np.ndarray       # (d, d)
    grad_sigma0: np.ndarray   # (m0, d, d)
    lions_sigma0: np.ndarray  # (m0, d, d)
    grad_sigma1: np.ndarray   # (m, d, d)
    lions_sigma1: np.ndarray  # (m, d, d)

    def max_norm(self) -> float:
        mats = [self.grad_b, self.lions_b, *self.grad_sigma0, *self.lions_sigma0,
                *self.grad_sigma1, *self.lions_sigma1]
        return max(_opnorm(m) for m in mats)


def eval_derivatives(model: CoefficientSet, t: float, x, mu, y) -> DerivativeSet:
    """All first-order spatial gradients and Lions kernels at one point."""
    if not model.has_derivatives:
        raise DerivativeUnavailable(f"model {model.name!r} does not declare derivatives")
    x, mu = _point_and_measure(model, x, mu)
    Y = np.asarray(y, dtype=float).reshape(1, model.dims.d)
    X = x[None]
    return DerivativeSet(
        np.array(model.grad_drift(t, X, mu)[0]),
        np.array(model.lions_drift(t, X, mu, Y)[0, 0]),
        np.array(model.grad_sigma0(t, X, mu)[0]),
        np.array(model.lions_sigma0(t, X, mu, Y)[0, 0]),
        np.array(model.grad_sigma1(t, X, mu)[0]),
        np.array(model.lions_sigma1(t, X, mu, Y)[0, 0]),
    )


@dataclass
class LipschitzReport:
    max_ratio: float
    passed: bool
    declared: float
    samples: int = 0
    worst: dict = field(default_factory=dict)


def lipschitz_selfcheck(model: CoefficientSet, sample_count: int, rng_seed: int = 0,
                        support_size: int = 6, spread: float = 2.0) -> LipschitzReport:
    """Largest observed increment ratio ``|coef(x,mu) - coef(y,nu)| / (|x-y| + W2)``.

    A third of the pairs share the measure and a third share the point, so
    both halves of the Lipschitz bound are probed directly.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be at least 2")
    rng = np.random.default_rng(rng_seed)
    d = model.dims.d
    best, worst = 0.0, {}
    for i in range(sample_count):
        t = float(rng.uniform(0.0, 1.0))
        x = rng.normal(0.0, spread, d)
        y = rng.normal(0.0, spread, d)
        mu = EmpiricalMeasure(rng.normal(rng.normal(0, spread, d), 1.0, (support_size, d)))
        nu = EmpiricalMeasure(rng.normal(rng.normal(0, spread, d), 1.0, (support_size, d)))
        if i % 3 == 0:
            nu = mu
        elif i % 3 == 1:
            y = x
        denom = np.linalg.norm(x - y) + (0.0 if nu is mu else wasserstein2(mu, nu))
        if denom == 0.0:
            continue
        bx, s0x, s1x = eval_coefficients(model, t, x, mu)
        by, s0y, s1y = eval_coefficients(model, t, y, nu)
        inc = max(np.linalg.norm(bx - by), np.linalg.norm(s0x - s0y), np.linalg.norm(s1x - s1y))
        r = inc / denom
        if r > best:
            best, worst = r, {"t": t, "x": x.tolist(), "y": y.tolist()}
    return LipschitzReport(best, best <= model.lipschitz_L * LIPSCHITZ_SLACK,
                           model.lipschitz_L, sample_count, worst)
