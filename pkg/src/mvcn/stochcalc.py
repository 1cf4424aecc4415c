"""Itô and Skorokhod integrals on the grid and the Cameron-Martin difference quotient.

Integrands are sampled on the ``K`` grid cells (left endpoints) with the time
axis second to last: shape ``(..., K, w)`` against increments ``(..., K, w)``.
Sums over time use Neumaier compensation so that integrating the constant 1
reproduces the path value exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import LengthMismatch, MissingDerivative, NonFiniteInput
from .noise import CameronMartinDirection, NoiseBundle, bump_common, bump_idio, compensated_cumsum


def _as_cells(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return v[:, None] if v.ndim == 1 else v


@dataclass(frozen=True)
class AdaptedIntegrand:
    """Left-point values of an adapted integrand, shape ``(..., K, w)``.

    Adaptedness is the caller's promise; only finiteness is checked.
    """

    values: np.ndarray

    def __post_init__(self):
        v = _as_cells(self.values)
        if not np.all(np.isfinite(v)):
            raise NonFiniteInput("integrand has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def K(self) -> int:
        return self.values.shape[-2]


@dataclass
class FactoredIntegrand:
    """``u(r) = A(r) F`` with ``F`` fixed at a terminal time (possibly anticipating).

    ``F`` is a vector of length ``p`` (a scalar counts as ``p = 1``) and
    ``adapted`` holds ``A`` with shape ``(K, w, p)``; ``(K, w)`` or ``(K,)``
    are accepted when ``p = 1``. Leading batch axes are allowed on both,
    ``F: (..., p)`` with ``A: (..., K, w, p)``. The Malliavin derivative of
    ``F`` enters either as

    * ``dF``: array ``(..., K, p, w)`` with ``dF[r, a]`` the derivative of
      ``F_a`` in the cell ``r``, or a callable ``r -> (p, w)``;
    * ``dF_directional``: callable ``(a, hprime) -> value`` returning
      ``sum_r <D_r F_a, h'(r)> dt`` with ``hprime = A[..., a]``, e.g. a
      finite difference in that Cameron-Martin direction.

    ``deterministic=True`` declares ``D F = 0``.
    """

    F: np.ndarray
    adapted: np.ndarray
    dF: np.ndarray | Callable | None = None
    dF_directional: Callable | None = None
    deterministic: bool = False

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float)
        A = np.asarray(self.adapted, dtype=float)
        if F.ndim == 0:
            F = F[None]
            A = A[:, None, None] if A.ndim == 1 else A[..., None]
        if A.ndim != F.ndim + 2 or A.shape[-1] != F.shape[-1]:
            raise LengthMismatch(f"A(r) of shape {A.shape} does not compose with F of shape {F.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(F))):
            raise NonFiniteInput("factored integrand has non-finite entries")
        self.F, self.adapted = F, A


def compensated_sum(x, axis: int = 0) -> np.ndarray:
    return np.take(compensated_cumsum(x, axis=axis), -1, axis=axis)


def ito_integral(u: AdaptedIntegrand | np.ndarray, increments) -> np.ndarray:
    """``sum_k <u(t_k), dW_k>``; batch axes in front of ``(K, w)`` broadcast."""
    if not isinstance(u, AdaptedIntegrand):
        u = AdaptedIntegrand(u)
    dW = _as_cells(increments)
    if u.values.shape[-2:] != dW.shape[-2:]:
        if u.values.shape[-2] != dW.shape[-2]:
            raise LengthMismatch(f"integrand has {u.values.shape[-2]} cells, increments {dW.shape[-2]}")
        raise LengthMismatch(f"integrand width {u.values.shape[-1]} vs noise width {dW.shape[-1]}")
    terms = u.values * dW
    terms = terms[..., 0] if terms.shape[-1] == 1 else terms.sum(axis=-1)
    out = compensated_sum(terms, axis=-1)
    return out if out.ndim else float(out)


def skorokhod_factored(f: FactoredIntegrand, increments, dt: float):
    """Product rule ``delta(A F) = sum_a F_a int A[:, a] dW - sum_r tr(D_r F A(r)) dt``."""
    A, F = f.adapted, f.F
    dW = _as_cells(increments)
    K, p = A.shape[-3], F.shape[-1]
    if K != dW.shape[-2]:
        raise LengthMismatch(f"integrand has {K} cells, increments {dW.shape[-2]}")
    main = sum(F[..., a] * ito_integral(AdaptedIntegrand(A[..., a]), dW) for a in range(p))
    if f.deterministic:
        return main
    if f.dF is not None:
        if callable(f.dF):
            dF = np.stack([np.asarray(f.dF(r), dtype=float).reshape(p, -1) for r in range(K)])
        else:
            dF = np.asarray(f.dF, dtype=float)
            if dF.ndim == A.ndim - 1:   # (..., K, p*w) flattened
                dF = dF.reshape(dF.shape[:-1] + (p, -1))
            if dF.shape != A.shape[:-2] + (p, A.shape[-2]):
                raise LengthMismatch(f"dF of shape {dF.shape} does not match A of shape {A.shape}")
        # trace(dF(r) A(r)) summed over cells
        corr = compensated_sum(np.einsum("...raw,...rwa->...r", dF, A), axis=-1) * dt
    elif f.dF_directional is not None:
        corr = sum(np.asarray(f.dF_directional(a, A[..., a]), dtype=float) for a in range(p))
    else:
        raise MissingDerivative("the terminal factor is random but no Malliavin derivative was supplied")
    out = main - corr
    return float(out) if np.ndim(out) == 0 else out


def fd_directional(functional: Callable[[NoiseBundle], float], bundle: NoiseBundle,
                   h: CameronMartinDirection, eps: float, particle: int | None = None):
    """Central difference of ``functional`` along the Cameron-Martin direction ``h``.

    Bumps the common path, or the idiosyncratic path of ``particle`` when
    given. The noise draws are reused, so the quotient is pathwise.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if particle is None:
        up, dn = bump_common(bundle, h, eps), bump_common(bundle, h, -eps)
    else:
        up, dn = bump_idio(bundle, particle, h, eps), bump_idio(bundle, particle, h, -eps)
    return (np.asarray(functional(up)) - np.asarray(functional(dn))) / (2.0 * eps)
