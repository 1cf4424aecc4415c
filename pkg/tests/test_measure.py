import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from mvcn.errors import ShapeMismatch, UnsupportedSize
from mvcn.measure import EmpiricalMeasure, wasserstein2


def lp_w2(x, wx, y, wy):
    """Brute-force optimal transport as a linear program."""
    n, m = len(x), len(y)
    C = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1).ravel()
    A, b = [], []
    for i in range(n):
        row = np.zeros((n, m)); row[i] = 1; A.append(row.ravel()); b.append(wx[i])
    for j in range(m):
        col = np.zeros((n, m)); col[:, j] = 1; A.append(col.ravel()); b.append(wy[j])
    res = linprog(C, A_eq=np.array(A), b_eq=np.array(b), bounds=(0, None), method="highs")
    return np.sqrt(res.fun)


pts = st.lists(st.floats(-5, 5), min_size=1, max_size=7)


@given(pts, pts, st.integers(0, 2**32 - 1))
def test_w2_1d_matches_linear_program(a, b, seed):
    rng = np.random.default_rng(seed)
    wx = rng.dirichlet(np.ones(len(a)))
    wy = rng.dirichlet(np.ones(len(b)))
    x, y = np.array(a)[:, None], np.array(b)[:, None]
    got = wasserstein2(EmpiricalMeasure(x, wx), EmpiricalMeasure(y, wy))
    assert got == pytest.approx(lp_w2(x, wx, y, wy), abs=1e-7)


def test_w2_2d_matches_permutation_search():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    best = min(np.mean(((x - y[list(p)]) ** 2).sum(1)) for p in itertools.permutations(range(6)))
    assert wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(y)) == pytest.approx(np.sqrt(best), rel=1e-12)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(-3, 3))
def test_w2_translation_and_symmetry(a, shift):
    mu = EmpiricalMeasure(np.array(a))
    nu = EmpiricalMeasure(np.array(a) + shift)
    assert wasserstein2(mu, nu) == pytest.approx(abs(shift), abs=1e-9)
    assert wasserstein2(mu, nu) == wasserstein2(nu, mu)
    assert wasserstein2(mu, mu) == 0.0


def test_w2_dirac_pair():
    assert wasserstein2(EmpiricalMeasure.dirac([0.0, 0.0]), EmpiricalMeasure.dirac([3.0, 4.0])) == 5.0


def test_w2_errors():
    with pytest.raises(ShapeMismatch):
        wasserstein2(EmpiricalMeasure(np.zeros((2, 1))), EmpiricalMeasure(np.zeros((2, 2))))
    with pytest.raises(UnsupportedSize):
        wasserstein2(EmpiricalMeasure(np.zeros((2, 2))), EmpiricalMeasure(np.zeros((3, 2))))


def test_measure_validation_and_integrals():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((2, 1)), [0.3, 0.3])
    with pytest.raises(ShapeMismatch):
        EmpiricalMeasure(np.zeros((0, 1)))
    mu = EmpiricalMeasure(np.array([[0.0], [2.0]]), [0.25, 0.75])
    assert mu.mean()[0] == 1.5
    assert mu.integrate(np.array([1.0, 5.0])) == 4.0
