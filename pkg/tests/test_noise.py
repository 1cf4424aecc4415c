import numpy as np
import pytest
from hypothesis import given, strategies as st

from mvcn.errors import GridMismatch
from mvcn.noise import (PILOT, CameronMartinDirection, TimeGrid, bump_common, bump_idio, companion,
                        compensated_cumsum, dump, generate, load, sample_initial, stream_key)


def test_generation_is_deterministic_and_scheduling_free():
    g = TimeGrid(1.0, 50)
    a = generate(g, 8, 11, m0=2, m=3)
    b = generate(g, 8, 11, m0=2, m=3, workers=4)
    assert a.identical(b)
    assert not a.identical(generate(g, 8, 12, m0=2, m=3))


@given(st.integers(1, 12), st.integers(1, 12))
def test_particle_paths_do_not_depend_on_population_size(n1, n2):
    g = TimeGrid(0.5, 20)
    a, b = generate(g, n1, 5), generate(g, n2, 5)
    n = min(n1, n2)
    assert np.array_equal(a.dW1[:n], b.dW1[:n])
    assert np.array_equal(a.dW0, b.dW0)


def test_stream_offsets_and_explicit_ids_agree():
    g = TimeGrid(1.0, 10)
    full = generate(g, 10, 3)
    assert np.array_equal(generate(g, 4, 3, stream_offset=6).dW1, full.dW1[6:])
    assert full.subset([2, 7]).identical(generate(g, 2, 3, stream_ids=[2, 7]))


def test_reps_kinds_and_companions_are_independent_streams():
    g = TimeGrid(1.0, 10)
    base = generate(g, 3, 3)
    assert not np.array_equal(base.dW0, generate(g, 3, 3, rep=1).dW0)
    pil = companion(base, 3)
    assert pil.kind == PILOT and np.array_equal(pil.dW0, base.dW0)
    assert not np.array_equal(pil.dW1, base.dW1)
    with pytest.raises(ValueError):
        stream_key(0, 300, 0)


def test_increment_statistics():
    g = TimeGrid(2.0, 400)
    nb = generate(g, 200, 9)
    z = nb.dW1 / np.sqrt(g.dt)
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1) < 0.02


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_compensated_cumsum_is_at_least_as_accurate_as_naive(xs):
    from math import fsum
    got = compensated_cumsum(np.array(xs))
    assert got[0] == 0.0
    assert got[-1] == pytest.approx(fsum(xs), abs=1e-6)


def test_path_of_constant_direction_is_exact():
    g = TimeGrid(1.0, 1000)
    h = CameronMartinDirection.constant(g, 1.0)
    assert h.path()[-1, 0] == 1.0
    assert h.norm2 == pytest.approx(1.0, rel=1e-12)


def test_bumps_shift_only_the_targeted_path():
    g = TimeGrid(1.0, 16)
    nb = generate(g, 4, 1)
    h = CameronMartinDirection.from_function(g, lambda t: np.cos(t))
    up = bump_common(nb, h, 0.1)
    assert np.allclose(up.W0()[-1] - nb.W0()[-1], 0.1 * h.path()[-1])
    assert np.array_equal(up.dW1, nb.dW1)
    ui = bump_idio(nb, 2, h, 0.1)
    changed = np.any(ui.dW1 != nb.dW1, axis=(1, 2))
    assert changed.tolist() == [False, False, True, False]
    with pytest.raises(GridMismatch):
        bump_common(nb, CameronMartinDirection.constant(TimeGrid(1.0, 8)), 0.1)


def test_dump_roundtrip(tmp_path):
    nb = generate(TimeGrid(0.7, 13), 5, 2**40 + 3, m0=2, m=2, rep=4, stream_offset=9)
    dump(nb, tmp_path / "n.bin")
    back = load(tmp_path / "n.bin")
    assert back.identical(nb) and back.seed == nb.seed and back.rep == 4
    (tmp_path / "bad.bin").write_bytes(b"x" * 80)
    with pytest.raises(ValueError):
        load(tmp_path / "bad.bin")


def test_sample_initial():
    a = sample_initial(4, 6, 2, {"kind": "normal", "mean": 1.0, "std": 0.0})
    assert np.all(a == 1.0)
    assert np.array_equal(sample_initial(4, 3, 1), sample_initial(4, 6, 1)[:3])
    assert np.all(sample_initial(4, 3, 2, {"kind": "point", "at": [1, 2]}) == [1, 2])
    with pytest.raises(ValueError):
        sample_initial(4, 3, 1, {"kind": "uniform"})
    with pytest.raises(ValueError):
        sample_initial(4, 3, 1, {"kind": "normal", "sd": 2})


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)
