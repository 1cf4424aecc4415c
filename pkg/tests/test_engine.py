import numpy as np
import pytest

from mvcn.engine import (conditional_mean, export_csv, export_summary, moment_report, simulate_frozen,
                         simulate_ips, step_ips)
from mvcn.errors import LengthMismatch, NonFiniteState, ShapeMismatch
from mvcn.model import Constant, LinearMeanField, TanhInteraction
from mvcn.noise import TimeGrid, generate, sample_initial


def setup(model, N=16, K=40, seed=2):
    nb = generate(TimeGrid(1.0, K), N, seed, model.dims.m0, model.dims.m)
    return nb, sample_initial(seed, N, model.dims.d)


def test_constant_model_is_brownian_motion():
    m = Constant(0.3, 0.4)
    nb, X0 = setup(m)
    tr = simulate_ips(m, nb, X0)
    want = X0 + 0.3 * nb.W0()[-1] + 0.4 * nb.W1()[:, -1]
    assert np.allclose(tr.terminal, want, atol=1e-13)


def test_frozen_replay_of_own_law_is_bit_exact():
    m = TanhInteraction(-0.5, 0.8, 2.0, 0.3, 0.4, rho0=0.3, rho1=0.3)
    nb, X0 = setup(m)
    tr = simulate_ips(m, nb, X0)
    assert np.array_equal(simulate_frozen(m, nb, X0, tr).states, tr.states)
    assert np.array_equal(simulate_frozen(m, nb, X0, tr.measures).states, tr.states)


def test_step_by_step_matches_full_run():
    m = LinearMeanField(-0.5, 0.3, 0.2, 0.4)
    nb, X0 = setup(m, K=5)
    tr = simulate_ips(m, nb, X0)
    cloud = tr.cloud(0)
    for k in range(5):
        cloud = step_ips(m, cloud, *nb.increments(k))
    assert np.array_equal(cloud.states, tr.terminal) and cloud.t == pytest.approx(1.0)


def test_point_start_without_idiosyncratic_noise_stays_exchangeable():
    m = LinearMeanField(-0.5, 0.3, 0.2, 0.0)
    nb = generate(TimeGrid(1.0, 20), 7, 1)
    tr = simulate_ips(m, nb, sample_initial(1, 7, 1, {"kind": "point", "at": 0.5}))
    assert np.all(tr.terminal == tr.terminal[0])


def test_linear_conditional_mean_follows_common_noise():
    # mean dynamics: dm = (a + c) m dt + s0 dW0, exact for Euler means as well
    a, c, s0 = -0.5, 0.3, 0.2
    m = LinearMeanField(a, c, s0, 0.4)
    nb, X0 = setup(m, N=8, K=30)
    tr = simulate_ips(m, nb, X0)
    mean = X0.mean()
    for k in range(30):
        mean = mean + (a + c) * mean * nb.grid.dt + s0 * nb.dW0[k, 0] + 0.4 * nb.dW1[:, k, 0].mean()
    assert conditional_mean(tr.terminal)[0] == pytest.approx(mean, abs=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_errors():
    m = LinearMeanField(-0.5, 0.3, 0.2, 0.4)
    nb, X0 = setup(m)
    with pytest.raises(ShapeMismatch):
        simulate_ips(m, nb, X0[:3])
    with pytest.raises(LengthMismatch):
        simulate_frozen(m, nb, X0, simulate_ips(m, nb, X0).measures[:5])
    with pytest.raises(ShapeMismatch):
        simulate_ips(Constant(np.eye(2), np.eye(2)), nb, X0)
    blow = LinearMeanField(1e300, 0.0, 0.2, 0.4)
    with pytest.raises(NonFiniteState) as e:
        simulate_ips(blow, nb, X0 + 1.0)
    assert e.value.step >= 1
    with pytest.raises(NonFiniteState):
        simulate_ips(m, nb, np.where(np.arange(16)[:, None] == 3, np.nan, X0))
    with pytest.raises(ValueError):
        conditional_mean(np.zeros((0, 1)))


def test_exports(tmp_path):
    m = Constant(0.3, 0.4)
    nb, X0 = setup(m, N=3, K=4)
    tr = simulate_ips(m, nb, X0)
    export_csv(tr, tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "step,particle,x0" and len(rows) == 1 + 5 * 3
    assert float(rows[-1].split(",")[2]) == tr.terminal[-1, 0]
    s = export_summary(tr, tmp_path / "s.json")
    assert s["N"] == 3 and s["mean_sup_sq"] == moment_report(tr)["mean_sup_sq"]
