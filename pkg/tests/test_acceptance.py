"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (shown even under capture)
and then asserts the same condition.
"""
import json
import time
from importlib.resources import files

import numpy as np
import pytest

from mvcn.cli import main
from mvcn.harness import load_config, moment_rows, replay, run_study, write_record
from mvcn.ibp import gaussian_expectation, spatial_ibp, test_function
from mvcn.model import Constant, LinearMeanField, TanhInteraction
from mvcn.noise import CameronMartinDirection, TimeGrid, companion, generate, sample_initial
from mvcn.engine import simulate_ips
from mvcn.stochcalc import fd_directional
from mvcn.tangent import directional_pairing, sweep

SEED = 20240601
pytestmark = pytest.mark.slow


def fixture(name):
    return str(files("mvcn") / "fixtures" / f"{name}.json")


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        return ok
    return emit


def linear_model():
    return LinearMeanField(-0.5, 0.3, 0.2, 0.4)


def test_criterion_1_closed_form_tangents(report):
    model = linear_model()
    t0 = time.perf_counter()
    nb = generate(TimeGrid(1.0, 2 ** 12), 64, SEED)
    res = sweep(model, nb, sample_initial(SEED, 64, 1), d0_s=[0], d1_owner=0, d1_s=[0], lions_v=[0.0])
    wall = time.perf_counter() - t0
    got = {"D0": res.d0.at(0)[0, 0, 0], "D1": res.d1.owner_mats()[0, 0, 0],
           "w": res.lions.fv.mats[0, 0, 0], "Gamma": res.lions.gammas[0, 0, 0]}
    want = {"D0": 0.2 * np.exp(-0.2), "D1": 0.4 * np.exp(-0.5), "w": np.exp(-0.5),
            "Gamma": np.exp(-0.2) - np.exp(-0.5)}
    errs = {k: abs(got[k] - want[k]) / want[k] for k in got}
    ok = all(e <= 1e-3 for e in errs.values()) and wall <= 10.0
    report(1, ok, ", ".join(f"{k} rel {e:.2e}" for k, e in errs.items()) + f", {wall:.2f} s")
    assert ok


def test_criterion_2_cameron_martin_duality(report):
    model = TanhInteraction(-0.5, 0.8, 2.0, 0.3, 0.4, rho0=0.3, rho1=0.3)
    N, K, eps = 1024, 2 ** 10, 1e-4
    t0 = time.perf_counter()
    grid = TimeGrid(1.0, K)
    nb = generate(grid, N, SEED)
    X0 = sample_initial(SEED, N, 1)
    hp = np.cos(np.pi * grid.nodes[:-1])[:, None]
    res = sweep(model, nb, X0, d0_hprime=hp[:, :, None])
    h = CameronMartinDirection(hp, grid.dt)
    fns = [test_function("linear"), test_function("sin")]
    fd = fd_directional(lambda b: np.array([f(simulate_ips(model, b, X0).terminal).mean() for f in fns]),
                        nb, h, eps)
    wall = time.perf_counter() - t0
    tol = 3 * (eps + np.sqrt(grid.dt))
    errs = []
    for f, ref in zip(fns, fd):
        pair = directional_pairing(res.d0_dir, f.grad(res.traj.terminal) / N)[0]
        errs.append(abs(pair - ref) / abs(ref))
    ok = max(errs) <= tol and wall <= 60.0
    report(2, ok, f"rel err linear {errs[0]:.2e}, sin {errs[1]:.2e} (tol {tol:.3g}), {wall:.1f} s")
    assert ok


def test_criterion_3_moment_bounds(report):
    cfg = load_config(fixture("tanh"))
    rows = moment_rows(cfg.build_model(), cfg, [128, 512, 2048], cfg.knobs["moment_s"])
    vals = np.array([r["sup_terminal"] for r in rows])
    spread = (vals.max() - vals.min()) / vals.min()
    ok = spread <= 0.25
    report(3, ok, "sup_s mean |D0_s X_T|^2 = " + ", ".join(f"{v:.5f}" for v in vals)
           + f" for N = 128, 512, 2048; spread {spread:.2%}")
    assert ok


def test_criterion_4_conditional_propagation_of_chaos(report):
    rec = run_study(load_config(fixture("poc_linear")))
    rows = rec.tables["poc"]
    ok = rec.results["decreasing"] and rec.results["slope"] <= -0.5
    report(4, ok, "; ".join(f"N={r['N']}: {r['mean_w2sq_T']:.3e} +- {r['se_T']:.1e}" for r in rows)
           + f"; slope {rec.results['slope']:.3f}")
    assert ok


def test_criterion_5_spatial_ibp(report):
    grid, P = TimeGrid(1.0, 64), 10_000
    details, ok = [], True
    # linear model, f(x) = x: both sides equal exp(-0.5)
    model = linear_model()
    nb = generate(grid, 64, SEED)
    traj = simulate_ips(model, nb, sample_initial(SEED, 64, 1))
    r = spatial_ibp(model, [0.3], test_function("linear"), traj, companion(nb, P))
    good = abs(r["rhs"] - 0.60653) <= 3 * r["se_rhs"]
    ok &= good
    details.append(f"linear rhs {r['rhs']:.4f} +- {r['se_rhs']:.4f} vs 0.60653")
    # constant model, f = sin, against Gauss-Hermite quadrature
    model = Constant(0.2, 0.4)
    nb = generate(grid, 64, SEED)
    traj = simulate_ips(model, nb, sample_initial(SEED, 64, 1))
    r = spatial_ibp(model, [0.3], test_function("sin"), traj, companion(nb, P))
    quad = gaussian_expectation(np.cos, 0.3 + 0.2 * nb.W0()[-1, 0], 0.4)
    good = r["agree_3se"] and abs(r["lhs"] - quad) <= 3 * r["se_lhs"] and abs(r["rhs"] - quad) <= 3 * r["se_rhs"]
    ok &= good
    details.append(f"constant-sin lhs {r['lhs']:.4f}, rhs {r['rhs']:.4f} +- {r['se_rhs']:.4f}, quadrature {quad:.4f}")
    report(5, ok, "; ".join(details))
    assert ok


def test_criterion_6_measure_ibp(report, capsys):
    lin = run_study(load_config(fixture("linear_ibp")))
    row = lin.tables["measure"][0]
    # the Lions tangent is deterministic for linear dynamics; its discretization error is checked at K = 2^12
    model = linear_model()
    nb = generate(TimeGrid(1.0, 2 ** 12), 2, SEED)
    gamma = sweep(model, nb, sample_initial(SEED, 2, 1), lions_v=[0.0]).lions.gammas[0, 0, 0]
    lin_ok = (abs(gamma - 0.21217) <= 1e-3 * 0.21217 and np.ptp([row["lhs_gamma"], gamma]) < 0.01
              and abs(row["rhs"] - row["lhs_gamma"]) <= 3 * row["se_rhs"])
    tanh = run_study(load_config(fixture("tanh_ibp")))
    tanh_ok = all(r["pass"] for r in tanh.tables["measure"])
    ok = lin_ok and tanh_ok
    parts = [f"linear lhs_gamma {gamma:.5f} (K=4096), rhs {row['rhs']:.4f} +- {row['se_rhs']:.4f} "
             f"over {row['reps']} reps vs lhs_gamma {row['lhs_gamma']:.5f} (K=32)"]
    for r in tanh.tables["measure"]:
        parts.append(f"tanh {r['f']}: gamma {r['lhs_gamma']:.4f}, fd {r['lhs_fd']:.4f}, "
                     f"rhs {r['rhs']:.4f} +- {r['se_rhs']:.4f}")
    report(6, ok, "; ".join(parts))
    with capsys.disabled():
        for msg in lin.findings:
            print(f"[FINDING] criterion 6: {msg}")
        for r in tanh.tables["measure"]:
            if r["se_rhs"] > 0.5 * abs(r["lhs_gamma"]):
                print(f"[FINDING] criterion 6: tanh {r['f']} rhs standard error {r['se_rhs']:.3f} exceeds half "
                      f"of |lhs_gamma| = {abs(r['lhs_gamma']):.3f}; the rhs agreement is not discriminating")
    assert lin.results["representation"]["flagged"]
    assert ok


def test_criterion_7_replay_determinism(report, tmp_path):
    details, ok = [], True
    for name in ("simulate_linear", "poc_linear", "linear", "constant_ibp"):
        out = tmp_path / name
        cfg = load_config(fixture(name))
        write_record(run_study(cfg, threads=1, out_dir=out), out)
        for threads in (1, 4):
            _, same = replay(out / "record.json", threads=threads, out_dir=tmp_path / f"{name}-{threads}")
            good = bool(same) and all(same.values())
            ok &= good
            details.append(f"{cfg.study}/{name}@{threads}: {'identical' if good else 'DIFFERS'}")
    report(7, ok, ", ".join(details))
    assert ok


def test_criterion_8_degeneracy_contracts(report, tmp_path):
    codes = {n: main(["ibp", "--config", fixture(n), "--out", str(tmp_path / n)])
             for n in ("degenerate_s0", "degenerate_s1")}
    reasons = {n: json.loads((tmp_path / n / "record.json").read_text())["reason"] for n in codes}
    rec = run_study(load_config(fixture("constant_ibp")))
    zero_measure = all(r["lhs_gamma"] == 0.0 and r["rhs"] == 0.0 for r in rec.tables["measure"])
    model = Constant(0.2, 0.4)
    nb = generate(TimeGrid(1.0, 64), 32, SEED)
    gam = sweep(model, nb, sample_initial(SEED, 32, 1), lions_v=[0.5], n_pilots=4).lions.gammas
    ok = (all(c == 3 for c in codes.values()) and "common" in reasons["degenerate_s0"]
          and "idiosyncratic" in reasons["degenerate_s1"] and zero_measure and np.all(gam == 0.0))
    report(8, ok, f"exit codes {codes}, constant-model Gamma max {np.abs(gam).max()}, "
                  f"measure IBP exactly zero: {zero_measure}")
    assert ok
