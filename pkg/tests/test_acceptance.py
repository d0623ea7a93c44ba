"""Acceptance criteria 1 to 11.  Each test records one PASS/FAIL line,
printed again in the terminal summary.  Tolerances are fixed here and
must not be loosened to make a line green."""

import os
import subprocess
import sys
import time
from dataclasses import replace

import numba
import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from artifit.fitter import RECOVERY_CONFIG, fit_chamfer_icp, fit_em
from artifit.metrics import v2v
from artifit.model import forward, make_toy_humanoid
from artifit.selftest import (SWEEP_LEVELS, chamfer_limit_gap, check_gradients,
                              check_posterior_normalisation, check_rotations, check_sigma2_oracle)
from artifit.synth import ScanSpec, generate_scan, perturb_params, sample_params

pytestmark = pytest.mark.slow

RECOVERY_VERTICES = 3000
SUITE_SEEDS = range(20)
SWEEP_SEEDS = range(100, 104)
PARTIAL_SEEDS = range(5)


@pytest.fixture(scope="module", autouse=True)
def single_thread():
    before = numba.get_num_threads()
    numba.set_num_threads(1)
    with threadpool_limits(limits=1):
        yield
    numba.set_num_threads(before)


@pytest.fixture(scope="module")
def body():
    return make_toy_humanoid(0, RECOVERY_VERTICES)


def run(fitter, model, scan, cfg, init):
    rep = fitter(scan.cloud, model, cfg, init)
    return {"v2v": v2v(forward(model, rep.params).vertices, scan.truth_vertices),
            "seconds": rep.wall_clock, "violations": rep.descent_violations,
            "finite": bool(np.all(np.isfinite(rep.params.to_vector()))),
            "termination": rep.termination}


def recovery_scan(model, seed, **spec):
    truth = sample_params(model, seed)
    scan = generate_scan(model, truth, ScanSpec(2048, 0.001, seed=seed, **spec))
    return scan, perturb_params(truth, 1000 + seed)


@pytest.fixture(scope="module")
def suite(body):
    """The recovery suite: 2048 points, 1 mm noise, perturbed init."""
    return [recovery_scan(body, s) for s in SUITE_SEEDS]


@pytest.fixture(scope="module")
def recovery(body, suite):
    return [run(fit_em, body, scan, RECOVERY_CONFIG, init) for scan, init in suite]


@pytest.fixture(scope="module")
def sweep(body):
    """Per level, per scan: soft fit with matching mu; the nearest-neighbour
    baseline at the strongest level."""
    levels = []
    for noise, frac in SWEEP_LEVELS:
        em, icp = [], []
        for s in SWEEP_SEEDS:
            truth = sample_params(body, s)
            scan = generate_scan(body, truth, ScanSpec(2048, noise, frac, seed=s))
            init = perturb_params(truth, 1000 + s)
            em.append(run(fit_em, body, scan, replace(RECOVERY_CONFIG, mu=frac), init))
            if frac == SWEEP_LEVELS[-1][1]:
                icp.append(run(fit_chamfer_icp, body, scan, RECOVERY_CONFIG, init))
        levels.append({"noise": noise, "frac": frac, "em": em, "icp": icp})
    return levels


@pytest.fixture(scope="module")
def partial(body):
    out = []
    for s in PARTIAL_SEEDS:
        scan, init = recovery_scan(body, s, view="partial")
        out.append(run(fit_em, body, scan, RECOVERY_CONFIG, init))
    return out


# -- 1 to 4, 8: exact properties -------------------------------------------

def test_c01_posterior_normalisation(acceptance):
    t0 = time.perf_counter()
    check = check_posterior_normalisation(np.random.default_rng(1), 1000)
    dt = time.perf_counter() - t0
    ok = check.passed and dt < 10.0
    acceptance(1, ok, f"1000 instances, worst |row + outlier - 1| {check.value:.2e} "
                      f"(limit 1e-9), mu=0 outlier mass exactly 0, {dt:.1f} s (limit 10 s)")
    assert ok


def test_c02_gradient_check(acceptance):
    t0 = time.perf_counter()
    check = check_gradients(np.random.default_rng(2), 100)
    dt = time.perf_counter() - t0
    ok = check.passed and dt < 60.0
    acceptance(2, ok, f"100 configurations, h=1e-5, worst relative error {check.value:.2e} "
                      f"(limit 1e-4), {dt:.1f} s (limit 60 s)")
    assert ok


def test_c03_chamfer_limit(acceptance):
    model = make_toy_humanoid(0, 400)
    gap = max(chamfer_limit_gap(model, seed) for seed in range(10))
    ok = gap <= 1e-9
    acceptance(3, ok, f"10 instances, largest trajectory gap {gap:.2e} (limit 1e-9)")
    assert ok


def test_c04_rotations(acceptance):
    check = check_rotations(np.random.default_rng(4), 10_000)
    acceptance(4, check.passed, f"10000 6-vectors, worst orthonormality/det error "
                                f"{check.value:.2e} (limit 1e-9), scale invariance to 1e-12")
    assert check.passed


def test_c08_sigma2_oracle(acceptance):
    check = check_sigma2_oracle(np.random.default_rng(8), 100)
    acceptance(8, check.passed, f"100 instances, worst relative error {check.value:.2e} "
                                f"(limit 1e-12)")
    assert check.passed


# -- 5 to 7, 9, 10: fitting ------------------------------------------------

def test_c05_parameter_recovery(acceptance, recovery):
    errs = np.array([r["v2v"] for r in recovery])
    secs = np.array([r["seconds"] for r in recovery])
    good = int(np.sum(errs < 5.0))
    ok = good >= 18 and np.all(secs < 30.0)
    acceptance(5, ok, f"{good}/20 scans under 5 mm V2V (need 18); median {np.median(errs):.2f} mm, "
                      f"worst {errs.max():.2f} mm; slowest fit {secs.max():.1f} s (limit 30 s)")
    assert ok


def test_c06_noise_outlier_sweep(acceptance, sweep):
    means = [np.mean([r["v2v"] for r in lvl["em"]]) for lvl in sweep]
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    ratio = means[-1] / means[0]
    last = sweep[-1]
    worse = [i["v2v"] > e["v2v"] for e, i in zip(last["em"], last["icp"])]
    ok = monotone and ratio <= 2.0 and all(worse)
    table = ", ".join(f"{lvl['noise'] * 1000:g}mm/{lvl['frac'] * 100:g}%: {m:.1f}"
                      for lvl, m in zip(sweep, means))
    acceptance(6, ok, f"mean V2V {table} mm; non-decreasing {monotone}; 20%/0% ratio "
                      f"{ratio:.2f} (limit 2.0); baseline worse on {sum(worse)}/{len(worse)} scans")
    assert ok


def test_c07_partial_view(acceptance, partial, recovery):
    full = np.mean([recovery[s]["v2v"] for s in PARTIAL_SEEDS])
    half = np.mean([r["v2v"] for r in partial])
    converged = all(r["finite"] for r in partial)
    ok = converged and half <= 3.0 * full
    acceptance(7, ok, f"partial-view mean V2V {half:.2f} mm vs full-view {full:.2f} mm, "
                      f"ratio {half / full:.2f} (limit 3.0)")
    assert ok


def test_c09_bandwidth_ablation(acceptance, body, suite, recovery):
    blurred = replace(RECOVERY_CONFIG, schedule="fixed", sigma2_itr_init=0.1)
    sharp = replace(RECOVERY_CONFIG, schedule="fixed", sigma2_itr_init=1e-6)
    annealed = np.mean([r["v2v"] for r in recovery])
    fixed_big = np.mean([run(fit_em, body, scan, blurred, init)["v2v"] for scan, init in suite])
    # far init: the cloud centroid with the template in its rest pose
    far = [run(fit_em, body, scan, sharp, None)["v2v"] for scan, _ in suite]
    failed = int(np.sum(np.array(far) >= 5.0))
    ok = fixed_big >= 1.2 * annealed and failed >= len(far) / 2
    acceptance(9, ok, f"fixed 0.1: mean V2V {fixed_big:.2f} mm vs annealed {annealed:.2f} mm, "
                      f"ratio {fixed_big / annealed:.2f} (need 1.2); fixed 1e-6 from far init "
                      f"misses 5 mm on {failed}/{len(far)} scans (need half)")
    assert ok


def test_c10_descent_invariant(acceptance, recovery, sweep, partial):
    fits = list(recovery) + list(partial)
    for lvl in sweep:
        fits += lvl["em"] + lvl["icp"]
    bad = sum(r["violations"] for r in fits)
    acceptance(10, bad == 0, f"{bad} loss increases over {len(fits)} fits from criteria 5 to 7")
    assert bad == 0


# -- 11: determinism -------------------------------------------------------

def test_c11_selftest_determinism(acceptance, tmp_path):
    env = dict(os.environ, ARTIFIT_THREADS="1")
    codes, blobs = [], []
    for name in ("a", "b"):
        proc = subprocess.run([sys.executable, "-m", "artifit.cli", "selftest", "--seed", "0",
                               "--out", str(tmp_path / name)], env=env, capture_output=True,
                              text=True)
        codes.append(proc.returncode)
        blobs.append((tmp_path / name / "selftest.json").read_bytes())
    ok = codes == [0, 0] and blobs[0] == blobs[1]
    acceptance(11, ok, f"two selftest runs with ARTIFIT_THREADS=1: exit codes {codes}, "
                       f"reports {'identical' if blobs[0] == blobs[1] else 'differ'} "
                       f"({len(blobs[0])} bytes)")
    assert ok
