"""End-to-end acceptance battery.

Each test prints one `ACCEPTANCE <tag>: PASS|FAIL` line (bypassing capture)
so the battery's verdict is visible in any pytest run.  Statistical rows use
plain three-sigma bands with a 1e-9 zero-variance floor.

One red is expected and deliberate: the quadratic-observable exit moment is
asserted against its population limit at n=100, where the estimator's exact
finite-population value sits ~14 sigma below that limit (the boundary atom's
1/n mass deficit enters squared).  The companion tests prove the estimator
matches the exact finite-n value and converges to the limit as n grows, so
the red marks an unattainable tolerance, not a defect in the code.
"""

import math
import sys
import time

import numpy as np
import pytest

from flemvi.cli import main as cli_main
from flemvi.geometry import interval
from flemvi.kernels import (
    InitialLaw,
    RelocationKernel,
    admissible_from_perturbation,
)
from flemvi.measures import CylinderFunction
from flemvi.simulator import (
    first_exit_batch,
    resolvent_estimate,
    run_replicas,
    semigroup_estimate,
)
from flemvi.spectral import DensityMeasure, SpectralBasis, flow
from flemvi.verify import (
    convergence_experiment,
    exit_moment_check,
    identity_suite,
    jump_increment_checks,
    suite_passed,
)

PI = math.pi
FLOOR = 1e-9
LIMIT_QUAD = PI / 16  # population limit of the quadratic exit moment

# collected per-criterion verdict lines, echoed in the terminal summary
ANNOUNCEMENTS = []


def announce(tag, passed, detail):
    state = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {tag}: {state} - {detail}"
    ANNOUNCEMENTS.append(line)
    print(line, file=sys.__stdout__, flush=True)


def band(stderr, k=3.0):
    return k * max(float(stderr), FLOOR)


@pytest.fixture(scope="module")
def basis64():
    return SpectralBasis(interval(0.0, PI), truncation_K=64)


@pytest.fixture(scope="module")
def stationary64(basis64):
    return InitialLaw.single(admissible_from_perturbation(basis64, {}))


@pytest.fixture(scope="module")
def identity_reports(basis64):
    t0 = time.perf_counter()
    reports = identity_suite(basis64)
    return reports, time.perf_counter() - t0


# -- 1: deterministic identity suite --------------------------------------------

def test_acceptance_1_identity_suite(identity_reports):
    reports, elapsed = identity_reports
    by_name = {r.name: r for r in reports}
    series = by_name["identity:series_reconstruction"]
    decay = by_name["identity:stationary_decay_rate"]
    routes = by_name["identity:curvature_mass_two_routes"]
    semi = by_name["identity:flow_semigroup_property"]
    checks = [
        series.passed and series.tolerance == 1e-6,
        decay.passed and decay.tolerance == 1e-12,
        routes.passed and routes.tolerance == 1e-8 and routes.samples >= 5,
        semi.passed and semi.tolerance == 1e-10 and semi.samples == 100,
        elapsed < 30.0,
    ]
    ok = all(checks)
    announce(
        "1 (identity suite)",
        ok,
        f"series sup {series.lhs:.2e} < 1e-6, decay rate dev "
        f"{abs(decay.lhs - decay.rhs):.1e} < 1e-12, mass routes "
        f"{routes.lhs:.2e} < 1e-8 on {routes.samples} densities, flow "
        f"property {semi.lhs:.2e} < 1e-10 on {semi.samples} triples, "
        f"{elapsed:.1f}s < 30s",
    )
    assert ok


# -- 2: generator checks ----------------------------------------------------------

def test_acceptance_2_generator_checks(identity_reports):
    reports, _elapsed = identity_reports
    by_name = {r.name: r for r in reports}
    ratio = by_name["generator:flow_derivative_fd_ratio"]
    disc = by_name["generator:discrete_matches_lifted_laplacian"]
    checks = [
        ratio.passed and ratio.tolerance == 20.0 and ratio.samples == 20,
        disc.passed and disc.tolerance == 1e-6,
    ]
    ok = all(checks)
    announce(
        "2 (generator checks)",
        ok,
        f"step-halving error ratio within 100±20 on {ratio.samples} pairs "
        f"(worst dev {ratio.lhs:.2f}); discrete generator vs brute-force "
        f"lifted Laplacian rel err {disc.lhs:.1e} < 1e-6",
    )
    assert ok


# -- 3: absorbed-path calibration ---------------------------------------------------

def _survival_series(basis, x, t):
    vals = basis.eigenfunction_matrix(np.array([[x]]))[:, 0]
    terms = np.exp(basis.lambdas * t) * vals * basis.unit_integrals
    return math.fsum(terms)


def test_acceptance_3_absorbed_path_calibration(basis64):
    t0 = time.perf_counter()
    B, dt = 10**5, 1e-3
    dom = basis64.domain

    # exit-side probability from x0
    x0 = 1.0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(20260301)))
    finals, _hit, _taus = first_exit_batch(dom, np.full((B, 1, 1), x0), dt, rng)
    ends = finals[:, 0, 0]
    left = float(np.mean(np.abs(ends) < 1e-9))
    p_left = 1.0 - x0 / PI
    se_left = math.sqrt(p_left * (1.0 - p_left) / B)
    ok_side = abs(left - p_left) <= 3 * se_left

    # survival probabilities from the center
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(20260302)))
    _f, _h, taus = first_exit_batch(dom, np.full((B, 1, 1), PI / 2), dt, rng)
    oracle = {t: _survival_series(basis64, PI / 2, t) for t in (0.2, 0.5)}
    assert oracle[0.2] == pytest.approx(0.9991118664449717, abs=1e-10)
    assert oracle[0.5] == pytest.approx(0.9473578502096944, abs=1e-10)
    surv_checks = {}
    for t, p in oracle.items():
        est = float(np.mean(taus > t))
        se = math.sqrt(p * (1.0 - p) / B)
        surv_checks[t] = (est, se, abs(est - p) <= 3 * se)

    elapsed = time.perf_counter() - t0
    ok = ok_side and all(v[2] for v in surv_checks.values()) and elapsed < 120.0
    announce(
        "3 (absorbed-path calibration)",
        ok,
        f"side prob {left:.5f} vs {p_left:.5f} "
        f"({(left - p_left) / se_left:+.2f} sigma); survival "
        + ", ".join(
            f"t={t:g}: {est:.5f} vs {oracle[t]:.5f} ({(est - oracle[t]) / se:+.2f} sigma)"
            for t, (est, se, _ok) in surv_checks.items()
        )
        + f"; {elapsed:.0f}s < 120s",
    )
    assert ok


# -- 4: exit moments of the curvature-weighted start law -----------------------------

@pytest.fixture(scope="module")
def quadratic_exit_moment(stationary64):
    f = CylinderFunction.polynomial((1,), [(1.0, (2,))], name="pair1_sq")
    report = exit_moment_check(
        stationary64, f, n=100, M=2000, dt=1e-4, seed=20260411
    )
    return report


def _finite_n_quadratic_oracle(basis, n):
    """Exact value of the quadratic exit moment at population size n.

    At the exit instant the interior atoms are i.i.d. from the stationary
    profile (renewal structure of the single-component coupled kernel), and
    the boundary atom contributes zero, so the squared pairing has mean
    ((n-1)/n)^2 m^2 + (n-1)/n^2 Var with m, Var the profile's pairing moments;
    the curvature-weighted mass contributes the factor 1/2.
    """
    prof = DensityMeasure.stationary_profile(basis)
    m = prof.pair(1)
    h1sq = lambda pts: basis.eigenfunction(1, pts) ** 2 * prof.density(pts)
    second = basis.integrate(h1sq)
    var = second - m * m
    return 0.5 * (((n - 1) / n) ** 2 * m * m + (n - 1) / n**2 * var)


def test_acceptance_4_exit_moment_constant(stationary64):
    one = CylinderFunction.constant(1.0)
    report = exit_moment_check(
        stationary64, one, n=100, M=2000, dt=1e-4, seed=20260401
    )
    ok = abs(report.lhs - 0.5) <= band(report.stderr)
    announce(
        "4 (exit moment, constant observable)",
        ok,
        f"estimate {report.lhs:.12f} vs 0.5 exactly (zero-variance), "
        f"n=100, M=2000, dt=1e-4",
    )
    assert ok


def test_acceptance_4_exit_moment_quadratic_limit(quadratic_exit_moment):
    """Asserted against the population limit as stated; unattainable at n=100
    (exact finite-population value sits ~14 sigma below the limit), so this
    row is expected red.  See the module docstring and the companions below."""
    report = quadratic_exit_moment
    dev = report.lhs - LIMIT_QUAD
    se = max(report.stderr, FLOOR)
    ok = abs(dev) <= band(report.stderr)
    announce(
        "4 (exit moment, quadratic observable vs limit)",
        ok,
        f"estimate {report.lhs:.6f} ± {report.stderr:.6f} vs limit "
        f"{LIMIT_QUAD:.6f} ({dev / se:+.1f} sigma)"
        + ("" if ok else "; expected red: finite-population bias, "
                         "see companion tests"),
    )
    assert ok


def test_acceptance_4_companion_finite_n_oracle(basis64, quadratic_exit_moment):
    report = quadratic_exit_moment
    oracle = _finite_n_quadratic_oracle(basis64, 100)
    assert oracle == pytest.approx(0.19259916978086414, abs=1e-12)
    dev = report.lhs - oracle
    ok = abs(dev) <= band(report.stderr)
    announce(
        "4 (companion: exact finite-n value)",
        ok,
        f"estimate {report.lhs:.6f} ± {report.stderr:.6f} vs exact n=100 "
        f"value {oracle:.6f} ({dev / max(report.stderr, FLOOR):+.1f} sigma)",
    )
    assert ok


def test_acceptance_4_companion_bias_vanishes(basis64, stationary64,
                                              quadratic_exit_moment):
    f = CylinderFunction.polynomial((1,), [(1.0, (2,))], name="pair1_sq")
    ests = {100: (quadratic_exit_moment.lhs, quadratic_exit_moment.stderr)}
    for n, seed in ((200, 20260403), (400, 20260404)):
        r = exit_moment_check(stationary64, f, n=n, M=1000, dt=1e-4, seed=seed)
        ests[n] = (r.lhs, r.stderr)
    oracle_devs = {n: LIMIT_QUAD - _finite_n_quadratic_oracle(basis64, n)
                   for n in ests}
    checks = []
    for n, (est, se) in ests.items():
        checks.append(abs((LIMIT_QUAD - est) - oracle_devs[n]) <= band(se))
    # the exact deviation halves with each doubling of n
    checks.append(oracle_devs[100] > oracle_devs[200] > oracle_devs[400] > 0)
    checks.append(oracle_devs[100] / oracle_devs[200] == pytest.approx(2.0, rel=0.02))
    ok = all(checks)
    announce(
        "4 (companion: limit bias vanishes ~1/n)",
        ok,
        "measured deviation from the limit matches the exact 1/n law: "
        + ", ".join(
            f"n={n}: {(LIMIT_QUAD - est):.5f}±{se:.5f} (exact {oracle_devs[n]:.5f})"
            for n, (est, se) in sorted(ests.items())
        ),
    )
    assert ok


# -- 5: coupled jump-increment split ---------------------------------------------------

def test_acceptance_5_jump_increment_split(stationary64):
    f = CylinderFunction.coordinate(1)
    kernel = RelocationKernel.mixture_reweighted(stationary64)
    reports = jump_increment_checks(
        stationary64, f, n=100, M=4000, dt=1e-3, kernel=kernel, seed=20260501
    )
    rep, diff, tot = reports
    assert rep.rhs == pytest.approx(0.31332853432887514, abs=1e-12)
    assert diff.rhs == pytest.approx(-0.31332853432887514, abs=1e-12)
    assert tot.rhs == 0.0
    checks = [
        abs(rep.lhs - rep.rhs) <= band(rep.stderr),
        abs(diff.lhs - diff.rhs) <= band(diff.stderr),
        abs(tot.lhs) <= band(tot.stderr),
    ]
    ok = all(checks)
    announce(
        "5 (jump-increment split)",
        ok,
        f"replenishment {rep.lhs:+.5f}±{rep.stderr:.5f} vs {rep.rhs:+.5f}; "
        f"diffusion {diff.lhs:+.5f}±{diff.stderr:.5f} vs {diff.rhs:+.5f}; "
        f"coupled sum {tot.lhs:+.5f}±{tot.stderr:.5f} vs 0 "
        f"(n=100, M=4000)",
    )
    assert ok


# -- 6: weak-convergence ladder ----------------------------------------------------------

def test_acceptance_6_weak_convergence_ladder(basis64):
    t0 = time.perf_counter()
    law = InitialLaw.single(admissible_from_perturbation(basis64, {2: 0.1}))
    kernel = RelocationKernel.mixture_reweighted(law)
    reports = convergence_experiment(
        law, 0.25, [50, 200, 800], 200, 1e-3, kernel, seed=20260601,
        modes=(1, 2),
    )
    elapsed = time.perf_counter() - t0
    ok = suite_passed(reports) and elapsed < 1800.0
    top = {r.name: r for r in reports if "n=800" in r.name}
    trends = [r for r in reports if "trend" in r.name]
    announce(
        "6 (weak-convergence ladder)",
        ok,
        "; ".join(
            f"{name}: {r.lhs:.5f}±{r.stderr:.5f} vs {r.rhs:.5f}"
            for name, r in sorted(top.items())
        )
        + "; "
        + "; ".join(f"{r.name}: {int(r.lhs)} inversion(s)" for r in trends)
        + f"; {elapsed:.0f}s < 1800s",
    )
    assert ok


def test_acceptance_6_flowed_mode_ratio(basis64):
    law = InitialLaw.single(admissible_from_perturbation(basis64, {2: 0.1}))
    mu = law.components[0][1].mu
    ratios = {}
    for t, target in ((0.5, 0.04723665527410147), (1.0, 0.022313016014842982)):
        flowed = flow(mu, t)
        ratios[t] = flowed.pair(2) / flowed.pair(1)
        assert ratios[t] == pytest.approx(target, abs=1e-12)
    ok = abs(ratios[0.5] - 0.047237) < 1e-6
    announce(
        "6 (flowed mode ratio)",
        ok,
        f"mode-2/mode-1 pairing ratio at t=0.5: {ratios[0.5]:.9f} "
        f"(target 0.047237), t=1: {ratios[1.0]:.9f}",
    )
    assert ok


# -- 7: operator limits ---------------------------------------------------------------------

def test_acceptance_7_resolvent_of_constant(stationary64):
    one = CylinderFunction.constant(1.0)
    kernel = RelocationKernel.mixture_reweighted(stationary64)
    beta = 1.0
    rows = {}
    ok = True
    for n, seed in ((25, 20260701), (100, 20260702), (400, 20260703)):
        est, se, _tail = resolvent_estimate(
            stationary64, one, beta, n, 8, 5e-3, kernel, seed
        )
        rows[n] = (est, se)
        ok = ok and abs(est - 1.0 / beta) <= band(se)
    announce(
        "7 (resolvent of the constant)",
        ok,
        "beta*resolvent(1) vs 1: "
        + ", ".join(f"n={n}: {est:.12f}±{se:.1e}" for n, (est, se) in rows.items()),
    )
    assert ok


def test_acceptance_7_semigroup_at_fixed_point(stationary64):
    g = CylinderFunction.coordinate(1)
    one = CylinderFunction.constant(1.0)
    kernel = RelocationKernel.mixture_reweighted(stationary64)
    target = 0.6266570686577502
    prof = DensityMeasure.stationary_profile(stationary64.basis)
    assert prof.pair(1) == pytest.approx(target, abs=1e-12)
    est, se = semigroup_estimate(
        stationary64, g, one, 0.25, 400, 200, 1e-3, kernel, seed=20260704
    )
    ok = abs(est - target) <= band(se)
    announce(
        "7 (semigroup at the fixed point)",
        ok,
        f"estimate {est:.5f}±{se:.5f} vs {target:.5f} "
        f"({(est - target) / max(se, FLOOR):+.2f} sigma) at n=400, t=0.25",
    )
    assert ok


# -- 8: engineering ---------------------------------------------------------------------------

def test_acceptance_8_byte_identity_across_jobs(tmp_path):
    import json

    cfg = {
        "domain": {"kind": "interval", "bounds": [0.0, PI]},
        "truncation": 8,
        "components": [{"weight": 1.0, "modes": {}}],
        "kernel": "mixture_reweighted",
        "n_list": [4, 8],
        "replicas": 16,
        "dt": 0.002,
        "horizon": 0.05,
        "observables": [{"name": "m1", "modes": [1], "terms": [[1.0, [1]]]}],
        "seed": 20260801,
        "output_dir": str(tmp_path / "o"),
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    blobs = []
    for jobs in ("1", "3"):
        out = tmp_path / f"jobs{jobs}"
        cli_main(["verify", "--config", str(path), "--suite", "jumps",
                  "--jobs", jobs, "--out", str(out)])
        cli_main(["simulate", "--config", str(path), "--jobs", jobs,
                  "--out", str(out)])
        blobs.append(
            (out / "report_jumps.json").read_bytes()
            + (out / "trajectory.csv").read_bytes()
            + (out / "jumps.csv").read_bytes()
        )

    def worker(rng, m):
        return float(rng.normal()) + m

    replica_ok = bool(np.array_equal(
        run_replicas(24, 20260801, worker, jobs=1),
        run_replicas(24, 20260801, worker, jobs=4),
    ))
    ok = blobs[0] == blobs[1] and replica_ok
    announce(
        "8 (byte identity across --jobs)",
        ok,
        f"report+trajectory+jump-log bytes equal for jobs 1 vs 3 "
        f"({len(blobs[0])} bytes); replica engine equal for jobs 1 vs 4",
    )
    assert ok


def test_acceptance_8_dt_halving_within_band(stationary64):
    g = CylinderFunction.coordinate(1)
    one = CylinderFunction.constant(1.0)
    kernel = RelocationKernel.mixture_reweighted(stationary64)
    pairs = {}

    a = semigroup_estimate(stationary64, g, one, 0.2, 25, 200, 2e-3, kernel,
                           seed=20260802)
    b = semigroup_estimate(stationary64, g, one, 0.2, 25, 200, 1e-3, kernel,
                           seed=20260802)
    pairs["semigroup[n=25]"] = (a, b)

    ra = exit_moment_check(stationary64, g, n=25, M=400, dt=2e-3, seed=20260803)
    rb = exit_moment_check(stationary64, g, n=25, M=400, dt=1e-3, seed=20260803)
    pairs["exit_moment[n=25]"] = ((ra.lhs, ra.stderr), (rb.lhs, rb.stderr))

    checks = {}
    for name, ((ea, sa), (eb, sb)) in pairs.items():
        checks[name] = abs(ea - eb) <= 3 * max(math.hypot(sa, sb), FLOOR)
    ok = all(checks.values())
    announce(
        "8 (dt-halving stability)",
        ok,
        "; ".join(
            f"{name}: |{ea:.5f}-{eb:.5f}| <= 3*{math.hypot(sa, sb):.5f}"
            for name, ((ea, sa), (eb, sb)) in pairs.items()
        ),
    )
    assert ok
