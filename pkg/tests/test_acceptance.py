"""End-to-end acceptance checks, one test per shipped guarantee.

Each test prints a single PASS line with its runtime; the stated time
limits are asserted. The 2-dim carrier used from criterion 5 on is
A = diag(-1, 1) with G = 0.05 Id: the backward second moment of the
unstable component decays at 2a - 3 sigma^2 = 1.9925, slower than the
forward stable rate 2a + sigma^2 = 1.9975, so (M, alpha, eps) =
(1, 1.9925, 0) is the exact joint envelope and every constant below
derives from it.
"""

import filecmp
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from msdlab.coefficients import CoefficientSpec, Interval, MatrixExpression
from msdlab.dichotomy import (
    STABLE,
    UNSTABLE,
    DichotomyParams,
    MsNormCurve,
    ProjectionFamily,
    fit_envelope,
    verify_dichotomy,
    write_verify_csv,
)
from msdlab.engine import (
    SimGrid,
    ms_norm_curve,
    simulate_forward,
    write_curve_csv,
    write_ensemble_csv,
)
from msdlab.fixedpoint import (
    build_projection_left,
    build_projection_right,
    glue_projections,
    picard_solve_green,
    picard_solve_U,
    write_convergence_csv,
    write_field_csv,
)
from msdlab.linalg import spectral_norm_sq
from msdlab.oracle import (
    ExampleParams,
    example_u_mc_spec,
    log_ms_u,
    log_transition_ms_u,
    ms_u,
    transition_ms_u,
    true_envelope,
    witnesses,
)
from msdlab.robustness import (
    check_dichotomy_condition,
    m_tilde,
    projection_distance_bound,
    s_invertibility_bound,
)

P_EX = ExampleParams(a=4.0, b=1.0)

M0, ALPHA0, EPS0 = 1.0, 1.9925, 0.0
B_P, G_N, H_P = 0.02, 0.05, 0.02
PARAMS0 = DichotomyParams(m=M0, alpha=ALPHA0, eps=EPS0, kind="dichotomy")


def hyperbolic_spec(kind="right", t0=0.0, b=0.0, h=0.0):
    kw = dict(
        dim=2,
        interval=Interval(kind, t0),
        a=MatrixExpression.parse("[[-1, 0], [0, 1]]", 2),
        a_bound=1.0,
        g=MatrixExpression.parse(f"[[{G_N!r}, 0], [0, {G_N!r}]]", 2),
        g_bound=G_N,
    )
    if b:
        kw["b"] = MatrixExpression.parse(f"[[0, {b!r}], [{b!r}, 0]]", 2)
        kw["b_bound"] = b
    if h:
        kw["h"] = MatrixExpression.parse(f"[[0, {h!r}], [-{h!r}, 0]]", 2)
        kw["h_bound"] = h
    return CoefficientSpec(**kw)


def stable_family(t0=0.0):
    return ProjectionFamily(base_projection=np.diag([1.0, 0.0]), t0=t0, rank=1)


def lattice(lo, hi, step):
    n = int(round((hi - lo) / step))
    return [lo + step * k for k in range(n + 1)]


# ---------------------------------------------------------------------------
# criterion 1: closed-form oracle fidelity, no Monte Carlo


def test_criterion_01_oracle_fidelity():
    t0 = time.perf_counter()
    grid = np.linspace(0.0, 50.0 * np.pi, 200)
    tt, ss = np.meshgrid(grid, grid, indexing="ij")
    mask = tt >= ss
    t, s = tt[mask], ss[mask]

    log_t = log_ms_u(P_EX, t)
    log_s = log_ms_u(P_EX, s)
    log_tr = log_transition_ms_u(P_EX, t, s)

    # product identity in linear scale wherever doubles can hold it
    direct = (log_t >= -700.0) & (log_s >= -700.0)
    prod = transition_ms_u(P_EX, t[direct], s[direct]) * ms_u(P_EX, s[direct])
    rel = np.abs(prod - ms_u(P_EX, t[direct])) / ms_u(P_EX, t[direct])
    assert direct.sum() > 1000
    assert float(rel.max()) < 1e-12
    # below the underflow floor the identity is checked on exponents;
    # expm1 of the residual is the relative product error
    resid = log_tr + log_s - log_t
    assert float(np.abs(np.expm1(resid)).max()) < 1e-12

    # envelope domination with (alpha, eps) = (6, 4) at every grid point
    env = true_envelope(P_EX)
    assert (env.alpha, env.eps) == (6.0, 4.0)
    slack = (-env.alpha * (t - s) + env.eps * s) - log_tr
    assert float(slack.min()) >= -1e-9

    # equality at the witness pairs (2 m pi, (2 j + 1) pi)
    for m in range(1, 9):
        tw = 2.0 * m * np.pi
        for j in range(m):
            sw = (2.0 * j + 1.0) * np.pi
            lhs = float(log_transition_ms_u(P_EX, tw, sw))
            rhs = -env.alpha * (tw - sw) + env.eps * sw
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))
            # m = 8 keeps both sides representable in linear scale too
            lin = float(transition_ms_u(P_EX, tw, sw))
            assert abs(lin - math.exp(rhs)) <= 1e-12 * math.exp(rhs)
    w = witnesses(P_EX, 8)
    assert w.shape == (8, 2)

    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    print(f"PASS: criterion 1 — oracle fidelity on 200x200 grid ({elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# criterion 2: Monte Carlo second moment against the closed form


def test_criterion_02_monte_carlo_vs_oracle():
    t0 = time.perf_counter()
    spec = example_u_mc_spec(P_EX)
    grid = SimGrid(s=0.0, t_max=1.5, dt=1e-3, nodes=(0.0, 0.5, 1.0, 1.5))
    ens = simulate_forward(spec, grid, 100_000, seed=42)
    assert not ens.blown_up.any()
    for j, t in [(1, 0.5), (2, 1.0), (3, 1.5)]:
        u = ens.samples[:, j, 0, 0] + ens.samples[:, j, 0, 1]
        u2 = u * u
        mean = float(u2.mean())
        stderr = float(u2.std(ddof=1)) / math.sqrt(u2.shape[0])
        target = math.exp(-2.0 * 4.0 * t + 2.0 * 1.0 * t * math.cos(t))
        tolerance = max(3.0 * stderr, 0.02 * target)
        assert abs(mean - target) <= tolerance, (t, mean, target, 3 * stderr)
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    print(f"PASS: criterion 2 — 1e5-path second moments match the closed form ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 3: envelope fitting


def test_criterion_03_envelope_fitting():
    t0 = time.perf_counter()
    # exact uniform contraction data
    pairs, ests = [], []
    for s in lattice(0.0, 5.0, 1.0):
        for gap in lattice(0.0, 5.0, 0.5):
            pairs.append((s + gap, s))
            ests.append(math.exp(-2.0 * gap))
    pairs = np.asarray(pairs)
    ests = np.asarray(ests)
    curve = MsNormCurve(
        t=pairs[:, 0], s=pairs[:, 1], estimate=ests,
        stderr=np.zeros_like(ests), n_effective=np.full(ests.shape, 1, np.int64),
    )
    p = fit_envelope(curve, direction=STABLE)
    assert abs(p.m - 1.0) <= 1e-6
    assert abs(p.alpha - 2.0) <= 1e-6
    assert abs(p.eps - 0.0) <= 1e-6

    # closed-form oscillating data over [0, 20 pi] on a pi/2 lattice
    step = math.pi / 2.0
    ss, tt = [], []
    for i in range(41):
        for k in range(41 - i):
            ss.append(i * step)
            tt.append((i + k) * step)
    tt, ss = np.asarray(tt), np.asarray(ss)
    est = np.exp(log_transition_ms_u(P_EX, tt, ss))
    assert np.all(np.isfinite(est)) and np.all(est > 0)
    curve2 = MsNormCurve(
        t=tt, s=ss, estimate=est,
        stderr=np.zeros_like(est), n_effective=np.full(est.shape, 1, np.int64),
    )
    p2 = fit_envelope(curve2, direction=STABLE)
    assert abs(p2.alpha - 6.0) <= 0.05 * 6.0
    assert abs(p2.eps - 4.0) <= 0.05 * 4.0

    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    print(f"PASS: criterion 3 — fits recover (1,2,0) exactly and (6,4) within 5% ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 4: robustness arithmetic, exact


def test_criterion_04_robustness_arithmetic():
    t0 = time.perf_counter()
    rep = check_dichotomy_condition(m=1.0, alpha=2.0, eps=0.5, b=0.05, g=1.0, h=0.05)
    assert abs(rep.m_tilde - 0.045) <= 1e-12
    assert abs(rep.threshold - 0.2) <= 1e-12
    assert rep.condition_ok
    assert abs(rep.predicted_alpha - 0.775) <= 1e-12
    assert abs(rep.theta - 0.33541019662496846) <= 1e-12
    assert abs(rep.predicted_m - 40.0) <= 1e-12
    assert abs(rep.predicted_eps - 1.0) <= 1e-12
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    print(f"PASS: criterion 4 — worked robustness constants exact to 1e-12 ({elapsed:.2f}s)")


# ---------------------------------------------------------------------------
# criterion 5: trivial fixed point is exact


def test_criterion_05_trivial_fixed_point():
    t0 = time.perf_counter()
    spec = hyperbolic_spec()
    grid = SimGrid(s=0.0, t_max=2.0, dt=0.01, nodes=tuple(lattice(0.0, 2.0, 0.25)))
    field = picard_solve_U(
        spec, PARAMS0, stable_family(), grid, n_paths=1000, seed=77,
        max_iter=50, tol=1e-4,
    )
    assert field.kernel_is_zero
    assert field.converged and field.iterate_index == 1
    assert field.log[0].diff_norm == 0.0
    ens_p = simulate_forward(spec, grid, 1000, 77, system="perturbed")
    fam_hat = build_projection_right(field, ens_p)
    assert np.array_equal(
        fam_hat.base_projection, np.broadcast_to(np.diag([1.0, 0.0]), (1000, 2, 2))
    )
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    print(f"PASS: criterion 5 — zero kernel converges at iterate 1 with exact anchor ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criteria 6 and 7 share one solve


@pytest.fixture(scope="module")
def perturbed_run():
    t0 = time.perf_counter()
    spec = hyperbolic_spec(b=B_P, h=H_P)
    gate = check_dichotomy_condition(M0, ALPHA0, EPS0, B_P, G_N, H_P)
    assert gate.condition_ok
    grid = SimGrid(s=0.0, t_max=4.0, dt=2.5e-3, nodes=tuple(lattice(0.0, 4.0, 0.25)))
    # default bases: one per integer, so criterion 7 can anchor locally
    field = picard_solve_U(
        spec, PARAMS0, stable_family(), grid, n_paths=10_000, seed=101,
        max_iter=50, tol=1e-4, t_trunc=16.0,
    )
    pgrid = SimGrid(s=0.0, t_max=4.0, dt=2.5e-3, nodes=tuple(lattice(0.0, 4.0, 0.5)))
    ens_p = simulate_forward(spec, pgrid, 10_000, 101, system="perturbed")
    seconds = time.perf_counter() - t0
    return {
        "spec": spec, "gate": gate, "grid": grid, "field": field,
        "ens_p": ens_p, "seconds": seconds,
    }


def test_criterion_06_contraction_ratio(perturbed_run):
    t0 = time.perf_counter()
    field = perturbed_run["field"]
    gate = perturbed_run["gate"]
    mt = m_tilde(B_P, G_N, H_P, ALPHA0)
    assert gate.theta == pytest.approx(math.sqrt(10.0 * M0 * mt) / ALPHA0, rel=1e-12)
    assert field.converged and field.iterate_index <= 50
    assert len(field.log) >= 2
    for rec in field.log[1:]:
        assert rec.ratio <= gate.theta + 0.1, (rec.iterate, rec.ratio)
    elapsed = perturbed_run["seconds"] + (time.perf_counter() - t0)
    assert elapsed < 300.0
    print(f"PASS: criterion 6 — iterate ratios below theta+0.1 = {gate.theta + 0.1:.4f} ({elapsed:.1f}s)")


def _concat_curves(curves):
    return MsNormCurve(
        t=np.concatenate([c.t for c in curves]),
        s=np.concatenate([c.s for c in curves]),
        estimate=np.concatenate([c.estimate for c in curves]),
        stderr=np.concatenate([c.stderr for c in curves]),
        n_effective=np.concatenate([c.n_effective for c in curves]),
    )


def test_criterion_07_perturbed_envelope(perturbed_run):
    t0 = time.perf_counter()
    field = perturbed_run["field"]
    ens_p = perturbed_run["ens_p"]
    gate = perturbed_run["gate"]
    predicted = gate.predicted
    assert predicted.m == pytest.approx(40.0 * M0, abs=1e-12)
    assert predicted.alpha == pytest.approx(
        ALPHA0 / 2.0 - 10.0 * M0 * gate.m_tilde / ALPHA0, abs=1e-12
    )
    assert predicted.eps == pytest.approx(2.0 * EPS0, abs=1e-12)

    # the family is rebuilt at each base so no estimate conjugates a
    # base value's error farther than the pair's own gap; conjugating
    # one anchor across the window amplifies that error exponentially
    s_curves, u_curves = [], []
    n_expected = 0
    for a in (0.0, 1.0, 2.0, 3.0, 4.0):
        fam_a = build_projection_right(field, ens_p, base=a)
        sp = np.asarray([(t, a) for t in lattice(a, 4.0, 0.5)])
        up = np.asarray([(a - gap, a) for gap in lattice(0.0, a, 0.5)])
        s_curves.append(ms_norm_curve(ens_p, sp, post=fam_a, label="stable"))
        u_curves.append(ms_norm_curve(ens_p, up, post=fam_a.complement(), label="unstable"))
        n_expected += len(sp) + len(up)
    report = verify_dichotomy(
        _concat_curves(s_curves), _concat_curves(u_curves), predicted, buffer=3.0
    )
    assert report.n_pairs == n_expected == 50
    assert len(report.violations) == 0, report.violations[:3]
    assert report.ok
    elapsed = perturbed_run["seconds"] + (time.perf_counter() - t0)
    assert elapsed < 300.0
    print(f"PASS: criterion 7 — {report.n_pairs} pairs inside the predicted envelope ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 8: projection distance bound and decay


def test_criterion_08_projection_distance():
    t0 = time.perf_counter()
    grid = SimGrid(s=0.0, t_max=2.0, dt=5e-3, nodes=tuple(lattice(0.0, 2.0, 0.25)))
    pgrid = SimGrid(s=0.0, t_max=2.0, dt=5e-3, nodes=(0.0, 2.0))
    nominal = np.diag([1.0, 0.0])
    measured = []
    for size in (0.02, 0.01, 0.005):
        spec = hyperbolic_spec(b=size, h=size)
        field = picard_solve_U(
            spec, PARAMS0, stable_family(), grid, n_paths=4000, seed=202,
            max_iter=50, tol=1e-4, t_trunc=14.0, base_times=(0.0,),
        )
        ens_p = simulate_forward(spec, pgrid, 4000, 202, system="perturbed")
        fam_hat = build_projection_right(field, ens_p)
        diff = fam_hat.base_projection[~fam_hat.excluded] - nominal
        ms = float(spectral_norm_sq(diff).mean())
        bound = projection_distance_bound(M0, ALPHA0, EPS0, size, G_N, size, t=0.0)
        assert ms <= bound, (size, ms, bound)
        measured.append(ms)
    assert measured[0] > measured[1] > measured[2] > 0.0
    elapsed = time.perf_counter() - t0
    assert elapsed < 600.0
    print(
        "PASS: criterion 8 — anchor distances "
        f"{measured[0]:.2e} > {measured[1]:.2e} > {measured[2]:.2e}, all below bounds ({elapsed:.1f}s)"
    )


# ---------------------------------------------------------------------------
# criterion 9: whole-line gluing


def test_criterion_09_gluing():
    t0 = time.perf_counter()
    spec = hyperbolic_spec(kind="whole", t0=0.0, b=B_P, h=H_P)
    grid = SimGrid(s=-4.0, t_max=4.0, dt=2.5e-3, nodes=tuple(lattice(-4.0, 4.0, 0.25)))
    fam = stable_family()
    u, v = picard_solve_green(
        spec, PARAMS0, fam, grid, n_paths=6000, seed=303,
        max_iter=50, tol=1e-4, t_trunc=16.0,
    )
    assert u.converged and v.converged
    pgrid = SimGrid(
        s=u.sim_start, t_max=4.0, dt=2.5e-3,
        nodes=tuple(lattice(u.sim_start, 4.0, 0.5)),
    )
    ens_p = simulate_forward(spec, pgrid, 6000, 303, system="perturbed")
    right = build_projection_right(u, ens_p)
    left = build_projection_left(v, ens_p)
    s_bound = s_invertibility_bound(M0, ALPHA0, EPS0, B_P, G_N, H_P)
    glued = glue_projections(right, left, fam, ens_p, s_bound=s_bound)
    assert glued.within_bound is True, (glued.ms_distance_to_id, s_bound)
    assert glued.n_used > 0.99 * 6000
    pt = glued.p_tilde_base[~glued.singular]
    idem_ms = float(spectral_norm_sq(pt @ pt - pt).mean())
    assert idem_ms <= 1e-6
    elapsed = time.perf_counter() - t0
    assert elapsed < 600.0
    print(
        f"PASS: criterion 9 — E n(S-Id)^2 = {glued.ms_distance_to_id:.2e} <= {s_bound:.2e}, "
        f"{glued.n_used}/6000 invertible, idem ms {idem_ms:.1e} ({elapsed:.1f}s)"
    )


# ---------------------------------------------------------------------------
# criterion 10: determinism


def _mc_ensemble_csv(path, n_paths=2000):
    grid = SimGrid(s=0.0, t_max=1.5, dt=1e-3, nodes=(0.0, 0.5, 1.0, 1.5))
    ens = simulate_forward(example_u_mc_spec(P_EX), grid, n_paths, seed=42)
    write_ensemble_csv(ens, path)


def _picard_outputs(outdir):
    os.makedirs(outdir, exist_ok=True)
    spec = hyperbolic_spec(b=B_P, h=H_P)
    grid = SimGrid(s=0.0, t_max=1.0, dt=0.01, nodes=tuple(lattice(0.0, 1.0, 0.25)))
    field = picard_solve_U(
        spec, PARAMS0, stable_family(), grid, n_paths=500, seed=101,
        max_iter=50, tol=1e-3, t_trunc=10.0, base_times=(0.0,),
    )
    write_field_csv(field, os.path.join(outdir, "field.csv"))
    write_convergence_csv(field, os.path.join(outdir, "convergence.csv"))
    ens_p = simulate_forward(spec, grid, 500, 101, system="perturbed")
    fam_hat = build_projection_right(field, ens_p)
    pairs = np.asarray([(t, s) for s in (0.0, 0.5) for t in lattice(s, 1.0, 0.25)])
    stable = ms_norm_curve(ens_p, pairs, post=fam_hat, label="stable")
    gate = check_dichotomy_condition(M0, ALPHA0, EPS0, B_P, G_N, H_P)
    report = verify_dichotomy(stable, None, gate.predicted, buffer=3.0)
    write_curve_csv(stable, os.path.join(outdir, "curve.csv"))
    write_verify_csv(report, os.path.join(outdir, "verify.csv"))


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    # reduced-size reruns of the criterion 2 and criterion 6/7 outputs
    a, b = str(tmp_path / "mc_a.csv"), str(tmp_path / "mc_b.csv")
    _mc_ensemble_csv(a)
    _mc_ensemble_csv(b)
    assert filecmp.cmp(a, b, shallow=False)

    d1, d2 = tmp_path / "run1", tmp_path / "run2"
    _picard_outputs(str(d1))
    _picard_outputs(str(d2))
    for name in ("field.csv", "convergence.csv", "curve.csv", "verify.csv"):
        assert filecmp.cmp(d1 / name, d2 / name, shallow=False), name

    # thread count must not change a byte
    script = (
        "import sys\n"
        "sys.path.insert(0, sys.argv[2])\n"
        "from msdlab.engine import SimGrid, simulate_forward, write_ensemble_csv\n"
        "from msdlab.oracle import ExampleParams, example_u_mc_spec\n"
        "grid = SimGrid(s=0.0, t_max=1.0, dt=0.002, nodes=(0.0, 0.5, 1.0))\n"
        "ens = simulate_forward(example_u_mc_spec(ExampleParams(4.0, 1.0)), grid, 500, seed=9)\n"
        "write_ensemble_csv(ens, sys.argv[1])\n"
    )
    src_root = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src")
    outs = []
    for threads in ("1", "4"):
        env = dict(os.environ)
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            env[var] = threads
        out = str(tmp_path / f"threads_{threads}.csv")
        subprocess.run(
            [sys.executable, "-c", script, out, src_root],
            check=True, env=env, timeout=120,
        )
        outs.append(out)
    assert filecmp.cmp(outs[0], outs[1], shallow=False)

    elapsed = time.perf_counter() - t0
    print(f"PASS: criterion 10 — byte-identical reruns, thread-count invariant ({elapsed:.1f}s)")
