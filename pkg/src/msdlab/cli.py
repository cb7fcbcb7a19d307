"""Experiment runner: config loading, pipelines, and report emission.

One binary with subcommands; a TOML config describes the system, the
grid, and the run parameters, and command-line flags override the
config where both are given. All outputs are CSV (comma, dot decimal,
LF, UTF-8) plus a plain-text summary with numbers at six significant
digits; everything is a pure function of the config bytes and the
seed, so re-runs are byte-identical.

Exit codes: 0 all checks passed, 1 verification violations,
2 a smallness/feasibility gate failed, 3 a convergence or truncation
failure, 4 configuration or I/O trouble.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

import numpy as np

from . import oracle
from .coefficients import CoefficientSpec, spec_from_mapping, verify_bounds
from .dichotomy import (
    KIND_CONTRACTION,
    KIND_DICHOTOMY,
    STABLE,
    UNSTABLE,
    DichotomyParams,
    ProjectionFamily,
    fit_envelope,
    fit_envelope_joint,
    verify_dichotomy,
    write_params_csv,
    write_verify_csv,
)
from .engine import (
    MsNormCurve,
    SimGrid,
    TransitionEnsemble,
    ms_norm_curve,
    simulate_forward,
    write_ensemble_csv,
    _fmt,
)
from .errors import (
    ArgumentError,
    ConditionError,
    ConfigError,
    ConstructionError,
    ConvergenceError,
    DomainError,
    FitError,
    GluingError,
    GridError,
    MsdlabError,
    TruncationError,
    UnderdeterminedError,
)
from .fixedpoint import (
    KernelField,
    build_projection_left,
    build_projection_right,
    glue_projections,
    picard_solve_green,
    picard_solve_U,
    write_field_csv,
)
from .robustness import (
    check_contraction_condition,
    check_dichotomy_condition,
    s_invertibility_bound,
    write_report_csv,
)

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_CONDITION = 2
EXIT_CONVERGENCE = 3
EXIT_CONFIG = 4

PIPELINES = ("simulate", "fit", "verify", "robustness", "picard", "example", "full")


@dataclass
class ExperimentConfig:
    """Everything one run needs, resolved from config file plus flags."""

    spec: CoefficientSpec
    grid: SimGrid
    n_paths: int
    seed: int
    pipeline: str
    output_dir: str
    claimed: DichotomyParams | None = None
    rank: int | None = None
    stderr_buffer: float = 3.0
    tol: float = 1e-4
    max_iter: int = 50
    t_trunc: float | None = None
    example_a: float = 4.0
    example_b: float = 1.0

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.pipeline not in PIPELINES:
            raise ConfigError(f"unknown pipeline {self.pipeline!r}")
        if self.rank is not None and not 0 <= self.rank <= self.spec.dim:
            raise ConfigError(f"rank must lie in [0, {self.spec.dim}]")


def _grid_from_mapping(data: dict) -> SimGrid:
    for key in ("s", "t_max", "dt"):
        if key not in data:
            raise ConfigError(f"[grid] missing {key!r}")
    try:
        s = float(data["s"])
        t_max = float(data["t_max"])
        dt = float(data["dt"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [grid] number: {exc}") from exc
    if "node_spacing" in data:
        return SimGrid.regular(s, t_max, dt, float(data["node_spacing"]))
    if "nodes" in data:
        nodes = tuple(float(x) for x in data["nodes"])
        return SimGrid(s=s, t_max=t_max, dt=dt, nodes=nodes)
    raise ConfigError("[grid] needs node_spacing or nodes")


def load_config(path: str) -> dict:
    """Parse a TOML config file; parse errors keep their line info."""
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc


def config_from_mapping(data: dict) -> ExperimentConfig:
    if "system" not in data:
        raise ConfigError("config missing [system] table")
    spec = spec_from_mapping(data["system"])
    if "grid" not in data:
        raise ConfigError("config missing [grid] table")
    grid = _grid_from_mapping(data["grid"])
    run = data.get("run", {})
    if "pipeline" not in run:
        raise ConfigError("[run] missing pipeline")
    claimed = None
    if "claimed" in data:
        c = data["claimed"]
        try:
            claimed = DichotomyParams(
                m=float(c["m"]),
                alpha=float(c["alpha"]),
                eps=float(c.get("eps", 0.0)),
                kind=str(c.get("kind", KIND_DICHOTOMY)),
            )
        except KeyError as exc:
            raise ConfigError(f"[claimed] missing {exc}") from exc
        except (TypeError, ValueError, ArgumentError) as exc:
            raise ConfigError(f"bad [claimed]: {exc}") from exc
    ex = data.get("example", {})
    try:
        cfg = ExperimentConfig(
            spec=spec,
            grid=grid,
            n_paths=int(run.get("n_paths", 1000)),
            seed=int(run.get("seed", 0)),
            pipeline=str(run["pipeline"]),
            output_dir=str(run.get("output_dir", ".")),
            claimed=claimed,
            rank=int(run["rank"]) if "rank" in run else None,
            stderr_buffer=float(run.get("stderr_buffer", 3.0)),
            tol=float(run.get("tol", 1e-4)),
            max_iter=int(run.get("max_iter", 50)),
            t_trunc=float(run["t_trunc"]) if "t_trunc" in run else None,
            example_a=float(ex.get("a", 4.0)),
            example_b=float(ex.get("b", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [run] value: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# shared pieces


def _out(cfg: ExperimentConfig, name: str) -> str:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output dir {out}: {exc}") from exc
    return str(out / name)


def _summary(cfg: ExperimentConfig, lines: list[str]) -> None:
    path = _out(cfg, "summary.txt")
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def _g(x) -> str:
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return "none"
    return f"{float(x):.6g}"


def _family(cfg: ExperimentConfig) -> ProjectionFamily:
    """Diagonal nominal family: ones on the first ``rank`` entries.

    Anchored at the grid start for half-line intervals and at the
    interval's reference time for whole-line ones.
    """
    d = cfg.spec.dim
    rank = cfg.rank if cfg.rank is not None else d // 2
    base = np.diag([1.0] * rank + [0.0] * (d - rank))
    anchor = cfg.grid.s if cfg.spec.interval.kind == "right" else cfg.spec.interval.t0
    return ProjectionFamily(base_projection=base, t0=anchor, rank=rank)


def _sub_nodes(grid: SimGrid) -> list[float]:
    nodes = list(grid.nodes)
    stride = max(1, len(nodes) // 12)
    sub = nodes[::stride]
    if sub[-1] != nodes[-1]:
        sub.append(nodes[-1])
    return sub


def _pair_lattice(grid: SimGrid, direction: str) -> list[tuple[float, float]]:
    sub = _sub_nodes(grid)
    if direction == STABLE:
        return [(t, s) for s in sub for t in sub if t >= s]
    return [(t, s) for s in sub for t in sub if t <= s]


def _concat_ms(parts: list[MsNormCurve]) -> MsNormCurve:
    return MsNormCurve(
        t=np.concatenate([c.t for c in parts]),
        s=np.concatenate([c.s for c in parts]),
        estimate=np.concatenate([c.estimate for c in parts]),
        stderr=np.concatenate([c.stderr for c in parts]),
        n_effective=np.concatenate([c.n_effective for c in parts]),
        label=parts[0].label,
    )


def _write_curves(path: str, curves) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "t", "s", "estimate", "stderr", "n_effective"])
        for curve in curves:
            for i in range(len(curve)):
                w.writerow([
                    curve.label,
                    _fmt(curve.t[i]),
                    _fmt(curve.s[i]),
                    _fmt(curve.estimate[i]),
                    _fmt(curve.stderr[i]),
                    int(curve.n_effective[i]),
                ])


def _write_convergence(path: str, fields: list[KernelField]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["which", "iterate", "diff_norm", "ratio"])
        for f in fields:
            for rec in f.log:
                w.writerow([f.which, rec.iterate, _fmt(rec.diff_norm), _fmt(rec.ratio)])


def _write_keyvals(path: str, rows: list[tuple[str, str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in rows:
            w.writerow([k, v])


# ---------------------------------------------------------------------------
# pipelines


def _pipe_simulate(cfg: ExperimentConfig) -> int:
    ens = simulate_forward(cfg.spec, cfg.grid, cfg.n_paths, cfg.seed)
    write_ensemble_csv(ens, _out(cfg, "ensemble.csv"))
    report = verify_bounds(cfg.spec, np.asarray(cfg.grid.nodes))
    _summary(cfg, [
        f"pipeline = simulate",
        f"paths = {cfg.n_paths}",
        f"seed = {cfg.seed}",
        f"nodes = {len(cfg.grid.nodes)}",
        f"blown_up = {int(ens.blown_up.sum())}",
        f"declared_bounds_ok = {_g(report.ok)}",
    ])
    return EXIT_OK


def _fit_params(cfg: ExperimentConfig, ens: TransitionEnsemble, fam: ProjectionFamily):
    curves = []
    stable = ms_norm_curve(ens, _pair_lattice(cfg.grid, STABLE), post=fam, label="fit_stable")
    curves.append(stable)
    if fam.rank < fam.dim:
        # one envelope over both directions; fitting the backward curve
        # alone is underdetermined on half-line windows
        unstable = ms_norm_curve(
            ens, _pair_lattice(cfg.grid, UNSTABLE), post=fam.complement(), label="fit_unstable"
        )
        curves.append(unstable)
        p = fit_envelope_joint(stable, unstable)
        return p, curves
    p1 = fit_envelope(stable, direction=STABLE)
    return DichotomyParams(m=p1.m, alpha=p1.alpha, eps=p1.eps, kind=KIND_CONTRACTION), curves


def _pipe_fit(cfg: ExperimentConfig) -> int:
    ens = simulate_forward(cfg.spec, cfg.grid, cfg.n_paths, cfg.seed)
    fam = _family(cfg)
    params, curves = _fit_params(cfg, ens, fam)
    _write_curves(_out(cfg, "curves.csv"), curves)
    write_params_csv(params, _out(cfg, "fit.csv"))
    _summary(cfg, [
        "pipeline = fit",
        f"paths = {cfg.n_paths}",
        f"seed = {cfg.seed}",
        f"m = {_g(params.m)}",
        f"alpha = {_g(params.alpha)}",
        f"eps = {_g(params.eps)}",
    ])
    return EXIT_OK


def _curves_for_verify(cfg: ExperimentConfig, ens, fam: ProjectionFamily, params: DichotomyParams, prefix: str):
    if params.kind == KIND_CONTRACTION:
        stable = ms_norm_curve(ens, _pair_lattice(cfg.grid, STABLE), post=None, label=f"{prefix}_stable")
        return stable, None
    stable = ms_norm_curve(ens, _pair_lattice(cfg.grid, STABLE), post=fam, label=f"{prefix}_stable")
    unstable = ms_norm_curve(
        ens, _pair_lattice(cfg.grid, UNSTABLE), post=fam.complement(), label=f"{prefix}_unstable"
    )
    return stable, unstable


def _pipe_verify(cfg: ExperimentConfig) -> int:
    if cfg.claimed is None:
        raise ConfigError("verify pipeline needs a [claimed] table")
    ens = simulate_forward(cfg.spec, cfg.grid, cfg.n_paths, cfg.seed)
    fam = _family(cfg)
    stable, unstable = _curves_for_verify(cfg, ens, fam, cfg.claimed, "verify")
    report = verify_dichotomy(stable, unstable, cfg.claimed, buffer=cfg.stderr_buffer)
    _write_curves(_out(cfg, "curves.csv"), [c for c in (stable, unstable) if c is not None])
    write_verify_csv(report, _out(cfg, "verify.csv"))
    _summary(cfg, [
        "pipeline = verify",
        f"paths = {cfg.n_paths}",
        f"seed = {cfg.seed}",
        f"claimed_m = {_g(cfg.claimed.m)}",
        f"claimed_alpha = {_g(cfg.claimed.alpha)}",
        f"claimed_eps = {_g(cfg.claimed.eps)}",
        f"pairs = {report.n_pairs}",
        f"violations = {len(report.violations)}",
        f"min_slack = {_g(report.min_slack)}",
    ])
    return EXIT_OK if report.ok else EXIT_VIOLATIONS


def _gate(cfg: ExperimentConfig, params: DichotomyParams):
    b = cfg.spec.b_bound if cfg.spec.b is not None else 0.0
    g = cfg.spec.g_bound if cfg.spec.g is not None else 0.0
    h = cfg.spec.h_bound if cfg.spec.h is not None else 0.0
    if params.kind == KIND_CONTRACTION:
        return check_contraction_condition(params.m, params.alpha, params.eps, b, g, h)
    return check_dichotomy_condition(params.m, params.alpha, params.eps, b, g, h)


def _pipe_robustness(cfg: ExperimentConfig) -> int:
    if cfg.claimed is None:
        raise ConfigError("robustness pipeline needs a [claimed] table")
    report = _gate(cfg, cfg.claimed)
    write_report_csv(report, _out(cfg, "robustness.csv"))
    lines = [
        "pipeline = robustness",
        f"theorem = {report.theorem}",
        f"m_tilde = {_g(report.m_tilde)}",
        f"threshold = {_g(report.threshold)}",
        f"condition_ok = {_g(report.condition_ok)}",
        f"predicted_m = {_g(report.predicted_m)}",
        f"predicted_alpha = {_g(report.predicted_alpha)}",
        f"predicted_eps = {_g(report.predicted_eps)}",
    ]
    if report.theta is not None:
        lines.append(f"theta = {_g(report.theta)}")
    _summary(cfg, lines)
    return EXIT_OK if report.condition_ok else EXIT_CONDITION


def _pipe_picard(cfg: ExperimentConfig) -> int:
    if cfg.claimed is None:
        raise ConfigError("picard pipeline needs a [claimed] table for (m, alpha, eps)")
    fam = _family(cfg)
    whole = cfg.spec.interval.kind == "whole"
    if whole:
        u_field, v_field = picard_solve_green(
            cfg.spec, cfg.claimed, fam, cfg.grid, cfg.n_paths, cfg.seed,
            max_iter=cfg.max_iter, tol=cfg.tol, t_trunc=cfg.t_trunc,
        )
        fields = [u_field, v_field]
    else:
        u_field = picard_solve_U(
            cfg.spec, cfg.claimed, fam, cfg.grid, cfg.n_paths, cfg.seed,
            max_iter=cfg.max_iter, tol=cfg.tol, t_trunc=cfg.t_trunc,
        )
        fields = [u_field]
    _write_convergence(_out(cfg, "convergence.csv"), fields)
    write_field_csv(u_field, _out(cfg, "field.csv"))
    lines = ["pipeline = picard"]
    for f in fields:
        lines += [
            f"{f.which}_converged = {_g(f.converged)}",
            f"{f.which}_iterates = {f.iterate_index}",
            f"{f.which}_weighted_norm = {_g(f.weighted_norm)}",
            f"{f.which}_tail_bound = {_g(f.tail_bound)}",
        ]
    _summary(cfg, lines)
    return EXIT_OK if all(f.converged for f in fields) else EXIT_CONVERGENCE


def _pipe_example(cfg: ExperimentConfig) -> int:
    p = oracle.ExampleParams(cfg.example_a, cfg.example_b)
    env = oracle.true_envelope(p)
    n = 101
    ts = np.linspace(0.0, 20.0 * math.pi, n)
    with open(_out(cfg, "example_curve.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "log_ms_u", "log_ms_v"])
        lu = oracle.log_ms_u(p, ts)
        lv = oracle.log_ms_v(p, ts)
        for i in range(n):
            w.writerow([_fmt(ts[i]), _fmt(lu[i]), _fmt(lv[i])])
    cert = oracle.nonuniformity_certificate(p, 8)
    with open(_out(cfg, "certificate.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "s", "log_ratio", "ratio"])
        for row in cert:
            w.writerow([_fmt(row.t), _fmt(row.s), _fmt(row.log_ratio), _fmt(row.ratio)])
    _summary(cfg, [
        "pipeline = example",
        f"a = {_g(p.a)}",
        f"b = {_g(p.b)}",
        f"alpha = {_g(env.alpha)}",
        f"eps = {_g(env.eps)}",
        f"claimed_eps = {_g(env.claimed_eps)}",
        f"claim_witness_log_gap = {_g(env.claim_witness_log_gap)}",
    ])
    return EXIT_OK


def _pipe_full(cfg: ExperimentConfig) -> int:
    fam = _family(cfg)
    whole = cfg.spec.interval.kind == "whole"
    lines = ["pipeline = full"]
    curves = []

    ens_u = simulate_forward(cfg.spec, cfg.grid, cfg.n_paths, cfg.seed)
    write_ensemble_csv(ens_u, _out(cfg, "ensemble.csv"))

    fitted, fit_curves = _fit_params(cfg, ens_u, fam)
    curves += fit_curves
    write_params_csv(fitted, _out(cfg, "fit.csv"))
    lines += [
        f"fitted_m = {_g(fitted.m)}",
        f"fitted_alpha = {_g(fitted.alpha)}",
        f"fitted_eps = {_g(fitted.eps)}",
    ]

    gate = _gate(cfg, fitted)
    write_report_csv(gate, _out(cfg, "robustness.csv"))
    lines += [
        f"m_tilde = {_g(gate.m_tilde)}",
        f"condition_ok = {_g(gate.condition_ok)}",
    ]
    if not gate.condition_ok or gate.predicted is None:
        _write_curves(_out(cfg, "curves.csv"), curves)
        _write_convergence(_out(cfg, "convergence.csv"), [])
        _write_keyvals(_out(cfg, "projections.csv"), [])
        lines.append("stopped = condition gate")
        _summary(cfg, lines)
        return EXIT_CONDITION

    try:
        if whole:
            u_field, v_field = picard_solve_green(
                cfg.spec, fitted, fam, cfg.grid, cfg.n_paths, cfg.seed,
                max_iter=cfg.max_iter, tol=cfg.tol, t_trunc=cfg.t_trunc,
            )
            fields = [u_field, v_field]
        else:
            u_field = picard_solve_U(
                cfg.spec, fitted, fam, cfg.grid, cfg.n_paths, cfg.seed,
                max_iter=cfg.max_iter, tol=cfg.tol, t_trunc=cfg.t_trunc,
            )
            v_field = None
            fields = [u_field]
    except (TruncationError, ConvergenceError) as exc:
        _write_curves(_out(cfg, "curves.csv"), curves)
        _write_convergence(_out(cfg, "convergence.csv"), [])
        _write_keyvals(_out(cfg, "projections.csv"), [])
        lines.append(f"stopped = {exc}")
        _summary(cfg, lines)
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    _write_convergence(_out(cfg, "convergence.csv"), fields)
    for f in fields:
        lines += [
            f"{f.which}_converged = {_g(f.converged)}",
            f"{f.which}_iterates = {f.iterate_index}",
        ]
    if not all(f.converged for f in fields):
        _write_curves(_out(cfg, "curves.csv"), curves)
        _write_keyvals(_out(cfg, "projections.csv"), [])
        lines.append("stopped = picard did not converge")
        _summary(cfg, lines)
        return EXIT_CONVERGENCE

    # perturbed ensemble coupled to the fields: same seed and step
    # stream, started where the field's internal simulation started
    if abs(u_field.sim_start - cfg.grid.s) <= 1e-9:
        pgrid = cfg.grid
    else:
        spacing = _node_spacing_of(cfg.grid)
        k = round((cfg.grid.s - u_field.sim_start) / spacing)
        pre = tuple(cfg.grid.s - spacing * i for i in range(k, 0, -1))
        pgrid = SimGrid(
            s=u_field.sim_start, t_max=cfg.grid.t_max, dt=cfg.grid.dt, nodes=pre + cfg.grid.nodes
        )
    ens_p = simulate_forward(cfg.spec, pgrid, cfg.n_paths, cfg.seed, system="perturbed")

    right = build_projection_right(u_field, ens_p)
    proj_rows = [("p_hat_idem_tol", _fmt(right.idem_tol))]
    if whole and v_field is not None:
        left = build_projection_left(v_field, ens_p)
        bound = s_invertibility_bound(
            fitted.m, fitted.alpha, fitted.eps,
            cfg.spec.b_bound if cfg.spec.b is not None else 0.0,
            cfg.spec.g_bound if cfg.spec.g is not None else 0.0,
            cfg.spec.h_bound if cfg.spec.h is not None else 0.0,
        )
        glued = glue_projections(right, left, fam, ens_p, s_bound=bound)
        q_fam = left
        proj_rows += [
            ("ms_distance_to_id", _fmt(glued.ms_distance_to_id)),
            ("ms_distance_stderr", _fmt(glued.ms_distance_stderr)),
            ("s_bound", _fmt(bound)),
            ("within_bound", str(int(bool(glued.within_bound)))),
            ("n_used", str(glued.n_used)),
            ("s1t1_max_defect", _fmt(glued.s1t1_max_defect)),
            ("s2t2_max_defect", _fmt(glued.s2t2_max_defect)),
            ("p_tilde_idem_max", _fmt(glued.p_tilde_idem_max)),
            ("remark_consistency_ms", _fmt(glued.remark_consistency_ms)),
        ]
        lines += [
            f"ms_distance_to_id = {_g(glued.ms_distance_to_id)}",
            f"s_bound = {_g(bound)}",
            f"within_bound = {_g(bool(glued.within_bound))}",
        ]
    _write_keyvals(_out(cfg, "projections.csv"), proj_rows)

    # every verified pair is anchored at a base time of the field:
    # family values are Picard-accurate there, while conjugating one
    # anchor across the window amplifies its error exponentially
    predicted = gate.predicted
    sub = _sub_nodes(cfg.grid)
    s_parts: list[MsNormCurve] = []
    u_parts: list[MsNormCurve] = []
    for a in u_field.base_times:
        if a < cfg.grid.s - 1e-9 or a > cfg.grid.t_max + 1e-9:
            continue
        fam_a = build_projection_right(u_field, ens_p, base=a)
        spairs = [(t, a) for t in sub if t >= a - 1e-9]
        if spairs:
            s_parts.append(ms_norm_curve(ens_p, spairs, post=fam_a, label="verify_stable"))
        if not whole and fam.rank < fam.dim:
            upairs = [(t, a) for t in sub if fam.t0 - 1e-9 <= t <= a + 1e-9]
            if upairs:
                u_parts.append(
                    ms_norm_curve(ens_p, upairs, post=fam_a.complement(), label="verify_unstable")
                )
    if whole and v_field is not None:
        for a in v_field.base_times:
            if a < cfg.grid.s - 1e-9 or a > cfg.grid.t_max + 1e-9:
                continue
            fam_a = build_projection_left(v_field, ens_p, base=a)
            upairs = [(t, a) for t in sub if t <= a + 1e-9]
            if upairs:
                u_parts.append(ms_norm_curve(ens_p, upairs, post=fam_a, label="verify_unstable"))
    stable = _concat_ms(s_parts)
    unstable = _concat_ms(u_parts) if u_parts else None
    curves += [c for c in (stable, unstable) if c is not None]
    report = verify_dichotomy(stable, unstable, predicted, buffer=cfg.stderr_buffer)
    _write_curves(_out(cfg, "curves.csv"), curves)
    lines += [
        f"predicted_m = {_g(predicted.m)}",
        f"predicted_alpha = {_g(predicted.alpha)}",
        f"predicted_eps = {_g(predicted.eps)}",
        f"verify_pairs = {report.n_pairs}",
        f"violations = {len(report.violations)}",
        f"min_slack = {_g(report.min_slack)}",
    ]
    _summary(cfg, lines)
    return EXIT_OK if report.ok else EXIT_VIOLATIONS


def _node_spacing_of(grid: SimGrid) -> float:
    gaps = np.diff(np.asarray(grid.nodes))
    return float(gaps.min())


_PIPES = {
    "simulate": _pipe_simulate,
    "fit": _pipe_fit,
    "verify": _pipe_verify,
    "robustness": _pipe_robustness,
    "picard": _pipe_picard,
    "example": _pipe_example,
    "full": _pipe_full,
}


def run(cfg: ExperimentConfig) -> int:
    """Execute one pipeline; returns the process exit code."""
    return _PIPES[cfg.pipeline](cfg)


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msdlab",
        description="mean-square dichotomy laboratory: simulate, fit, verify, perturb",
    )
    sub = parser.add_subparsers(dest="pipeline", required=True)
    for name in PIPELINES:
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "example"), help="TOML config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--dt", type=float, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--tol", type=float, default=None)
    return parser


_EXAMPLE_FALLBACK = {
    "system": {"dim": 2, "interval": "right:0.0", "A": "[[-4 - t*sin(t), 0], [0, 4 + t*sin(t)]]", "a_bound": 100.0},
    "grid": {"s": 0.0, "t_max": 1.0, "dt": 0.001, "node_spacing": 0.5},
    "run": {"pipeline": "example"},
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        data = load_config(args.config) if args.config else dict(_EXAMPLE_FALLBACK)
        data.setdefault("run", {})["pipeline"] = args.pipeline
        cfg = config_from_mapping(data)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.paths is not None:
            cfg = replace(cfg, n_paths=args.paths)
        if args.tol is not None:
            cfg = replace(cfg, tol=args.tol)
        if args.out is not None:
            cfg = replace(cfg, output_dir=args.out)
        if args.dt is not None:
            cfg = replace(cfg, grid=SimGrid(s=cfg.grid.s, t_max=cfg.grid.t_max, dt=args.dt, nodes=cfg.grid.nodes))
        return run(cfg)
    except ConditionError as exc:
        print(f"condition gate failed: {exc}", file=sys.stderr)
        return EXIT_CONDITION
    except (ConvergenceError, TruncationError, FitError) as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ConfigError, UnderdeterminedError, ArgumentError, GridError, DomainError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConstructionError, GluingError) as exc:
        print(f"construction failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except MsdlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
