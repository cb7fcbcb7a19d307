"""Picard iteration on the stochastic integral equations.

The perturbed system inherits a dichotomy from the nominal one through
fixed points of integral operators. This module iterates those
operators on discrete kernel fields: per-path matrices U(t, s) indexed
by a grid of node times t and a finite set of base times s. The
decaying field solves

    U(t,s) = X(t,s) P(s) + int_s^t X(t,tau) P(tau) [K] U(tau,s)
                         - int_t^inf X(t,tau) Q(tau) [K] U(tau,s),

with [K] = H dw + Btilde dt, Btilde = B - G H, and X the nominal
transition; the growing field V solves the mirrored equation on the
left half line, and the whole-line (Green kernel) variants differ only
in where the base times sit. Improper integrals are truncated at an
explicit horizon with an analytic tail bound; the solver refuses to
report convergence when the bound exceeds half the tolerance.

Quadrature uses left-endpoint (non-anticipating) evaluation on the
Brownian increments aggregated between nodes by the simulation itself,
so the fixed-point equation and direct simulation of the perturbed
system are driven by the same noise, path by path. Projections of the
nominal family enter through the anchored form X(t,tau) P(tau) =
C(t) P0 C(tau)^{-1} with C the transition from the anchor; this is
exact for families that commute with the nominal flow, which is the
only kind the solvers accept.

Accuracy of the anchored transitions degrades with the condition
number of X(t0, grid start) when the anchor is interior; diagonal
systems are exact. Paths whose transition blows up or becomes
singular at any carried node are excluded from norms and reported.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientSpec, evaluate_or_zero
from .dichotomy import DichotomyParams, ProjectionFamily
from .engine import COND_LIMIT, SimGrid, TransitionEnsemble, rebase, simulate_forward, _fmt
from .errors import (
    ArgumentError,
    ConditionError,
    ConstructionError,
    GluingError,
    GridError,
    TruncationError,
)
from .linalg import cond_two, spectral_norm, spectral_norm_sq
from .robustness import check_contraction_condition, check_dichotomy_condition

U_RIGHT = "U_right"
V_LEFT = "V_left"
U_GREEN = "U_green"
V_GREEN = "V_green"

_CHUNK = 4096


@dataclass(frozen=True)
class ConvergenceRecord:
    """One Picard step: successive-difference norm and decay ratio."""

    iterate: int
    diff_norm: float
    ratio: float


@dataclass
class KernelField:
    """Discrete kernel iterate U or V over (node time, base time).

    ``values[p, b, j]`` is the field at node time ``node_times[j]``
    from base time ``base_times[b]`` on path p; entries outside the
    field's half of the time square, or on excluded paths, are NaN and
    ``valid[b, j]`` marks the live region. ``weighted_norm`` is
    sup over the carried domain of (E n(.)^2)^{1/2} e^{-eps|s|/2},
    including any truncation buffer beyond the reported grid. A field
    that failed to contract within its iteration budget is returned
    with ``converged`` False rather than raised.
    """

    which: str
    grid: SimGrid
    base_times: tuple[float, ...]
    node_times: np.ndarray
    values: np.ndarray
    valid: np.ndarray
    excluded: np.ndarray
    converged: bool
    iterate_index: int
    weighted_norm: float
    eps: float
    tail_bound: float | None
    t_trunc: float | None
    log: tuple[ConvergenceRecord, ...]
    fam: ProjectionFamily | None
    kernel_is_zero: bool
    source_seed: int
    source_dt: float
    source_step_offset: int
    sim_start: float
    anchor: float

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def base_index(self, s: float) -> int:
        bases = np.asarray(self.base_times)
        b = int(np.argmin(np.abs(bases - s)))
        if abs(bases[b] - s) > 1e-9 * max(1.0, abs(s)):
            raise ArgumentError(f"s={s} is not a base time of the field")
        return b

    def value_at(self, t: float, s: float) -> np.ndarray:
        """Per-path field matrices at node time t from base time s."""
        b = self.base_index(s)
        j = self.grid.node_index(t)
        if not self.valid[b, j]:
            raise ArgumentError(f"(t={t}, s={s}) lies outside the field's domain")
        return self.values[:, b, j]

    def base_value(self, s: float) -> np.ndarray:
        """Per-path U(s, s) (or V(s, s)) at a base time."""
        return self.value_at(s, s)


# ---------------------------------------------------------------------------
# grid extension and shared solver


def _node_spacing(grid: SimGrid) -> float:
    nodes = np.asarray(grid.nodes)
    if len(nodes) < 2:
        raise GridError("kernel solves need at least two nodes")
    gaps = np.diff(nodes)
    if np.max(gaps) - np.min(gaps) > 1e-9:
        raise GridError("kernel solves need uniformly spaced nodes")
    return float(np.mean(gaps))


def _extend(grid: SimGrid, t_trunc: float, side: str) -> tuple[SimGrid, int, float]:
    """Extend the node lattice toward a truncation horizon.

    Returns the extended grid, the index offset of the reported nodes
    inside it, and the aligned horizon actually used (the requested one
    rounded up to the node lattice).
    """
    h = _node_spacing(grid)
    if side == "right":
        if t_trunc < grid.t_max - 1e-9:
            raise ArgumentError("t_trunc must not be less than grid.t_max")
        n_extra = max(0, math.ceil((t_trunc - grid.t_max) / h - 1e-9))
        t_end = grid.t_max + n_extra * h
        nodes = grid.nodes + tuple(grid.t_max + k * h for k in range(1, n_extra + 1))
        ext = SimGrid(s=grid.s, t_max=t_end if n_extra else grid.t_max, dt=grid.dt, nodes=nodes)
        return ext, 0, t_end
    if t_trunc > grid.s + 1e-9:
        raise ArgumentError("left truncation must not exceed grid.s")
    n_extra = max(0, math.ceil((grid.s - t_trunc) / h - 1e-9))
    t_start = grid.s - n_extra * h
    nodes = tuple(grid.s - k * h for k in range(n_extra, 0, -1)) + grid.nodes
    ext = SimGrid(s=t_start, t_max=grid.t_max, dt=grid.dt, nodes=nodes)
    return ext, n_extra, t_start


def _gate_bound(spec: CoefficientSpec, which: str) -> float:
    # declared envelope bounds are the spec author's promise; absent
    # matrices contribute nothing regardless of the declared number
    mats = {"G": spec.g, "B": spec.b, "H": spec.h}
    bounds = {"G": spec.g_bound, "B": spec.b_bound, "H": spec.h_bound}
    return float(bounds[which]) if mats[which] is not None else 0.0


def _base_matrices(fam: ProjectionFamily | None, dim: int):
    eye = np.eye(dim)
    if fam is None:
        return eye, np.zeros((dim, dim))
    p0 = np.asarray(fam.base_projection, dtype=float)
    if p0.ndim == 3:
        p0 = p0[:, None]  # broadcast over the node axis
    return p0, eye - p0


def _included_norm_sq(mats: np.ndarray, included: np.ndarray) -> np.ndarray:
    """Mean over included paths of squared spectral norms, per node."""
    sub = mats[included]
    if sub.shape[0] == 0:
        return np.full(mats.shape[1], np.nan)
    return spectral_norm_sq(sub).mean(axis=0)


class _BaseWindow:
    """Node-window state for one base time during the iteration."""

    def __init__(self, jb: int, lo: int, hi: int, weight: float):
        self.jb = jb  # global node index of the base
        self.lo = lo  # first global node index carried
        self.hi = hi  # last global node index carried
        self.weight = weight
        self.cur: np.ndarray | None = None


def _iterate_window(
    side: str,
    win: _BaseWindow,
    cur: np.ndarray,
    c_mats: np.ndarray,
    cinv: np.ndarray,
    kh: np.ndarray,
    kb: np.ndarray,
    node_dw: np.ndarray,
    h_node: float,
    p0,
    q0,
    include_suffix: bool,
) -> np.ndarray:
    """One Picard update of a window, chunked over paths."""
    lo, hi, jb = win.lo, win.hi, win.jb
    w = hi - lo + 1
    n_paths = cur.shape[0]
    out = np.empty_like(cur)
    khw = kh[lo:hi]
    kbw = kb[lo:hi]
    for a in range(0, n_paths, _CHUNK):
        b = min(a + _CHUNK, n_paths)
        u = cur[a:b]
        cw = c_mats[a:b, lo : hi + 1]
        cinvw = cinv[a:b, lo : hi + 1]
        dww = node_dw[a:b, lo:hi, None, None]
        with np.errstate(invalid="ignore", over="ignore"):
            ku = khw @ u[:, :-1] * dww + kbw @ u[:, :-1] * h_node
            z = cinvw[:, :-1] @ ku
            cm = np.concatenate(
                [np.zeros((b - a, 1) + z.shape[2:]), np.cumsum(z, axis=1)], axis=1
            )
            pa = p0[a:b] if p0.ndim == 4 else p0
            qa = q0[a:b] if q0.ndim == 4 else q0
            if side == "right":
                inner = pa @ (cinvw[:, :1] + cm)
                if include_suffix:
                    inner = inner - qa @ (cm[:, -1:] - cm)
            else:
                inner = qa @ (cinvw[:, -1:] - (cm[:, -1:] - cm)) + pa @ cm
            out[a:b] = cw @ inner
    assert out.shape[1] == w
    return out


def _solve_kernel(
    spec: CoefficientSpec,
    params: DichotomyParams,
    fam: ProjectionFamily | None,
    ext_grid: SimGrid,
    offset: int,
    report_grid: SimGrid,
    base_times: tuple[float, ...],
    side: str,
    which: str,
    n_paths: int,
    seed: int,
    max_iter: int,
    tol: float,
    include_suffix: bool,
    anchor: float,
    ens: TransitionEnsemble | None,
    step_offset: int,
) -> tuple[KernelField, TransitionEnsemble]:
    if tol <= 0:
        raise ArgumentError("tol must be positive")
    if max_iter < 1:
        raise ArgumentError("max_iter must be at least 1")
    if ens is None:
        ens = simulate_forward(spec, ext_grid, n_paths, seed, system="unperturbed", step_offset=step_offset)
    else:
        if ens.grid != ext_grid or ens.system != "unperturbed":
            raise ArgumentError("supplied ensemble does not match the extended grid")
        if ens.seed != seed or ens.step_offset != step_offset:
            raise ArgumentError("supplied ensemble does not match seed/step_offset")

    nodes = np.asarray(ext_grid.nodes)
    n_nodes = len(nodes)
    d = spec.dim
    h_node = _node_spacing(ext_grid)

    c_mats = rebase(ens, anchor)
    finite_c = np.isfinite(c_mats).all(axis=(1, 2, 3))
    with np.errstate(invalid="ignore", over="ignore"):
        det = np.linalg.det(np.where(finite_c[:, None, None, None], c_mats, np.eye(d)))
    invertible = finite_c & (np.abs(det) > 0.0).all(axis=1) & np.isfinite(det).all(axis=1)
    excluded = ens.blown_up | ~invertible
    included = ~excluded
    if not included.any():
        raise ArgumentError("every path is excluded; nothing to iterate on")

    cinv = np.full_like(c_mats, np.nan)
    cinv[included] = np.linalg.inv(c_mats[included])

    kh = evaluate_or_zero(spec, "H", nodes)
    kb = evaluate_or_zero(spec, "Btilde", nodes)

    p0, q0 = _base_matrices(fam, d)
    if fam is not None and fam.per_path and fam.base_projection.shape[0] != ens.n_paths:
        raise ArgumentError("per-path family does not match the path count")

    # window per base
    wins: list[_BaseWindow] = []
    for s_b in base_times:
        jb = int(np.argmin(np.abs(nodes - s_b)))
        if abs(nodes[jb] - s_b) > 1e-9 * max(1.0, abs(s_b)):
            raise ArgumentError(f"base time {s_b} is not on the node lattice")
        if side == "right":
            win = _BaseWindow(jb, jb, n_nodes - 1, math.exp(-params.eps * abs(s_b) / 2.0))
        else:
            win = _BaseWindow(jb, 0, jb, math.exp(-params.eps * abs(s_b) / 2.0))
        if win.hi <= win.lo:
            raise GridError(f"base time {s_b} leaves an empty integration window")
        wins.append(win)

    # iterate 0: the inhomogeneous term C(t) R0 C(s)^{-1}
    for win in wins:
        r0 = p0 if side == "right" else q0
        r0p = r0[:, 0] if r0.ndim == 4 else r0
        seedm = r0p @ cinv[:, win.jb]
        win.cur = c_mats[:, win.lo : win.hi + 1] @ seedm[:, None]

    def _window_norm(mats: np.ndarray, weight: float) -> float:
        ms = _included_norm_sq(mats, included)
        with np.errstate(invalid="ignore"):
            return float(np.sqrt(np.max(ms))) * weight

    log: list[ConvergenceRecord] = []
    converged = False
    iterate = 0
    prev_diff = math.nan
    for k in range(1, max_iter + 1):
        diff_worst = 0.0
        for win in wins:
            nxt = _iterate_window(
                side, win, win.cur, c_mats, cinv, kh, kb, ens.node_dw, h_node,
                p0, q0, include_suffix,
            )
            diff_worst = max(diff_worst, _window_norm(nxt - win.cur, win.weight))
            win.cur = nxt
        iterate = k
        ratio = diff_worst / prev_diff if prev_diff and math.isfinite(prev_diff) else math.nan
        log.append(ConvergenceRecord(iterate=k, diff_norm=diff_worst, ratio=ratio))
        prev_diff = diff_worst
        if diff_worst < tol:
            converged = True
            break

    weighted_norm = max(_window_norm(win.cur, win.weight) for win in wins)

    # assemble reported values
    n_rep = len(report_grid.nodes)
    n_bases = len(base_times)
    values = np.full((ens.n_paths, n_bases, n_rep, d, d), np.nan)
    valid = np.zeros((n_bases, n_rep), dtype=bool)
    rep_nodes = np.asarray(report_grid.nodes)
    for bi, win in enumerate(wins):
        for j in range(n_rep):
            g = j + offset
            if win.lo <= g <= win.hi:
                valid[bi, j] = True
                values[included, bi, j] = win.cur[included, g - win.lo]

    field = KernelField(
        which=which,
        grid=report_grid,
        base_times=tuple(float(b) for b in base_times),
        node_times=rep_nodes,
        values=values,
        valid=valid,
        excluded=excluded,
        converged=converged,
        iterate_index=iterate,
        weighted_norm=weighted_norm,
        eps=params.eps,
        tail_bound=None,
        t_trunc=None,
        log=tuple(log),
        fam=fam,
        kernel_is_zero=bool(np.all(kh == 0.0) and np.all(kb == 0.0)),
        source_seed=ens.seed,
        source_dt=ext_grid.dt,
        source_step_offset=ens.step_offset,
        sim_start=ext_grid.s,
        anchor=anchor,
    )
    return field, ens


def _tail_bound(params: DichotomyParams, norm: float, distance: float) -> float:
    a = params.alpha
    return params.m * math.exp(-(a / 2.0) * distance) * norm * (2.0 / a + 1.0 / math.sqrt(a))


def _check_tail(field: KernelField, params: DichotomyParams, tol: float, t_ref: float, horizon: float, side: str) -> None:
    field.t_trunc = horizon
    if field.kernel_is_zero:
        # nothing was truncated: the improper integral is identically zero
        field.tail_bound = 0.0
        return
    distance = abs(horizon - t_ref)
    bound = _tail_bound(params, field.weighted_norm, distance)
    field.tail_bound = bound
    if field.converged and bound > tol / 2.0:
        a = params.alpha
        base = params.m * field.weighted_norm * (2.0 / a + 1.0 / math.sqrt(a))
        need = (2.0 / a) * math.log(max(base, 1e-300) / (tol / 2.0))
        required = t_ref + need if side == "right" else t_ref - need
        raise TruncationError(
            f"truncation tail bound {bound:.3e} exceeds tol/2 = {tol / 2.0:.3e}; "
            f"extend the horizon to about {required:.6g}",
            required_horizon=required,
        )


# ---------------------------------------------------------------------------
# public solvers


def picard_solve_contraction(
    spec: CoefficientSpec,
    params: DichotomyParams,
    grid: SimGrid,
    n_paths: int,
    seed: int,
    proj: ProjectionFamily | None = None,
    max_iter: int = 40,
    tol: float = 1e-4,
    base_times: tuple[float, ...] | None = None,
    step_offset: int = 0,
    ens: TransitionEnsemble | None = None,
) -> KernelField:
    """Fixed point of the contraction-case equation (no splitting).

    Iterates R -> X(t,s) P0 + int_s^t X(t,tau) [K] R(tau,s) with the
    identity for P0 unless ``proj`` supplies another anchor family.
    The feasibility gate is the contraction-case smallness condition;
    failing it raises ConditionError. Non-convergence within
    ``max_iter`` is returned as a flagged field, not raised.
    """
    gate = check_contraction_condition(
        params.m, params.alpha, params.eps,
        _gate_bound(spec, "B"), _gate_bound(spec, "G"), _gate_bound(spec, "H"),
    )
    if not gate.condition_ok:
        raise ConditionError(
            f"contraction condition fails: m_tilde {gate.m_tilde:.6g} >= threshold {gate.threshold:.6g}"
        )
    anchor = proj.t0 if proj is not None else grid.s
    if base_times is None:
        base_times = (anchor,)
    field, _ = _solve_kernel(
        spec, params, proj, grid, 0, grid, tuple(base_times), "right", U_RIGHT,
        n_paths, seed, max_iter, tol, include_suffix=False, anchor=anchor,
        ens=ens, step_offset=step_offset,
    )
    return field


def _default_bases(t0: float, lo: float, hi: float, direction: int) -> tuple[float, ...]:
    out = []
    k = 0
    while True:
        s_b = t0 + direction * k
        if s_b < lo - 1e-9 or s_b > hi + 1e-9:
            break
        out.append(float(s_b))
        k += 1
    return tuple(out)


def picard_solve_U(
    spec: CoefficientSpec,
    params: DichotomyParams,
    fam: ProjectionFamily,
    grid: SimGrid,
    n_paths: int,
    seed: int,
    max_iter: int = 40,
    tol: float = 1e-4,
    t_trunc: float | None = None,
    base_times: tuple[float, ...] | None = None,
    step_offset: int = 0,
    ens: TransitionEnsemble | None = None,
) -> KernelField:
    """Decaying kernel field on the right half line from the anchor.

    ``grid`` is the reported domain, starting at the family anchor;
    the improper suffix integral is truncated at ``t_trunc`` (default
    ``grid.t_max``) and the solve carries the buffer internally. After
    convergence the analytic tail bound at the worst reported node is
    compared against tol/2; exceeding it raises TruncationError with
    the horizon that would suffice. The smallness gate must pass,
    otherwise ConditionError.
    """
    gate = check_dichotomy_condition(
        params.m, params.alpha, params.eps,
        _gate_bound(spec, "B"), _gate_bound(spec, "G"), _gate_bound(spec, "H"),
    )
    if not gate.condition_ok:
        raise ConditionError(
            f"dichotomy smallness condition fails: m_tilde {gate.m_tilde:.6g}, "
            f"threshold {gate.threshold:.6g}, eps {params.eps:.6g} vs alpha {params.alpha:.6g}"
        )
    if abs(grid.s - fam.t0) > 1e-9:
        raise ArgumentError("grid must start at the family anchor")
    if t_trunc is None:
        t_trunc = grid.t_max
    ext, offset, horizon = _extend(grid, t_trunc, "right")
    if base_times is None:
        # a default base at the extended end would leave an empty
        # integration window; explicit base_times still fail loudly
        base_times = tuple(
            b for b in _default_bases(fam.t0, grid.s, grid.t_max, +1)
            if b < horizon - 0.5 * grid.dt
        )
    field, _ = _solve_kernel(
        spec, params, fam, ext, offset, grid, tuple(base_times), "right", U_RIGHT,
        n_paths, seed, max_iter, tol, include_suffix=True, anchor=fam.t0,
        ens=ens, step_offset=step_offset,
    )
    _check_tail(field, params, tol, grid.t_max, horizon, "right")
    return field


def picard_solve_V(
    spec: CoefficientSpec,
    params: DichotomyParams,
    fam: ProjectionFamily,
    grid: SimGrid,
    n_paths: int,
    seed: int,
    max_iter: int = 40,
    tol: float = 1e-4,
    t_trunc: float | None = None,
    base_times: tuple[float, ...] | None = None,
    step_offset: int = 0,
    ens: TransitionEnsemble | None = None,
) -> KernelField:
    """Growing kernel field on the left half line, mirror of the U solve.

    ``fam`` is still the stable family; the equation's leading term
    uses its complement. ``t_trunc`` (default ``grid.s``) truncates
    the integral reaching back to -infinity, so it must not exceed
    ``grid.s``; the reported grid must end at the anchor.
    """
    gate = check_dichotomy_condition(
        params.m, params.alpha, params.eps,
        _gate_bound(spec, "B"), _gate_bound(spec, "G"), _gate_bound(spec, "H"),
    )
    if not gate.condition_ok:
        raise ConditionError(
            f"dichotomy smallness condition fails: m_tilde {gate.m_tilde:.6g}, "
            f"threshold {gate.threshold:.6g}, eps {params.eps:.6g} vs alpha {params.alpha:.6g}"
        )
    if abs(grid.t_max - fam.t0) > 1e-9:
        raise ArgumentError("grid must end at the family anchor")
    if t_trunc is None:
        t_trunc = grid.s
    ext, offset, horizon = _extend(grid, t_trunc, "left")
    if base_times is None:
        base_times = tuple(
            b for b in _default_bases(fam.t0, grid.s, grid.t_max, -1)
            if b > horizon + 0.5 * grid.dt
        )
    field, _ = _solve_kernel(
        spec, params, fam, ext, offset, grid, tuple(base_times), "left", V_LEFT,
        n_paths, seed, max_iter, tol, include_suffix=True, anchor=fam.t0,
        ens=ens, step_offset=step_offset,
    )
    _check_tail(field, params, tol, grid.s, horizon, "left")
    return field


def picard_solve_green(
    spec: CoefficientSpec,
    params: DichotomyParams,
    fam: ProjectionFamily,
    grid: SimGrid,
    n_paths: int,
    seed: int,
    max_iter: int = 40,
    tol: float = 1e-4,
    t_trunc: float | None = None,
    base_times: tuple[float, ...] | None = None,
    step_offset: int = 0,
) -> tuple[KernelField, KernelField]:
    """Whole-line decaying and growing fields with Green-kernel suffixes.

    The anchor must be an interior node of ``grid``. The right buffer
    extends the lattice to ``t_trunc`` (default ``grid.t_max``); the
    left buffer mirrors it below ``grid.s``. Both fields are solved on
    one simulated ensemble so they share every Brownian increment.
    Default base set is the anchor alone.
    """
    gate = check_dichotomy_condition(
        params.m, params.alpha, params.eps,
        _gate_bound(spec, "B"), _gate_bound(spec, "G"), _gate_bound(spec, "H"),
    )
    if not gate.condition_ok:
        raise ConditionError(
            f"dichotomy smallness condition fails: m_tilde {gate.m_tilde:.6g}, "
            f"threshold {gate.threshold:.6g}, eps {params.eps:.6g} vs alpha {params.alpha:.6g}"
        )
    if not (grid.s - 1e-9 < fam.t0 < grid.t_max + 1e-9):
        raise ArgumentError("family anchor must lie inside the grid")
    if t_trunc is None:
        t_trunc = grid.t_max
    ext_r, off_r, horizon_r = _extend(grid, t_trunc, "right")
    buffer = horizon_r - grid.t_max
    ext, offset, horizon_l = _extend(ext_r, ext_r.s - buffer, "left")
    offset = offset + off_r
    if base_times is None:
        base_times = (fam.t0,)
    bases = tuple(base_times)

    u_field, ens = _solve_kernel(
        spec, params, fam, ext, offset, grid, bases, "right", U_GREEN,
        n_paths, seed, max_iter, tol, include_suffix=True, anchor=fam.t0,
        ens=None, step_offset=step_offset,
    )
    _check_tail(u_field, params, tol, grid.t_max, horizon_r, "right")
    v_field, _ = _solve_kernel(
        spec, params, fam, ext, offset, grid, bases, "left", V_GREEN,
        n_paths, seed, max_iter, tol, include_suffix=True, anchor=fam.t0,
        ens=ens, step_offset=step_offset,
    )
    _check_tail(v_field, params, tol, grid.s, horizon_l, "left")
    return u_field, v_field


# ---------------------------------------------------------------------------
# diagnostics


def cocycle_defect(field: KernelField, t: float, u: float, s: float) -> tuple[float, int]:
    """Mean square of U(t,s) - U(t,u) U(u,s) over usable paths.

    Requires s and u to be base times and t, u node times of the
    field. The defect should sit below 10x the solve tolerance for a
    converged field.
    """
    big = field.value_at(t, s)
    left = field.value_at(t, u)
    right = field.value_at(u, s)
    ok = ~field.excluded & np.isfinite(big).all(axis=(1, 2))
    diff = big[ok] - left[ok] @ right[ok]
    if diff.shape[0] == 0:
        raise ArgumentError("no usable paths for the cocycle check")
    return float(spectral_norm_sq(diff).mean()), int(diff.shape[0])


# ---------------------------------------------------------------------------
# projection construction


def _validate_coupling(field: KernelField, ens: TransitionEnsemble) -> None:
    if ens.system != "perturbed":
        raise ArgumentError("projection construction expects the perturbed ensemble")
    if ens.seed != field.source_seed or ens.step_offset != field.source_step_offset:
        raise ArgumentError("perturbed ensemble is not noise-coupled to the field (seed/offset)")
    if abs(ens.grid.dt - field.source_dt) > 1e-15:
        raise ArgumentError("perturbed ensemble step size differs from the field's")
    if abs(ens.grid.s - field.sim_start) > 1e-9:
        raise ArgumentError("perturbed ensemble must start where the field's simulation started")


def _build_family(
    base: np.ndarray,
    t0: float,
    expected_rank: int,
    excluded: np.ndarray,
    what: str,
) -> ProjectionFamily:
    ok = ~excluded & np.isfinite(base).all(axis=(1, 2))
    if not ok.any():
        raise ConstructionError(f"no usable paths to build {what}")
    usable = base[ok]
    ms = float(spectral_norm_sq(usable @ usable - usable).mean())
    if ms > 1e-4:
        raise ConstructionError(
            f"{what} fails mean-square idempotence: {ms:.3e} > 1e-4 "
            "(iterate further or shrink the perturbation)"
        )
    ranks = np.rint(np.trace(usable, axis1=1, axis2=2)).astype(int)
    bad = int((ranks != expected_rank).sum())
    if bad:
        raise ConstructionError(
            f"{what} changes rank on {bad} of {usable.shape[0]} usable paths"
        )
    per_path_tol = max(1e-9, 1.05 * float(np.max(spectral_norm(usable @ usable - usable))))
    return ProjectionFamily(
        base_projection=base,
        t0=t0,
        rank=expected_rank,
        idem_tol=per_path_tol,
        excluded=~ok,
    )


def build_projection_right(
    u_field: KernelField,
    ens_perturbed: TransitionEnsemble,
    base: float | None = None,
) -> ProjectionFamily:
    """Perturbed stable family anchored at U(b, b) for a base time b.

    ``base`` defaults to the field anchor and must be one of the
    field's base times. Off-anchor values of the family are then
    conjugations by the perturbed transitions, which amplify the base
    value's estimation error exponentially with the distance from b;
    callers verifying far from one base should rebuild the family at a
    nearer base instead. The field must have converged and the
    perturbed ensemble must be noise-coupled to it (same seed, step
    offset, start, and dt). Mean-square idempotence beyond 1e-4, or a
    rank change on any usable path, raises ConstructionError.
    """
    if not u_field.converged:
        raise ConstructionError("kernel field did not converge; no projection to build")
    if u_field.which not in (U_RIGHT, U_GREEN):
        raise ArgumentError("build_projection_right expects a decaying (U) field")
    if u_field.fam is None:
        raise ArgumentError("field carries no nominal family to take the rank from")
    _validate_coupling(u_field, ens_perturbed)
    t0 = u_field.anchor if base is None else float(base)
    base_mat = u_field.base_value(t0)
    excluded = u_field.excluded | ens_perturbed.blown_up
    return _build_family(base_mat, t0, u_field.fam.rank, excluded, "perturbed stable projection")


def build_projection_left(
    v_field: KernelField,
    ens_perturbed: TransitionEnsemble,
    base: float | None = None,
) -> ProjectionFamily:
    """Perturbed unstable family anchored at V(b, b), mirror build."""
    if not v_field.converged:
        raise ConstructionError("kernel field did not converge; no projection to build")
    if v_field.which not in (V_LEFT, V_GREEN):
        raise ArgumentError("build_projection_left expects a growing (V) field")
    if v_field.fam is None:
        raise ArgumentError("field carries no nominal family to take the rank from")
    _validate_coupling(v_field, ens_perturbed)
    t0 = v_field.anchor if base is None else float(base)
    base_mat = v_field.base_value(t0)
    excluded = v_field.excluded | ens_perturbed.blown_up
    rank = v_field.dim - v_field.fam.rank
    return _build_family(base_mat, t0, rank, excluded, "perturbed unstable projection")


@dataclass
class GluedProjections:
    """Whole-line projection data glued from the half-line families.

    ``s_matrix`` is P_hat(t0) + Q_hat(t0) per path; its inverse
    conjugates the nominal projection into the glued base
    ``p_tilde_base``. ``singular`` marks paths where S could not be
    inverted (condition number above 1e12 or non-finite). The audit
    fields record the worst per-path defects of the two exact gluing
    identities (Id + D)(Id - D) = Id for D the half-line projection
    increments, the idempotence of the glued base, and the mean-square
    consistency E n(P_tilde P_hat - P_hat)^2 with the right family.
    """

    t0: float
    rank: int
    s_matrix: np.ndarray
    s_inverse: np.ndarray
    p_tilde_base: np.ndarray
    singular: np.ndarray
    ms_distance_to_id: float
    ms_distance_stderr: float
    n_used: int
    s1t1_max_defect: float
    s2t2_max_defect: float
    p_tilde_idem_max: float
    remark_consistency_ms: float
    s_bound: float | None
    within_bound: bool | None

    @property
    def p_tilde_family(self) -> ProjectionFamily:
        ok = ~self.singular
        tol = max(1e-9, 1.05 * self.p_tilde_idem_max)
        return ProjectionFamily(
            base_projection=self.p_tilde_base,
            t0=self.t0,
            rank=self.rank,
            idem_tol=tol,
            excluded=self.singular,
        )


def glue_projections(
    right: ProjectionFamily,
    left: ProjectionFamily,
    fam_unperturbed: ProjectionFamily,
    ens_perturbed: TransitionEnsemble,
    s_bound: float | None = None,
) -> GluedProjections:
    """Glue the half-line families into a whole-line projection.

    Forms S = P_hat(t0) + Q_hat(t0) per path, inverts it, and
    conjugates the nominal projection: P_tilde = S P S^{-1}. Raises
    GluingError when the anchors disagree, when S is singular on more
    than 1% of usable paths, or when the glued base fails per-path
    idempotence at 1e-8. ``s_bound``, when given, is the analytic
    invertibility bound on E n(S - Id)^2; the result records whether
    the estimate sits below it within three standard errors.
    """
    if abs(right.t0 - left.t0) > 1e-9:
        raise GluingError("half-line families are anchored at different times")
    t0 = right.t0
    if right.dim != left.dim:
        raise GluingError("half-line families have different dimensions")
    d = right.dim
    if right.rank + left.rank != d:
        raise GluingError(
            f"ranks do not complement: {right.rank} + {left.rank} != {d}"
        )
    if fam_unperturbed.rank != right.rank:
        raise GluingError("nominal family rank differs from the right family's")

    n = ens_perturbed.n_paths
    p_hat = np.broadcast_to(right.base_projection, (n, d, d))
    q_hat = np.broadcast_to(left.base_projection, (n, d, d))
    excluded = ens_perturbed.blown_up.copy()
    for famx in (right, left):
        if famx.excluded is not None:
            excluded |= famx.excluded
    s_mat = p_hat + q_hat

    finite = np.isfinite(s_mat).all(axis=(1, 2))
    cond = np.full(n, np.inf)
    cond[finite] = cond_two(s_mat[finite])
    singular = excluded | ~finite | (cond > COND_LIMIT)
    usable = ~singular
    n_used = int(usable.sum())
    if n_used == 0:
        raise GluingError("S is unusable on every path")
    frac_singular = 1.0 - n_used / int((~excluded).sum())
    if frac_singular > 0.01:
        raise GluingError(
            f"S singular on {100 * frac_singular:.2f}% of usable paths (limit 1%)"
        )

    s_inv = np.full_like(s_mat, np.nan)
    s_inv[usable] = np.linalg.inv(s_mat[usable])

    eye = np.eye(d)
    p0 = np.broadcast_to(fam_unperturbed.base_projection, (n, d, d))
    q0 = eye - p0
    p_tilde = np.full_like(s_mat, np.nan)
    p_tilde[usable] = s_mat[usable] @ p0[usable] @ s_inv[usable]

    pt = p_tilde[usable]
    idem_max = float(np.max(spectral_norm(pt @ pt - pt)))
    if idem_max > 1e-8:
        raise GluingError(
            f"glued base fails per-path idempotence: {idem_max:.3e} > 1e-8"
        )

    dist_sq = spectral_norm_sq(s_mat[usable] - eye)
    ms_dist = float(dist_sq.mean())
    stderr = float(dist_sq.std(ddof=1) / math.sqrt(n_used)) if n_used > 1 else 0.0

    d1 = p_hat[usable] - p0[usable]
    d2 = q_hat[usable] - q0[usable]
    s1t1 = (eye + d1) @ (eye - d1) - eye
    s2t2 = (eye + d2) @ (eye - d2) - eye
    s1t1_max = float(np.max(spectral_norm(s1t1)))
    s2t2_max = float(np.max(spectral_norm(s2t2)))

    remark = float(spectral_norm_sq(pt @ p_hat[usable] - p_hat[usable]).mean())
    within = None if s_bound is None else bool(ms_dist - 3.0 * stderr <= s_bound)

    return GluedProjections(
        t0=t0,
        rank=right.rank,
        s_matrix=s_mat,
        s_inverse=s_inv,
        p_tilde_base=p_tilde,
        singular=singular,
        ms_distance_to_id=ms_dist,
        ms_distance_stderr=stderr,
        n_used=n_used,
        s1t1_max_defect=s1t1_max,
        s2t2_max_defect=s2t2_max,
        p_tilde_idem_max=idem_max,
        remark_consistency_ms=remark,
        s_bound=s_bound,
        within_bound=within,
    )


# ---------------------------------------------------------------------------
# CSV export


def write_field_csv(field: KernelField, path: str) -> None:
    """Entries of the live region, one row per matrix element."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "base_time", "node_time", "row", "col", "value", "iterate", "weighted_norm"])
        d = field.dim
        wn = _fmt(field.weighted_norm)
        it = str(field.iterate_index)
        for b, s_b in enumerate(field.base_times):
            for j, t in enumerate(field.node_times):
                if not field.valid[b, j]:
                    continue
                for p in range(field.n_paths):
                    for r in range(d):
                        for c in range(d):
                            w.writerow([p, _fmt(s_b), _fmt(t), r, c, _fmt(field.values[p, b, j, r, c]), it, wn])


def write_convergence_csv(field: KernelField, path: str) -> None:
    """Successive-difference norms per iterate, for contraction plots."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iterate", "diff_norm", "ratio"])
        for rec in field.log:
            w.writerow([rec.iterate, _fmt(rec.diff_norm), _fmt(rec.ratio)])
