"""Projection families, dichotomy envelopes, verification, and fitting.

A mean-square dichotomy of a linear system is a projection-valued
family P(t) commuting with the transition matrices together with a
two-sided envelope

    E n(X(t) X(s)^{-1} P(s))^2 <= M exp(-alpha (t-s) + eps |s|),  t >= s,
    E n(X(t) X(s)^{-1} Q(s))^2 <= M exp(-alpha (s-t) + eps |s|),  t <= s,

with Q = Id - P and n the operator norm. eps = 0 is the uniform case;
P = Id everywhere is a contraction. This module represents projection
families by their base projection at an anchor time (conjugation by
per-path transitions produces the rest), verifies claimed envelopes
against Monte Carlo curves with a standard-error buffer, and fits
envelope parameters to curve data by a Chebyshev linear program on the
log scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .engine import COND_LIMIT, MsNormCurve, TransitionEnsemble, rebase, _fmt
from .errors import (
    ArgumentError,
    ConstructionError,
    FitError,
    UnderdeterminedError,
)
from .linalg import cond_two, spectral_norm
from .simplex import LPInfeasible, LPUnbounded, solve_lp

KIND_DICHOTOMY = "dichotomy"
KIND_CONTRACTION = "contraction"

STABLE = "stable"
UNSTABLE = "unstable"


@dataclass(frozen=True)
class DichotomyParams:
    """Envelope parameters (M, alpha, eps) plus the structure kind."""

    m: float
    alpha: float
    eps: float
    kind: str = KIND_DICHOTOMY

    def __post_init__(self):
        if not self.m > 0:
            raise ArgumentError(f"M must be positive, got {self.m}")
        if not self.alpha > 0:
            raise ArgumentError(f"alpha must be positive, got {self.alpha}")
        if self.eps < 0:
            raise ArgumentError(f"eps must be nonnegative, got {self.eps}")
        if self.kind not in (KIND_DICHOTOMY, KIND_CONTRACTION):
            raise ArgumentError(f"unknown kind {self.kind!r}")

    def envelope(self, gap, s) -> np.ndarray:
        """Envelope value M exp(-alpha gap + eps |s|) for gap >= 0."""
        gap = np.asarray(gap, dtype=float)
        s = np.asarray(s, dtype=float)
        return self.m * np.exp(-self.alpha * gap + self.eps * np.abs(s))


@dataclass
class ProjectionFamily:
    """A projection family determined by its value at the anchor time.

    ``base_projection`` is either a shared (d, d) matrix or per-path
    (n_paths, d, d) values (constructed perturbed projections are
    random). The family's value anywhere else is the conjugation
    T P(t0) T^{-1} by the per-path transition T from t0. ``idem_tol``
    bounds n(P^2 - P) per path; analytic bases meet 1e-9, Monte Carlo
    constructions pass a looser tolerance explicitly along with their
    mean-square audit.
    """

    base_projection: np.ndarray
    t0: float
    rank: int
    idem_tol: float = 1e-9
    excluded: np.ndarray | None = None

    def __post_init__(self):
        base = np.asarray(self.base_projection, dtype=float)
        if base.ndim not in (2, 3) or base.shape[-1] != base.shape[-2]:
            raise ArgumentError("base_projection must be (d,d) or (n_paths,d,d)")
        self.base_projection = base
        d = base.shape[-1]
        if not 0 <= self.rank <= d:
            raise ArgumentError(f"rank must lie in [0, {d}]")
        check = base if self.excluded is None or base.ndim == 2 else base[~self.excluded]
        if check.size:
            err = float(np.max(spectral_norm(check @ check - check)))
            if err > self.idem_tol:
                raise ConstructionError(
                    f"base projection fails idempotence: error {err:.3e} > {self.idem_tol:.1e}"
                )

    @property
    def dim(self) -> int:
        return self.base_projection.shape[-1]

    @property
    def per_path(self) -> bool:
        return self.base_projection.ndim == 3

    def complement(self) -> "ProjectionFamily":
        """The family of Q = Id - P."""
        eye = np.eye(self.dim)
        return ProjectionFamily(
            base_projection=eye - self.base_projection,
            t0=self.t0,
            rank=self.dim - self.rank,
            idem_tol=self.idem_tol,
            excluded=self.excluded,
        )


@dataclass
class ProjectionSample:
    """Per-path projection values at one time."""

    t: float
    values: np.ndarray
    excluded: np.ndarray

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())


def _conjugators(fam: ProjectionFamily, ens: TransitionEnsemble, ts) -> tuple[np.ndarray, list[int]]:
    c = rebase(ens, fam.t0)
    return c, [ens.grid.node_index(t) for t in np.atleast_1d(ts)]


def projection_at(fam: ProjectionFamily, ens: TransitionEnsemble, t: float) -> ProjectionSample:
    """Evaluate the family at a grid node by per-path conjugation.

    Paths whose transition from the anchor is singular or worse than
    the conditioning limit are excluded (NaN values).
    """
    c, (j,) = _conjugators(fam, ens, [t])
    c_t = c[:, j]
    finite = np.isfinite(c_t).all(axis=(1, 2))
    cond = np.full(ens.n_paths, np.inf)
    cond[finite] = cond_two(c_t[finite])
    excluded = ~finite | (cond > COND_LIMIT)
    if fam.excluded is not None:
        excluded = excluded | fam.excluded
    values = np.full_like(c_t, np.nan)
    ok = ~excluded
    if ok.any():
        base = fam.base_projection
        b = base if base.ndim == 2 else base[ok]
        values[ok] = c_t[ok] @ b @ np.linalg.inv(c_t[ok])
    return ProjectionSample(t=t, values=values, excluded=excluded)


@dataclass
class GreenSample:
    """Per-path Green function values at one pair of node times."""

    t: float
    s: float
    branch: str
    values: np.ndarray
    excluded: np.ndarray


def green_function(fam: ProjectionFamily, ens: TransitionEnsemble, t: float, s: float) -> GreenSample:
    """Green function of the nominal system at node times (t, s).

    P(t) X(t) X(s)^{-1} on the stable branch t >= s (taken at t = s),
    -Q(t) X(t) X(s)^{-1} on the unstable branch t < s. The projection
    factor is fused through the anchor, so the product is
    C_t B C_s^{-1} (stable) or -C_t (Id - B) C_s^{-1} (unstable) with
    C the transition from the anchor.
    """
    c, (j_t, j_s) = _conjugators(fam, ens, [t, s])
    stable = t >= s
    c_t, c_s = c[:, j_t], c[:, j_s]
    finite = np.isfinite(c_t).all(axis=(1, 2)) & np.isfinite(c_s).all(axis=(1, 2))
    cond = np.full(ens.n_paths, np.inf)
    cond[finite] = cond_two(c_s[finite])
    excluded = ~finite | (cond > COND_LIMIT)
    if fam.excluded is not None:
        excluded = excluded | fam.excluded
    values = np.full_like(c_t, np.nan)
    ok = ~excluded
    if ok.any():
        base = fam.base_projection
        b = base if base.ndim == 2 else base[ok]
        mid = b if stable else b - np.eye(fam.dim)
        values[ok] = c_t[ok] @ mid @ np.linalg.inv(c_s[ok])
    return GreenSample(
        t=t, s=s, branch=STABLE if stable else UNSTABLE, values=values, excluded=excluded
    )


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class Violation:
    side: str
    t: float
    s: float
    estimate: float
    stderr: float
    envelope: float
    slack: float


@dataclass
class VerifyReport:
    """Slack of every curve pair against a claimed envelope.

    slack = envelope - (estimate - buffer * stderr); a negative slack
    is a violation beyond Monte Carlo error.
    """

    params: DichotomyParams
    buffer: float
    n_pairs: int
    min_slack: float
    violations: tuple[Violation, ...]
    rows: tuple[Violation, ...] = field(default=(), repr=False)

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0

    def to_text(self) -> str:
        lines = [
            f"pairs checked: {self.n_pairs}",
            f"minimum slack: {self.min_slack:.6g}",
            f"violations: {len(self.violations)}",
        ]
        for v in self.violations:
            lines.append(
                f"  {v.side} t={v.t:.6g} s={v.s:.6g}: estimate {v.estimate:.6g}"
                f" (stderr {v.stderr:.6g}) exceeds envelope {v.envelope:.6g}"
                f" by slack {v.slack:.6g}"
            )
        return "\n".join(lines)


def _side_rows(curve: MsNormCurve, params: DichotomyParams, side: str, buffer: float):
    rows = []
    for i in range(len(curve)):
        t, s = float(curve.t[i]), float(curve.s[i])
        gap = t - s if side == STABLE else s - t
        if gap < -1e-12:
            raise ArgumentError(f"{side} curve has wrong pair ordering at (t={t}, s={s})")
        est, serr = float(curve.estimate[i]), float(curve.stderr[i])
        if not np.isfinite(est):
            continue
        envelope = float(params.envelope(max(gap, 0.0), s))
        slack = envelope - (est - buffer * (serr if np.isfinite(serr) else 0.0))
        rows.append(Violation(side, t, s, est, serr, envelope, slack))
    return rows


def verify_dichotomy(
    curve_stable: MsNormCurve | None,
    curve_unstable: MsNormCurve | None,
    params: DichotomyParams,
    buffer: float = 3.0,
) -> VerifyReport:
    """Check claimed envelope parameters against norm curves.

    The stable curve must hold t >= s pairs, the unstable one t <= s.
    Either curve may be None (contractions have no unstable side).
    Report-only: violations are returned, never raised.
    """
    rows: list[Violation] = []
    if curve_stable is not None:
        rows.extend(_side_rows(curve_stable, params, STABLE, buffer))
    if curve_unstable is not None:
        rows.extend(_side_rows(curve_unstable, params, UNSTABLE, buffer))
    min_slack = min((r.slack for r in rows), default=np.inf)
    violations = tuple(r for r in rows if r.slack < 0)
    return VerifyReport(
        params=params,
        buffer=buffer,
        n_pairs=len(rows),
        min_slack=float(min_slack),
        violations=violations,
        rows=tuple(rows),
    )


def write_verify_csv(report: VerifyReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["side", "t", "s", "estimate", "stderr", "envelope", "slack", "violation"])
        for r in report.rows:
            w.writerow(
                [
                    r.side,
                    _fmt(r.t),
                    _fmt(r.s),
                    _fmt(r.estimate),
                    _fmt(r.stderr),
                    _fmt(r.envelope),
                    _fmt(r.slack),
                    int(r.slack < 0),
                ]
            )


# ---------------------------------------------------------------------------
# envelope fitting


def _prune_dominated(r: np.ndarray, g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Indices of constraints not implied by another constraint.

    Constraint j implies constraint i when r_j >= r_i, g_j >= g_i and
    w_j <= w_i: whatever envelope dominates j then dominates i for any
    alpha, eps >= 0. Exact duplicates keep their first occurrence.
    """
    n = r.size
    keep = np.ones(n, dtype=bool)
    order = np.argsort(-r, kind="stable")
    rs, gs, ws = r[order], g[order], w[order]
    for pos in range(n):
        i = order[pos]
        # only earlier entries in the order (r_j >= r_i) can dominate i
        js = slice(0, pos)
        dom = (gs[js] >= gs[pos]) & (ws[js] <= ws[pos])
        if np.any(dom):
            keep[i] = False
            continue
        if pos > 0:
            dup = (rs[js] == rs[pos]) & (gs[js] == gs[pos]) & (ws[js] == ws[pos])
            if np.any(dup):
                keep[i] = False
    return np.nonzero(keep)[0]


def _curve_rows(curve: MsNormCurve, direction: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log estimates with gaps and |s| weights for one curve side."""
    t = np.asarray(curve.t, dtype=float)
    s = np.asarray(curve.s, dtype=float)
    est = np.asarray(curve.estimate, dtype=float)
    if np.any(np.isposinf(est)):
        raise FitError("curve contains +inf estimates; no finite envelope exists")
    gap = t - s if direction == STABLE else s - t
    if np.any(gap < -1e-12):
        raise ArgumentError(f"{direction} curve has pairs with the wrong ordering")
    usable = np.isfinite(est) & (est > 0.0)
    return np.log(est[usable]), np.maximum(gap[usable], 0.0), np.abs(s[usable])


def _solve_envelope_lp(r: np.ndarray, g: np.ndarray, w: np.ndarray) -> tuple[float, float, float]:
    """Three-stage envelope LP over rows log est <= c - alpha g + eps w."""
    if r.size < 3:
        raise UnderdeterminedError("need at least 3 usable pairs")
    if np.unique(w).size < 2:
        raise UnderdeterminedError("pairs span fewer than two distinct |s| values")
    if np.unique(g).size < 2:
        raise UnderdeterminedError("pairs span fewer than two distinct gaps")

    idx = _prune_dominated(r, g, w)
    r, g, w = r[idx], g[idx], w[idx]

    # variables x = (c_plus, c_minus, alpha, eps), c = c_plus - c_minus
    n_con = r.size
    a_ub = np.column_stack([-np.ones(n_con), np.ones(n_con), g, -w])
    b_ub = -r
    c_row = np.array([1.0, -1.0, 0.0, 0.0])

    try:
        x1, _ = solve_lp([1.0, -1.0, 0.0, 0.0], a_ub, b_ub)
    except LPUnbounded:
        raise UnderdeterminedError(
            "log M unbounded below: no |s| = 0 pair anchors the envelope"
        )
    except LPInfeasible as exc:  # cannot happen with finite data
        raise FitError(f"envelope LP infeasible: {exc}")
    c_star = x1[0] - x1[1]

    eq1 = c_row.reshape(1, -1)
    try:
        x2, _ = solve_lp([0.0, 0.0, -1.0, 0.0], a_ub, b_ub, a_eq=eq1, b_eq=[c_star])
    except LPUnbounded:
        raise UnderdeterminedError(
            "alpha unbounded: no decaying pair at |s| = 0 pins the rate"
        )
    except LPInfeasible as exc:
        raise FitError(f"envelope LP infeasible at stage 2: {exc}")
    alpha_star = x2[2]

    eq2 = np.vstack([c_row, [0.0, 0.0, 1.0, 0.0]])
    try:
        x3, _ = solve_lp([0.0, 0.0, 0.0, 1.0], a_ub, b_ub, a_eq=eq2, b_eq=[c_star, alpha_star])
    except (LPUnbounded, LPInfeasible) as exc:  # eps >= 0 is bounded
        raise FitError(f"envelope LP failed at stage 3: {exc}")
    eps_star = x3[3]

    if alpha_star <= 0.0:
        raise FitError(
            f"fitted alpha {alpha_star:.3e} is not positive; data shows no decay"
        )
    return float(c_star), float(alpha_star), float(eps_star)


def fit_envelope(curve: MsNormCurve, direction: str = STABLE) -> DichotomyParams:
    """Fit (M, alpha, eps) to one side of a dichotomy by LP.

    Minimizes log M subject to every curve point lying on or below the
    envelope, then (holding log M) maximizes alpha, then minimizes eps.
    Estimates of zero impose no constraint and are dropped; +inf is a
    fit error. Requires at least 3 usable pairs spanning two distinct
    |s| values and two distinct gaps; data that cannot pin the optimum
    down (no |s| = 0 pair, or no decaying pair at |s| = 0) raises
    :class:`UnderdeterminedError`.
    """
    direction = direction.lower()
    if direction not in (STABLE, UNSTABLE):
        raise ArgumentError(f"direction must be stable or unstable, got {direction!r}")
    r, g, w = _curve_rows(curve, direction)
    c_star, alpha_star, eps_star = _solve_envelope_lp(r, g, w)
    return DichotomyParams(
        m=float(np.exp(c_star)),
        alpha=alpha_star,
        eps=max(eps_star, 0.0),
        kind=KIND_DICHOTOMY,
    )


def fit_envelope_joint(curve_stable: MsNormCurve, curve_unstable: MsNormCurve) -> DichotomyParams:
    """Fit one (M, alpha, eps) envelope over both dichotomy directions.

    Pools the stable pairs (gap t - s) and the unstable pairs
    (gap s - t) into a single LP so the same triple dominates both
    curves. A window starting at the nonuniformity origin cannot pin
    alpha from backward pairs alone (every such pair has |s| >= gap,
    so eps can absorb alpha and the per-direction fit is rightly
    underdetermined); pooling restores identifiability through the
    forward pairs at |s| = 0. This is why the two per-direction fits
    are not simply intersected.
    """
    rs = _curve_rows(curve_stable, STABLE)
    ru = _curve_rows(curve_unstable, UNSTABLE)
    r = np.concatenate([rs[0], ru[0]])
    g = np.concatenate([rs[1], ru[1]])
    w = np.concatenate([rs[2], ru[2]])
    c_star, alpha_star, eps_star = _solve_envelope_lp(r, g, w)
    return DichotomyParams(
        m=float(np.exp(c_star)),
        alpha=alpha_star,
        eps=max(eps_star, 0.0),
        kind=KIND_DICHOTOMY,
    )


def write_params_csv(params: DichotomyParams, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "alpha", "eps", "kind"])
        w.writerow([_fmt(params.m), _fmt(params.alpha), _fmt(params.eps), params.kind])
