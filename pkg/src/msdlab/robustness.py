"""Closed-form robustness conditions and predicted envelope constants.

Given a nominal system with mean-square envelope (M, alpha, eps) and
perturbation sizes (b for the drift, h for the noise, with g bounding
the nominal noise), the combined perturbation weight is

    m_tilde = 8 b^2 + 8 g^2 h^2 + alpha h^2.

Each robustness statement is a smallness condition on that weight (or
on b alone in the drift-only case) together with explicit perturbed
constants. Everything here is pure arithmetic; the reports carry every
intermediate quantity so a pipeline can print a complete audit trail.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

from .dichotomy import KIND_CONTRACTION, KIND_DICHOTOMY, DichotomyParams
from .engine import _fmt
from .errors import ArgumentError

THEOREM_CONTRACTION = "contraction"
THEOREM_DRIFT_ONLY = "drift-only"
THEOREM_DICHOTOMY = "dichotomy"


def m_tilde(b: float, g: float, h: float, alpha: float) -> float:
    """Perturbation weight 8 b^2 + 8 g^2 h^2 + alpha h^2."""
    if b < 0 or g < 0 or h < 0:
        raise ArgumentError("perturbation bounds must be nonnegative")
    if not alpha > 0:
        raise ArgumentError("alpha must be positive")
    return 8.0 * b * b + 8.0 * g * g * h * h + alpha * h * h


@dataclass(frozen=True)
class RobustnessReport:
    """Outcome of one robustness check.

    ``compared`` is the quantity tested against ``threshold``: the
    perturbation weight for the contraction and dichotomy theorems, and
    the raw drift bound b for the drift-only variant. ``predicted`` is
    None when the predicted decay rate is not positive (which the
    smallness condition rules out; ``consistent`` records that check).
    The raw predicted constants are always present for audit.
    ``decay_rate_positive`` makes the sign convention explicit: the
    predicted exponent is a decay rate, positive under the condition.
    """

    theorem: str
    m_tilde: float
    compared: float
    threshold: float
    condition_ok: bool
    predicted_m: float
    predicted_alpha: float
    predicted_eps: float
    predicted: DichotomyParams | None
    decay_rate_positive: bool
    consistent: bool
    alpha_tilde: float | None = None
    theta: float | None = None
    proj_distance_bound: float | None = None
    sol_distance_bound: float | None = None

    @property
    def margin(self) -> float:
        return self.threshold - self.compared

    def to_text(self) -> str:
        lines = [
            f"theorem: {self.theorem}",
            f"m_tilde: {self.m_tilde:.6g}",
            f"condition: {self.compared:.6g} < {self.threshold:.6g}"
            f" -> {'ok' if self.condition_ok else 'FAILS'}",
            f"predicted M: {self.predicted_m:.6g}",
            f"predicted decay rate: {self.predicted_alpha:.6g}"
            f" ({'positive' if self.decay_rate_positive else 'NOT positive'})",
            f"predicted eps: {self.predicted_eps:.6g}",
        ]
        if self.alpha_tilde is not None:
            lines.append(f"alpha_tilde: {self.alpha_tilde:.6g}")
        if self.theta is not None:
            lines.append(f"theta: {self.theta:.6g}")
        if self.proj_distance_bound is not None:
            lines.append(f"projection distance coefficient: {self.proj_distance_bound:.6g}")
        if self.sol_distance_bound is not None:
            lines.append(f"solution distance coefficient: {self.sol_distance_bound:.6g}")
        if not self.consistent:
            lines.append("WARNING: condition holds but predicted rate is not positive")
        return "\n".join(lines)


def _package(theorem, mt, compared, threshold, condition_ok, pm, pa, pe, kind, **extra):
    decay_positive = pa > 0
    predicted = None
    if decay_positive:
        predicted = DichotomyParams(m=pm, alpha=pa, eps=pe, kind=kind)
    consistent = decay_positive or not condition_ok
    return RobustnessReport(
        theorem=theorem,
        m_tilde=mt,
        compared=compared,
        threshold=threshold,
        condition_ok=condition_ok,
        predicted_m=pm,
        predicted_alpha=pa,
        predicted_eps=pe,
        predicted=predicted,
        decay_rate_positive=decay_positive,
        consistent=consistent,
        **extra,
    )


def check_contraction_condition(
    m: float, alpha: float, eps: float, b: float, g: float, h: float
) -> RobustnessReport:
    """Robustness of a mean-square contraction under joint perturbation.

    Condition: m_tilde < alpha^2 / (6 M). Predicted constants:
    (3 M, alpha/2 - 3 M m_tilde / alpha, eps), still a contraction.
    """
    _check_envelope_args(m, alpha, eps)
    mt = m_tilde(b, g, h, alpha)
    threshold = alpha * alpha / (6.0 * m)
    return _package(
        THEOREM_CONTRACTION,
        mt,
        mt,
        threshold,
        mt < threshold,
        3.0 * m,
        alpha / 2.0 - 3.0 * m * mt / alpha,
        eps,
        KIND_CONTRACTION,
    )


def check_drift_only(m: float, alpha: float, eps: float, b: float) -> RobustnessReport:
    """Contraction robustness under drift-only perturbation.

    Condition: b < alpha / (2 sqrt(2 M)). Predicted constants:
    (2 M, alpha/2 - 4 M b^2 / alpha, eps). The report's m_tilde field
    carries 8 b^2 (the h = 0 weight) but the condition compares b.
    """
    _check_envelope_args(m, alpha, eps)
    if b < 0:
        raise ArgumentError("b must be nonnegative")
    threshold = alpha / (2.0 * math.sqrt(2.0 * m))
    return _package(
        THEOREM_DRIFT_ONLY,
        8.0 * b * b,
        b,
        threshold,
        b < threshold,
        2.0 * m,
        alpha / 2.0 - 4.0 * m * b * b / alpha,
        eps,
        KIND_CONTRACTION,
    )


def check_dichotomy_condition(
    m: float, alpha: float, eps: float, b: float, g: float, h: float
) -> RobustnessReport:
    """Robustness of a mean-square dichotomy under joint perturbation.

    Condition: eps < alpha and m_tilde < alpha^2 / (20 M). Predicted
    constants: (40 M, alpha/2 - 10 M m_tilde / alpha, 2 eps). Also
    reports the auxiliary exponent alpha_tilde (equal to the predicted
    rate), the contraction factor theta = sqrt(10 M m_tilde / alpha^2)
    of the fixed-point construction, and the coefficients of the
    projection and solution distance bounds.
    """
    _check_envelope_args(m, alpha, eps)
    mt = m_tilde(b, g, h, alpha)
    threshold = alpha * alpha / (20.0 * m)
    condition_ok = (mt < threshold) and (eps < alpha)
    alpha_hat = alpha / 2.0 - 10.0 * m * mt / alpha
    theta = math.sqrt(10.0 * m * mt) / alpha
    denom = alpha * (alpha + alpha_hat - eps)
    proj_coeff = 320.0 * m**3 * mt / denom if denom > 0 else math.inf
    sol_coeff = 720.0 * m * mt / (alpha - alpha_hat) if alpha > alpha_hat else math.inf
    if mt == 0.0:
        proj_coeff = 0.0
        sol_coeff = 0.0
    return _package(
        THEOREM_DICHOTOMY,
        mt,
        mt,
        threshold,
        condition_ok,
        40.0 * m,
        alpha_hat,
        2.0 * eps,
        KIND_DICHOTOMY,
        alpha_tilde=alpha_hat,
        theta=theta,
        proj_distance_bound=proj_coeff,
        sol_distance_bound=sol_coeff,
    )


def projection_distance_bound(
    m: float, alpha: float, eps: float, b: float, g: float, h: float, t: float
) -> float:
    """Bound on E n(P(t) - P_hat(t))^2: coefficient times e^{eps |t|}.

    Returns +inf when the dichotomy condition fails or the denominator
    alpha (alpha + alpha_tilde - eps) is not positive.
    """
    rep = check_dichotomy_condition(m, alpha, eps, b, g, h)
    if not rep.condition_ok or not math.isfinite(rep.proj_distance_bound):
        return math.inf
    return rep.proj_distance_bound * math.exp(eps * abs(t))


def solution_distance_bound(
    m: float,
    alpha: float,
    eps: float,
    b: float,
    g: float,
    h: float,
    t: float,
    s: float,
    direction: str = "stable",
) -> float:
    """Bound on the solution distance at (t, s) in the given direction.

    720 M m_tilde / (alpha - alpha_hat) times e^{-alpha_hat gap + 2 eps |s|}
    with gap = t - s (stable) or s - t (unstable). A negative gap for
    the stated direction is an argument error.
    """
    gap = t - s if direction.lower() == "stable" else s - t
    if gap < 0:
        raise ArgumentError(f"gap is negative for the {direction} direction")
    rep = check_dichotomy_condition(m, alpha, eps, b, g, h)
    if not rep.condition_ok or not math.isfinite(rep.sol_distance_bound):
        return math.inf
    return rep.sol_distance_bound * math.exp(-rep.alpha_tilde * gap + 2.0 * eps * abs(s))


def s_invertibility_bound(
    m: float, alpha: float, eps: float, b: float, g: float, h: float
) -> float:
    """Bound 20 M^2 m_tilde / (alpha (alpha + alpha_tilde - eps)) on
    E n(S - Id)^2 for the glued whole-line projection."""
    rep = check_dichotomy_condition(m, alpha, eps, b, g, h)
    if rep.m_tilde == 0.0:
        return 0.0
    denom = alpha * (alpha + rep.alpha_tilde - eps)
    if not rep.condition_ok or denom <= 0:
        return math.inf
    return 20.0 * m * m * rep.m_tilde / denom


def perturbed_projection_norm_bound(m: float, eps: float, t: float) -> float:
    """A priori bound 8 M e^{eps |t|} on E n(P_hat(t))^2."""
    if not m > 0 or eps < 0:
        raise ArgumentError("need M > 0 and eps >= 0")
    return 8.0 * m * math.exp(eps * abs(t))


def _check_envelope_args(m: float, alpha: float, eps: float) -> None:
    if not m > 0:
        raise ArgumentError("M must be positive")
    if not alpha > 0:
        raise ArgumentError("alpha must be positive")
    if eps < 0:
        raise ArgumentError("eps must be nonnegative")


def write_report_csv(report: RobustnessReport, path: str) -> None:
    fields = [
        ("theorem", report.theorem),
        ("m_tilde", _fmt(report.m_tilde)),
        ("compared", _fmt(report.compared)),
        ("threshold", _fmt(report.threshold)),
        ("condition_ok", int(report.condition_ok)),
        ("predicted_m", _fmt(report.predicted_m)),
        ("predicted_alpha", _fmt(report.predicted_alpha)),
        ("predicted_eps", _fmt(report.predicted_eps)),
        ("decay_rate_positive", int(report.decay_rate_positive)),
        ("consistent", int(report.consistent)),
        ("alpha_tilde", "" if report.alpha_tilde is None else _fmt(report.alpha_tilde)),
        ("theta", "" if report.theta is None else _fmt(report.theta)),
        (
            "proj_distance_bound",
            "" if report.proj_distance_bound is None else _fmt(report.proj_distance_bound),
        ),
        (
            "sol_distance_bound",
            "" if report.sol_distance_bound is None else _fmt(report.sol_distance_bound),
        ),
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([k for k, _ in fields])
        w.writerow([v for _, v in fields])
