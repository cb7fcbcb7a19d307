"""Dense two-phase simplex for small linear programs.

Solves min c.x subject to A_ub x <= b_ub, A_eq x = b_eq, x >= 0.
Bland's rule keeps the pivoting finite; rows are rescaled so the
tolerances behave uniformly across constraint magnitudes. Problem
sizes here are tiny (a handful of variables, at most a few hundred
constraints after pruning), so a dense tableau is the simplest thing
that is obviously correct.
"""

from __future__ import annotations

import numpy as np


class LPError(Exception):
    """The solver failed structurally (iteration cap)."""


class LPInfeasible(Exception):
    """No point satisfies the constraints."""


class LPUnbounded(Exception):
    """The objective decreases without bound on the feasible set."""


_TOL = 1e-9
_MAX_ITER = 50000


def _pivot(tab: np.ndarray, basis: np.ndarray, row: int, col: int) -> None:
    tab[row] = tab[row] / tab[row, col]
    piv = tab[row]
    for r in range(tab.shape[0]):
        if r != row and tab[r, col] != 0.0:
            tab[r] = tab[r] - tab[r, col] * piv
    basis[row] = col


def _run_simplex(tab: np.ndarray, basis: np.ndarray, n_struct: int) -> str:
    """Pivot until the objective row has no negative reduced cost.

    The objective row is the last row; only columns below ``n_struct``
    are eligible to enter. Returns 'optimal' or 'unbounded'.
    """
    for _ in range(_MAX_ITER):
        obj = tab[-1, :n_struct]
        enter = -1
        for j in range(n_struct):
            if obj[j] < -_TOL:
                enter = j
                break
        if enter < 0:
            return "optimal"
        col = tab[:-1, enter]
        rows = np.nonzero(col > _TOL)[0]
        if rows.size == 0:
            return "unbounded"
        ratios = tab[rows, -1] / col[rows]
        best = ratios.min()
        ties = rows[ratios <= best + _TOL * max(1.0, abs(best))]
        leave = int(min(ties, key=lambda r: basis[r]))
        _pivot(tab, basis, leave, enter)
    raise LPError("simplex iteration limit reached")


def solve_lp(
    c,
    a_ub=None,
    b_ub=None,
    a_eq=None,
    b_eq=None,
) -> tuple[np.ndarray, float]:
    """Solve min c.x, A_ub x <= b_ub, A_eq x = b_eq, x >= 0.

    Returns (x, objective value). Raises :class:`LPInfeasible` or
    :class:`LPUnbounded` accordingly.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    a_ub = np.zeros((0, n)) if a_ub is None else np.asarray(a_ub, dtype=float)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
    a_eq = np.zeros((0, n)) if a_eq is None else np.asarray(a_eq, dtype=float)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    if a_ub.shape != (b_ub.size, n) or a_eq.shape != (b_eq.size, n):
        raise ValueError("constraint shapes do not match")

    m_ub, m_eq = b_ub.size, b_eq.size
    m = m_ub + m_eq
    rows = np.vstack([a_ub, a_eq]) if m else np.zeros((0, n))
    rhs = np.concatenate([b_ub, b_eq])

    # row scaling for uniform tolerances
    scale = np.maximum(1.0, np.max(np.abs(np.column_stack([rows, rhs])), axis=1)) if m else np.ones(0)
    rows = rows / scale[:, None]
    rhs = rhs / scale

    # slacks on inequality rows, then flip rows with negative rhs
    slack = np.vstack([np.eye(m_ub), np.zeros((m_eq, m_ub))]) if m else np.zeros((0, 0))
    body = np.column_stack([rows, slack]) if m else np.zeros((0, n))
    neg = rhs < 0
    body[neg] = -body[neg]
    rhs = np.where(neg, -rhs, rhs)

    # rows lacking a ready identity column get an artificial variable
    needs_art = np.ones(m, dtype=bool)
    basis = np.full(m, -1, dtype=np.int64)
    for i in range(m_ub):
        if not neg[i]:
            needs_art[i] = False
            basis[i] = n + i
    art_rows = np.nonzero(needs_art)[0]
    n_art = art_rows.size
    art = np.zeros((m, n_art))
    for k, i in enumerate(art_rows):
        art[i, k] = 1.0
        basis[i] = n + m_ub + k

    n_struct = n + m_ub
    n_total = n_struct + n_art
    tab = np.zeros((m + 1, n_total + 1))
    if m:
        tab[:m, :n_struct] = body
        tab[:m, n_struct:n_total] = art
        tab[:m, -1] = rhs

    if n_art:
        # phase 1: drive the artificials to zero
        tab[-1, n_struct:n_total] = 1.0
        for i in art_rows:
            tab[-1] = tab[-1] - tab[i]
        status = _run_simplex(tab, basis, n_total)
        if status != "optimal" or tab[-1, -1] < -_TOL:
            raise LPInfeasible("phase 1 did not reach zero infeasibility")
        # pivot lingering artificials out of the basis where possible
        for r in range(m):
            if basis[r] >= n_struct:
                cols = np.nonzero(np.abs(tab[r, :n_struct]) > _TOL)[0]
                if cols.size:
                    _pivot(tab, basis, r, int(cols[0]))
        keep = basis[:m] < n_struct
        if not np.all(keep):
            # residual artificial rows are redundant constraints
            sel = np.nonzero(keep)[0]
            tab = np.vstack([tab[sel], tab[-1:]])
            basis = basis[sel]
            m = sel.size
        tab = np.delete(tab, np.s_[n_struct:n_total], axis=1)

    # phase 2
    tab[-1, :] = 0.0
    tab[-1, :n] = c
    for r in range(m):
        if basis[r] < n and c[basis[r]] != 0.0:
            tab[-1] = tab[-1] - c[basis[r]] * tab[r]
    status = _run_simplex(tab, basis, n_struct)
    if status == "unbounded":
        raise LPUnbounded("objective unbounded below")

    x = np.zeros(n_struct)
    for r in range(m):
        x[basis[r]] = tab[r, -1]
    return x[:n], float(c @ x[:n])
