"""Euler-Maruyama simulation of matrix linear SDEs and norm curves.

The engine simulates the matrix solution of

    dX = A(t) X dt + G(t) X dw,   X(s) = Id,

path by path on a uniform step grid, capturing the solution at a set of
node times. The perturbed variant replaces A by A + B and G by G + H.
Everything downstream (transition products, mean-square norm curves,
projection conjugations) works off the captured node samples, so node
spacing can be much coarser than the simulation step.

Increments come from a counter-based generator indexed by
(seed, path, global step); ``step_offset`` shifts the global step index
so that separately simulated windows of one experiment draw disjoint
increments while remaining reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientSpec, evaluate_or_zero
from .errors import ArgumentError, GridError
from .linalg import cond_two, spectral_norm_sq
from .rng import gaussian_increments

COND_LIMIT = 1e12

_SYSTEMS = ("unperturbed", "perturbed")


@dataclass(frozen=True)
class SimGrid:
    """Uniform step grid with designated capture nodes.

    ``s`` is the base time (simulation start), ``t_max`` the end,
    ``dt`` the Euler step. ``nodes`` are the times at which the matrix
    solution is stored; each must sit on the step lattice within a
    relative tolerance of 1e-9 steps.
    """

    s: float
    t_max: float
    dt: float
    nodes: tuple[float, ...]

    def __post_init__(self):
        if not self.dt > 0:
            raise GridError("dt must be positive")
        if self.t_max <= self.s:
            raise GridError("t_max must exceed s")
        nodes = tuple(float(x) for x in self.nodes)
        if len(nodes) == 0:
            raise GridError("at least one node required")
        if any(b <= a for a, b in zip(nodes, nodes[1:])):
            raise GridError("nodes must be strictly increasing")
        if nodes[0] < self.s - 1e-9 * self.dt or nodes[-1] > self.t_max + 1e-9 * self.dt:
            raise GridError("nodes must lie within [s, t_max]")
        object.__setattr__(self, "nodes", nodes)
        self.n_steps  # validates span alignment
        self.node_steps  # validates node alignment

    @property
    def n_steps(self) -> int:
        n = (self.t_max - self.s) / self.dt
        k = round(n)
        if abs(n - k) > 1e-9:
            raise GridError("t_max - s must be an integer number of steps")
        return int(k)

    @property
    def node_steps(self) -> np.ndarray:
        """Step index of each node, validating lattice alignment."""
        offs = (np.asarray(self.nodes) - self.s) / self.dt
        ks = np.rint(offs)
        if np.any(np.abs(offs - ks) > 1e-9):
            j = int(np.argmax(np.abs(offs - ks)))
            raise GridError(f"node {self.nodes[j]} is off the step lattice")
        return ks.astype(np.int64)

    @classmethod
    def regular(cls, s: float, t_max: float, dt: float, node_spacing: float) -> "SimGrid":
        """Grid with nodes every ``node_spacing`` from ``s`` to ``t_max``."""
        n = round((t_max - s) / node_spacing)
        if abs((t_max - s) / node_spacing - n) > 1e-9:
            raise GridError("span must be an integer number of node spacings")
        nodes = tuple(s + k * node_spacing for k in range(int(n) + 1))
        return cls(s=s, t_max=t_max, dt=dt, nodes=nodes)

    def node_index(self, t: float) -> int:
        nodes = np.asarray(self.nodes)
        j = int(np.argmin(np.abs(nodes - t)))
        if abs(nodes[j] - t) > 1e-9 * max(1.0, abs(t)):
            raise ArgumentError(f"t={t} is not a node of the grid")
        return j


@dataclass
class TransitionEnsemble:
    """Per-path matrix solutions captured at the grid nodes.

    ``samples[p, j]`` is the Euler approximation of the transition
    matrix from ``grid.s`` to ``grid.nodes[j]`` along path p.
    ``node_dw[p, j]`` aggregates the Brownian increment between nodes j
    and j+1; coarse quadratures downstream reuse it so they see the
    same noise the simulation saw. Paths whose solution left the
    representable range are flagged in ``blown_up`` with the first bad
    node recorded.
    """

    grid: SimGrid
    system: str
    seed: int
    step_offset: int
    samples: np.ndarray
    node_dw: np.ndarray
    blown_up: np.ndarray
    first_bad_node: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[-1]

    def good_by_node(self, j: int) -> np.ndarray:
        """Paths whose samples are finite through node index j."""
        return ~(self.blown_up & (self.first_bad_node <= j))


def simulate_forward(
    spec: CoefficientSpec,
    grid: SimGrid,
    n_paths: int,
    seed: int,
    system: str = "unperturbed",
    step_offset: int = 0,
) -> TransitionEnsemble:
    """Simulate the matrix solution on ``grid`` for ``n_paths`` paths.

    ``system`` selects the nominal coefficients or the perturbed ones;
    absent perturbation matrices contribute zero. The identity is
    captured exactly at any node equal to ``grid.s``.
    """
    if system not in _SYSTEMS:
        raise ArgumentError(f"system must be one of {_SYSTEMS}, got {system!r}")
    if n_paths < 1:
        raise ArgumentError("n_paths must be positive")
    d = spec.dim
    n_steps = grid.n_steps
    node_steps = grid.node_steps
    n_nodes = len(grid.nodes)

    step_times = grid.s + grid.dt * np.arange(n_steps)
    drift = evaluate_or_zero(spec, "A", step_times)
    noise = evaluate_or_zero(spec, "G", step_times)
    if system == "perturbed":
        if spec.has("B"):
            drift = drift + evaluate_or_zero(spec, "B", step_times)
        if spec.has("H"):
            noise = noise + evaluate_or_zero(spec, "H", step_times)

    paths = np.arange(n_paths, dtype=np.uint64)
    phi = np.broadcast_to(np.eye(d), (n_paths, d, d)).copy()
    samples = np.empty((n_paths, n_nodes, d, d))
    node_dw = np.zeros((n_paths, max(n_nodes - 1, 0)))
    blown_up = np.zeros(n_paths, dtype=bool)
    first_bad = np.full(n_paths, -1, dtype=np.int64)

    sqrt_dt = np.sqrt(grid.dt)
    acc_dw = np.zeros(n_paths)
    next_node = 0

    def _capture(j: int) -> None:
        samples[:, j] = phi
        finite = np.isfinite(phi).all(axis=(1, 2))
        newly_bad = ~finite & ~blown_up
        blown_up[newly_bad] = True
        first_bad[newly_bad] = j

    for k in range(n_steps):
        while next_node < n_nodes and node_steps[next_node] == k:
            _capture(next_node)
            if next_node > 0:
                node_dw[:, next_node - 1] = acc_dw
            acc_dw = np.zeros(n_paths)
            next_node += 1
        z = gaussian_increments(seed, paths, step_offset + k)
        dw = sqrt_dt * z
        acc_dw += dw
        with np.errstate(over="ignore", invalid="ignore"):
            phi = phi + grid.dt * (drift[k] @ phi) + dw[:, None, None] * (noise[k] @ phi)
    while next_node < n_nodes:
        # remaining nodes sit at the final step boundary
        _capture(next_node)
        if next_node > 0:
            node_dw[:, next_node - 1] = acc_dw
        acc_dw = np.zeros(n_paths)
        next_node += 1

    return TransitionEnsemble(
        grid=grid,
        system=system,
        seed=seed,
        step_offset=step_offset,
        samples=samples,
        node_dw=node_dw,
        blown_up=blown_up,
        first_bad_node=first_bad,
    )


# ---------------------------------------------------------------------------
# transitions and rebasing


@dataclass
class TransitionResult:
    """Per-path transition matrices between two node times."""

    t: float
    s: float
    matrices: np.ndarray
    excluded: np.ndarray

    @property
    def n_excluded(self) -> int:
        return int(self.excluded.sum())


def transition(ens: TransitionEnsemble, t: float, s: float) -> TransitionResult:
    """Per-path transition matrices from node time s to node time t.

    Computed as ``X(t) X(s)^{-1}``. Paths where ``X(s)`` has 2-norm
    condition number above 1e12, or where either sample is non-finite,
    are excluded (their matrices are NaN). ``t == s`` returns exact
    identities with no exclusions.
    """
    j_t = ens.grid.node_index(t)
    j_s = ens.grid.node_index(s)
    d = ens.dim
    if j_t == j_s:
        mats = np.broadcast_to(np.eye(d), (ens.n_paths, d, d)).copy()
        return TransitionResult(t=t, s=s, matrices=mats, excluded=np.zeros(ens.n_paths, dtype=bool))
    x_t = ens.samples[:, j_t]
    x_s = ens.samples[:, j_s]
    finite = np.isfinite(x_t).all(axis=(1, 2)) & np.isfinite(x_s).all(axis=(1, 2))
    cond = np.full(ens.n_paths, np.inf)
    cond[finite] = cond_two(x_s[finite])
    excluded = ~finite | (cond > COND_LIMIT)
    mats = np.full((ens.n_paths, d, d), np.nan)
    ok = ~excluded
    if ok.any():
        mats[ok] = x_t[ok] @ np.linalg.inv(x_s[ok])
    return TransitionResult(t=t, s=s, matrices=mats, excluded=excluded)


def rebase(ens: TransitionEnsemble, t0: float) -> np.ndarray:
    """Per-path transitions from t0 to every node, shape (p, n, d, d).

    When ``t0 == grid.s`` this is the sample array itself. Otherwise
    samples are multiplied by ``X(t0)^{-1}`` on the right; paths where
    that inverse does not exist come out NaN.
    """
    j0 = ens.grid.node_index(t0)
    if j0 == 0:
        return ens.samples
    x0 = ens.samples[:, j0]
    finite = np.isfinite(x0).all(axis=(1, 2))
    inv0 = np.full_like(x0, np.nan)
    det = np.linalg.det(x0[finite])
    usable = np.zeros_like(finite)
    usable[finite] = det != 0.0
    inv0[usable] = np.linalg.inv(ens.samples[usable, j0])
    return ens.samples @ inv0[:, None, :, :]


# ---------------------------------------------------------------------------
# mean-square norm curves


@dataclass
class MsNormCurve:
    """Monte Carlo estimates of E|R(t, s)|^2 over a list of pairs.

    ``estimate[i]`` is the sample mean of the squared operator norm of
    the per-path matrix R(t_i, s_i); ``stderr`` the standard error of
    that mean; ``n_effective`` the paths that survived exclusion.
    """

    t: np.ndarray
    s: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    n_effective: np.ndarray
    label: str = ""

    def __len__(self) -> int:
        return len(self.t)


def _family_products(ens, fam, j_ts, j_ss):
    """Per-pair matrices C_t B C_s^{-1} for a projection family post-factor.

    Forming the conjugated projection at s first and multiplying by the
    transition afterwards cancels catastrophically for strongly
    expanding directions, so the product is fused around the family
    base instead.
    """
    base = np.asarray(fam.base_projection, dtype=float)
    c = rebase(ens, fam.t0)
    unique_s = sorted(set(j_ss))
    z_by_s = {}
    excl_by_s = {}
    for j in unique_s:
        c_s = c[:, j]
        finite = np.isfinite(c_s).all(axis=(1, 2))
        cond = np.full(ens.n_paths, np.inf)
        cond[finite] = cond_two(c_s[finite])
        excl = ~finite | (cond > COND_LIMIT)
        z = np.full_like(c_s, np.nan)
        ok = ~excl
        if ok.any():
            inv_s = np.linalg.inv(c_s[ok])
            if base.ndim == 2:
                z[ok] = base @ inv_s
            else:
                z[ok] = base[ok] @ inv_s
        z_by_s[j] = z
        excl_by_s[j] = excl
    mats = []
    excls = []
    for j_t, j_s in zip(j_ts, j_ss):
        prod = c[:, j_t] @ z_by_s[j_s]
        excl = excl_by_s[j_s] | ~np.isfinite(c[:, j_t]).all(axis=(1, 2))
        mats.append(prod)
        excls.append(excl)
    return mats, excls


def ms_norm_curve(
    ens: TransitionEnsemble,
    pairs,
    post=None,
    label: str = "",
) -> MsNormCurve:
    """Estimate E|X(t) X(s)^{-1} R(s)|^2 over node pairs.

    ``post`` chooses the right factor R(s): None for the bare
    transition, a (d, d) or (n_paths, d, d) array for a constant
    factor, a callable s -> matrix, or a projection family (whose
    conjugated projection at s is fused into the product to avoid
    cancellation). The estimate at a pair (s, s) with no post-factor is
    exactly 1 with zero standard error.
    """
    pairs = [(float(t), float(s)) for t, s in pairs]
    if len(pairs) == 0:
        raise ArgumentError("pairs must be nonempty")
    j_ts = [ens.grid.node_index(t) for t, _ in pairs]
    j_ss = [ens.grid.node_index(s) for _, s in pairs]

    from .dichotomy import ProjectionFamily  # local import to avoid a cycle

    est = np.empty(len(pairs))
    serr = np.empty(len(pairs))
    neff = np.empty(len(pairs), dtype=np.int64)

    if isinstance(post, ProjectionFamily):
        mats_list, excl_list = _family_products(ens, post, j_ts, j_ss)
        fam_excluded = post.excluded
        for i in range(len(pairs)):
            excl = excl_list[i]
            if fam_excluded is not None:
                excl = excl | fam_excluded
            excl = excl | ~ens.good_by_node(max(j_ts[i], j_ss[i]))
            est[i], serr[i], neff[i] = _norm_stats(mats_list[i], excl)
        return MsNormCurve(
            t=np.array([p[0] for p in pairs]),
            s=np.array([p[1] for p in pairs]),
            estimate=est,
            stderr=serr,
            n_effective=neff,
            label=label,
        )

    for i, (t, s) in enumerate(pairs):
        j_t, j_s = j_ts[i], j_ss[i]
        if j_t == j_s and post is None:
            good = ens.good_by_node(j_t)
            est[i], serr[i], neff[i] = 1.0, 0.0, int(good.sum())
            continue
        res = transition(ens, t, s)
        mats = res.matrices
        if post is not None:
            r = post(s) if callable(post) else np.asarray(post, dtype=float)
            if r.ndim == 2:
                mats = mats @ r
            elif r.ndim == 3:
                mats = mats @ r
            else:
                raise ArgumentError("post factor must be (d,d) or (n_paths,d,d)")
        excl = res.excluded | ~ens.good_by_node(max(j_t, j_s))
        est[i], serr[i], neff[i] = _norm_stats(mats, excl)

    return MsNormCurve(
        t=np.array([p[0] for p in pairs]),
        s=np.array([p[1] for p in pairs]),
        estimate=est,
        stderr=serr,
        n_effective=neff,
        label=label,
    )


def _norm_stats(mats: np.ndarray, excluded: np.ndarray) -> tuple[float, float, int]:
    ok = ~excluded
    n = int(ok.sum())
    if n == 0:
        return np.nan, np.nan, 0
    vals = spectral_norm_sq(mats[ok])
    mean = float(vals.mean())
    if n > 1:
        stderr = float(vals.std(ddof=1) / np.sqrt(n))
    else:
        stderr = np.nan
    return mean, stderr, n


# ---------------------------------------------------------------------------
# CSV export

def _fmt(x) -> str:
    """Shortest round-trip decimal form; deterministic for a given value."""
    return repr(float(x))


def write_ensemble_csv(ens: TransitionEnsemble, path: str) -> None:
    """Write node samples as rows (path, node_time, row, col, value)."""
    d = ens.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "node_time", "row", "col", "value"])
        for p in range(ens.n_paths):
            for j, t in enumerate(ens.grid.nodes):
                for r in range(d):
                    for c in range(d):
                        w.writerow([p, _fmt(t), r, c, _fmt(ens.samples[p, j, r, c])])


def write_curve_csv(curve: MsNormCurve, path: str) -> None:
    """Write curve rows (t, s, estimate, stderr, n_effective)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "s", "estimate", "stderr", "n_effective"])
        for i in range(len(curve)):
            w.writerow(
                [
                    _fmt(curve.t[i]),
                    _fmt(curve.s[i]),
                    _fmt(curve.estimate[i]),
                    _fmt(curve.stderr[i]),
                    int(curve.n_effective[i]),
                ]
            )
