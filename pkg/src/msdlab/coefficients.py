"""Time-dependent coefficient matrices and their growth envelopes.

A linear system is specified by matrix-valued functions of time written
in a small expression language: numeric literals, the variable ``t``,
the four arithmetic operators with usual precedence, parentheses, and
the functions ``sin``, ``cos``, ``exp``, ``sqrt``. A matrix is a
bracketed row-major literal whose entries are expressions, e.g.::

    [[-4 - t*sin(t), 0], [0, 4 + t*sin(t)]]

Expressions evaluate vectorised over numpy arrays of times, which keeps
coefficient evaluation off the critical path of long simulations.

A :class:`CoefficientSpec` bundles the nominal drift ``A`` and noise
``G`` with optional perturbations ``B`` (drift) and ``H`` (noise),
scalar envelope bounds for each, a decay rate for the perturbation
envelopes, and the time interval on which everything is defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    AbsentCoefficientError,
    ConfigError,
    DomainError,
    ExpressionError,
)
from .linalg import spectral_norm

_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
}

_INTERVAL_KINDS = ("right", "left", "whole")


# ---------------------------------------------------------------------------
# expression language


class _Tokenizer:
    """Splits a source string into numbers, names, and punctuation."""

    _PUNCT = "+-*/(),[]"

    def __init__(self, source: str):
        self.source = source
        self.pos = 0
        self.tokens: list[tuple[str, str]] = []
        self._scan()
        self.index = 0

    def _scan(self) -> None:
        src = self.source
        i = 0
        n = len(src)
        while i < n:
            ch = src[i]
            if ch.isspace():
                i += 1
                continue
            if ch in self._PUNCT:
                self.tokens.append((ch, ch))
                i += 1
                continue
            if ch.isdigit() or ch == ".":
                j = i
                seen_exp = False
                while j < n:
                    c = src[j]
                    if c.isdigit() or c == ".":
                        j += 1
                    elif c in "eE" and not seen_exp:
                        seen_exp = True
                        j += 1
                        if j < n and src[j] in "+-":
                            j += 1
                    else:
                        break
                text = src[i:j]
                try:
                    float(text)
                except ValueError:
                    raise ExpressionError(f"bad numeric literal {text!r} in {src!r}")
                self.tokens.append(("num", text))
                i = j
                continue
            if ch.isalpha() or ch == "_":
                j = i
                while j < n and (src[j].isalnum() or src[j] == "_"):
                    j += 1
                self.tokens.append(("name", src[i:j]))
                i = j
                continue
            raise ExpressionError(f"unexpected character {ch!r} in {src!r}")

    def peek(self) -> tuple[str, str] | None:
        if self.index < len(self.tokens):
            return self.tokens[self.index]
        return None

    def next(self) -> tuple[str, str] | None:
        tok = self.peek()
        if tok is not None:
            self.index += 1
        return tok

    def expect(self, kind: str) -> tuple[str, str]:
        tok = self.next()
        if tok is None or tok[0] != kind:
            got = "end of input" if tok is None else repr(tok[1])
            raise ExpressionError(f"expected {kind!r}, got {got} in {self.source!r}")
        return tok


class Expression:
    """A compiled scalar expression of the time variable."""

    __slots__ = ("source", "_fn")

    def __init__(self, source: str, fn):
        self.source = source
        self._fn = fn

    @classmethod
    def parse(cls, source: str) -> "Expression":
        tok = _Tokenizer(source)
        fn = _parse_sum(tok)
        if tok.peek() is not None:
            raise ExpressionError(f"trailing input {tok.peek()[1]!r} in {source!r}")
        return cls(source, fn)

    def __call__(self, t):
        return self._fn(np.asarray(t, dtype=float))

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"


def _parse_sum(tok: _Tokenizer):
    fn = _parse_term(tok)
    while True:
        nxt = tok.peek()
        if nxt is None or nxt[0] not in "+-":
            return fn
        op = tok.next()[0]
        rhs = _parse_term(tok)
        fn = _bin(np.add if op == "+" else np.subtract, fn, rhs)


def _parse_term(tok: _Tokenizer):
    fn = _parse_factor(tok)
    while True:
        nxt = tok.peek()
        if nxt is None or nxt[0] not in "*/":
            return fn
        op = tok.next()[0]
        rhs = _parse_factor(tok)
        fn = _bin(np.multiply if op == "*" else np.divide, fn, rhs)


def _parse_factor(tok: _Tokenizer):
    nxt = tok.peek()
    if nxt is not None and nxt[0] in "+-":
        op = tok.next()[0]
        inner = _parse_factor(tok)
        if op == "-":
            return lambda t, f=inner: np.negative(f(t))
        return inner
    return _parse_atom(tok)


def _parse_atom(tok: _Tokenizer):
    nxt = tok.next()
    if nxt is None:
        raise ExpressionError(f"unexpected end of input in {tok.source!r}")
    kind, text = nxt
    if kind == "num":
        value = float(text)
        return lambda t, v=value: v
    if kind == "name":
        if text == "t":
            return lambda t: t
        if text in _FUNCTIONS:
            tok.expect("(")
            arg = _parse_sum(tok)
            tok.expect(")")
            fn = _FUNCTIONS[text]
            return lambda t, f=arg, u=fn: u(f(t))
        raise ExpressionError(f"unknown name {text!r} in {tok.source!r}")
    if kind == "(":
        inner = _parse_sum(tok)
        tok.expect(")")
        return inner
    raise ExpressionError(f"unexpected token {text!r} in {tok.source!r}")


def _bin(op, lhs, rhs):
    return lambda t: op(lhs(t), rhs(t))


class MatrixExpression:
    """A square matrix of compiled scalar expressions."""

    __slots__ = ("source", "dim", "_entries")

    def __init__(self, source: str, dim: int, entries):
        self.source = source
        self.dim = dim
        self._entries = entries

    @classmethod
    def parse(cls, source: str, dim: int) -> "MatrixExpression":
        source = source.strip()
        if not source.startswith("["):
            if dim != 1:
                raise ExpressionError(
                    f"matrix literal must be bracketed for dim={dim}: {source!r}"
                )
            return cls(source, 1, [[Expression.parse(source)]])
        tok = _Tokenizer(source)
        tok.expect("[")
        rows = []
        while True:
            tok.expect("[")
            row = [Expression(source, _parse_sum(tok))]
            while tok.peek() == (",", ","):
                tok.next()
                row.append(Expression(source, _parse_sum(tok)))
            tok.expect("]")
            rows.append(row)
            nxt = tok.peek()
            if nxt == (",", ","):
                tok.next()
                continue
            break
        tok.expect("]")
        if tok.peek() is not None:
            raise ExpressionError(f"trailing input after matrix in {source!r}")
        if len(rows) != dim or any(len(r) != dim for r in rows):
            shape = f"{len(rows)}x{max(len(r) for r in rows)}"
            raise ExpressionError(f"matrix literal is {shape}, expected {dim}x{dim}")
        return cls(source, dim, rows)

    def __call__(self, t) -> np.ndarray:
        t_arr = np.asarray(t, dtype=float)
        out = np.empty(t_arr.shape + (self.dim, self.dim), dtype=float)
        for i, row in enumerate(self._entries):
            for j, entry in enumerate(row):
                out[..., i, j] = entry(t_arr)
        return out

    def __repr__(self) -> str:
        return f"MatrixExpression({self.source!r}, dim={self.dim})"


# ---------------------------------------------------------------------------
# intervals


@dataclass(frozen=True)
class Interval:
    """A half line or the whole line, anchored at ``t0``.

    ``kind`` is one of ``right`` ([t0, inf)), ``left`` ((-inf, t0]), or
    ``whole``. The anchor matters even for the whole line: projection
    families and gluing constructions are anchored there.
    """

    kind: str
    t0: float

    _TOL = 1e-9

    def __post_init__(self):
        if self.kind not in _INTERVAL_KINDS:
            raise ConfigError(f"unknown interval kind {self.kind!r}")
        if not math.isfinite(self.t0):
            raise ConfigError("interval anchor must be finite")

    @classmethod
    def parse(cls, text: str) -> "Interval":
        parts = text.split(":")
        if len(parts) != 2:
            raise ConfigError(f"interval must look like 'right:0.0', got {text!r}")
        kind = parts[0].strip()
        try:
            t0 = float(parts[1])
        except ValueError:
            raise ConfigError(f"bad interval anchor in {text!r}")
        return cls(kind, t0)

    def contains(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "right":
            return t >= self.t0 - self._TOL
        if self.kind == "left":
            return t <= self.t0 + self._TOL
        return np.ones(t.shape, dtype=bool)

    def __str__(self) -> str:
        if self.kind == "right":
            return f"[{self.t0}, inf)"
        if self.kind == "left":
            return f"(-inf, {self.t0}]"
        return f"(-inf, inf) anchored at {self.t0}"


# ---------------------------------------------------------------------------
# coefficient specification


_MATRIX_NAMES = ("A", "G", "B", "H")


@dataclass
class CoefficientSpec:
    """Coefficients of a linear system and its perturbation.

    The nominal system is dx = A(t) x dt + G(t) x dw with a scalar
    Brownian driver; the perturbed system adds B to the drift and H to
    the noise. Envelope bounds promise ``|A(t)| <= a_bound``,
    ``|G(t)| <= g_bound`` on the interval and
    ``|B(t)| <= b_bound * exp(-eps_decay * |t|)`` (same for H with
    h_bound), all in operator norm. Bounds are promises made by the
    author of the spec; :func:`verify_bounds` spot-checks them.
    """

    dim: int
    interval: Interval
    a: MatrixExpression | None = None
    g: MatrixExpression | None = None
    b: MatrixExpression | None = None
    h: MatrixExpression | None = None
    a_bound: float = 0.0
    g_bound: float = 0.0
    b_bound: float = 0.0
    h_bound: float = 0.0
    eps_decay: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        for name, expr in self._matrices().items():
            if expr is not None and expr.dim != self.dim:
                raise ConfigError(f"{name} has dim {expr.dim}, spec has dim {self.dim}")
        for name in ("a_bound", "g_bound", "b_bound", "h_bound"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.eps_decay < 0:
            raise ConfigError("eps_decay must be nonnegative")

    def _matrices(self) -> dict[str, MatrixExpression | None]:
        return {"A": self.a, "G": self.g, "B": self.b, "H": self.h}

    def has(self, which: str) -> bool:
        return self._matrices().get(which) is not None

    def _check_domain(self, t) -> None:
        inside = self.interval.contains(t)
        if not np.all(inside):
            bad = np.asarray(t, dtype=float)[~np.asarray(inside)]
            first = float(np.atleast_1d(bad)[0])
            raise DomainError(f"t={first} outside interval {self.interval}")


def evaluate(spec: CoefficientSpec, which: str, t) -> np.ndarray:
    """Evaluate one coefficient matrix at time(s) ``t``.

    ``which`` is one of A, G, B, H, or Btilde. Btilde is the effective
    drift perturbation B - G H; it requires B (H absent is treated as
    zero). Requesting an absent matrix raises
    :class:`AbsentCoefficientError`; times outside the interval raise
    :class:`DomainError`.
    """
    spec._check_domain(t)
    if which == "Btilde":
        if spec.b is None:
            raise AbsentCoefficientError("Btilde requires B to be specified")
        bt = spec.b(t)
        if spec.h is not None and spec.g is not None:
            bt = bt - spec.g(t) @ spec.h(t)
        return bt
    mats = spec._matrices()
    if which not in mats:
        raise AbsentCoefficientError(f"unknown coefficient {which!r}")
    expr = mats[which]
    if expr is None:
        raise AbsentCoefficientError(f"coefficient {which} not specified")
    return expr(t)


def evaluate_or_zero(spec: CoefficientSpec, which: str, t) -> np.ndarray:
    """Like :func:`evaluate` but absent matrices evaluate to zero.

    Btilde here means B - G H with every absent factor zero, which is
    what the simulation and fixed-point machinery want.
    """
    spec._check_domain(t)
    t_arr = np.asarray(t, dtype=float)
    zero = np.zeros(t_arr.shape + (spec.dim, spec.dim))
    if which == "Btilde":
        bt = spec.b(t) if spec.b is not None else zero
        if spec.h is not None and spec.g is not None:
            bt = bt - spec.g(t) @ spec.h(t)
        return bt
    expr = spec._matrices()[which]
    return expr(t) if expr is not None else zero


# ---------------------------------------------------------------------------
# bound verification


@dataclass(frozen=True)
class BoundCheck:
    """Result of checking one coefficient against its envelope."""

    name: str
    absent: bool
    max_ratio: float
    argmax_t: float
    violation: bool


@dataclass(frozen=True)
class BoundsReport:
    checks: tuple[BoundCheck, ...]

    _SLACK = 1e-9

    @property
    def ok(self) -> bool:
        return not any(c.violation for c in self.checks)

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            if c.absent:
                lines.append(f"{c.name}: absent")
                continue
            status = "VIOLATION" if c.violation else "ok"
            lines.append(
                f"{c.name}: max ratio {c.max_ratio:.6g} at t={c.argmax_t:.6g} [{status}]"
            )
        return "\n".join(lines)


def verify_bounds(spec: CoefficientSpec, ts) -> BoundsReport:
    """Check the declared envelopes on a sample of times.

    The ratio reported for each matrix is the largest value of
    ``|M(t)| / envelope(t)`` over the sample; a ratio above 1 + 1e-9 is
    flagged. This is a spot check on a finite grid, not a proof.
    """
    ts = np.asarray(ts, dtype=float)
    if ts.ndim != 1 or ts.size == 0:
        raise ValueError("ts must be a nonempty 1-d array of times")
    spec._check_domain(ts)
    checks = []
    for name, expr in spec._matrices().items():
        if expr is None:
            checks.append(BoundCheck(name, True, 0.0, float(ts[0]), False))
            continue
        norms = spectral_norm(expr(ts))
        if name in ("A", "G"):
            bound = {"A": spec.a_bound, "G": spec.g_bound}[name]
            envelope = np.full_like(ts, bound)
        else:
            bound = {"B": spec.b_bound, "H": spec.h_bound}[name]
            envelope = bound * np.exp(-spec.eps_decay * np.abs(ts))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(envelope > 0.0, norms / envelope, np.where(norms > 0.0, np.inf, 0.0))
        k = int(np.argmax(ratios))
        ratio = float(ratios[k])
        checks.append(
            BoundCheck(name, False, ratio, float(ts[k]), ratio > 1.0 + BoundsReport._SLACK)
        )
    return BoundsReport(tuple(checks))


# ---------------------------------------------------------------------------
# config loading


def _parse_matrix_field(raw, name: str, dim: int) -> MatrixExpression:
    if not isinstance(raw, str):
        raise ConfigError(f"{name} must be a string matrix literal")
    try:
        return MatrixExpression.parse(raw, dim)
    except ExpressionError as exc:
        raise ConfigError(f"bad expression for {name}: {exc}") from exc


def spec_from_mapping(data: dict) -> CoefficientSpec:
    """Build a :class:`CoefficientSpec` from a parsed config mapping.

    Recognised keys: ``dim`` (required), ``interval`` (required, e.g.
    ``"right:0.0"``), the matrix strings ``A``/``G``/``B``/``H``, the
    scalar bounds ``a_bound``/``g_bound``/``b_bound``/``h_bound``,
    ``eps_decay``, and ``label``.
    """
    if "dim" not in data:
        raise ConfigError("config missing 'dim'")
    try:
        dim = int(data["dim"])
    except (TypeError, ValueError):
        raise ConfigError(f"bad dim {data['dim']!r}")
    if "interval" not in data:
        raise ConfigError("config missing 'interval'")
    interval = Interval.parse(str(data["interval"]))
    kwargs = {}
    for name in _MATRIX_NAMES:
        if name in data:
            kwargs[name.lower()] = _parse_matrix_field(data[name], name, dim)
    for name in ("a_bound", "g_bound", "b_bound", "h_bound", "eps_decay"):
        if name in data:
            try:
                kwargs[name] = float(data[name])
            except (TypeError, ValueError):
                raise ConfigError(f"bad {name} {data[name]!r}")
    if "label" in data:
        kwargs["label"] = str(data["label"])
    try:
        return CoefficientSpec(dim=dim, interval=interval, **kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
