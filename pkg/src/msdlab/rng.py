"""Counter-based Gaussian increments.

Brownian increments are produced by a stateless hash of the triple
(seed, path, step). Any increment can be regenerated in isolation, so
simulations are reproducible bit for bit regardless of path chunking,
vectorisation width, or the order in which windows of a long interval
are simulated. The mixer is the 64-bit finaliser from SplitMix64.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1

_TWO = np.uint64(2)


def _mix(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser, vectorised over uint64 arrays."""
    x = x ^ (x >> np.uint64(30))
    x = x * _MUL1
    x = x ^ (x >> np.uint64(27))
    x = x * _MUL2
    x = x ^ (x >> np.uint64(31))
    return x


def _uniform(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to floats strictly inside (0, 1).

    52 bits are kept so the +0.5 offset survives rounding at both ends;
    with 53 the top word would round to exactly 1.0.
    """
    return ((words >> np.uint64(12)).astype(np.float64) + 0.5) * 2.0**-52


def counter_state(seed: int, paths: np.ndarray, step: int) -> np.ndarray:
    """Hashed state for the (seed, path, step) counter triple."""
    s = np.uint64(seed & _MASK)
    p = np.asarray(paths).astype(np.uint64)
    k = np.uint64(step & _MASK)
    with np.errstate(over="ignore"):
        # modular 2^64 arithmetic throughout
        h = _mix(s + _GAMMA)
        h = _mix(h + p * _GAMMA)
        h = _mix(h + k * _GAMMA)
    return h


def gaussian_increments(seed: int, paths: np.ndarray, step: int) -> np.ndarray:
    """Standard normal draws indexed by (seed, path, step).

    Parameters
    ----------
    seed : int
        Experiment seed, reduced modulo 2^64.
    paths : ndarray of int
        Path indices; one draw per entry.
    step : int
        Global step counter. Windows of one experiment must use
        disjoint step ranges to get independent increments.

    Returns
    -------
    ndarray of float64, same shape as ``paths``.
    """
    h = counter_state(seed, paths, step)
    with np.errstate(over="ignore"):
        u1 = _uniform(_mix(h + _GAMMA))
        u2 = _uniform(_mix(h + _TWO * _GAMMA))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
