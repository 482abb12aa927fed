"""Hot numeric kernels, numba-compiled when available.

The single genuinely hot scalar kernel of the package is the resolvent of the
logarithmic convex potential part: for each nodal value ``s`` solve

    r + lam * theta * atanh(r) = s,        r in (-1, 1),

by a safeguarded Newton iteration with a bisection fallback.  Two twin
implementations live here: a numba ``@njit`` scalar loop and a pure-numpy
masked iteration performing the same update sequence.  The roots agree to a
few ulps but not bitwise across backends: libm's ``atanh`` (numba) and
``np.arctanh`` round differently on some inputs, which can let one path pass
the convergence test an iteration earlier.  Each backend on its own is
deterministic.  Selection happens once at import time: the numpy path is used
when numba is not importable or when the environment variable
``BSCHSIM_NO_NUMBA`` is set to ``1``/``true``.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - depends on the environment
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorate(func):
            return func

        return decorate


def _numba_disabled_by_env() -> bool:
    return os.environ.get("BSCHSIM_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAS_NUMBA and not _numba_disabled_by_env()

# Iteration constants shared by both implementations.  The wall clamp keeps
# iterates strictly inside (-1, 1); the residual tolerance sits one order
# below the 1e-12 * (1 + |s|) contract so the returned root is safely inside.
# When the bracket collapses to float resolution the root has saturated at
# the wall (the analytic root is closer to +-1 than adjacent doubles) and the
# iteration stops at the bracket midpoint.
_WALL_CLAMP = 1e-15
_TOL_FACTOR = 1e-13
_MAX_ITER = 200
_BRACKET_FLOOR = 2.3e-16


@njit(cache=True)
def _resolvent_log_scalar_loop(s: np.ndarray, lam: float, theta: float) -> np.ndarray:
    out = np.empty_like(s)
    bound = 1.0 - _WALL_CLAMP
    for idx in range(s.size):
        target = s[idx]
        lo = -bound
        hi = bound
        root = target / (1.0 + lam * theta)
        if root < lo:
            root = lo
        elif root > hi:
            root = hi
        tol = _TOL_FACTOR * (1.0 + abs(target))
        for _ in range(_MAX_ITER):
            residual = root + lam * theta * math.atanh(root) - target
            if abs(residual) <= tol:
                break
            if residual > 0.0:
                hi = root
            else:
                lo = root
            if hi - lo <= _BRACKET_FLOOR:
                root = 0.5 * (lo + hi)
                break
            slope = 1.0 + lam * theta / (1.0 - root * root)
            candidate = root - residual / slope
            if candidate <= lo or candidate >= hi:
                candidate = 0.5 * (lo + hi)
            root = candidate
        out[idx] = root
    return out


def _resolvent_log_masked_iteration(s: np.ndarray, lam: float, theta: float) -> np.ndarray:
    bound = 1.0 - _WALL_CLAMP
    lo = np.full(s.shape, -bound)
    hi = np.full(s.shape, bound)
    root = np.clip(s / (1.0 + lam * theta), -bound, bound)
    tol = _TOL_FACTOR * (1.0 + np.abs(s))
    active = np.ones(s.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        residual = root + lam * theta * np.arctanh(root) - s
        active = active & (np.abs(residual) > tol)
        if not active.any():
            break
        positive = active & (residual > 0.0)
        negative = active & ~(residual > 0.0)
        hi[positive] = root[positive]
        lo[negative] = root[negative]
        collapsed = active & (hi - lo <= _BRACKET_FLOOR)
        root = np.where(collapsed, 0.5 * (lo + hi), root)
        active = active & ~collapsed
        if not active.any():
            break
        slope = 1.0 + lam * theta / (1.0 - root * root)
        candidate = root - residual / slope
        outside = (candidate <= lo) | (candidate >= hi)
        candidate = np.where(outside, 0.5 * (lo + hi), candidate)
        root = np.where(active, candidate, root)
    return root


def resolvent_log_numba(s: np.ndarray, lam: float, theta: float) -> np.ndarray:
    """Resolvent via the (possibly jit-compiled) scalar loop."""
    flat = np.ascontiguousarray(s, dtype=np.float64).ravel()
    return _resolvent_log_scalar_loop(flat, float(lam), float(theta)).reshape(np.shape(s))


def resolvent_log_numpy(s: np.ndarray, lam: float, theta: float) -> np.ndarray:
    """Resolvent via the vectorized masked iteration."""
    flat = np.asarray(s, dtype=np.float64).ravel()
    return _resolvent_log_masked_iteration(flat, float(lam), float(theta)).reshape(np.shape(s))


if USE_NUMBA:
    resolvent_log = resolvent_log_numba
else:
    resolvent_log = resolvent_log_numpy


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return "numba" if USE_NUMBA else "numpy"
