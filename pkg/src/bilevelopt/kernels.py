"""Scalar math kernels, JIT-compiled when numba is available.

The functions here are the single source of truth for the piecewise loss
family and its derivatives.  With numba installed (the default install)
they are compiled with ``@njit(cache=True)``; setting the environment
variable ``BILEVELOPT_NO_NUMBA=1`` before import keeps them as plain
Python.  Both paths execute identical IEEE-754 operation sequences, so
results are bitwise equal either way (``fastmath`` stays off).

Task family codes used by the scalar engine:

    FAMILY_QUADRATIC = 0   loss 0.5*a*(x - b/a)^2
    FAMILY_PIECEWISE = 1   quadratic core, cubic blend, linear tails
"""

from __future__ import annotations

import os

FAMILY_QUADRATIC = 0
FAMILY_PIECEWISE = 1

_DISABLE_ENV = "BILEVELOPT_NO_NUMBA"


def _detect_numba() -> bool:
    if os.environ.get(_DISABLE_ENV, "").strip() not in ("", "0"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


NUMBA_ENABLED = _detect_numba()


def jit_kernel(fn):
    """Compile ``fn`` with nopython numba when enabled, else return it as-is."""
    if NUMBA_ENABLED:
        from numba import njit

        return njit(cache=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# Piecewise loss family: quadratic within distance A of the minimum b/a,
# cubic blend on (A, A+1], linear beyond.  Value, slope and curvature are
# all continuous at both breakpoints; |f'| <= a*(0.5 + A) and |f''| <= a.
# ---------------------------------------------------------------------------


def piecewise_value(x: float, a: float, b: float, big_a: float) -> float:
    z = abs(x - b / a)
    if z <= big_a:
        return 0.5 * a * z * z
    if z <= big_a + 1.0:
        t = z - big_a
        return -a * t * t * t / 6.0 + 0.5 * a * t * t + a * big_a * z - 0.5 * a * big_a * big_a
    return (0.5 * a + a * big_a) * z - a / 6.0 - 0.5 * a * big_a * big_a - 0.5 * a * big_a


def piecewise_grad(x: float, a: float, b: float, big_a: float) -> float:
    d = x - b / a
    z = abs(d)
    if z <= big_a:
        return a * x - b
    sign = 1.0 if d > 0.0 else -1.0
    if z <= big_a + 1.0:
        t = z - big_a
        return (-0.5 * a * t * t + a * z) * sign
    return (0.5 * a + a * big_a) * sign


def piecewise_hess(x: float, a: float, b: float, big_a: float) -> float:
    z = abs(x - b / a)
    if z <= big_a:
        return a
    if z <= big_a + 1.0:
        return a * (1.0 + big_a - z)
    return 0.0


def scalar_value(family: int, x: float, a: float, b: float, big_a: float) -> float:
    if family == FAMILY_QUADRATIC:
        d = x - b / a
        return 0.5 * a * d * d
    return piecewise_value(x, a, b, big_a)


def scalar_grad(family: int, x: float, a: float, b: float, big_a: float) -> float:
    if family == FAMILY_QUADRATIC:
        return a * x - b
    return piecewise_grad(x, a, b, big_a)


def scalar_hess(family: int, x: float, a: float, b: float, big_a: float) -> float:
    if family == FAMILY_QUADRATIC:
        return a
    return piecewise_hess(x, a, b, big_a)


piecewise_value = jit_kernel(piecewise_value)
piecewise_grad = jit_kernel(piecewise_grad)
piecewise_hess = jit_kernel(piecewise_hess)
scalar_value = jit_kernel(scalar_value)
scalar_grad = jit_kernel(scalar_grad)
scalar_hess = jit_kernel(scalar_hess)
