"""Independent oracle computations whose printed values are frozen into tests.

Each block below recomputes an expected value by a route independent of the
package implementation (closed forms via math, plain bisection, dense linear
algebra, composite quadrature).  Run directly:

    python tests/oracles/compute_oracles.py
"""

from __future__ import annotations

import math


def log_wall_value(s: float, theta: float = 1.0) -> float:
    return 0.5 * theta * ((1.0 + s) * math.log(1.0 + s)
                          + (1.0 - s) * math.log(1.0 - s))


def log_full_value(s: float, theta: float = 1.0, theta_c: float = 2.0) -> float:
    return log_wall_value(s, theta) - 0.5 * theta_c * s * s


def log_full_deriv(s: float, theta: float = 1.0, theta_c: float = 2.0) -> float:
    return theta * math.atanh(s) - theta_c * s


def bisect_resolvent(s: float, lam: float, theta: float = 1.0,
                     iterations: int = 200) -> float:
    """Plain bisection for r + lam*theta*atanh(r) = s, independent of the
    package's safeguarded Newton."""
    lo, hi = -1.0 + 1e-16, 1.0 - 1e-16
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if mid + lam * theta * math.atanh(mid) - s > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def decay_envelope_sum(gamma: float, a1: float, a2: float) -> float:
    first = math.exp(gamma / 2.0) / (1.0 - math.exp(-gamma / 2.0)) * a1
    second = 2.0 * math.exp(gamma) / (1.0 - math.exp(-gamma)) * a2
    return first * first + second


def main() -> None:
    print("# logarithmic potential, theta=1, theta_c=2")
    print(f"W(0.5)      = {log_full_value(0.5)!r}")
    print(f"W'(0.5)     = {log_full_deriv(0.5)!r}")
    print(f"0.5*ln3 - 1 = {0.5 * math.log(3.0) - 1.0!r}")
    print(f"W(-0.25)    = {log_full_value(-0.25)!r}")
    print(f"W'(-0.25)   = {log_full_deriv(-0.25)!r}")
    print(f"W1(0.5)     = {log_wall_value(0.5)!r}")

    print("\n# resolvent of the log wall by plain bisection")
    for lam, s in ((0.1, 0.5), (0.01, -0.97), (1.0, 2.0), (0.25, 1.5)):
        print(f"resolvent(lam={lam}, s={s}) = {bisect_resolvent(s, lam)!r}")

    print("\n# decay-envelope accumulation constant")
    print(f"Q(1, 1, 0) = {decay_envelope_sum(1.0, 1.0, 0.0)!r}")
    print(f"Q(0.5, 2, 3) = {decay_envelope_sum(0.5, 2.0, 3.0)!r}")

    print("\n# uniform absorption bound example")
    a1, a2, a3, r = math.log(2.0), 1.0, 1.0, 1.0
    print(f"(a3/r + a2) * exp(a1) = {(a3 / r + a2) * math.exp(a1)!r}")

    print("\n# dirichlet energy of x^2 + y^2 on unit disk (closed form)")
    print(f"integral |grad(r^2)|^2 = 4 * pi/2 = {2.0 * math.pi!r}")


if __name__ == "__main__":
    main()
