"""Mobius transformation algebra on the Riemann sphere.

Maps are stored as 2x2 complex coefficient matrices ``[[a, b], [c, d]]``
acting by ``z -> (a z + b) / (c z + d)``.  Everything projective (class,
fixed points, characteristic constant) is computed on the determinant-one
representative so that ``m`` and ``lam * m`` always agree.
"""

from __future__ import annotations

import cmath
import enum
import math
from dataclasses import dataclass

import numpy as np

from .complex_core import INF, ExtendedComplex, c_add, c_div, c_mul
from .errors import IdentityMap, InvalidMobius, ParabolicMap

DET_EPS = 1e-12
DEFAULT_TOL = 1e-9
CENSUS_TOL = 1e-3


class GeometryClass(str, enum.Enum):
    IDENTITY = "Identity"
    PARABOLIC = "Parabolic"
    CIRCULAR = "Circular"
    ELLIPTIC = "Elliptic"
    HYPERBOLIC = "Hyperbolic"
    LOXODROMIC = "Loxodromic"

    def __str__(self):
        return self.value


def _as_complex(x) -> complex:
    if isinstance(x, ExtendedComplex):
        if x.is_infinity:
            raise InvalidMobius("Mobius coefficients must be finite")
        return x.to_complex()
    z = complex(x)
    if not (math.isfinite(z.real) and math.isfinite(z.imag)):
        raise InvalidMobius("Mobius coefficients must be finite")
    return z


@dataclass(frozen=True)
class MobiusParams:
    """Coefficients of one Mobius map.  Construction rejects |det| <= 1e-12."""

    a: complex
    b: complex
    c: complex
    d: complex

    def __post_init__(self):
        for name in "abcd":
            object.__setattr__(self, name, _as_complex(getattr(self, name)))
        if abs(self.det) <= DET_EPS:
            raise InvalidMobius(f"|det| = {abs(self.det):.3e} <= {DET_EPS}")

    @classmethod
    def from_matrix(cls, m) -> MobiusParams:
        m = np.asarray(m, dtype=np.complex128)
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1])

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]], dtype=np.complex128)

    @property
    def det(self) -> complex:
        return self.a * self.d - self.b * self.c

    @property
    def trace(self) -> complex:
        return self.a + self.d

    def scaled(self, lam: complex) -> MobiusParams:
        return MobiusParams(lam * self.a, lam * self.b, lam * self.c, lam * self.d)

    def __call__(self, z):
        return apply_mobius(self, z)


def apply_mobius(m: MobiusParams, z) -> ExtendedComplex:
    """Evaluate ``(a z + b) / (c z + d)`` on the extended plane."""
    z = ExtendedComplex.coerce(z)
    a, b, c, d = (ExtendedComplex.coerce(v) for v in (m.a, m.b, m.c, m.d))
    if z.is_infinity:
        return INF if c.is_zero() else c_div(a, c)
    num = c_add(c_mul(a, z), b)
    den = c_add(c_mul(c, z), d)
    if den.is_zero():
        # invertibility guarantees num != 0 at the pole
        return INF
    return c_div(num, den)


def compose(m1: MobiusParams, m2: MobiusParams) -> MobiusParams:
    """Matrix product ``m1 @ m2``, i.e. the map ``z -> m1(m2(z))``."""
    return MobiusParams.from_matrix(m1.matrix @ m2.matrix)


def inverse(m: MobiusParams) -> MobiusParams:
    # adjugate; equal to the inverse up to the projective factor det
    return MobiusParams(m.d, -m.b, -m.c, m.a)


def normalize_det(m: MobiusParams) -> MobiusParams:
    """Scale by the principal ``1/sqrt(det)`` so the result has det 1."""
    s = cmath.sqrt(m.det)
    return MobiusParams(m.a / s, m.b / s, m.c / s, m.d / s)


def _normalized_trace_sq(m: MobiusParams) -> complex:
    # (tr M)^2 / det M equals (tr N)^2 for the det-1 representative N
    # without the branch choice of sqrt(det)
    return m.trace * m.trace / m.det


def is_identity(m: MobiusParams, tol: float = DEFAULT_TOL) -> bool:
    """True when the det-normalized matrix lies within ``tol`` of +I or -I."""
    n = normalize_det(m)
    off = max(abs(n.b), abs(n.c))
    return off <= tol and (
        max(abs(n.a - 1), abs(n.d - 1)) <= tol or max(abs(n.a + 1), abs(n.d + 1)) <= tol
    )


@dataclass(frozen=True)
class FixedPoints:
    gamma1: ExtendedComplex
    gamma2: ExtendedComplex
    multiplicity: int

    def points(self) -> list[ExtendedComplex]:
        return [self.gamma1] if self.multiplicity == 1 else [self.gamma1, self.gamma2]


def fixed_points(m: MobiusParams, tol: float = DEFAULT_TOL) -> FixedPoints:
    """Solve ``m(g) = g``.

    With ``c != 0`` the roots of ``c g^2 + (d - a) g - b = 0`` are returned,
    ``gamma1`` on the ``+sqrt(Delta)`` branch.  The smaller-magnitude root is
    recovered from the product of roots to avoid cancellation.  When the
    normalized discriminant is within ``tol`` of zero the map is parabolic
    and a single point is reported.
    """
    if is_identity(m, tol):
        raise IdentityMap("every point is fixed by the identity map")
    n = normalize_det(m)
    a, b, c, d = n.a, n.b, n.c, n.d
    # equals (a + d)^2 - 4 det but keeps the 4bc term when a ~ d
    delta = (a - d) ** 2 + 4.0 * b * c
    parabolic = abs(delta) <= tol
    if c == 0:
        if a == d or parabolic:
            # the other root b / (d - a) has run off to infinity
            return FixedPoints(INF, INF, 1)
        return FixedPoints(INF, ExtendedComplex.coerce(b / (d - a)), 2)
    sq = cmath.sqrt(delta)
    p, q = (a - d) + sq, (a - d) - sq
    if abs(p) >= abs(q):
        g_plus = p / (2 * c)
        g_minus = -2 * b / p if p != 0 else g_plus
    else:
        g_minus = q / (2 * c)
        g_plus = -2 * b / q
    g1, g2 = ExtendedComplex.coerce(g_plus), ExtendedComplex.coerce(g_minus)
    if parabolic:
        # an actual root of the quadratic: equals (a - d) / 2c for an exact
        # double root and stays a fixed point when Delta is only within tol
        return FixedPoints(g1, g1, 1)
    return FixedPoints(g1, g2, 2)


def classify(m: MobiusParams, tol: float = DEFAULT_TOL) -> GeometryClass:
    """Assign one of the geometry classes from ``tau = (tr N)^2``, ``det N = 1``.

    The Delta-parentheticals of the usual classification table put Circular
    at Delta = 0, but a det-1 matrix with tau = 0 has Delta = tau - 4 = -4.
    Only the tau conditions are used here.
    """
    tau = _normalized_trace_sq(m)
    return classify_tau(tau, tol, identity=is_identity(m, tol))


def classify_tau(tau: complex, tol: float = DEFAULT_TOL, identity: bool = False) -> GeometryClass:
    """Classification from the squared normalized trace alone."""
    tau = complex(tau)
    if abs(tau.imag) > tol:
        return GeometryClass.LOXODROMIC
    t = tau.real
    if abs(t - 4.0) <= tol:
        return GeometryClass.IDENTITY if identity else GeometryClass.PARABOLIC
    if abs(t) <= tol:
        return GeometryClass.CIRCULAR
    if tol < t < 4.0 - tol:
        return GeometryClass.ELLIPTIC
    if t > 4.0 + tol:
        return GeometryClass.HYPERBOLIC
    return GeometryClass.LOXODROMIC


def eigenvalues(m: MobiusParams) -> tuple[complex, complex]:
    """Eigenvalues of the det-normalized matrix (product is 1)."""
    t = normalize_det(m).trace
    sq = cmath.sqrt(t * t - 4.0)
    l1 = (t + sq) / 2 if abs(t + sq) >= abs(t - sq) else (t - sq) / 2
    return l1, 1.0 / l1


def characteristic_constant(m: MobiusParams, tol: float = DEFAULT_TOL) -> ExtendedComplex:
    """Eigenvalue ratio ``k = l1 / l2`` of the det-one matrix, with ``|k| >= 1``."""
    if abs(_normalized_trace_sq(m) - 4.0) <= tol:
        raise ParabolicMap("eigenvalues coincide; no characteristic constant")
    l1, l2 = eigenvalues(m)
    k = l1 / l2
    if abs(k) < 1.0:
        k = 1.0 / k
    return ExtendedComplex.coerce(k)


def flow_trajectory(m: MobiusParams, z0, steps: int) -> list[ExtendedComplex]:
    """Orbit ``[z0, m(z0), m(m(z0)), ...]`` of length ``steps + 1`` (may pass through infinity)."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    z = ExtendedComplex.coerce(z0)
    out = [z]
    for _ in range(steps):
        z = apply_mobius(m, z)
        out.append(z)
    return out


def stereographic_project(z) -> tuple[float, float, float]:
    """Map onto the unit sphere with 0 at the south pole and infinity at the north."""
    z = ExtendedComplex.coerce(z)
    if z.is_infinity:
        return (0.0, 0.0, 1.0)
    r2 = z.re * z.re + z.im * z.im
    den = 1.0 + r2
    return (2.0 * z.re / den, 2.0 * z.im / den, (r2 - 1.0) / den)


def stereographic_inverse(x: float, y: float, w: float) -> ExtendedComplex:
    if w < 0.0:
        return ExtendedComplex(x / (1.0 - w), y / (1.0 - w))
    rho2 = x * x + y * y
    if rho2 == 0.0:
        return INF
    # x^2 + y^2 = (1 - w)(1 + w) avoids cancellation in 1 - w near the north pole
    s = (1.0 + w) / rho2
    return ExtendedComplex.coerce(complex(x * s, y * s))
