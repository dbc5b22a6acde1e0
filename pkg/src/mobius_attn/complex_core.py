"""Extended complex scalars and split-storage complex tensors.

Scalars live on the Riemann sphere (finite values plus a single point at
infinity).  Tensors keep real and imaginary planes as two float64 arrays so
that the autodiff layer can treat each plane as an ordinary real tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import IndeterminateForm, ShapeMismatch

OVERFLOW_GUARD = 1e300


@dataclass(frozen=True)
class ExtendedComplex:
    """A point of C u {inf}.  ``re``/``im`` are canonicalized to 0 at infinity."""

    re: float = 0.0
    im: float = 0.0
    is_infinity: bool = False

    def __post_init__(self):
        if self.is_infinity:
            object.__setattr__(self, "re", 0.0)
            object.__setattr__(self, "im", 0.0)
            return
        re, im = float(self.re), float(self.im)
        if not (math.isfinite(re) and math.isfinite(im)):
            raise ValueError(f"non-finite components ({re}, {im}); use ExtendedComplex.infinity()")
        if abs(re) >= OVERFLOW_GUARD or abs(im) >= OVERFLOW_GUARD:
            raise ValueError(f"components ({re}, {im}) exceed the overflow guard")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def infinity(cls) -> ExtendedComplex:
        return cls(0.0, 0.0, True)

    @classmethod
    def coerce(cls, z) -> ExtendedComplex:
        """Accept an ExtendedComplex, a Python/numpy number, or ``math.inf``."""
        if isinstance(z, ExtendedComplex):
            return z
        z = complex(z)
        if math.isinf(z.real) or math.isinf(z.imag):
            return cls.infinity()
        return _finite(z.real, z.imag)

    def to_complex(self) -> complex:
        if self.is_infinity:
            return complex(math.inf, 0.0)
        return complex(self.re, self.im)

    def is_zero(self) -> bool:
        return not self.is_infinity and self.re == 0.0 and self.im == 0.0

    def __abs__(self) -> float:
        return math.inf if self.is_infinity else math.hypot(self.re, self.im)

    def __add__(self, other):
        return c_add(self, ExtendedComplex.coerce(other))

    def __radd__(self, other):
        return c_add(ExtendedComplex.coerce(other), self)

    def __sub__(self, other):
        return c_sub(self, ExtendedComplex.coerce(other))

    def __rsub__(self, other):
        return c_sub(ExtendedComplex.coerce(other), self)

    def __mul__(self, other):
        return c_mul(self, ExtendedComplex.coerce(other))

    def __rmul__(self, other):
        return c_mul(ExtendedComplex.coerce(other), self)

    def __truediv__(self, other):
        return c_div(self, ExtendedComplex.coerce(other))

    def __rtruediv__(self, other):
        return c_div(ExtendedComplex.coerce(other), self)

    def __neg__(self):
        return self if self.is_infinity else ExtendedComplex(-self.re, -self.im)

    def __repr__(self):
        if self.is_infinity:
            return "ExtendedComplex(inf)"
        return f"ExtendedComplex({self.re!r}{self.im:+}j)"


INF = ExtendedComplex.infinity()


def _finite(re: float, im: float) -> ExtendedComplex:
    # results beyond the guard saturate to the point at infinity
    if not (abs(re) < OVERFLOW_GUARD and abs(im) < OVERFLOW_GUARD):
        return INF
    return ExtendedComplex(re, im)


def c_add(x: ExtendedComplex, y: ExtendedComplex) -> ExtendedComplex:
    if x.is_infinity and y.is_infinity:
        raise IndeterminateForm("inf + inf is undefined on the Riemann sphere")
    if x.is_infinity or y.is_infinity:
        return INF
    return _finite(x.re + y.re, x.im + y.im)


def c_sub(x: ExtendedComplex, y: ExtendedComplex) -> ExtendedComplex:
    if x.is_infinity and y.is_infinity:
        raise IndeterminateForm("inf - inf")
    if x.is_infinity or y.is_infinity:
        return INF
    return _finite(x.re - y.re, x.im - y.im)


def c_mul(x: ExtendedComplex, y: ExtendedComplex) -> ExtendedComplex:
    if x.is_infinity or y.is_infinity:
        if x.is_zero() or y.is_zero():
            raise IndeterminateForm("0 * inf")
        return INF
    return _finite(x.re * y.re - x.im * y.im, x.re * y.im + x.im * y.re)


def _smith_div(a: float, b: float, c: float, d: float) -> tuple[float, float]:
    """(a + bi) / (c + di) with Smith's scaling."""
    if abs(c) >= abs(d):
        r = d / c
        den = c + d * r
        return (a + b * r) / den, (b - a * r) / den
    r = c / d
    den = c * r + d
    return (a * r + b) / den, (b * r - a) / den


def c_div(x: ExtendedComplex, y: ExtendedComplex) -> ExtendedComplex:
    if x.is_infinity and y.is_infinity:
        raise IndeterminateForm("inf / inf")
    if x.is_zero() and y.is_zero():
        raise IndeterminateForm("0 / 0")
    if x.is_infinity or y.is_zero():
        return INF
    if y.is_infinity:
        return ExtendedComplex(0.0, 0.0)
    with np.errstate(over="ignore"):
        re, im = _smith_div(x.re, x.im, y.re, y.im)
    if not (math.isfinite(re) and math.isfinite(im)):
        return INF
    return _finite(re, im)


@dataclass(frozen=True)
class ComplexTensor:
    """Complex array of rank <= 3 stored as separate real and imaginary planes."""

    real_part: np.ndarray
    imag_part: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.real_part, dtype=np.float64)
        im = np.asarray(self.imag_part, dtype=np.float64)
        if re.shape != im.shape:
            raise ShapeMismatch(f"real {re.shape} vs imag {im.shape}")
        if re.ndim > 3:
            raise ShapeMismatch(f"rank {re.ndim} > 3 is not supported")
        object.__setattr__(self, "real_part", re)
        object.__setattr__(self, "imag_part", im)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.real_part.shape

    @property
    def size(self) -> int:
        return self.real_part.size

    @classmethod
    def from_complex(cls, z) -> ComplexTensor:
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    @classmethod
    def zeros(cls, shape) -> ComplexTensor:
        return cls(np.zeros(shape), np.zeros(shape))

    def to_complex(self) -> np.ndarray:
        return self.real_part + 1j * self.imag_part

    def __getitem__(self, idx) -> ComplexTensor:
        return ComplexTensor(self.real_part[idx], self.imag_part[idx])


def ct_matmul(A: ComplexTensor, B: ComplexTensor, karatsuba: bool = False) -> ComplexTensor:
    """Complex matrix product (leading batch axis allowed) from real products.

    The default path uses four real products.  ``karatsuba=True`` uses three
    at the cost of slightly different rounding.
    """
    if A.real_part.ndim < 2 or B.real_part.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeMismatch(f"cannot multiply {A.shape} by {B.shape}")
    ar, ai, br, bi = A.real_part, A.imag_part, B.real_part, B.imag_part
    if karatsuba:
        t1 = ar @ br
        t2 = ai @ bi
        t3 = (ar + ai) @ (br + bi)
        return ComplexTensor(t1 - t2, t3 - t1 - t2)
    return ComplexTensor(ar @ br - ai @ bi, ar @ bi + ai @ br)


def _ct_div(ar, ai, br, bi):
    # vectorized Smith division
    use_c = np.abs(br) >= np.abs(bi)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(use_c, bi / br, br / bi)
        den = np.where(use_c, br + bi * r, br * r + bi)
        re = np.where(use_c, ar + ai * r, ar * r + ai) / den
        im = np.where(use_c, ai - ar * r, ai * r - ar) / den
    return re, im


_ELEMENTWISE: dict[str, Callable] = {
    "add": lambda ar, ai, br, bi: (ar + br, ai + bi),
    "sub": lambda ar, ai, br, bi: (ar - br, ai - bi),
    "mul": lambda ar, ai, br, bi: (ar * br - ai * bi, ar * bi + ai * br),
    "div": _ct_div,
}


def ct_elementwise(op: str, A: ComplexTensor, B: ComplexTensor) -> ComplexTensor:
    """Shape-preserving elementwise ``add``, ``sub``, ``mul`` or ``div``."""
    if A.shape != B.shape:
        raise ShapeMismatch(f"elementwise {op}: {A.shape} vs {B.shape}")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    re, im = fn(A.real_part, A.imag_part, B.real_part, B.imag_part)
    return ComplexTensor(re, im)


def ct_conj_transpose(A: ComplexTensor) -> ComplexTensor:
    """Conjugate transpose of the last two axes (a vector is treated as a row)."""
    re, im = A.real_part, A.imag_part
    if re.ndim == 1:
        re, im = re[None, :], im[None, :]
    return ComplexTensor(np.swapaxes(re, -1, -2).copy(), -np.swapaxes(im, -1, -2))
