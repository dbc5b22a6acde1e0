"""Complex arithmetic on the tape as pairs of real variables.

No Wirtinger calculus: the real and imaginary planes are independent real
variables and every complex op expands into real tape ops.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .complex_core import ComplexTensor


class CVar(NamedTuple):
    re: ad.Variable
    im: ad.Variable

    @property
    def shape(self):
        return self.re.shape

    @property
    def value(self) -> ComplexTensor:
        re, im = np.broadcast_arrays(self.re.value, self.im.value)
        return ComplexTensor(re.copy(), im.copy())


def from_tensor(tape: ad.Tape, z: ComplexTensor, requires_grad: bool = False) -> CVar:
    return CVar(tape.leaf(z.real_part, requires_grad), tape.leaf(z.imag_part, requires_grad))


def cadd(x: CVar, y: CVar) -> CVar:
    return CVar(x.re + y.re, x.im + y.im)


def cmul(x: CVar, y: CVar) -> CVar:
    return CVar(x.re * y.re - x.im * y.im, x.re * y.im + x.im * y.re)


def cdiv(num: CVar, den: CVar, pole_eps: float = 0.0) -> CVar:
    """``num / den`` via ``num * conj(den) / |den|^2``.

    ``|den|^2`` is clamped below at ``pole_eps`` (0 disables the guard).
    """
    mag2 = den.re * den.re + den.im * den.im
    if pole_eps > 0.0:
        mag2 = ad.clamp_min(mag2, pole_eps)
    re = num.re * den.re + num.im * den.im
    im = num.im * den.re - num.re * den.im
    return CVar(re / mag2, im / mag2)


def cmatmul(x: CVar, y: CVar) -> CVar:
    """Four real products."""
    return CVar(x.re @ y.re - x.im @ y.im, x.re @ y.im + x.im @ y.re)


def cslice(x: CVar, start: int, stop: int) -> CVar:
    return CVar(ad.slice_(x.re, start, stop), ad.slice_(x.im, start, stop))


def collapse(x: CVar) -> ad.Variable:
    """Real output ``re + im`` of a complex activation."""
    return x.re + x.im
