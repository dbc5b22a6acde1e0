import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobius_attn.complex_core import (INF, OVERFLOW_GUARD, ComplexTensor, ExtendedComplex, c_add, c_div,
                                      c_mul, c_sub, ct_conj_transpose, ct_elementwise, ct_matmul)
from mobius_attn.errors import IndeterminateForm, ShapeMismatch

from oracles import loop_matmul

E = ExtendedComplex
finite = st.floats(-10, 10, allow_nan=False)
points = st.builds(E, finite, finite)


def close(x: ExtendedComplex, y: ExtendedComplex, rel=1e-12):
    assert x.is_infinity == y.is_infinity
    if not x.is_infinity:
        scale = max(abs(y), 1.0)
        assert abs(x.to_complex() - y.to_complex()) <= rel * scale


class TestExtendedComplex:
    def test_infinity_canonical(self):
        z = E(3.0, -2.0, True)
        assert (z.re, z.im) == (0.0, 0.0)
        assert z == INF

    @pytest.mark.parametrize("re,im", [(math.nan, 0.0), (0.0, math.inf), (2 * OVERFLOW_GUARD, 0.0)])
    def test_rejects_nonfinite(self, re, im):
        with pytest.raises(ValueError):
            E(re, im)

    def test_coerce(self):
        assert E.coerce(1 + 2j) == E(1.0, 2.0)
        assert E.coerce(math.inf).is_infinity
        assert E.coerce(np.float64(2.5)) == E(2.5, 0.0)


class TestScalarArithmetic:
    def test_mul_example(self):
        assert c_mul(E(1, 2), E(3, -1)) == E(5, 5)

    def test_additive_identity(self):
        assert c_add(E(1.5, -2.0), E(0, 0)) == E(1.5, -2.0)

    def test_div_examples(self):
        close(c_div(E(1, 1), E(1, -1)), E(0, 1))
        assert c_div(E(5, 0), E(0, 0)).is_infinity
        assert c_div(E(5, 0), INF) == E(0, 0)

    @pytest.mark.parametrize("fn,x,y", [
        (c_mul, INF, E(0, 0)),
        (c_mul, E(0, 0), INF),
        (c_add, INF, INF),
        (c_sub, INF, INF),
        (c_div, E(0, 0), E(0, 0)),
        (c_div, INF, INF),
    ])
    def test_indeterminate(self, fn, x, y):
        with pytest.raises(IndeterminateForm):
            fn(x, y)

    def test_infinite_operand_absorbs(self):
        assert c_add(INF, E(1, 1)).is_infinity
        assert c_sub(E(1, 1), INF).is_infinity
        assert c_mul(INF, E(0, 1e-300)).is_infinity
        assert c_div(INF, E(2, 0)).is_infinity

    def test_smith_division_avoids_overflow(self):
        # naive |y|^2 would overflow for components near 1e200
        x, y = E(1e200, 1e200), E(1e200, -1e200)
        close(c_div(x, y), E(0, 1))

    def test_overflow_saturates_to_infinity(self):
        assert c_mul(E(1e200, 0), E(1e200, 0)).is_infinity

    def test_operators(self):
        z = E(1, 2)
        assert z + 1 == E(2, 2)
        assert 2 * z == E(2, 4)
        close(z / z, E(1, 0))
        assert -INF == INF


class TestFieldLaws:
    @settings(max_examples=200, deadline=None)
    @given(points, points, points)
    def test_associativity(self, x, y, z):
        close(c_add(c_add(x, y), z), c_add(x, c_add(y, z)))
        close(c_mul(c_mul(x, y), z), c_mul(x, c_mul(y, z)), rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(points, points)
    def test_commutativity(self, x, y):
        assert c_add(x, y) == c_add(y, x)
        assert c_mul(x, y) == c_mul(y, x)

    @settings(max_examples=200, deadline=None)
    @given(points, points, points)
    def test_distributivity(self, x, y, z):
        # relative to the size of the products involved, not the (possibly tiny) result
        scale = max(abs(x) * (abs(y) + abs(z)), 1.0)
        lhs = c_mul(x, c_add(y, z)).to_complex()
        rhs = c_add(c_mul(x, y), c_mul(x, z)).to_complex()
        assert abs(lhs - rhs) <= 1e-12 * scale

    @settings(max_examples=300, deadline=None)
    @given(points, points)
    def test_div_inverts_mul(self, x, y):
        if abs(y) < 1e-6:
            return
        back = c_div(c_mul(x, y), y).to_complex()
        assert abs(back - x.to_complex()) <= 1e-10 * max(abs(x), 1e-300) + 1e-300


class TestComplexTensor:
    def test_shape_invariants(self):
        with pytest.raises(ShapeMismatch):
            ComplexTensor(np.zeros((2, 3)), np.zeros((3, 2)))
        with pytest.raises(ShapeMismatch):
            ComplexTensor(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)))
        t = ComplexTensor.zeros((2, 3, 4))
        assert t.shape == (2, 3, 4) and t.size == 24

    def test_row_major(self):
        z = np.arange(6).reshape(2, 3) * (1 + 1j)
        t = ComplexTensor.from_complex(z)
        assert t.real_part.flags.c_contiguous
        assert t[1].to_complex()[2] == 5 + 5j


class TestKernels:
    def test_i_squared(self):
        i = ComplexTensor.from_complex([[1j]])
        np.testing.assert_array_equal(ct_matmul(i, i).to_complex(), [[-1]])

    def test_identity(self):
        rng = np.random.default_rng(0)
        A = ComplexTensor.from_complex(rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3)))
        np.testing.assert_array_equal(ct_matmul(A, ComplexTensor.from_complex(np.eye(3))).to_complex(),
                                      A.to_complex())

    @pytest.mark.parametrize("seed", range(5))
    def test_matmul_vs_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        for n, k, m in [(3, 3, 3), (1, 8, 1), (8, 8, 8), (5, 2, 7)]:
            A = rng.standard_normal((n, k)) + 1j * rng.standard_normal((n, k))
            B = rng.standard_normal((k, m)) + 1j * rng.standard_normal((k, m))
            got = ct_matmul(ComplexTensor.from_complex(A), ComplexTensor.from_complex(B)).to_complex()
            np.testing.assert_allclose(got, loop_matmul(A.tolist(), B.tolist()), rtol=0, atol=1e-12)

    def test_karatsuba_path_agrees(self):
        rng = np.random.default_rng(1)
        A = ComplexTensor.from_complex(rng.standard_normal((4, 5)) + 1j * rng.standard_normal((4, 5)))
        B = ComplexTensor.from_complex(rng.standard_normal((5, 2)) + 1j * rng.standard_normal((5, 2)))
        np.testing.assert_allclose(ct_matmul(A, B, karatsuba=True).to_complex(),
                                   ct_matmul(A, B).to_complex(), atol=1e-12)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ct_matmul(ComplexTensor.zeros((2, 3)), ComplexTensor.zeros((2, 3)))

    def test_conj_transpose(self):
        t = ct_conj_transpose(ComplexTensor.from_complex([[1 + 1j, 2]]))
        np.testing.assert_array_equal(t.to_complex(), [[1 - 1j], [2]])

    def test_elementwise_ones(self):
        A = ComplexTensor.from_complex([[1 + 2j, -3j], [0.5, 4 - 1j]])
        ones = ComplexTensor.from_complex(np.ones((2, 2)))
        np.testing.assert_array_equal(ct_elementwise("mul", A, ones).to_complex(), A.to_complex())

    @pytest.mark.parametrize("op,fn", [("add", lambda a, b: a + b), ("sub", lambda a, b: a - b),
                                       ("mul", lambda a, b: a * b), ("div", lambda a, b: a / b)])
    def test_elementwise_vs_scalar_oracle(self, op, fn):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        B = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        got = ct_elementwise(op, ComplexTensor.from_complex(A), ComplexTensor.from_complex(B)).to_complex()
        want = np.array([[fn(complex(A[i, j]), complex(B[i, j])) for j in range(2)] for i in range(2)])
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ct_elementwise("add", ComplexTensor.zeros((2,)), ComplexTensor.zeros((3,)))
