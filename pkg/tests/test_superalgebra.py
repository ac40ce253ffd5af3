import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sigmaband.superalgebra import (AlgebraMismatchError, GrassmannAlgebra, ParityError,
                                    SingularElementError, SuperMatrix, berezin,
                                    bosonization_rhs, even_inverse, even_log, exp_even,
                                    gaussian_grassmann, multiply, sdet, supertrace)

# ---------------------------------------------------------------------------
# helpers: an independent monomial-list oracle and random elements
# ---------------------------------------------------------------------------


def _sort_sign(seq):
    """Sign of the permutation sorting ``seq`` (distinct entries), by inversion count."""
    inv = sum(1 for i in range(len(seq)) for j in range(i + 1, len(seq)) if seq[i] > seq[j])
    return -1 if inv % 2 else 1


def brute_product(a: dict, b: dict) -> dict:
    """Multiply dicts {tuple(sorted generators): coeff} by explicit reordering."""
    out = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            word = list(ma) + list(mb)
            if len(set(word)) < len(word):
                continue
            key = tuple(sorted(word))
            out[key] = out.get(key, 0) + _sort_sign(word) * ca * cb
    return out


def as_tuples(el) -> dict:
    m = el.algebra.num_generators
    return {tuple(i for i in range(m) if mask >> i & 1): c for mask, c in el.terms.items()}


def from_tuples(alg, d):
    out = alg.zero()
    for gens, c in d.items():
        out = out + alg.monomial(gens, c)
    return out


def random_element(alg, rng, max_degree=None, parity=None, body=None):
    m = alg.num_generators
    out = alg.zero()
    for k in range(0, m + 1):
        if max_degree is not None and k > max_degree:
            break
        if parity is not None and k % 2 != parity:
            continue
        for gens in itertools.combinations(range(m), k):
            c = complex(rng.normal(), rng.normal())
            if k == 0 and body is not None:
                c = body
            out = out + alg.monomial(gens, c)
    return out


def close(a, b, tol=1e-12):
    diff = a - b
    return all(abs(c) <= tol * max(1.0, a.max_abs_coefficient(), b.max_abs_coefficient())
               for c in diff.terms.values())


def random_supermatrix(alg, rng, body_scale=1.0, body_shift=None):
    rows = []
    for i in range(4):
        row = []
        for j in range(4):
            even = (i < 2) == (j < 2)
            el = random_element(alg, rng, parity=0 if even else 1) * 0.3
            if even:
                b = body_scale * complex(rng.normal(), rng.normal())
                if body_shift is not None and i == j:
                    b += body_shift
                el = el - el.body + b
            row.append(el)
        rows.append(row)
    return SuperMatrix(alg, rows)


# ---------------------------------------------------------------------------
# multiply
# ---------------------------------------------------------------------------


def test_anticommutation_of_generators():
    alg = GrassmannAlgebra(4)
    g = alg.generators()
    assert as_tuples(g[0] * g[1]) == {(0, 1): 1}
    assert as_tuples(g[1] * g[0]) == {(0, 1): -1}
    for i, j in itertools.product(range(4), repeat=2):
        s = multiply(g[i], g[j]) + multiply(g[j], g[i])
        assert all(c == 0 for c in s.terms.values())
        assert not multiply(g[i], g[i]).terms


def test_nilpotent_square_example():
    alg = GrassmannAlgebra(2)
    a = alg.one() + alg.monomial((0, 1))
    assert as_tuples(a * a) == {(): 1, (0, 1): 2}


@given(st.integers(0, 2**32 - 1))
def test_multiply_matches_explicit_reordering(seed):
    rng = np.random.default_rng(seed)
    alg = GrassmannAlgebra(4)
    a = random_element(alg, rng, max_degree=2)
    b = random_element(alg, rng, max_degree=2)
    expect = brute_product(as_tuples(a), as_tuples(b))
    got = as_tuples(multiply(a, b))
    for key in set(expect) | set(got):
        assert abs(expect.get(key, 0) - got.get(key, 0)) < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_associativity_and_distributivity(seed):
    rng = np.random.default_rng(seed)
    alg = GrassmannAlgebra(5)
    a, b, c = (random_element(alg, rng, max_degree=3) for _ in range(3))
    assert close((a * b) * c, a * (b * c))
    assert close(a * (b + c), a * b + a * c)
    assert close((a + b) * c, a * c + b * c)


def test_mismatched_algebras_rejected():
    with pytest.raises(AlgebraMismatchError):
        multiply(GrassmannAlgebra(2).generator(0), GrassmannAlgebra(2).generator(0))


# ---------------------------------------------------------------------------
# exp, inverse, log
# ---------------------------------------------------------------------------


def test_exp_even_examples():
    alg = GrassmannAlgebra(4)
    assert abs(exp_even(alg.scalar(0.7 + 0.2j)).body - np.exp(0.7 + 0.2j)) < 1e-15
    lam = 2.5
    assert as_tuples(exp_even(alg.monomial((0, 1), lam))) == {(): 1, (0, 1): lam}
    a = alg.monomial((0, 1)) + alg.monomial((2, 3))
    assert as_tuples(exp_even(a)) == {(): 1, (0, 1): 1, (2, 3): 1, (0, 1, 2, 3): 1}


def test_exp_even_rejects_odd():
    with pytest.raises(ParityError):
        exp_even(GrassmannAlgebra(2).generator(0))


def test_even_inverse_examples():
    alg = GrassmannAlgebra(2)
    assert even_inverse(alg.scalar(2.0)).body == 0.5
    assert as_tuples(even_inverse(alg.one() + alg.monomial((0, 1)))) == {(): 1, (0, 1): -1}
    with pytest.raises(SingularElementError):
        even_inverse(alg.monomial((0, 1)))


@given(st.integers(0, 2**32 - 1))
def test_even_inverse_is_exact_inverse(seed):
    rng = np.random.default_rng(seed)
    alg = GrassmannAlgebra(6)
    a = random_element(alg, rng, parity=0, body=1.7)
    assert close(a * even_inverse(a), alg.one(), 1e-12)


@given(st.integers(0, 2**32 - 1))
def test_exp_log_roundtrip(seed):
    rng = np.random.default_rng(seed)
    alg = GrassmannAlgebra(4)
    a = random_element(alg, rng, parity=0, body=0.3 + 0.2j)
    assert close(exp_even(even_log(exp_even(a))), exp_even(a))


# ---------------------------------------------------------------------------
# Berezin integration and Gaussian integrals
# ---------------------------------------------------------------------------


def test_berezin_single_generator():
    alg = GrassmannAlgebra(1)
    assert berezin(alg.generator(0), [0]).body == 1
    assert not berezin(alg.one(), [0]).terms


def test_berezin_gaussian_diag_example():
    alg = GrassmannAlgebra(4)
    pb = [alg.generator(0), alg.generator(2)]
    p = [alg.generator(1), alg.generator(3)]
    action = -(2.0 * pb[0] * p[0] + 3.0 * pb[1] * p[1])
    assert abs(berezin(exp_even(action), [0, 1, 2, 3]).body - 6) < 1e-14


def test_berezin_rejects_repeated_generators():
    with pytest.raises(ValueError):
        berezin(GrassmannAlgebra(2).one(), [0, 0])


def test_gaussian_grassmann_small_cases():
    assert abs(gaussian_grassmann([[3.0 + 1j]]) - (3 + 1j)) < 1e-15
    assert abs(gaussian_grassmann(np.diag([2.0, 3.0])) - 6) < 1e-14


def test_gaussian_grassmann_equals_determinant_on_fifty_matrices():
    rng = np.random.default_rng(7)
    for i in range(50):
        k = 1 + i % 5
        A = rng.normal(size=(k, k)) + 1j * rng.normal(size=(k, k))
        d = np.linalg.det(A)
        assert abs(gaussian_grassmann(A) - d) <= 1e-12 * abs(d)


# ---------------------------------------------------------------------------
# supermatrices
# ---------------------------------------------------------------------------


def test_supertrace_examples():
    alg = GrassmannAlgebra(4)
    assert supertrace(SuperMatrix.identity(alg)).body == 0
    assert supertrace(SuperMatrix.from_array(alg, np.diag([1, 1, 2, 2]))).body == 2
    curly_l = SuperMatrix.from_array(alg, np.diag([1, 1, -1, -1]))
    assert supertrace(curly_l).body == -4


def test_sdet_examples():
    alg = GrassmannAlgebra(4)
    assert abs(sdet(SuperMatrix.identity(alg)).body - 1) < 1e-15
    assert abs(sdet(SuperMatrix.from_array(alg, np.diag([2, 2, 3, 3]))).body - 9 / 4) < 1e-15
    with pytest.raises(SingularElementError):
        sdet(SuperMatrix.from_array(alg, np.diag([0, 1, 1, 1])))


@given(st.integers(0, 2**32 - 1))
def test_supertrace_cyclicity(seed):
    rng = np.random.default_rng(seed)
    alg = GrassmannAlgebra(4)
    m1, m2 = random_supermatrix(alg, rng), random_supermatrix(alg, rng)
    assert m1.is_even() and m2.is_even()
    assert close(supertrace(m1 @ m2), supertrace(m2 @ m1))


@given(st.integers(0, 2**32 - 1))
def test_sdet_multiplicative(seed):
    rng = np.random.default_rng(seed)
    alg = GrassmannAlgebra(4)
    m1 = random_supermatrix(alg, rng, 0.3, body_shift=2.0)
    m2 = random_supermatrix(alg, rng, 0.3, body_shift=-1.5)
    assert close(sdet(m1 @ m2), sdet(m1) * sdet(m2), 1e-10)


def _series(M, coeffs):
    alg = M.algebra
    out = SuperMatrix.from_array(alg, np.zeros((4, 4)))
    power = SuperMatrix.identity(alg)
    for c in coeffs:
        out = out + c * power
        power = power @ M
    return out


@given(st.integers(0, 2**32 - 1))
def test_sdet_of_exponential_is_exp_of_supertrace(seed):
    rng = np.random.default_rng(seed)
    alg = GrassmannAlgebra(4)
    M = random_supermatrix(alg, rng, 0.2)
    expM = _series(M, [1 / math.factorial(k) for k in range(30)])
    assert close(sdet(expM), exp_even(supertrace(M)), 1e-10)


@given(st.integers(0, 2**32 - 1))
def test_sdet_equals_exp_supertrace_log(seed):
    rng = np.random.default_rng(seed)
    alg = GrassmannAlgebra(4)
    X = random_supermatrix(alg, rng, 0.1)
    M = X + 1.0
    logM = _series(X, [0.0] + [(-1) ** (k + 1) / k for k in range(1, 40)])
    assert close(sdet(M), exp_even(supertrace(logM)), 1e-10)


# ---------------------------------------------------------------------------
# bosonization right-hand side
# ---------------------------------------------------------------------------


def _trace(B):
    return np.einsum("ii...->...", B).real


def test_bosonization_gaussian_p2_gives_pi4():
    rhs = bosonization_rhs(lambda B: np.exp(-_trace(B)), 2)
    assert abs(rhs - math.pi**4) <= 1e-6 * math.pi**4


def test_bosonization_anisotropic_gaussian():
    # int exp(-sum_k a_k |phi_k|^2) over 2 x p complex phi = pi^{2p} / (a1 a2)^p
    a1, a2, p = 2.0, 0.5, 3

    def F(B):
        return np.exp(-(a1 * B[0, 0] + a2 * B[1, 1]).real)

    rhs = bosonization_rhs(F, p)
    exact = math.pi ** (2 * p) / (a1 * a2) ** p
    assert abs(rhs - exact) <= 1e-8 * exact


def test_bosonization_requires_p_at_least_two():
    with pytest.raises(ValueError):
        bosonization_rhs(lambda B: _trace(B), 1)
