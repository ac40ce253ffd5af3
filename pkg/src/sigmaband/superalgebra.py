"""Finite Grassmann algebra, Berezin integration and 2+2 supermatrices.

Elements are sparse maps from generator bitmasks to coefficients.  A monomial
with mask ``m`` stands for the product of the generators whose bits are set,
taken in ascending generator order.  Coefficients may be complex scalars or
numpy arrays sharing one broadcastable shape; in the latter case one element
carries a whole batch of (for example) quadrature nodes and every algebraic
operation is applied node-wise.

Berezin integration follows ``int g dg = 1`` and ``int 1 dg = 0`` with
differentials anticommuting with everything.  A measure written
``dg_a dg_b ...`` is passed as ``order=(a, b, ...)``: the leftmost differential
sits next to the integrand and is integrated first.  With this convention

    int exp(-sum_jk A_jk psibar_j psi_k) prod_j dpsibar_j dpsi_j = det A.
"""

from __future__ import annotations

from functools import lru_cache
from math import factorial
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GrassmannAlgebra",
    "GrassmannElement",
    "SuperMatrix",
    "AlgebraMismatchError",
    "ParityError",
    "SingularElementError",
    "multiply",
    "exp_even",
    "even_inverse",
    "berezin",
    "gaussian_grassmann",
    "bosonization_rhs",
    "supertrace",
    "sdet",
]

MAX_GENERATORS = 32


class AlgebraMismatchError(ValueError):
    """Operands belong to different Grassmann algebras."""


class ParityError(ValueError):
    """Operation requires an element of definite (even) parity."""


class SingularElementError(ZeroDivisionError):
    """Inverse requested for an element whose body vanishes."""


@lru_cache(maxsize=None)
def _popcount(m: int) -> int:
    return bin(m).count("1")


@lru_cache(maxsize=1 << 16)
def _product_sign(a: int, b: int) -> int:
    # Each generator of b moves left past the generators of a that exceed it.
    swaps = 0
    bb = b
    while bb:
        low = bb & -bb
        swaps += _popcount(a & ~((low << 1) - 1))
        bb ^= low
    return -1 if swaps & 1 else 1


def _is_zero(c) -> bool:
    if isinstance(c, np.ndarray):
        return not np.any(c)
    return c == 0


class GrassmannAlgebra:
    """Grassmann algebra on ``num_generators`` ordered generators.

    Parameters
    ----------
    num_generators : int
        Number of anticommuting generators, at most 32.
    names : sequence of str, optional
        Labels used when printing elements.
    """

    def __init__(self, num_generators: int, names: Sequence[str] | None = None):
        if not 0 <= num_generators <= MAX_GENERATORS:
            raise ValueError(f"num_generators must lie in [0, {MAX_GENERATORS}]")
        self.num_generators = int(num_generators)
        if names is None:
            names = [f"g{i}" for i in range(num_generators)]
        if len(names) != num_generators:
            raise ValueError("names must have one label per generator")
        self.names = tuple(names)
        self.top_mask = (1 << num_generators) - 1

    def __repr__(self):
        return f"GrassmannAlgebra({self.num_generators})"

    def generator(self, i: int) -> "GrassmannElement":
        if not 0 <= i < self.num_generators:
            raise IndexError(f"generator index {i} out of range")
        return GrassmannElement(self, {1 << i: 1.0 + 0j})

    def generators(self) -> list["GrassmannElement"]:
        return [self.generator(i) for i in range(self.num_generators)]

    def scalar(self, value) -> "GrassmannElement":
        return GrassmannElement(self, {0: value})

    def zero(self) -> "GrassmannElement":
        return GrassmannElement(self, {})

    def one(self) -> "GrassmannElement":
        return self.scalar(1.0 + 0j)

    def monomial(self, gens: Iterable[int], coeff=1.0 + 0j) -> "GrassmannElement":
        """Return ``coeff * g_{i1} g_{i2} ...`` for generators in the given order."""
        out = self.scalar(coeff)
        for i in gens:
            out = out * self.generator(i)
        return out


class GrassmannElement:
    """Sparse element of a :class:`GrassmannAlgebra`."""

    __slots__ = ("algebra", "terms")
    __array_priority__ = 1000  # keep numpy from broadcasting over us

    def __init__(self, algebra: GrassmannAlgebra, terms: dict | None = None):
        self.algebra = algebra
        self.terms = {} if terms is None else terms

    # -- structure -----------------------------------------------------
    def __repr__(self):
        if not self.terms:
            return "0"
        parts = []
        for mask in sorted(self.terms, key=lambda m: (_popcount(m), m)):
            c = self.terms[mask]
            gens = [self.algebra.names[i] for i in range(self.algebra.num_generators) if mask >> i & 1]
            coeff = c if not isinstance(c, np.ndarray) else f"<array{c.shape}>"
            parts.append(f"({coeff})" + ("*" + "*".join(gens) if gens else ""))
        return " + ".join(parts)

    @property
    def body(self):
        return self.terms.get(0, 0.0)

    @property
    def soul(self) -> "GrassmannElement":
        return GrassmannElement(self.algebra, {m: c for m, c in self.terms.items() if m})

    def coefficient(self, gens: Iterable[int] | int):
        """Coefficient of the monomial with the given generators (ascending order)."""
        mask = gens if isinstance(gens, int) else sum(1 << g for g in set(gens))
        return self.terms.get(mask, 0.0)

    def parity(self) -> int | None:
        """0 for even, 1 for odd, ``None`` for mixed parity (zero counts as even)."""
        parities = {_popcount(m) & 1 for m, c in self.terms.items() if not _is_zero(c)}
        if not parities:
            return 0
        return parities.pop() if len(parities) == 1 else None

    def is_even(self) -> bool:
        return self.parity() == 0

    def max_abs_coefficient(self, odd_only: bool = False) -> float:
        vals = [np.max(np.abs(c)) for m, c in self.terms.items() if not odd_only or _popcount(m) & 1]
        return float(max(vals)) if vals else 0.0

    def copy(self) -> "GrassmannElement":
        return GrassmannElement(self.algebra, dict(self.terms))

    def map_coefficients(self, fn) -> "GrassmannElement":
        return GrassmannElement(self.algebra, {m: fn(c) for m, c in self.terms.items()})

    # -- arithmetic ----------------------------------------------------
    def _coerce(self, other) -> "GrassmannElement":
        if isinstance(other, GrassmannElement):
            if other.algebra is not self.algebra:
                raise AlgebraMismatchError("elements belong to different algebras")
            return other
        return GrassmannElement(self.algebra, {0: other})

    def __add__(self, other):
        other = self._coerce(other)
        terms = dict(self.terms)
        for m, c in other.terms.items():
            terms[m] = terms[m] + c if m in terms else c
        return GrassmannElement(self.algebra, terms)

    __radd__ = __add__

    def __neg__(self):
        return GrassmannElement(self.algebra, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if isinstance(other, GrassmannElement):
            return multiply(self, other)
        return GrassmannElement(self.algebra, {m: c * other for m, c in self.terms.items()})

    def __rmul__(self, other):
        if isinstance(other, GrassmannElement):
            return multiply(other, self)
        return GrassmannElement(self.algebra, {m: other * c for m, c in self.terms.items()})

    def __truediv__(self, other):
        if isinstance(other, GrassmannElement):
            return multiply(self, even_inverse(other))
        return GrassmannElement(self.algebra, {m: c / other for m, c in self.terms.items()})

    def __rtruediv__(self, other):
        return multiply(self._coerce(other), even_inverse(self))

    def __pow__(self, k: int):
        if k < 0:
            return even_inverse(self) ** (-k)
        out = self.algebra.one()
        for _ in range(k):
            out = out * self
        return out


def multiply(a: GrassmannElement, b: GrassmannElement) -> GrassmannElement:
    """Product ``a b`` with signs from reordering into canonical order."""
    if a.algebra is not b.algebra:
        raise AlgebraMismatchError("elements belong to different algebras")
    terms: dict = {}
    for ma, ca in a.terms.items():
        for mb, cb in b.terms.items():
            if ma & mb:
                continue
            c = ca * cb
            if _product_sign(ma, mb) < 0:
                c = -c
            m = ma | mb
            if m in terms:
                terms[m] = terms[m] + c
            else:
                terms[m] = c
    return GrassmannElement(a.algebra, terms)


def _require_even(a: GrassmannElement, what: str):
    if a.parity() != 0:
        raise ParityError(f"{what} requires an even element")


def exp_even(a: GrassmannElement) -> GrassmannElement:
    """Exponential of an even element; the soul series terminates."""
    _require_even(a, "exp_even")
    soul = a.soul
    out = a.algebra.one()
    power = a.algebra.one()
    k = 0
    while True:
        k += 1
        power = power * soul
        if not power.terms:
            break
        out = out + power * (1.0 / factorial(k))
    return out * np.exp(a.body)


def even_inverse(a: GrassmannElement) -> GrassmannElement:
    """Inverse ``body^-1 sum_k (-soul/body)^k`` of an even element."""
    _require_even(a, "even_inverse")
    body = a.body
    if np.any(np.asarray(body) == 0):
        raise SingularElementError("element has vanishing body")
    inv_body = 1.0 / body
    step = a.soul * (-inv_body)
    out = a.algebra.one()
    power = a.algebra.one()
    while True:
        power = power * step
        if not power.terms:
            break
        out = out + power
    return out * inv_body


def even_log(a: GrassmannElement) -> GrassmannElement:
    """Logarithm of an even element with nonzero body (principal branch on the body)."""
    _require_even(a, "even_log")
    body = a.body
    if np.any(np.asarray(body) == 0):
        raise SingularElementError("element has vanishing body")
    x = a.soul * (1.0 / body)
    out = a.algebra.zero()
    power = a.algebra.one()
    k = 0
    while True:
        k += 1
        power = power * x
        if not power.terms:
            break
        out = out + power * ((-1) ** (k + 1) / k)
    return out + np.log(body + 0j)


def berezin(a: GrassmannElement, order: Sequence[int]) -> GrassmannElement:
    """Repeated Berezin integral ``int a dg_{order[0]} dg_{order[1]} ...``.

    The first entry of ``order`` is the differential adjacent to the integrand
    and is integrated first.
    """
    if len(set(order)) != len(order):
        raise ValueError("integration generators must be distinct")
    terms = a.terms
    for g in order:
        bit = 1 << g
        new: dict = {}
        for m, c in terms.items():
            if not m & bit:
                continue
            # move g to the right end, then int g dg = 1
            if _popcount(m >> (g + 1)) & 1:
                c = -c
            new[m ^ bit] = c
        terms = new
    return GrassmannElement(a.algebra, terms)


def gaussian_grassmann(A) -> complex:
    """``int exp(-sum A_jk psibar_j psi_k) prod dpsibar_j dpsi_j`` via the engine."""
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    k = A.shape[0]
    alg = GrassmannAlgebra(2 * k, [f"{p}{j}" for j in range(k) for p in ("pb", "p")])
    psibar = [alg.generator(2 * j) for j in range(k)]
    psi = [alg.generator(2 * j + 1) for j in range(k)]
    action = alg.zero()
    for j in range(k):
        for l in range(k):
            if A[j, l] != 0:
                action = action - A[j, l] * (psibar[j] * psi[l])
    order = [g for j in range(k) for g in (2 * j, 2 * j + 1)]
    return complex(berezin(exp_even(action), order).body)


def bosonization_rhs(F, p: int, nodes: int = 48) -> complex:
    """``pi^{2p-1}/((p-1)!(p-2)!) int_{B>0} F(B) det^{p-2} B dB`` over 2x2 Hermitian ``B``.

    Equals ``int F(phibar phi) dPhi`` over ``2 x p`` complex ``phi`` for ``p >= 2``.
    ``F`` takes batched ``(2, 2, ...)`` Hermitian matrices and must decay like
    ``exp(-c tr B)``, ``c`` of order one.  The diagonal entries use
    Gauss-Laguerre nodes, ``B_12 = r e^{i a}`` with ``r^2 < B_11 B_22`` a
    Gauss-Legendre rule in ``r^2`` and the trapezoid rule in ``a``.
    """
    if p < 2:
        raise ValueError("p must be at least 2")
    xl, wl = np.polynomial.laguerre.laggauss(nodes)
    wl = wl * np.exp(xl)
    gl, wg = np.polynomial.legendre.leggauss(nodes)
    na = max(8, nodes // 2)
    ang = 2 * np.pi * np.arange(na) / na
    b11, b22, s, a = np.meshgrid(xl, xl, 0.5 * (gl + 1), ang, indexing="ij")
    w = (wl[:, None, None, None] * wl[None, :, None, None]
         * (0.5 * wg)[None, None, :, None] * (2 * np.pi / na))
    rmax2 = b11 * b22
    r = np.sqrt(s * rmax2)
    # dRe dIm B12 = r dr da = (1/2) d(r^2) da = (1/2) rmax2 ds da
    jac = 0.5 * rmax2
    b12 = r * np.exp(1j * a)
    B = np.array([[b11 + 0j, b12], [b12.conj(), b22 + 0j]])
    det = b11 * b22 - r * r
    val = np.sum(w * jac * F(B) * det ** (p - 2))
    return complex(np.pi ** (2 * p - 1) / (factorial(p - 1) * factorial(p - 2)) * val)


# ---------------------------------------------------------------------------
# supermatrices
# ---------------------------------------------------------------------------


class SuperMatrix:
    """4x4 matrix of Grassmann elements with 2x2 blocks ``[[A, sigma], [eta, B]]``.

    Rows/columns 0-1 form the first sector and 2-3 the second.  ``Str`` and
    ``Sdet`` follow ``Str = Tr B - Tr A`` and
    ``Sdet = det(B - eta A^-1 sigma) / det A``.
    """

    size = 4

    def __init__(self, algebra: GrassmannAlgebra, entries):
        self.algebra = algebra
        rows = []
        for row in entries:
            if len(row) != 4:
                raise ValueError("supermatrix rows must have 4 entries")
            rows.append([e if isinstance(e, GrassmannElement) else algebra.scalar(e) for e in row])
        if len(rows) != 4:
            raise ValueError("supermatrix must have 4 rows")
        self.entries = rows

    @classmethod
    def from_blocks(cls, algebra, A, sigma, eta, B) -> "SuperMatrix":
        rows = [list(A[0]) + list(sigma[0]), list(A[1]) + list(sigma[1]),
                list(eta[0]) + list(B[0]), list(eta[1]) + list(B[1])]
        return cls(algebra, rows)

    @classmethod
    def from_array(cls, algebra, array) -> "SuperMatrix":
        """Lift a numeric 4x4 array (or ``(4, 4, *batch)`` array) to body-only entries."""
        arr = np.asarray(array)
        return cls(algebra, [[algebra.scalar(arr[i, j]) for j in range(4)] for i in range(4)])

    @classmethod
    def identity(cls, algebra) -> "SuperMatrix":
        return cls.from_array(algebra, np.eye(4, dtype=complex))

    def __getitem__(self, idx):
        i, j = idx
        return self.entries[i][j]

    def block(self, name: str):
        r, c = {"A": (0, 0), "sigma": (0, 2), "eta": (2, 0), "B": (2, 2)}[name]
        return [[self.entries[r + i][c + j] for j in range(2)] for i in range(2)]

    def body(self) -> np.ndarray:
        return np.array([[np.asarray(e.body) for e in row] for row in self.entries])

    def __add__(self, other):
        if isinstance(other, SuperMatrix):
            return SuperMatrix(self.algebra, [[a + b for a, b in zip(ra, rb)]
                                              for ra, rb in zip(self.entries, other.entries)])
        # scalar times identity
        return SuperMatrix(self.algebra, [[e + other if i == j else e for j, e in enumerate(row)]
                                          for i, row in enumerate(self.entries)])

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * other if isinstance(other, SuperMatrix) else self + (-other)

    def __rmul__(self, scalar):
        return SuperMatrix(self.algebra, [[scalar * e for e in row] for row in self.entries])

    def __mul__(self, scalar):
        return self.__rmul__(scalar)

    def __matmul__(self, other: "SuperMatrix") -> "SuperMatrix":
        out = []
        for i in range(4):
            row = []
            for j in range(4):
                acc = self.algebra.zero()
                for k in range(4):
                    acc = acc + self.entries[i][k] * other.entries[k][j]
                row.append(acc)
            out.append(row)
        return SuperMatrix(self.algebra, out)

    def is_even(self) -> bool:
        """Diagonal blocks even, off-diagonal blocks odd (zero entries qualify)."""
        for i in range(4):
            for j in range(4):
                e = self.entries[i][j]
                if not e.terms or all(_is_zero(c) for c in e.terms.values()):
                    continue
                if e.parity() != (0 if (i < 2) == (j < 2) else 1):
                    return False
        return True

    def supertrace(self) -> GrassmannElement:
        return supertrace(self)

    def sdet(self) -> GrassmannElement:
        return sdet(self)


def _det2(m):
    return m[0][0] * m[1][1] - m[0][1] * m[1][0]


def _inv2(m):
    inv_det = even_inverse(_det2(m))
    return [[m[1][1] * inv_det, -m[0][1] * inv_det],
            [-m[1][0] * inv_det, m[0][0] * inv_det]]


def _mat2_mul(x, y):
    return [[x[i][0] * y[0][j] + x[i][1] * y[1][j] for j in range(2)] for i in range(2)]


def supertrace(M: SuperMatrix) -> GrassmannElement:
    """``Tr B - Tr A``."""
    e = M.entries
    return (e[2][2] + e[3][3]) - (e[0][0] + e[1][1])


def sdet(M: SuperMatrix) -> GrassmannElement:
    """``det(B - eta A^-1 sigma) / det A`` computed with engine arithmetic."""
    A, sig, eta, B = M.block("A"), M.block("sigma"), M.block("eta"), M.block("B")
    det_a = _det2(A)
    if np.any(np.asarray(det_a.body) == 0):
        raise SingularElementError("A-block of supermatrix has singular body")
    corr = _mat2_mul(_mat2_mul(eta, _inv2(A)), sig)
    X = [[B[i][j] - corr[i][j] for j in range(2)] for i in range(2)]
    return _det2(X) * even_inverse(det_a)
