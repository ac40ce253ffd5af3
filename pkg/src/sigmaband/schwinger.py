"""Single-site generating function through a Schwinger parametrization.

The single-supermatrix integrand factorizes into a compact (``U``) part and a
hyperbolic (``S``) part once the Grassmann integral is done.  The only obstacle
to a non-oscillating hyperbolic quadrature is the boson-block determinant
``d(S) = -(4 gamma/c0) (tau - i s_B M11(S))`` with ``M = S sigma S^-1``, whose
zeros are crossed by the complex boost that diagonalizes ``Lambda``.  Writing
``d^-k`` as ``int lam^(k-1) e^(-lam (tau - i xi)) dlam / Gamma(k)`` removes the
pole; for each ``lam`` the remaining integrand is entire and is boosted so that
its exponent becomes real.  The ``lam`` integral is done last.

The top Berezin coefficient is derived once, symbolically, as a polynomial in
the entries of ``A0 = L + U C_F U^-1`` and ``B0 = -L + S C_B S^-1``, the
Grassmann coefficients of the exponent and ``w = 1 / det B0``.
"""
from __future__ import annotations

import math
from collections import defaultdict
from functools import lru_cache

import numpy as np

from .ensemble import SpectralParams

U_ATOMS = ("A11", "A12", "A21", "A22", "a1", "a2")
S_ATOMS = ("B11", "B12", "B21", "B22", "w", "b1", "b2")
_ATOMS = U_ATOMS + S_ATOMS
_NU = len(U_ATOMS)
_W = _NU + S_ATOMS.index("w")

_L = np.diag([1.0, -1.0]).astype(complex)
_SIGMA = np.array([[0.0, 1.0], [-1.0, 0.0]], dtype=complex)


# ---------------------------------------------------------------------------
# polynomials over the atoms, and the commutative algebra span{1, n1, n2, n1 n2}
# ---------------------------------------------------------------------------


def _p(atom: str | None = None, c: float = 1.0) -> dict:
    e = [0] * len(_ATOMS)
    if atom is not None:
        e[_ATOMS.index(atom)] = 1
    return {tuple(e): c}


def _padd(*ps: dict) -> dict:
    out: dict = defaultdict(float)
    for p in ps:
        for k, v in p.items():
            out[k] += v
    return {k: v for k, v in out.items() if v != 0}


def _pscale(p: dict, c: float) -> dict:
    return {k: v * c for k, v in p.items()}


def _pmul(p: dict, q: dict) -> dict:
    out: dict = defaultdict(float)
    for k1, v1 in p.items():
        for k2, v2 in q.items():
            out[tuple(a + b for a, b in zip(k1, k2))] += v1 * v2
    return {k: v for k, v in out.items() if v != 0}


# elements of span{1, n1, n2, n1 n2} are 4-tuples of polynomials
def _n(c0=None, c1=None, c2=None, c12=None) -> tuple:
    return tuple(x if x is not None else {} for x in (c0, c1, c2, c12))


def _nadd(*xs) -> tuple:
    return tuple(_padd(*[x[i] for x in xs]) for i in range(4))


def _nscale(x, c) -> tuple:
    return tuple(_pscale(p, c) for p in x)


def _nmul(x, y) -> tuple:
    return (_pmul(x[0], y[0]),
            _padd(_pmul(x[0], y[1]), _pmul(x[1], y[0])),
            _padd(_pmul(x[0], y[2]), _pmul(x[2], y[0])),
            _padd(_pmul(x[0], y[3]), _pmul(x[3], y[0]),
                  _pmul(x[1], y[2]), _pmul(x[2], y[1])))


@lru_cache(maxsize=1)
def top_coefficient_terms() -> tuple:
    """Top Berezin coefficient as ``((coef, u_exponents, s_exponents), ...)``.

    With ``n_l = rho_l tau_l`` the block matrix is
    ``[[A0 + 2 n^ L, 2 tau^], [2 rho^, B0 + 2 n^ L]]`` and
    ``Sdet^-1 = det(A - 4 tau^ B^-1 rho^) / det B``.  Monomials with a single
    off-diagonal pair ``rho_1 tau_2`` or ``rho_2 tau_1`` cannot reach the top
    monomial and are dropped.  The exponent contributes
    ``(1 + (a1 + b1) n1)(1 + (a2 + b2) n2)`` and the measure ``1 - 2 n1 n2``.
    """
    one = _n(_p())
    n1, n2, n12 = _n(c1=_p()), _n(c2=_p()), _n(c12=_p())
    A = {(i, j): _n(_p(f"A{i}{j}")) for i in (1, 2) for j in (1, 2)}
    B = {(i, j): _n(_p(f"B{i}{j}")) for i in (1, 2) for j in (1, 2)}
    for M in (A, B):
        M[1, 1] = _nadd(M[1, 1], _nscale(n1, 2))
        M[2, 2] = _nadd(M[2, 2], _nscale(n2, -2))

    def det2(M):
        return _nadd(_nmul(M[1, 1], M[2, 2]), _nscale(_nmul(M[1, 2], M[2, 1]), -1))

    dB = det2(B)
    w = _p("w")
    w2, w3 = _pmul(w, w), _pmul(_pmul(w, w), w)
    inv = (w, _pscale(_pmul(w2, dB[1]), -1), _pscale(_pmul(w2, dB[2]), -1),
           _padd(_pscale(_pmul(w2, dB[3]), -1), _pscale(_pmul(w3, _pmul(dB[1], dB[2])), 2)))
    b11, b22 = _nmul(B[2, 2], inv), _nmul(B[1, 1], inv)
    b12, b21 = _nscale(_nmul(B[1, 2], inv), -1), _nscale(_nmul(B[2, 1], inv), -1)
    num = _nadd(det2(A),
                _nscale(_nmul(_nmul(A[2, 2], b11), n1), 4),
                _nscale(_nmul(_nmul(A[1, 1], b22), n2), 4),
                _nscale(_nmul(_nadd(_nmul(b11, b22), _nmul(b12, b21)), n12), 16))
    sdet_inv = _nmul(num, inv)
    expo = _nmul(_nadd(one, _nmul(_n(_padd(_p("a1"), _p("b1"))), n1)),
                 _nadd(one, _nmul(_n(_padd(_p("a2"), _p("b2"))), n2)))
    measure = _nadd(one, _n(c12=_p(c=-2.0)))
    top = _nmul(_nmul(expo, sdet_inv), measure)[3]
    return tuple((v, k[:_NU], k[_NU:]) for k, v in sorted(top.items()))


# ---------------------------------------------------------------------------
# atom evaluation
# ---------------------------------------------------------------------------


def _conj(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``M X M^-1`` for batched ``M`` of shape ``(2, 2, *batch)``, unit determinant."""
    Minv = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]])
    return np.einsum("ij...,jk,kl...->il...", M, X, Minv)


def _bcast(X: np.ndarray, like: np.ndarray) -> np.ndarray:
    return X.reshape(2, 2, *([1] * (like.ndim - 2)))


def u_atoms(U: np.ndarray, lam_f: np.ndarray, c_f: np.ndarray, c0: float):
    """Compact-side atoms and body exponent ``a0 = -(c0/2) Tr L U Lam U^-1``."""
    P = _conj(U, lam_f)
    A = _bcast(_L, U) + _conj(U, c_f)
    atoms = dict(A11=A[0, 0], A12=A[0, 1], A21=A[1, 0], A22=A[1, 1],
                 a1=-c0 * P[0, 0], a2=c0 * P[1, 1])
    return atoms, -(c0 / 2) * (P[0, 0] - P[1, 1])


def s_atoms(S: np.ndarray, lam_b: np.ndarray, c_b: np.ndarray, c0: float):
    """Hyperbolic-side atoms (``w`` excluded), body exponent and ``M11``."""
    R = _conj(S, lam_b)
    B = -_bcast(_L, S) + _conj(S, c_b)
    atoms = dict(B11=B[0, 0], B12=B[0, 1], B21=B[1, 0], B22=B[1, 1],
                 b1=c0 * R[0, 0], b2=-c0 * R[1, 1])
    m11 = _conj(S, _SIGMA)[0, 0]
    return atoms, -(c0 / 2) * (R[0, 0] - R[1, 1]), m11


def _mono(vals: dict, exps, names) -> np.ndarray | float:
    r = 1.0
    for name, e in zip(names, exps):
        if e:
            r = r * vals[name] ** e
    return r


def pole_tau(E: float, gamma: float, c0: float) -> float:
    """``tau`` with ``det B0 = -(4 gamma/c0)(tau - i s_B M11)``; independent of ``E``."""
    del E
    return (1 + gamma * gamma) / (gamma * c0)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def _gauss(n: int, a: float, b: float):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def boost(angle) -> np.ndarray:
    """Complex boost ``V(a)``; ``V^-1 (k L - i y sigma) V`` is diagonal for ``a = -asin(y/|.|)``."""
    angle = np.asarray(angle, float)
    c, s = np.cos(angle / 2), np.sin(angle / 2)
    return np.array([[c, -1j * s], [-1j * s, c]])


def single_site_z(p: SpectralParams, c0: float, gamma: float, signs: tuple,
                  nodes: int = 24, angle_nodes: int = 16) -> tuple[complex, int]:
    """Single-site ``Z`` (without the ``e^{E(x1-x2)}`` prefactor) and node count.

    ``nodes`` sets the polar Gauss rule on the sphere; the hyperbolic radial
    rule uses ``5 nodes / 2`` points and the Schwinger variable ``5 nodes``.
    """
    from .sigma_model import compact_matrix, deformation_shift, hyperbolic_matrix, spectral_matrix

    lam = spectral_matrix(p.kappa, p.y1, p.y2)
    C = deformation_shift(p.E, gamma, c0, signs)
    s_b = float(np.sign(signs[1]))
    terms = top_coefficient_terms()

    # compact side: a unitary rotation makes the exponent real
    m1 = math.hypot(p.kappa, p.y1)
    phi, wphi = _gauss(nodes, 0.0, math.pi)
    psi = 2 * math.pi * np.arange(angle_nodes) / angle_nodes
    PH, PS = np.meshgrid(phi, psi, indexing="ij")
    wu = 0.5 * np.sin(PH) * wphi[:, None] / angle_nodes
    U = np.einsum("ij...,jk->ik...", compact_matrix(np.sin(PH / 2) ** 2, PS),
                  boost(math.asin(p.y1 / m1)))
    ua, a0 = u_atoms(U, lam[:2, :2], C[:2, :2], c0)
    ew = np.exp(a0) * wu
    u_int = {}
    for _, eu, _ in terms:
        if eu not in u_int:
            u_int[eu] = np.sum(_mono(ua, eu, U_ATOMS) * ew)

    # Schwinger variable: the hyperbolic exponent flattens at y_eff = 0
    tau = pole_tau(p.E, gamma, c0)
    lam0 = max(-s_b * c0 * p.y2, 0.0)
    width = c0 * p.kappa
    nl = 5 * nodes
    v, wv = _gauss(nl, math.asinh(-lam0 / width), math.asinh((60.0 / tau + lam0) / width))
    lg = lam0 + width * np.sinh(v)
    wl = wv * width * np.cosh(v) * np.exp(-lg * tau)

    # hyperbolic side for all Schwinger nodes at once
    y_eff = p.y2 + s_b * lg / c0
    m = np.hypot(p.kappa, y_eff)
    nt = (5 * nodes) // 2
    tx, tw = np.polynomial.legendre.leggauss(nt)
    tmax = np.arccosh(1 + 45.0 / (c0 * m))
    t = 0.5 * tmax[:, None] * (tx[None, :] + 1)
    wt = 0.5 * tmax[:, None] * tw[None, :] * 0.5 * np.sinh(t)
    th = 2 * math.pi * np.arange(angle_nodes) / angle_nodes
    T = np.broadcast_to(t[:, :, None], (nl, nt, angle_nodes))
    TH = np.broadcast_to(th[None, None, :], T.shape)
    S = hyperbolic_matrix(np.sinh(T / 2) ** 2, TH)
    V = boost(np.arcsin(y_eff / m))[:, :, :, None, None]
    S = np.einsum("ij...,jk...->ik...", S, V)
    sa, b0, m11 = s_atoms(S, lam[2:, 2:], C[2:, 2:], c0)
    es = np.exp(b0 + 1j * lg[:, None, None] * s_b * m11) * (wt[:, :, None] / angle_nodes)
    s_int = {}
    pref = -c0 / (4 * gamma)
    total = 0j
    for coef, eu, ek in terms:
        k = ek[_W - _NU]
        key = ek[:_W - _NU] + (0,) + ek[_W - _NU + 1:]
        if key not in s_int:
            s_int[key] = np.sum(_mono(sa, key, S_ATOMS) * es, axis=(1, 2))
        if k == 0:
            raise AssertionError("pole-free term in the top coefficient")
        lam_int = np.sum(wl * lg ** (k - 1) * s_int[key]) / math.gamma(k)
        total += coef * u_int[eu] * lam_int * pref ** k
    n_pts = wu.size + T.size
    return complex(total), n_pts
