"""Transfer-operator representation of the sigma-model chain.

After rotating the spectral matrix to ``diag(k1 L, k2 L)`` the chain integral
becomes a pairing ``(M^{n-1} f, g)`` of graded (4-component) functions on the
zero Fourier mode ``(u, x)``, ``u = |U_12|^2``, ``x = |S_12|^2``:

* ``F`` is multiplication by ``F (1 F1 F1 F1^2; 0 1 0 F1; 0 0 1 F1; 0 0 0 1)``
  in the basis ``e1 = 1, e2 = n1, e3 = n2, e4 = n1 n2``;
* ``M = F K F`` with ``K = K_U (x) K_S`` acting on every component (the
  off-diagonal kernel corrections of order ``1/beta_tilde`` are omitted);
* ``f = F (e4 - e1)`` carries the far end of the chain and
  ``g = F^T (c1, c2, c3, c4 - c1)`` the boundary factor ``D1`` of site 1,
  averaged over the angles ``psi`` and ``theta``.

The hyperbolic contour move behind the rotation is legitimate only in the
orientation where it crosses no zero of the boson-block determinant (see
:func:`sigmaband.sigma_model.check_rotation_admissible`); the values produced
here are therefore compared with the single-site route at
``deformation_signs=MIRROR_SIGNS``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import ive

from .ensemble import SpectralParams
from .sigma_model import (CosetPoint, _assemble, compact_matrix, deformation_shift,
                          hyperbolic_matrix, rotation_matrix, saddle_constants)
from .superalgebra import GrassmannAlgebra, GrassmannElement, even_inverse, sdet

__all__ = [
    "RotatedParams",
    "TransferGrid",
    "GradedOperator",
    "THETA_CONSTANTS",
    "TRANSFER_SIGNS",
    "MIRROR_SIGNS",
    "f_weights",
    "rotated_blocks",
    "d1_factor",
    "d1_closed_form",
    "d1_coefficients",
    "det_b_closed_form",
    "det_a_closed_form",
    "theta_average",
    "fit_theta_constants",
    "relative_v_compact",
    "relative_v_hyperbolic",
    "validate_relative_v",
    "kernel_ku",
    "kernel_ks",
    "build_fhat",
    "build_kernel",
    "build_transfer",
    "boundary_vectors",
    "multiply_d1",
    "z_limit",
    "z_via_transfer",
    "spectral_radius",
    "GradedProduct",
    "KernelPair",
    "laplace_check",
    "dump_operator",
]

# theta-average constants: <D^-d> = C_d d^{d-1}/d tau^{d-1} (a^2 + b^2)^{-1/2}
THETA_CONSTANTS = {1: 1.0, 2: -1.0, 3: 0.5}

# deformation signs (compact block, boson block) inside D1; the boson block is
# the one written for the rotated representation, the compact sign carries the
# same correction as the single-site evaluator
TRANSFER_SIGNS = (-1.0, -1.0)

# single-site orientation whose generating function the transfer route reproduces
MIRROR_SIGNS = (1.0, 1.0)

_L = np.diag([1.0, -1.0]).astype(complex)


# ---------------------------------------------------------------------------
# parameters and weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RotatedParams:
    """Rotated spectral data ``k_s = sqrt(k^2 + y_s^2)``, ``sin a_s = y_s / k_s``."""

    kappa1: float
    kappa2: float
    alpha1: float
    alpha2: float
    tau_a: tuple
    kappa: float

    @classmethod
    def from_spectral(cls, p: SpectralParams, c0: float | None = None) -> "RotatedParams":
        c0 = c0 if c0 is not None else saddle_constants(p.E).c0
        k1, k2 = math.hypot(p.kappa, p.y1), math.hypot(p.kappa, p.y2)
        taus = tuple((g + 1.0 / g) / c0 for g in p.gammas)
        return cls(k1, k2, math.asin(p.y1 / k1), math.asin(p.y2 / k2), taus, p.kappa)

    def __post_init__(self):
        if not (self.kappa1 >= self.kappa > 0 and self.kappa2 >= self.kappa):
            raise ValueError("need kappa_s >= kappa > 0")
        for a in (self.alpha1, self.alpha2):
            if not 0.0 <= a < math.pi / 2:
                raise ValueError("rotation angles must lie in [0, pi/2)")


def f_weights(u, x, rp: RotatedParams, n: int, c0: float):
    """``F = exp{-(c0/n)(k1 (1/2 - u) + k2 (1/2 + x))}`` and ``F1 = -(c0/n)(k1 (1/2 - u) - k2 (1/2 + x))``."""
    u, x = np.asarray(u, float), np.asarray(x, float)
    a, b = rp.kappa1 * (0.5 - u), rp.kappa2 * (0.5 + x)
    return np.exp(-(c0 / n) * (a + b)), -(c0 / n) * (a - b)


# ---------------------------------------------------------------------------
# boundary factor D1
# ---------------------------------------------------------------------------


def _rotate(M: np.ndarray, alpha: float) -> np.ndarray:
    """``M V(alpha)^*`` for batched ``M``."""
    return np.einsum("ij...,jk->ik...", M, rotation_matrix(alpha).conj().T)


def _conj(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    Minv = np.array([[M[1, 1], -M[0, 1]], [-M[1, 0], M[0, 0]]])
    Minv = Minv / (M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0])
    return np.einsum("ij...,jk,kl...->il...", M, X, Minv)


def rotated_blocks(U: np.ndarray, S: np.ndarray, rp: RotatedParams, E: float,
                   gamma: float, c0: float, signs: tuple = TRANSFER_SIGNS):
    """``(A~, B~)`` with ``A~ = L + U~ C_F U~^-1``, ``B~ = L - S~ C_B S~^-1``.

    ``U~ = U V1^*``, ``S~ = S V2^*`` and ``C_X = -iE/c0 + s_X (2i gamma/c0) sigma``.
    With the default signs ``B~ = iE/c0 + (2i gamma/c0) S~ sigma S~^-1 + L``.
    """
    C = deformation_shift(E, gamma, c0, signs)
    Ut, St = _rotate(U, rp.alpha1), _rotate(S, rp.alpha2)
    shape = (2, 2) + (1,) * (U.ndim - 2)
    At = _L.reshape(shape) + _conj(Ut, C[:2, :2])
    Bt = _L.reshape((2, 2) + (1,) * (S.ndim - 2)) - _conj(St, C[2:, 2:])
    return At, Bt


def det_b_closed_form(t, theta, rp: RotatedParams, gamma: float, c0: float):
    """``det B~ = -(4 gamma/c0)(tau - i sinh t cos a2 cos theta + cosh t sin a2)``."""
    tau = (gamma + 1.0 / gamma) / c0
    return -(4 * gamma / c0) * (tau - 1j * np.sinh(t) * math.cos(rp.alpha2) * np.cos(theta)
                                + np.cosh(t) * math.sin(rp.alpha2))


def det_a_closed_form(phi, psi, rp: RotatedParams, gamma: float, c0: float,
                      s_f: float = TRANSFER_SIGNS[0]):
    """``det A~ = -(4 gamma/c0)(tau - s_F (sin phi cos a1 sin psi - sin a1 cos phi))``.

    ``s_F`` is the fermion-block deformation sign used in :func:`rotated_blocks`;
    ``s_F = +1`` gives the mirror orientation.
    """
    tau = (gamma + 1.0 / gamma) / c0
    return -(4 * gamma / c0) * (tau - s_f * (np.sin(phi) * math.cos(rp.alpha1) * np.sin(psi)
                                             - math.sin(rp.alpha1) * np.cos(phi)))


def d1_factor(point: CosetPoint, rp: RotatedParams, E: float, gamma: float,
              algebra: GrassmannAlgebra | None = None, c0: float | None = None,
              signs: tuple = TRANSFER_SIGNS) -> GrassmannElement:
    """Engine evaluation of ``D1 = Sdet^-1(Q(U~, S~) + C)`` on the generators of site 0."""
    c0 = c0 if c0 is not None else saddle_constants(E).c0
    alg = algebra or GrassmannAlgebra(4)
    U, S = point.U(), point.S()
    Q = _assemble(alg, 0, _rotate(U, rp.alpha1), _rotate(S, rp.alpha2))
    C = deformation_shift(E, gamma, c0, signs)
    from .sigma_model import _shifted

    sd = sdet(_shifted(Q, C))
    if np.any(np.abs(sd.body) == 0):
        raise ZeroDivisionError("vanishing superdeterminant body")
    return even_inverse(sd)


def d1_coefficients(el: GrassmannElement) -> dict:
    """Read ``c1..c4, d1, d2`` off an engine element on the generators of site 0.

    ``n_s = rho_s tau_s``; the odd pairs are ``rho1 tau2`` and ``rho2 tau1 = -tau1 rho2``.
    """
    return {"c1": el.coefficient(()), "c2": el.coefficient((0, 1)),
            "c3": el.coefficient((2, 3)), "c4": el.coefficient((0, 1, 2, 3)),
            "d1": el.coefficient((0, 3)), "d2": -el.coefficient((1, 2))}


def _sdet3(A11, A12, A21, A22, B11, B22, detB):
    """Closed-form coefficients of ``D1`` from entries of ``A~`` and ``B~``.

    Only ``B11``, ``B22`` and ``det B`` are needed, since
    ``B^-1_11 B^-1_22 + B^-1_12 B^-1_21 = -1/det B + 2 B11 B22 / det B^2``.
    """
    detA = A11 * A22 - A12 * A21
    bi11, bi22 = B22 / detB, B11 / detB
    pair = -1.0 / detB + 2.0 * B11 * B22 / detB**2
    trBL = bi11 - bi22
    trAL = A11 - A22
    k = (-(16 - 8 * trAL - 4 * detA) * pair - 8 * trBL
         + 4 * bi11 * A11 + 4 * bi22 * A22 + 4)
    c1 = detA / detB
    c2 = -(4 * A22 * bi11 - 2 * A22 - 2 * bi11 * detA) / detB
    c3 = -(4 * bi22 * A11 + 2 * A11 + 2 * bi22 * detA) / detB
    c4 = -k / detB
    return c1, c2, c3, c4


def d1_closed_form(U: np.ndarray, S: np.ndarray, rp: RotatedParams, E: float,
                   gamma: float, c0: float, signs: tuple = TRANSFER_SIGNS) -> dict:
    """Coefficients ``c1..c4, d1, d2`` of ``D1`` from the closed form.

    ``D1 = c1 + c2 n1 + c3 n2 + c4 n1 n2 + d1 rho1 tau2 + d2 rho2 tau1`` with
    ``d1 = 4 A12 B^-1_21 / det B`` and ``d2 = 4 A21 B^-1_12 / det B``.
    """
    A, B = rotated_blocks(U, S, rp, E, gamma, c0, signs)
    detB = B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]
    c1, c2, c3, c4 = _sdet3(A[0, 0], A[0, 1], A[1, 0], A[1, 1], B[0, 0], B[1, 1], detB)
    d1 = 4 * A[0, 1] * (-B[1, 0] / detB) / detB
    d2 = 4 * A[1, 0] * (-B[0, 1] / detB) / detB
    return {"c1": c1, "c2": c2, "c3": c3, "c4": c4, "d1": d1, "d2": d2}


def _pole_expansion(A: np.ndarray, E: float, gamma: float, c0: float, s_b: float):
    """``c_nu^(k)``, ``k = 0..3``: coefficients of ``c_nu`` in powers of ``w = 1/D``.

    With ``D = tau - i sinh t cos a2 cos theta + cosh t sin a2`` the boson block
    depends on ``S`` only through ``D``: ``det B~ = -(4 gamma/c0) D`` and
    ``B~_jj = s_B iE/c0 - (-1)^j + (-1)^j (2 gamma/c0)(tau - D)``.  Each ``c_nu``
    is a cubic polynomial in ``w`` and is recovered exactly from four samples.
    """
    tau = (gamma + 1.0 / gamma) / c0
    ws = np.exp(0.5j * np.pi * np.arange(4))
    samples = []
    for w in ws:
        D = 1.0 / w
        detB = -(4 * gamma / c0) * D
        B11 = -s_b * 1j * E / c0 + 1 - (2 * gamma / c0) * (tau - D)
        B22 = -s_b * 1j * E / c0 - 1 + (2 * gamma / c0) * (tau - D)
        samples.append(_sdet3(A[0, 0], A[0, 1], A[1, 0], A[1, 1], B11, B22, detB))
    samples = np.array(samples)  # (4 samples, 4 coefficients, *batch)
    inv = np.exp(-0.5j * np.pi * np.outer(np.arange(4), np.arange(4))) / 4
    return np.einsum("km,mv...->vk...", inv, samples)  # (coef nu, power k, *batch)


def theta_average(tau_eff, t, alpha2: float, delta: int):
    """``(1/2pi) int (tau - i cos a2 sinh t cos th + sin a2 cosh t)^-delta dth`` in closed form.

    Equals ``C_delta d^{delta-1}/d tau^{delta-1} (a^2 + b^2)^{-1/2}`` with
    ``a = tau + sin a2 cosh t`` and ``b = cos a2 sinh t``.
    """
    a = np.asarray(tau_eff, float) + math.sin(alpha2) * np.cosh(t)
    b = math.cos(alpha2) * np.sinh(t)
    r2 = a * a + b * b
    if delta == 1:
        deriv = r2 ** -0.5
    elif delta == 2:
        deriv = -a * r2 ** -1.5
    elif delta == 3:
        deriv = (2 * a * a - b * b) * r2 ** -2.5
    else:
        raise ValueError("delta must be 1, 2 or 3")
    return THETA_CONSTANTS[delta] * deriv


def _theta_quadrature(tau, t, alpha2, delta, nodes=4096):
    th = 2 * np.pi * np.arange(nodes) / nodes
    D = tau - 1j * math.cos(alpha2) * np.sinh(t) * np.cos(th) + math.sin(alpha2) * np.cosh(t)
    return np.mean(D ** (-delta)).real


def fit_theta_constants(rng: np.random.Generator, points: int = 20) -> dict:
    """Least-squares fit of ``C_delta`` against direct theta quadrature."""
    out = {}
    for delta in (1, 2, 3):
        num = den = 0.0
        for _ in range(points):
            tau, t, a2 = rng.uniform(1.0, 3.0), rng.uniform(0.0, 3.0), rng.uniform(0.0, 1.5)
            q = _theta_quadrature(tau, t, a2, delta)
            m = theta_average(tau, t, a2, delta) / THETA_CONSTANTS[delta]
            num += q * m
            den += m * m
        out[delta] = num / den
    return out


# ---------------------------------------------------------------------------
# difference kernels
# ---------------------------------------------------------------------------


def relative_v_compact(u, up, chi):
    """``|(U U'^*)_12|^2`` for relative phase ``chi = psi - psi'``."""
    return (1 - u) * up + u * (1 - up) - 2 * np.sqrt(u * up * (1 - u) * (1 - up)) * np.cos(chi)


def relative_v_hyperbolic(x, xp, chi):
    """``|(S S'^-1)_12|^2`` for relative phase ``chi = theta - theta'``."""
    return (1 + x) * xp + x * (1 + xp) - 2 * np.sqrt(x * xp * (1 + x) * (1 + xp)) * np.cos(chi)


_RELATIVE_V_CHECKED = False


def validate_relative_v(pairs: int = 100, seed: int = 20240601, tol: float = 1e-10) -> float:
    """Compare the relative-coordinate formulas with explicit matrix products.

    Draws ``pairs`` random coset pairs for each of ``U U'^*`` and ``S S'^-1``
    and returns the largest relative deviation; raises if it exceeds ``tol``.
    """
    rng = np.random.default_rng(seed)
    u, up = rng.random(pairs), rng.random(pairs)
    x, xp = rng.exponential(2.0, pairs), rng.exponential(2.0, pairs)
    a, b, c, d = rng.uniform(0, 2 * np.pi, (4, pairs))
    U, Up = compact_matrix(u, a), compact_matrix(up, b)
    S, Sp = hyperbolic_matrix(x, c), hyperbolic_matrix(xp, d)
    rel_u = np.einsum("ij...,kj...->ik...", U, Up.conj())[0, 1]
    # S'^-1 = L S'^* L for S' in U(1,1)
    Sp_inv = np.einsum("ij...,kj...,kl->il...", _L, Sp.conj(), _L)
    rel_s = np.einsum("ij...,jk...->ik...", S, Sp_inv)[0, 1]
    err_u = np.abs(np.abs(rel_u) ** 2 - relative_v_compact(u, up, a - b))
    err_s = np.abs(np.abs(rel_s) ** 2 - relative_v_hyperbolic(x, xp, c - d))
    worst = float(max(err_u.max(), np.max(err_s / (1 + np.abs(rel_s) ** 2))))
    if worst > tol:
        raise AssertionError(f"relative-coordinate formula off by {worst:.2e}")
    return worst


def _require_relative_v():
    global _RELATIVE_V_CHECKED
    if not _RELATIVE_V_CHECKED:
        validate_relative_v()
        _RELATIVE_V_CHECKED = True


def _zero_mode(v0, r, beta_tilde, angle_nodes):
    if angle_nodes is None:
        # (1/2pi) int e^{-b (v0 - r cos chi)} dchi = e^{-b (v0 - r)} I0(b r) e^{-b r}
        return beta_tilde * np.exp(-beta_tilde * (v0 - r)) * ive(0, beta_tilde * r)
    chi = 2 * np.pi * np.arange(angle_nodes) / angle_nodes
    v = v0[..., None] - r[..., None] * np.cos(chi)
    return beta_tilde * np.mean(np.exp(-beta_tilde * v), axis=-1)


def kernel_ku(u, u_prime, beta_tilde: float, angle_nodes: int | None = None):
    """Zero-mode of ``K_U = bt exp(-bt |(U U'^*)_12|^2)`` (Bessel closed form by default)."""
    u, up = np.broadcast_arrays(np.asarray(u, float), np.asarray(u_prime, float))
    sq = np.sqrt(np.clip((1 - u) * up, 0, None)) - np.sqrt(np.clip(u * (1 - up), 0, None))
    r = 2 * np.sqrt(np.clip(u * up * (1 - u) * (1 - up), 0, None))
    return _zero_mode(sq * sq + r, r, beta_tilde, angle_nodes)


def kernel_ks(x, x_prime, beta_tilde: float, angle_nodes: int | None = None):
    """Zero-mode of ``K_S = bt exp(-bt |(S S'^-1)_12|^2)`` (Bessel closed form by default)."""
    x, xp = np.broadcast_arrays(np.asarray(x, float), np.asarray(x_prime, float))
    sq = np.sqrt((1 + x) * xp) - np.sqrt(x * (1 + xp))
    r = 2 * np.sqrt(x * xp * (1 + x) * (1 + xp))
    return _zero_mode(sq * sq + r, r, beta_tilde, angle_nodes)


# ---------------------------------------------------------------------------
# grid and graded operators
# ---------------------------------------------------------------------------


def _panels(lo: float, hi: float, width: float, order: int):
    npan = max(1, int(math.ceil((hi - lo) / width)))
    g, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, npan + 1)
    h = np.diff(edges)[:, None]
    nodes = edges[:-1, None] + 0.5 * h * (g[None, :] + 1)
    return nodes.ravel(), (0.5 * h * w[None, :]).ravel()


@dataclass(frozen=True)
class TransferGrid:
    """Product grid in ``u = sin^2(phi/2)`` and ``x = sinh^2(t/2)``.

    Composite Gauss-Legendre panels in the geodesic coordinates ``phi`` and
    ``t`` resolve the kernels, whose width there is about ``2/sqrt(bt)``.
    Weights are for ``du`` and ``dx``.
    """

    u_nodes: np.ndarray
    u_weights: np.ndarray
    x_nodes: np.ndarray
    x_weights: np.ndarray
    angle_nodes: int = 16
    x_cutoff: float = float("nan")

    @classmethod
    def build(cls, beta_tilde: float, x_cutoff: float, panel_order: int = 6,
              angle_nodes: int = 16, min_panels: int = 8) -> "TransferGrid":
        width = min(2.0 / math.sqrt(beta_tilde), math.pi / min_panels)
        phi, wphi = _panels(0.0, math.pi, width, panel_order)
        t_cut = math.acosh(1 + 2 * x_cutoff)
        t, wt = _panels(0.0, t_cut, min(width, t_cut / min_panels), panel_order)
        return cls(np.sin(phi / 2) ** 2, 0.5 * np.sin(phi) * wphi,
                   np.sinh(t / 2) ** 2, 0.5 * np.sinh(t) * wt, angle_nodes, x_cutoff)

    @classmethod
    def for_params(cls, rp: RotatedParams, n: int, c0: float, beta_tilde: float,
                   tail: float = 1e-14, **kw) -> "TransferGrid":
        """Grid with ``x_cutoff`` where the chain weight ``F^{2n}`` drops below ``tail``."""
        x_cut = -math.log(tail) / (2 * c0 * rp.kappa2)
        return cls.build(beta_tilde, x_cut, **kw)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.u_nodes), len(self.x_nodes)

    @property
    def t_nodes(self) -> np.ndarray:
        return 2 * np.arcsinh(np.sqrt(self.x_nodes))

    def pair(self, a: np.ndarray, b: np.ndarray) -> complex:
        """Bilinear pairing ``sum_i int a_i b_i du dx`` of graded grid functions."""
        w = self.u_weights[:, None] * self.x_weights[None, :]
        return complex(np.sum(a * b * w))


class GradedOperator:
    """Operator on graded grid functions ``v[4, nu, nx]``, upper-triangular in the grading.

    ``blocks[(i, j)]`` maps component ``j`` to component ``i``; absent blocks
    are zero.
    """

    def __init__(self, blocks: dict, shape: tuple[int, int], name: str = ""):
        self.blocks = blocks
        self.shape = shape
        self.name = name

    def apply(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros((4,) + self.shape, dtype=complex)
        for (i, j), op in self.blocks.items():
            out[i] = out[i] + op(v[j])
        return out

    def __matmul__(self, other: "GradedOperator") -> "GradedOperator":
        return GradedProduct([self, other])

    def block(self, i: int, j: int) -> np.ndarray:
        """Dense matrix of block ``(i, j)`` over the flattened grid (small grids only)."""
        size = self.shape[0] * self.shape[1]
        op = self.blocks.get((i, j))
        if op is None:
            return np.zeros((size, size), complex)
        eye = np.eye(size).reshape((size,) + self.shape)
        return np.array([op(e).ravel() for e in eye]).T

    def is_upper_triangular(self) -> bool:
        return all(i <= j for (i, j) in self.blocks)


class GradedProduct(GradedOperator):
    """Product of graded operators, applied factor by factor (rightmost first)."""

    def __init__(self, factors: Sequence[GradedOperator]):
        flat = []
        for f in factors:
            flat.extend(f.factors if isinstance(f, GradedProduct) else [f])
        self.factors = flat
        self.shape = flat[0].shape
        self.name = "".join(f.name for f in flat)
        support = {(i, i) for i in range(4)}
        for f in reversed(flat):
            support = {(i, j) for (i, k) in f.blocks for (k2, j) in support if k == k2}
        self._support = support

    @property
    def blocks(self) -> dict:
        return {ij: self._block_map(*ij) for ij in self._support}

    def _block_map(self, i: int, j: int) -> Callable:
        def op(v):
            full = np.zeros((4,) + self.shape, complex)
            full[j] = v
            return self.apply(full)[i]
        return op

    def apply(self, v: np.ndarray) -> np.ndarray:
        for f in reversed(self.factors):
            v = f.apply(v)
        return v


def _mult(f: np.ndarray) -> Callable:
    return lambda v: f * v


_PATTERN = {(0, 0): 0, (1, 1): 0, (2, 2): 0, (3, 3): 0,
            (0, 1): 1, (0, 2): 1, (1, 3): 1, (2, 3): 1, (0, 3): 2}


def build_fhat(grid: TransferGrid, rp: RotatedParams, n: int, c0: float,
               zero_f1: bool = False) -> GradedOperator:
    """Multiplication operator ``F (1 F1 F1 F1^2; 0 1 0 F1; 0 0 1 F1; 0 0 0 1)``."""
    F, F1 = f_weights(grid.u_nodes[:, None], grid.x_nodes[None, :], rp, n, c0)
    if zero_f1:
        F1 = np.zeros_like(F1)
    blocks = {}
    for ij, power in _PATTERN.items():
        if zero_f1 and power:
            continue
        blocks[ij] = _mult(F * F1**power)
    return GradedOperator(blocks, grid.shape, "F")


@dataclass
class KernelPair:
    """Discretized ``K_U`` and ``K_S`` (weights folded into the columns)."""

    KU: object
    KS: object
    beta_tilde: float

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return (self.KS @ (self.KU @ v).T).T

    def row_sums(self):
        return np.asarray(self.KU.sum(axis=1)).ravel(), np.asarray(self.KS.sum(axis=1)).ravel()

    def dense(self):
        return _dense(self.KU), _dense(self.KS)


def _dense(K):
    return K.toarray() if sparse.issparse(K) else np.asarray(K)


def _banded(K: np.ndarray, rel: float = 1e-17):
    """Drop entries below ``rel`` times the row maximum; sparse storage when it pays."""
    keep = np.abs(K) >= rel * np.max(np.abs(K), axis=1, keepdims=True)
    if keep.mean() > 0.3:
        return K
    return sparse.csr_matrix(np.where(keep, K, 0.0))


def build_kernel(grid: TransferGrid, beta_tilde: float, check: bool = True,
                 tol: float = 1e-6) -> KernelPair:
    """``K_U (x) K_S`` on the grid; row-sum identities are checked on interior rows.

    The relative-coordinate formulas are validated against matrix products
    once per process before the first kernel is assembled.
    """
    _require_relative_v()
    u, x = grid.u_nodes, grid.x_nodes
    KU = kernel_ku(u[:, None], u[None, :], beta_tilde) * grid.u_weights[None, :]
    KS = kernel_ks(x[:, None], x[None, :], beta_tilde) * grid.x_weights[None, :]
    kp = KernelPair(_banded(KU), _banded(KS), beta_tilde)
    if check:
        ru, rs = kp.row_sums()
        target = -math.expm1(-beta_tilde)
        t = grid.t_nodes
        inner = t < t[-1] - 12.0 / math.sqrt(beta_tilde)
        bad_u = np.max(np.abs(ru - target))
        bad_s = np.max(np.abs(rs[inner] - 1.0)) if inner.any() else 0.0
        if bad_u > tol or bad_s > tol:
            raise ValueError(f"kernel row sums off by {max(bad_u, bad_s):.2e}; grid too coarse")
    return kp


def build_transfer(grid: TransferGrid, rp: RotatedParams, beta_tilde: float, n: int,
                   c0: float, kernel: KernelPair | None = None) -> GradedOperator:
    """``M = F K F`` with ``K = K_U (x) K_S`` on every graded component."""
    Fh = build_fhat(grid, rp, n, c0)
    kp = kernel or build_kernel(grid, beta_tilde)
    K = GradedOperator({(i, i): kp for i in range(4)}, grid.shape, "K")
    M = Fh @ K @ Fh
    M.kernel = kp
    M.fhat = Fh
    return M


# ---------------------------------------------------------------------------
# boundary vectors and the generating function
# ---------------------------------------------------------------------------


def _averaged_coefficients(grid: TransferGrid, rp: RotatedParams, E: float,
                           gammas: Sequence[float], c0: float,
                           psi_nodes: int = 16, theta_nodes: int = 64,
                           signs: tuple = TRANSFER_SIGNS) -> np.ndarray:
    """``<c_nu>_{psi, theta}`` on the grid, shape ``(4, nu, nx)``.

    One channel: exact pole expansion in ``1/D`` and the closed-form theta
    average.  Several channels: the D1 supersymbols are multiplied
    (:func:`multiply_d1`) and theta is averaged by the trapezoid rule.
    """
    u, x = grid.u_nodes, grid.x_nodes
    t = grid.t_nodes
    psi = 2 * np.pi * np.arange(psi_nodes) / psi_nodes
    U = compact_matrix(u[:, None], psi[None, :])  # (2, 2, nu, npsi)
    if len(gammas) == 1:
        g = gammas[0]
        dummy_S = hyperbolic_matrix(np.zeros(1), np.zeros(1))
        A, _ = rotated_blocks(U, dummy_S, rp, E, g, c0, signs)
        coef = _pole_expansion(A, E, g, c0, float(np.sign(signs[1])))  # (4, 4, nu, npsi)
        coef = coef.mean(axis=-1)  # psi average
        if np.max(np.abs(coef[:, 0])) > 1e-10 * max(1.0, np.max(np.abs(coef))):
            raise AssertionError("unexpected pole-free part in D1")
        tau = (g + 1.0 / g) / c0
        T = np.array([theta_average(tau, t, rp.alpha2, k) for k in (1, 2, 3)])  # (3, nx)
        return np.einsum("vku,kx->vux", coef[:, 1:], T)
    # several channels: product of the D-supersymbols, theta by trapezoid
    th = 2 * np.pi * np.arange(theta_nodes) / theta_nodes
    S = hyperbolic_matrix(x[None, None, :, None], th[None, None, None, :])
    out = np.zeros((4, len(u), len(x)), complex)
    chunk = max(1, 2_000_000 // (psi_nodes * len(x) * theta_nodes))
    for lo in range(0, len(u), chunk):
        Uc = compact_matrix(u[lo:lo + chunk, None, None, None], psi[None, :, None, None])
        prod = None
        for gmm in gammas:
            d = d1_closed_form(Uc, S, rp, E, gmm, c0, signs)
            prod = d if prod is None else multiply_d1(prod, d)
        for v, key in enumerate(("c1", "c2", "c3", "c4")):
            out[v, lo:lo + chunk] = np.mean(prod[key], axis=(1, 3))
    return out


def multiply_d1(a: dict, b: dict) -> dict:
    """Product of two boundary supersymbols ``c1 + c2 n1 + c3 n2 + c4 n1 n2 + d1 rho1 tau2 + d2 rho2 tau1``.

    The odd pairs multiply as ``(rho1 tau2)(rho2 tau1) = -n1 n2``; every other
    cross term vanishes.
    """
    return {
        "c1": a["c1"] * b["c1"],
        "c2": a["c1"] * b["c2"] + a["c2"] * b["c1"],
        "c3": a["c1"] * b["c3"] + a["c3"] * b["c1"],
        "c4": (a["c1"] * b["c4"] + a["c4"] * b["c1"] + a["c2"] * b["c3"] + a["c3"] * b["c2"]
               - a["d1"] * b["d2"] - a["d2"] * b["d1"]),
        "d1": a["c1"] * b["d1"] + a["d1"] * b["c1"],
        "d2": a["c1"] * b["d2"] + a["d2"] * b["c1"],
    }


def boundary_vectors(grid: TransferGrid, rp: RotatedParams, E: float,
                     gammas: Sequence[float], n: int, c0: float, **kw):
    """``(f, g)`` with ``f = F (e4 - e1)`` and ``g = F^T (c1, c2, c3, c4 - c1)``."""
    Fh = build_fhat(grid, rp, n, c0)
    shape = grid.shape
    e = np.zeros((4,) + shape, complex)
    e[3] = 1.0
    e[0] = -1.0
    f = Fh.apply(e)
    c = _averaged_coefficients(grid, rp, E, gammas, c0, **kw)
    cv = np.array([c[0], c[1], c[2], c[3] - c[0]])
    g = _apply_transpose(Fh, cv)
    return f, g


def _apply_transpose(op: GradedOperator, v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v)
    for (i, j), blk in op.blocks.items():
        out[j] = out[j] + blk(v[i])
    return out


def _prefactor(p_or_E, x1=0.0, x2=0.0) -> float:
    return math.exp(p_or_E * (x1 - x2))


def z_limit(rp: RotatedParams, E: float, gammas: Sequence[float], n: int,
            grid: TransferGrid, x1: float = 0.0, x2: float = 0.0,
            c0: float | None = None) -> complex:
    """``e^{E(x1-x2)} (F^{2n-2} f, g)``: the chain with every kernel replaced by the identity."""
    if n < 1:
        raise ValueError("n must be positive")
    c0 = c0 if c0 is not None else saddle_constants(E).c0
    Fh = build_fhat(grid, rp, n, c0)
    f, g = boundary_vectors(grid, rp, E, gammas, n, c0)
    for _ in range(2 * n - 2):
        f = Fh.apply(f)
    return _prefactor(E, x1, x2) * grid.pair(f, g)


def _diag_resolvent_factory(kp: KernelPair, grid: TransferGrid, rp: RotatedParams,
                            n: int, c0: float):
    """Solver for ``(F K F - z) y = r`` via the Kronecker eigenstructure.

    ``F = F_U(u) F_S(x)`` and ``K = K_U (x) K_S`` give
    ``F K F = (F_U K_U F_U) (x) (F_S K_S F_S)``; each factor is similar to a
    symmetric matrix through the square roots of the quadrature weights.
    """
    fu = np.exp(-(c0 / n) * rp.kappa1 * (0.5 - grid.u_nodes))
    fs = np.exp(-(c0 / n) * rp.kappa2 * (0.5 + grid.x_nodes))
    wu, wx = grid.u_weights, grid.x_weights

    def factor(Kmat, f, w):
        sw = np.sqrt(w)
        Ksym = (f[:, None] * Kmat * f[None, :]) * (sw[:, None] / sw[None, :])
        Ksym = 0.5 * (Ksym + Ksym.T)
        lam, Q = np.linalg.eigh(Ksym)
        return lam, Q, sw

    KU, KS = kp.dense()
    lu, Qu, su = factor(KU, fu, wu)
    ls, Qs, ss = factor(KS, fs, wx)
    spec = lu[:, None] * ls[None, :]

    def solve(r: np.ndarray, z: complex) -> np.ndarray:
        # F K F = Su^-1 Qu Lu Qu^T Su (x) Sx^-1 Qs Ls Qs^T Sx, acting as v -> A v B^T
        y = Qu.T @ (su[:, None] * r * ss[None, :]) @ Qs
        y = y / (spec - z)
        return (Qu @ y @ Qs.T) / su[:, None] / ss[None, :]

    solve.spectral_radius = float(np.max(np.abs(spec)))
    return solve


def z_via_transfer(rp: RotatedParams, E: float, gammas: Sequence[float], n: int,
                   beta_tilde: float, grid: TransferGrid | None = None,
                   route: str = "power", A: float = 2.0, contour_nodes: int = 64,
                   x1: float = 0.0, x2: float = 0.0, c0: float | None = None) -> complex:
    """``e^{E(x1-x2)} (M^{n-1} f, g)`` by repeated application or by the resolvent contour.

    The contour route evaluates ``-(1/2 pi i) oint z^{n-1} ((M - z)^-1 f, g) dz``
    on ``|z| = 1 + A/n`` with the trapezoid rule; the radius is enlarged once
    if it does not clear the spectrum of the diagonal blocks.
    """
    if n < 1:
        raise ValueError("n must be positive")
    c0 = c0 if c0 is not None else saddle_constants(E).c0
    grid = grid or TransferGrid.for_params(rp, n, c0, beta_tilde)
    M = build_transfer(grid, rp, beta_tilde, n, c0)
    f, g = boundary_vectors(grid, rp, E, gammas, n, c0)
    pref = _prefactor(E, x1, x2)
    if route == "power":
        if n < 2:
            raise ValueError("the power route needs n >= 2")
        v = f
        for _ in range(n - 1):
            v = M.apply(v)
        return pref * grid.pair(v, g)
    if route != "contour":
        raise ValueError(f"unknown route {route!r}")
    solve = _diag_resolvent_factory(M.kernel, grid, rp, n, c0)
    radius = 1 + A / n
    if radius <= solve.spectral_radius * (1 + 1e-3):
        radius = 1 + 2 * A / n
        if radius <= solve.spectral_radius * (1 + 1e-3):
            raise RuntimeError("contour does not enclose the spectrum")
    total = 0j
    for k in range(contour_nodes):
        z = radius * np.exp(2j * np.pi * (k + 0.5) / contour_nodes)
        y = np.zeros_like(f)
        for i in (3, 2, 1, 0):
            # M is upper triangular in the grading: subtract the solved components
            r = f[i] - M.apply(y)[i] if i < 3 else f[i]
            y[i] = solve(r, z)
        # dz = i z dtheta; -(1/2 pi i) * i z * (2 pi / N) = -z / N
        total += -(z ** (n - 1)) * grid.pair(y, g) * z / contour_nodes
    return pref * total


def spectral_radius(rp: RotatedParams, beta_tilde: float, n: int, c0: float,
                    grid: TransferGrid | None = None) -> float:
    """Spectral radius of the discretized ``M`` (that of its diagonal blocks ``F K F``)."""
    grid = grid or TransferGrid.for_params(rp, n, c0, beta_tilde)
    kp = build_kernel(grid, beta_tilde)
    return _diag_resolvent_factory(kp, grid, rp, n, c0).spectral_radius


# ---------------------------------------------------------------------------
# Laplace operators and operator dumps
# ---------------------------------------------------------------------------


def laplace_check(fn: np.ndarray, nodes: np.ndarray, which: str) -> np.ndarray:
    """Discrete ``-d/dx p(x) d/dx`` with ``p = x(1 - x)`` (``U``) or ``x(x + 1)`` (``S``).

    Uses ``-(p f')' = -p f'' - p' f'`` with three-point derivatives on a
    possibly non-uniform grid, exact for quadratic ``fn``; the two end values
    are left as ``nan``.
    """
    x = np.asarray(nodes, float)
    f = np.asarray(fn)
    if which == "U":
        p, dp = x * (1 - x), 1 - 2 * x
    elif which == "S":
        p, dp = x * (x + 1), 2 * x + 1
    else:
        raise ValueError("which must be 'U' or 'S'")
    out = np.full(f.shape, np.nan, dtype=np.result_type(f, float))
    hm, hp = x[1:-1] - x[:-2], x[2:] - x[1:-1]
    sm_, sp_ = (f[1:-1] - f[:-2]) / hm, (f[2:] - f[1:-1]) / hp
    d1 = (hp * sm_ + hm * sp_) / (hm + hp)
    d2 = 2 * (sp_ - sm_) / (hm + hp)
    out[1:-1] = -p[1:-1] * d2 - dp[1:-1] * d1
    return out


def dump_operator(M: GradedOperator, path: str | os.PathLike, meta: dict | None = None) -> None:
    """Write nonzero blocks as row-major little-endian complex128 plus a JSON sidecar."""
    path = os.fspath(path)
    info = {"shape": list(M.shape), "blocks": [], **(meta or {})}
    with open(path, "wb") as fh:
        for (i, j) in sorted(M.blocks):
            dense = M.block(i, j).astype("<c16")
            fh.write(dense.tobytes(order="C"))
            info["blocks"].append({"row": i, "col": j, "size": dense.shape[0]})
    with open(path + ".json", "w") as fh:
        json.dump(info, fh, indent=2)
