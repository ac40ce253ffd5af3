"""Sigma-model evaluation of the determinant-ratio generating function.

Each lattice site carries a 4x4 supermatrix

    Q = diag(U^-1, S^-1) [[(I + 2 n) L, 2 tau], [2 rho, -(I - 2 n) L]] diag(U, S)

with ``U`` in the compact coset U(2)/U(1)^2, ``S`` in the hyperbolic coset
U(1,1)/U(1)^2, ``rho = diag(rho_1, rho_2)``, ``tau = diag(tau_1, tau_2)`` and
``n = rho tau``.  Four Grassmann generators per site are ordered
``rho_1, tau_1, rho_2, tau_2`` and the site measure is

    (1 - 2 n_1 n_2) d rho_1 d tau_1 d rho_2 d tau_2  du dpsi/2pi  dx dtheta/2pi

with ``u = |U_12|^2`` and ``x = |S_12|^2``.  The Grassmann part of every
integral is done exactly with :mod:`sigmaband.superalgebra`; the commuting
coordinates are integrated numerically.

Three evaluation routes are available.

``"direct"``
    The spectral matrix ``Lam = diag([[k, -i y1], [i y1, -k]], [[k, -i y2], [i y2, -k]])``
    as written.  Always valid, but the hyperbolic integrand oscillates in
    ``theta`` with an amplitude growing like ``y2 |S_12|`` and decays only like
    ``exp(-2 c0 k x)``; usable for ``k`` of order one.
``"rotated"``
    ``Lam`` is conjugated to ``diag(k1 L, k2 L)`` (``k_s^2 = k^2 + y_s^2``) by
    moving the coset contours.  The compact move is a change of variables; the
    hyperbolic move is legitimate only when it crosses no zero of the
    boson-block determinant, i.e. for ``s_B y2 >= 0`` where ``s_B`` is the
    boson-block deformation sign.  That is the orientation of ``H - i Gamma``
    (spectral points in the eigenvalue-free half plane).
``"schwinger"``
    Single site, one channel: the boson-block determinant is Schwinger
    parametrized, after which the contour move is legitimate in either
    orientation (see :mod:`sigmaband.schwinger`).  Accurate for any ``k > 0``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .ensemble import SpectralParams, semicircle_density
from .superalgebra import (GrassmannAlgebra, GrassmannElement, SuperMatrix,
                           berezin, even_inverse, exp_even, sdet, SingularElementError)

__all__ = [
    "SaddleConstants",
    "CosetPoint",
    "QuadratureSpec",
    "ZResult",
    "QuadratureError",
    "CalibrationError",
    "saddle_constants",
    "saddle_exponent",
    "compact_matrix",
    "hyperbolic_matrix",
    "rotation_matrix",
    "assemble_Q",
    "spectral_matrix",
    "rotated_spectral_matrix",
    "deformation_shift",
    "sigma_integrand",
    "integrate_sigma_model",
    "gue_limit_z",
    "density_from_z",
    "calibrate_normalization",
    "check_rotation_admissible",
    "resolve_frame",
    "DensityPoint",
    "TAU_HAT",
    "DEFORMATION_SIGNS",
]

L2 = np.diag([1.0, -1.0]).astype(complex)
SIGMA = np.array([[0.0, 1.0], [-1.0, 0.0]], dtype=complex)

# The second entry of tau-hat is tau_2 (the printed rho_2 is a misprint).
TAU_HAT = ("tau_1", "tau_2")

# Signs multiplying (2 i gamma / c0) sigma in the compact and hyperbolic
# diagonal blocks of the deformation term.  The printed L*Sigma ordering gives
# (+1, -1); that choice violates Z(z, z) = 1, while (-1, -1) satisfies it and
# matches direct matrix Monte Carlo.
DEFORMATION_SIGNS = (-1.0, -1.0)

# Per-site calibration constant of the coset measure.  With the flat measure
# above the supersymmetric normalisation already holds, so it equals one.
MEASURE_CONSTANT = 1.0

# relative floating-point floor of reported quadrature errors
ROUNDOFF_FLOOR = 1e-13


class QuadratureError(RuntimeError):
    """Quadrature error estimate exceeds the requested tolerance."""


class CalibrationError(RuntimeError):
    """Normalisation constant is not universal across parameter sets."""


# ---------------------------------------------------------------------------
# saddle-point constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaddleConstants:
    E: float
    beta: float
    a_plus: complex
    a_minus: complex
    c_plus: complex
    c_minus: complex
    c0: float
    beta_tilde: float

    @property
    def L(self) -> np.ndarray:
        return L2.real.copy()

    @property
    def L_pm(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit direction vectors of the rays ``r a_+`` and ``r a_-``."""
        return (np.array([self.a_plus.real, self.a_plus.imag]),
                np.array([self.a_minus.real, self.a_minus.imag]))


def saddle_exponent(x, E: float):
    """``f(x) = x^2/2 + i E x - log x - (2 + E^2)/4``."""
    x = np.asarray(x, dtype=complex)
    return x**2 / 2 + 1j * E * x - np.log(x) - (2 + E**2) / 4


def saddle_constants(E: float, beta: float = 1.0) -> SaddleConstants:
    """``a_pm = (-iE +- sqrt(4-E^2))/2``, ``c_pm = 1 + a_pm^-2``, ``c0 = sqrt(4-E^2)``."""
    if abs(E) >= 2:
        raise ValueError("|E| must be below 2")
    c0 = math.sqrt(4 - E * E)
    ap = (-1j * E + c0) / 2
    am = (-1j * E - c0) / 2
    cp = 1 + ap**-2
    cm = 1 + am**-2
    if abs(cp * ap**2 - c0 * ap) > 1e-14 * max(1, abs(c0)) or \
            abs(cm * am**2 + c0 * am) > 1e-14 * max(1, abs(c0)):
        raise ArithmeticError("saddle identities violated")
    return SaddleConstants(E, beta, ap, am, cp, cm, c0, c0 * c0 * beta)


# ---------------------------------------------------------------------------
# coset coordinates
# ---------------------------------------------------------------------------


def compact_matrix(u, psi) -> np.ndarray:
    """``U`` with ``|U_12|^2 = u``; shape ``(2, 2, *batch)``."""
    u, psi = np.broadcast_arrays(np.asarray(u, float), np.asarray(psi, float))
    c, s, e = np.sqrt(1 - u), np.sqrt(u), np.exp(0.5j * psi)
    return np.array([[e * c, s / e], [-e * s, c / e]])


def hyperbolic_matrix(x, theta) -> np.ndarray:
    """``S`` with ``S^* L S = L`` and ``|S_12|^2 = x``; shape ``(2, 2, *batch)``."""
    x, theta = np.broadcast_arrays(np.asarray(x, float), np.asarray(theta, float))
    c, s, e = np.sqrt(1 + x), np.sqrt(x), np.exp(0.5j * theta)
    return np.array([[e * c, s / e], [e * s, c / e]])


def rotation_matrix(alpha) -> np.ndarray:
    """``V = [[cos(a/2), -i sin(a/2)], [-i sin(a/2), cos(a/2)]]``."""
    c, s = math.cos(alpha / 2), math.sin(alpha / 2)
    return np.array([[c, -1j * s], [-1j * s, c]])


def _inv2(m: np.ndarray) -> np.ndarray:
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    return np.array([[m[1, 1], -m[0, 1]], [-m[1, 0], m[0, 0]]]) / det


def _mul2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij...,jk...->ik...", a, b)


@dataclass(frozen=True)
class CosetPoint:
    u: object
    psi: object
    x: object
    theta: object

    def U(self) -> np.ndarray:
        return compact_matrix(self.u, self.psi)

    def S(self) -> np.ndarray:
        return hyperbolic_matrix(self.x, self.theta)


# ---------------------------------------------------------------------------
# supermatrices
# ---------------------------------------------------------------------------


def _elem(alg: GrassmannAlgebra, terms: dict) -> GrassmannElement:
    return GrassmannElement(alg, {m: c for m, c in terms.items()})


def site_generators(site: int) -> tuple[int, int, int, int]:
    """Generator indices ``(rho_1, tau_1, rho_2, tau_2)`` of a site."""
    b = 4 * site
    return b, b + 1, b + 2, b + 3


def _assemble(alg: GrassmannAlgebra, site: int, U, S, Uinv=None, Sinv=None) -> SuperMatrix:
    r1, t1, r2, t2 = site_generators(site)
    if 4 * site + 4 > alg.num_generators:
        raise ValueError("algebra has too few generators for this site")
    Uinv = _inv2(U) if Uinv is None else Uinv
    Sinv = _inv2(S) if Sinv is None else Sinv
    n_mask = ((1 << r1) | (1 << t1), (1 << r2) | (1 << t2))
    rho = (1 << r1, 1 << r2)
    tau = (1 << t1, 1 << t2)
    ell = (1.0, -1.0)
    E = [[None] * 4 for _ in range(4)]
    for i in range(2):
        for k in range(2):
            # compact block: sum_a Uinv_ia (1 + 2 n_a) L_aa U_ak
            body = Uinv[i, 0] * U[0, k] * ell[0] + Uinv[i, 1] * U[1, k] * ell[1]
            E[i][k] = _elem(alg, {0: body,
                                  n_mask[0]: 2 * ell[0] * Uinv[i, 0] * U[0, k],
                                  n_mask[1]: 2 * ell[1] * Uinv[i, 1] * U[1, k]})
            # hyperbolic block: -sum_a Sinv_ia (1 - 2 n_a) L_aa S_ak
            body = -(Sinv[i, 0] * S[0, k] * ell[0] + Sinv[i, 1] * S[1, k] * ell[1])
            E[2 + i][2 + k] = _elem(alg, {0: body,
                                          n_mask[0]: 2 * ell[0] * Sinv[i, 0] * S[0, k],
                                          n_mask[1]: 2 * ell[1] * Sinv[i, 1] * S[1, k]})
            E[i][2 + k] = _elem(alg, {tau[0]: 2 * Uinv[i, 0] * S[0, k],
                                      tau[1]: 2 * Uinv[i, 1] * S[1, k]})
            E[2 + i][k] = _elem(alg, {rho[0]: 2 * Sinv[i, 0] * U[0, k],
                                      rho[1]: 2 * Sinv[i, 1] * U[1, k]})
    return SuperMatrix(alg, E)


def assemble_Q(point: CosetPoint, site: int, algebra: GrassmannAlgebra) -> SuperMatrix:
    """Site supermatrix ``Q_j`` at a (possibly batched) coset point."""
    U, S = point.U(), point.S()
    return _assemble(algebra, site, U, S, U.conj().swapaxes(0, 1), None)


def spectral_matrix(kappa: float, y1: float, y2: float) -> np.ndarray:
    """``diag([[k, -i y1], [i y1, -k]], [[k, -i y2], [i y2, -k]])``."""
    lam = np.zeros((4, 4), complex)
    lam[:2, :2] = [[kappa, -1j * y1], [1j * y1, -kappa]]
    lam[2:, 2:] = [[kappa, -1j * y2], [1j * y2, -kappa]]
    return lam


def rotated_parameters(kappa: float, y1: float, y2: float):
    """``(k1, k2, alpha1, alpha2)`` with ``k_s = sqrt(k^2 + y_s^2)``, ``sin a_s = y_s/k_s``."""
    k1, k2 = math.hypot(kappa, y1), math.hypot(kappa, y2)
    return k1, k2, math.asin(y1 / k1), math.asin(y2 / k2)


def rotated_spectral_matrix(kappa: float, y1: float, y2: float) -> np.ndarray:
    k1, k2, _, _ = rotated_parameters(kappa, y1, y2)
    return np.diag([k1, -k1, k2, -k2]).astype(complex)


def deformation_shift(E: float, gamma: float, c0: float,
                      signs: tuple = DEFORMATION_SIGNS) -> np.ndarray:
    """Numeric 4x4 matrix added to ``Q`` inside the deformation superdeterminant."""
    C = np.zeros((4, 4), complex)
    C[:2, :2] = -1j * E / c0 * np.eye(2) + signs[0] * 2j * gamma / c0 * SIGMA
    C[2:, 2:] = -1j * E / c0 * np.eye(2) + signs[1] * 2j * gamma / c0 * SIGMA
    return C


def _str_product(Q: SuperMatrix, lam: np.ndarray) -> GrassmannElement:
    """``Str(Q lam)`` for a numeric (unbatched) ``lam``."""
    alg = Q.algebra
    acc = alg.zero()
    for i in range(4):
        sgn = 1.0 if i >= 2 else -1.0
        for k in range(4):
            if lam[k, i] != 0:
                acc = acc + Q[i, k] * (sgn * lam[k, i])
    return acc


def _str_qq(Q1: SuperMatrix, Q2: SuperMatrix) -> GrassmannElement:
    alg = Q1.algebra
    acc = alg.zero()
    for i in range(4):
        sgn = 1.0 if i >= 2 else -1.0
        for k in range(4):
            acc = acc + (Q1[i, k] * Q2[k, i]) * sgn
    return acc


def _shifted(Q: SuperMatrix, C: np.ndarray) -> SuperMatrix:
    alg = Q.algebra
    rows = []
    for i in range(4):
        row = []
        for k in range(4):
            row.append(Q[i, k] + C[i, k] if C[i, k] != 0 else Q[i, k])
        rows.append(row)
    return SuperMatrix(alg, rows)


def _measure_factor(alg: GrassmannAlgebra, n_sites: int) -> GrassmannElement:
    out = alg.one()
    for j in range(n_sites):
        r1, t1, r2, t2 = site_generators(j)
        mask = (1 << r1) | (1 << t1) | (1 << r2) | (1 << t2)
        # n1 n2 = rho1 tau1 rho2 tau2 is already in canonical order
        out = out * _elem(alg, {0: 1.0, mask: -2.0})
    return out


def _site_matrices(points: Sequence[CosetPoint]):
    return [(pt.U(), pt.S()) for pt in points]


def check_rotation_admissible(p: SpectralParams, deformation_signs: tuple) -> None:
    """Raise if moving the hyperbolic contour would cross a determinant zero.

    In the rotated frame the boson-block determinant is proportional to
    ``tau - i sinh t cos(a2) cos(theta) - s_B cosh t sin(a2)``, which vanishes
    on the contour when ``s_B sin(a2) > 0`` is replaced by its negative, i.e.
    whenever ``s_B * y2 < 0``.
    """
    if deformation_signs[1] * p.y2 < 0:
        raise ValueError(
            "the rotated frame crosses zeros of the boson-block determinant for "
            f"deformation signs {deformation_signs} and y2={p.y2}; use the "
            "'schwinger' or 'direct' route")


def _integrand_from_matrices(alg, mats, p: SpectralParams, sc: SaddleConstants, frame: str,
                             body_shift=None, deformation_signs=DEFORMATION_SIGNS):
    n = len(mats)
    c0 = sc.c0
    if frame == "direct":
        lam = spectral_matrix(p.kappa, p.y1, p.y2)
        Vc = Vh = None
    elif frame == "rotated":
        check_rotation_admissible(p, deformation_signs)
        lam = rotated_spectral_matrix(p.kappa, p.y1, p.y2)
        _, _, a1, a2 = rotated_parameters(p.kappa, p.y1, p.y2)
        Vc, Vh = rotation_matrix(a1), rotation_matrix(a2)
    else:
        raise ValueError(f"unknown frame {frame!r}")
    Qs = [_assemble(alg, j, U, S, U.conj().swapaxes(0, 1), None) for j, (U, S) in enumerate(mats)]
    expo = alg.zero()
    for Q in Qs:
        expo = expo + _str_product(Q, lam) * (c0 / (2 * n))
    for j in range(1, n):
        expo = expo - _str_qq(Qs[j], Qs[j - 1]) * (sc.beta_tilde / 4)
    if body_shift is not None:
        expo = expo + body_shift
    out = exp_even(expo)
    if frame == "direct":
        Qd = Qs[0]
    else:
        U, S = mats[0]
        Ut = np.einsum("ij...,jk->ik...", U, Vc)
        St = np.einsum("ij...,jk->ik...", S, Vh)
        Qd = _assemble(alg, 0, Ut, St)
    for g in p.gammas:
        C = deformation_shift(p.E, g, c0, deformation_signs)
        out = out * even_inverse(sdet(_shifted(Qd, C)))
    return out * _measure_factor(alg, n)


def sigma_integrand(points: Sequence[CosetPoint], p: SpectralParams, sc: SaddleConstants,
                    frame: str = "direct", algebra: GrassmannAlgebra | None = None,
                    deformation_signs: tuple = DEFORMATION_SIGNS) -> GrassmannElement:
    """Grassmann-valued integrand at ``n = len(points)`` sites (coordinates may be batched).

    Includes the coupling and spectral exponent, the deformation
    superdeterminants at site 1 and the Grassmann measure factors.
    """
    n = len(points)
    if n < 1:
        raise ValueError("at least one site is required")
    alg = algebra or GrassmannAlgebra(4 * n)
    try:
        return _integrand_from_matrices(alg, _site_matrices(points), p, sc, frame,
                                        deformation_signs=deformation_signs)
    except SingularElementError as exc:
        raise SingularElementError(f"singular superdeterminant at {points[0]}") from exc


def _top(el: GrassmannElement, n: int):
    order = [g for j in range(n) for g in site_generators(j)]
    return berezin(el, order).body


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureSpec:
    """Quadrature layout.

    For ``tensor-gauss`` the ``u`` and ``x`` directions get ``nodes_per_dim``
    Gauss-Legendre nodes (``x`` after an exponential map that flattens the
    decay), the angles get trapezoid rules with ``angle_nodes`` points.  For
    ``low-discrepancy`` a scrambled Sobol set of ``mc_points`` points is drawn
    ``replicas`` times.
    """

    nodes_per_dim: int = 24
    x_cutoff: float | None = None
    scheme: str = "tensor-gauss"
    mc_points: int = 2**14
    angle_nodes: int = 16
    theta_nodes: int | None = None
    replicas: int = 8
    seed: int = 1234
    tolerance: float | None = None

    def __post_init__(self):
        if self.nodes_per_dim < 8:
            raise ValueError("nodes_per_dim must be at least 8")
        if self.scheme not in ("tensor-gauss", "low-discrepancy"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    def refined(self, factor: float = 2.0) -> "QuadratureSpec":
        d = asdict(self)
        d["nodes_per_dim"] = int(round(self.nodes_per_dim * factor))
        d["angle_nodes"] = int(round(self.angle_nodes * factor))
        if self.theta_nodes:
            d["theta_nodes"] = int(round(self.theta_nodes * factor))
        d["mc_points"] = int(self.mc_points * factor)
        return QuadratureSpec(**d)


@dataclass
class ZResult:
    value: complex
    error: float
    params: dict
    nodes: int
    scheme: str
    calibration_constant: float = MEASURE_CONSTANT
    flagged: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"params": self.params, "z_re": float(np.real(self.value)),
                "z_im": float(np.imag(self.value)), "err_estimate": float(self.error),
                "nodes": int(self.nodes), "scheme": self.scheme,
                "calibration_constant": float(self.calibration_constant),
                "flagged": bool(self.flagged), **self.extra}

    def to_json(self, path: str | os.PathLike):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _decay_length(p: SpectralParams, sc: SaddleConstants, frame: str) -> float:
    # the hyperbolic weight decays like exp(-2 c0 k x) (direct) or exp(-2 c0 k2 x) (rotated)
    k = p.kappa if frame == "direct" else math.hypot(p.kappa, p.y2)
    return 1.0 / (2.0 * sc.c0 * k)


def _x_rule(nodes: int, length: float, cutoff: float):
    """Gauss rule for ``int_0^cutoff f(x) dx`` after ``x = -l log(1 - s(1 - e^{-X/l}))``."""
    g, w = np.polynomial.legendre.leggauss(nodes)
    s = (g + 1) / 2
    w = w / 2
    a = -math.expm1(-cutoff / length)
    x = -length * np.log1p(-s * a)
    jac = length * a / (1 - s * a)
    return x, w * jac


def _u_rule(nodes: int):
    g, w = np.polynomial.legendre.leggauss(nodes)
    return (g + 1) / 2, w / 2


def _angle_rule(nodes: int):
    return np.arange(nodes) * 2 * np.pi / nodes, np.full(nodes, 1.0 / nodes)


def _tensor_single_site(p, sc, q: QuadratureSpec, frame: str, chunk: int = 200_000,
                        deformation_signs=DEFORMATION_SIGNS):
    length = _decay_length(p, sc, frame)
    cutoff = q.x_cutoff or length * math.log(1e13)
    nu = q.nodes_per_dim
    nx = int(round(q.nodes_per_dim * 1.5))
    u, wu = _u_rule(nu)
    x, wx = _x_rule(nx, length, cutoff)
    psi, wp = _angle_rule(q.angle_nodes)
    th, wt = _angle_rule(q.theta_nodes or (q.angle_nodes if frame == "rotated" else 4 * q.angle_nodes))
    grids = np.meshgrid(u, psi, x, th, indexing="ij")
    weights = (wu[:, None, None, None] * wp[None, :, None, None]
               * wx[None, None, :, None] * wt[None, None, None, :])
    flat = [g.ravel() for g in grids]
    wflat = weights.ravel()
    alg = GrassmannAlgebra(4)
    total = 0j
    for a in range(0, len(wflat), chunk):
        sl = slice(a, a + chunk)
        U = compact_matrix(flat[0][sl], flat[1][sl])
        S = hyperbolic_matrix(flat[2][sl], flat[3][sl])
        el = _integrand_from_matrices(alg, [(U, S)], p, sc, frame,
                                      deformation_signs=deformation_signs)
        total += np.sum(wflat[sl] * _top(el, 1))
    return total, len(wflat)


def _qmc_chain(p, sc, n: int, q: QuadratureSpec, frame: str, replica: int,
               chunk: int = 4096, deformation_signs=DEFORMATION_SIGNS):
    """One scrambled Sobol estimate in chain-relative coordinates.

    Site 1 carries absolute coordinates; site ``j+1`` is ``W_j U_j`` and
    ``T_j S_j`` with the relative coset coordinates drawn from the coupling
    weight ``exp(-bt (v + x_rel))`` by inversion.
    """
    bt = sc.beta_tilde
    dim = 4 * n
    sob = qmc.Sobol(d=dim, scramble=True, seed=np.random.default_rng([q.seed, replica]))
    pts = sob.random(q.mc_points)
    length = _decay_length(p, sc, frame) * n
    cutoff = q.x_cutoff or length * math.log(1e13)
    a = -math.expm1(-cutoff / length)
    alg = GrassmannAlgebra(4 * n)
    total = 0j
    for start in range(0, len(pts), chunk):
        P = pts[start:start + chunk]
        u1 = P[:, 0]
        x1 = -length * np.log1p(-P[:, 2] * a)
        w = length * a / (1 - P[:, 2] * a)
        U = compact_matrix(u1, 2 * np.pi * P[:, 1])
        S = hyperbolic_matrix(x1, 2 * np.pi * P[:, 3])
        mats = [(U, S)]
        shift = np.zeros(len(P))
        for j in range(1, n):
            c = P[:, 4 * j:4 * j + 4]
            # v ~ bt e^{-bt v} on [0, 1], x_rel ~ bt e^{-bt x} on [0, inf)
            v = -np.log1p(-c[:, 0] * (-math.expm1(-bt))) / bt
            xr = -np.log1p(-c[:, 2]) / bt
            xr = np.minimum(xr, 50.0 / bt)
            w = w * (-math.expm1(-bt)) / bt / bt
            shift = shift + bt * (v + xr)
            Wm = compact_matrix(v, 2 * np.pi * c[:, 1])
            Tm = hyperbolic_matrix(xr, 2 * np.pi * c[:, 3])
            U = _mul2(Wm, U)
            S = _mul2(Tm, S)
            mats.append((U, S))
        el = _integrand_from_matrices(alg, mats, p, sc, frame, body_shift=shift,
                                      deformation_signs=deformation_signs)
        total += np.sum(w * _top(el, n))
    return total / len(pts)


def resolve_frame(frame: str, n: int, p: SpectralParams,
                  deformation_signs: tuple = DEFORMATION_SIGNS) -> str:
    """Pick the route for ``frame="auto"``.

    Schwinger for one site and one channel; otherwise the rotated frame where
    its contour move is admissible (it converges much faster), else direct.
    """
    if frame != "auto":
        return frame
    if n == 1 and len(p.gammas) == 1:
        return "schwinger"
    return "rotated" if deformation_signs[1] * p.y2 >= 0 else "direct"


def _schwinger(p, sc, q: QuadratureSpec, deformation_signs):
    from .schwinger import single_site_z

    return single_site_z(p, sc.c0, p.gammas[0], deformation_signs,
                         nodes=q.nodes_per_dim, angle_nodes=q.angle_nodes)


def integrate_sigma_model(p: SpectralParams, n: int, beta: float,
                          q: QuadratureSpec | None = None, frame: str = "auto",
                          calibration: float | None = None,
                          deformation_signs: tuple = DEFORMATION_SIGNS) -> ZResult:
    """Sigma-model generating function on an open chain of ``n`` sites.

    The Grassmann integral is exact.  Single-site grids (``tensor-gauss``)
    report the difference to a grid with 3/4 of the nodes as their error;
    ``low-discrepancy`` reports the standard error over scrambled replicas.
    ``frame`` is one of ``"auto"``, ``"schwinger"``, ``"direct"``, ``"rotated"``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    frame = resolve_frame(frame, n, p, deformation_signs)
    q = q or (QuadratureSpec() if n == 1 else QuadratureSpec(scheme="low-discrepancy"))
    sc = saddle_constants(p.E, beta)
    const = (MEASURE_CONSTANT ** n) if calibration is None else calibration
    pref = math.exp(p.E * (p.x1 - p.x2)) * const
    extra = {"frame": frame, "deformation_signs": list(deformation_signs)}
    if frame == "rotated":
        check_rotation_admissible(p, deformation_signs)
    if frame == "schwinger":
        if n != 1 or len(p.gammas) != 1:
            raise ValueError("the Schwinger route handles one site and one channel")
        val, nodes = _schwinger(p, sc, q, deformation_signs)
        val2, _ = _schwinger(p, sc, q.refined(0.75), deformation_signs)
        err = abs(val - val2) * abs(pref)
    elif q.scheme == "tensor-gauss":
        if n != 1:
            raise ValueError("tensor-gauss supports a single site; use low-discrepancy")
        val, nodes = _tensor_single_site(p, sc, q, frame, deformation_signs=deformation_signs)
        coarse = q.refined(0.75)
        val2, _ = _tensor_single_site(p, sc, coarse, frame, deformation_signs=deformation_signs)
        err = abs(val - val2) * abs(pref)
    else:
        reps = np.array([_qmc_chain(p, sc, n, q, frame, r, deformation_signs=deformation_signs)
                         for r in range(q.replicas)])
        val = reps.mean()
        err = float(np.abs(reps - val).std(ddof=1) / math.sqrt(len(reps))) * abs(pref)
        nodes = q.mc_points * q.replicas
        extra["replicas"] = q.replicas
    # nested-grid differences cannot resolve below the rounding of the node sums
    err = max(err, ROUNDOFF_FLOOR * max(1.0, abs(pref * val)))
    flagged = q.tolerance is not None and err > q.tolerance
    params = {**p.to_dict(), "n": n, "beta": beta}
    return ZResult(complex(pref * val), err, params, nodes, q.scheme, const, flagged, extra)


def gue_limit_z(p: SpectralParams, q: QuadratureSpec | None = None, frame: str = "auto",
                deformation_signs: tuple = DEFORMATION_SIGNS,
                calibration: float | None = None) -> ZResult:
    """Single-supermatrix limit ``e^{E(x1-x2)} int exp{(c0/2) Str Q Lam} prod Sdet^-1(...) dQ``."""
    if p.kappa <= 0:
        raise ValueError("kappa must be positive")
    res = integrate_sigma_model(p, 1, 0.0, q or QuadratureSpec(), frame,
                                calibration=calibration, deformation_signs=deformation_signs)
    res.params.pop("beta", None)
    res.params.pop("n", None)
    res.extra["route"] = "gue_limit"
    return res


def calibrate_normalization(p_ref: SpectralParams, n: int = 1, beta: float = 1.0,
                            q: QuadratureSpec | None = None,
                            probes: Sequence[SpectralParams] | None = None,
                            tol: float = 1e-3) -> float:
    """Measure constant making ``Z(z, z) = 1``, checked at further probes.

    The constant is obtained at the coincident version of ``p_ref`` and must
    reproduce ``Z = 1`` at every probe within ``tol``.
    """
    base = p_ref.replace(x2=p_ref.x1, y2=p_ref.y1)
    raw = integrate_sigma_model(base, n, beta, q, calibration=1.0)
    const = 1.0 / raw.value.real
    if const <= 0 or abs(raw.value.imag) > tol:
        raise CalibrationError(f"raw normalisation {raw.value} is not positive real")
    probes = probes if probes is not None else [
        SpectralParams(E=1.0, y1=0.5, y2=0.5, kappa=0.5, gammas=(1.0,)),
        SpectralParams(E=0.0, y1=1.5, y2=1.5, kappa=1.0, gammas=(0.5,)),
        SpectralParams(E=-0.5, y1=0.3, y2=0.3, kappa=0.7, gammas=(0.8,)),
    ]
    for pr in probes:
        pr = pr.replace(x2=pr.x1, y2=pr.y1)
        z = integrate_sigma_model(pr, n, beta, q, calibration=const).value
        if abs(z - 1) > tol:
            raise CalibrationError(f"constant {const} gives Z = {z} at {pr}")
    return float(const)


# ---------------------------------------------------------------------------
# density of complex eigenvalues
# ---------------------------------------------------------------------------


def _mixed_difference(zfun, E, y, h, kappa, gammas):
    """Central-difference estimate of ``-d/dy [d_y2 Z(y, y2)]_{y2=y} / (4 pi)``.

    The x-part of the identity vanishes: Z depends on ``x1, x2`` only through
    ``exp(E (x1 - x2))`` times a function equal to one on the diagonal, so
    ``d_x2 Z`` restricted to ``x2 = x1`` is the constant ``-E``.  The overall
    minus sign makes the density positive: ``Z`` has the spectral point ``z2``
    in the denominator, so the Laplacian of ``log |det|^2`` enters negatively.
    """
    base = dict(E=E, kappa=kappa, gammas=tuple(gammas))

    def z(a, b):
        return zfun(SpectralParams(y1=a, y2=b, **base))

    g_plus = (z(y + h, y + 2 * h) - z(y + h, y)) / (2 * h)
    g_minus = (z(y - h, y) - z(y - h, y - 2 * h)) / (2 * h)
    return -(g_plus - g_minus) / (2 * h) / (4 * np.pi)


@dataclass(frozen=True)
class DensityPoint:
    """One point of a density curve.

    ``kappa_shift`` is the change of ``rho`` when ``kappa`` is halved (``nan``
    unless requested) and ``imag`` the imaginary residue of the estimate.
    """

    y: float
    rho: float
    flagged: bool
    imag: float
    kappa_shift: float = float("nan")


def density_from_z(E: float, y_grid: Sequence[float], gammas: Sequence[float],
                   fd_step: float = 0.02, kappa_small: float = 1e-3,
                   q: QuadratureSpec | None = None, richardson: bool = True,
                   rel_tol: float = 0.02, zfun=None,
                   kappa_check: bool = False) -> list[DensityPoint]:
    """Density ``rho(E, y)`` of scaled complex eigenvalues ``y = N Im z``.

    Implements ``rho = (1/4pi) lim (d_y1 [d_y2 Z]_{y2=y1} + d_x1 [d_x2 Z]_{x2=x1})``
    at fixed small ``kappa`` with nested central differences of step
    ``fd_step`` (reduced near ``y = 0``); see :func:`_mixed_difference` for the
    sign.  With ``richardson`` the step is halved and the two results are
    extrapolated; points whose two estimates disagree by more than ``rel_tol``
    are flagged.  ``kappa_check`` repeats the estimate at ``kappa/2``.
    """
    if not 1e-4 <= kappa_small <= 1e-2:
        raise ValueError("kappa_small must lie in [1e-4, 1e-2]")
    if zfun is None:
        qq = q or QuadratureSpec(nodes_per_dim=24, angle_nodes=12)
        zfun = lambda pp: gue_limit_z(pp, qq).value  # noqa: E731

    def estimate(y, kappa):
        h = min(fd_step * max(1.0, 0.5 * y), 0.25 * y) if y > 0 else fd_step
        r1 = _mixed_difference(zfun, E, y, h, kappa, gammas)
        if not richardson:
            return r1, False
        r2 = _mixed_difference(zfun, E, y, h / 2, kappa, gammas)
        r = (4 * r2 - r1) / 3
        return r, bool(abs(r2 - r1) > rel_tol * max(abs(r), 1e-8))

    out = []
    for y in y_grid:
        r, flag = estimate(y, kappa_small)
        shift = float("nan")
        if kappa_check:
            shift = float(np.real(estimate(y, kappa_small / 2)[0] - r))
        out.append(DensityPoint(float(y), float(np.real(r)), flag, float(np.imag(r)), shift))
    return out
