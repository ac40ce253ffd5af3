import cmath
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sigmaband.ensemble import SpectralParams
from sigmaband.sigma_model import (DEFORMATION_SIGNS, TAU_HAT, CosetPoint, QuadratureSpec,
                                   _assemble, _shifted, assemble_Q, calibrate_normalization,
                                   check_rotation_admissible, compact_matrix, deformation_shift,
                                   density_from_z, gue_limit_z, hyperbolic_matrix,
                                   integrate_sigma_model, resolve_frame, saddle_constants,
                                   saddle_exponent, sigma_integrand, site_generators)
from sigmaband.superalgebra import GrassmannAlgebra, berezin, even_inverse, sdet, supertrace

L = np.diag([1.0, -1.0])


def random_point(rng):
    return CosetPoint(rng.uniform(), rng.uniform(0, 2 * np.pi),
                      rng.exponential(), rng.uniform(0, 2 * np.pi))


# ---------------------------------------------------------------------------
# saddle constants
# ---------------------------------------------------------------------------


def test_saddle_constants_at_zero_energy():
    sc = saddle_constants(0.0, 1.5)
    assert sc.a_plus == 1 and sc.a_minus == -1
    assert sc.c_plus == 2 and sc.c_minus == 2
    assert sc.c0 == 2 and sc.beta_tilde == 4 * 1.5


def test_saddle_constants_at_sqrt2():
    r = math.sqrt(2)
    sc = saddle_constants(r)
    assert math.isclose(sc.c0, r, rel_tol=1e-15)
    assert abs(sc.a_plus - (-1j * r + r) / 2) < 1e-15
    assert abs(sc.a_minus - (-1j * r - r) / 2) < 1e-15


@given(st.floats(-math.sqrt(2), math.sqrt(2)), st.floats(0.01, 100.0))
def test_saddle_identities(E, beta):
    sc = saddle_constants(E, beta)
    assert abs(sc.c_plus * sc.a_plus**2 - sc.c0 * sc.a_plus) < 1e-14
    assert abs(sc.c_minus * sc.a_minus**2 + sc.c0 * sc.a_minus) < 1e-14
    assert math.isclose(sc.c0, 2 * math.pi * (math.sqrt(4 - E * E) / (2 * math.pi)))
    assert math.isclose(sc.beta_tilde, sc.c0**2 * beta)
    assert abs(saddle_exponent(sc.a_plus, E).real) < 1e-12
    assert abs(saddle_exponent(sc.a_minus, E).real) < 1e-12


def test_saddle_constants_reject_band_edge():
    with pytest.raises(ValueError):
        saddle_constants(2.0)
    with pytest.raises(ValueError):
        saddle_constants(-2.5)


# ---------------------------------------------------------------------------
# coset points and Q
# ---------------------------------------------------------------------------


def test_tau_hat_convention_is_recorded():
    assert TAU_HAT == ("tau_1", "tau_2")


@given(st.floats(0, 1), st.floats(0, 2 * np.pi), st.floats(0, 50), st.floats(0, 2 * np.pi))
def test_coset_matrices_are_in_their_groups(u, psi, x, theta):
    pt = CosetPoint(u, psi, x, theta)
    U, S = pt.U(), pt.S()
    assert np.allclose(U.conj().T @ U, np.eye(2), atol=1e-14)
    assert np.allclose(S.conj().T @ L @ S, L, atol=1e-14 * (1 + x))
    assert math.isclose(abs(U[0, 1]) ** 2, u, abs_tol=1e-14)
    assert math.isclose(abs(S[0, 1]) ** 2, x, rel_tol=1e-13, abs_tol=1e-14)


def test_q_at_identity_is_diag_l_minus_l():
    alg = GrassmannAlgebra(4)
    Q = assemble_Q(CosetPoint(0.0, 0.0, 0.0, 0.0), 0, alg)
    assert np.allclose(Q.body(), np.diag([1, -1, -1, 1]))


def test_q_body_squares_to_identity():
    rng = np.random.default_rng(1)
    alg = GrassmannAlgebra(4)
    for _ in range(10):
        B = assemble_Q(random_point(rng), 0, alg).body()
        assert np.allclose(B @ B, np.eye(4), atol=1e-10)


def test_q_supertrace_body_vanishes():
    rng = np.random.default_rng(2)
    alg = GrassmannAlgebra(4)
    for _ in range(20):
        assert abs(supertrace(assemble_Q(random_point(rng), 0, alg)).body) < 1e-12


def test_q_uses_distinct_generator_blocks():
    alg = GrassmannAlgebra(8)
    assert site_generators(1) == (4, 5, 6, 7)
    Q = assemble_Q(CosetPoint(0.3, 0.1, 0.5, 0.2), 1, alg)
    used = set()
    for i in range(4):
        for k in range(4):
            for mask in Q[i, k].terms:
                used |= {g for g in range(8) if mask >> g & 1}
    assert used == {4, 5, 6, 7}
    with pytest.raises(ValueError):
        assemble_Q(CosetPoint(0.3, 0.1, 0.5, 0.2), 2, alg)


# ---------------------------------------------------------------------------
# integrand
# ---------------------------------------------------------------------------

P1 = SpectralParams(E=0.0, x1=0.0, y1=1.0, x2=0.0, y2=2.0, kappa=1.0, gammas=(0.5,))


def test_integrand_is_even():
    rng = np.random.default_rng(3)
    sc = saddle_constants(P1.E)
    for n in (1, 2):
        el = sigma_integrand([random_point(rng) for _ in range(n)], P1, sc)
        for mask, c in el.terms.items():
            if bin(mask).count("1") % 2:
                assert abs(c) == 0


def test_top_coefficient_is_smooth_on_probe_grid():
    g = np.linspace(0.05, 0.95, 5)
    u, psi, x, theta = np.meshgrid(g, 2 * np.pi * g, 3 * g, 2 * np.pi * g, indexing="ij")
    pt = CosetPoint(u.ravel(), psi.ravel(), x.ravel(), theta.ravel())
    el = sigma_integrand([pt], P1, saddle_constants(P1.E))
    top = berezin(el, list(site_generators(0))).body
    assert np.shape(top) == (625,)
    assert np.all(np.isfinite(top))


def test_sdet_factor_without_grassmann_parts_is_determinant_ratio():
    rng = np.random.default_rng(4)
    alg = GrassmannAlgebra(4)
    sc = saddle_constants(0.7)
    for _ in range(5):
        pt = random_point(rng)
        U, S = pt.U(), pt.S()
        Q = _assemble(alg, 0, U, S, U.conj().T, None)
        C = deformation_shift(0.7, 1e-3, sc.c0)
        body = Q.body() + C
        # second diagonal block in the numerator, matching the supertrace sign
        expect = np.linalg.det(body[2:, 2:]) / np.linalg.det(body[:2, :2])
        got = sdet(_shifted(Q, C)).body
        assert abs(got - expect) < 1e-12 * max(1, abs(expect))


def test_two_equal_channels_square_the_deformation_factor():
    pt = CosetPoint(0.4, 0.3, 0.8, 1.1)
    sc = saddle_constants(0.3)
    p1 = SpectralParams(E=0.3, y1=0.5, y2=1.0, kappa=0.7, gammas=(0.5,))
    p2 = p1.replace(gammas=(0.5, 0.5))
    alg = GrassmannAlgebra(4)
    el1 = sigma_integrand([pt], p1, sc, algebra=alg)
    el2 = sigma_integrand([pt], p2, sc, algebra=alg)
    Q = assemble_Q(pt, 0, alg)
    factor = even_inverse(sdet(_shifted(Q, deformation_shift(0.3, 0.5, sc.c0))))
    diff = el2 - el1 * factor
    assert max(abs(c) for c in diff.terms.values()) < 1e-12 * el2.max_abs_coefficient()


def test_integrand_requires_a_site():
    with pytest.raises(ValueError):
        sigma_integrand([], P1, saddle_constants(0.0))


# ---------------------------------------------------------------------------
# frames and admissibility
# ---------------------------------------------------------------------------


def test_frame_selection():
    assert resolve_frame("auto", 1, P1) == "schwinger"
    assert resolve_frame("auto", 2, P1) == "direct"
    assert resolve_frame("auto", 2, P1.replace(y2=-1.0)) == "rotated"
    assert resolve_frame("direct", 1, P1) == "direct"
    with pytest.raises(ValueError):
        check_rotation_admissible(P1, DEFORMATION_SIGNS)
    check_rotation_admissible(P1, (1.0, 1.0))


def test_schwinger_route_rejects_chains():
    with pytest.raises(ValueError):
        integrate_sigma_model(P1, 2, 1.0, frame="schwinger")


def test_tensor_grid_rejects_chains():
    with pytest.raises(ValueError):
        integrate_sigma_model(P1, 2, 1.0, QuadratureSpec(), frame="direct")


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        QuadratureSpec(nodes_per_dim=4)
    with pytest.raises(ValueError):
        QuadratureSpec(scheme="simpson")
    assert QuadratureSpec().refined().nodes_per_dim == 48


# ---------------------------------------------------------------------------
# integrated values
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("E,kappa,gamma", [(0.0, 1.0, 0.5), (1.0, 0.5, 1.0), (-0.4, 0.8, 0.3)])
def test_normalization_at_coincident_points(E, kappa, gamma):
    p = SpectralParams(E=E, x1=0.3, y1=0.7, x2=0.3, y2=0.7, kappa=kappa, gammas=(gamma,))
    for res in (integrate_sigma_model(p, 1, 1.0), gue_limit_z(p)):
        assert abs(res.value - 1) < 1e-3
        assert not res.flagged


def test_normalization_in_the_rotated_frame():
    p = SpectralParams(E=0.5, x1=0.1, y1=-0.6, x2=0.1, y2=-0.6, kappa=0.9, gammas=(0.7,))
    res = integrate_sigma_model(p, 1, 1.0, QuadratureSpec(nodes_per_dim=32), frame="rotated")
    assert abs(res.value - 1) < 1e-3


def test_deformation_free_equal_argument_limit():
    p = SpectralParams(E=0.2, y1=0.0, y2=0.0, kappa=1.0, gammas=(1e-6,))
    assert abs(gue_limit_z(p).value - 1) < 1e-3


def test_multichannel_gue_limit_normalization():
    p = SpectralParams(E=0.0, y1=0.5, y2=0.5, kappa=1.0, gammas=(0.5, 0.5))
    res = gue_limit_z(p, QuadratureSpec(nodes_per_dim=24, angle_nodes=12))
    assert abs(res.value - 1) < 1e-3


def test_single_site_value_matches_reference():
    # independent evaluation: tensor grid in the direct frame against the Schwinger route
    a = gue_limit_z(P1)
    b = gue_limit_z(P1, QuadratureSpec(nodes_per_dim=40, angle_nodes=16), frame="direct")
    assert abs(a.value - b.value) < 2e-2
    assert abs(a.value.imag) < 1e-10


def test_prefactor_depends_on_real_offsets_only_through_exponential():
    p = P1.replace(x1=0.4, x2=-0.1, E=0.6)
    q = p.replace(x1=0.0, x2=0.0)
    ratio = gue_limit_z(p).value / gue_limit_z(q).value
    assert abs(ratio - cmath.exp(0.6 * 0.5)) < 1e-10


def test_quadrature_doubling_within_reported_error():
    q = QuadratureSpec(nodes_per_dim=24)
    a = integrate_sigma_model(P1, 1, 1.0, q)
    b = integrate_sigma_model(P1, 1, 1.0, q.refined())
    assert abs(a.value - b.value) <= a.error


def test_tolerance_flags_rather_than_hides():
    q = QuadratureSpec(scheme="low-discrepancy", mc_points=2**8, replicas=4, tolerance=1e-12)
    res = integrate_sigma_model(P1.replace(y2=-1.0), 2, 1.0, q)
    assert res.flagged and res.error > 1e-12


def test_result_json_schema(tmp_path):
    res = gue_limit_z(P1)
    path = tmp_path / "z.json"
    res.to_json(path)
    import json
    rec = json.loads(path.read_text())
    assert {"params", "z_re", "z_im", "err_estimate", "nodes", "scheme",
            "calibration_constant"} <= set(rec)
    assert rec["route"] == "gue_limit"


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def test_calibration_constant_is_positive_and_universal():
    ref = SpectralParams(E=0.5, x1=0.1, y1=0.4, x2=0.2, y2=0.9, kappa=0.8, gammas=(0.6,))
    const = calibrate_normalization(ref)
    assert const > 0
    assert abs(const - 1) < 1e-3


def test_chain_constant_is_square_of_site_constant():
    ref = SpectralParams(E=0.0, x1=0.1, y1=-0.4, x2=0.2, y2=-0.9, kappa=1.0, gammas=(0.5,))
    c1 = calibrate_normalization(ref, probes=[])
    q = QuadratureSpec(scheme="low-discrepancy", mc_points=2**13, replicas=8)
    c2 = calibrate_normalization(ref, n=2, beta=1e3, q=q, probes=[], tol=1e-2)
    assert abs(c2 - c1**2) < 5e-3


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------


def test_density_is_real_positive_and_step_stable():
    ys = [0.5, 1.0]
    a = density_from_z(0.0, ys, (0.5,))
    b = density_from_z(0.0, ys, (0.5,), fd_step=0.01)
    for pa, pb in zip(a, b):
        # quadrature-limited residue; it shrinks with refinement (see next test)
        assert abs(pa.imag) < 1e-5
        assert pa.rho > 0
        assert abs(pa.rho - pb.rho) < 0.02 * pa.rho


def test_density_imaginary_residue_shrinks_with_refinement():
    coarse = density_from_z(0.0, [1.0], (0.5,))[0]
    fine = density_from_z(0.0, [1.0], (0.5,),
                          q=QuadratureSpec(nodes_per_dim=48, angle_nodes=24))[0]
    assert abs(fine.imag) < 1e-6 < abs(coarse.imag)
    assert abs(fine.rho - coarse.rho) < 1e-4


def test_density_rejects_large_kappa():
    with pytest.raises(ValueError):
        density_from_z(0.0, [0.5], (0.5,), kappa_small=0.1)
