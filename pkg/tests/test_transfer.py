import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sigmaband.ensemble import SpectralParams
from sigmaband.sigma_model import CosetPoint, gue_limit_z, saddle_constants
from sigmaband.superalgebra import GrassmannAlgebra
from sigmaband.transfer import (MIRROR_SIGNS, THETA_CONSTANTS, TRANSFER_SIGNS, RotatedParams,
                                TransferGrid,
                                _theta_quadrature, build_fhat, build_kernel, build_transfer,
                                d1_closed_form, d1_coefficients, d1_factor, det_a_closed_form,
                                det_b_closed_form, dump_operator, f_weights,
                                fit_theta_constants, kernel_ks, kernel_ku, laplace_check,
                                multiply_d1, rotated_blocks, spectral_radius, theta_average,
                                validate_relative_v, z_limit, z_via_transfer)


def random_setup(rng):
    E = rng.uniform(-1.4, 1.4)
    c0 = saddle_constants(E).c0
    p = SpectralParams(E=E, kappa=rng.uniform(0.3, 1.5), y1=rng.uniform(0, 2),
                       y2=rng.uniform(0, 2), gammas=(rng.uniform(0.2, 2.0),))
    pt = CosetPoint(rng.random(), rng.uniform(0, 2 * np.pi),
                    rng.exponential(), rng.uniform(0, 2 * np.pi))
    return p, c0, RotatedParams.from_spectral(p, c0), pt


# ---------------------------------------------------------------------------
# rotated parameters and weights
# ---------------------------------------------------------------------------


def test_three_four_five():
    rp = RotatedParams.from_spectral(SpectralParams(E=0.0, kappa=3.0, y1=4.0, y2=0.0))
    assert rp.kappa1 == 5.0 and rp.kappa2 == 3.0
    assert math.isclose(math.sin(rp.alpha1), 0.8)
    assert rp.alpha2 == 0.0


@given(st.floats(0.05, 5.0), st.floats(-1.4, 1.4))
def test_tau_bound(gamma, E):
    c0 = saddle_constants(E).c0
    rp = RotatedParams.from_spectral(SpectralParams(E=E, gammas=(gamma,)), c0)
    assert rp.tau_a[0] >= 2 / c0 - 1e-15


def test_tau_equality_at_unit_gamma():
    rp = RotatedParams.from_spectral(SpectralParams(E=0.0, gammas=(1.0,)))
    assert rp.tau_a[0] == 1.0


def test_rotated_params_validation():
    with pytest.raises(ValueError):
        RotatedParams(0.5, 1.0, 0.1, 0.1, (1.0,), 1.0)
    with pytest.raises(ValueError):
        RotatedParams(1.0, 1.0, 2.0, 0.1, (1.0,), 1.0)


def test_f_weight_examples():
    rp = RotatedParams.from_spectral(SpectralParams(E=0.0, kappa=0.7, y1=0.0, y2=0.0))
    F, F1 = f_weights(0.5, 0.0, rp, 3, 2.0)
    assert math.isclose(F, math.exp(-(2.0 / 3) * 0.7 / 2))
    # F1 vanishes where k1 (1/2 - u) = k2 (1/2 + x)
    rp2 = RotatedParams.from_spectral(SpectralParams(E=0.0, kappa=1.0, y1=math.sqrt(3), y2=0.0))
    _, F1 = f_weights(0.0, 0.5, rp2, 2, 2.0)  # 2 * 1/2 = 1 * 1
    assert abs(F1) < 1e-15


# ---------------------------------------------------------------------------
# boundary factor
# ---------------------------------------------------------------------------


def test_det_b_closed_form_on_fifty_points():
    rng = np.random.default_rng(11)
    for _ in range(50):
        p, c0, rp, pt = random_setup(rng)
        _, B = rotated_blocks(pt.U(), pt.S(), rp, p.E, p.gammas[0], c0)
        det_b = B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]
        t = 2 * math.asinh(math.sqrt(pt.x))
        closed = det_b_closed_form(t, pt.theta, rp, p.gammas[0], c0)
        assert abs(det_b - closed) <= 1e-12 * max(1.0, abs(closed))


def test_det_a_closed_form_on_fifty_points():
    rng = np.random.default_rng(12)
    for _ in range(50):
        p, c0, rp, pt = random_setup(rng)
        phi = 2 * math.asin(math.sqrt(pt.u))
        for signs in (TRANSFER_SIGNS, MIRROR_SIGNS):
            A, _ = rotated_blocks(pt.U(), pt.S(), rp, p.E, p.gammas[0], c0, signs)
            det_a = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
            closed = det_a_closed_form(phi, pt.psi, rp, p.gammas[0], c0, signs[0])
            assert abs(det_a - closed) <= 1e-12 * max(1.0, abs(closed))


def test_d1_engine_matches_closed_form():
    rng = np.random.default_rng(13)
    for _ in range(50):
        p, c0, rp, pt = random_setup(rng)
        eng = d1_coefficients(d1_factor(pt, rp, p.E, p.gammas[0], c0=c0))
        cf = d1_closed_form(pt.U(), pt.S(), rp, p.E, p.gammas[0], c0)
        assert set(eng) == {"c1", "c2", "c3", "c4", "d1", "d2"}
        for k in eng:
            assert abs(eng[k] - cf[k]) <= 1e-12 * max(1.0, abs(eng[k]))


def test_d1_body_is_determinant_ratio():
    rng = np.random.default_rng(14)
    p, c0, rp, pt = random_setup(rng)
    A, B = rotated_blocks(pt.U(), pt.S(), rp, p.E, p.gammas[0], c0)
    det_a = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    det_b = B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]
    c1 = d1_coefficients(d1_factor(pt, rp, p.E, p.gammas[0], c0=c0))["c1"]
    assert abs(c1 - det_a / det_b) < 1e-12 * max(1.0, abs(c1))


def test_supersymbol_product_matches_engine():
    rng = np.random.default_rng(15)
    p, c0, rp, pt = random_setup(rng)
    alg = GrassmannAlgebra(4)
    a = d1_factor(pt, rp, p.E, 0.4, alg, c0)
    b = d1_factor(pt, rp, p.E, 1.3, alg, c0)
    got = multiply_d1(d1_coefficients(a), d1_coefficients(b))
    expect = d1_coefficients(a * b)
    for k in expect:
        assert abs(got[k] - expect[k]) < 1e-12 * max(1.0, abs(expect[k]))


# ---------------------------------------------------------------------------
# theta average
# ---------------------------------------------------------------------------


def test_theta_average_at_t_zero():
    for delta in (1, 2, 3):
        q = _theta_quadrature(1.3, 0.0, 0.4, delta, nodes=64)
        assert abs(theta_average(1.3, 0.0, 0.4, 1) - 1 / (1.3 + math.sin(0.4))) < 1e-14
        assert abs(theta_average(1.3, 0.0, 0.4, delta) - q) < 1e-12


def test_theta_average_first_order_matches_dense_quadrature():
    rng = np.random.default_rng(16)
    for _ in range(20):
        tau, t, a2 = rng.uniform(1, 3), rng.uniform(0, 3), rng.uniform(0, 1.5)
        q = _theta_quadrature(tau, t, a2, 1, nodes=10_000)
        assert abs(theta_average(tau, t, a2, 1) - q) < 1e-10


def test_theta_constants_fit_and_validate():
    fit = fit_theta_constants(np.random.default_rng(17))
    assert abs(fit[1] - 1.0) < 1e-12 and THETA_CONSTANTS[1] == 1.0
    for delta in (2, 3):
        assert abs(fit[delta] - THETA_CONSTANTS[delta]) < 1e-10
    rng = np.random.default_rng(18)
    for delta in (2, 3):
        for _ in range(100):
            tau, t, a2 = rng.uniform(1, 3), rng.uniform(0, 3), rng.uniform(0, 1.5)
            q = _theta_quadrature(tau, t, a2, delta)
            assert abs(theta_average(tau, t, a2, delta) - q) < 1e-8 * max(1.0, abs(q))


def test_theta_average_rejects_other_orders():
    with pytest.raises(ValueError):
        theta_average(1.0, 0.5, 0.2, 4)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def test_relative_coordinates_match_matrix_products():
    assert validate_relative_v() < 1e-12


@pytest.mark.parametrize("bt", [100.0, 1000.0])
def test_kernel_row_sums(bt):
    grid = TransferGrid.build(bt, 30.0)
    kp = build_kernel(grid, bt)
    ru, rs = kp.row_sums()
    assert np.max(np.abs(ru + math.expm1(-bt))) < 1e-8
    inner = grid.t_nodes < grid.t_nodes[-1] - 12 / math.sqrt(bt)
    assert np.max(np.abs(rs[inner] - 1)) < 1e-8


def test_kernel_zero_mode_closed_form_matches_angle_average():
    u, up = np.array([0.2, 0.5, 0.9]), np.array([0.25, 0.45, 0.85])
    assert np.allclose(kernel_ku(u, up, 50.0), kernel_ku(u, up, 50.0, angle_nodes=512),
                       rtol=1e-10)
    x, xp = np.array([0.1, 1.0, 4.0]), np.array([0.12, 0.9, 4.2])
    assert np.allclose(kernel_ks(x, xp, 50.0), kernel_ks(x, xp, 50.0, angle_nodes=512),
                       rtol=1e-10)


def test_kernel_concentrates_at_large_beta():
    bt = 1e4
    grid = TransferGrid.build(bt, 1.0)
    kp = build_kernel(grid, bt, check=False)
    KU, _ = kp.dense()
    u = grid.u_nodes
    for i in range(len(u) // 4, 3 * len(u) // 4, 37):
        near = np.abs(u - u[i]) < 5 / math.sqrt(bt)
        assert KU[i, near].sum() / KU[i].sum() > 0.99


def test_coarse_grid_is_rejected():
    grid = TransferGrid.build(4.0, 30.0, panel_order=2, min_panels=1)
    with pytest.raises(ValueError):
        build_kernel(grid, 400.0)


# ---------------------------------------------------------------------------
# graded operators
# ---------------------------------------------------------------------------

RP = RotatedParams.from_spectral(SpectralParams(E=0.0, kappa=1.0, y1=0.7, y2=0.7))


def small_grid():
    return TransferGrid.build(16.0, 2.0, panel_order=2, min_panels=2)


def test_fhat_without_f1_is_block_diagonal_with_equal_blocks():
    Fh = build_fhat(small_grid(), RP, 2, 2.0, zero_f1=True)
    assert set(Fh.blocks) == {(i, i) for i in range(4)}
    b0 = Fh.block(0, 0)
    for i in range(1, 4):
        assert np.array_equal(Fh.block(i, i), b0)


def test_fhat_pattern_is_unipotent_up_to_f():
    grid = small_grid()
    Fh = build_fhat(grid, RP, 2, 2.0)
    assert Fh.is_upper_triangular()
    size = grid.shape[0] * grid.shape[1]
    full = np.block([[Fh.block(i, j) for j in range(4)] for i in range(4)])
    F, F1 = f_weights(grid.u_nodes[:, None], grid.x_nodes[None, :], RP, 2, 2.0)
    sign, logdet = np.linalg.slogdet(full)
    assert abs(logdet - 4 * np.sum(np.log(F))) < 1e-10
    assert np.allclose(Fh.block(0, 3), np.diag((F * F1**2).ravel()))
    assert np.allclose(Fh.block(0, 1), np.diag((F * F1).ravel()))
    assert size == Fh.block(0, 0).shape[0]


def test_transfer_is_upper_triangular_product():
    grid = TransferGrid.build(100.0, 5.0)
    M = build_transfer(grid, RP, 100.0, 2, 2.0)
    assert M.is_upper_triangular()
    assert M.name == "FKF"


def test_spectral_radius_approaches_one():
    # coincident points: k1 = k2 and a1 = a2
    radii = [spectral_radius(RP, bt, 4, 2.0) for bt in (1e2, 1e3, 1e4)]
    gaps = [abs(1 - r) for r in radii]
    assert gaps[0] > gaps[1] > gaps[2]


# ---------------------------------------------------------------------------
# generating function
# ---------------------------------------------------------------------------

P = SpectralParams(E=0.0, x1=0.0, y1=1.0, x2=0.0, y2=2.0, kappa=1.0, gammas=(0.5,))


def test_power_and_contour_routes_agree():
    rp = RotatedParams.from_spectral(P)
    zp = z_via_transfer(rp, 0.0, P.gammas, 4, 100.0)
    for A in (1.0, 2.0, 4.0):
        zc = z_via_transfer(rp, 0.0, P.gammas, 4, 100.0, route="contour", A=A)
        assert abs(zp - zc) < 1e-6


def test_power_route_needs_two_sites():
    rp = RotatedParams.from_spectral(P)
    with pytest.raises(ValueError):
        z_via_transfer(rp, 0.0, P.gammas, 1, 100.0)
    with pytest.raises(ValueError):
        z_via_transfer(rp, 0.0, P.gammas, 2, 100.0, route="spiral")


def test_transfer_normalization_at_coincident_points():
    p = SpectralParams(E=0.0, x1=0.3, y1=0.7, x2=0.3, y2=0.7, kappa=1.0, gammas=(0.5,))
    rp = RotatedParams.from_spectral(p)
    z = z_via_transfer(rp, 0.0, p.gammas, 4, 1e3, x1=0.3, x2=0.3)
    assert abs(z - 1) < 1e-2
    grid = TransferGrid.for_params(rp, 4, 2.0, 1e3)
    assert abs(z_limit(rp, 0.0, p.gammas, 4, grid) - 1) < 1e-2


def test_transfer_approaches_limit_object_and_gue_limit():
    rp = RotatedParams.from_spectral(P)
    ref = gue_limit_z(P, deformation_signs=MIRROR_SIGNS).value
    gaps = []
    for bt in (1e2, 1e3):
        gaps.append(abs(z_via_transfer(rp, 0.0, P.gammas, 4, bt) - ref))
    assert gaps[1] < gaps[0]
    grid = TransferGrid.for_params(rp, 4, 2.0, 1e3)
    assert abs(z_limit(rp, 0.0, P.gammas, 4, grid) - ref) < 0.02


def test_two_channel_boundary_factor():
    p = SpectralParams(E=0.0, y1=0.5, y2=0.5, kappa=1.0, gammas=(0.5, 0.8))
    rp = RotatedParams.from_spectral(p)
    grid = TransferGrid.for_params(rp, 2, 2.0, 100.0)
    assert abs(z_limit(rp, 0.0, p.gammas, 2, grid) - 1) < 1e-2


# ---------------------------------------------------------------------------
# Laplace operators
# ---------------------------------------------------------------------------


def test_laplacian_annihilates_constants():
    nodes = np.linspace(0, 1, 41)
    for which in ("U", "S"):
        out = laplace_check(np.ones_like(nodes), nodes, which)
        assert np.all(np.abs(out[1:-1]) < 1e-12)
        assert np.isnan(out[0]) and np.isnan(out[-1])


def test_laplacian_of_polynomials_on_nonuniform_grid():
    nodes = np.sort(np.random.default_rng(19).uniform(0, 1, 60))
    out = laplace_check(nodes, nodes, "U")
    assert np.allclose(out[1:-1], 2 * nodes[1:-1] - 1, atol=1e-6)
    x = np.linspace(0, 5, 51)
    assert np.allclose(laplace_check(x, x, "S")[1:-1], -(2 * x[1:-1] + 1), atol=1e-6)
    # f = x^2: -(x(1-x) 2x)' = 6x^2 - 4x
    assert np.allclose(laplace_check(nodes**2, nodes, "U")[1:-1],
                       6 * nodes[1:-1] ** 2 - 4 * nodes[1:-1], atol=1e-9)
    with pytest.raises(ValueError):
        laplace_check(x, x, "V")


def test_quadratic_form_comparison_is_reported():
    bt = 100.0
    grid = TransferGrid.build(bt, 4.0)
    kp = build_kernel(grid, bt, check=False)
    KU, _ = kp.dense()
    u, w = grid.u_nodes, grid.u_weights
    rng = np.random.default_rng(20)
    ratios = []
    for _ in range(20):
        c = rng.normal(size=3)
        phi = c[0] * np.cos(np.pi * u) + c[1] * np.cos(2 * np.pi * u) + c[2] * u**2
        lhs = bt * np.sum(w * phi * (phi - KU @ phi))
        lap = laplace_check(phi, u, "U")
        rhs = np.nansum(w * phi * lap)
        ratios.append(lhs / rhs)
    print(f"fitted constant C = {max(ratios):.3f} over 20 probes")
    assert all(np.isfinite(ratios))


# ---------------------------------------------------------------------------
# dumps
# ---------------------------------------------------------------------------


def test_dump_operator_sidecar(tmp_path):
    grid = small_grid()
    Fh = build_fhat(grid, RP, 2, 2.0)
    path = tmp_path / "fhat.bin"
    dump_operator(Fh, path, {"beta_tilde": 16.0})
    info = json.loads((tmp_path / "fhat.bin.json").read_text())
    size = grid.shape[0] * grid.shape[1]
    assert info["shape"] == list(grid.shape) and info["beta_tilde"] == 16.0
    assert len(info["blocks"]) == 9
    raw = np.frombuffer(path.read_bytes(), dtype="<c16")
    assert raw.size == 9 * size * size
    first = raw[:size * size].reshape(size, size)
    assert np.array_equal(first, Fh.block(*[(b["row"], b["col"]) for b in info["blocks"]][0]))
