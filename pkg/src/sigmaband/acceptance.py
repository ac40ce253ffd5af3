"""Acceptance suite: eight criteria shared by the CLI and the test-suite.

Every ``check_*`` function returns a :class:`CriterionResult`.  ``quick=True``
shrinks sample counts; the tolerances used are recorded in the result
details, so a quick run is never mistaken for a full one.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import ensemble as ens
from . import sigma_model as sm
from . import superalgebra as sa
from . import transfer as tr
from .ensemble import BlockBandModel, Deformation, SpectralParams

__all__ = [
    "CriterionResult",
    "AcceptanceConfig",
    "A2_PARAMS",
    "NORMALIZATION_SETS",
    "CRITERIA",
    "run_acceptance",
    "width_cdf_from_density",
    "kolmogorov_distance",
]

# spectral parameters of the band-width and coupling-limit comparisons
A2_PARAMS = SpectralParams(E=0.0, x1=0.0, y1=1.0, x2=0.0, y2=2.0, kappa=1.0, gammas=(0.5,))

# (E, kappa, gamma, n) probed at z1 = z2
NORMALIZATION_SETS = ((0.0, 1.0, 0.5, 1), (1.0, 0.5, 1.0, 1), (0.0, 0.5, 1.0, 2), (1.0, 1.0, 0.5, 2))

# reference point for the measure constant (distinct from every probe above)
CALIBRATION_REFERENCE = SpectralParams(E=0.5, x1=0.1, y1=0.4, x2=0.2, y2=0.9, kappa=0.8,
                                       gammas=(0.7,))

# chain coupling for two-site sigma-model evaluations (coupling-limit comparison)
CHAIN_BETA = 1e3
CHAIN_POINTS = 2**17


@dataclass
class CriterionResult:
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)
    runtime: float = 0.0
    expected_failure: str | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        note = f" [{self.expected_failure}]" if (self.expected_failure and not self.passed) else ""
        return f"{self.name} {status} {self.summary} ({self.runtime:.1f}s){note}"

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "summary": self.summary,
                "runtime": self.runtime, "expected_failure": self.expected_failure,
                "details": _jsonable(self.details)}


@dataclass(frozen=True)
class AcceptanceConfig:
    quick: bool = False
    workers: int = 1
    seed: int = 11
    calibration: float | None = None  # override of the measured constant (negative tests)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": float(obj.real), "im": float(obj.imag)}
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _timed(fn: Callable[[AcceptanceConfig], CriterionResult]):
    def run(cfg: AcceptanceConfig = AcceptanceConfig()) -> CriterionResult:
        t0 = time.perf_counter()
        res = fn(cfg)
        res.runtime = time.perf_counter() - t0
        res.details["quick"] = cfg.quick
        return res

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def _coincident(E, kappa, gamma) -> SpectralParams:
    return SpectralParams(E=E, x1=0.3, y1=0.7, x2=0.3, y2=0.7, kappa=kappa, gammas=(gamma,))


def _chain_spec(quick: bool) -> sm.QuadratureSpec:
    return sm.QuadratureSpec(scheme="low-discrepancy",
                             mc_points=CHAIN_POINTS // (8 if quick else 1))


# ---------------------------------------------------------------------------
# A1 normalization
# ---------------------------------------------------------------------------


@_timed
def check_normalization(cfg: AcceptanceConfig) -> CriterionResult:
    """Z = 1 at z1 = z2 for the sigma model, its GUE limit and the transfer route."""
    const = cfg.calibration
    if const is None:
        const = sm.calibrate_normalization(CALIBRATION_REFERENCE, n=1, beta=1.0)
    rows = []
    worst_sigma = worst_transfer = 0.0
    for E, kappa, gamma, n in NORMALIZATION_SETS:
        p = _coincident(E, kappa, gamma)
        beta = 1.0 if n == 1 else CHAIN_BETA
        q = None if n == 1 else _chain_spec(cfg.quick)
        z_sig = sm.integrate_sigma_model(p, n, beta, q, calibration=const**n)
        z_gue = sm.gue_limit_z(p, calibration=const)
        rp = tr.RotatedParams.from_spectral(p)
        bt = 1e3 if cfg.quick else 1e4
        z_tr = tr.z_via_transfer(rp, E, p.gammas, 4, bt, x1=p.x1, x2=p.x2)
        dev = max(abs(z_sig.value - 1), abs(z_gue.value - 1))
        worst_sigma = max(worst_sigma, dev)
        worst_transfer = max(worst_transfer, abs(z_tr - 1))
        rows.append({"E": E, "kappa": kappa, "gamma": gamma, "n": n, "beta": beta,
                     "sigma": z_sig.value, "sigma_err": z_sig.error, "frame": z_sig.extra["frame"],
                     "gue_limit": z_gue.value, "transfer": z_tr, "transfer_n": 4,
                     "beta_tilde": bt})
    tol_sigma, tol_transfer = 1e-3, 1e-2
    ok = worst_sigma <= tol_sigma and worst_transfer <= tol_transfer
    return CriterionResult(
        "A1", ok,
        f"max|Z-1| sigma/gue {worst_sigma:.1e} (tol {tol_sigma:g}), "
        f"transfer {worst_transfer:.1e} (tol {tol_transfer:g})",
        {"calibration_constant": const, "rows": rows})


# ---------------------------------------------------------------------------
# A2 band-width limit
# ---------------------------------------------------------------------------


@_timed
def check_band_width_limit(cfg: AcceptanceConfig) -> CriterionResult:
    """Monte Carlo Z at W = 32, 64, 128 approaches the one-site sigma model."""
    p = A2_PARAMS
    z_sig = sm.integrate_sigma_model(p, 1, 1.0)
    samples = 2000 if cfg.quick else 20000
    rows, gaps = [], []
    for W in (32, 64, 128):
        est = ens.mc_generating_function(BlockBandModel(1, W, 1.0), p, samples,
                                         seed=cfg.seed, workers=cfg.workers)
        gap = abs(est.estimate - z_sig.value)
        gaps.append(gap)
        rows.append({"W": W, "z_mc": est.estimate, "se": est.se, "gap": gap,
                     "rejected": est.rejected})
    se = rows[-1]["se"]
    bound = 5 * se + 0.05
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    ok = decreasing and gaps[-1] <= bound
    return CriterionResult(
        "A2", ok,
        f"gaps {', '.join(f'{g:.4f}' for g in gaps)} strictly decreasing={decreasing}, "
        f"final {gaps[-1]:.4f} <= {bound:.4f}",
        {"z_sigma": z_sig.value, "z_sigma_err": z_sig.error, "samples": samples,
         "seed": cfg.seed, "rows": rows})


# ---------------------------------------------------------------------------
# A3 coupling limit
# ---------------------------------------------------------------------------


@_timed
def check_coupling_limit(cfg: AcceptanceConfig) -> CriterionResult:
    """Transfer route approaches the GUE limit as beta~ grows; two-site sigma model agrees."""
    p = A2_PARAMS
    # the rotated transfer chain reproduces the single-site integral in the
    # orientation where its contour move is admissible
    ref_mirror = sm.gue_limit_z(p, deformation_signs=tr.MIRROR_SIGNS).value
    ref = sm.gue_limit_z(p).value
    rp = tr.RotatedParams.from_spectral(p)
    n = 4
    rows, gaps = [], []
    for bt in (1e2, 1e3, 1e4):
        z = tr.z_via_transfer(rp, p.E, p.gammas, n, bt, x1=p.x1, x2=p.x2)
        gaps.append(abs(z - ref_mirror))
        rows.append({"beta_tilde": bt, "z_transfer": z, "gap": gaps[-1]})
    decreasing = all(b < a for a, b in zip(gaps, gaps[1:]))
    z2 = sm.integrate_sigma_model(p, 2, CHAIN_BETA, _chain_spec(cfg.quick))
    gap2 = abs(z2.value - ref)
    tol = 0.02
    ok = decreasing and gaps[-1] <= tol and gap2 <= tol
    return CriterionResult(
        "A3", ok,
        f"transfer gaps {', '.join(f'{g:.4f}' for g in gaps)} decreasing={decreasing}, "
        f"final <= {tol}; sigma(n=2, beta=1e3) gap {gap2:.4f} <= {tol}",
        {"gue_limit": ref, "gue_limit_transfer_orientation": ref_mirror, "n": n,
         "rows": rows, "sigma_n2": z2.value, "sigma_n2_err": z2.error,
         "sigma_n2_frame": z2.extra["frame"]})


# ---------------------------------------------------------------------------
# A4 exact identities
# ---------------------------------------------------------------------------


def _random_point(rng):
    return sm.CosetPoint(rng.random(), rng.uniform(0, 2 * np.pi),
                         rng.exponential(1.0), rng.uniform(0, 2 * np.pi))


def _random_rotated(rng):
    E = rng.uniform(-1.4, 1.4)
    c0 = sm.saddle_constants(E).c0
    p = SpectralParams(E=E, kappa=rng.uniform(0.3, 1.5), y1=rng.uniform(0, 2),
                       y2=rng.uniform(0, 2), gammas=(rng.uniform(0.2, 2.0),))
    return p, c0, tr.RotatedParams.from_spectral(p, c0)


def identity_checks(seed: int = 2024) -> dict:
    """Worst deviations of the exact identities, keyed by name."""
    rng = np.random.default_rng(seed)
    out = {}
    # trace identity, dense and secular spectra
    worst = 0.0
    for method in ("dense", "secular"):
        d = Deformation((0.5,)) if method == "secular" else Deformation((0.5, 0.8, 0.3))
        eigs, _ = ens.sample_spectra(ens.SpectrumSource("gue", N=60), 100, seed, d,
                                     method=method, trace_tol=np.inf)
        s = sum(d.gammas)
        worst = max(worst, float(np.max(np.abs(eigs.imag.sum(axis=1) - s) / s)))
    out["trace_identity"] = (worst, 1e-10)
    # Grassmann gaussian integral
    worst = 0.0
    for i in range(50):
        k = 1 + i % 5
        A = rng.normal(size=(k, k)) + 1j * rng.normal(size=(k, k))
        d = np.linalg.det(A)
        worst = max(worst, abs(sa.gaussian_grassmann(A) - d) / abs(d))
    out["gaussian_grassmann"] = (worst, 1e-12)
    # saddle identities
    worst = 0.0
    for E in rng.uniform(-math.sqrt(2), math.sqrt(2), 20):
        sc = sm.saddle_constants(E)
        worst = max(worst, abs(sc.c_plus * sc.a_plus**2 - sc.c0 * sc.a_plus),
                    abs(sc.c_minus * sc.a_minus**2 + sc.c0 * sc.a_minus))
    out["saddle_identities"] = (worst, 1e-14)
    # D1 engine vs closed form, det B~ closed form
    worst_d1 = worst_b = 0.0
    for _ in range(50):
        p, c0, rp = _random_rotated(rng)
        pt = _random_point(rng)
        g = p.gammas[0]
        eng = tr.d1_coefficients(tr.d1_factor(pt, rp, p.E, g, c0=c0))
        cf = tr.d1_closed_form(pt.U(), pt.S(), rp, p.E, g, c0)
        worst_d1 = max(worst_d1, max(abs(eng[k] - cf[k]) / max(1.0, abs(eng[k])) for k in eng))
        _, B = tr.rotated_blocks(pt.U(), pt.S(), rp, p.E, g, c0)
        det_b = B[0, 0] * B[1, 1] - B[0, 1] * B[1, 0]
        t = 2 * math.asinh(math.sqrt(pt.x))
        closed = tr.det_b_closed_form(t, pt.theta, rp, g, c0)
        worst_b = max(worst_b, abs(det_b - closed) / max(1.0, abs(closed)))
    out["d1_closed_form"] = (worst_d1, 1e-12)
    out["det_b_closed_form"] = (worst_b, 1e-12)
    # theta average against quadrature, 100 points per order
    worst = 0.0
    for delta in (1, 2, 3):
        for _ in range(100):
            tau, t, a2 = rng.uniform(1.0, 3.0), rng.uniform(0.0, 3.0), rng.uniform(0.0, 1.5)
            q = tr._theta_quadrature(tau, t, a2, delta)
            worst = max(worst, abs(tr.theta_average(tau, t, a2, delta) - q) / max(1.0, abs(q)))
    out["theta_average"] = (worst, 1e-8)
    out["theta_c1"] = (abs(tr.THETA_CONSTANTS[1] - 1.0), 0.0)
    # kernel row sums on the default grid
    bt = 100.0
    grid = tr.TransferGrid.build(bt, 30.0)
    kp = tr.build_kernel(grid, bt, check=False)
    ru, rs = kp.row_sums()
    inner = grid.t_nodes < grid.t_nodes[-1] - 12.0 / math.sqrt(bt)
    out["kernel_row_sum_u"] = (float(np.max(np.abs(ru + math.expm1(-bt)))), 1e-8)
    out["kernel_row_sum_s"] = (float(np.max(np.abs(rs[inner] - 1.0))), 1e-8)
    # bosonization at p = 2
    rhs = sa.bosonization_rhs(lambda a: np.exp(-np.einsum("ii...->...", a).real), 2)
    out["bosonization_p2"] = (abs(rhs - math.pi**4) / math.pi**4, 1e-6)
    return out


@_timed
def check_identities(cfg: AcceptanceConfig) -> CriterionResult:
    """Exact algebraic identities at their stated tolerances."""
    res = identity_checks(cfg.seed)
    failed = [k for k, (v, tol) in res.items() if not v <= tol]
    return CriterionResult("A4", not failed,
                           f"{len(res) - len(failed)}/{len(res)} identities within tolerance"
                           + (f"; failing: {', '.join(failed)}" if failed else ""),
                           {k: {"deviation": v, "tol": t} for k, (v, t) in res.items()})


# ---------------------------------------------------------------------------
# A5 semicircle
# ---------------------------------------------------------------------------


@_timed
def check_semicircle(cfg: AcceptanceConfig) -> CriterionResult:
    """Sup-distance of RBM and GUE eigenvalue histograms to the semicircle."""
    samples = 2 if cfg.quick else 4
    out = {}
    for name, src in (("rbm", ens.SpectrumSource("rbm", model=BlockBandModel(20, 50, 1.0))),
                      ("gue", ens.SpectrumSource("gue", N=1000))):
        eigs, _ = ens.sample_spectra(src, samples, cfg.seed, workers=cfg.workers)
        out[name] = ens.semicircle_sup_distance(eigs.real.ravel())
    tol = 0.05
    return CriterionResult("A5", all(v <= tol for v in out.values()),
                           f"sup-distance rbm {out['rbm']:.4f}, gue {out['gue']:.4f} (tol {tol})",
                           {"samples": samples, **out})


# ---------------------------------------------------------------------------
# A6 width density
# ---------------------------------------------------------------------------

WIDTH_GRID = np.r_[0.02, 0.05, np.arange(0.1, 1.0, 0.1), np.arange(1.0, 4.0, 0.25),
                   np.arange(4.0, 16.01, 0.5)]


def width_cdf_from_density(y: np.ndarray, rho: np.ndarray, E: float = 0.0,
                           fine: int = 20001):
    """CDF of ``y = N Im z`` from density samples, normalised by ``rho_sc(E)``.

    The density is interpolated monotonically in ``log rho`` (extrapolated
    linearly to ``y = 0``) and integrated on a fine grid.
    """
    y, rho = np.asarray(y, float), np.asarray(rho, float)
    r0 = rho[0] - (rho[1] - rho[0]) / (y[1] - y[0]) * y[0]
    interp = PchipInterpolator(np.r_[0.0, y], np.log(np.r_[r0, rho]))
    yy = np.linspace(0.0, y[-1], fine)
    dens = np.exp(interp(yy))
    cdf = np.r_[0.0, np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(yy))]
    return yy, cdf / ens.semicircle_density(E)


def kolmogorov_distance(samples: np.ndarray, grid: np.ndarray, cdf: np.ndarray) -> float:
    """``sup |F_emp - F|`` evaluated at grid points and just below every sample."""
    s = np.sort(np.asarray(samples))
    s = s[s <= grid[-1]]
    n_total = len(samples)
    at_grid = np.abs(np.searchsorted(s, grid, side="right") / n_total - cdf)
    model_at_s = np.interp(s, grid, cdf)
    ranks = np.arange(1, len(s) + 1) / n_total
    jumps = np.maximum(np.abs(ranks - model_at_s), np.abs(ranks - 1.0 / n_total - model_at_s))
    return float(max(at_grid.max(), jumps.max() if len(s) else 0.0))


def mc_widths(N: int, gamma: float, samples: int, seed: int, E: float = 0.0,
              window: float = 0.25, workers: int = 1):
    """``N Im z`` of eigenvalues with ``|Re z - E| < window`` (secular solver)."""
    eigs, flags = ens.sample_spectra(ens.SpectrumSource("gue", N=N), samples, seed,
                                     Deformation((gamma,)), workers=workers, method="secular")
    z = eigs.ravel()
    return N * z.imag[np.abs(z.real - E) < window], int(flags.sum())


@_timed
def check_width_density(cfg: AcceptanceConfig) -> CriterionResult:
    """Density from the generating function vs GUE Monte Carlo widths (KS distance)."""
    N, gamma, E = 200, 0.5, 0.0
    samples = 2000 if cfg.quick else 20000
    curve = sm.density_from_z(E, WIDTH_GRID, (gamma,))
    rho = np.array([c.rho for c in curve])
    yy, cdf = width_cdf_from_density(WIDTH_GRID, rho, E)
    widths, fell_back = mc_widths(N, gamma, samples, cfg.seed + 1, E, workers=cfg.workers)
    ks = kolmogorov_distance(widths, yy, cdf)
    tol = 0.08
    return CriterionResult("A6", ks <= tol,
                           f"KS distance {ks:.4f} (tol {tol}), {len(widths)} widths",
                           {"samples": samples, "N": N, "gamma": gamma, "window": 0.25,
                            "width_scaling": "y = N Im z", "model_mass": float(cdf[-1]),
                            "flagged_points": int(sum(c.flagged for c in curve)),
                            "secular_fallbacks": fell_back, "ks": ks})


# ---------------------------------------------------------------------------
# A7 numerics hygiene
# ---------------------------------------------------------------------------


@_timed
def check_hygiene(cfg: AcceptanceConfig) -> CriterionResult:
    """Route agreement, contour-radius independence, doubling and worker determinism."""
    p = A2_PARAMS
    rp = tr.RotatedParams.from_spectral(p)
    c0 = sm.saddle_constants(p.E).c0
    n, bt = 4, 100.0
    grid = tr.TransferGrid.for_params(rp, n, c0, bt)
    power = tr.z_via_transfer(rp, p.E, p.gammas, n, bt, grid=grid, c0=c0)
    contour = {A: tr.z_via_transfer(rp, p.E, p.gammas, n, bt, grid=grid, route="contour",
                                    A=A, c0=c0) for A in (1.0, 2.0, 4.0)}
    route_gap = abs(contour[2.0] - power)
    a_gap = max(abs(v - contour[2.0]) for v in contour.values())
    # quadrature doubling on the default routes
    doubling = []
    for pp in (p, SpectralParams(E=1.0, x1=0.2, y1=0.5, x2=0.0, y2=1.5, kappa=0.7,
                                 gammas=(0.8,))):
        q = sm.QuadratureSpec()
        r1 = sm.integrate_sigma_model(pp, 1, 1.0, q)
        r2 = sm.integrate_sigma_model(pp, 1, 1.0, q.refined(2.0))
        doubling.append({"change": abs(r2.value - r1.value), "reported_error": r1.error,
                         "frame": r1.extra["frame"]})
    doubling_ok = all(d["change"] <= d["reported_error"] for d in doubling)
    # worker-count determinism
    many = 8
    ratios = [ens.mc_ratios(BlockBandModel(2, 8, 1.0), p, 48, cfg.seed, workers=w)
              for w in (1, many)]
    spectra = [ens.sample_spectra(ens.SpectrumSource("gue", N=40), 24, cfg.seed,
                                  Deformation((0.5,)), workers=w, method="secular")[0]
               for w in (1, many)]
    identical = (ratios[0].tobytes() == ratios[1].tobytes()
                 and spectra[0].tobytes() == spectra[1].tobytes())
    tol = 1e-6
    ok = route_gap <= tol and a_gap <= tol and doubling_ok and identical
    return CriterionResult(
        "A7", ok,
        f"contour-power {route_gap:.1e}, A-spread {a_gap:.1e} (tol {tol:g}); "
        f"doubling within error={doubling_ok}; byte-identical 1 vs {many} workers={identical}",
        {"power": power, "contour": {str(k): v for k, v in contour.items()},
         "doubling": doubling, "identical": identical})


# ---------------------------------------------------------------------------
# A8 performance
# ---------------------------------------------------------------------------


def mc_throughput(workers: int, samples: int = 64, W: int = 100, seed: int = 5) -> float:
    """Determinant-ratio samples per second with ``workers`` processes."""
    t0 = time.perf_counter()
    ens.mc_ratios(BlockBandModel(2, W, 1.0), A2_PARAMS, samples, seed, workers=workers)
    return samples / (time.perf_counter() - t0)


@_timed
def check_performance(cfg: AcceptanceConfig) -> CriterionResult:
    """One N = 2000 deformed spectrum within 10 s; MC speed-up from 1 to 8 workers."""
    rng = ens.sample_stream(cfg.seed, 0)
    H = ens.sample_gue(2000, rng)
    t0 = time.perf_counter()
    s = ens.deform_and_solve(H, Deformation((0.5,)), method="secular")
    t_spec = time.perf_counter() - t0
    samples = 32 if cfg.quick else 64
    t1 = mc_throughput(1, samples)
    t8 = mc_throughput(8, samples)
    speedup = t8 / t1
    cpus = os.cpu_count() or 1
    ok = t_spec <= 10.0 and speedup >= 6.0
    note = None if cpus >= 8 else f"only {cpus} CPU(s) available; 8-worker scaling unattainable"
    return CriterionResult(
        "A8", ok,
        f"N=2000 spectrum {t_spec:.2f}s (limit 10s, {s.method}); "
        f"MC speed-up 1->8 workers {speedup:.2f}x (need 6x)",
        {"spectrum_seconds": t_spec, "method": s.method, "throughput_1": t1,
         "throughput_8": t8, "speedup": speedup, "cpus": cpus}, expected_failure=note)


CRITERIA = {
    "A1": check_normalization,
    "A2": check_band_width_limit,
    "A3": check_coupling_limit,
    "A4": check_identities,
    "A5": check_semicircle,
    "A6": check_width_density,
    "A7": check_hygiene,
    "A8": check_performance,
}


def run_acceptance(cfg: AcceptanceConfig = AcceptanceConfig(), only=None,
                   echo: Callable[[str], None] | None = print) -> list[CriterionResult]:
    """Run the selected criteria in order, echoing one line per criterion."""
    names = list(only) if only else list(CRITERIA)
    out = []
    for name in names:
        res = CRITERIA[name](cfg)
        out.append(res)
        if echo:
            echo(res.line())
    return out
