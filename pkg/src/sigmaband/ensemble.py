"""Block band matrices, GUE, rank-M complex deformation and Monte Carlo Z.

The Hermitian ensemble has ``n x n`` blocks of size ``W``; entries of block
``(j, k)`` are complex Gaussians with ``E|H_{jk,ab}|^2 = J_jk``.  The deformed
matrix is ``H + i Gamma`` with ``Gamma = diag(gamma_1, ..., gamma_M, 0, ...)``,
so every eigenvalue has a non-negative imaginary part.

The generating function estimated here is

    Z = E[ det((Hc - z1)(Hc - z1)^* + k^2/N^2) / det((Hc - z2)(Hc - z2)^* + k^2/N^2) ]

with ``z_l = E + (x_l + i y_l)/N``.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "BlockBandModel",
    "Deformation",
    "SpectralParams",
    "SpectrumSample",
    "MCEstimate",
    "CovarianceError",
    "path_laplacian",
    "build_covariance",
    "sample_block_rbm",
    "sample_gue",
    "deform_and_solve",
    "resonance_widths",
    "mc_generating_function",
    "log_gram_determinant",
    "median_of_means",
    "semicircle_density",
    "empirical_density",
    "semicircle_sup_distance",
    "sample_stream",
    "SpectrumSource",
    "sample_spectra",
    "WIDTH_SCALING",
]

MAX_ENERGY = math.sqrt(2.0)


class CovarianceError(ValueError):
    """Covariance matrix is not positive definite."""


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockBandModel:
    """Block band ensemble: ``n`` sites of ``W`` orbitals each.

    ``variant="J_sigma"`` gives ``J = 1/W + beta*Lap/W^2`` and ``"J_old"`` gives
    ``J = 1/W + beta*Lap/W``.  ``Lap`` is the negative semidefinite Laplacian of
    the path on ``n`` sites with ``boundary`` either ``"neumann"`` or
    ``"dirichlet"``.
    """

    n: int
    W: int
    beta: float = 1.0
    variant: str = "J_sigma"
    boundary: str = "neumann"

    def __post_init__(self):
        if self.n < 1 or self.W < 1:
            raise ValueError("n and W must be positive")
        if self.variant not in ("J_sigma", "J_old"):
            raise ValueError(f"unknown covariance variant {self.variant!r}")
        if self.boundary not in ("neumann", "dirichlet"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        build_covariance(self)

    @property
    def N(self) -> int:
        return self.n * self.W


@dataclass(frozen=True)
class Deformation:
    """Positive diagonal strengths ``gamma_1..gamma_M`` of the rank-M term."""

    gammas: tuple

    def __post_init__(self):
        g = tuple(float(v) for v in np.atleast_1d(self.gammas))
        if len(g) < 1:
            raise ValueError("at least one deformation strength is required")
        if any(v <= 0 for v in g):
            raise ValueError("deformation strengths must be positive")
        object.__setattr__(self, "gammas", g)

    @property
    def M(self) -> int:
        return len(self.gammas)

    def diagonal(self, N: int) -> np.ndarray:
        if self.M > N:
            raise ValueError("rank M exceeds matrix size")
        d = np.zeros(N)
        d[: self.M] = self.gammas
        return d


@dataclass(frozen=True)
class SpectralParams:
    """Spectral point ``E``, microscopic offsets, regulator and deformation.

    ``z_l = E + (x_l + i y_l)/N``.
    """

    E: float
    x1: float = 0.0
    y1: float = 0.0
    x2: float = 0.0
    y2: float = 0.0
    kappa: float = 1.0
    gammas: tuple = (0.5,)

    def __post_init__(self):
        object.__setattr__(self, "gammas", tuple(float(g) for g in np.atleast_1d(self.gammas)))
        if abs(self.E) > MAX_ENERGY + 1e-12:
            raise ValueError("|E| must not exceed sqrt(2)")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if any(g <= 0 for g in self.gammas):
            raise ValueError("deformation strengths must be positive")

    @property
    def deformation(self) -> Deformation:
        return Deformation(self.gammas)

    def z(self, N: int) -> tuple[complex, complex]:
        return (self.E + (self.x1 + 1j * self.y1) / N,
                self.E + (self.x2 + 1j * self.y2) / N)

    @property
    def coincident(self) -> bool:
        return self.x1 == self.x2 and self.y1 == self.y2

    def replace(self, **kw) -> "SpectralParams":
        d = asdict(self)
        d.update(kw)
        return SpectralParams(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gammas"] = list(self.gammas)
        return d


@dataclass
class SpectrumSample:
    """Complex eigenvalues of one deformed matrix."""

    eigenvalues: np.ndarray
    method: str = "dense"
    fell_back: bool = False

    @property
    def N(self) -> int:
        return len(self.eigenvalues)


@dataclass
class MCEstimate:
    estimate: complex
    se: float
    samples: int
    rejected: int
    seed: int
    batches: int = 8
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"estimate_re": float(np.real(self.estimate)),
                "estimate_im": float(np.imag(self.estimate)),
                "se": float(self.se), "samples": int(self.samples),
                "rejected": int(self.rejected), "seed": int(self.seed),
                "batches": int(self.batches), **self.extra}

    def to_json(self, path: str | os.PathLike):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


# ---------------------------------------------------------------------------
# covariance and samplers
# ---------------------------------------------------------------------------


def path_laplacian(n: int, boundary: str = "neumann") -> np.ndarray:
    """Negative semidefinite Laplacian of the path graph on ``n`` vertices."""
    lap = np.zeros((n, n))
    for j in range(n - 1):
        lap[j, j + 1] = lap[j + 1, j] = 1.0
    if boundary == "neumann":
        lap -= np.diag(lap.sum(axis=1))
    elif boundary == "dirichlet":
        lap -= 2.0 * np.eye(n)
    else:
        raise ValueError(f"unknown boundary {boundary!r}")
    if n == 1:
        lap[:] = 0.0
    return lap


def build_covariance(model: BlockBandModel) -> np.ndarray:
    """Site covariance ``J = I/W + (beta/W^p) Lap`` (p=2 sigma scaling, p=1 old)."""
    p = 2 if model.variant == "J_sigma" else 1
    lap = path_laplacian(model.n, model.boundary)
    J = np.eye(model.n) / model.W + model.beta / model.W**p * lap
    if np.linalg.eigvalsh(J).min() <= 0:
        raise CovarianceError(
            f"J is not positive definite for n={model.n}, W={model.W}, beta={model.beta}")
    return J


def sample_stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index``; independent of worker layout."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _hermitian_from_variance(var: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    N = var.shape[0]
    scale = np.sqrt(var / 2.0)
    G = scale * (rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N)))
    # (G + G^*)/sqrt(2) keeps E|H_ab|^2 = var_ab off the diagonal and on it
    return (G + G.conj().T) / math.sqrt(2.0)


def sample_block_rbm(model: BlockBandModel, stream: np.random.Generator) -> np.ndarray:
    """Hermitian ``N x N`` block band matrix with ``E|H_{jk,ab}|^2 = J_jk``."""
    J = build_covariance(model)
    var = np.kron(J, np.ones((model.W, model.W)))
    return _hermitian_from_variance(var, stream)


def sample_gue(N: int, stream: np.random.Generator) -> np.ndarray:
    """GUE with ``E|H_ab|^2 = 1/N``; spectrum fills ``[-2, 2]``."""
    if N < 2:
        raise ValueError("N must be at least 2")
    return _hermitian_from_variance(np.full((N, N), 1.0 / N), stream)


# ---------------------------------------------------------------------------
# deformed spectrum
# ---------------------------------------------------------------------------


def _secular_roots(H: np.ndarray, gamma: float, tol: float = 1e-8):
    """Eigenvalues of ``H + i gamma e1 e1^*`` from the rank-one secular equation.

    With ``H = V diag(lam) V^*`` and ``w = |V[0, :]|^2`` the eigenvalues are
    the zeros of ``P(z) = f(z) prod_k (z - lam_k)``, ``f = 1 - i gamma sum_k
    w_k / (z - lam_k)``.  All zeros are refined together by the Aberth-Ehrlich
    iteration, whose mutual repulsion keeps them distinct, starting from
    first-order perturbation theory ``z_k = lam_k + i gamma w_k``.  The
    residual of every root is checked.
    """
    # the relatively robust representation driver is the fastest full solver here
    lam, V = scipy.linalg.eigh(H, driver="evr", check_finite=False)
    w = np.abs(V[0, :]) ** 2
    N = len(lam)
    g = 1j * gamma
    off = ~np.eye(N, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = lam + g * w
        active = np.ones(N, bool)
        for _ in range(200):
            za = z[active]
            inv = 1.0 / (za[:, None] - lam[None, :])
            f = 1.0 - g * (w[None, :] * inv).sum(axis=1)
            fp = g * (w[None, :] * inv**2).sum(axis=1)
            # P'/P = f'/f + sum_k 1/(z - lam_k)
            ratio = 1.0 / (fp / f + inv.sum(axis=1))
            rep = np.where(off[active], 1.0 / (za[:, None] - z[None, :]), 0.0).sum(axis=1)
            step = ratio / (1.0 - ratio * rep)
            # a root sitting on a pole (vanishing weight) is already exact
            step = np.where(np.isfinite(step), step, 0.0)
            z[active] = za - step
            done = np.abs(step) <= 1e-15 * (1.0 + np.abs(za))
            active[np.flatnonzero(active)[done]] = False
            if not active.any():
                break
        # residual of v = V c, c = (lam - z)^-1 V^* e1: since V (lam - z) c = e1 and
        # e1^* V c = -S(z), (H + i gamma e1 e1^* - z) v = f(z) e1 exactly
        c = V[0, :].conj()[None, :] / (lam[None, :] - z[:, None])
        f = 1.0 + g * (V[0, :][None, :] * c).sum(axis=1)
        res = np.abs(f) / np.linalg.norm(c, axis=1)
    zs = np.sort_complex(z)
    distinct = np.all(np.abs(np.diff(zs)) > 1e-13) if N > 1 else True
    ok = bool(np.all(np.isfinite(z)) and np.all(res < tol) and distinct
              and np.all(z.imag >= -1e-12))
    return z, ok


def deform_and_solve(H: np.ndarray, d: Deformation, method: str = "dense") -> SpectrumSample:
    """Eigenvalues of ``H + i Gamma_M``.

    ``method="secular"`` (rank one only) diagonalises ``H`` and solves the
    secular equation; on failure it falls back to the dense eigensolver and
    marks the sample.
    """
    N = H.shape[0]
    diag = d.diagonal(N)
    if method == "secular":
        if d.M != 1:
            method = "dense"
        else:
            z, ok = _secular_roots(H, d.gammas[0])
            if ok:
                return SpectrumSample(np.sort_complex(z), "secular", False)
            warnings.warn("secular solve failed; using dense eigensolver", RuntimeWarning)
            Hc = H + 1j * np.diag(diag)
            return SpectrumSample(np.sort_complex(scipy.linalg.eigvals(Hc, check_finite=False)),
                                  "dense", True)
    if method != "dense":
        raise ValueError(f"unknown method {method!r}")
    Hc = H + 1j * np.diag(diag)
    return SpectrumSample(np.sort_complex(scipy.linalg.eigvals(Hc, check_finite=False)), "dense")


def semicircle_density(E) -> np.ndarray | float:
    """``rho(E) = sqrt(4 - E^2) / (2 pi)``; zero outside ``[-2, 2]``."""
    E = np.asarray(E, dtype=float)
    out = np.sqrt(np.clip(4.0 - E**2, 0.0, None)) / (2 * np.pi)
    return float(out) if out.ndim == 0 else out


def resonance_widths(s: SpectrumSample, E: float, window: float):
    """Widths of eigenvalues with ``|Re z - E| < window``.

    Returns ``(scaled, raw)`` where ``scaled = N * rho(E) * Im z`` and
    ``raw = Im z``.  Metadata on the scaling lives in :data:`WIDTH_SCALING`.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    z = np.asarray(s.eigenvalues)
    sel = np.abs(z.real - E) < window
    raw = np.clip(z.imag[sel], 0.0, None)
    return s.N * semicircle_density(E) * raw, raw


WIDTH_SCALING = "scaled_width = N * rho_sc(E) * Im z"


# ---------------------------------------------------------------------------
# spectral histograms
# ---------------------------------------------------------------------------


def empirical_density(eigs: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Histogram density of real eigenvalues normalised by the total count."""
    counts, _ = np.histogram(eigs, bins=bins)
    return counts / (len(eigs) * np.diff(bins))


def semicircle_sup_distance(eigs: np.ndarray, lo: float = -1.5, hi: float = 1.5,
                            bins: int = 30) -> float:
    edges = np.linspace(lo, hi, bins + 1)
    dens = empirical_density(np.asarray(eigs), edges)
    mids = 0.5 * (edges[1:] + edges[:-1])
    return float(np.max(np.abs(dens - semicircle_density(mids))))


# ---------------------------------------------------------------------------
# Monte Carlo generating function
# ---------------------------------------------------------------------------


def log_gram_determinant(Hc: np.ndarray, z: complex, reg: float) -> float:
    """``log det((Hc - z)(Hc - z)^* + reg^2)`` from a Cholesky factor."""
    B = Hc - z * np.eye(Hc.shape[0])
    G = B @ B.conj().T
    G[np.diag_indices_from(G)] += reg**2
    c = scipy.linalg.cholesky(G, lower=True, check_finite=False)
    return 2.0 * float(np.sum(np.log(np.abs(np.diag(c)))))


def median_of_means(values: np.ndarray, batches: int = 8):
    """Median of contiguous batch means with a spread-based standard error.

    Real and imaginary parts are treated separately.  The standard error is
    ``sqrt(pi/2) * std(batch means) / sqrt(batches)``, the large-sample
    efficiency of a median relative to a mean.
    """
    values = np.asarray(values)
    if len(values) < batches:
        batches = max(1, len(values))
    chunks = np.array_split(values, batches)
    means = np.array([c.mean() for c in chunks])
    est = np.median(means.real) + 1j * np.median(means.imag)
    if batches < 2:
        return est, 0.0
    spread = np.std(means.real, ddof=1) + 1j * np.std(means.imag, ddof=1)
    se = math.sqrt(math.pi / 2) * abs(spread) / math.sqrt(batches)
    return est, float(se)


def _ratio_chunk(args):
    model, p, seed, start, stop, use_gue = args
    N = model.N
    z1, z2 = p.z(N)
    reg = p.kappa / N
    diag = Deformation(p.gammas).diagonal(N)
    out = np.empty(stop - start)
    for i in range(start, stop):
        rng = sample_stream(seed, i)
        H = sample_gue(N, rng) if use_gue else sample_block_rbm(model, rng)
        Hc = H + 1j * np.diag(diag)
        try:
            out[i - start] = math.exp(log_gram_determinant(Hc, z1, reg)
                                      - log_gram_determinant(Hc, z2, reg))
        except (np.linalg.LinAlgError, OverflowError, ValueError):
            out[i - start] = np.nan
    return out


def _chunks(total: int, parts: int):
    edges = np.linspace(0, total, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def mc_ratios(model: BlockBandModel, p: SpectralParams, samples: int, seed: int,
              workers: int = 1, use_gue: bool = False) -> np.ndarray:
    """Per-sample determinant ratios in sample-index order."""
    pieces = _chunks(samples, max(1, workers) * 4)
    tasks = [(model, p, seed, a, b, use_gue) for a, b in pieces]
    if workers <= 1:
        parts = [_ratio_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_ratio_chunk, tasks))
    return np.concatenate(parts) if parts else np.empty(0)


def mc_generating_function(model: BlockBandModel, p: SpectralParams, samples: int,
                           seed: int = 0, workers: int = 1, batches: int = 8,
                           use_gue: bool = False) -> MCEstimate:
    """Median-of-means Monte Carlo estimate of the determinant ratio.

    Every sample draws from its own stream (``seed``, sample index), so the
    result does not depend on ``workers``.  Non-finite ratios are rejected.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    if batches < 8:
        raise ValueError("median-of-means needs at least 8 batches")
    if p.coincident:
        return MCEstimate(1.0 + 0j, 0.0, samples, 0, seed, batches,
                          {"N": model.N, "note": "z1 == z2"})
    r = mc_ratios(model, p, samples, seed, workers, use_gue)
    good = np.isfinite(r)
    est, se = median_of_means(r[good], batches)
    return MCEstimate(complex(est), se, samples, int((~good).sum()), seed, batches,
                      {"N": model.N, "rejected_fraction": float((~good).mean())})


# ---------------------------------------------------------------------------
# batched spectra
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectrumSource:
    """What to sample: ``kind="gue"`` with size ``N`` or ``kind="rbm"`` with ``model``."""

    kind: str
    N: int | None = None
    model: BlockBandModel | None = None

    def __post_init__(self):
        if self.kind == "gue":
            if self.N is None or self.N < 2:
                raise ValueError("GUE needs N >= 2")
        elif self.kind == "rbm":
            if self.model is None:
                raise ValueError("rbm needs a BlockBandModel")
        else:
            raise ValueError(f"unknown ensemble {self.kind!r}")

    @property
    def size(self) -> int:
        return self.N if self.kind == "gue" else self.model.N

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return sample_gue(self.N, rng) if self.kind == "gue" else sample_block_rbm(self.model, rng)


def _spectra_chunk(args):
    source, d, seed, start, stop, method = args
    out = np.empty((stop - start, source.size), complex)
    flags = np.zeros(stop - start, bool)
    for i in range(start, stop):
        H = source.draw(sample_stream(seed, i))
        s = deform_and_solve(H, d, method) if d is not None else \
            SpectrumSample(np.sort(np.linalg.eigvalsh(H)).astype(complex))
        out[i - start] = s.eigenvalues
        flags[i - start] = s.fell_back
    return out, flags


def sample_spectra(source: SpectrumSource, samples: int, seed: int,
                   deformation: Deformation | None = None, workers: int = 1,
                   method: str = "dense", trace_tol: float = 1e-10):
    """Spectra of ``samples`` independent draws, ordered by sample index.

    Returns ``(eigenvalues[samples, N], fell_back[samples])``.  With a
    deformation the trace identity ``sum Im z = sum gamma`` is asserted for
    every sample.  Output is independent of ``workers``.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    tasks = [(source, deformation, seed, a, b, method)
             for a, b in _chunks(samples, max(1, workers) * 4)]
    if workers <= 1:
        parts = [_spectra_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_spectra_chunk, tasks))
    eigs = np.concatenate([p[0] for p in parts])
    flags = np.concatenate([p[1] for p in parts])
    if deformation is not None:
        target = sum(deformation.gammas)
        dev = np.abs(eigs.imag.sum(axis=1) - target) / target
        if np.any(dev > trace_tol):
            raise AssertionError(f"trace identity violated by {dev.max():.2e}")
    return eigs, flags
