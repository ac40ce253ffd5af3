"""Command-line interface: ``sigmaband {spectrum,compare-z,density,accept}``.

Parameters come from an optional flat ``key = value`` config file
(``--config``) overridden by command-line flags.  Every CSV or JSON output
gets a ``<name>.meta.json`` sidecar with the parameters, seed and code
version.  Exit codes: 0 ok, 1 acceptance failure, 2 I/O or configuration
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__
from . import acceptance as acc
from . import ensemble as ens
from . import sigma_model as sm
from . import transfer as tr
from .ensemble import BlockBandModel, Deformation, SpectralParams
from .svg import svg_plot

EXIT_OK, EXIT_ACCEPT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    """Invalid parameters or unusable output location (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def read_config(path: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; keys use ``-`` or ``_``."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for num, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text) -> list[int]:
    return [int(round(v)) for v in _floats(text)]


def _gammas(args) -> tuple:
    g = _floats(args.gamma)
    M = getattr(args, "M", None) or len(g)
    if len(g) == 1:
        g = g * M
    if len(g) != M:
        raise ConfigError(f"--gamma lists {len(g)} values but M = {M}")
    return tuple(g)


def _workers(args) -> int:
    return args.workers if args.workers and args.workers > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _prepare_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_probe")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"output directory {path!r} is not writable: {exc}") from exc
    return path


def _meta(path: str, command: str, params: dict, seed) -> None:
    info = {"file": os.path.basename(path), "command": command, "version": __version__,
            "seed": seed, "params": params}
    with open(path + ".meta.json", "w") as fh:
        json.dump(acc._jsonable(info), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: str, header: Sequence[str], rows, command: str, params: dict, seed) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    _meta(path, command, params, seed)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_json(path: str, payload, command: str, params: dict, seed) -> None:
    with open(path, "w") as fh:
        json.dump(acc._jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _meta(path, command, params, seed)


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------


def cmd_spectrum(args) -> int:
    out = _prepare_dir(args.output_dir)
    if args.ensemble == "gue":
        if args.N is None:
            raise ConfigError("--N is required for the GUE")
        source = ens.SpectrumSource("gue", N=args.N)
    else:
        source = ens.SpectrumSource("rbm", model=BlockBandModel(args.n, args.W, args.beta,
                                                                args.variant, args.boundary))
    N = source.size
    d = Deformation(_gammas(args)) if args.M > 0 else None
    if d is not None and d.M > N:
        raise ConfigError("M exceeds the matrix size")
    if not args.window > 0:
        raise ConfigError("--window must be positive")
    params = {"ensemble": args.ensemble, "N": N, "n": args.n, "W": args.W, "beta": args.beta,
              "variant": args.variant, "boundary": args.boundary,
              "gammas": list(d.gammas) if d else [], "samples": args.samples,
              "method": args.method, "E": args.E, "window": args.window,
              "width_scaling": ens.WIDTH_SCALING}
    eigs, fell_back = ens.sample_spectra(source, args.samples, args.seed, d,
                                         workers=_workers(args), method=args.method)
    ids = np.repeat(np.arange(args.samples), N)
    z = eigs.ravel()
    scaled = N * ens.semicircle_density(args.E) * np.clip(z.imag, 0.0, None)
    _write_csv(os.path.join(out, "spectra.csv"), ("sample_id", "re_z", "im_z"),
               zip(ids, z.real, z.imag), "spectrum", params, args.seed)
    _write_csv(os.path.join(out, "widths.csv"), ("sample_id", "re_z", "im_z", "scaled_width"),
               zip(ids, z.real, z.imag, scaled), "spectrum", params, args.seed)
    edges = np.linspace(-2.2, 2.2, args.bins + 1)
    counts, _ = np.histogram(z.real, bins=edges)
    dens = counts / (len(z) * np.diff(edges))
    _write_csv(os.path.join(out, "histogram.csv"), ("bin_left", "bin_right", "count", "density"),
               zip(edges[:-1], edges[1:], counts, dens), "spectrum", params, args.seed)
    sel = np.abs(z.real - args.E) < args.window
    w_edges = np.linspace(0.0, max(float(scaled[sel].max()) if sel.any() else 1.0, 1e-12),
                          args.bins + 1)
    w_counts, _ = np.histogram(scaled[sel], bins=w_edges)
    w_dens = w_counts / max(1, sel.sum()) / np.diff(w_edges)
    _write_csv(os.path.join(out, "width_histogram.csv"),
               ("bin_left", "bin_right", "count", "density"),
               zip(w_edges[:-1], w_edges[1:], w_counts, w_dens), "spectrum", params, args.seed)
    summary = {"samples": args.samples, "N": N,
               "semicircle_sup_distance": ens.semicircle_sup_distance(z.real),
               "secular_fallbacks": int(fell_back.sum()),
               "widths_in_window": int(sel.sum())}
    if d is not None:
        summary["trace_identity_max_rel"] = float(
            np.max(np.abs(eigs.imag.sum(axis=1) - sum(d.gammas)) / sum(d.gammas)))
    _write_json(os.path.join(out, "summary.json"), summary, "spectrum", params, args.seed)
    if args.svg:
        svg_plot(os.path.join(out, "width_histogram.svg"),
                 [{"x": w_edges, "y": w_dens, "kind": "step", "label": "widths"}],
                 title="scaled width histogram", xlabel="N rho(E) Im z", ylabel="density")
    print(json.dumps(acc._jsonable(summary), sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare-z
# ---------------------------------------------------------------------------


def _spectral_params(args) -> SpectralParams:
    return SpectralParams(E=args.E, x1=args.x1, y1=args.y1, x2=args.x2, y2=args.y2,
                          kappa=args.kappa, gammas=_gammas(args))


def cmd_compare_z(args) -> int:
    out = _prepare_dir(args.output_dir)
    p = _spectral_params(args)
    routes = [r.strip() for r in args.routes.split(",") if r.strip()]
    unknown = set(routes) - {"mc", "sigma", "transfer", "gue_limit"}
    if unknown:
        raise ConfigError(f"unknown routes {sorted(unknown)}")
    params = {**p.to_dict(), "n": args.n, "beta": args.beta, "W_list": _ints(args.W_list),
              "beta_tilde_list": _floats(args.beta_tilde_list), "chain_n": args.chain_n,
              "samples": args.samples, "routes": routes}
    rows, table = [], []
    sigma = None
    if "sigma" in routes or "mc" in routes:
        q = sm.QuadratureSpec(scheme="low-discrepancy") if args.n > 1 else None
        sigma = sm.integrate_sigma_model(p, args.n, args.beta, q)
        rows.append({"route": "sigma", "params": {**p.to_dict(), "n": args.n, "beta": args.beta},
                     "value": sigma.value, "error": sigma.error, "flagged": sigma.flagged,
                     "frame": sigma.extra.get("frame")})
    gue = mirror = None
    if "gue_limit" in routes or "transfer" in routes:
        gue = sm.gue_limit_z(p)
        rows.append({"route": "gue_limit", "params": p.to_dict(), "value": gue.value,
                     "error": gue.error, "flagged": gue.flagged, "orientation": "physical"})
    if "transfer" in routes:
        mirror = sm.gue_limit_z(p, deformation_signs=tr.MIRROR_SIGNS)
        rows.append({"route": "gue_limit", "params": p.to_dict(), "value": mirror.value,
                     "error": mirror.error, "flagged": mirror.flagged,
                     "orientation": "transfer"})
    if "mc" in routes:
        for W in _ints(args.W_list):
            est = ens.mc_generating_function(BlockBandModel(args.n, W, args.beta), p,
                                             args.samples, seed=args.seed,
                                             workers=_workers(args))
            gap = abs(est.estimate - sigma.value)
            flagged = est.rejected > 0
            rows.append({"route": "mc", "params": {**p.to_dict(), "n": args.n, "W": W,
                                                   "beta": args.beta},
                         "value": est.estimate, "error": est.se, "flagged": flagged})
            table.append(("mc", "W", W, est.estimate.real, est.estimate.imag, est.se,
                          "sigma", gap, flagged))
    if "transfer" in routes:
        rp = tr.RotatedParams.from_spectral(p)
        for bt in _floats(args.beta_tilde_list):
            z = tr.z_via_transfer(rp, p.E, p.gammas, args.chain_n, bt, x1=p.x1, x2=p.x2)
            gap = abs(z - mirror.value)
            rows.append({"route": "transfer", "params": {**p.to_dict(), "n": args.chain_n,
                                                         "beta_tilde": bt},
                         "value": z, "error": None, "flagged": False})
            table.append(("transfer", "beta_tilde", bt, z.real, z.imag, float("nan"),
                          "gue_limit", gap, False))
    _write_json(os.path.join(out, "compare_z.json"), rows, "compare-z", params, args.seed)
    _write_csv(os.path.join(out, "convergence.csv"),
               ("route", "sweep", "value_of_sweep", "z_re", "z_im", "se", "reference", "gap",
                "flagged"), table, "compare-z", params, args.seed)
    for r in table:
        print(f"{r[0]:9s} {r[1]}={r[2]:<8g} Z={r[3]:+.5f}{r[4]:+.5f}i  |Z-{r[6]}|={r[7]:.5f}"
              + ("  [flagged]" if r[8] else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------


def cmd_density(args) -> int:
    out = _prepare_dir(args.output_dir)
    gammas = _floats(args.gamma)
    if args.M != 1:
        raise ConfigError("the density route is implemented for M = 1")
    y_grid = acc.WIDTH_GRID[acc.WIDTH_GRID <= args.y_max]
    params = {"E": args.E, "gammas": gammas, "N": args.N, "samples": args.samples,
              "kappa_small": args.kappa_small, "fd_step": args.fd_step, "window": args.window,
              "y_max": args.y_max, "width_variable": "y = N Im z"}
    summary = {}
    series = []
    for g in gammas:
        curve = sm.density_from_z(args.E, y_grid, (g,), fd_step=args.fd_step,
                                  kappa_small=args.kappa_small, kappa_check=args.kappa_check)
        rho = np.array([c.rho for c in curve])
        rel_shift = [c.kappa_shift / c.rho if c.rho else float("nan") for c in curve]
        tag = f"{g:g}"
        _write_csv(os.path.join(out, f"density_gamma{tag}.csv"),
                   ("y", "rho", "fd_flag", "rho_imag", "kappa_half_rel_change"),
                   ((c.y, c.rho, c.flagged, c.imag, s) for c, s in zip(curve, rel_shift)),
                   "density", {**params, "gamma": g}, args.seed)
        yy, cdf = acc.width_cdf_from_density(y_grid, rho, args.E)
        widths, fell = acc.mc_widths(args.N, g, args.samples, args.seed, args.E, args.window,
                                     _workers(args))
        edges = np.linspace(0.0, args.y_max, 41)
        counts, _ = np.histogram(widths, bins=edges)
        hist = counts / max(1, len(widths)) / np.diff(edges)
        _write_csv(os.path.join(out, f"mc_widths_gamma{tag}.csv"),
                   ("bin_left", "bin_right", "count", "density"),
                   zip(edges[:-1], edges[1:], counts, hist), "density",
                   {**params, "gamma": g}, args.seed)
        ks = acc.kolmogorov_distance(widths, yy, cdf)
        away = [abs(s) for c, s in zip(curve, rel_shift) if c.y >= 0.5 and np.isfinite(s)]
        summary[tag] = {"ks_distance": ks, "model_mass": float(cdf[-1]),
                        "max_imag": float(max(abs(c.imag) for c in curve)),
                        "flagged_points": int(sum(c.flagged for c in curve)),
                        "widths": int(len(widths)), "secular_fallbacks": fell,
                        "kappa_half_max_rel_change": max(away) if away else None}
        series.append({"x": y_grid, "y": rho / ens.semicircle_density(args.E),
                       "label": f"gamma={tag} generating function"})
        series.append({"x": edges, "y": hist, "kind": "step", "label": f"gamma={tag} MC"})
        print(f"gamma={tag}: KS distance {ks:.4f} over {len(widths)} widths")
    _write_json(os.path.join(out, "density_summary.json"), summary, "density", params, args.seed)
    if args.svg:
        svg_plot(os.path.join(out, "density.svg"), series, title="width density",
                 xlabel="y = N Im z", ylabel="density")
    return EXIT_OK


# ---------------------------------------------------------------------------
# accept
# ---------------------------------------------------------------------------


def cmd_accept(args) -> int:
    only = [s.strip().upper() for s in args.only.split(",")] if args.only else None
    if only and set(only) - set(acc.CRITERIA):
        raise ConfigError(f"unknown criteria {sorted(set(only) - set(acc.CRITERIA))}")
    cfg = acc.AcceptanceConfig(quick=args.quick, workers=_workers(args), seed=args.seed,
                               calibration=args.calibration)
    if args.quick:
        print("quick mode: reduced sample counts, tolerances unchanged")
    results = acc.run_acceptance(cfg, only)
    passed = all(r.passed for r in results)
    print(f"{'ALL PASS' if passed else 'FAILED'}: "
          f"{sum(r.passed for r in results)}/{len(results)} criteria")
    if args.output_dir:
        out = _prepare_dir(args.output_dir)
        _write_json(os.path.join(out, "acceptance.json"), [r.to_dict() for r in results],
                    "accept", {"quick": args.quick, "only": only, "calibration": args.calibration},
                    args.seed)
    return EXIT_OK if passed else EXIT_ACCEPT_FAIL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, seed: int) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--workers", type=int, default=0, help="0 = available CPUs")
    p.add_argument("--output-dir", default="sigmaband_out")


def _add_spectral(p: argparse.ArgumentParser) -> None:
    p.add_argument("--E", type=float, default=0.0)
    p.add_argument("--x1", type=float, default=0.0)
    p.add_argument("--y1", type=float, default=1.0)
    p.add_argument("--x2", type=float, default=0.0)
    p.add_argument("--y2", type=float, default=2.0)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--M", type=int, default=1)
    p.add_argument("--gamma", default="0.5", help="one value or a comma list of M values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigmaband", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"sigmaband {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("spectrum", help="sample deformed spectra, widths and histograms")
    _add_common(s, 7)
    s.add_argument("--ensemble", choices=("gue", "rbm"), default="gue")
    s.add_argument("--N", type=int, default=None)
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--W", type=int, default=50)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--variant", choices=("J_sigma", "J_old"), default="J_sigma")
    s.add_argument("--boundary", choices=("neumann", "dirichlet"), default="neumann")
    s.add_argument("--M", type=int, default=1, help="deformation rank (0 = none)")
    s.add_argument("--gamma", default="0.5")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--method", choices=("dense", "secular"), default="dense")
    s.add_argument("--E", type=float, default=0.0)
    s.add_argument("--window", type=float, default=0.25)
    s.add_argument("--bins", type=int, default=44)
    s.add_argument("--svg", action="store_true")
    s.set_defaults(func=cmd_spectrum)

    c = sub.add_parser("compare-z", help="Monte Carlo, sigma-model, transfer and GUE-limit Z")
    _add_common(c, 11)
    _add_spectral(c)
    c.add_argument("--n", type=int, default=1)
    c.add_argument("--beta", type=float, default=1.0)
    c.add_argument("--W-list", default="32,64,128")
    c.add_argument("--beta-tilde-list", default="100,1000,10000")
    c.add_argument("--chain-n", type=int, default=4, help="chain length of the transfer route")
    c.add_argument("--samples", type=int, default=20000)
    c.add_argument("--routes", default="mc,sigma,transfer,gue_limit")
    c.set_defaults(func=cmd_compare_z)

    d = sub.add_parser("density", help="width density from Z against Monte Carlo")
    _add_common(d, 12)
    d.add_argument("--E", type=float, default=0.0)
    d.add_argument("--M", type=int, default=1)
    d.add_argument("--gamma", default="0.5", help="comma list: one curve per value")
    d.add_argument("--N", type=int, default=200)
    d.add_argument("--samples", type=int, default=2000)
    d.add_argument("--window", type=float, default=0.25)
    d.add_argument("--y-max", type=float, default=16.0)
    d.add_argument("--fd-step", type=float, default=0.02)
    d.add_argument("--kappa-small", type=float, default=1e-3)
    d.add_argument("--kappa-check", action="store_true")
    d.add_argument("--svg", action="store_true")
    d.set_defaults(func=cmd_density)

    a = sub.add_parser("accept", help="run the acceptance suite")
    _add_common(a, 11)
    a.set_defaults(output_dir=None)
    a.add_argument("--quick", action="store_true")
    a.add_argument("--only", default=None, help="comma list, e.g. A1,A4")
    a.add_argument("--calibration", type=float, default=None,
                   help="override the measured normalisation constant")
    a.set_defaults(func=cmd_accept)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("config", "func", "help"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        act = actions[key]
        if act.nargs == 0:  # store_true
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = act.type(raw) if act.type else raw
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
            if act.choices and defaults[key] not in act.choices:
                raise ConfigError(f"config key {key!r} must be one of {list(act.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        return int(args.func(args))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, sm.CalibrationError) as exc:
        print(f"error: invalid parameters: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
