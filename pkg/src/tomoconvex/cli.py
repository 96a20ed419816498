"""Command-line pipeline: data synthesis, preparation, inversion, probes.

Subcommands
-----------
gen-data        config -> boundary traces + true medium files
prep-data       boundary traces -> coefficient bundle (optional noise)
invert          bundle -> reconstruction + iteration trace
probe-convexity sampled strict-convexity check with a doubling search
check-grad      adjoint gradient vs central differences
check-lemma81   numeric check of the weighted Volterra smoothing estimate
stability       two bundles -> empirical Lipschitz quotient
run             full pipeline with a manifest
init-config     write the default config file

Exit codes of ``invert``: 0 converged, 2 iteration budget exhausted,
3 infeasible/inconsistent input, 4 divergence.

All heavy artifacts use the self-describing binary container; reruns of the
same config with the same seeds are bit-identical (timings are kept apart in
timings.csv, which is the one file excluded from that contract).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, fileio
from .basis import build_basis, dump_basis_csv, gauss_legendre_quadrature
from .config import RunConfig, load_config, write_default_config
from .core import ConvergenceError, Grid, InfeasibleError, ScalarField3D
from .forward import make_source_line, synthesize_boundary_data
from .operator import check_volterra_smoothing, make_context
from .optimizer import (DivergenceError, SolverConfig, bundle_distance,
                        compute_m_errors, gradient_projection, invert_bundle,
                        probe_convexity, reconstruct_m, stability_experiment)
from .pipeline import add_noise, load_bundle, prepare_bundle, save_bundle
from .presets import make_preset_medium, regularity_diagnostic, validate_medium_field

EXIT_OK = 0
EXIT_MAX_ITER = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGED = 4


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Config hash, artifact digests and stage status for one run directory.
    Wall times go to timings.csv instead, so the manifest is deterministic."""

    def __init__(self, outdir, config: RunConfig | None):
        self.outdir = outdir
        self.data = {
            "version": __version__,
            "numpy": np.__version__,
            "config_hash": config.digest() if config else None,
            "stages": {},
            "digests": {},
        }
        self._timings = []

    def stage(self, name, status, error=None):
        self.data["stages"][name] = {"status": status}
        if error:
            self.data["stages"][name]["error"] = str(error)

    def timing(self, name, seconds):
        self._timings.append((name, seconds))

    def add_file(self, path):
        self.data["digests"][os.path.basename(path)] = _sha256(path)

    def write(self):
        with open(os.path.join(self.outdir, "manifest.json"), "w") as f:
            json.dump(self.data, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(os.path.join(self.outdir, "timings.csv"), "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["stage", "seconds"])
            for name, sec in self._timings:
                wr.writerow([name, f"{sec:.3f}"])

    def verify(self) -> bool:
        return all(_sha256(os.path.join(self.outdir, name)) == dig
                   for name, dig in self.data["digests"].items())


def _medium_for(config: RunConfig, fgrid_axes=None):
    if config.preset is not None:
        return make_preset_medium(config.preset, config.grid.A, config.grid.sigma)
    raise ValueError("medium files are handled by gen_data directly")


# ---------------------------------------------------------------------------
# stages


def gen_data(config: RunConfig, outdir) -> dict:
    """Forward stage: eikonal solves for every source, boundary extraction,
    files for the traces and the true medium."""
    os.makedirs(outdir, exist_ok=True)
    grid = config.grid
    sources = make_source_line(config.sources)
    if config.medium_file:
        from .forward import extract_boundary_data, make_forward_grid, solve_all_sources

        m_fine, _ = fileio.load_scalar_field(config.medium_file)
        fgrid = make_forward_grid(grid, config.refine, config.z_refine)
        if (len(m_fine.xs), len(m_fine.ys), len(m_fine.zs)) != (
                len(fgrid.xs), len(fgrid.ys), len(fgrid.zs)) or not np.allclose(
                m_fine.zs, fgrid.zs):
            raise InfeasibleError("medium file does not match the forward grid "
                                  f"(expected {len(fgrid.xs)}^2 x {len(fgrid.zs)} nodes)")
        validate_medium_field(m_fine, grid.A)
        taus = solve_all_sources(m_fine, sources, grid.A, tol=config.sweep_tol)
        data = extract_boundary_data(taus, fgrid, sources.alphas)
    else:
        medium = _medium_for(config)
        probe = medium.sample(np.linspace(0, 1, 9), np.linspace(0, 1, 9),
                              np.linspace(0, grid.A + grid.sigma, 33))
        validate_medium_field(probe, grid.A)
        diag = regularity_diagnostic(medium, grid.A, grid.sigma, n_samples=5)
        if diag["warns"]:
            print(f"warning: medium may focus rays (min Hessian eigenvalue "
                  f"{diag['min_eigenvalue']:.3f} < {diag['warn_threshold']:.3f})",
                  file=sys.stderr)
        data, m_fine = synthesize_boundary_data(medium, grid, sources,
                                                refine=config.refine,
                                                tol=config.sweep_tol)
    data.requested_noise = config.noise
    data_path = os.path.join(outdir, "boundary_data.tcc")
    m_path = os.path.join(outdir, "true_m.tcc")
    fileio.save_boundary_data(data_path, data)
    fileio.save_scalar_field(m_path, m_fine)
    # true medium restricted to the inversion grid, for error reports
    m_inv = _restrict_medium(m_fine, grid)
    m_inv_path = os.path.join(outdir, "true_m_inversion.tcc")
    fileio.save_scalar_field(m_inv_path, m_inv)
    return {"boundary_data": data_path, "true_m": m_path, "true_m_inversion": m_inv_path}


def _restrict_medium(m_fine: ScalarField3D, grid: Grid) -> ScalarField3D:
    ix = np.searchsorted(m_fine.xs, grid.xs)
    iz = np.searchsorted(m_fine.zs, grid.z_nodes)
    vals = m_fine.values[np.ix_(ix, ix, iz)]
    return ScalarField3D(vals, grid.xs, grid.ys, grid.z_nodes)


def prep_data(config: RunConfig, data_path, outdir, dump_basis=None) -> dict:
    os.makedirs(outdir, exist_ok=True)
    data, _ = fileio.load_boundary_data(data_path)
    basis = build_basis(config.N, config.a, gauss_legendre_quadrature(config.Q))
    if dump_basis:
        dump_basis_csv(basis, dump_basis)
    bundle = prepare_bundle(data, basis, data.grid)
    noise = config.noise if config.noise > 0 else data.requested_noise
    if noise > 0:
        bundle = add_noise(bundle, noise, config.seed)
    path = os.path.join(outdir, "bundle.tcc")
    save_bundle(path, bundle)
    return {"bundle": path}


def invert(config: RunConfig, bundle_path, outdir, true_m_path=None) -> dict:
    os.makedirs(outdir, exist_ok=True)
    bundle = load_bundle(bundle_path)
    if (bundle.N, bundle.a, bundle.Q) != (config.N, config.a, config.Q):
        raise InfeasibleError("bundle basis parameters disagree with the config")
    basis = build_basis(config.N, config.a, gauss_legendre_quadrature(config.Q))
    cfg = config.solver
    W, trace, result, ctx = invert_bundle(bundle, basis, cfg)
    if true_m_path:
        m_true, _ = fileio.load_scalar_field(true_m_path)
        result.rel_l2_error, result.max_error = compute_m_errors(
            result.m_rec, m_true, bundle.grid)
    from .core import CoeffField
    fileio.save_coeff_field(os.path.join(outdir, "w_min.tcc"),
                            CoeffField(W, bundle.grid, boundary_zero=True))
    fileio.save_scalar_field(os.path.join(outdir, "m_rec.tcc"), result.m_rec)
    with open(os.path.join(outdir, "trace.csv"), "w", newline="") as f:
        csv.writer(f).writerows(trace.rows())
    summary = {
        "iterations": len(trace.j_values),
        "converged": trace.converged,
        "reason": trace.reason,
        "final_J": trace.j_values[-1] if trace.j_values else None,
        "final_residual_norm": trace.residual_norms[-1] if trace.residual_norms else None,
        "alpha_spread": result.alpha_spread,
        "negative_nodes": result.negative_nodes,
        "rel_l2_error": result.rel_l2_error,
        "max_error": result.max_error,
    }
    with open(os.path.join(outdir, "invert_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"w_min": os.path.join(outdir, "w_min.tcc"),
            "m_rec": os.path.join(outdir, "m_rec.tcc"),
            "trace": os.path.join(outdir, "trace.csv"),
            "summary": summary, "converged": trace.converged}


def run_pipeline(config: RunConfig, outdir, probe: bool = False) -> Manifest:
    """gen-data -> prep-data -> invert -> summary; partial manifest with a
    failed-stage marker if a stage raises."""
    os.makedirs(outdir, exist_ok=True)
    man = Manifest(outdir, config)
    artifacts = {}
    stages = [("gen-data", lambda: gen_data(config, outdir)),
              ("prep-data", lambda: prep_data(config, artifacts["boundary_data"], outdir)),
              ("invert", lambda: invert(config, artifacts["bundle"], outdir,
                                        true_m_path=artifacts["true_m_inversion"]))]
    summary = None
    for name, fn in stages:
        t0 = time.perf_counter()
        try:
            out = fn()
        except Exception as e:  # preserve inputs for replay
            man.stage(name, "failed", e)
            man.timing(name, time.perf_counter() - t0)
            man.write()
            raise
        man.timing(name, time.perf_counter() - t0)
        man.stage(name, "ok")
        for key, val in out.items():
            if isinstance(val, str):
                artifacts[key] = val
        if name == "invert":
            summary = out["summary"]
    if probe:
        t0 = time.perf_counter()
        bundle = load_bundle(artifacts["bundle"])
        basis = build_basis(config.N, config.a, gauss_legendre_quadrature(config.Q))
        ctx = make_context(bundle, basis)
        rep = probe_convexity(ctx, config.solver.set_params(), lam=config.solver.lam,
                              gamma=config.solver.gamma, n_pairs=20, seed=config.seed)
        man.timing("probe-convexity", time.perf_counter() - t0)
        man.stage("probe-convexity", "ok")
        summary["probe_fraction_pass"] = rep["fraction_pass"]
        summary["probe_lam_all_pass"] = rep["lam_all_pass"]
    _write_run_summary(os.path.join(outdir, "summary.csv"), summary)
    for name in sorted(os.listdir(outdir)):
        if name.endswith((".tcc", ".csv", ".json")) and name not in (
                "timings.csv", "manifest.json"):
            man.add_file(os.path.join(outdir, name))
    man.write()
    return man


def _write_run_summary(path, summary: dict):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        keys = sorted(summary)
        wr.writerow(keys)
        wr.writerow([summary[k] for k in keys])


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_arg(p):
    p.add_argument("--config", "-c", required=True, help="INI run configuration")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="tomoconvex", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write the default config file")
    p.add_argument("path")

    p = sub.add_parser("gen-data", help="synthesize boundary data")
    _add_config_arg(p)
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--noise", type=float, default=None,
                   help="record a noise level to apply downstream at prep-data")

    p = sub.add_parser("prep-data", help="build the coefficient bundle")
    _add_config_arg(p)
    p.add_argument("data", help="boundary_data.tcc from gen-data")
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-basis", default=None, metavar="DIR",
                   help="write basis polynomial/matrix CSVs for inspection")

    p = sub.add_parser("invert", help="minimize the weighted functional")
    _add_config_arg(p)
    p.add_argument("bundle")
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--true-m", default=None, help="true medium for error metrics")
    for name, typ in (("lambda", float), ("gamma", float), ("rho", float),
                      ("R", float), ("max-iter", int), ("tol", float)):
        p.add_argument(f"--{name}", type=typ, default=None)
    p.add_argument("--start", default=None, help="zero or random:SEED")

    p = sub.add_parser("probe-convexity", help="sampled strict-convexity check")
    _add_config_arg(p)
    p.add_argument("bundle")
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("check-grad", help="adjoint gradient vs finite differences")
    _add_config_arg(p)
    p.add_argument("bundle")
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("check-lemma81", help="weighted Volterra smoothing check")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--A", type=float, default=0.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--n", type=int, default=2001)
    p.add_argument("--profile", choices=["one", "random"], default="one")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("stability", help="empirical Lipschitz quotient of two bundles")
    _add_config_arg(p)
    p.add_argument("bundle1")
    p.add_argument("bundle2")

    p = sub.add_parser("run", help="full pipeline into one output directory")
    _add_config_arg(p)
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--probe", action="store_true", help="append a convexity probe")

    args = ap.parse_args(argv)

    if args.command == "init-config":
        write_default_config(args.path)
        print(f"wrote {args.path}")
        return EXIT_OK

    if args.command == "check-lemma81":
        zs = np.linspace(args.A, args.A + args.sigma, args.n)
        if args.profile == "one":
            prof = np.ones(args.n)
        else:
            prof = np.abs(np.random.default_rng(args.seed).standard_normal(args.n))
        rep = check_volterra_smoothing(prof, zs, args.lam)
        print(f"lambda={args.lam} A={args.A} sigma={args.sigma}: "
              f"lhs={rep['lhs']:.10g} rhs={rep['rhs']:.10g} ok={rep['ok']}")
        return EXIT_OK if rep["ok"] else 1

    config = load_config(args.config)

    try:
        if args.command == "gen-data":
            if args.noise is not None:
                config.noise = args.noise
            out = gen_data(config, args.out)
            print("\n".join(f"{k}: {v}" for k, v in out.items()))
            return EXIT_OK

        if args.command == "prep-data":
            if args.N is not None:
                config.N = args.N
                config.Q = max(4 * config.N + 8, config.Q)
            if args.noise is not None:
                config.noise = args.noise
            if args.seed is not None:
                config.seed = args.seed
            out = prep_data(config, args.data, args.out, dump_basis=args.dump_basis)
            print(f"bundle: {out['bundle']}")
            return EXIT_OK

        if args.command == "invert":
            s = config.solver
            overrides = {"lambda": "lam", "gamma": "gamma", "rho": "rho", "R": "R",
                         "max_iter": "max_iter", "tol": "stop_tol", "start": "start"}
            for arg_name, field_name in overrides.items():
                val = getattr(args, arg_name.replace("-", "_"), None)
                if val is not None:
                    setattr(s, field_name, val)
            out = invert(config, args.bundle, args.out, true_m_path=args.true_m)
            print(json.dumps(out["summary"], indent=2, sort_keys=True))
            return EXIT_OK if out["converged"] else EXIT_MAX_ITER

        if args.command == "probe-convexity":
            bundle = load_bundle(args.bundle)
            basis = build_basis(config.N, config.a, gauss_legendre_quadrature(config.Q))
            ctx = make_context(bundle, basis)
            rep = probe_convexity(ctx, config.solver.set_params(), lam=config.solver.lam,
                                  gamma=config.solver.gamma, n_pairs=args.pairs,
                                  seed=args.seed)
            print(json.dumps(rep, indent=2, sort_keys=True, default=float))
            return EXIT_OK

        if args.command == "check-grad":
            from .core import CoeffField, h1_inner, norm_H1h, zero_boundary
            from .optimizer import eval_J, grad_J, random_feasible_point

            bundle = load_bundle(args.bundle)
            basis = build_basis(config.N, config.a, gauss_legendre_quadrature(config.Q))
            ctx = make_context(bundle, basis)
            cfg = config.solver
            rng = np.random.default_rng(args.seed)
            worst = 0.0
            for p_ in range(args.points):
                W = random_feasible_point(ctx, cfg.set_params(), seed=args.seed + p_)
                g = grad_J(W, ctx, cfg)
                D = zero_boundary(rng.standard_normal(W.shape), bundle.grid)
                D *= 0.1 / norm_H1h(CoeffField(D, bundle.grid, boundary_zero=True))
                t = 1e-4
                fd = (eval_J(W + t * D, ctx, cfg)["value"]
                      - eval_J(W - t * D, ctx, cfg)["value"]) / (2 * t)
                rel = abs(h1_inner(g, D, bundle.grid) - fd) / max(abs(fd), 1e-300)
                worst = max(worst, rel)
                print(f"point {p_}: relative error {rel:.3e}")
            print(f"worst: {worst:.3e}")
            return EXIT_OK if worst <= 1e-5 else 1

        if args.command == "stability":
            b1 = load_bundle(args.bundle1)
            b2 = load_bundle(args.bundle2)
            basis = build_basis(config.N, config.a, gauss_legendre_quadrature(config.Q))
            rep = stability_experiment(b1, b2, basis, config.solver)
            print(json.dumps({k: rep[k] for k in ("m_distance", "data_distance", "ratio")},
                             indent=2, sort_keys=True))
            return EXIT_OK

        if args.command == "run":
            man = run_pipeline(config, args.out, probe=args.probe)
            print(f"manifest: {os.path.join(args.out, 'manifest.json')}")
            return EXIT_OK

    except (InfeasibleError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConvergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MAX_ITER
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
