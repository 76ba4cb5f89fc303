"""Command-line interface: ``scqm <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.

Output files (all CSV files have a header row)
--------------------------------------------
gen          data.csv (x0..), data_clean.csv, meta.json
fit          model.json, trace.csv, latents.csv (t0..)
project      projection.csv (t0.., y0.., converged, grad_norm)
denoise      denoised.csv (x0..), diagnostics.json
bench-sphere bench_table.csv (sigma, loss|variant..), bench_errors.csv
toy2d        toy_curves.csv (p, seed, variant, t, x0, x1),
             toy_arrows.csv (p, seed, variant, index, x0, x1, y0, y1),
             toy_summary.json
sensitivity  sensitivity.json
convexity    convexity.json
interpolate  grid.csv (t0.., x0..)
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .analysis import (
    SingularHessianError,
    l2_sensitivity_decomposition,
    sensitivity_check,
    verify_convexity_ball,
)
from .datagen import circle_dataset, noise_dataset, sphere_dataset
from .losses import LossError, LossSpec, format_loss, parse_loss
from .optimizer import DivergenceError, FitConfig, fit
from .pipeline import DenoiseConfig, benchmark_sphere, denoise, latent_grid_decode, mse, toy_circle
from .projection import project

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class Run:
    """Per-invocation state: resolved options and the current stage name."""

    def __init__(self, args):
        self.args = args
        self.stage = args.command
        self.out = Path(args.out)
        self.cfg = FitConfig()
        self.extra = {}
        self.loss = LossSpec("l2sq")

    def setup(self):
        args = self.args
        if args.config:
            self.step("reading config")
            self.cfg, self.extra = io.load_config(args.config)
        self.cfg = self.cfg.replace(seed=args.seed)
        if getattr(args, "max_iters", None) is not None:
            self.cfg = self.cfg.replace(max_iters=args.max_iters)
        self.step("parsing loss")
        text = args.loss or self.extra.get("loss") or "l2sq"
        self.loss = parse_loss(text)

    def step(self, what: str):
        self.stage = f"{self.args.command}: {what}"

    def say(self, msg: str):
        if not self.args.quiet:
            print(msg)

    def option(self, name, default):
        val = getattr(self.args, name, None)
        if val is not None:
            return val
        return self.extra.get(name, default)

    def outdir(self) -> Path:
        self.step(f"creating {self.out}")
        return io.ensure_dir(self.out)


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# commands


def cmd_gen(run: Run):
    a = run.args
    run.step(f"generating {a.kind}")
    if a.kind == "circle":
        ds = circle_dataset(a.n, a.noise, rng=a.seed, t_range=(a.t_min, a.t_max))
    elif a.kind == "sphere":
        ds = sphere_dataset(a.n, a.sigma, rng=a.seed)
    else:
        ds = noise_dataset(a.noise or "gg:p=2", a.dim, a.n, rng=a.seed)
    out = run.outdir()
    run.step("writing data")
    paths = io.save_dataset(out / "data.csv", ds)
    run.say("wrote " + ", ".join(str(p) for p in paths))


def _load_points(run: Run, path):
    run.step(f"reading {path}")
    return io.read_points(path)


def cmd_fit(run: Run):
    X = _load_points(run, run.args.data)
    d, s = run.option("d", 1), run.option("s", 1)
    run.step("fitting")
    model, taus, trace = fit(X, d, s, run.loss, run.cfg, freeze_theta=run.option("linear_ablation", False))
    out = run.outdir()
    run.step("writing model")
    io.save_model(out / "model.json", model, run.loss)
    io.write_trace(out / "trace.csv", trace)
    io.write_points(out / "latents.csv", taus, prefix="t")
    run.say(
        f"objective {trace.objective[0]:.6g} -> {trace.objective[-1]:.6g} in {trace.n_iter} "
        f"iterations (converged={trace.converged}, KKT max {trace.kkt.max():.3g})"
    )


def _load_model(run: Run, path):
    run.step(f"reading {path}")
    model, loss = io.load_model(path)
    if run.args.loss is None and loss is not None:
        run.loss = loss
    return model


def cmd_project(run: Run):
    model = _load_model(run, run.args.model)
    Y = _load_points(run, run.args.data)
    if Y.shape[0] != model.D:
        raise UsageError(f"points have dimension {Y.shape[0]}, model expects {model.D}")
    run.step("projecting")
    rows = []
    for y in Y.T:
        pr = project(model, y, run.loss, run.cfg, n_starts=run.args.n_starts)
        rows.append([*pr.tau, *pr.y_hat, int(pr.converged), pr.grad_norm])
    out = run.outdir()
    run.step("writing projection")
    header = [f"t{k}" for k in range(model.d)] + [f"y{k}" for k in range(model.D)]
    io._write_rows(out / "projection.csv", header + ["converged", "grad_norm"], rows)
    run.say(f"projected {len(rows)} points ({sum(r[-2] for r in rows)} converged)")


def cmd_denoise(run: Run):
    path = Path(run.args.data)
    run.step(f"reading {path}")
    ds = io.load_dataset(path)
    cfg = DenoiseConfig(
        K=run.option("K", 30), d=run.option("d", 2), s=run.option("s", 1),
        loss=run.loss, linear_ablation=run.option("linear_ablation", False), fit=run.cfg,
    )
    run.step("denoising")
    res = denoise(ds.X, cfg, threads=run.args.threads)
    diag = res.diagnostics
    diag["loss"] = format_loss(run.loss)
    if ds.X_clean is not None:
        diag["mse"] = mse(res.X_hat, ds.X_clean)
        diag["mse_input"] = mse(ds.X, ds.X_clean)
    out = run.outdir()
    run.step("writing output")
    io.write_points(out / "denoised.csv", res.X_hat)
    io.write_json(out / "diagnostics.json", diag)
    run.say(f"denoised {diag['n']} points, {diag['n_failed']} failed"
            + (f", MSE {diag['mse']:.6g}" if "mse" in diag else ""))


def cmd_bench(run: Run):
    a = run.args
    run.step("parsing grid")
    sigmas = _floats(a.sigmas)
    losses = [parse_loss(t) for t in a.losses.split(",")] if a.losses else [run.loss]
    variants = [v.strip() for v in a.variants.split(",")]
    seeds = _ints(a.seeds)
    run.step("benchmarking")
    report = benchmark_sphere(
        sigmas, losses, variants, n=a.n, K=run.option("K", 30), d=run.option("d", 2),
        s=run.option("s", 1), seeds=seeds, fit_cfg=run.cfg, threads=a.threads,
    )
    out = run.outdir()
    run.step("writing report")
    table, _ = io.write_bench(out, report)
    header, rows = report.table()
    run.say(",".join(header))
    for row in rows:
        run.say(",".join(f"{v:.6g}" for v in row))


def cmd_toy2d(run: Run):
    a = run.args
    ps, seeds = _floats(a.p), _ints(a.seeds)
    curves, arrows, summary = [], [], []
    for p in ps:
        for seed in seeds:
            run.step(f"fitting p={p} seed={seed}")
            for tf in toy_circle(p, seed, n=a.n, noise_scale=a.noise_scale, cfg=run.cfg):
                pts, grid = latent_grid_decode(tf.model, tf.taus, a.grid)
                curves += [[p, seed, tf.variant, t, *x] for t, x in zip(grid[0], pts.T)]
                arrows += [[p, seed, tf.variant, i, *x, *y]
                           for i, (x, y) in enumerate(zip(tf.data.X.T, tf.projections.T))]
                summary.append({"p": p, "seed": seed, "variant": tf.variant,
                                "circle_distance": tf.circle_distance})
    out = run.outdir()
    run.step("writing output")
    io._write_rows(out / "toy_curves.csv", ["p", "seed", "variant", "t", "x0", "x1"], curves)
    io._write_rows(out / "toy_arrows.csv",
                   ["p", "seed", "variant", "index", "x0", "x1", "y0", "y1"], arrows)
    io.write_json(out / "toy_summary.json", summary)
    for row in summary:
        run.say(f"p={row['p']} seed={row['seed']} {row['variant']}: "
                f"circle distance {row['circle_distance']:.4g}")


def cmd_sensitivity(run: Run):
    X = _load_points(run, run.args.data)
    rng = np.random.default_rng(run.args.seed)
    deltas = run.args.scale * rng.standard_normal(X.shape)
    run.step("solving")
    rep = sensitivity_check(X, run.loss, deltas)
    doc = dict(vars(rep))
    doc["scale"] = run.args.scale
    if run.loss.kind == "l2":
        doc["l2_projector_form"] = l2_sensitivity_decomposition(
            X, deltas, c_star=np.array(rep.c_star)
        ).tolist()
    out = run.outdir()
    run.step("writing report")
    io.write_json(out / "sensitivity.json", doc)
    run.say(f"relative error of the predicted change: {rep.rel_error:.3g}")


def cmd_convexity(run: Run):
    model = _load_model(run, run.args.model)
    x = np.array(_floats(run.args.x))
    if x.shape != (model.D,):
        raise UsageError(f"--x needs {model.D} values")
    run.step("sampling")
    cert = verify_convexity_ball(model, x, run.loss, run.args.samples, run.args.seed,
                                 scale=run.args.scale)
    out = run.outdir()
    run.step("writing report")
    io.write_json(out / "convexity.json", cert.to_dict())
    run.say(f"r_p={cert.r_p:.4g}, {cert.samples_checked} samples inside, "
            f"min eigenvalue {cert.min_eig_observed:.4g}")


def cmd_interpolate(run: Run):
    model = _load_model(run, run.args.model)
    taus = _load_points(run, run.args.latents)
    if taus.shape[0] != model.d:
        raise UsageError(f"latents have dimension {taus.shape[0]}, model expects {model.d}")
    run.step("decoding grid")
    pts, grid = latent_grid_decode(model, taus, run.args.grid)
    out = run.outdir()
    run.step("writing grid")
    header = [f"t{k}" for k in range(model.d)] + [f"x{k}" for k in range(model.D)]
    io._write_rows(out / "grid.csv", header, np.vstack([grid, pts]).T)
    run.say(f"decoded {grid.shape[1]} grid points")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--config", help="flat TOML file with FitConfig/DenoiseConfig keys")
    g.add_argument("--loss", help='loss string, e.g. "lpp:p=1.5" (default l2sq)')
    g.add_argument("--out", default=".", help="output directory (default .)")
    g.add_argument("--quiet", action="store_true", help="suppress the summary on stdout")
    g.add_argument("--threads", type=int, default=1, help="worker threads for batched fits")
    g.add_argument("--max-iters", type=int, dest="max_iters", help="override FitConfig.max_iters")

    parser = _Parser(prog="scqm", description="Robust subspace-constrained quadratic models.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a synthetic dataset")
    p.add_argument("kind", choices=["circle", "sphere", "noise"])
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--sigma", type=float, default=0.03, help="sphere noise level")
    p.add_argument("--noise", help='noise spec, e.g. "gg:p=1.5:scale=0.1" or "radial_laplace"')
    p.add_argument("--dim", type=int, default=1, help="dimension of pure noise samples")
    p.add_argument("--t-min", type=float, default=0.0, dest="t_min")
    p.add_argument("--t-max", type=float, default=4.0, dest="t_max")

    def model_dims(p):
        p.add_argument("--d", type=int, help="latent dimension")
        p.add_argument("--s", type=int, help="number of curvature directions")
        p.add_argument("--linear", action="store_const", const=True, dest="linear_ablation",
                       help="fix Theta = 0 (affine-subspace fit)")

    p = add("fit", cmd_fit, "fit one model to a CSV point set")
    p.add_argument("data")
    model_dims(p)

    p = add("project", cmd_project, "project points onto a fitted model")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--n-starts", type=int, default=1, dest="n_starts")

    p = add("denoise", cmd_denoise, "denoise a point set by local fits")
    p.add_argument("data")
    p.add_argument("--K", type=int, help="neighborhood size (default 30)")
    model_dims(p)

    p = add("bench-sphere", cmd_bench, "denoising benchmark on the noisy sphere")
    p.add_argument("--sigmas", default="0.03,0.06,0.09,0.12,0.15,0.18,0.21")
    p.add_argument("--losses", help="comma-separated loss strings (default --loss)")
    p.add_argument("--variants", default="quadratic,linear")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--K", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--s", type=int)

    p = add("toy2d", cmd_toy2d, "circle toy: quadratic vs linear fits under matched noise")
    p.add_argument("--p", default="1,2", help="comma-separated noise exponents")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--noise-scale", type=float, default=1.0, dest="noise_scale")
    p.add_argument("--grid", type=int, default=200, help="curve samples per fit")

    p = add("sensitivity", cmd_sensitivity, "predicted vs re-solved change of the loss center")
    p.add_argument("data")
    p.add_argument("--scale", type=float, default=1e-4, help="perturbation scale")

    p = add("convexity", cmd_convexity, "check the latent convexity ball of an lpp model")
    p.add_argument("model")
    p.add_argument("--x", required=True, help="comma-separated observation")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--scale", type=float, default=1.0, help="spread of sampled latents")

    p = add("interpolate", cmd_interpolate, "decode a latent grid through a model")
    p.add_argument("model")
    p.add_argument("latents", help="latents CSV written by fit")
    p.add_argument("--grid", type=int, default=20, help="points per latent axis")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    stage = "arguments"
    try:
        args = parser.parse_args(argv)
        stage = args.command
        r = Run(args)
        try:
            r.setup()
            args.func(r)
        finally:
            stage = r.stage
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, LossError) as exc:
        print(f"scqm {stage}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, SingularHessianError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"scqm {stage}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"scqm {stage}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"scqm {stage}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
