"""Command-line entry point: ``pflow {train,solve,sweep,diagnose,bench}``.

Failures print ``error: <code>: <message>`` to stderr and exit with the
status attached to the error class (see ``errors.py``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .cfm import COUPLINGS, DATASET_KINDS, ToyDataset, TrainConfig, train, write_training_log
from .degradations import TASKS, degrade, naive_inverse, write_observation
from .diagnostics import (
    alignment_sweep,
    anisotropy_growth_experiment,
    build_jacobian_chain,
    perturbation_experiment,
)
from .errors import ConfigurationError, PFlowError
from .harness import (
    compare_solvers,
    default_solver_config,
    load_experiment_config,
    run_experiment,
    task_operator,
)
from .integrator import FlowConfig, gronwall_check
from .metrics import PSNR_CAP, psnr
from .numerics import Rng
from .recipes import train_recipe
from .report import line_chart, write_csv, write_svg
from .solver import SOLVER_KINDS, solve, write_solve_csv
from .velocity_net import load_checkpoint, save_checkpoint

log = logging.getLogger("pflow")


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _load(path, dataset):
    if not os.path.exists(path):
        raise ConfigurationError(f"checkpoint not found: {path}")
    params = load_checkpoint(path)
    dim = ToyDataset(dataset).dim
    if params.dim != dim:
        raise ConfigurationError(f"checkpoint has d={params.dim} but dataset {dataset} has d={dim}")
    return params


def _solver_config(args):
    sc = default_solver_config(args.task)
    changes = {"seed": args.seed}
    for name in ("iterations", "ode_steps", "step_size", "proxy_scalar", "latent_penalty"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "no_projection", False):
        changes["projection_enabled"] = False
    return replace(sc, **changes)


# ---------------------------------------------------------------- commands

def cmd_train(args):
    records = []
    single = any(v is not None for v in (args.epochs, args.lr, args.batch_size, args.coupling))
    if single:
        cfg = TrainConfig(
            batch_size=args.batch_size or 128,
            epochs=args.epochs or 200,
            learning_rate=args.lr or 1e-4,
            coupling=args.coupling or "independent",
            seed=args.seed,
            hidden=tuple(args.hidden) if args.hidden else TrainConfig.hidden,
        )
        params = train(ToyDataset(args.dataset), cfg, log_records=records)
    else:
        params = train_recipe(args.dataset, args.seed, scale=args.recipe_scale, log_records=records)
    save_checkpoint(params, args.out)
    if args.log:
        write_training_log(records, args.log)
    print(f"saved {args.out}: {len(records)} epochs, final loss {records[-1].mean_loss:.6f}")


def cmd_solve(args):
    params = _load(args.checkpoint, args.dataset)
    op = task_operator(args.dataset, args.task)
    truth = ToyDataset(args.dataset).sample(Rng(args.image_seed), args.image_index + 1)[args.image_index]
    obs = degrade(op, truth, Rng(args.seed).spawn(args.image_index))
    sc = _solver_config(args)
    result = solve(args.solver, params, obs, sc, Rng(args.seed).spawn(100_000 + args.image_index))
    os.makedirs(args.out_dir, exist_ok=True)
    write_solve_csv(result, os.path.join(args.out_dir, "solve.csv"))
    write_observation(os.path.join(args.out_dir, "observation.pfob"), obs,
                      {"x0_final": result.x0_final, "x1_final": result.x1_final})
    restored = min(psnr(result.x1_final, truth), PSNR_CAP)
    degraded = min(psnr(naive_inverse(op, obs.y), truth), PSNR_CAP)
    print(f"{args.solver} {args.task}: loss {result.records[0].loss:.5f} -> {result.records[-1].loss:.5f}, "
          f"psnr {degraded:.2f} -> {restored:.2f} dB, peak tapes {result.peak_tapes}")


def _experiment(args):
    cfg = load_experiment_config(args.config)
    changes = {"image_seed": args.seed}
    if args.out_dir:
        changes["output_dir"] = args.out_dir
    if args.checkpoint:
        changes["checkpoint"] = args.checkpoint
    if args.workers:
        changes["workers"] = args.workers
    return replace(cfg, **changes)


def cmd_sweep(args):
    cfg = _experiment(args)
    rows, aggregate, _ = run_experiment(cfg)
    for a in aggregate:
        print(f"{a['cell']}: psnr {a['psnr_mean']:.2f} +/- {a['psnr_std']:.2f} dB "
              f"(degraded {a['degraded_psnr_mean']:.2f}), failed {a['n_failed']}/{a['n']}")
    print(f"{len(rows)} records written to {cfg.output_dir}")


def cmd_bench(args):
    cfg = _experiment(args)
    rows = compare_solvers(cfg)
    for r in rows:
        print(f"image {r['image']}: pflow {r['pflow_wall_ms']:.1f} ms / {r['pflow_peak_tapes']} tapes, "
              f"dflow {r['dflow_wall_ms']:.1f} ms / {r['dflow_peak_tapes']} tapes")


def cmd_diagnose(args):
    os.makedirs(args.out_dir, exist_ok=True)
    out = lambda name: os.path.join(args.out_dir, name)  # noqa: E731
    rng = Rng(args.seed)
    if args.experiment == "anisotropy":
        rows = anisotropy_growth_experiment(_floats(args.epsilons), _ints(args.ns), rng=rng)
        write_csv(out("anisotropy.csv"), list(rows[0]), rows, ["aligned and randomly rotated anisotropic factors"])
        series = {}
        for eps in _floats(args.epsilons):
            sel = [r for r in rows if r["epsilon"] == eps]
            series[f"eps={eps:g} aligned"] = ([r["n"] for r in sel], [r["kappa_aligned"] for r in sel])
            series[f"eps={eps:g} rotated"] = ([r["n"] for r in sel], [r["kappa_misaligned"] for r in sel])
        write_svg(out("anisotropy.svg"), line_chart(series, "condition number of the factor product", "N", "kappa", log_y=True))
        print(f"wrote {len(rows)} rows to {out('anisotropy.csv')}")
        return
    params = _load(args.checkpoint, args.dataset)
    d = params.dim
    if args.experiment == "chain":
        x0 = rng.normal(d)
        chain = build_jacobian_chain(params, x0, args.ode_steps)
        rows = [{"k": k + 1, "kappa": kap, "local_kappa": loc}
                for k, (kap, loc) in enumerate(zip(chain.kappas, chain.local_kappas))]
        write_csv(out("chain.csv"), ["k", "kappa", "local_kappa"], rows,
                  [f"prefix products along one Euler trajectory from a seeded x0 (seed {args.seed}), N={args.ode_steps}"])
        ks = [r["k"] for r in rows]
        write_svg(out("chain.svg"), line_chart(
            {"kappa(M_k)": (ks, chain.kappas), "prod kappa(A_i)": (ks, list(np.cumprod(chain.local_kappas)))},
            "cumulative conditioning", "k", "kappa", log_y=True))
        print(f"kappa(M_N) = {chain.kappas[-1]:.6g}")
    elif args.experiment == "alignment":
        op = task_operator(args.dataset, args.task)
        truth = ToyDataset(args.dataset).sample(rng.spawn(0), 1)[0]
        obs = degrade(op, truth, rng.spawn(1))
        report = alignment_sweep(params, obs, _solver_config(args), args.probes, rng.spawn(2))
        rows = [{"solve": r.solve, "k": r.k, "progress": r.progress, "cosine": r.cosine, "alpha_hat": r.alpha_hat}
                for r in report.records]
        write_csv(out("alignment.csv"), ["solve", "k", "progress", "cosine", "alpha_hat"], rows,
                  [f"probes along proxy solves, progress = k/K; skipped {report.skipped}"])
        series = {}
        for s in sorted({r["solve"] for r in rows}):
            sel = [r for r in rows if r["solve"] == s]
            series[f"solve {s}"] = ([r["progress"] for r in sel], [r["cosine"] for r in sel])
        write_svg(out("alignment.svg"), line_chart(series, "cosine(true, proxy gradient)", "k / K", "cosine"))
        print(f"fraction cos > 0: {report.fraction_positive:.4f} over {len(rows)} probes")
    elif args.experiment == "perturbation":
        x0 = rng.normal(d)
        rows = perturbation_experiment(params, x0, args.ode_steps, _floats(args.scales), args.probes, rng.spawn(1))
        write_csv(out("perturbation.csv"), list(rows[0]), rows, ["relative gradient error vs kappa bound"])
        print(f"violations: {sum(r['violation'] for r in rows)} / {len(rows)}")
    elif args.experiment == "gronwall":
        x = rng.normal((args.pairs, d))
        direction = rng.normal((args.pairs, d))
        xp = x + args.distance * direction / np.linalg.norm(direction, axis=1, keepdims=True)
        rep = gronwall_check(params, list(zip(x, xp)), FlowConfig(args.ode_steps))
        write_csv(out("gronwall.csv"), ["pair", "ratio", "bound", "violation"],
                  [[i, r, rep["bound"], v] for i, (r, v) in enumerate(zip(rep["ratios"], rep["violations"]))],
                  [f"L_v = {rep['lipschitz']!r}"])
        print(f"max ratio {rep['max_ratio']:.6g} <= exp(L_v) = {rep['bound']:.6g}: violations {rep['n_violations']}")


# ---------------------------------------------------------------- parser

def _add_solver_flags(p):
    p.add_argument("--task", choices=TASKS, default="random-inpaint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--ode-steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--proxy-scalar", type=float)
    p.add_argument("--latent-penalty", type=float)
    p.add_argument("--no-projection", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="pflow", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a velocity field by flow matching")
    p.add_argument("--dataset", choices=DATASET_KINDS, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--coupling", choices=COUPLINGS)
    p.add_argument("--hidden", type=_ints)
    p.add_argument("--recipe-scale", type=float, default=1.0,
                   help="fraction of the reference schedule to run when no single-phase flags are given")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="restore one degraded sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", choices=DATASET_KINDS, default="synth-gray-16x16")
    p.add_argument("--solver", choices=SOLVER_KINDS, default="pflow")
    p.add_argument("--image-index", type=int, default=0)
    p.add_argument("--image-seed", type=int, default=1234)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", default="pflow-solve")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    for name, func, helptext in (("sweep", cmd_sweep, "run an experiment config"),
                                 ("bench", cmd_bench, "time and memory of proxy vs full-backprop solves")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, required=True, help="seed selecting the evaluation images")
        p.add_argument("--checkpoint")
        p.add_argument("--out-dir")
        p.add_argument("--workers", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("diagnose", help="conditioning, alignment and perturbation experiments")
    p.add_argument("experiment", choices=("chain", "anisotropy", "alignment", "perturbation", "gronwall"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", choices=DATASET_KINDS, default="two-moons-2d")
    p.add_argument("--out-dir", default="pflow-diagnose")
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--epsilons", default="0,0.1,0.5")
    p.add_argument("--ns", default="1,2,5,10,20")
    p.add_argument("--scales", default="1e-3,1e-2,1e-1")
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--distance", type=float, default=1e-3)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "diagnose" and args.experiment != "anisotropy" and not args.checkpoint:
        parser.error(f"diagnose {args.experiment} needs --checkpoint")
    if args.command == "diagnose" and args.ode_steps is None:
        args.ode_steps = default_solver_config(args.task).ode_steps
    try:
        args.func(args)
    except PFlowError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(f"error: io-error: {exc}", file=sys.stderr)
        return 7
    return 0


if __name__ == "__main__":
    sys.exit(main())
