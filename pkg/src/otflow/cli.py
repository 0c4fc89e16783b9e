"""Command-line entry point: generate, train, eval, interpolate.

Thread count (--threads or OTFLOW_THREADS) is applied to the BLAS pools
before numpy is imported, which is why the heavy imports live inside the
command functions.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS")


def _apply_threads(threads):
    if threads is None:
        threads = os.environ.get("OTFLOW_THREADS")
    if threads is None:
        return
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(int(threads))


def _build_parser():
    parser = argparse.ArgumentParser(prog="otflow",
                                     description="Latent-dynamics image time-series model "
                                                 "with transport-based temporal regularization")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="render a synthetic dataset to disk")
    gen.add_argument("--config", default=None, help="JSON config (defaults used when omitted)")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--seed", type=int, default=None, help="override the config seed")
    gen.add_argument("--threads", type=int, default=None)

    tr = sub.add_parser("train", help="train a model on a dataset")
    tr.add_argument("--config", default=None)
    tr.add_argument("--data", default=None, help="dataset directory (overrides config data_dir)")
    tr.add_argument("--out", required=True, help="run directory")
    tr.add_argument("--reg", choices=["ot", "l2-latent", "l2-image", "none"], default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--threads", type=int, default=None)

    ev = sub.add_parser("eval", help="evaluate a trained run")
    ev.add_argument("--run", required=True)
    ev.add_argument("--data", default=None)
    ev.add_argument("--protocol", required=True,
                    choices=["static", "dynamic", "dynamic-heldout"])
    ev.add_argument("--threads", type=int, default=None)

    ip = sub.add_parser("interpolate", help="write interpolated frames between two time points")
    ip.add_argument("--run", required=True)
    ip.add_argument("--data", default=None)
    ip.add_argument("--series", type=int, required=True)
    ip.add_argument("--from", dest="j0", type=int, required=True)
    ip.add_argument("--to", dest="j1", type=int, required=True)
    ip.add_argument("--steps", type=int, required=True)
    ip.add_argument("--methods", default="manifold,l2,w2")
    ip.add_argument("--threads", type=int, default=None)
    return parser


def cmd_generate(args) -> None:
    from . import config as cfgmod
    from .datasets import generate_gaussian_series, write_dataset

    config = cfgmod.load_config(args.config) if args.config else cfgmod.resolve_config({})
    if args.seed is not None:
        config["seed"] = args.seed
    config["out_dir"] = str(args.out)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = generate_gaussian_series(cfgmod.dataset_config(config))
    write_dataset(series, out)
    cfgmod.write_config(config, out / "config.json")
    print(f"wrote {len(series)} series to {out}")


def _load_run_config(run_dir, cfgmod):
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        from .errors import ConfigError
        raise ConfigError(f"run config not found: {cfg_path}")
    return cfgmod.resolve_config(json.loads(cfg_path.read_text()))


def _resolve_data_dir(args_data, config):
    from .errors import ConfigError
    data_dir = args_data or config.get("data_dir")
    if not data_dir:
        raise ConfigError("no dataset directory: pass --data or set data_dir in the config")
    return Path(data_dir)


def cmd_train(args) -> None:
    from . import config as cfgmod
    from .datasets import load_dataset, subsample
    from .training import train

    config = cfgmod.load_config(args.config) if args.config else cfgmod.resolve_config({})
    if args.seed is not None:
        config["seed"] = args.seed
    if args.reg is not None:
        config["training"]["regularizer"] = args.reg
    if args.data is not None:
        config["data_dir"] = str(args.data)
    config["out_dir"] = str(args.out)

    data_dir = _resolve_data_dir(args.data, config)
    dataset = load_dataset(data_dir)
    stride = config["dataset"]["stride"]
    train_set = [subsample(s, stride)[0] for s in dataset]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.write_config(config, out / "config.json")
    result = train(train_set, cfgmod.arch_config(config), cfgmod.train_config(config),
                   out_dir=out)
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs "
          f"(total {last['total']:.6g}, dynamic {last['dynamic']:.6g}) -> {out}")


def _load_params(run_dir):
    from .autodiff import load_checkpoint
    from .errors import MissingCheckpoint
    from .models import params_from_arrays

    ckpt = Path(run_dir) / "checkpoint.ckpt"
    if not ckpt.exists():
        raise MissingCheckpoint(f"no checkpoint at {ckpt}")
    return params_from_arrays(load_checkpoint(ckpt))


def cmd_eval(args) -> None:
    from . import config as cfgmod
    from .datasets import heldout_indices, load_dataset
    from .evaluation import eval_dynamic, eval_static, write_aggregate_csv, write_per_frame_csv

    config = _load_run_config(args.run, cfgmod)
    arch = cfgmod.arch_config(config)
    dataset = load_dataset(_resolve_data_dir(args.data, config))
    params = _load_params(args.run)
    substep = config["evaluation"]["substep"]
    regularizer = config["training"]["regularizer"]

    if args.protocol == "static":
        report = eval_static(dataset, params, arch)
    elif args.protocol == "dynamic":
        report = eval_dynamic(dataset, params, arch, substep=substep)
    else:
        held = heldout_indices(len(dataset[0]), config["dataset"]["stride"])
        report = eval_dynamic(dataset, params, arch, substep=substep,
                              heldout_only_indices=held)

    eval_dir = Path(args.run) / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    per_frame = eval_dir / f"per_frame_{args.protocol}.csv"
    aggregate = eval_dir / f"aggregate_{args.protocol}.csv"
    write_per_frame_csv([report], per_frame, regularizer=regularizer, dataset="gaussian")
    write_aggregate_csv([(regularizer, "gaussian", report)], aggregate)
    print(f"{args.protocol}: mse_mean={report.mse_mean:.6g} ssim_mean={report.ssim_mean:.6g} "
          f"({len(report.mse_values)} frames) -> {eval_dir}")


def cmd_interpolate(args) -> None:
    from . import config as cfgmod
    from . import models
    from .errors import IndexOutOfRange
    from .datasets import load_dataset
    from .evaluation import interp_baselines
    from .grids import write_f32grid, write_pgm
    from .ot import SinkhornConfig, default_barycenter_config

    config = _load_run_config(args.run, cfgmod)
    arch = cfgmod.arch_config(config)
    dataset = load_dataset(_resolve_data_dir(args.data, config))
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in ("manifold", "l2", "w2"):
            from .errors import ConfigError
            raise ConfigError(f"unknown interpolation method {m!r}")

    if not 0 <= args.series < len(dataset):
        raise IndexOutOfRange(f"series {args.series} outside 0..{len(dataset) - 1}")
    series = dataset[args.series]
    if not (0 <= args.j0 < args.j1 < len(series)):
        raise IndexOutOfRange(f"frame pair ({args.j0}, {args.j1}) outside the "
                              f"{len(series)}-frame series")
    if args.steps < 2:
        raise IndexOutOfRange("need at least 2 steps (the endpoints)")

    t0, t1 = series.times[args.j0], series.times[args.j1]
    ts_abs = [t0 + (t1 - t0) * k / (args.steps - 1) for k in range(args.steps)]
    ts_rel = [(t - t0) / (t1 - t0) for t in ts_abs]

    out_dir = Path(args.run) / "interp" / f"series{args.series}_{args.j0}-{args.j1}"
    out_dir.mkdir(parents=True, exist_ok=True)

    frames_by_method = {}
    baseline_methods = [m for m in methods if m in ("l2", "w2")]
    if baseline_methods:
        eps = config["evaluation"]["w2_epsilon"]
        bary_cfg = (SinkhornConfig(epsilon=eps, max_iters=400, convergence_tol=1e-6,
                                   debias=False) if eps is not None
                    else default_barycenter_config(arch.image_height, arch.image_width))
        frames_by_method.update(interp_baselines(series.frames[args.j0],
                                                 series.frames[args.j1], ts_rel,
                                                 methods=tuple(baseline_methods),
                                                 bary_cfg=bary_cfg))
    if "manifold" in methods:
        params = _load_params(args.run)
        z0 = models.encode(series.frames[args.j0], params, arch)
        traj = models.integrate(z0.reshape(1, -1), [t - t0 for t in ts_abs], params,
                                substep=config["evaluation"]["substep"])
        frames_by_method["manifold"] = [models.decode(c.values[0], params, arch)
                                        for c in traj.codes]

    for method, frames in frames_by_method.items():
        for k, frame in enumerate(frames):
            write_f32grid(frame, out_dir / f"{method}_{k:03d}.f32grid")
            write_pgm(frame, out_dir / f"{method}_{k:03d}.pgm")
    print(f"wrote {sum(len(v) for v in frames_by_method.values())} frames -> {out_dir}")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _apply_threads(args.threads)
    from .errors import OtflowError

    commands = {"generate": cmd_generate, "train": cmd_train,
                "eval": cmd_eval, "interpolate": cmd_interpolate}
    try:
        commands[args.command](args)
    except OtflowError as exc:
        print(f"OTFLOW-ERROR {exc.code}: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
