"""Command line entry point: ``sbflow <command> ...``.

Exit codes: 0 success, 1 usage / configuration / IO error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import analytic, experiments
from .config import load_config
from .data_metrics import sampler_for, wasserstein2
from .numerics import RngState
from .train import MetricsLog, TrainingDiverged, load_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text}") from exc


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg) -> Path:
    return Path(args.out or cfg.run.out_dir)


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    res = experiments.run_pretrain(cfg, ema=args.ema, record_wallclock=not args.no_wallclock)
    ckpt = experiments.write_outputs(_out_dir(args, cfg), "pretrain", res, cfg)
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load(args)
    if not args.checkpoint:
        raise UsageError("finetune needs --checkpoint PATH (a pretrain checkpoint)")
    model, rng, _ = load_model(_existing(args.checkpoint))
    if args.seed is not None or rng is None:
        rng = RngState(cfg.train.seed, experiments.STREAM_TRAIN)
    res = experiments.run_finetune(cfg, model, rng, ema=args.ema,
                                   record_wallclock=not args.no_wallclock)
    ckpt = experiments.write_outputs(_out_dir(args, cfg), "finetune", res, cfg)
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint PATH")
    model, _, meta = load_model(_existing(args.checkpoint))
    rng = RngState(cfg.train.seed, experiments.STREAM_EVAL)
    metrics = experiments.evaluate(model, cfg, rng, ema=args.ema, full=True)
    log = MetricsLog(record_wallclock=False)
    log.add(step=model.step, phase="eval", **metrics)
    # W2 of a target cloud with itself; must be exactly zero
    ref = sampler_for(cfg.target)(min(cfg.eval.n_eval, 1000), RngState(cfg.train.seed, 99))
    log.add(step=model.step, phase="self_check", w2_mean=wasserstein2(ref, ref), w2_sd=0.0)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    log.write_csv(out / "eval.csv")
    print(f"wrote {out / 'eval.csv'}")
    return EXIT_OK


def cmd_gaussian_analytic(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = analytic.MODES if args.mode == "both" else (args.mode,)
    with open(out / "imf_gaussian.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "eps_err", "n", "c00", "c11", "c01", "abs_c11_minus_1",
                    "abs_c01_minus_sqrt2m1"])
        for mode in modes:
            for e in args.eps_err_list:
                states = analytic.run_imf_gaussian(mode, e, args.n_iters,
                                                   stop_if_inadmissible=True)
                for n in range(1, args.n_iters + 1):
                    if n < len(states):
                        s = states[n]
                        row = [s.c00, s.c11, s.c01, abs(s.c11 - 1), abs(s.c01 - analytic.SQRT2_M1)]
                    else:
                        # the recursion left the admissible region
                        row = [float("nan"), float("inf"), float("inf"), float("inf"), float("inf")]
                    w.writerow([mode, repr(float(e)), n] + [repr(float(v)) for v in row])
    with open(out / "eot.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma0", "sigma1", "eps", "cross_cov"])
        for e in args.eps_list:
            w.writerow([repr(args.sigma0), repr(args.sigma1), repr(e),
                        repr(analytic.gaussian_eot_cross_cov(args.sigma0, args.sigma1, e))])
    print(f"wrote {out / 'imf_gaussian.csv'} and {out / 'eot.csv'}")
    return EXIT_OK


def cmd_toy_flow(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_t = int(round(args.t_end / args.dt))
    ts = np.arange(n_t + 1) * args.dt
    flow = analytic.toy_flow(args.x0, args.y0, ts)
    rk4 = analytic.toy_flow_rk4(args.x0, args.y0, args.t_end, n_t)
    with open(out / "toy_flow.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "x_rk4", "y_rk4"])
        for i, t in enumerate(ts):
            w.writerow([repr(float(t)), repr(float(flow.x[i])), repr(float(flow.y[i])),
                        repr(float(rk4[i].x)), repr(float(rk4[i].y))])
    with open(out / "toy_iterates.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "n", "x", "y", "x_law", "y_sum"])
        for a in args.alpha_list:
            for n, s in enumerate(analytic.toy_iterate(args.x0, args.y0, a, args.n)):
                w.writerow([repr(a), n, repr(s.x), repr(s.y),
                            repr(args.x0 * (1 - a / 2) ** n),
                            repr(float(analytic.toy_y_sum(args.x0, args.y0, a, n)))])
    print(f"wrote {out / 'toy_flow.csv'} and {out / 'toy_iterates.csv'}")
    return EXIT_OK


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return p


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sbflow", description="Schrodinger-bridge flow experiments")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def run_args(sp, checkpoint: bool):
        sp.add_argument("--config", required=True, help="experiment INI file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", default=None, help="model checkpoint (.npz)")
        sp.add_argument("--ema", dest="ema", action="store_true", default=None,
                        help="sample with EMA parameters")
        sp.add_argument("--no-ema", dest="ema", action="store_false",
                        help="sample with raw parameters")

    sp = sub.add_parser("pretrain", help="bridge matching on the initial coupling")
    run_args(sp, checkpoint=False)
    sp.add_argument("--no-wallclock", action="store_true", help="leave wallclock_s empty")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="online, iterative or replay finetuning")
    run_args(sp, checkpoint=True)
    sp.add_argument("--no-wallclock", action="store_true", help="leave wallclock_s empty")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    run_args(sp, checkpoint=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gaussian-analytic", help="Gaussian IMF recursions and EOT constants")
    sp.add_argument("--sigma0", type=float, default=1.0)
    sp.add_argument("--sigma1", type=float, default=1.0)
    sp.add_argument("--eps-list", type=_float_list, default=[0.25, 1.0, 2.0])
    sp.add_argument("--mode", choices=list(analytic.MODES) + ["both"], default="both")
    sp.add_argument("--n-iters", type=int, default=200)
    sp.add_argument("--eps-err-list", type=_float_list, default=[0.0, 0.1, 0.2])
    sp.add_argument("--out", default="out")
    sp.set_defaults(func=cmd_gaussian_analytic)

    sp = sub.add_parser("toy-flow", help="two-set projection flow and relaxed iterates")
    sp.add_argument("--x0", type=float, default=1.0)
    sp.add_argument("--y0", type=float, default=0.5)
    sp.add_argument("--alpha-list", type=_float_list, default=[0.1, 0.5, 1.0])
    sp.add_argument("--n", type=int, default=60)
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--t-end", type=float, default=10.0)
    sp.add_argument("--out", default="out")
    sp.set_defaults(func=cmd_toy_flow)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"sbflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (TrainingDiverged, FloatingPointError, analytic.InadmissibleState) as exc:
        print(f"sbflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"sbflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
