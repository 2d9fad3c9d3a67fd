"""Command-line entry point: ``c3owd <command> [flags]``.

Exit codes: 0 pass, 1 check failed, 2 usage error, 3 numeric or IO abort.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .numeric import NumericError, dump_tensor, make_rng

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3


@dataclass
class RunManifest:
    command: str
    flags: dict
    seed: int | None
    started: str
    finished: str | None
    version: str = __version__


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _report(args, payload: dict, started: str) -> None:
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    man = RunManifest(args.command, flags, getattr(args, "seed", None), started, _now())
    body = {"manifest": asdict(man), **payload}
    _emit(json.dumps(_clean(body), indent=2, allow_nan=False) + "\n", args.out)


# ---------------------------------------------------------------------------
# commands

def cmd_oracle(args):
    from . import suites
    ops = list(suites.ORACLES) if args.op == "all" else [args.op]
    results = {}
    for op in ops:
        kw = dict(seed=args.seed)
        if args.trials is not None:
            kw["trials"] = args.trials
        if op == "biwkv":
            kw.update(max_t=args.tmax, max_c=args.cmax)
        res = suites.ORACLES[op](**kw)
        res.pop("seconds", None)  # keep seeded payloads byte-identical
        results[op] = res
    return {"results": results, "passed": all(r["passed"] for r in results.values())}


def cmd_gradcheck(args):
    from . import suites
    mods = None if args.module == "all" else args.module.split(",")
    res = suites.gradient_suite(mods, instances=args.instances, seed=args.seed)
    res.pop("seconds", None)
    return res


def cmd_bench(args):
    from . import suites
    if args.op != "biwkv":
        raise SystemExit(EXIT_USAGE)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = suites.bench_biwkv(sizes, channels=args.channels, reps=args.reps, seed=args.seed,
                              naive=not args.no_naive)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["T", "scan_ms", "naive_ms"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    ratios = suites.scaling_ratios(rows) if not args.no_naive else {}
    if ratios:
        buf.write(f"# scan_ratio={ratios['scan_ratio']:.3f} naive_ratio={ratios['naive_ratio']:.3f} "
                  f"pass={ratios['passed']}\n")
    _emit(buf.getvalue(), args.out)
    return None if not ratios or ratios["passed"] else False


def cmd_ema_verify(args):
    from .ema import verify
    res = verify(trials=args.trials, steps=args.steps, dim=args.dim, m=args.momentum, seed=args.seed,
                 max_step=args.max_step, loss_runs=args.loss_runs, loss_steps=args.loss_steps)
    res["passed"] = res["violations"] == 0
    return res


def cmd_contrast_demo(args):
    from . import contrast as ct
    from .crossmodal import TextBank
    from .curriculum import _proposals, gen_stage1_data
    rng = make_rng(args.seed)
    scenes = gen_stage1_data(args.seed, max(1, args.steps))
    text = TextBank.synthetic(4, 8, rng)
    state = ct.ContrastState.create(8, 8, args.proj_dim, args.queue_size, rng, m=args.momentum,
                                    tau=args.tau)
    rows = []
    for step in range(args.steps):
        s = scenes[step % len(scenes)]
        fmap = np.concatenate([s.rgb, s.ir])
        res, state = ct.contrastive_step(fmap, _proposals(s, rng), s.gt, text.t_clip,
                                         np.arange(4), state, lr=args.lr, clip=args.clip)
        rows.append(dict(step=step + 1, loss_i2t=res.loss_i2t, loss_t2i=res.loss_t2i,
                         queue_fill=state.region_queue.fill, theta_lag_norm=state.lag_norm()))
    return {"steps": rows, "passed": True}


def cmd_train_demo(args):
    from .curriculum import CurriculumConfig, run_curriculum
    cfg = CurriculumConfig.from_json(args.config) if args.config else CurriculumConfig()
    rep = run_curriculum(cfg, args.seed).to_dict()
    s1 = rep["stage1"]
    s1["halved"] = bool(s1["final_loss"] < 0.5 * s1["initial_loss"])
    return rep


def cmd_dump(args):
    shape = tuple(int(d) for d in args.shape.split("x")) if args.shape else ()
    if not shape or any(d <= 0 for d in shape):
        print(f"dump: shape {args.shape!r} is empty", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    rng = make_rng(args.seed)
    if args.source == "random":
        x = rng.normal(size=shape)
    else:
        from .biwkv import biwkv_scan
        if len(shape) != 2:
            print("dump: biwkv source needs a TxC shape", file=sys.stderr)
            raise SystemExit(EXIT_USAGE)
        k, v = rng.uniform(-1, 1, (2, *shape))
        x = biwkv_scan(k, v, rng.uniform(-1, 1, shape[1]), rng.uniform(-1, 1, shape[1]))
    dump_tensor(args.out, x)
    return None


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="c3owd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="write the report here instead of stdout")
        p.set_defaults(func=func)
        return p

    p = add("oracle", cmd_oracle, "reference-implementation equivalence and invariants")
    p.add_argument("--op", choices=["biwkv", "identities", "info_nce", "queue", "all"], default="biwkv")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--tmax", type=int, default=64)
    p.add_argument("--cmax", type=int, default=8)

    p = add("gradcheck", cmd_gradcheck, "analytic backward vs finite differences")
    p.add_argument("--module", default="all", help="all or a comma list of check names")
    p.add_argument("--instances", type=int, default=20)

    p = add("bench", cmd_bench, "scan vs naive Bi-WKV timing (CSV)")
    p.add_argument("--op", default="biwkv", choices=["biwkv"])
    p.add_argument("--sizes", default="1024,2048,4096,8192")
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--no-naive", action="store_true")

    p = add("ema-verify", cmd_ema_verify, "Monte-Carlo check of the EMA bounds")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--dim", type=int, default=50)
    p.add_argument("--momentum", type=float, default=0.99)
    p.add_argument("--max-step", type=float, default=1.0)
    p.add_argument("--loss-runs", type=int, default=5)
    p.add_argument("--loss-steps", type=int, default=100)

    p = add("contrast-demo", cmd_contrast_demo, "momentum contrast on synthetic scenes")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--queue-size", type=int, default=4096)
    p.add_argument("--momentum", type=float, default=0.999)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--proj-dim", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--clip", type=float, default=0.5)

    p = add("train-demo", cmd_train_demo, "two-stage curriculum with EMA tracking")
    p.add_argument("--config", default=None, help="JSON file with CurriculumConfig fields")

    p = add("dump", cmd_dump, "write a tensor in the CSV tensor format")
    p.add_argument("--source", choices=["random", "biwkv"], default="random")
    p.add_argument("--shape", default="2x3")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    env_seed = os.environ.get("C3_SEED")
    if env_seed is not None:
        try:
            args.seed = int(env_seed)
        except ValueError:
            print(f"C3_SEED={env_seed!r} is not an integer", file=sys.stderr)
            return EXIT_USAGE
    if args.command == "dump" and not args.out:
        print("dump: --out PATH is required", file=sys.stderr)
        return EXIT_USAGE
    started = _now()
    try:
        payload = args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except (NumericError, OSError) as e:
        print(f"{args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ABORT
    except (KeyError, ValueError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    if isinstance(payload, dict):
        try:
            _report(args, payload, started)
        except OSError as e:
            print(f"{args.command}: {e}", file=sys.stderr)
            return EXIT_ABORT
        ok = payload.get("passed", payload.get("pass", True))
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_FAIL if payload is False else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
