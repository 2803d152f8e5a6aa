"""Command-line entry point: ``shortv <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 internal invariant
violation. Failures print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from types import SimpleNamespace

import numpy as np

from . import io as sio
from .bench import compare
from .errors import AccountingError, InputError, NumericError, ShapeError, ShortVError, StateError
from .flops import crosscheck, dense_layer_flops, model_ratio, schedule_flops
from .metrics import LCReport, ablate, cosine_report, lc_profile, make_plan, rank_layers
from .model import LayerPlan, Selector, forward, logits_from
from .pruning import PruneConfig
from .toymodel import ToySpec, build_toy, gen_calibration

EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 2, 3, 4


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def _pair(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    if len(parts) == 2:
        return int(parts[0]), int(parts[1])
    raise argparse.ArgumentTypeError(f"expected N or LO,HI, got {text!r}")


def _fastv(text: str) -> PruneConfig:
    try:
        k, r = text.split(",")
        return PruneConfig.fastv(int(k), float(r))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected K,R, got {text!r}") from None


def _prune_from(args) -> PruneConfig:
    if getattr(args, "fastv", None) is not None and getattr(args, "vtw", None) is not None:
        raise UsageError("--fastv and --vtw are mutually exclusive")
    if getattr(args, "fastv", None) is not None:
        return args.fastv
    if getattr(args, "vtw", None) is not None:
        return PruneConfig.vtw(args.vtw)
    return PruneConfig.none()


def _emit(obj, out):
    text = json.dumps(obj, indent=2)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)


def digest(logits: np.ndarray) -> dict:
    raw = np.ascontiguousarray(logits, dtype="<f4").tobytes()
    return {"first8": [float(x) for x in logits[:8]], "sha256": hashlib.sha256(raw).hexdigest()}


# -- subcommands -------------------------------------------------------------

def cmd_gen_toy(args):
    spec = ToySpec.from_json(sio.read_json(args.spec))
    sio.save_weights(build_toy(spec), args.out)


def cmd_gen_calib(args):
    spec = ToySpec.from_json(sio.read_json(args.spec))
    seqs = gen_calibration(spec, args.n, args.t, args.v, args.seed)
    sio.write_jsonl(seqs, args.out)


def cmd_profile(args):
    weights = sio.load_weights(args.weights)
    calib = sio.read_jsonl(args.calib)
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    try:
        classes = [Selector(c) for c in classes]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.metric == "lc":
        report = lc_profile(weights, calib, classes, args.threads)
    else:
        report = cosine_report(weights, calib, classes, args.threads)
    _emit(report.to_json(), args.out)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(report.to_csv())


def cmd_select(args):
    report = LCReport.from_json(sio.read_json(args.report))
    plan = make_plan(rank_layers(report, args.cls), args.n, args.selector or args.cls)
    _emit(plan.to_json(), args.out)


def cmd_run(args):
    weights = sio.load_weights(args.weights)
    c = weights.config
    plan = sio.load_plan(args.plan) if args.plan else LayerPlan.dense(c.num_layers)
    prune = _prune_from(args)
    seqs = sio.read_jsonl(args.input)
    runs = []
    for seq in seqs:
        start = time.perf_counter()
        res = forward(seq, weights, plan, prune)
        logits = logits_from(res, weights, len(seq) - 1)
        latency = time.perf_counter() - start
        entry = {"t": seq.t, "v": seq.v, "prune_events": [e.to_json() for e in res.events],
                 "logits": digest(logits), "latency_s": latency}
        check = crosscheck(weights, plan, seq, prune)
        entry["crosscheck"] = {"analytical": check.analytical, "instrumented": check.instrumented,
                               "gap": check.gap}
        if any(k.selector is Selector.EXPLICIT for k in plan.kinds):
            baseline = c.num_layers * dense_layer_flops(seq.t, seq.v, c.hidden_size,
                                                        c.intermediate_size)
            entry["flops"] = {"layers": [a for a, _ in check.per_layer], "total": check.analytical,
                              "baseline": baseline, "ratio": check.analytical / baseline}
        else:
            entry["flops"] = schedule_flops(c, plan, seq.t, seq.v, prune, res.layer_counts).to_json()
        runs.append(entry)
    _emit({"config": c.to_dict(), "plan": plan.to_json(), "prune": prune.to_json(),
           "runs": runs}, args.out)


def cmd_flops(args):
    if args.schedule:
        if None in (args.t, args.v, args.h, args.m):
            raise UsageError("--schedule needs --t, --v, --h and --m")
        plan = sio.load_plan(args.schedule)
        config = SimpleNamespace(num_layers=len(plan), hidden_size=args.h, intermediate_size=args.m)
        rep = schedule_flops(config, plan, args.t, args.v, _prune_from(args))
        if args.csv:
            print(rep.to_csv(), end="")
        else:
            _emit(rep.to_json(), args.out)
        return
    missing = [n for n in ("L", "N", "t", "v", "h", "m") if getattr(args, n) is None]
    if missing:
        raise UsageError("missing " + ", ".join("--" + n for n in missing))
    r = model_ratio(args.L, args.N, args.t, args.v, args.h, args.m)
    if args.out:
        _emit({"L": args.L, "N": args.N, "t": args.t, "v": args.v, "h": args.h, "m": args.m,
               "ratio": r}, args.out)
    print(f"{r:.6f}")


def cmd_bench(args):
    weights = sio.load_weights(args.weights)
    plan = sio.load_plan(args.plan)
    seqs = sio.read_jsonl(args.calib)
    _emit(compare(weights, seqs, plan, _prune_from(args), args.repeat).to_json(), args.out)


def cmd_ablate(args):
    weights = sio.load_weights(args.weights)
    calib = sio.read_jsonl(args.calib)
    _emit(ablate(weights, calib, args.n, args.trials, args.seed, workers=args.threads).to_json(),
          args.out)


def build_parser() -> Parser:
    p = Parser(prog="shortv", description="Layer-contribution analysis and frozen-visual-layer inference")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("gen-toy", help="build toy weights from a spec file")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_toy)

    s = sub.add_parser("gen-calib", help="generate calibration JSONL")
    s.add_argument("--spec", required=True)
    s.add_argument("--n", type=int, default=40)
    s.add_argument("--t", type=_pair, default=(1, 8), help="text tokens per sample, N or LO,HI")
    s.add_argument("--v", type=_pair, default=(1, 16), help="visual tokens per sample, N or LO,HI")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_calib)

    s = sub.add_parser("profile", help="per-layer LC or cosine scores")
    s.add_argument("--weights", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--classes", default="visual,text")
    s.add_argument("--metric", choices=("lc", "cosine"), default="lc")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("select", help="rank layers and emit a plan")
    s.add_argument("--report", required=True)
    s.add_argument("--class", dest="cls", choices=("visual", "text"), default="visual")
    s.add_argument("--selector", choices=("visual", "text", "all"))
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_select)

    for name, func in (("run", cmd_run), ("bench", cmd_bench)):
        s = sub.add_parser(name)
        s.add_argument("--weights", required=True)
        s.add_argument("--plan", required=(name == "bench"))
        if name == "run":
            s.add_argument("--input", required=True)
        else:
            s.add_argument("--calib", required=True)
            s.add_argument("--repeat", type=int, default=5)
        s.add_argument("--fastv", type=_fastv, metavar="K,R")
        s.add_argument("--vtw", type=int, metavar="K")
        s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("flops", help="FLOPs ratio or per-layer schedule")
    for n in ("L", "N", "t", "v", "h", "m"):
        s.add_argument(f"--{n}", type=int)
    s.add_argument("--schedule", help="plan JSON; prints the per-layer schedule")
    s.add_argument("--fastv", type=_fastv, metavar="K,R")
    s.add_argument("--vtw", type=int, metavar="K")
    s.add_argument("--csv", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("ablate", help="LC vs cosine vs random layer selection")
    s.add_argument("--weights", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except (AccountingError, StateError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INTERNAL)
    except (InputError, ShapeError, NumericError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_DATA)
    except ShortVError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INTERNAL)
    return 0


if __name__ == "__main__":
    sys.exit(main())
