"""Command-line entry point: ``eagr <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 check failure, 3 IO/parse error.
"""

import argparse
import json
import logging
import statistics
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CLASS_NAMES, HELEN_MERGE, SynthConfig, load_dataset, write_dataset
from .errors import ContractError, DimensionError, ParseError
from .graph import EagrConfig, EagrParams, eagr_forward
from .gradcheck import format_table, run_suite
from .metrics import merged_overall_f1, report_lines, scores
from .net import ABLATIONS, NetConfig, load_config
from .nonlocal_block import NonLocalParams, nonlocal_forward
from .pnm import read_ppm, write_pgm
from .respmap import response_map, to_gray
from .tensor import FlopCounter, Tensor
from .train import evaluate, params_from_checkpoint, train

log = logging.getLogger("eagr")

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(text):
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None


def _config(path):
    return load_config(path) if path else NetConfig()


def _check_dataset(samples, cfg, root):
    for image, _ in samples:
        if image.shape[:2] != cfg.input_size:
            raise ContractError(
                f"{root}: image size {image.shape[:2]} does not match configured input {cfg.input_size}"
            )


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = SynthConfig(size=args.size, seed=args.seed)
    write_dataset(args.out, cfg, args.count)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args.config)
    samples = load_dataset(args.data)
    _check_dataset(samples, cfg, args.data)
    eval_samples = load_dataset(args.eval_data) if args.eval_data else None
    params, runlog = train(samples, cfg, args.ablate, eval_samples)
    save_checkpoint(params.tensors, args.out)
    log_path = args.log or args.out + ".log"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(runlog.lines()) + "\n")
    if runlog.steps:
        first, last = runlog.steps[0], runlog.steps[-1]
        print(f"steps={last['step']} initial_L_total={first['L_total']:.6f} final_L_total={last['L_total']:.6f}")
    print(f"checkpoint={args.out}")
    print(f"log={log_path}")
    return EXIT_OK


def _load_params(ckpt, cfg):
    return params_from_checkpoint(load_checkpoint(ckpt), cfg)


def cmd_eval(args):
    cfg = _config(args.config)
    params = _load_params(args.ckpt, cfg)
    ablation = args.ablate
    if not params.has_eagr:
        ablation = "baseline"
    samples = load_dataset(args.data)
    _check_dataset(samples, cfg, args.data)
    cm = evaluate(samples, params, cfg, ablation)
    lines = report_lines(cm, HELEN_MERGE, CLASS_NAMES)
    print("\n".join(lines))
    if args.json:
        s = scores(cm)
        record = {
            "pixel_acc": s.pixel_acc, "miou": s.miou, "mean_f1_excl_bg": s.mean_f1_excl_bg,
            "overall_f1_merged": merged_overall_f1(cm, HELEN_MERGE),
            "per_class_f1": s.per_class_f1, "per_class_iou": s.per_class_iou,
            "confusion": cm.counts.tolist(),
        }
        print(json.dumps(record, allow_nan=True))
    return EXIT_OK


def cmd_gradcheck(args):
    start = time.perf_counter()
    results = run_suite(seed=args.seed, seeds=args.seeds)
    print("\n".join(format_table(results)))
    ok = all(r.passed for r in results)
    print(f"all_passed={str(ok).lower()} elapsed_s={time.perf_counter() - start:.1f}")
    return EXIT_OK if ok else EXIT_CHECK


def bench(size, channels, t, grid, sel, k=None, runs=5, seed=0):
    """MAC counts and wall-clock medians for both attention blocks on one input."""
    h, w = size
    k = k or t
    rng = np.random.default_rng(seed)
    cfg = EagrConfig(t_dim=t, k_dim=k, pool_grid=grid, central_sel=sel)
    eparams = EagrParams.init(channels, cfg, rng)
    nparams = NonLocalParams.init(channels, t, rng)
    x = Tensor(rng.standard_normal((h * w, channels)))
    y = Tensor(rng.uniform(0, 1, (h * w, 1)))

    with FlopCounter() as fe:
        eagr_forward(x, y, eparams, cfg, (h, w))
    with FlopCounter() as fn:
        nonlocal_forward(x, nparams)

    def timed(fn_):
        out = []
        for _ in range(runs):
            t0 = time.perf_counter()
            fn_()
            out.append(time.perf_counter() - t0)
        return statistics.median(out)

    t_eagr = timed(lambda: eagr_forward(x, y, eparams, cfg, (h, w)))
    t_nl = timed(lambda: nonlocal_forward(x, nparams))
    nv = cfg.num_vertices
    att_nl = fn.breakdown["nonlocal.affinity"]
    att_e = fe.breakdown["eagr.affinity"]
    return {
        "nonlocal_total_macs": fn.mac_count,
        "eagr_total_macs": fe.mac_count,
        "nonlocal_attention_macs": att_nl,
        "eagr_attention_macs": att_e,
        "attention_ratio": att_nl / att_e,
        "attention_ratio_exact": f"{att_nl // att_e}" if att_nl % att_e == 0 else f"{att_nl}/{att_e}",
        "analytic_attention_ratio": (h * w) / nv,
        "analytic_nonlocal_attention_macs": (h * w) ** 2 * t,
        "analytic_eagr_attention_macs": nv * h * w * t,
        "total_mac_ratio": fn.mac_count / fe.mac_count,
        "nonlocal_median_s": t_nl,
        "eagr_median_s": t_eagr,
        "time_ratio": t_nl / t_eagr if t_eagr > 0 else float("inf"),
        "runs": runs,
        "eagr_breakdown": dict(fe.breakdown),
        "nonlocal_breakdown": dict(fn.breakdown),
    }


def cmd_bench(args):
    if args.runs < 5:
        raise UsageError("--runs must be at least 5")
    if args.t >= args.channels:
        raise UsageError("--t must be smaller than --channels")
    report = bench(args.size, args.channels, args.t, args.grid, args.sel, args.k, args.runs, args.seed)
    for key, value in report.items():
        if isinstance(value, dict):
            for op, macs in value.items():
                print(f"{key}.{op}={macs}")
        else:
            print(f"{key}={value}")
    return EXIT_OK


def cmd_respmap(args):
    cfg = _config(args.config)
    params = _load_params(args.ckpt, cfg)
    image = read_ppm(args.image)
    if image.shape[:2] != cfg.input_size:
        raise ContractError(f"{args.image}: size {image.shape[:2]} does not match input {cfg.input_size}")
    resp = response_map(image, params, cfg, args.vertex, args.ablate)
    log.info("response row sum before normalisation: %.12f", resp.sum())
    write_pgm(to_gray(resp), args.out)
    print(f"row_sum={resp.sum():.12f}")
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="eagr", description="Edge-aware graph reasoning toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_pair, default=(32, 32))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the parsing network")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", choices=ABLATIONS)
    p.add_argument("--eval-data", help="dataset scored after every epoch")
    p.add_argument("--log", help="run log path (default: <out>.log)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--ablate", choices=ABLATIONS)
    p.add_argument("--json", action="store_true", help="also print one JSON record")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="MAC and timing comparison against the non-local block")
    p.add_argument("--size", type=_pair, default=(48, 48))
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--t", type=int, default=32)
    p.add_argument("--k", type=int)
    p.add_argument("--grid", type=_pair, default=(6, 6))
    p.add_argument("--sel", type=_pair, default=(4, 4))
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("respmap", help="export one vertex's response map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--vertex", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--ablate", choices=("no-edge", "no-reasoning", "no-ba"))
    p.set_defaults(func=cmd_respmap)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"eagr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError) as exc:
        print(f"eagr: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, DimensionError) as exc:
        print(f"eagr: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
