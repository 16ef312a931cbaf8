"""Command-line entry point: ``mtsa {equiv,gradcheck,bench,train-toy,heatmap,init-params}``.

Exit codes: 0 success, 1 usage or I/O error, 2 verification failure
(equivalence or gradient check), 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import numkit as nk
from .attn_ref import ScaleFns
from .bench import IMPLS, format_csv, run_bench
from .equiv import run_equivalence
from .grad import grad_check
from .heatmap import build_bundle, read_tokens, write_bundle
from .mtsa_fast import AttentionConfig, ContainerError, MtsaParams, load_params, save_params
from .toytask import TrainConfig, TrainingDiverged, accuracy, gen_dataset, train_variant, write_metrics

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _emit(report: dict, out):
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


def cmd_equiv(args) -> int:
    if args.n_max < 1 or args.dims_max < 1 or args.trials < 1:
        raise UsageError("--trials, --n-max and --dims-max must be >= 1")
    bad = [h for h in args.heads if h < 1]
    if bad or not args.heads:
        raise UsageError("--heads needs positive integers")
    report = run_equivalence(args.trials, args.n_max, args.dims_max, tuple(args.heads),
                             args.dtype, args.seed, args.step3_divisor)
    _emit(report, args.out)
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_gradcheck(args) -> int:
    rng = nk.make_rng(args.seed)
    fns = ScaleFns(args.sigma_t, args.sigma_s, args.sigma_m)
    reports = []
    for _ in range(args.trials):
        cfg = AttentionConfig(d_e=args.d_e, d_i=args.d_i, d_h=args.d_h, d_a=args.d_a,
                              h=args.heads, fns=fns)
        reports.append(grad_check(cfg, rng, args.tol, n=args.n))
    worst = max(reports, key=lambda r: r.max_rel_error)
    summary = {
        "trials": len(reports),
        "max_rel_error": worst.max_rel_error,
        "worst_param": worst.worst_param,
        "min_frac_below_1e-6": min(r.frac_below_1e6 for r in reports),
        "tol": args.tol,
        "passed": all(r.passed for r in reports),
    }
    _emit(summary, args.out)
    return EXIT_OK if summary["passed"] else EXIT_VERIFY


def cmd_bench(args) -> int:
    unknown = [i for i in args.impls.split(",") if i not in IMPLS]
    if unknown:
        raise UsageError(f"unknown impl(s) {unknown}; choose from {list(IMPLS)}")
    if not args.lens or args.lens != sorted(set(args.lens)):
        raise UsageError("--lens must be strictly ascending")
    try:
        records = run_bench(args.impls.split(","), args.lens, args.batch, args.d_model, args.heads,
                            args.seed, args.dtype, args.repeats, args.warmup, args.parallel_heads,
                            args.max_naive_floats)
    except nk.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    text = format_csv(records)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = TrainConfig(steps=args.steps, seed=args.seed, n=args.n, V=args.vocab,
                      train_count=args.train_count, eval_count=args.eval_count,
                      batch=args.batch, lr=args.lr, log_every=args.log_every,
                      p_kp=args.p_kp, p_ad=args.p_ad)
    try:
        result = train_variant(cfg, args.variant)
    except TrainingDiverged as exc:
        print(f"training diverged at step {exc.step}; last finite loss {exc.last_finite_loss}",
              file=sys.stderr)
        return EXIT_DIVERGED
    if args.metrics:
        write_metrics(args.metrics, result.metrics)
    if args.save_params:
        model = result.model
        save_params(args.save_params, model.mtsa_params(model.params), replace(cfg.attention(), p_ad=1.0))
    print(f"variant={args.variant} steps={args.steps} eval_acc={result.eval_acc:.4f}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    params, cfg = load_params(args.params)
    labels, x = read_tokens(Path(args.input).read_text())
    if x.shape[0] != cfg.d_e:
        raise UsageError(f"input vectors have {x.shape[0]} features, parameters expect {cfg.d_e}")
    bundle = build_bundle(x.astype(nk.resolve_dtype(cfg.dtype)), params, cfg, labels)
    for path in write_bundle(bundle, args.out):
        print(path)
    return EXIT_OK


def cmd_init_params(args) -> int:
    cfg = AttentionConfig(d_e=args.d_e, d_i=args.d_i, d_h=args.d_h, d_a=args.d_a, h=args.heads,
                          fns=ScaleFns(args.sigma_t, args.sigma_s, args.sigma_m), dtype=args.dtype)
    masks = args.masks.split(",") if args.masks else None
    try:
        params = MtsaParams.init(cfg, nk.make_rng(args.seed), masks)
    except (nk.ConfigError, nk.DimensionError) as exc:
        raise UsageError(str(exc)) from exc
    save_params(args.out, params, cfg)
    print(args.out)
    return EXIT_OK


def _add_dims(p, d_e=4, d_i=3, d_h=3, d_a=3, heads=2):
    p.add_argument("--d-e", type=int, default=d_e)
    p.add_argument("--d-i", type=int, default=d_i)
    p.add_argument("--d-h", type=int, default=d_h, help="per-head value dimension")
    p.add_argument("--d-a", type=int, default=d_a)
    p.add_argument("--heads", type=int, default=heads)


def _add_fns(p, sigma_m="relu"):
    p.add_argument("--sigma-t", choices=["log_sigmoid", "identity"], default="log_sigmoid")
    p.add_argument("--sigma-s", choices=["log_sigmoid", "identity"], default="identity")
    p.add_argument("--sigma-m", choices=list(nk.ACTIVATIONS), default=sigma_m)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtsa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("equiv", help="randomised fast-path vs naive-path agreement")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--n-max", type=int, default=32)
    p.add_argument("--dims-max", type=int, default=16)
    p.add_argument("--heads", type=_int_list, default=[1, 2, 4])
    p.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step3-divisor", choices=["di", "dh"], default="di",
                   help="token2token divisor on the fast path; the naive path always uses sqrt(d_i)")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("gradcheck", help="reverse-mode vs central-difference gradients")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=5)
    _add_dims(p)
    _add_fns(p, sigma_m="elu")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="wall time and peak floats vs sequence length")
    p.add_argument("--impls", default="naive,fast,multihead_dot,conv_baseline")
    p.add_argument("--lens", type=_int_list, default=[16, 32, 64, 128])
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--d-model", type=int, default=300)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--parallel-heads", action="store_true")
    p.add_argument("--max-naive-floats", type=float, default=6.4e7,
                   help="skip naive rows whose score tensor would exceed this many floats")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-toy", help="train on the synthetic order task")
    p.add_argument("--variant", choices=["fwbw", "nomask"], default="fwbw")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--vocab", type=int, default=12)
    p.add_argument("--train-count", type=int, default=4000)
    p.add_argument("--eval-count", type=int, default=1000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--p-kp", type=float, default=1.0)
    p.add_argument("--p-ad", type=float, default=1.0)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--metrics", help="CSV of step,loss,eval_acc")
    p.add_argument("--save-params", help="write the trained MTSA block as a parameter container")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("heatmap", help="export attention maps as PGM + CSV")
    p.add_argument("--params", required=True)
    p.add_argument("--input", required=True, help="lines of 'label<TAB>v1 v2 ...'")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("init-params", help="write randomly initialised parameters")
    _add_dims(p, d_e=8, d_i=4, d_h=4, d_a=4, heads=2)
    _add_fns(p)
    p.add_argument("--masks", help="comma-separated mask kinds per head, e.g. forward,window:2")
    p.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except UsageError as exc:
        print(f"mtsa {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, OSError, ValueError) as exc:
        print(f"mtsa {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
