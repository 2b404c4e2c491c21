"""Command-line entry point: ``fnguided <subcommand> [options]``.

Exit codes: 0 success, 1 usage or invalid arguments, 2 data or I/O
failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _name_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser():
    p = _Parser(prog="fnguided", description="Fn-guided correspondence classification toolkit.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic two-view dataset")
    g.add_argument("--pairs", type=int, default=100)
    g.add_argument("--points", type=int, default=500)
    g.add_argument("--outlier-ratio-min", type=float, default=0.5)
    g.add_argument("--outlier-ratio-max", type=float, default=0.9)
    g.add_argument("--noise-px", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    f = sub.add_parser("fit-prior", help="fit Lowe-ratio densities on a dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--bins", type=int, default=50)
    f.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a cascade")
    t.add_argument("--data", required=True)
    t.add_argument("--prior", required=True)
    t.add_argument("--config", default=None, help="key = value config file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="compare methods on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", action="append", default=[],
                   help="NAME=PATH or PATH (named 'learned'); repeatable")
    e.add_argument("--methods", default=None,
                   help="comma list; ransac_only and oracle need no checkpoint")
    e.add_argument("--post", default="weighted8pt,ransac")
    e.add_argument("--prior", default=None, help="overrides the prior stored in the checkpoint")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--report", required=True, help="report path stem (.json and .csv)")

    v = sub.add_parser("verify-theory", help="check the weight solver on random states")
    v.add_argument("--trials", type=int, default=10000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--directions", type=int, default=1000)
    return p


def cmd_gen_data(args):
    from . import synthgen as sg

    lo, hi = args.outlier_ratio_min, args.outlier_ratio_max
    if not (0.0 <= lo <= hi <= 0.95):
        raise UsageError(f"outlier ratios must satisfy 0 <= min <= max <= 0.95, got [{lo}, {hi}]")
    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    config = sg.SceneConfig(num_correspondences=args.points, outlier_ratio=lo,
                            noise_std_px=args.noise_px, seed=args.seed)
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    pairs = sg.generate_dataset(config, args.pairs, (lo, hi))
    sg.serialize_dataset(pairs, args.out, config=config, seed=args.seed,
                         extra={"outlier_ratio_range": [lo, hi]})
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


def _read_pairs(path):
    from . import synthgen as sg

    try:
        pairs, _ = sg.read_dataset(path)
    except (OSError, ValueError, KeyError, sg.DatasetError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return pairs


def cmd_fit_prior(args):
    from . import prior as pr

    pairs = _read_pairs(args.data)
    ratios = np.concatenate([p.lowe_ratios for p in pairs])
    labels = np.concatenate([p.labels for p in pairs])
    try:
        model = pr.fit_ratio_densities(ratios, labels, bins=args.bins)
    except pr.InsufficientSamplesError as exc:
        raise DataError(str(exc)) from exc
    model.save(args.out)
    print(f"fitted {len(model.widths)}-bin prior on {len(ratios)} ratios -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    from . import cascade as cc
    from . import prior as pr
    from . import trainer as tr

    if args.config:
        if not Path(args.config).is_file():
            raise DataError(f"config file {args.config} not found")
        tcfg, ccfg = tr.load_config(args.config)
    else:
        tcfg, ccfg = tr.TrainConfig(), cc.CascadeConfig()
    if args.seed is not None:
        tcfg.seed = args.seed
    tcfg.data_path, tcfg.prior_path = args.data, args.prior
    pairs = _read_pairs(args.data)
    try:
        prior_model = pr.RatioDensityModel.load(args.prior)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read prior {args.prior}: {exc}") from exc
    if args.resume and not Path(args.resume).is_file():
        raise DataError(f"checkpoint {args.resume} not found")

    def progress(rec):
        if not args.quiet and (rec["val_f2"] is not None or rec["iteration"] % 100 == 0):
            msg = f"it {rec['iteration']:6d} loss {rec['loss']:.4f}"
            if rec["val_f2"] is not None:
                msg += (f" val P {rec['val_precision']:.3f} R {rec['val_recall']:.3f}"
                        f" F2 {rec['val_f2']:.3f}")
            print(msg, flush=True)

    result = tr.train(tcfg, ccfg, pairs=pairs, prior_model=prior_model, out_dir=args.out,
                      resume=args.resume, progress=progress)
    print(f"checkpoint {result.checkpoint_path}; log {result.log_path}; "
          f"{result.elapsed:.1f}s")
    return EXIT_OK


def _parse_checkpoints(items):
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = "learned", item
        out[name] = path
    return out


def cmd_eval(args):
    from . import cascade as cc
    from . import evalharness as ev
    from . import prior as pr

    ckpts = _parse_checkpoints(args.checkpoint)
    if args.methods:
        names = _name_list(args.methods)
    else:
        names = ["ransac_only"] + list(ckpts)
    posts = _name_list(args.post)
    for post in posts:
        if post not in ev.POSTS:
            raise UsageError(f"unknown post-processing {post!r}; choose from {', '.join(ev.POSTS)}")
    methods, prior_model = {}, None
    for name in names:
        if name in ev.BASELINE_METHODS and name not in ckpts:
            methods[name] = None
            continue
        path = ckpts.get(name)
        if path is None:
            raise UsageError(f"method {name!r} needs --checkpoint {name}=PATH")
        if not Path(path).is_file():
            raise DataError(f"checkpoint {path} not found")
        try:
            model, _, _, header = cc.load_checkpoint(path)
        except cc.CheckpointError as exc:
            raise DataError(str(exc)) from exc
        methods[name] = model
        if prior_model is None and "prior" in header:
            prior_model = pr.RatioDensityModel.from_json(json.dumps(header["prior"]))
    if args.prior:
        try:
            prior_model = pr.RatioDensityModel.load(args.prior)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read prior {args.prior}: {exc}") from exc
    pairs = _read_pairs(args.data)
    rows = ev.run_comparison(pairs, methods, posts, prior_model=prior_model, seed=args.seed)
    jpath, cpath = ev.write_report(rows, args.report)
    for row in rows:
        a = row.aggregates()
        print(f"{a['method']:>14s} {a['post']:>12s}  mAP@5 {a['map5']:6.2f}  "
              f"mAP@10 {a['map10']:6.2f}  mAP@20 {a['map20']:6.2f}  "
              f"P {a['mean_p']:.3f} R {a['mean_r']:.3f}")
    print(f"report: {jpath}, {cpath}")
    return EXIT_OK


def cmd_verify_theory(args):
    from . import guidedloss as gl

    if args.trials < 1 or args.directions < 1:
        raise UsageError("--trials and --directions must be >= 1")
    res = gl.theory_check(args.trials, args.seed, args.directions)
    print(f"states checked: {res['trials']} (fallbacks {res['fallbacks']})")
    print(f"max |lambda + mu - 1|: {res['max_sum_error']:.3e}")
    print(f"max ratio-condition residual: {res['max_ratio_residual']:.3e}")
    print(f"max direction product: {res['max_direction_product']:.3e}")
    ok = (res["max_sum_error"] == 0.0 and res["max_ratio_residual"] < 1e-9
          and res["max_direction_product"] <= 1e-12)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-prior": cmd_fit_prior,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify-theory": cmd_verify_theory,
}


def dispatch(argv):
    """Run one subcommand and return its exit code."""
    from . import cascade as cc
    from . import diffcore as dc
    from . import geometry
    from . import prior as pr
    from . import synthgen as sg
    from . import trainer as tr

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, tr.ConfigError, cc.CascadeConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, sg.DatasetError, cc.CheckpointError, pr.PriorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (dc.NonFiniteError, geometry.GeometryError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
