"""Command-line entry point: gen, train, eval, ablate, probe, profile.

Exit codes: 0 success, 2 config or validation error, 3 numerical abort.
Set ``IMACHSR_LOG_LEVEL`` to error, info or debug.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import convergence, datagen, experiments, modelio, netspec, training
from .config import ConfigError, RunConfig

log = logging.getLogger("imachsr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("IMACHSR_LOG_LEVEL", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"IMACHSR_LOG_LEVEL must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _dump(obj, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _write_jsonl(rows, path) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    return cfg.with_overrides(seed=getattr(args, "seed", None), out=getattr(args, "out", None))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    if args.preset == "desk":
        spec = datagen.desk_spec(args.seed)
    else:
        spec = datagen.GenSpec(
            count=args.count, height=args.height, width=args.width, num_classes=args.k,
            shape_kinds=tuple(args.shapes.split(",")), noise=args.noise, seed=args.seed,
            channels=args.channels, texture=args.texture,
        )
    try:
        data = datagen.generate(spec)
    except datagen.InfeasibleSpecError as exc:
        raise UsageError(str(exc)) from None
    datagen.write(data, args.output)
    h = data.header
    print(f"wrote {args.output}: count={h.count} channels={h.channels} size={h.height}x{h.width} "
          f"classes={h.num_classes} bytes={h.file_size()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    os.makedirs(cfg.out, exist_ok=True)
    train_set, test_set = experiments.load_split(cfg)
    log_path = os.path.join(cfg.out, "epochs.jsonl")
    try:
        model, records, tr, te = experiments.run_one(cfg, cfg.criterion(), cfg.seed, train_set, test_set,
                                                     log_path=log_path)
    except netspec.TapResolutionError as exc:
        raise UsageError(str(exc)) from None
    except training.NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    modelio.save(model.state_dict(), os.path.join(cfg.out, "model.imhm"))
    if te is not None:
        _dump({"split": "test", "train": tr, "test": te}, os.path.join(cfg.out, "eval.json"))
    last = records[-1].loss
    print(f"trained {len(records)} epochs, taps={[t.layer_index for t in model.taps]}: "
          f"total={last.total:.6f} ce={last.ce:.6f} train mIoU={tr['mIoU']:.4f}"
          + (f" test mIoU={te['mIoU']:.4f}" if te else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    train_set, test_set = experiments.load_split(cfg)
    data = {"train": train_set, "test": test_set}[args.split]
    if len(data) == 0:
        raise UsageError(f"the {args.split} split is empty")
    h = data.header
    spec = cfg.model_spec(h.channels, h.height, h.width, h.num_classes)
    model = netspec.build_model(spec, cfg.seed, cfg.criterion())
    try:
        model.load_state_dict(modelio.load(args.model))
    except (modelio.ModelFormatError, netspec.SpecError) as exc:
        raise UsageError(str(exc)) from None
    summary = training.evaluate(model, data)
    doc = {"split": args.split, args.split: summary}
    if args.output:
        _dump(doc, args.output)
    print(" ".join(f"{k}={summary[k]:.5f}" for k in experiments.METRIC_KEYS))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    os.makedirs(cfg.out, exist_ok=True)
    series = experiments.SERIES[:3] if args.series == "all" else (args.series,)
    for name in series:
        rows = experiments.run_series(name, cfg, jobs=args.jobs)
        path = os.path.join(cfg.out, f"ablate_{name}.jsonl")
        _write_jsonl(rows, path)
        for r in rows:
            if r["status"] == "ok":
                print(f"{name:9s} {r['arm']:22s} taps={r['tap_layers']} "
                      + " ".join(f"{k}={r[k]:.4f}" for k in experiments.METRIC_KEYS))
            else:
                print(f"{name:9s} {r['arm']:22s} infeasible: {r['reason']}")
        print(f"wrote {path}")
    return EXIT_OK


def cmd_probe(args) -> int:
    T_values = _int_list(args.T)
    if not T_values or any(t < 1 for t in T_values):
        raise UsageError("--T needs positive integers")
    kw = {} if args.eta is None else {"eta": args.eta}
    try:
        report = convergence.empirical_rate_probe(args.problem, T_values, args.seed, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for e in report.entries:
        verdict = "bound holds" if e.holds else "BOUND VIOLATED"
        print(f"T={e.T:6d} avg|grad|^2={e.average:.6g} bound={e.bound:.6g} "
              f"(gap {e.initial_gap:.6g} + variance {e.variance_term:.6g}): {verdict}")
    lo, hi = report.slope_window
    tag = " [constants estimated]" if report.estimated else ""
    print(f"log-log slope {report.slope:.4f}, window [{lo}, {hi}]: {'inside' if report.slope_ok else 'outside'}{tag}")
    if args.output:
        _dump(report.to_dict(), args.output)
    return EXIT_OK


def equal_tap_family(channels: int, height: int, width: int, num_classes: int, width_ch: int = 8, depth: int = 7):
    """Flat full-resolution net; M taps sit on layers 1..M, all of identical size."""
    layers = [netspec.LayerSpec("conv_relu", width_ch) for _ in range(depth - 1)] + [netspec.LayerSpec("conv_head")]
    spec = netspec.ModelSpec(channels, height, width, num_classes, tuple(layers))

    def family(m: int):
        crit = netspec.TapCriterion("explicit_indices", tuple(range(1, m + 1))) if m else netspec.NO_TAPS
        return netspec.build_model(spec, 0, crit)

    return family


def cmd_profile(args) -> int:
    if args.m_max < 0 or args.m_max > 6 - 1:
        raise UsageError("--m-max must lie in [0, 5]")
    if args.config:
        cfg = RunConfig.from_file(args.config)
        data = datagen.read(cfg.dataset)
        tcfg = cfg.training_config(seed=args.seed)
    else:
        data = datagen.generate(datagen.GenSpec(count=args.batch_size, height=args.size, width=args.size,
                                                num_classes=4, seed=args.seed))
        tcfg = training.TrainingConfig(seed=args.seed)
    tcfg.batch_size = args.batch_size
    if len(data) < args.batch_size:
        raise UsageError(f"dataset has {len(data)} samples, fewer than batch size {args.batch_size}")
    h = data.header
    family = equal_tap_family(h.channels, h.height, h.width, h.num_classes)
    prof = training.profile_overhead(tcfg, family, list(range(args.m_max + 1)), data, n_batches=args.batches)
    print(f"{'M':>2} {'median step [ms]':>17} {'tap cache [B]':>14} {'adapter params':>15} {'activations [B]':>16}")
    for r in prof.rows:
        print(f"{r.M:>2} {1e3 * r.time_median_s:>17.3f} {r.tap_cache_bytes:>14d} {r.adapter_params:>15d} "
              f"{r.activation_bytes:>16d}")
    print(f"R^2 tap cache = {prof.r2_tap_cache}, R^2 adapter params = {prof.r2_adapter_params}, "
          f"median time monotone = {prof.time_monotone}")
    if args.output:
        _dump(prof.to_dict(), args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imachsr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic IMHS dataset")
    g.add_argument("--preset", choices=["desk"], default=None)
    g.add_argument("--count", type=int, default=320)
    g.add_argument("--height", type=int, default=16)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--k", type=int, default=4)
    g.add_argument("--channels", type=int, default=1)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--texture", type=float, default=0.0)
    g.add_argument("--shapes", default=",".join(datagen.SHAPE_KINDS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model")
    e.add_argument("--config", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--seed", type=int)
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation series")
    a.add_argument("--series", choices=list(experiments.SERIES) + ["all"], required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    pr = sub.add_parser("probe", help="check the gradient-norm bound empirically")
    pr.add_argument("--problem", choices=["quadratic", "toy_net"], default="quadratic")
    pr.add_argument("--T", default="100,400,1600,6400")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--eta", type=float)
    pr.add_argument("-o", "--output")
    pr.set_defaults(func=cmd_probe)

    pf = sub.add_parser("profile", help="measure per-batch overhead against the number of taps")
    pf.add_argument("--config")
    pf.add_argument("--m-max", type=int, default=5)
    pf.add_argument("--batches", type=int, default=20)
    pf.add_argument("--batch-size", type=int, default=4)
    pf.add_argument("--size", type=int, default=16)
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("-o", "--output")
    pf.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        _setup_logging()
        return args.func(args)
    except (UsageError, ConfigError, datagen.DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
