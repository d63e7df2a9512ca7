"""Ablation series and baseline-vs-tapped comparisons over a shared dataset file."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from . import datagen, netspec, training
from .config import RunConfig
from .netspec import TapCriterion, TapResolutionError

log = logging.getLogger(__name__)

SERIES = ("count", "distance", "position", "compare")
METRIC_KEYS = ("mIoU", "mPre", "mRec", "mF1")
DISTANCE_TAPS = 2
POSITION_COUNTS = (1, 2, 3)


@dataclass(frozen=True)
class Arm:
    series: str
    name: str
    criterion: TapCriterion

    @property
    def M(self) -> int | None:
        c = self.criterion
        if c.rule == "none":
            return 0
        if c.rule == "pattern":
            return c.count
        if c.rule == "explicit_indices":
            return len(c.indices)
        return None


def series_arms(series: str, cfg: RunConfig) -> list[Arm]:
    b = cfg.base_layers

    def pat(m, spacing, anchor):
        return TapCriterion("pattern", count=m, spacing_bases=spacing, anchor=anchor, base_layers=b)

    if series == "count":
        return [Arm(series, f"M={m}", pat(m, 1, "input")) for m in range(1, 6)]
    if series == "distance":
        return [Arm(series, f"spacing={s}", pat(DISTANCE_TAPS, s, "input")) for s in (1, 2, 3)]
    if series == "position":
        return [
            Arm(series, f"M={m},anchor={a}", pat(m, 1, a))
            for m in POSITION_COUNTS
            for a in netspec.ANCHORS
        ]
    if series == "compare":
        crit = cfg.criterion()
        if crit.rule == "none":
            crit = TapCriterion("pattern", count=2, spacing_bases=1, anchor="input", base_layers=b)
        return [Arm(series, "baseline", netspec.NO_TAPS), Arm(series, "imachsr", crit)]
    raise ValueError(f"unknown series {series!r}; expected one of {SERIES}")


def load_split(cfg: RunConfig):
    data = datagen.read(cfg.dataset)
    n_train = max(1, min(len(data), round(cfg.split * len(data))))
    return data.split(n_train)


def _means(summary: dict) -> dict:
    return {k: summary[k] for k in METRIC_KEYS}


def run_one(cfg: RunConfig, criterion: TapCriterion, seed: int, train_set, test_set, log_path=None):
    """Train one model; returns (model, records, train summary, test summary or None)."""
    h = train_set.header
    spec = cfg.model_spec(h.channels, h.height, h.width, h.num_classes)
    model = netspec.build_model(spec, seed, criterion)
    tcfg = cfg.training_config(criterion, seed)
    tcfg.log_path = log_path
    model, records = training.train(tcfg, model, train_set)
    train_summary = training.evaluate(model, train_set)
    test_summary = training.evaluate(model, test_set) if len(test_set) else None
    return model, records, train_summary, test_summary


def run_arm(cfg: RunConfig, arm: Arm, index: int) -> dict:
    train_set, test_set = load_split(cfg)
    row = {"series": arm.series, "arm": arm.name, "index": index, "M": arm.M}
    c = arm.criterion
    if c.rule == "pattern":
        row.update(spacing_bases=c.spacing_bases, anchor=c.anchor)
    h = train_set.header
    spec = cfg.model_spec(h.channels, h.height, h.width, h.num_classes)
    try:
        taps = netspec.resolve_taps(spec, c)
    except TapResolutionError as exc:
        row.update(status="infeasible", reason=str(exc), wall_time_s=0.0)
        return row
    row["tap_layers"] = [t.layer_index for t in taps]
    t0 = time.perf_counter()
    per_seed = []
    for seed in cfg.seed_list:
        t_seed = time.perf_counter()
        _, records, tr, te = run_one(cfg, c, seed, train_set, test_set)
        entry = {"seed": seed, "final_ce": records[-1].loss.ce, "train": _means(tr),
                 "wall_time_s": time.perf_counter() - t_seed}
        if te is not None:
            entry["test"] = _means(te)
        per_seed.append(entry)
    scored = "test" if all("test" in e for e in per_seed) else "train"
    row["scored_on"] = scored
    for k in METRIC_KEYS:
        row[k] = sum(e[scored][k] for e in per_seed) / len(per_seed)
        row[f"train_{k}"] = sum(e["train"][k] for e in per_seed) / len(per_seed)
    row.update(status="ok", seeds=list(cfg.seed_list), per_seed=per_seed, wall_time_s=time.perf_counter() - t0)
    return row


def _run_arm_args(args):
    return run_arm(*args)


def run_series(series: str, cfg: RunConfig, jobs: int = 1) -> list[dict]:
    arms = series_arms(series, cfg)
    work = [(cfg, arm, i) for i, arm in enumerate(arms)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_arm_args, work))
    else:
        rows = [run_arm(*w) for w in work]
    for row in rows:
        log.info("%s %s: %s", series, row["arm"], row["status"])
    return sorted(rows, key=lambda r: r["index"])
