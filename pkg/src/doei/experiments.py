"""Ablation and sweep drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .doei import DoeiConfig
from .encoder import ModelConfig
from .scenes import SceneSample
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

# (label, cpdo, ppdo, hfa, reference mIoU reported for DeiT-S/MCTformer on VOC train)
VARIANTS = (
    ("baseline", False, False, False, 61.7),
    ("+CPDO", True, False, False, 63.3),
    ("+PPDO", False, True, False, 63.2),
    ("+CPDO+PPDO", True, True, False, 64.3),
    ("+CPDO+HFA", True, False, True, 64.6),
    ("+PPDO+HFA", False, True, True, 64.9),
    ("full", True, True, True, 65.5),
)

SWEEP_PARAMS = ("st_p2c", "af_p2c", "sf_p2c", "st_c2c", "af_c2c", "sf_c2c", "alpha", "K")

# committed coarse grids; K is expanded against the model depth
GRIDS = {
    "st_p2c": (0.05, 0.1, 0.2, 0.3),
    "af_p2c": (0.0, 1.0, 2.0, 4.0),
    "sf_p2c": (-2.0, -1.0, -0.5, 0.0),
    "st_c2c": (0.1, 0.25, 0.5),
    "af_c2c": (0.0, 1.0, 2.0, 4.0),
    "sf_c2c": (-2.0, -1.0, -0.5, 0.0),
    "alpha": (0.0, 0.2, 0.35, 0.5, 0.7),
}


def default_grid(param: str, depth: int) -> list[float]:
    if param == "K":
        return list(range(depth + 1))
    return list(GRIDS[param])


def default_value(doei: DoeiConfig, depth: int, param: str):
    """Current config value of a sweepable parameter (K: length of the active prefix)."""
    if param == "K":
        k = 0
        while k + 1 in doei.active_layers:
            k += 1
        return k
    return getattr(doei, param)


@dataclass(frozen=True)
class Experiment:
    model: ModelConfig
    training: TrainConfig
    doei: DoeiConfig
    beta: float

    def variant(self, cpdo: bool, ppdo: bool, hfa: bool) -> DoeiConfig | None:
        """``None`` (DOEI off) for the baseline, else the flags applied to the base config."""
        if not (cpdo or ppdo or hfa):
            return None
        return self.doei.with_(cpdo_enabled=cpdo, ppdo_enabled=ppdo, hfa_enabled=hfa)

    def with_seed(self, seed: int) -> "Experiment":
        return replace(self, model=replace(self.model, seed=seed), training=replace(self.training, seed=seed))


@dataclass
class RunMetrics:
    miou: float
    fp: float
    fn: float
    texture_fp: float
    final_loss: float


def run_once(exp: Experiment, doei: DoeiConfig | None, train_set: list[SceneSample], eval_set: list[SceneSample]) -> RunMetrics:
    result = train(train_set, exp.model, exp.training, doei)
    ev = evaluate(eval_set, result.params, exp.model, doei, exp.beta)
    final = result.epoch_losses[-1] if result.epoch_losses else result.initial_loss
    return RunMetrics(ev.miou, ev.fp, ev.fn, ev.texture_fp, final)


def ablate(exp: Experiment, train_set, eval_set, seeds=(0,), variants=VARIANTS) -> dict[str, list[RunMetrics]]:
    """Train/evaluate every variant once per seed with identical budgets."""
    out: dict[str, list[RunMetrics]] = {v[0]: [] for v in variants}
    for seed in seeds:
        e = exp.with_seed(seed)
        for name, cpdo, ppdo, hfa, _ in variants:
            m = run_once(e, e.variant(cpdo, ppdo, hfa), train_set, eval_set)
            log.info("seed %d %-12s miou %.4f fp %.4f fn %.4f tex_fp %.4f", seed, name, m.miou, m.fp, m.fn, m.texture_fp)
            out[name].append(m)
    return out


def sweep_config(doei: DoeiConfig, depth: int, param: str, value: float) -> DoeiConfig:
    """Full-DOEI config with one hyper-parameter overridden."""
    base = doei.with_(cpdo_enabled=True, ppdo_enabled=True, hfa_enabled=True)
    if param == "K":
        k = int(value)
        if not 0 <= k <= depth:
            raise ValueError(f"K={k} outside 0..{depth}")
        return base.with_(active_layers=frozenset(range(1, k + 1)))
    if param not in SWEEP_PARAMS:
        raise ValueError(f"cannot sweep {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    return base.with_(**{param: float(value)})


def sweep(exp: Experiment, param: str, values, train_set, eval_set, seeds=(0,)) -> list[tuple[float, RunMetrics]]:
    rows = []
    for v in values:
        cfg = sweep_config(exp.doei, exp.model.depth, param, v).validate(exp.model.depth)
        runs = []
        for seed in seeds:
            e = exp.with_seed(seed)
            runs.append(run_once(e, cfg, train_set, eval_set))
        m = mean_metrics(runs)
        log.info("%s=%s miou %.4f fp %.4f fn %.4f", param, v, m.miou, m.fp, m.fn)
        rows.append((v, m))
    return rows


def mean_metrics(runs: list[RunMetrics]) -> RunMetrics:
    return RunMetrics(*(float(np.mean([getattr(r, f) for r in runs])) for f in ("miou", "fp", "fn", "texture_fp", "final_loss")))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_ablation_csv(path, results: dict[str, list[RunMetrics]], variants=VARIANTS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "cpdo", "ppdo", "hfa", "seeds", "miou", "fp", "fn", "texture_fp", "reference_miou"])
        for name, cpdo, ppdo, hfa, ref in variants:
            m = mean_metrics(results[name])
            w.writerow([name, int(cpdo), int(ppdo), int(hfa), len(results[name]), _fmt(m.miou), _fmt(m.fp), _fmt(m.fn), _fmt(m.texture_fp), f"{ref:.1f}"])


def write_ablation_seeds_csv(path, results: dict[str, list[RunMetrics]], seeds, variants=VARIANTS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "miou", "fp", "fn", "texture_fp", "final_loss"])
        for name, *_ in variants:
            for seed, m in zip(seeds, results[name]):
                w.writerow([name, seed, _fmt(m.miou), _fmt(m.fp), _fmt(m.fn), _fmt(m.texture_fp), _fmt(m.final_loss)])


def write_sweep_csv(path, rows: list[tuple[float, RunMetrics]], param: str, default=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "miou", "fp", "fn", "texture_fp", "default"])
        for v, m in rows:
            mark = int(default is not None and np.isclose(float(v), float(default)))
            val = str(int(v)) if param == "K" else f"{float(v):g}"
            w.writerow([val, _fmt(m.miou), _fmt(m.fp), _fmt(m.fn), _fmt(m.texture_fp), mark])
