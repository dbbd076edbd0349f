"""Desk-scale ablation: SAC variants and loss layouts on synthetic scans."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetSpec
from .losses import LossConfig
from .network import tiny
from .train import TrainConfig, train

log = logging.getLogger(__name__)

# name -> (SAC variant, loss uses every head)
ARMS = {
    "sac-isk": ("ISK", True),
    "sac-s": ("S", True),
    "baseline": ("none", True),
    "baseline-single-head": ("none", False),
}


@dataclass
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 30
    scale: float = 1 / 16
    train_scans: int = 40
    val_scans: int = 10
    train_seed: int = 0
    val_seed: int = 1000
    dtype: str = "float32"
    arms: tuple[str, ...] = tuple(ARMS)
    extra: dict = field(default_factory=dict)

    def train_config(self, arm: str, seed: int, dtype: str | None = None) -> TrainConfig:
        variant, multi = ARMS[arm]
        loss = LossConfig() if multi else LossConfig.single_head()
        return TrainConfig(network=tiny(self.scale, sac_variant=variant), loss=loss,
                           train=DatasetSpec(count=self.train_scans, base_seed=self.train_seed),
                           val=DatasetSpec(count=self.val_scans, base_seed=self.val_seed),
                           epochs=self.epochs, seed=seed, dtype=dtype or self.dtype)


def _finished(run_dir: Path, tcfg: TrainConfig) -> dict | None:
    """Summary of a completed run with the same config, else None."""
    try:
        saved = json.loads((run_dir / "config.json").read_text())
        summary = json.loads((run_dir / "summary.json").read_text())
        timing = json.loads((run_dir / "timing.json").read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if saved != json.loads(json.dumps(tcfg.to_dict())):
        return None
    return dict(summary, seconds=timing["seconds"])


def run_ablation(cfg: AblationConfig, out_dir, resume: bool = True) -> dict:
    """Train every arm for every seed; returns per-arm best-checkpoint val mIoU lists.

    With ``resume`` a run directory whose config matches and that finished is
    reused instead of retrained.
    """
    out = Path(out_dir)
    results = {arm: [] for arm in cfg.arms}
    timings = {}
    for seed in cfg.seeds:
        for arm in cfg.arms:
            tcfg = cfg.train_config(arm, seed)
            run_dir = out / f"{arm}-seed{seed}"
            summary = _finished(run_dir, tcfg) if resume else None
            if summary is None:
                t0 = time.perf_counter()
                summary = train(tcfg, run_dir)
                summary["seconds"] = time.perf_counter() - t0
                (run_dir / "timing.json").write_text(json.dumps({"seconds": summary["seconds"]}))
            else:
                log.info("%s seed %d: reusing finished run", arm, seed)
            timings[f"{arm}-seed{seed}"] = summary["seconds"]
            results[arm].append(summary["best_val_miou"])
            log.info("%s seed %d: val mIoU %.4f (%.0fs)", arm, seed, summary["best_val_miou"],
                     timings[f"{arm}-seed{seed}"])
    medians = {arm: float(np.median(v)) for arm, v in results.items()}
    report = {"miou": results, "median": medians, "timings": timings,
              "seconds": float(sum(timings.values()))}
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def ordering_holds(report: dict) -> dict[str, bool]:
    m = report["median"]
    return {
        "isk>s": m["sac-isk"] > m["sac-s"],
        "s>baseline": m["sac-s"] > m["baseline"],
        "multi>single": m["baseline"] > m["baseline-single-head"],
    }
