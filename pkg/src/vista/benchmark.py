"""Desk-scale phantom benchmark: source pretraining, shifted target stream, adaptation.

The numbers it produces are only meaningful relative to each other (No-TTA
versus adapted variants on the same cohorts), not as absolute segmentation
quality.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import backbone, engine, phantom
from .config import ModelConfig, VistaConfig
from .metrics import cohort_macro_dice


@dataclass(frozen=True)
class BenchmarkSetup:
    shape: tuple[int, int, int] = (24, 24, 24)
    n_source: int = 20
    n_source_val: int = 10
    n_target: int = 30
    source_seed: int = 100
    val_seed: int = 200
    target_seed: int = 300
    shift: phantom.ShiftSpec = phantom.DEFAULT_TARGET_SHIFT
    model: ModelConfig = ModelConfig(base_channels=12, depth=3, seed=0)
    pretrain_epochs: int = 30
    pretrain_lr: float = 3e-3
    vista: VistaConfig = VistaConfig()
    shuffle_stream: bool = False

    def spec(self, seed: int) -> phantom.PhantomSpec:
        return phantom.PhantomSpec(shape=self.shape, seed=seed)


@dataclass
class BenchmarkReport:
    source_train_dice: float
    source_val_dice: float
    no_tta_dice: float
    pretrain_losses: list[float]
    seeds: list[int]
    variant_dice: dict[str, list[float]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def mean(self, variant: str) -> float:
        return float(np.mean(self.variant_dice[variant]))

    def summary(self) -> str:
        lines = [
            f"source dice (train / held-out): {self.source_train_dice:.4f} / {self.source_val_dice:.4f}",
            f"no-tta target dice: {self.no_tta_dice:.4f} (gap {self.source_val_dice - self.no_tta_dice:+.4f})",
        ]
        for name, vals in self.variant_dice.items():
            per_seed = " ".join(f"{v:.4f}" for v in vals)
            std = np.std(vals, ddof=1) if len(vals) > 1 else float("nan")
            lines.append(
                f"{name:<10} mean {np.mean(vals):.4f} ± {std:.4f}  vs no-tta {np.mean(vals) - self.no_tta_dice:+.4f}  [{per_seed}]"
            )
        return "\n".join(lines)


@dataclass
class BenchmarkData:
    source: list[phantom.Case]
    source_val: list[phantom.Case]
    target: list[phantom.Case]


def make_data(setup: BenchmarkSetup) -> BenchmarkData:
    return BenchmarkData(
        source=phantom.make_cohort(setup.n_source, setup.spec(setup.source_seed)),
        source_val=phantom.make_cohort(setup.n_source_val, setup.spec(setup.val_seed), prefix="val"),
        target=phantom.make_cohort(setup.n_target, setup.spec(setup.target_seed), shift=setup.shift, prefix="target"),
    )


def pretrain(setup: BenchmarkSetup, data: BenchmarkData, cache: str | Path | None = None) -> tuple[backbone.UNet3D, list[float]]:
    """Train the source model, reusing ``cache`` when it already holds a checkpoint."""
    if cache is not None and Path(cache).is_file():
        model, meta = backbone.load_checkpoint(cache, expected=setup.model)
        return model, list(meta.get("losses", []))
    model = backbone.build_model(setup.model)
    model, losses = backbone.pretrain_source(
        model, [(c.volume, c.labels) for c in data.source], epochs=setup.pretrain_epochs, lr=setup.pretrain_lr
    )
    if cache is not None:
        backbone.save_checkpoint(model, cache, losses=losses, epochs_done=setup.pretrain_epochs)
    return model, losses


def stream_order(n: int, seed: int, shuffle: bool) -> list[int]:
    if not shuffle:
        return list(range(n))
    return [int(i) for i in np.random.default_rng([seed, 2024]).permutation(n)]


def adapt_dice(
    model: backbone.UNet3D,
    cases: Sequence[phantom.Case],
    cfg: VistaConfig,
    seed: int,
    shuffle: bool = False,
) -> float:
    """Macro Dice of the teacher predictions after streaming ``cases``, optionally in a seed-shuffled order."""
    order = stream_order(len(cases), seed, shuffle)
    stream = [cases[i] for i in order]
    state = engine.init_state(model, cfg.replace(seed=seed))
    results = engine.run_stream(state, [c.volume for c in stream], [c.case_id for c in stream])
    return cohort_macro_dice([r.prediction for r in results], [c.labels for c in stream])


def run_benchmark(
    setup: BenchmarkSetup,
    seeds: Sequence[int],
    variants: Sequence[str] = ("full",),
    cache: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> BenchmarkReport:
    log = log or (lambda msg: None)
    t0 = time.time()
    data = make_data(setup)
    model, losses = pretrain(setup, data, cache)
    timings = {"pretrain": time.time() - t0}

    def no_tta(cases):
        return cohort_macro_dice(engine.run_no_tta(model, [c.volume for c in cases]), [c.labels for c in cases])

    report = BenchmarkReport(
        source_train_dice=no_tta(data.source),
        source_val_dice=no_tta(data.source_val),
        no_tta_dice=no_tta(data.target),
        pretrain_losses=losses,
        seeds=list(seeds),
        timings=timings,
    )
    log(f"source {report.source_val_dice:.4f}  no-tta {report.no_tta_dice:.4f}")
    for variant in variants:
        cfg = engine.ablation_variant(setup.vista, variant)
        t = time.time()
        report.variant_dice[variant] = []
        for seed in seeds:
            d = adapt_dice(model, data.target, cfg, seed, setup.shuffle_stream)
            report.variant_dice[variant].append(d)
            log(f"{variant} seed {seed}: {d:.4f} ({d - report.no_tta_dice:+.4f})")
        report.timings[variant] = time.time() - t
    return report
