"""Overlap and surface-distance metrics over nested region channels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyInput, ShapeError
from .volume import LabelVolume, ProbabilityMap

REGIONS = ("WT", "TC", "ET")
_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def binarize(p: ProbabilityMap | np.ndarray, threshold: float = 0.5) -> LabelVolume:
    """Threshold each channel; values equal to the threshold map to 1."""
    probs = p.data if isinstance(p, ProbabilityMap) else np.asarray(p)
    return LabelVolume((probs >= threshold).astype(np.uint8), nested=False)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"prediction shape {a.shape} != reference shape {b.shape}")
    return a, b


def dice(pred, gt) -> float:
    a, b = _pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def sensitivity(pred, gt) -> float:
    """TP / (TP + FN); NaN when the reference is empty."""
    a, b = _pair(pred, gt)
    positives = int(b.sum())
    if positives == 0:
        return math.nan
    return int((a & b).sum()) / positives


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` removed by one 6-connected erosion (zero outside the volume)."""
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return mask & ~eroded


def hd95(pred, gt, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """95th percentile of symmetric surface-to-surface nearest distances, in mm.

    NaN when either mask is empty.
    """
    a, b = _pair(pred, gt)
    if not a.any() or not b.any():
        return math.nan
    sa, sb = surface(a), surface(b)
    # distance from every voxel to the nearest surface voxel of the other mask
    dt_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dt_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    dists = np.concatenate([dt_b[sa], dt_a[sb]])
    return float(np.percentile(dists, 95))


@dataclass
class CaseMetrics:
    dice: list[float]
    hd95: list[float]
    sensitivity: list[float]

    @property
    def macro_dice(self) -> float:
        return float(np.mean(self.dice))


def case_metrics(pred: LabelVolume | np.ndarray, gt: LabelVolume | np.ndarray, spacing=(1.0, 1.0, 1.0)) -> CaseMetrics:
    p = pred.data if isinstance(pred, LabelVolume) else np.asarray(pred)
    g = gt.data if isinstance(gt, LabelVolume) else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} != reference shape {g.shape}")
    return CaseMetrics(
        dice=[dice(p[c], g[c]) for c in range(g.shape[0])],
        hd95=[hd95(p[c], g[c], spacing) for c in range(g.shape[0])],
        sensitivity=[sensitivity(p[c], g[c]) for c in range(g.shape[0])],
    )


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class MetricsReport:
    """Per-channel and macro metrics, averaged over cases, with spread over runs."""

    channel_dice: list[float]
    channel_hd95: list[float]
    channel_sensitivity: list[float]
    macro_dice: float
    macro_hd95: float
    macro_sensitivity: float
    hd95_undefined: int
    sensitivity_undefined: int
    num_cases: int
    run_macro_dice: list[float] = field(default_factory=list)
    run_macro_hd95: list[float] = field(default_factory=list)
    run_macro_sensitivity: list[float] = field(default_factory=list)

    @staticmethod
    def _std(values: list[float]) -> float:
        vals = [v for v in values if not math.isnan(v)]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else math.nan

    @property
    def dice_std(self) -> float:
        return self._std(self.run_macro_dice)

    @property
    def hd95_std(self) -> float:
        return self._std(self.run_macro_hd95)

    @property
    def sensitivity_std(self) -> float:
        return self._std(self.run_macro_sensitivity)

    def table(self, method: str = "method", channel_names: Sequence[str] = REGIONS) -> str:
        """Text table with Dice / Sens. / HD95 columns (percent for the first two)."""
        multi = len(self.run_macro_dice) > 1

        def cell(mean, std, scale):
            if math.isnan(mean):
                return "n/a"
            if multi and not math.isnan(std):
                return f"{mean * scale:.2f}±{std * scale:.2f}"
            return f"{mean * scale:.2f}"

        head = f"{'Method':<16}{'Dice ↑':>16}{'Sens. ↑':>16}{'HD95 ↓':>16}"
        rows = [head, "-" * len(head)]
        rows.append(
            f"{method:<16}{cell(self.macro_dice, self.dice_std, 100):>16}"
            f"{cell(self.macro_sensitivity, self.sensitivity_std, 100):>16}"
            f"{cell(self.macro_hd95, self.hd95_std, 1):>16}"
        )
        for c, name in enumerate(channel_names[: len(self.channel_dice)]):
            rows.append(
                f"{'  ' + name:<16}{cell(self.channel_dice[c], math.nan, 100):>16}"
                f"{cell(self.channel_sensitivity[c], math.nan, 100):>16}"
                f"{cell(self.channel_hd95[c], math.nan, 1):>16}"
            )
        rows.append(f"cases={self.num_cases} runs={max(len(self.run_macro_dice), 1)} "
                    f"hd95_undefined={self.hd95_undefined} sens_undefined={self.sensitivity_undefined}")
        return "\n".join(rows)


def macro_report(cases: Sequence[CaseMetrics] | Sequence[Sequence[CaseMetrics]]) -> MetricsReport:
    """Channel mean, then case mean.

    ``cases`` is either one run (a list of CaseMetrics) or several runs (a list
    of such lists, e.g. one per seed); with several runs the headline numbers are
    the mean over runs and the per-run macro values are kept for the sample std.
    Undefined HD95 / sensitivity entries are excluded and counted.
    """
    if len(cases) == 0:
        raise EmptyInput("no cases to report")
    runs = [list(r) for r in cases] if isinstance(cases[0], (list, tuple)) else [list(cases)]
    if any(len(r) == 0 for r in runs):
        raise EmptyInput("a run has no cases")

    def run_summary(run):
        nch = len(run[0].dice)
        ch_dice = [float(np.mean([m.dice[c] for m in run])) for c in range(nch)]
        ch_hd = [_nanmean(m.hd95[c] for m in run) for c in range(nch)]
        ch_sens = [_nanmean(m.sensitivity[c] for m in run) for c in range(nch)]
        macro = (
            float(np.mean([np.mean(m.dice) for m in run])),
            _nanmean(_nanmean(m.hd95) for m in run),
            _nanmean(_nanmean(m.sensitivity) for m in run),
        )
        return ch_dice, ch_hd, ch_sens, macro

    summaries = [run_summary(r) for r in runs]
    n_runs = len(summaries)
    return MetricsReport(
        channel_dice=list(np.mean([s[0] for s in summaries], axis=0)),
        channel_hd95=[_nanmean(s[1][c] for s in summaries) for c in range(len(summaries[0][1]))],
        channel_sensitivity=[_nanmean(s[2][c] for s in summaries) for c in range(len(summaries[0][2]))],
        macro_dice=float(np.mean([s[3][0] for s in summaries])),
        macro_hd95=_nanmean(s[3][1] for s in summaries),
        macro_sensitivity=_nanmean(s[3][2] for s in summaries),
        hd95_undefined=sum(math.isnan(v) for r in runs for m in r for v in m.hd95),
        sensitivity_undefined=sum(math.isnan(v) for r in runs for m in r for v in m.sensitivity),
        num_cases=sum(len(r) for r in runs) // n_runs,
        run_macro_dice=[s[3][0] for s in summaries] if n_runs > 1 else [],
        run_macro_hd95=[s[3][1] for s in summaries] if n_runs > 1 else [],
        run_macro_sensitivity=[s[3][2] for s in summaries] if n_runs > 1 else [],
    )


def cohort_macro_dice(preds: Sequence, labels: Sequence[LabelVolume]) -> float:
    """Mean over cases of the channel-mean Dice; predictions may be probabilities."""
    scores = []
    for p, gt in zip(preds, labels):
        bin_p = binarize(p).data if not isinstance(p, LabelVolume) else p.data
        g = gt.data
        scores.append(np.mean([dice(bin_p[c], g[c]) for c in range(g.shape[0])]))
    return float(np.mean(scores))
