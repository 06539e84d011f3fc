"""Synthetic multi-sequence brain-tumor-like phantoms with controllable domain shifts.

Anatomy is a brain ellipsoid holding up to a few irregular lesions built from
three nested blobs (edema-, core- and enhancing-analogs). Each sequence maps
tissue classes to intensities through a contrast table, then gets a smooth
bias field, noise and a light blur.

Two kinds of shift are available:

* per-modality: gamma, extra bias field and extra noise on individual rendered
  sequences;
* interaction: rewriting the contrast table before rendering, so anatomy and
  noise are unchanged but the relationship between sequences is not.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, stats

from .errors import ShapeError, SpecError
from .volume import LabelVolume, MultiSequenceVolume, load_labels, load_volume, save_labels, save_volume, zscore_normalize

TISSUES = ("background", "brain", "edema", "core", "enhancing")
SEQUENCES = ("t1", "t1ce", "t2", "flair")
CHANNELS = ("WT", "TC", "ET")

# rows: t1, t1ce, t2, flair; columns follow TISSUES
DEFAULT_CONTRAST = (
    (0.0, 1.00, 0.70, 0.45, 0.60),
    (0.0, 1.00, 0.75, 0.50, 1.60),
    (0.0, 0.80, 1.50, 1.20, 1.00),
    (0.0, 0.70, 1.60, 1.05, 1.15),
)


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    num_sequences: int = 4
    brain_radius: tuple[float, float] = (0.36, 0.44)  # fraction of each dim
    tumor_count: tuple[int, int] = (1, 2)
    wt_radius: tuple[float, float] = (0.16, 0.26)  # fraction of the smallest dim
    core_fraction: tuple[float, float] = (0.55, 0.75)
    enhancing_fraction: tuple[float, float] = (0.45, 0.65)
    irregularity: float = 0.15
    noise_sigma: float = 0.05
    bias_strength: float = 0.08
    blur_sigma: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise SpecError(f"phantom dims must be >= 16, got {self.shape}")
        if self.num_sequences < 2:
            raise SpecError("need at least 2 sequences")
        lo, hi = self.tumor_count
        if lo < 0 or hi < lo:
            raise SpecError(f"invalid tumor count range {self.tumor_count}")
        for name in ("brain_radius", "wt_radius", "core_fraction", "enhancing_fraction"):
            lo_f, hi_f = getattr(self, name)
            if not 0 < lo_f <= hi_f <= 1:
                raise SpecError(f"invalid range for {name}: {(lo_f, hi_f)}")
        if self.wt_radius[1] >= self.brain_radius[0]:
            raise SpecError("lesions cannot be larger than the brain")
        if self.noise_sigma < 0 or self.bias_strength < 0 or self.blur_sigma < 0:
            raise SpecError("noise, bias and blur must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ContrastTable:
    """Mean intensity of each tissue class (columns) in each sequence (rows)."""

    values: np.ndarray
    sequence_names: tuple[str, ...] = SEQUENCES
    tissue_names: tuple[str, ...] = TISSUES

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[1] != len(self.tissue_names):
            raise ShapeError(f"table must be S x {len(self.tissue_names)}, got {vals.shape}")
        if len(self.sequence_names) != vals.shape[0]:
            raise ShapeError("one sequence name per row required")
        if not np.all(np.isfinite(vals)):
            raise SpecError("contrast table must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def default(cls) -> "ContrastTable":
        return cls(np.array(DEFAULT_CONTRAST))

    def rows_distinct(self) -> bool:
        return len({tuple(r) for r in self.values}) == self.values.shape[0]


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "none"  # none | per_modality | interaction | both
    gamma: tuple[float, ...] = ()
    bias_amplitude: tuple[float, ...] = ()
    noise_multiplier: tuple[float, ...] = ()
    permutation: tuple[int, ...] = ()
    remap: tuple[tuple[int, int, float], ...] = ()  # (sequence, tissue, new value)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "per_modality", "interaction", "both"):
            raise SpecError(f"unknown shift kind {self.kind!r}")
        if any(g <= 0 for g in self.gamma):
            raise SpecError("gamma must be positive")
        if any(m < 1 for m in self.noise_multiplier):
            raise SpecError("noise multipliers must be >= 1")
        if self.permutation and sorted(self.permutation) != list(range(len(self.permutation))):
            raise SpecError(f"invalid permutation {self.permutation}")

    @property
    def per_modality(self) -> bool:
        return self.kind in ("per_modality", "both")

    @property
    def interaction(self) -> bool:
        return self.kind in ("interaction", "both")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        d = dict(d)
        for key in ("gamma", "bias_amplitude", "noise_multiplier", "permutation"):
            d[key] = tuple(d.get(key, ()))
        d["remap"] = tuple((int(s), int(t), float(v)) for s, t, v in d.get("remap", ()))
        return cls(**d)


# Calibrated so the source model loses a clear margin of Dice on the target cohort.
DEFAULT_TARGET_SHIFT = ShiftSpec(
    kind="both",
    gamma=(1.5, 0.75, 1.3, 0.8),
    bias_amplitude=(0.10, 0.05, 0.12, 0.08),
    noise_multiplier=(1.5, 1.5, 2.0, 1.5),
    remap=((3, 2, 1.25), (1, 4, 1.30), (2, 3, 1.40)),
    seed=1,
)


# ---------------------------------------------------------------------------
# anatomy


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def _cosine_field(shape, rng: np.random.Generator, terms: int = 3, max_freq: float = 1.5) -> np.ndarray:
    """Sum of ``terms`` random low-frequency 3D cosines, scaled to unit peak."""
    coords = [c / n for c, n in zip(_grid(shape), shape)]
    out = np.zeros(shape)
    for _ in range(terms):
        k = rng.uniform(-max_freq, max_freq, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * sum(ki * ci for ki, ci in zip(k, coords)) + phase)
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def _blob(shape, center, radii, rng, irregularity) -> np.ndarray:
    grid = _grid(shape)
    d = np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)))
    if irregularity > 0:
        d = d * (1.0 + irregularity * _cosine_field(shape, rng, terms=3, max_freq=3.0))
    return d <= 1.0


def generate_anatomy(spec: PhantomSpec, rng: np.random.Generator) -> tuple[LabelVolume, np.ndarray]:
    """Nested WT/TC/ET label channels plus the tissue index volume."""
    shape = spec.shape
    center = np.array(shape) / 2.0 - 0.5
    brain_r = rng.uniform(*spec.brain_radius, size=3) * np.array(shape)
    brain = _blob(shape, center, brain_r, rng, irregularity=0.05)

    wt = np.zeros(shape, bool)
    tc = np.zeros(shape, bool)
    et = np.zeros(shape, bool)
    n_tumors = int(rng.integers(spec.tumor_count[0], spec.tumor_count[1] + 1))
    smallest = min(shape)
    for _ in range(n_tumors):
        r_wt = rng.uniform(*spec.wt_radius) * smallest * rng.uniform(0.85, 1.15, size=3)
        room = np.maximum(brain_r - r_wt.max(), 1.0)
        offset = rng.uniform(-0.6, 0.6, size=3) * room
        c = center + offset
        lesion_wt = _blob(shape, c, r_wt, rng, spec.irregularity)
        r_tc = r_wt * rng.uniform(*spec.core_fraction)
        c_tc = c + rng.uniform(-0.15, 0.15, size=3) * r_wt
        lesion_tc = _blob(shape, c_tc, r_tc, rng, spec.irregularity) & lesion_wt
        r_et = r_tc * rng.uniform(*spec.enhancing_fraction)
        c_et = c_tc + rng.uniform(-0.15, 0.15, size=3) * r_tc
        lesion_et = _blob(shape, c_et, r_et, rng, spec.irregularity) & lesion_tc
        wt |= lesion_wt
        tc |= lesion_tc
        et |= lesion_et
    wt &= brain
    tc &= wt
    et &= tc

    tissue = np.zeros(shape, dtype=np.int64)
    tissue[brain] = 1
    tissue[wt] = 2
    tissue[tc] = 3
    tissue[et] = 4
    labels = LabelVolume(np.stack([wt, tc, et]).astype(np.uint8), nested=True, channel_names=CHANNELS)
    return labels, tissue


# ---------------------------------------------------------------------------
# rendering and shifts


def render_sequences(
    tissue: np.ndarray,
    table: ContrastTable,
    spec: PhantomSpec,
    rng: np.random.Generator,
    normalize: bool = True,
    shared_noise: bool = False,
) -> MultiSequenceVolume:
    """Contrast lookup + smooth bias field + Gaussian noise, then a Gaussian blur.

    With ``shared_noise`` every sequence receives the same bias and noise draw.
    """
    if tissue.max() >= table.values.shape[1]:
        raise ShapeError(f"tissue index {tissue.max()} outside table with {table.values.shape[1]} columns")
    if table.values.shape[0] != spec.num_sequences:
        raise ShapeError(f"table has {table.values.shape[0]} rows, spec wants {spec.num_sequences} sequences")
    out = np.empty((spec.num_sequences,) + tissue.shape)
    nuisance = None
    for s in range(spec.num_sequences):
        if nuisance is None or not shared_noise:
            bias = spec.bias_strength * _cosine_field(tissue.shape, rng) if spec.bias_strength > 0 else 0.0
            noise = rng.normal(0.0, spec.noise_sigma, size=tissue.shape) if spec.noise_sigma > 0 else 0.0
            nuisance = bias + noise
        img = table.values[s][tissue] + nuisance
        if spec.blur_sigma > 0:
            img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="nearest")
        out[s] = img
    vol = MultiSequenceVolume(out.astype(np.float32), table.sequence_names)
    return zscore_normalize(vol) if normalize else vol


def shift_table(table: ContrastTable, shift: ShiftSpec) -> ContrastTable:
    """Interaction shift: permute rows and/or overwrite individual entries."""
    if not shift.interaction:
        return table
    vals = np.array(table.values)
    if shift.permutation:
        if len(shift.permutation) != vals.shape[0]:
            raise SpecError(f"permutation length {len(shift.permutation)} != {vals.shape[0]} sequences")
        vals = vals[list(shift.permutation)]
    for s, t, v in shift.remap:
        if not (0 <= s < vals.shape[0] and 0 <= t < vals.shape[1]):
            raise SpecError(f"remap entry ({s}, {t}) outside the table")
        vals[s, t] = v
    return ContrastTable(vals, table.sequence_names, table.tissue_names)


def shift_intensities(vol: MultiSequenceVolume, shift: ShiftSpec, spec: PhantomSpec, rng: np.random.Generator) -> MultiSequenceVolume:
    """Per-modality shift on rendered (unnormalized) intensities."""
    if not shift.per_modality:
        return vol
    S = vol.num_sequences
    for name in ("gamma", "bias_amplitude", "noise_multiplier"):
        n = len(getattr(shift, name))
        if n not in (0, S):
            raise SpecError(f"{name} has {n} entries for {S} sequences")
    gamma = shift.gamma or (1.0,) * S
    bias = shift.bias_amplitude or (0.0,) * S
    mult = shift.noise_multiplier or (1.0,) * S
    out = np.array(vol.data, dtype=np.float64)
    for s in range(S):
        if gamma[s] != 1.0:
            lo, hi = out[s].min(), out[s].max()
            if hi > lo:
                out[s] = lo + (hi - lo) * ((out[s] - lo) / (hi - lo)) ** gamma[s]
        if bias[s] != 0.0:
            out[s] += bias[s] * _cosine_field(vol.spatial_shape, rng)
        if mult[s] != 1.0:
            out[s] += rng.normal(0.0, spec.noise_sigma * np.sqrt(mult[s] ** 2 - 1.0), size=vol.spatial_shape)
    if all(g == 1.0 for g in gamma) and not any(bias) and all(m == 1.0 for m in mult):
        return vol
    return vol.with_data(out)


def apply_shift(target, shift: ShiftSpec, rng: np.random.Generator | None = None, spec: PhantomSpec | None = None):
    """Shift a ContrastTable (interaction part) or a rendered volume (per-modality part)."""
    if isinstance(target, ContrastTable):
        return shift_table(target, shift)
    if isinstance(target, MultiSequenceVolume):
        if rng is None:
            rng = np.random.default_rng(shift.seed)
        return shift_intensities(target, shift, spec or PhantomSpec(shape=target.spatial_shape, num_sequences=target.num_sequences), rng)
    raise SpecError(f"cannot apply a shift to {type(target).__name__}")


# ---------------------------------------------------------------------------
# cohorts


@dataclass
class Case:
    case_id: str
    volume: MultiSequenceVolume
    labels: LabelVolume

    def __iter__(self):
        # unpacks as (volume, labels)
        return iter((self.volume, self.labels))


def _case_rngs(seed: int, index: int, shift_seed: int):
    anat, render = np.random.SeedSequence([seed, index]).spawn(2)
    shift = np.random.SeedSequence([seed, index, shift_seed, 7919])
    return tuple(np.random.default_rng(s) for s in (anat, render, shift))


def make_case(index: int, spec: PhantomSpec, table: ContrastTable, shift: ShiftSpec, prefix: str = "case") -> Case:
    anat_rng, render_rng, shift_rng = _case_rngs(spec.seed, index, shift.seed)
    labels, tissue = generate_anatomy(spec, anat_rng)
    raw = render_sequences(tissue, shift_table(table, shift), spec, render_rng, normalize=False)
    raw = shift_intensities(raw, shift, spec, shift_rng)
    return Case(f"{prefix}{index:03d}", zscore_normalize(raw), labels)


def make_cohort(
    n: int,
    spec: PhantomSpec,
    table: ContrastTable | None = None,
    shift: ShiftSpec | None = None,
    prefix: str = "case",
    start: int = 0,
) -> list[Case]:
    """``n`` independent cases with per-case rng streams derived from ``spec.seed``."""
    if n < 1:
        raise SpecError("cohort size must be >= 1")
    table = table or ContrastTable.default()
    shift = shift or ShiftSpec()
    return [make_case(start + i, spec, table, shift, prefix) for i in range(n)]


def histogram_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1-Wasserstein distance between two intensity distributions."""
    return float(stats.wasserstein_distance(np.ravel(a), np.ravel(b)))


def save_cohort(cases: Sequence[Case], directory: str | Path, manifest: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_volume(case.volume, directory / f"{case.case_id}_image.msvol")
        save_labels(case.labels, directory / f"{case.case_id}_label.msvol")
    body = dict(manifest or {})
    body["cases"] = [c.case_id for c in cases]
    path = directory / "manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def load_cohort(directory: str | Path, with_labels: bool = True) -> list[Case]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cases = []
    for cid in manifest["cases"]:
        vol = load_volume(directory / f"{cid}_image.msvol")
        labels = load_labels(directory / f"{cid}_label.msvol") if with_labels else None
        cases.append(Case(cid, vol, labels))
    return cases
