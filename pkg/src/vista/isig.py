"""Inter-sequence intervention views.

Two perturbations of a multi-sequence volume that keep anatomy fixed but
rewrite how sequences relate to each other:

* a low-frequency amplitude exchange between two sequences (phase kept), and
* a voxel swap between two sequences inside a dilated high-entropy region of
  the teacher's anchor prediction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import VistaConfig
from .errors import ShapeError
from .volume import BinaryMask3D, MultiSequenceVolume, ProbabilityMap, save_volume, write_container

ENTROPY_EPS = 1e-7


@dataclass(frozen=True)
class FrequencyMask:
    """Low-frequency box in fftshift (DC-at-center) layout."""

    data: np.ndarray
    ratio: float
    half_widths: tuple[int, ...]

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ViewSet:
    views: tuple[MultiSequenceVolume, ...]
    lfccs_pair: tuple[int, int] | None
    ugps_pair: tuple[int, int] | None
    ugps_mask: BinaryMask3D | None
    kinds: tuple[str, ...] = ("anchor", "lfccs", "ugps")


def build_lowfreq_mask(shape: tuple[int, ...], r: float) -> FrequencyMask:
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"bandwidth ratio must be in [0, 1], got {r}")
    half = tuple(int(math.floor(r * n / 2)) for n in shape)
    mask = np.zeros(shape, dtype=np.uint8)
    box = tuple(slice(max(n // 2 - h, 0), min(n // 2 + h + 1, n)) for n, h in zip(shape, half))
    mask[box] = 1
    return FrequencyMask(mask, r, half)


def _check_pair(pair: tuple[int, int], num_sequences: int) -> tuple[int, int]:
    a, b = (int(i) for i in pair)
    if a == b:
        raise IndexError(f"sequence pair must be distinct, got ({a}, {b})")
    for i in (a, b):
        if not 0 <= i < num_sequences:
            raise IndexError(f"sequence index {i} out of range for {num_sequences} sequences")
    return a, b


def lfccs_swap(vol: MultiSequenceVolume, pair: tuple[int, int], r: float) -> MultiSequenceVolume:
    """Exchange the low-frequency Fourier amplitudes of two sequences, keeping each phase."""
    a, b = _check_pair(pair, vol.num_sequences)
    mask = build_lowfreq_mask(vol.spatial_shape, r).data.astype(bool)
    spec_a = np.fft.fftshift(np.fft.fftn(vol.data[a].astype(np.float64)))
    spec_b = np.fft.fftshift(np.fft.fftn(vol.data[b].astype(np.float64)))
    amp_a, amp_b = np.abs(spec_a), np.abs(spec_b)
    pha_a, pha_b = np.angle(spec_a), np.angle(spec_b)
    new_amp_a = np.where(mask, amp_b, amp_a)
    new_amp_b = np.where(mask, amp_a, amp_b)
    out = np.array(vol.data, dtype=np.float32)
    for idx, amp, pha in ((a, new_amp_a, pha_a), (b, new_amp_b, pha_b)):
        spec = np.fft.ifftshift(amp * np.exp(1j * pha))
        out[idx] = np.fft.ifftn(spec).real
    return vol.with_data(out)


def binary_entropy_map(p: ProbabilityMap | np.ndarray) -> np.ndarray:
    """Channel-averaged binary entropy, in nats, of a (C, H, W, D) probability map."""
    probs = p.data if isinstance(p, ProbabilityMap) else np.asarray(p)
    q = np.clip(probs.astype(np.float64), ENTROPY_EPS, 1.0 - ENTROPY_EPS)
    h = -(q * np.log(q) + (1.0 - q) * np.log(1.0 - q))
    return h.mean(axis=0)


def entropy_mask(U: np.ndarray, q: float, dilation_kernel: int) -> BinaryMask3D:
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {q}")
    if dilation_kernel < 1 or dilation_kernel % 2 == 0:
        raise ValueError(f"dilation kernel must be odd and >= 1, got {dilation_kernel}")
    tau = np.quantile(U, q)
    seeds = U >= tau
    if dilation_kernel > 1:
        structure = np.ones((dilation_kernel,) * U.ndim, dtype=bool)
        seeds = ndimage.binary_dilation(seeds, structure=structure, border_value=0)
    return BinaryMask3D(seeds.astype(np.uint8))


def ugps_swap(vol: MultiSequenceVolume, pair: tuple[int, int], M: BinaryMask3D | np.ndarray) -> MultiSequenceVolume:
    """Swap voxel values of two sequences wherever the mask is set."""
    mask = M.data if isinstance(M, BinaryMask3D) else np.asarray(M)
    if mask.shape != vol.spatial_shape:
        raise ShapeError(f"mask shape {mask.shape} != volume shape {vol.spatial_shape}")
    a, b = _check_pair(pair, vol.num_sequences)
    sel = mask.astype(bool)
    out = np.array(vol.data)
    out[a] = np.where(sel, vol.data[b], vol.data[a])
    out[b] = np.where(sel, vol.data[a], vol.data[b])
    return vol.with_data(out)


def sample_pair(num_sequences: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform draw over unordered pairs of distinct sequence indices."""
    pairs = list(combinations(range(num_sequences), 2))
    return pairs[int(rng.integers(len(pairs)))]


def generate_views(
    vol: MultiSequenceVolume,
    teacher_anchor: ProbabilityMap | np.ndarray,
    cfg: VistaConfig,
    rng: np.random.Generator,
) -> ViewSet:
    anchor = teacher_anchor.data if isinstance(teacher_anchor, ProbabilityMap) else np.asarray(teacher_anchor)
    if anchor.shape[1:] != vol.spatial_shape:
        raise ShapeError(f"anchor shape {anchor.shape[1:]} != volume shape {vol.spatial_shape}")
    pair1 = sample_pair(vol.num_sequences, rng)
    pair2 = pair1 if cfg.shared_pair else sample_pair(vol.num_sequences, rng)

    mask = None
    if cfg.use_ugps:
        mask = entropy_mask(binary_entropy_map(anchor), cfg.entropy_quantile, cfg.dilation)

    if cfg.use_lfccs and cfg.use_ugps:
        view1 = lfccs_swap(vol, pair1, cfg.lfccs_ratio)
        view2 = ugps_swap(vol, pair2, mask)
        kinds = ("anchor", "lfccs", "ugps")
        lf_pair, ug_pair = pair1, pair2
    elif cfg.use_lfccs:
        view1 = lfccs_swap(vol, pair1, cfg.lfccs_ratio)
        view2 = lfccs_swap(vol, pair2, cfg.lfccs_ratio)
        kinds = ("anchor", "lfccs", "lfccs")
        lf_pair, ug_pair = pair1, None
    else:
        view1 = ugps_swap(vol, pair1, mask)
        view2 = ugps_swap(vol, pair2, mask)
        kinds = ("anchor", "ugps", "ugps")
        lf_pair, ug_pair = None, pair1
    return ViewSet((vol, view1, view2), lf_pair, ug_pair, mask, kinds)


def dump_viewset(views: ViewSet, directory: str | Path, stem: str = "view") -> None:
    """Write each view (and the entropy mask, if any) for inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, view in enumerate(views.views):
        save_volume(view, directory / f"{stem}{k}_{views.kinds[k]}.msvol")
    if views.ugps_mask is not None:
        write_container(directory / f"{stem}_mask.msvol", {"data": views.ugps_mask.data}, kind="mask")
