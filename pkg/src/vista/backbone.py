"""Compact 3D U-Net with batch-norm affine parameter groups, plus source pretraining."""
from __future__ import annotations

import copy
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .errors import CheckpointMismatch, ConfigError, DivergenceError, FormatError, ShapeError
from .volume import LabelVolume, LogitMap, MultiSequenceVolume, read_container, write_container

log = logging.getLogger(__name__)

NORM_TAG = "norm"


class BatchNorm3d(nn.BatchNorm3d):
    """BatchNorm that can normalize with batch statistics without updating running ones.

    When ``freeze_stats`` is set and the module is in training mode, every sample
    is normalized with its own statistics (a batch of one volume) and the
    running buffers are left untouched.
    """

    freeze_stats: bool = False

    def forward(self, x):
        if self.training and self.freeze_stats:
            return F.instance_norm(x, None, None, self.weight, self.bias, True, 0.0, self.eps)
        return super().forward(x)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1, bias=False)
        self.norm1 = BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1, bias=False)
        self.norm2 = BatchNorm3d(out_ch)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class UNet3D(nn.Module):
    """Encoder-decoder with ``depth`` poolings and a C-channel sigmoid head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList(
            ConvBlock(cfg.in_channels if i == 0 else widths[i - 1], widths[i]) for i in range(cfg.depth)
        )
        self.bottleneck = ConvBlock(widths[-2], widths[-1])
        self.upsamplers = nn.ModuleList(
            nn.ConvTranspose3d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(cfg.depth))
        )
        self.decoders = nn.ModuleList(ConvBlock(2 * widths[i], widths[i]) for i in reversed(range(cfg.depth)))
        self.head = nn.Conv3d(widths[0], cfg.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"model expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        factor = 2**self.cfg.depth
        if any(n % factor for n in x.shape[2:]):
            raise ConfigError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {factor}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        x = self.bottleneck(x)
        for up, dec in zip(self.upsamplers, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def build_model(cfg: ModelConfig) -> UNet3D:
    """Deterministically initialize a model from ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = UNet3D(cfg)
    model.eval()
    return model


def forward(model: UNet3D, vol: MultiSequenceVolume, train_mode: bool = False) -> LogitMap:
    x = torch.from_numpy(np.array(vol.data, dtype=np.float32))[None]
    if train_mode:
        model.train()
        z = model(x)
    else:
        model.eval()
        with torch.no_grad():
            z = model(x)
    return LogitMap(z[0].detach().numpy())


# ---------------------------------------------------------------------------
# parameter groups and snapshots


def parameter_groups(model: nn.Module) -> dict[str, list[str]]:
    """Split parameter names into batch-norm affine (``norm_affine``) and the rest."""
    affine_ids = set()
    for module in model.modules():
        if isinstance(module, nn.modules.batchnorm._BatchNorm) and module.affine:
            affine_ids.update((id(module.weight), id(module.bias)))
    groups = {"norm_affine": [], "other": []}
    for name, p in model.named_parameters():
        groups["norm_affine" if id(p) in affine_ids else "other"].append(name)
    return groups


def trainable_parameters(model: nn.Module, mode: str = "bn_affine_only") -> list[tuple[str, nn.Parameter]]:
    if mode == "all":
        return list(model.named_parameters())
    if mode != "bn_affine_only":
        raise ValueError(f"unknown selection mode {mode!r}")
    wanted = set(parameter_groups(model)["norm_affine"])
    return [(n, p) for n, p in model.named_parameters() if n in wanted]


def select_trainable(model: nn.Module, mode: str = "bn_affine_only") -> list[nn.Parameter]:
    """Enable gradients for the chosen selection only and return it."""
    chosen = trainable_parameters(model, mode)
    keep = {id(p) for _, p in chosen}
    for p in model.parameters():
        p.requires_grad_(id(p) in keep)
    return [p for _, p in chosen]


class ParameterSnapshot:
    """Ordered, detached copy of named tensors."""

    def __init__(self, items: Iterable[tuple[str, torch.Tensor]]):
        self.items: "OrderedDict[str, torch.Tensor]" = OrderedDict(
            (name, t.detach().clone()) for name, t in items
        )

    @classmethod
    def of(cls, model: nn.Module, include_buffers: bool = True) -> "ParameterSnapshot":
        items = list(model.named_parameters())
        if include_buffers:
            items += list(model.named_buffers())
        return cls(items)

    def names(self) -> list[str]:
        return list(self.items)

    def subset(self, names: Iterable[str]) -> "ParameterSnapshot":
        return ParameterSnapshot((n, self.items[n]) for n in names)

    def max_abs_diff(self, other: "ParameterSnapshot") -> float:
        if self.names() != other.names():
            raise ShapeError("snapshots have different parameter names")
        worst = 0.0
        for name, t in self.items.items():
            o = other.items[name]
            if t.shape != o.shape:
                raise ShapeError(f"shape mismatch for {name}")
            if t.numel():
                worst = max(worst, (t.double() - o.double()).abs().max().item())
        return worst

    def __eq__(self, other):
        if not isinstance(other, ParameterSnapshot) or self.names() != other.names():
            return False
        return all(torch.equal(t, other.items[n]) for n, t in self.items.items())

    def __len__(self):
        return len(self.items)


def set_norm_mode(model: nn.Module, mode: str) -> None:
    """Choose how BN layers normalize.

    ``running``: stored statistics (eval). ``batch``: per-volume statistics,
    running buffers frozen. ``batch_update``: standard train-mode BN.
    """
    if mode not in ("running", "batch", "batch_update"):
        raise ValueError(f"unknown norm mode {mode!r}")
    for module in model.modules():
        if isinstance(module, nn.modules.batchnorm._BatchNorm):
            module.train(mode != "running")
            if isinstance(module, BatchNorm3d):
                module.freeze_stats = mode == "batch"


# ---------------------------------------------------------------------------
# source pretraining


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Voxel BCE plus soft Dice loss, both averaged over channels (equal weights)."""
    bce = F.binary_cross_entropy_with_logits(logits, target)
    prob = torch.sigmoid(logits)
    dims = tuple(range(2, logits.ndim))
    inter = (prob * target).sum(dims)
    denom = prob.sum(dims) + target.sum(dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    return bce + (1 - dice).mean()


def _augment(x: torch.Tensor, y: torch.Tensor, gen: torch.Generator):
    for axis in (2, 3, 4):
        if torch.rand((), generator=gen).item() < 0.5:
            x, y = x.flip(axis), y.flip(axis)
    return x, y


def pretrain_source(
    model: UNet3D,
    dataset: Sequence[tuple[MultiSequenceVolume, LabelVolume]],
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 2,
    seed: int = 0,
    start_epoch: int = 0,
    on_epoch=None,
) -> tuple[UNet3D, list[float]]:
    """Supervised training on labeled source cases.

    Returns the trained model and the mean training loss of every epoch.
    ``on_epoch(epoch, loss)`` is called after each epoch when given.
    """
    if epochs <= 0:
        return model, []
    if not dataset:
        raise ValueError("empty source dataset")
    xs = torch.stack([torch.from_numpy(np.array(v.data, dtype=np.float32)) for v, _ in dataset])
    ys = torch.stack([torch.from_numpy(np.array(l.data, dtype=np.float32)) for _, l in dataset])
    gen = torch.Generator().manual_seed(seed)
    select_trainable(model, "all")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    model.train()
    for epoch in range(start_epoch, start_epoch + epochs):
        order = torch.randperm(len(dataset), generator=gen)
        total, count = 0.0, 0
        for i in range(0, len(order), batch_size):
            idx = order[i: i + batch_size]
            x, y = _augment(xs[idx], ys[idx], gen)
            loss = segmentation_loss(model(x), y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        log.info("epoch %d loss %.4f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    model.eval()
    return model, history


def predict_batch(model: UNet3D, volumes: Sequence[MultiSequenceVolume]) -> list[np.ndarray]:
    """Eval-mode sigmoid probabilities for each volume."""
    model.eval()
    out = []
    with torch.no_grad():
        for vol in volumes:
            x = torch.from_numpy(np.array(vol.data, dtype=np.float32))[None]
            out.append(torch.sigmoid(model(x))[0].numpy())
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: UNet3D, path: str | Path, **extra) -> None:
    arrays = {name: t.detach().cpu().numpy().astype(np.float32) for name, t in model.state_dict().items()}
    meta = {"model": model.cfg.to_dict(), **extra}
    write_container(path, arrays, kind="checkpoint", meta=meta)


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> tuple[UNet3D, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    try:
        arrays, kind, meta = read_container(path)
    except FormatError as exc:
        raise CheckpointMismatch(str(exc)) from exc
    if kind != "checkpoint":
        raise CheckpointMismatch(f"{path}: not a checkpoint (kind={kind!r})")
    cfg = ModelConfig(**meta["model"])
    if expected is not None and (
        cfg.in_channels, cfg.out_channels, cfg.depth, cfg.base_channels
    ) != (expected.in_channels, expected.out_channels, expected.depth, expected.base_channels):
        raise CheckpointMismatch(f"checkpoint architecture {cfg} does not match {expected}")
    model = build_model(cfg)
    load_state_arrays(model, arrays)
    return model, meta


def load_state_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    if set(state) != set(arrays):
        missing = sorted(set(state) - set(arrays))
        extra = sorted(set(arrays) - set(state))
        raise CheckpointMismatch(f"missing keys {missing[:3]}, unexpected keys {extra[:3]}")
    new_state = {}
    for name, ref in state.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointMismatch(f"{name}: shape {arr.shape} != {tuple(ref.shape)}")
        new_state[name] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    model.load_state_dict(new_state)


def clone_model(model: UNet3D) -> UNet3D:
    return copy.deepcopy(model)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
