"""Volume, mask and prediction containers plus the MSVOL1 on-disk format.

The container layout is::

    b"MSVOL1\\n" <header byte length as ascii> b"\\n" <JSON header> <payload>

The payload is the concatenation of little-endian float32 arrays in the
order listed in the header. The same container carries single volumes,
label volumes and model checkpoints (many named arrays).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import FormatError, ShapeError, ZeroVarianceSequence

MAGIC = b"MSVOL1\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def _frozen(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MultiSequenceVolume:
    """Co-registered S-sequence volume of shape (S, H, W, D)."""

    data: np.ndarray
    sequence_names: tuple[str, ...] = ()
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 4:
            raise ShapeError(f"expected S x H x W x D, got shape {data.shape}")
        if data.shape[0] < 2:
            raise ShapeError("a multi-sequence volume needs at least 2 sequences")
        if min(data.shape[1:]) < 8:
            raise ShapeError(f"spatial dims must be >= 8, got {data.shape[1:]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        names = tuple(self.sequence_names) or tuple(f"seq{i}" for i in range(data.shape[0]))
        if len(names) != data.shape[0]:
            raise ShapeError(f"{len(names)} names for {data.shape[0]} sequences")
        if len(set(names)) != len(names):
            raise ValueError(f"sequence names must be distinct: {names}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "sequence_names", names)
        object.__setattr__(self, "spacing", spacing)

    @property
    def num_sequences(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def with_data(self, data: np.ndarray) -> "MultiSequenceVolume":
        return MultiSequenceVolume(data, self.sequence_names, self.spacing)


@dataclass(frozen=True)
class LogitMap:
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 4:
            raise ShapeError(f"expected C x H x W x D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("logits contain non-finite values")
        object.__setattr__(self, "data", data)

    def sigmoid(self) -> "ProbabilityMap":
        return ProbabilityMap(1.0 / (1.0 + np.exp(-self.data.astype(np.float64))))


@dataclass(frozen=True)
class ProbabilityMap:
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 4:
            raise ShapeError(f"expected C x H x W x D, got shape {data.shape}")
        if np.any(~(data >= 0.0)) or np.any(~(data <= 1.0)):
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


@dataclass(frozen=True)
class BinaryMask3D:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"expected H x W x D, got shape {data.shape}")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("binary mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _frozen(data, np.uint8))

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class LabelVolume:
    """Binary one-vs-rest channels (C, H, W, D); nested means c+1 is inside c."""

    data: np.ndarray
    nested: bool = True
    channel_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise ShapeError(f"expected C x H x W x D, got shape {data.shape}")
        if not np.all((data == 0) | (data == 1)):
            raise ValueError("label values must be exactly 0 or 1")
        data = _frozen(data, np.uint8)
        if self.nested:
            for c in range(data.shape[0] - 1):
                if np.any(data[c + 1] > data[c]):
                    raise ValueError(f"channel {c + 1} is not contained in channel {c}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))


def zscore_normalize(vol: MultiSequenceVolume) -> MultiSequenceVolume:
    """Standardize every sequence over all of its voxels."""
    x = vol.data.astype(np.float64)
    out = np.empty_like(x)
    for s in range(x.shape[0]):
        mu = x[s].mean()
        sd = x[s].std()
        if not sd > 0:
            raise ZeroVarianceSequence(f"sequence {vol.sequence_names[s]!r} is constant")
        out[s] = (x[s] - mu) / sd
    return vol.with_data(out)


# ---------------------------------------------------------------------------
# container IO


def write_container(
    path: str | Path,
    arrays: Mapping[str, np.ndarray],
    kind: str,
    meta: Mapping[str, Any] | None = None,
) -> None:
    entries = []
    payload = []
    for name, arr in arrays.items():
        a = np.array(arr, dtype=_DTYPE, order="C")
        entries.append({"name": name, "shape": list(a.shape)})
        payload.append(a.tobytes())
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "dtype": "float32",
        "endianness": "little",
        "arrays": entries,
        "meta": dict(meta or {}),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(str(len(hbytes)).encode("ascii") + b"\n")
        fh.write(hbytes)
        for chunk in payload:
            fh.write(chunk)


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], str, dict[str, Any]]:
    """Return ``(arrays, kind, meta)``; raises FormatError on any corruption."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: truncated header")
    try:
        hlen = int(rest[:nl].decode("ascii"))
        header = json.loads(rest[nl + 1: nl + 1 + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("dtype") != "float32" or header.get("endianness") != "little":
        raise FormatError(f"{path}: unsupported dtype/endianness")
    body = rest[nl + 1 + hlen:]
    offset = 0
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if offset + nbytes > len(body):
            raise FormatError(f"{path}: payload shorter than header shape {shape}")
        arrays[entry["name"]] = np.frombuffer(body, dtype=_DTYPE, count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} trailing bytes after payload")
    return arrays, header["kind"], header["meta"]


def save_volume(vol: MultiSequenceVolume, path: str | Path) -> None:
    write_container(
        path,
        {"data": vol.data},
        kind="volume",
        meta={"sequence_names": list(vol.sequence_names), "spacing": list(vol.spacing)},
    )


def load_volume(path: str | Path) -> MultiSequenceVolume:
    arrays, kind, meta = read_container(path)
    if kind != "volume" or "data" not in arrays:
        raise FormatError(f"{path}: not a volume container (kind={kind!r})")
    return MultiSequenceVolume(arrays["data"], tuple(meta["sequence_names"]), tuple(meta["spacing"]))


def save_labels(labels: LabelVolume, path: str | Path) -> None:
    write_container(
        path,
        {"data": labels.data},
        kind="labels",
        meta={"nested": labels.nested, "channel_names": list(labels.channel_names)},
    )


def load_labels(path: str | Path) -> LabelVolume:
    arrays, kind, meta = read_container(path)
    if kind != "labels":
        raise FormatError(f"{path}: not a label container (kind={kind!r})")
    return LabelVolume(arrays["data"], bool(meta["nested"]), tuple(meta.get("channel_names", ())))


def save_probabilities(prob: ProbabilityMap, path: str | Path) -> None:
    write_container(path, {"data": prob.data}, kind="probabilities")


def load_probabilities(path: str | Path) -> ProbabilityMap:
    arrays, kind, _ = read_container(path)
    if kind != "probabilities":
        raise FormatError(f"{path}: not a probability container (kind={kind!r})")
    return ProbabilityMap(arrays["data"])


def stack_views(views: Sequence[MultiSequenceVolume]) -> np.ndarray:
    return np.stack([v.data for v in views])
