"""Binary formats for spikes (RSNZ), input currents (RSNI) and parameters (RSNP).

All integers are unsigned 32-bit little-endian, all floats 64-bit IEEE
little-endian. Spikes take one byte per bin, ordered ``[k][t][i]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import NetworkParams

VERSION = 1
SPIKE_MAGIC = b"RSNZ"
PARAM_MAGIC = b"RSNP"
STIM_MAGIC = b"RSNI"


class FormatError(ValueError):
    """Unreadable file: wrong magic, version or layout."""


class TruncationError(FormatError):
    """Payload shorter (or longer) than the header declares."""


class CorruptionError(FormatError):
    """Payload bytes outside the allowed set."""


class ValidationError(ValueError):
    """In-memory value violates a format invariant."""


def check_spikes(z) -> np.ndarray:
    """Return ``z`` as a ``uint8`` ``[K, T, n]`` array of zeros and ones."""
    z = np.asarray(z)
    if z.ndim != 3 or min(z.shape) < 1:
        raise ValidationError(f"spike tensor must be [K, T, n] with all sizes >= 1, got {z.shape}")
    if not np.all((z == 0) | (z == 1)):
        raise ValidationError("spike tensor elements must be 0 or 1")
    return z.astype(np.uint8)


def _read(path, magic: bytes, nints: int):
    raw = Path(path).read_bytes()
    head = 4 + 4 * (1 + nints)
    if raw[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    if len(raw) < head:
        raise TruncationError(f"{path}: header truncated ({len(raw)} bytes)")
    version, *dims = struct.unpack(f"<{1 + nints}I", raw[4:head])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return raw, head, dims


def _payload(path, raw, head, nbytes):
    if len(raw) - head != nbytes:
        raise TruncationError(
            f"{path}: header declares {nbytes} payload bytes, file has {len(raw) - head}")
    return raw[head:]


def write_spikes(path, z) -> None:
    z = check_spikes(z)
    with open(path, "wb") as f:
        f.write(SPIKE_MAGIC + struct.pack("<4I", VERSION, *z.shape))
        f.write(np.ascontiguousarray(z).tobytes())


def read_spikes(path) -> np.ndarray:
    raw, head, (K, T, n) = _read(path, SPIKE_MAGIC, 3)
    body = _payload(path, raw, head, K * T * n)
    z = np.frombuffer(body, dtype=np.uint8)
    if z.size and z.max() > 1:
        raise CorruptionError(f"{path}: spike bytes must be 0x00 or 0x01")
    if min(K, T, n) < 1:
        raise FormatError(f"{path}: empty spike tensor {K}x{T}x{n}")
    return z.reshape(K, T, n).copy()


def write_stimulus(path, c) -> None:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or min(c.shape) < 1:
        raise ValidationError(f"stimulus must be [T, n], got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValidationError("stimulus must be finite")
    with open(path, "wb") as f:
        f.write(STIM_MAGIC + struct.pack("<3I", VERSION, *c.shape))
        f.write(c.astype("<f8").tobytes())


def read_stimulus(path) -> np.ndarray:
    raw, head, (T, n) = _read(path, STIM_MAGIC, 2)
    body = _payload(path, raw, head, 8 * T * n)
    c = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(T, n)
    if not np.all(np.isfinite(c)):
        raise CorruptionError(f"{path}: non-finite stimulus values")
    return c


def write_params(path, p: NetworkParams) -> None:
    with open(path, "wb") as f:
        f.write(PARAM_MAGIC + struct.pack("<4I", VERSION, p.n_total, p.n_visible, p.d_max))
        f.write(p.W.astype("<f8").tobytes())
        f.write(p.b.astype("<f8").tobytes())
        f.write(struct.pack("<2d", p.v_thr, p.gamma))


def read_params(path) -> NetworkParams:
    raw, head, (n, nv, d) = _read(path, PARAM_MAGIC, 3)
    body = _payload(path, raw, head, 8 * (n * n * d + n + 2))
    x = np.frombuffer(body, dtype="<f8").astype(np.float64)
    W = x[: n * n * d].reshape(n, n, d)
    b = x[n * n * d: n * n * d + n]
    v_thr, gamma = x[-2:]
    try:
        return NetworkParams(W=W, b=b, n_visible=nv, v_thr=v_thr, gamma=gamma)
    except ValueError as e:
        raise ValidationError(f"{path}: {e}") from None


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Visible spikes for three splits sharing one stimulus ``[T, n_visible]``."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    stimulus: np.ndarray

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            object.__setattr__(self, name, check_spikes(getattr(self, name)))
        shapes = {getattr(self, s).shape[1:] for s in ("train", "validation", "test")}
        if len(shapes) != 1:
            raise ValidationError(f"splits disagree on (T, n): {sorted(shapes)}")
        stim = np.asarray(self.stimulus, dtype=np.float64)
        if stim.shape[0] != self.train.shape[1]:
            raise ValidationError(f"stimulus has T={stim.shape[0]}, spikes have T={self.train.shape[1]}")
        object.__setattr__(self, "stimulus", stim)

    @property
    def timesteps(self) -> int:
        return self.train.shape[1]

    @property
    def n_visible(self) -> int:
        return self.train.shape[2]


SPLIT_FILES = {"train": "train.rsnz", "validation": "validation.rsnz",
               "test": "test.rsnz", "stimulus": "stimulus.rsni"}


def save_dataset(directory, data: DatasetSplit) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, fname in SPLIT_FILES.items():
        path = directory / fname
        (write_stimulus if name == "stimulus" else write_spikes)(path, getattr(data, name))
        paths.append(path)
    return paths


def load_dataset(directory) -> DatasetSplit:
    directory = Path(directory)
    parts = {name: (read_stimulus if name == "stimulus" else read_spikes)(directory / fname)
             for name, fname in SPLIT_FILES.items()}
    return DatasetSplit(**parts)
