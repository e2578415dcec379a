"""Binary checkpoint format.

Layout (little-endian)::

    b"SINP"  u16 version
    config block      u32 kind, u32 n, n x u32 extents
    tensors           u32 count, then per tensor: u8 rank, rank x u32 extents, f64 data
    optimizer state   u8 present [u32 step, 4 x f64 (lr, beta1, beta2, eps),
                                  u32 n, n moment-1 tensors, n moment-2 tensors]
    discriminator     u8 present [config block, tensors, optimizer state]
    epoch             u32

Feature-network weight files use the same layout with no optimizer state and
no discriminator.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor_core import AdamState, DimensionError
from .models import CeConfig, DiscConfig, FeatureNetConfig, Params, params_from_arrays

MAGIC = b"SINP"
VERSION = 1
_KINDS = {CeConfig: 1, DiscConfig: 2, FeatureNetConfig: 3}
_CONFIGS = {v: k for k, v in _KINDS.items()}


class CheckpointError(Exception):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, DimensionError):
    """Stored configuration or tensor shapes differ from what the caller expects."""


@dataclass
class Checkpoint:
    params: Params
    optimizer: AdamState | None = None
    epoch: int = 0
    disc: Params | None = None
    disc_optimizer: AdamState | None = None


# writing -------------------------------------------------------------------------

def _config_bytes(config) -> bytes:
    ext = config.extents()
    return struct.pack(f"<II{len(ext)}I", _KINDS[type(config)], len(ext), *ext)


def _tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes()


def _tensors_bytes(arrays) -> bytes:
    arrays = list(arrays)
    return struct.pack("<I", len(arrays)) + b"".join(_tensor_bytes(a) for a in arrays)


def _optimizer_bytes(state: AdamState | None) -> bytes:
    if state is None:
        return b"\x00"
    head = struct.pack("<BI4dI", 1, state.step, state.lr, state.beta1, state.beta2, state.eps, len(state.m))
    return head + b"".join(_tensor_bytes(a) for a in state.m) + b"".join(_tensor_bytes(a) for a in state.v)


def checkpoint_bytes(params: Params, optimizer: AdamState | None = None, epoch: int = 0,
                     disc: Params | None = None, disc_optimizer: AdamState | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _config_bytes(params.config),
             _tensors_bytes(t.data for t in params.parameters()), _optimizer_bytes(optimizer)]
    if disc is None:
        parts.append(b"\x00")
    else:
        parts += [b"\x01", _config_bytes(disc.config), _tensors_bytes(t.data for t in disc.parameters()),
                  _optimizer_bytes(disc_optimizer)]
    parts.append(struct.pack("<I", epoch))
    return b"".join(parts)


def save_checkpoint(path, params: Params, optimizer: AdamState | None = None, epoch: int = 0,
                    disc: Params | None = None, disc_optimizer: AdamState | None = None) -> None:
    """Write atomically: the file is replaced only once fully written."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, optimizer, epoch, disc, disc_optimizer))
    tmp.replace(path)


# reading -------------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def config(self):
        kind, n = self.unpack("<II")
        if kind not in _CONFIGS:
            raise CheckpointError(f"unknown config kind {kind} at offset {self.pos - 8}")
        ext = list(self.unpack(f"<{n}I"))
        try:
            return _CONFIGS[kind].from_extents(ext)
        except (ValueError, IndexError) as exc:
            raise CheckpointError(f"invalid config block: {exc}") from None

    def tensor(self) -> np.ndarray:
        (rank,) = self.unpack("<B")
        shape = self.unpack(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def tensors(self) -> list[np.ndarray]:
        (n,) = self.unpack("<I")
        return [self.tensor() for _ in range(n)]

    def optimizer(self) -> AdamState | None:
        (present,) = self.unpack("<B")
        if not present:
            return None
        step, lr, b1, b2, eps, n = self.unpack("<I4dI")
        m = [self.tensor() for _ in range(n)]
        v = [self.tensor() for _ in range(n)]
        return AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step, m=m, v=v)


def _build(config, arrays: list[np.ndarray], what: str) -> Params:
    names = list(config.param_shapes())
    if len(arrays) != len(names):
        raise CheckpointShapeError(f"{what}: {len(arrays)} tensors stored, config needs {len(names)}")
    try:
        return params_from_arrays(config, dict(zip(names, arrays)))
    except DimensionError as exc:
        raise CheckpointShapeError(f"{what}: {exc}") from None


def _check_optimizer(state: AdamState | None, params: Params, what: str) -> None:
    if state is None:
        return
    shapes = [p.shape for p in params.parameters()]
    if [a.shape for a in state.m] != shapes or [a.shape for a in state.v] != shapes:
        raise CheckpointShapeError(f"{what}: optimizer moments do not match parameter shapes")


def parse_checkpoint(buf: bytes, expect_config=None) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    config = r.config()
    if expect_config is not None and config != expect_config:
        raise CheckpointShapeError(f"checkpoint config {config} does not match expected {expect_config}")
    params = _build(config, r.tensors(), "network")
    opt = r.optimizer()
    _check_optimizer(opt, params, "network")
    disc = disc_opt = None
    (has_disc,) = r.unpack("<B")
    if has_disc:
        dconf = r.config()
        disc = _build(dconf, r.tensors(), "discriminator")
        disc_opt = r.optimizer()
        _check_optimizer(disc_opt, disc, "discriminator")
    (epoch,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after offset {r.pos}")
    return Checkpoint(params, opt, epoch, disc, disc_opt)


def load_checkpoint(path, expect_config=None) -> Checkpoint:
    """Read a checkpoint; nothing is returned unless the whole file parses."""
    return parse_checkpoint(Path(path).read_bytes(), expect_config)
