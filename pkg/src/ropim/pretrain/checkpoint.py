"""Binary checkpoint format.

Little-endian layout::

    "ROPM"  u32 version (=1)
    u32 n, n bytes   ViTConfig as canonical JSON (sorted keys, no spaces)
    u32 n, n bytes   TrainConfig as canonical JSON
    u32 epoch        u32 optimizer step
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
                f32 values in row-major order

Besides model parameters the tensor list may hold ``data.channel_mean``,
``data.channel_std`` and ``optim.m/<param>``, ``optim.v/<param>``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ropim.data import ChannelStats
from ropim.errors import FormatError
from ropim.pretrain.config import TrainConfig
from ropim.pretrain.optim import OptimizerState
from ropim.vit import ViTConfig, ViTModel

MAGIC = b"ROPM"
VERSION = 1
STATS_MEAN = "data.channel_mean"
STATS_STD = "data.channel_std"
OPT_M = "optim.m/"
OPT_V = "optim.v/"


def _canonical_json(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class Checkpoint:
    vit_config: ViTConfig
    train_config: TrainConfig
    tensors: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    optimizer_step: int = 0
    version: int = VERSION

    @classmethod
    def from_model(cls, model: ViTModel, train_config: TrainConfig, epoch: int = 0,
                   stats: ChannelStats | None = None,
                   optimizer: OptimizerState | None = None) -> "Checkpoint":
        tensors = OrderedDict((k, v.data.astype(np.float32)) for k, v in model.params.items())
        if stats is not None:
            tensors[STATS_MEAN] = np.asarray(stats.mean, dtype=np.float32)
            tensors[STATS_STD] = np.asarray(stats.std, dtype=np.float32)
        step = 0
        if optimizer is not None:
            step = optimizer.step
            for name in model.params:
                if name in optimizer.m:
                    tensors[OPT_M + name] = optimizer.m[name].astype(np.float32)
                    tensors[OPT_V + name] = optimizer.v[name].astype(np.float32)
        return cls(model.config, train_config, tensors, epoch, step)

    def model(self, dtype=np.float64) -> ViTModel:
        model = ViTModel.init(self.vit_config, seed=0, dtype=dtype)
        model.load_state_dict(self.tensors)
        return model

    def stats(self) -> ChannelStats | None:
        if STATS_MEAN not in self.tensors:
            return None
        return ChannelStats(self.tensors[STATS_MEAN].astype(np.float64),
                            self.tensors[STATS_STD].astype(np.float64))

    def optimizer_state(self, dtype=np.float64) -> OptimizerState:
        state = OptimizerState(step=self.optimizer_step)
        for name, arr in self.tensors.items():
            if name.startswith(OPT_M):
                state.m[name[len(OPT_M):]] = arr.astype(dtype)
            elif name.startswith(OPT_V):
                state.v[name[len(OPT_V):]] = arr.astype(dtype)
        return state

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", self.version)]
        for block in (_canonical_json(self.vit_config.to_dict()),
                      _canonical_json(self.train_config.to_dict())):
            parts += [struct.pack("<I", len(block)), block]
        parts.append(struct.pack("<III", self.epoch, self.optimizer_step, len(self.tensors)))
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Checkpoint":
        view = memoryview(data)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise FormatError(f"{source}: truncated at byte {pos}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise FormatError(f"{source}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != VERSION:
            raise FormatError(f"{source}: unsupported checkpoint version {version}")
        blocks = []
        for _ in range(2):
            (n,) = struct.unpack("<I", take(4))
            try:
                blocks.append(json.loads(bytes(take(n)).decode("utf-8")))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{source}: corrupt config block at byte {pos}: {exc}") from exc
        epoch, step, count = struct.unpack("<III", take(12))
        tensors = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack("<H", take(2))
            name = bytes(take(n)).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(dims)
            tensors[name] = values.astype(np.float32)
        if pos != len(view):
            raise FormatError(f"{source}: {len(view) - pos} trailing bytes")
        try:
            vit = ViTConfig.from_dict(blocks[0])
            train = TrainConfig.from_dict(blocks[1])
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{source}: invalid configuration: {exc}") from exc
        return cls(vit, train, tensors, epoch, step, version)

    def save(self, path) -> Path:
        """Write atomically (temp file + rename) and return the path."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), str(path))
