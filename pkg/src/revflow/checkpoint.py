"""Binary checkpoint store.

Layout (all integers little-endian)::

    b"PRGC"                     magic
    u16  format version         (1)
    32B  config fingerprint     sha256 of the canonical run-config JSON
    u8   stage                  0 = pretrained, 1 = finetuned
    u32  metadata length, then that many bytes of UTF-8 JSON
    u32  tensor count, then per tensor:
         u16 name length, name (UTF-8), u8 rank, rank x u32 dims,
         prod(dims) x f64 values

Parameters are stored under ``model.``, optimizer moments under ``adam.m.``
and ``adam.v.``, and the data normalization under ``norm.``.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .ndmath import DTYPE, AdamState, NetSpec, ParamNet

MAGIC = b"PRGC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class Stage(enum.IntEnum):
    PRETRAINED = 0
    FINETUNED = 1


def fingerprint(config: dict) -> bytes:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).digest()


@dataclass
class Checkpoint:
    stage: Stage
    fingerprint: bytes
    meta: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def net_spec(self) -> NetSpec:
        return NetSpec.from_dict(self.meta["net"])

    @property
    def config(self) -> dict:
        return self.meta.get("config", {})

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[6:]: v for k, v in self.tensors.items() if k.startswith("model.")}

    def build_net(self, spec: NetSpec | None = None) -> ParamNet:
        """Instantiate and load; shapes are checked before anything is copied."""
        net = ParamNet(spec or self.net_spec)
        expected = {k: tuple(v.shape) for k, v in net.state_dict().items()}
        state = self.model_state()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise CheckpointError(f"architecture mismatch: missing {missing}, unexpected {extra}")
        for k, shape in expected.items():
            if tuple(state[k].shape) != shape:
                raise CheckpointError(f"architecture mismatch for {k}: checkpoint {list(state[k].shape)}, net {list(shape)}")
        net.load_state_dict(state)
        return net

    def adam_state(self) -> AdamState | None:
        a = self.meta.get("adam")
        if a is None:
            return None
        state = AdamState(a["learning_rate"], a["beta1"], a["beta2"], a["epsilon"], a["step_count"])
        for k, v in self.tensors.items():
            if k.startswith("adam.m."):
                state.first_moment[k[7:]] = v.clone()
            elif k.startswith("adam.v."):
                state.second_moment[k[7:]] = v.clone()
        return state


def make_checkpoint(
    net: ParamNet,
    stage: Stage,
    config: dict,
    adam: AdamState | None = None,
    extra_meta: dict | None = None,
    extra_tensors: dict[str, torch.Tensor] | None = None,
) -> Checkpoint:
    meta = {"net": net.spec.to_dict(), "config": config, **(extra_meta or {})}
    tensors = {f"model.{k}": v.detach().clone() for k, v in net.state_dict().items()}
    if adam is not None:
        meta["adam"] = {
            "learning_rate": adam.learning_rate,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
            "step_count": adam.step_count,
        }
        for k in sorted(adam.first_moment):
            tensors[f"adam.m.{k}"] = adam.first_moment[k].clone()
            tensors[f"adam.v.{k}"] = adam.second_moment[k].clone()
    tensors.update(extra_tensors or {})
    return Checkpoint(stage, fingerprint(config), meta, tensors)


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    if len(ckpt.fingerprint) != 32:
        raise CheckpointError("fingerprint must be 32 bytes")
    buf.write(ckpt.fingerprint)
    buf.write(struct.pack("<B", int(ckpt.stage)))
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        raw = name.encode()
        arr = t.detach().to(DTYPE).contiguous().numpy()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fp = bytes(take(32))
    (stage,) = struct.unpack("<B", take(1))
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float64))
    if pos != len(view):
        raise CheckpointError("trailing bytes after tensor table")
    try:
        stage_tag = Stage(stage)
    except ValueError:
        raise CheckpointError(f"unknown stage tag {stage}") from None
    return Checkpoint(stage_tag, fp, meta, tensors)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def diff_keys(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Dotted keys whose values differ between two nested dicts."""
    out = []
    for k in sorted(set(a) | set(b)):
        key = f"{prefix}{k}"
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(diff_keys(va, vb, key + "."))
        elif va != vb:
            out.append(key)
    return out
