"""Tensor ops, parameter containers, Adam and checkpoints.

Tensors are float64 ``torch.Tensor`` objects and reverse-mode gradients come
from torch autograd. The ops here add explicit shape validation so that a
mismatch names the op and both shapes.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64
Tensor = torch.Tensor

CHECKPOINT_MAGIC = b"DRAFTCKP"
CHECKPOINT_VERSION = 1
PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.json"


class ShapeError(ValueError):
    pass


def _shape_error(op: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != (b.shape[-2] if b.dim() > 1 else b.shape[0]):
        raise _shape_error("matmul", a, b)
    try:
        return torch.matmul(a, b)
    except RuntimeError:
        raise _shape_error("matmul", a, b) from None


def _broadcastable(s1: Sequence[int], s2: Sequence[int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(reversed(s1), reversed(s2)))


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcastable(a.shape, b.shape):
        raise _shape_error("add", a, b)
    return a + b


def scale(x: Tensor, c: float) -> Tensor:
    return x * c


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.softmax(x, dim=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return torch.log_softmax(x, dim=axis)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return x.mean() if axis is None else x.mean(dim=axis)


def masked_mean(x: Tensor, mask: Tensor, axis: int = -2) -> Tensor:
    """Mean over ``axis`` counting only rows where ``mask`` is true."""
    if mask.shape != x.shape[: x.dim() - 1]:
        raise _shape_error("masked_mean", x, mask)
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=axis) / w.sum(dim=axis)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors given")
    first = tensors[0]
    ax = axis % first.dim()
    for t in tensors[1:]:
        if t.dim() != first.dim() or any(
            t.shape[i] != first.shape[i] for i in range(first.dim()) if i != ax
        ):
            raise _shape_error("concat", first, t)
    return torch.cat(list(tensors), dim=axis)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis (population variance), then apply the affine."""
    if gain is not None and gain.shape[-1] != x.shape[-1]:
        raise _shape_error("layer_norm", x, gain)
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def dropout(x: Tensor, rate: float, training: bool, generator: torch.Generator | None = None) -> Tensor:
    """Inverted dropout: keep with probability ``1 - rate`` and rescale."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


def xavier_uniform(fan_in: int, fan_out: int, generator: torch.Generator) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(fan_in, fan_out, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


def embedding_normal(n: int, d: int, generator: torch.Generator) -> Tensor:
    return torch.randn(n, d, generator=generator, dtype=DTYPE) * d**-0.5


# --------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named parameters plus the set of names currently frozen."""

    def __init__(self, params: Mapping[str, Tensor]):
        self._params: dict[str, Tensor] = dict(params)
        self.frozen: set[str] = set()

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> list[str]:
        return [n for n in self._params if n not in self.frozen]

    def freeze(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - self._params.keys()
        if unknown:
            raise KeyError(f"cannot freeze unknown parameters: {sorted(unknown)[:5]}")
        self.frozen |= names
        for n in names:
            self._params[n].requires_grad_(False)

    def freeze_all_except(self, predicate: Callable[[str], bool]) -> None:
        self.unfreeze_all()
        self.freeze(n for n in self._params if not predicate(n))

    def unfreeze_all(self) -> None:
        for n in self.frozen:
            self._params[n].requires_grad_(True)
        self.frozen.clear()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def snapshot(self) -> dict[str, Tensor]:
        return {n: p.detach().clone() for n, p in self._params.items()}

    def restore(self, values: Mapping[str, Tensor]) -> None:
        missing = self._params.keys() - values.keys()
        if missing:
            raise KeyError(f"restore: missing parameters {sorted(missing)[:5]}")
        with torch.no_grad():
            for n, p in self._params.items():
                v = values[n]
                if tuple(v.shape) != tuple(p.shape):
                    raise ShapeError(f"restore {n}: shape {tuple(v.shape)} does not match {tuple(p.shape)}")
                p.copy_(v)

    def checksum(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in sorted(self._params if names is None else names):
            h.update(n.encode())
            h.update(self._params[n].detach().numpy().astype("<f8").tobytes())
        return h.hexdigest()


def backward(loss: Tensor, store: ParamStore | None = None) -> None:
    """Populate gradients of a scalar loss.

    With a store, trainable parameters the loss does not reach get a zero
    gradient instead of ``None``.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        loss.reshape(()).backward()
    if store is not None:
        for n in store.trainable():
            p = store[n]
            if p.grad is None:
                p.grad = torch.zeros_like(p)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update of every non-frozen parameter."""
    trainable = store.trainable()
    for n in trainable:
        if store[n].grad is None:
            raise ValueError(f"adam_step: parameter {n!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for n in trainable:
            p = store[n]
            g = p.grad
            m = state.exp_avg.get(n)
            if m is None:
                m = state.exp_avg[n] = torch.zeros_like(p)
                state.exp_avg_sq[n] = torch.zeros_like(p)
            v = state.exp_avg_sq[n]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    store.zero_grad()


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory: str | Path, params: Mapping[str, Tensor], manifest: Mapping) -> None:
    """Write ``params.bin`` (shape headers + little-endian f64) and a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    with open(directory / PARAMS_FILE, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for n in names:
            t = params[n].detach()
            raw = n.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.dim()))
            fh.write(struct.pack(f"<{t.dim()}Q", *t.shape))
            fh.write(t.numpy().astype("<f8").tobytes())
    body = dict(manifest)
    body["format_version"] = CHECKPOINT_VERSION
    body["params"] = {n: list(params[n].shape) for n in names}
    (directory / MANIFEST_FILE).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(directory: str | Path) -> tuple[dict[str, Tensor], dict]:
    directory = Path(directory)
    params_path = directory / PARAMS_FILE
    if not params_path.exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    data = params_path.read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{params_path}: bad checkpoint header")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{params_path}: unsupported checkpoint version {version}")
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        numel = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=numel, offset=pos).reshape(shape)
        pos += 8 * numel
        out[name] = torch.from_numpy(arr.astype(np.float64))
    manifest = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
    return out, manifest
