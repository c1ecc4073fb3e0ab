"""Named parameter registry, the ADADELTA update, and checkpoint IO."""

from __future__ import annotations

import struct
from typing import Iterator

import numpy as np

from .autograd import Tensor
from .errors import ContractError, LoadError

CHECKPOINT_MAGIC = b"DSCK"
CHECKPOINT_VERSION = 1

# optimizer-state entries ride along in the checkpoint under suffixed names
_STATE_SQ_GRAD = "#sq_grad"
_STATE_SQ_UPDATE = "#sq_update"


class ParamRegistry:
    """Uniquely named parameters with per-parameter ADADELTA state.

    Each parameter carries a learning-rate multiplier so branches of a joint
    model can train at different rates under one optimizer.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._lr_mult: dict[str, float] = {}
        self._sq_grad: dict[str, np.ndarray] = {}
        self._sq_update: dict[str, np.ndarray] = {}

    def add(self, name: str, data: np.ndarray, lr_mult: float = 1.0) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._lr_mult[name] = float(lr_mult)
        self._sq_grad[name] = np.zeros_like(t.data)
        self._sq_update[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def lr_mult(self, name: str) -> float:
        return self._lr_mult[name]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def grad_norm(self, prefix: str = "") -> float:
        """L2 norm over grads of all parameters whose name starts with prefix."""
        total = 0.0
        for name, t in self._params.items():
            if name.startswith(prefix) and t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))

    def state(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._sq_grad[name], self._sq_update[name]


def adadelta_step(
    registry: ParamRegistry,
    rho: float = 0.95,
    eps: float = 1e-6,
    lr: float = 1.0,
) -> None:
    """ADADELTA update over all registered parameters.

    The accumulators follow the original recurrence; `lr` (times each
    parameter's multiplier) scales only the applied step, so the running
    squared-update average tracks the unscaled delta.
    """
    for name, p in registry.items():
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
        g = p.grad
        sq_g = registry._sq_grad[name]
        sq_u = registry._sq_update[name]
        sq_g *= rho
        sq_g += (1.0 - rho) * g * g
        delta = np.sqrt((sq_u + eps) / (sq_g + eps)) * g
        p.data -= lr * registry._lr_mult[name] * delta
        sq_u *= rho
        sq_u += (1.0 - rho) * delta * delta


# -- checkpoint format ----------------------------------------------------------
#
# binary, little-endian:
#   magic "DSCK" | u32 version | u32 entry count
#   per entry: u16 name length | name utf-8 | u8 ndim | u32 extents... | f64 data


def _write_entry(out: list[bytes], name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out.append(struct.pack("<H", len(encoded)))
    out.append(encoded)
    out.append(struct.pack("<B", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(
    registry: ParamRegistry, path: str, include_state: bool = True
) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in registry.items():
        entries.append((name, p.data))
        if include_state:
            entries.append((name + _STATE_SQ_GRAD, registry._sq_grad[name]))
            entries.append((name + _STATE_SQ_UPDATE, registry._sq_update[name]))
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, arr in entries:
        _write_entry(chunks, name, arr)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise LoadError("truncated checkpoint file")
    return buf


def load_checkpoint(registry: ParamRegistry, path: str) -> None:
    """Restore parameter values (and optimizer state when present) in place."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise LoadError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != CHECKPOINT_VERSION:
            raise LoadError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            n_bytes = 8 * int(np.prod(shape)) if ndim else 8
            arr = np.frombuffer(_read_exact(fh, n_bytes), dtype="<f8").reshape(shape)
            base, sep, suffix = name.partition("#")
            if base not in registry:
                raise LoadError(f"{path}: unknown parameter {base!r}")
            target: np.ndarray
            if not sep:
                target = registry[base].data
            elif sep + suffix == _STATE_SQ_GRAD:
                target = registry._sq_grad[base]
            elif sep + suffix == _STATE_SQ_UPDATE:
                target = registry._sq_update[base]
            else:
                raise LoadError(f"{path}: unknown state entry {name!r}")
            if target.shape != arr.shape:
                raise LoadError(
                    f"{path}: shape mismatch for {name!r}: "
                    f"{arr.shape} vs {target.shape}"
                )
            target[...] = arr
