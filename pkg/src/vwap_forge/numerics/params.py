"""Named parameter registry, deterministic initialisation and checkpoints."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Flat mapping ``name -> (value, grad)`` of float64 arrays.

    ``rng`` is a seeded PCG64 generator; every initialiser draws from it in
    registration order, so the same seed and the same model spec always give
    bit-identical starting weights.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self.rng = np.random.Generator(np.random.PCG64(self.rng_seed))
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen = False

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def size(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def add(self, name: str, value) -> np.ndarray:
        if self.frozen:
            raise RuntimeError("ParamStore is frozen")
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite initial values")
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def glorot(self, name: str, fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape: int) -> np.ndarray:
        return self.add(name, np.zeros(shape))

    def set(self, name: str, value) -> None:
        if self.frozen:
            raise RuntimeError("ParamStore is frozen")
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self.values[name].shape:
            raise ValueError(f"{name}: shape {arr.shape} != {self.values[name].shape}")
        self.values[name][...] = arr

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.values[k][...] = v

    def freeze(self) -> "ParamStore":
        """Mark read-only; frozen stores may be shared by concurrent readers."""
        self.frozen = True
        for v in self.values.values():
            v.flags.writeable = False
        return self

    def copy(self) -> "ParamStore":
        other = ParamStore(self.rng_seed)
        for k, v in self.values.items():
            other.add(k, v)
        return other


def save_checkpoint(store: ParamStore, path: str | Path, meta: dict | None = None) -> None:
    """Write a JSON checkpoint. Floats are emitted with ``repr`` precision so
    the round trip is bit-exact."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "rng_seed": store.rng_seed,
        "meta": meta or {},
        "params": {
            name: {"shape": list(v.shape), "values": v.ravel().tolist()}
            for name, v in store.values.items()
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    store = ParamStore(payload.get("rng_seed", 0))
    for name, entry in payload["params"].items():
        shape = tuple(entry["shape"])
        values = np.array(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {values.size} values for shape {shape}")
        store.add(name, values.reshape(shape))
    return store, payload.get("meta", {})
