"""Flat parameter storage with named blocks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Block:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


def make_blocks(layout) -> list[Block]:
    """Lay out ``(name, shape)`` pairs contiguously."""
    blocks, offset = [], 0
    for name, shape in layout:
        shape = tuple(int(s) for s in shape)
        blocks.append(Block(name, shape, offset))
        offset += blocks[-1].size
    return blocks


class ParamVector:
    """A flat float64 vector with named sub-tensors.

    ``pv["V"]`` returns a reshaped *view* into ``pv.values``.
    """

    def __init__(self, values, blocks: list[Block]):
        values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
        blocks = list(blocks)
        total = sum(b.size for b in blocks)
        if total != values.size:
            raise ValueError(f"blocks cover {total} values but vector has {values.size}")
        offset = 0
        for b in sorted(blocks, key=lambda b: b.offset):
            if b.offset != offset:
                raise ValueError(f"block {b.name!r} at offset {b.offset}, expected {offset}")
            offset += b.size
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must be finite")
        self.values = values
        self.blocks = blocks
        self._by_name = {b.name: b for b in blocks}
        if len(self._by_name) != len(blocks):
            raise ValueError("duplicate block names")

    @classmethod
    def zeros(cls, layout) -> "ParamVector":
        blocks = make_blocks(layout)
        return cls(np.zeros(sum(b.size for b in blocks)), blocks)

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ParamVector":
        layout = [(k, np.shape(v)) for k, v in arrays.items()]
        pv = cls.zeros(layout)
        for k, v in arrays.items():
            pv[k][...] = v
        return pv

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        b = self._by_name[name]
        return self.values[b.slice].reshape(b.shape)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def block(self, name: str) -> Block:
        return self._by_name[name]

    @property
    def names(self) -> list[str]:
        return [b.name for b in self.blocks]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {b.name: self[b.name] for b in self.blocks}

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.blocks)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.blocks)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.blocks == other.blocks

    def __repr__(self) -> str:
        parts = ", ".join(f"{b.name}{list(b.shape)}" for b in self.blocks)
        return f"ParamVector({len(self)}: {parts})"

    # -- serialization -------------------------------------------------
    def sidecar(self) -> dict:
        return {
            "dtype": "<f8",
            "length": len(self),
            "blocks": [
                {"name": b.name, "shape": list(b.shape), "offset": b.offset}
                for b in self.blocks
            ],
        }

    def save(self, path, meta: dict | None = None) -> tuple[Path, Path]:
        """Write ``<path>.bin`` (little-endian f8) and ``<path>.json``."""
        path = Path(path)
        bin_path = path.with_suffix(".bin")
        json_path = path.with_suffix(".json")
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        self.values.astype("<f8").tofile(bin_path)
        side = self.sidecar()
        if meta:
            side["meta"] = meta
        json_path.write_text(json.dumps(side, indent=2))
        return bin_path, json_path

    @classmethod
    def load(cls, path) -> "ParamVector":
        pv, _ = cls.load_with_meta(path)
        return pv

    @classmethod
    def load_with_meta(cls, path) -> tuple["ParamVector", dict]:
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        values = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        if values.size != side["length"]:
            raise ValueError(f"{path}: expected {side['length']} values, found {values.size}")
        blocks = [Block(b["name"], tuple(b["shape"]), b["offset"]) for b in side["blocks"]]
        return cls(values.astype(np.float64), blocks), side.get("meta", {})
