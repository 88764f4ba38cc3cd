"""Volume data type and the on-disk volume store.

Store layout: one ``.vol`` file per volume (16-byte header: magic ``VOL1``,
u32 depth/height/width little-endian, then float32 voxels in C order) plus a
JSON manifest listing id, relative path, label, provenance meta and a sha256
checksum per file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VOL_MAGIC = b"VOL1"
_HEADER = struct.Struct("<4sIII")

SOURCES = ("real", "synthetic", "reconstruction")


@dataclass
class VolumeMeta:
    source: str
    seed: int
    step_count: int | None = None

    def to_json(self) -> dict:
        return {"source": self.source, "seed": self.seed, "step_count": self.step_count}

    @classmethod
    def from_json(cls, d: dict) -> "VolumeMeta":
        return cls(source=d["source"], seed=d["seed"], step_count=d.get("step_count"))


@dataclass
class Volume:
    """Dense 3D scalar grid in [0, 1] with a class label and provenance."""

    voxels: np.ndarray  # float32, shape (D, H, W)
    label: int
    meta: VolumeMeta

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    def validate(self, size: int | None = None) -> None:
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {self.voxels.shape}")
        if size is not None and self.shape != (size, size, size):
            raise ValueError(f"expected cube of size {size}, got {self.shape}")
        lo, hi = float(self.voxels.min()), float(self.voxels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"voxel values outside [0, 1]: min={lo}, max={hi}")
        if self.meta.source not in SOURCES:
            raise ValueError(f"unknown source {self.meta.source!r}")


def write_volume_file(path: Path, voxels: np.ndarray) -> None:
    voxels = np.ascontiguousarray(voxels, dtype="<f4")
    d, h, w = voxels.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(VOL_MAGIC, d, h, w))
        f.write(voxels.tobytes())


def read_volume_file(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, d, h, w = _HEADER.unpack(f.read(_HEADER.size))
        if magic != VOL_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        data = f.read(d * h * w * 4)
    arr = np.frombuffer(data, dtype="<f4").reshape(d, h, w)
    return arr.astype(np.float32)


def file_checksum(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class VolumeStore:
    """Directory of volume files with a manifest. Single-writer, append-only."""

    MANIFEST = "manifest.json"

    def __init__(self, root: Path):
        self.root = Path(root)
        self.entries: dict[str, dict] = {}
        manifest = self.root / self.MANIFEST
        if manifest.exists():
            self.entries = {e["id"]: e for e in json.loads(manifest.read_text())["volumes"]}

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return list(self.entries)

    def add(self, vol_id: str, volume: Volume) -> dict:
        if vol_id in self.entries:
            raise FileExistsError(f"volume id {vol_id!r} already in store")
        rel = vol_id.replace("/", "_") + ".vol"
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_volume_file(path, volume.voxels)
        entry = {
            "id": vol_id,
            "path": rel,
            "label": int(volume.label),
            "meta": volume.meta.to_json(),
            "checksum": file_checksum(path),
        }
        self.entries[vol_id] = entry
        return entry

    def get(self, vol_id: str) -> Volume:
        e = self.entries[vol_id]
        voxels = read_volume_file(self.root / e["path"])
        return Volume(voxels=voxels, label=e["label"], meta=VolumeMeta.from_json(e["meta"]))

    def get_many(self, vol_ids) -> list[Volume]:
        return [self.get(v) for v in vol_ids]

    def save_manifest(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {"volumes": [self.entries[k] for k in sorted(self.entries)]}
        (self.root / self.MANIFEST).write_text(json.dumps(payload, indent=1))

    def manifest_checksum(self) -> str:
        blob = json.dumps([self.entries[k] for k in sorted(self.entries)], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class DatasetSplit:
    """Train/test volume id lists over one store; disjoint by construction."""

    store_root: str
    train: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    class_counts: dict = field(default_factory=dict)

    def validate(self) -> None:
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train/test share {len(overlap)} volume ids")

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps({
            "store_root": self.store_root,
            "train": self.train,
            "test": self.test,
            "class_counts": self.class_counts,
        }, indent=1))

    @classmethod
    def load(cls, path: Path) -> "DatasetSplit":
        d = json.loads(Path(path).read_text())
        return cls(store_root=d["store_root"], train=d["train"], test=d["test"],
                   class_counts=d["class_counts"])

    def open_store(self) -> VolumeStore:
        return VolumeStore(Path(self.store_root))
