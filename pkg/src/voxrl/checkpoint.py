"""Checkpoint archives: a zip of named little-endian .npy arrays plus a
meta.json (config, config hash, progress counters, RNG state). Shared by
every trained component so checkpoints stay inspectable with stdlib tools.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .util import config_hash

_META = "meta.json"
_PARAM_DIR = "params/"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)  # fixed timestamp: archives byte-stable


def save_archive(path: Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo(_META, date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(meta, indent=1, sort_keys=True))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, version=(1, 0), allow_pickle=False)
            info = zipfile.ZipInfo(_PARAM_DIR + name + ".npy", date_time=_ZIP_DATE)
            zf.writestr(info, buf.getvalue())


def load_archive(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read(_META))
        for name in zf.namelist():
            if name.startswith(_PARAM_DIR) and name.endswith(".npy"):
                key = name[len(_PARAM_DIR):-4]
                arrays[key] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                       allow_pickle=False)
    return arrays, meta


def torch_state_to_arrays(state_dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in state_dict.items()}


def arrays_to_torch_state(arrays: dict[str, np.ndarray]):
    import torch

    return {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}


def make_meta(kind: str, config: dict, **extra) -> dict:
    meta = {"kind": kind, "config": config, "config_hash": config_hash(config)}
    meta.update(extra)
    return meta
