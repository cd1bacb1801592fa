"""Named-array container: a zip of ``.npy`` members plus a JSON manifest.

Members are stored uncompressed with a fixed timestamp and in insertion
order, so identical inputs give byte-identical files. ``np.load`` can read
the arrays too; the manifest is the ``__manifest__.json`` member.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

MANIFEST = "__manifest__.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _info(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_container(path, arrays: dict[str, np.ndarray], manifest: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        for name, arr in arrays.items():
            if name == MANIFEST or name.endswith(".json"):
                raise ValueError(f"reserved array name {name!r}")
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr, order="C"), allow_pickle=False)
            zf.writestr(_info(name + ".npy"), buf.getvalue())
        text = json.dumps(manifest or {}, sort_keys=True, indent=1)
        zf.writestr(_info(MANIFEST), text.encode("utf-8"))
    return path


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    manifest = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == MANIFEST:
                manifest = json.loads(data.decode("utf-8"))
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return arrays, manifest
