"""Parameter files.

A parameter file is an uncompressed NumPy ``.npz`` archive (a ZIP container
of ``.npy`` members). Member ``__meta__`` is a ``uint8`` array holding UTF-8
JSON::

    {"format": "vitalsfusion-params", "version": 1, "seed": int,
     "config_hash": str, "config": {...ModelConfig...}, "names": [...]}

Every other member is one tensor, named exactly as in ``ModelParams.tensors``
(little-endian, C order, dtype as trained).
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from ..errors import CompatibilityError, FormatError
from .network import ModelConfig, ModelParams

FORMAT = "vitalsfusion-params"
VERSION = 1


def encode_json(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def decode_json(arr):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def pack_params(params, config, prefix=""):
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "seed": int(params.seed),
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "names": list(params.tensors),
    }
    members = {f"{prefix}__meta__": encode_json(meta)}
    for name, t in params.tensors.items():
        members[prefix + name] = t
    return members


def unpack_params(archive, config=None, prefix=""):
    try:
        meta = decode_json(archive[f"{prefix}__meta__"])
    except KeyError:
        raise FormatError("parameter archive has no metadata member") from None
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise FormatError(f"unsupported parameter format {meta.get('format')} v{meta.get('version')}")
    if config is not None and config.hash() != meta["config_hash"]:
        raise CompatibilityError(
            f"parameters were saved for config {meta['config_hash']}, "
            f"requested config is {config.hash()}"
        )
    try:
        tensors = {name: np.array(archive[prefix + name]) for name in meta["names"]}
    except KeyError as exc:
        raise FormatError(f"parameter archive is missing tensor {exc}") from None
    return ModelParams(tensors, int(meta["seed"]), meta["config_hash"]), ModelConfig.from_dict(meta["config"])


def open_archive(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"no such file: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
        # force a full read so truncation surfaces here
        return {k: archive[k] for k in archive.files}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError) as exc:
        raise FormatError(f"{path}: unreadable archive ({exc})") from None


def save_params(params, config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **pack_params(params, config))
    return path


def load_params(path, config=None):
    """Load a parameter file; raises ``CompatibilityError`` if ``config`` differs."""
    params, _ = unpack_params(open_archive(path), config)
    return params
