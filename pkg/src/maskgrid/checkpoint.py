"""Checkpoint persistence.

Layout: 4 magic bytes "EMG1", a uint32 format version, a uint64 header
length, a UTF-8 JSON header (config, regime, step, RNG state, manifest of
name/shape/offset for every payload entry), then the payload as raw
little-endian float32 in manifest order. Optimizer moments ride along as
``opt.m.<name>`` / ``opt.v.<name>`` entries so a resumed run is bit-exact.

Writes are atomic (temp file + rename); load(save(b)) is bit-identical.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelBundle, ModelConfig
from .tensor import Tensor
from .training import OptState

MAGIC = b"EMG1"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def _rng_from_json(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(path, bundle: ModelBundle, opt: Optional[OptState] = None,
                    rng: Optional[np.random.Generator] = None,
                    extra: Optional[dict] = None) -> None:
    path = Path(path)
    entries: list[tuple[str, np.ndarray]] = [(k, p.data) for k, p in bundle.param_items()]
    if opt is not None:
        entries += [(f"opt.m.{k}", v) for k, v in sorted(opt.m.items())]
        entries += [(f"opt.v.{k}", v) for k, v in sorted(opt.v.items())]

    manifest = []
    offset = 0
    for name, arr in entries:
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size

    header = {
        "config": bundle.config.to_dict(),
        "regime": bundle.regime,
        "step": bundle.step,
        "opt_step": opt.step if opt is not None else None,
        "rng_state": _rng_state_to_json(rng) if rng is not None else None,
        "manifest": manifest,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = path.with_suffix(path.suffix + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with tmp.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for _, arr in entries:
            f.write(arr.astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelBundle, Optional[OptState], Optional[np.random.Generator], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with path.open("rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {version} unsupported (this build reads version {FORMAT_VERSION})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = np.frombuffer(f.read(), dtype="<f4")

    config = ModelConfig.from_dict(header["config"])
    params: dict[str, Tensor] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    seen = set()
    for ent in header["manifest"]:
        name, shape, off = ent["name"], tuple(ent["shape"]), ent["offset"]
        if name in seen:
            raise CheckpointError(f"{path}: duplicate manifest entry {name!r}")
        seen.add(name)
        size = int(np.prod(shape)) if shape else 1
        if off + size > payload.size:
            raise CheckpointError(
                f"{path}: truncated payload — entry {name!r} needs bytes past end of file")
        arr = payload[off:off + size].reshape(shape).copy()
        if name.startswith("opt.m."):
            opt_m[name[6:]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)

    bundle = ModelBundle(config=config, params=params,
                         regime=header["regime"], step=header["step"])
    opt = None
    if opt_m:
        opt = OptState(m=opt_m, v=opt_v, step=header["opt_step"] or 0)
    rng = _rng_from_json(header["rng_state"]) if header.get("rng_state") else None
    return bundle, opt, rng, header.get("extra", {})
