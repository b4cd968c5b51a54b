"""On-disk formats: checkpoints, PPM images, dataset dumps, JSON reports.

Checkpoint layout (all integers little-endian)::

    b"JOWLCKPT" | u32 version | u64 manifest length | manifest JSON | f32 payload

The manifest holds a ``tensors`` list of {name, shape, dtype, offset, length}
(offsets relative to the payload start, in payload order) plus the
architecture, a dataset-config hash and the completed stages.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import models as M
from .synthgen import BiasSpec, SceneObject, build_scene

MAGIC = b"JOWLCKPT"
VERSION = 1
DATASET_MAGIC = b"JOWLDSET"
_HEADER = struct.Struct("<8sIQ")


class FormatError(ValueError):
    """A file does not match the expected on-disk format."""


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dataset_hash(dataset_config):
    d = dataset_config if isinstance(dataset_config, dict) else dataset_config.to_dict()
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    atomic_write(path, text.encode())


# checkpoints ----------------------------------------------------------------------

def checkpoint_bytes(params, data_hash=None, stages=()):
    names = sorted(params.arrays)
    tensors, chunks, offset = [], [], 0
    for name in names:
        raw = np.ascontiguousarray(params.arrays[name], dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(params.arrays[name].shape), "dtype": "f32",
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "tensors": tensors,
        "arch": params.arch.to_dict(),
        "dataset_hash": data_hash,
        "stages": sorted(stages),
        "frozen": {c: bool(v) for c, v in sorted(params.frozen.items())},
    }
    blob = canonical_json(manifest).encode()
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def save_checkpoint(params, path, data_hash=None, stages=()):
    atomic_write(path, checkpoint_bytes(params, data_hash, stages))


def parse_checkpoint(data):
    """(ModelParams, manifest) from checkpoint bytes; raises FormatError."""
    if len(data) < _HEADER.size:
        raise FormatError(f"file is {len(data)} bytes, shorter than the {_HEADER.size}-byte header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + mlen
    if start > len(data):
        raise FormatError(f"manifest length {mlen} runs past the end of the file")
    try:
        manifest = json.loads(data[_HEADER.size:start].decode())
        arch = M.ArchConfig(**manifest["arch"])
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from None
    payload = memoryview(data)[start:]
    expected = M.parameter_shapes(arch)
    arrays, cursor = {}, 0
    for e in entries:
        name = e.get("name")
        if name in arrays:
            raise FormatError(f"tensor {name} listed twice")
        if name not in expected:
            raise FormatError(f"unknown tensor {name!r}")
        shape = tuple(e["shape"])
        if shape != expected[name]:
            raise FormatError(f"tensor {name} has shape {shape}, architecture expects {expected[name]}")
        if e.get("dtype") != "f32":
            raise FormatError(f"tensor {name} has dtype {e.get('dtype')!r}, expected f32")
        offset, length = int(e["offset"]), int(e["length"])
        if offset != cursor:
            raise FormatError(f"tensor {name} starts at {offset}, expected {cursor}")
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"tensor {name} length {length} does not match its shape")
        if offset + length > len(payload):
            raise FormatError(f"tensor {name} ends at byte {offset + length}, payload has {len(payload)}")
        arrays[name] = np.frombuffer(payload[offset:offset + length], dtype="<f4").astype(np.float64).reshape(shape)
        cursor = offset + length
    if cursor != len(payload):
        raise FormatError(f"{len(payload) - cursor} trailing payload bytes")
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise FormatError(f"checkpoint lacks {len(missing)} tensor(s), e.g. {missing[0]}")
    return M.ModelParams(arch, arrays, manifest.get("frozen")), manifest


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return parse_checkpoint(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# images ----------------------------------------------------------------------------

def to_bytes(image):
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise ValueError("image has non-finite pixels")
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def ppm_bytes(image):
    """Binary P6, maxval 255, pixel = round(value * 255)."""
    px = to_bytes(image)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {px.shape}")
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def write_ppm(path, image):
    atomic_write(path, ppm_bytes(image))


_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+255\s")


def read_ppm(path):
    data = Path(path).read_bytes()
    m = _PPM_HEADER.match(data)
    if m is None:
        raise FormatError(f"{path}: not a binary P6 image with maxval 255")
    w, h = int(m.group(1)), int(m.group(2))
    body = data[m.end():]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0


# dataset dumps ------------------------------------------------------------------------

def dataset_bytes(scenes, meta=None):
    """Container with a JSON manifest of scenes followed by raw u8 RGB pixels."""
    pixels = [to_bytes(s.image).tobytes() for s in scenes]
    shape = list(scenes[0].image.shape) if scenes else [0, 0, 3]
    entries, offset = [], 0
    for s, px in zip(scenes, pixels):
        entries.append(dict(s.to_dict(), offset=offset, length=len(px)))
        offset += len(px)
    manifest = {"meta": meta or {}, "image_shape": shape, "scenes": entries}
    blob = canonical_json(manifest).encode()
    return _HEADER.pack(DATASET_MAGIC, VERSION, len(blob)) + blob + b"".join(pixels)


def write_dataset(path, scenes, meta=None):
    atomic_write(path, dataset_bytes(scenes, meta))


def read_dataset(path):
    """Scenes from a dump; images are checked against a fresh render."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC or version != VERSION:
        raise FormatError(f"{path}: not a version-{VERSION} dataset dump")
    start = _HEADER.size + mlen
    manifest = json.loads(data[_HEADER.size:start].decode())
    shape = tuple(manifest["image_shape"])
    scenes = []
    for e in manifest["scenes"]:
        objs = [SceneObject(o["shape"], o["color"], tuple(o["cell"])) for o in e["objects"]]
        bias = manifest["meta"].get("bias_spec")
        scene = build_scene(objs, BiasSpec(**bias) if bias else None)
        stored = np.frombuffer(data[start + e["offset"]:start + e["offset"] + e["length"]], dtype=np.uint8)
        if stored.size != int(np.prod(shape)) or not np.array_equal(stored.reshape(shape), to_bytes(scene.image)):
            raise FormatError(f"{path}: pixel data disagrees with the scene description")
        scenes.append(scene)
    return scenes, manifest["meta"]


__all__ = [
    "FormatError", "save_checkpoint", "load_checkpoint", "parse_checkpoint",
    "checkpoint_bytes", "dataset_hash", "write_ppm", "read_ppm", "ppm_bytes",
    "write_dataset", "read_dataset", "write_json", "canonical_json",
]
