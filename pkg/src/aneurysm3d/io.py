"""
On-disk formats.

* Volume: JSON sidecar ``<stem>.vol.json`` plus raw payload ``<stem>.raw``
  (little-endian, x fastest, f32 or i16).
* Annotation: JSON with one run-length-encoded voxel set per aneurysm; runs
  are ``[start, length]`` over the flat x-fastest index.
* Weights: ``A3DWGT01`` magic, u64 little-endian manifest length, JSON
  manifest (config, tensor names, shapes), then the f32 little-endian payload.
* Report: sorted-key JSON.

Every save writes a temporary sibling and renames it into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError
from .volume import Volume

VOLUME_FORMAT = "aneurysm3d-volume"
ANNOTATION_FORMAT = "aneurysm3d-annotation"
WEIGHTS_MAGIC = b"A3DWGT01"
_DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2")}


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def _load_json(path) -> dict:
    text = Path(path).read_bytes()
    try:
        obj = json.loads(text.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not UTF-8 text", offset=e.start) from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e.msg})", offset=e.pos) from None
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: top level must be an object", offset=0)
    return obj


def _require(obj: dict, key: str, kind, path, check=None, what=""):
    if key not in obj:
        raise FormatError(f"{path}: missing field", field=key)
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise FormatError(f"{path}: wrong type {type(value).__name__}", field=key)
    if check is not None and not check(value):
        raise FormatError(f"{path}: invalid value {value!r}{what}", field=key)
    return value


def _triple(kind, positive=True):
    def check(v):
        return (
            isinstance(v, list)
            and len(v) == 3
            and all(isinstance(a, kind) and not isinstance(a, bool) for a in v)
            and (not positive or all(a > 0 for a in v))
        )

    return check


# ------------------------------------------------------------------ volumes


def volume_paths(path) -> Tuple[Path, Path]:
    """(sidecar, payload) for a stem, a ``.vol.json`` or a ``.raw`` path."""
    p = Path(path)
    name = p.name
    for suffix in (".vol.json", ".raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name + ".vol.json"), p.with_name(name + ".raw")


def save_volume(vol: Volume, path, dtype: str = "f32") -> Path:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}", field="dtype")
    data = vol.data
    if dtype == "i16":
        if not np.array_equal(data, np.round(data)) or data.min() < -32768 or data.max() > 32767:
            raise FormatError("volume is not representable as i16", field="dtype")
    sidecar, payload = volume_paths(path)
    header = {
        "format": VOLUME_FORMAT,
        "version": 1,
        "dims": list(vol.dims),
        "spacing": [float(s) for s in vol.spacing],
        "dtype": dtype,
        "byte_order": "little",
        "order": "x-fastest",
        "payload": payload.name,
    }
    atomic_write(payload, np.ascontiguousarray(data).astype(_DTYPES[dtype]).tobytes())
    atomic_write(sidecar, _dump_json(header))
    return sidecar


def load_volume(path) -> Volume:
    sidecar, _ = volume_paths(path)
    h = _load_json(sidecar)
    _require(h, "format", str, sidecar, lambda v: v == VOLUME_FORMAT)
    _require(h, "version", int, sidecar, lambda v: v == 1)
    dims = _require(h, "dims", list, sidecar, _triple(int))
    spacing = _require(h, "spacing", list, sidecar, _triple((int, float)))
    dtype = _require(h, "dtype", str, sidecar, lambda v: v in _DTYPES, " (expected f32 or i16)")
    _require(h, "byte_order", str, sidecar, lambda v: v == "little")
    _require(h, "order", str, sidecar, lambda v: v == "x-fastest")
    name = _require(h, "payload", str, sidecar, lambda v: v and "/" not in v and "\\" not in v)
    payload = sidecar.with_name(name)
    if not payload.exists():
        raise FormatError(f"{sidecar}: payload file {name} not found", field="payload")
    raw = payload.read_bytes()
    nx, ny, nz = dims
    expected = nx * ny * nz * _DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{payload}: expected {expected} bytes, got {len(raw)}", field="payload", offset=min(len(raw), expected)
        )
    data = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(nz, ny, nx).astype(np.float32)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data.ravel()))[0])
        raise FormatError(f"{payload}: non-finite sample", field="payload", offset=bad * _DTYPES[dtype].itemsize)
    return Volume(data, tuple(float(s) for s in spacing))


# -------------------------------------------------------------- annotations


def rle_encode(idx_xyz: np.ndarray, dims: Sequence[int]) -> List[List[int]]:
    """Runs over the sorted flat x-fastest indices of a voxel set."""
    nx, ny, nz = dims
    idx = np.asarray(idx_xyz, dtype=np.int64).reshape(-1, 3)
    flat = np.unique(idx[:, 0] + nx * (idx[:, 1] + ny * idx[:, 2]))
    if flat.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(flat) != 1) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [flat.size]])
    return [[int(flat[s]), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs, dims: Sequence[int], where: str = "rle") -> np.ndarray:
    nx, ny, nz = dims
    total = nx * ny * nz
    parts = []
    last_end = -1
    for k, run in enumerate(runs):
        if (
            not isinstance(run, list)
            or len(run) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in run)
        ):
            raise FormatError("run must be [start, length] integers", field=f"{where}[{k}]")
        start, length = run
        if length < 1 or start < 0 or start + length > total:
            raise FormatError(f"run {run} outside volume of {total} voxels", field=f"{where}[{k}]")
        if start < last_end:
            raise FormatError("runs must be sorted and non-overlapping", field=f"{where}[{k}]")
        last_end = start + length
        parts.append(np.arange(start, start + length, dtype=np.int64))
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    x = flat % nx
    y = (flat // nx) % ny
    z = flat // (nx * ny)
    return np.stack([x, y, z], axis=1)


def save_annotation(path, case_id: str, dims, aneurysms: Sequence[np.ndarray], diameters_mm: Sequence[float],
                    locations: Optional[Sequence[Optional[str]]] = None) -> Path:
    if len(aneurysms) != len(diameters_mm):
        raise FormatError("one diameter per aneurysm required", field="aneurysms")
    items = []
    for k, (vox, d) in enumerate(zip(aneurysms, diameters_mm)):
        if not d > 0:
            raise FormatError(f"diameter must be positive, got {d}", field=f"aneurysms[{k}].max_diameter_mm")
        item = {"rle": rle_encode(vox, dims), "max_diameter_mm": float(d)}
        if locations is not None and locations[k]:
            item["location"] = str(locations[k])
        items.append(item)
    doc = {
        "format": ANNOTATION_FORMAT,
        "version": 1,
        "case_id": str(case_id),
        "dims": [int(v) for v in dims],
        "aneurysms": items,
    }
    path = Path(path)
    atomic_write(path, _dump_json(doc))
    return path


def load_annotation(path) -> dict:
    """Returns {case_id, dims, aneurysms: [(N, 3) xyz arrays], diameters_mm, locations}."""
    doc = _load_json(path)
    _require(doc, "format", str, path, lambda v: v == ANNOTATION_FORMAT)
    _require(doc, "version", int, path, lambda v: v == 1)
    case_id = _require(doc, "case_id", str, path)
    dims = _require(doc, "dims", list, path, _triple(int))
    items = _require(doc, "aneurysms", list, path)
    vox, diam, loc = [], [], []
    for k, item in enumerate(items):
        if not isinstance(item, dict):
            raise FormatError(f"{path}: aneurysm entry must be an object", field=f"aneurysms[{k}]")
        runs = _require(item, "rle", list, path)
        d = item.get("max_diameter_mm")
        if not isinstance(d, (int, float)) or isinstance(d, bool) or not d > 0:
            raise FormatError(f"{path}: diameter must be a positive number", field=f"aneurysms[{k}].max_diameter_mm")
        v = rle_decode(runs, dims, where=f"aneurysms[{k}].rle")
        if len(v) == 0:
            raise FormatError(f"{path}: empty voxel set", field=f"aneurysms[{k}].rle")
        vox.append(v)
        diam.append(float(d))
        loc.append(item.get("location"))
    return {"case_id": case_id, "dims": tuple(dims), "aneurysms": vox, "diameters_mm": diam, "locations": loc}


# ----------------------------------------------------------------- weights


def save_weights(model, path, extra: Optional[dict] = None) -> Path:
    named = list(model.named_parameters())
    manifest = {
        "config": model.config.to_dict(),
        "seed": int(getattr(model, "seed", 0)),
        "dtype": "f32",
        "byte_order": "little",
        "tensors": [{"name": n, "shape": list(p.value.shape)} for n, p in named],
    }
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.value, dtype="<f4").tobytes() for _, p in named)
    path = Path(path)
    atomic_write(path, WEIGHTS_MAGIC + struct.pack("<Q", len(head)) + head + payload)
    return path


def read_weights(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Parse a weights file into (manifest, name -> float32 array)."""
    raw = Path(path).read_bytes()
    if raw[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic", field="magic", offset=0)
    pos = len(WEIGHTS_MAGIC)
    if len(raw) < pos + 8:
        raise FormatError(f"{path}: truncated before manifest length", field="manifest_length", offset=pos)
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) < pos + n:
        raise FormatError(f"{path}: manifest needs {n} bytes, {len(raw) - pos} present", field="manifest", offset=pos)
    try:
        manifest = json.loads(raw[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: manifest is not valid JSON", field="manifest",
                          offset=pos + getattr(e, "pos", getattr(e, "start", 0))) from None
    if not isinstance(manifest, dict):
        raise FormatError(f"{path}: manifest must be an object", field="manifest", offset=pos)
    tensors = _require(manifest, "tensors", list, path)
    _require(manifest, "config", dict, path)
    pos += n
    sizes = []
    for k, t in enumerate(tensors):
        if not isinstance(t, dict) or not isinstance(t.get("name"), str) or not isinstance(t.get("shape"), list):
            raise FormatError(f"{path}: tensor entry needs name and shape", field=f"tensors[{k}]")
        if not all(isinstance(s, int) and s >= 0 for s in t["shape"]):
            raise FormatError(f"{path}: bad shape {t['shape']}", field=f"tensors[{k}].shape")
        sizes.append(int(np.prod(t["shape"], dtype=np.int64)))
    expected = 4 * sum(sizes)
    if len(raw) - pos != expected:
        raise FormatError(
            f"{path}: payload expected {expected} bytes, got {len(raw) - pos}", field="payload", offset=pos
        )
    params = {}
    for t, size in zip(tensors, sizes):
        params[t["name"]] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(t["shape"]).astype(np.float32)
        pos += 4 * size
    return manifest, params


def load_weights(path):
    """Rebuild the network recorded in a weights file and load its parameters."""
    from .model import NetworkConfig, build_network

    manifest, params = read_weights(path)
    config = NetworkConfig.from_dict(manifest["config"])
    model = build_network(config, seed=int(manifest.get("seed", 0)))
    named = dict(model.named_parameters())
    if list(named) != list(params):
        raise FormatError(f"{path}: tensor names do not match the configured network", field="tensors")
    for name, p in named.items():
        if p.value.shape != params[name].shape:
            raise FormatError(f"{path}: {name} has shape {params[name].shape}, expected {p.value.shape}",
                              field="tensors")
        p.value[...] = params[name]
    model.eval()
    return model


# ----------------------------------------------------------------- reports


def round_floats(obj, digits=10):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, digits) for v in obj]
    return obj


def dumps_report(report: dict) -> bytes:
    return _dump_json(round_floats(report))


def save_report(report: dict, path) -> Path:
    path = Path(path)
    atomic_write(path, dumps_report(report))
    return path


def load_report(path) -> dict:
    return _load_json(path)


def save_json(obj, path) -> Path:
    path = Path(path)
    atomic_write(path, _dump_json(obj))
    return path


def load_json(path) -> dict:
    return _load_json(path)
