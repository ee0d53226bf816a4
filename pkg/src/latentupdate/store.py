"""Binary columnar persistence for posterior samples, plus content digests.

File layout (all integers little-endian)::

    magic      8 bytes
    version    uint32
    rows       uint64   (J draws, or M proposals)
    n          uint64   (patients; 0 for caches)
    hlen       uint32
    header     hlen bytes of UTF-8 JSON: ids, column layout, extras
    padding    to an 8-byte boundary
    columns    contiguous little-endian arrays in header order, each 8-byte aligned

A JSON sidecar (``<path>.json``) carries run metadata and the digest.  The
digest is the sha256 of the binary file, and :func:`sample_digest` computes
the same value for an in-memory sample without touching disk.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError
from .mcmc import PosteriorSample

VERSION = 1
STORE_MAGIC = b"LUSTORE\x00"
_FIXED = struct.Struct("<8sIQQI")


class _HashSink:
    def __init__(self, fh=None):
        self.fh = fh
        self.hash = hashlib.sha256()
        self.pos = 0

    def write(self, data):
        data = bytes(data) if not isinstance(data, (bytes, bytearray, memoryview)) else data
        self.hash.update(data)
        if self.fh is not None:
            self.fh.write(data)
        self.pos += len(data)


def _layout(columns: Mapping[str, np.ndarray]):
    layout, offset = [], 0
    for name, arr in columns.items():
        dt = np.asarray(arr).dtype.newbyteorder("<")
        nbytes = int(np.asarray(arr).size * dt.itemsize)
        layout.append({"name": name, "dtype": dt.str, "shape": list(np.shape(arr)), "offset": offset, "nbytes": nbytes})
        offset += nbytes + (-nbytes) % 8
    return layout


def _emit(sink, magic, rows, n, header: dict, columns: Mapping[str, np.ndarray]):
    header = dict(header, columns=_layout(columns))
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    sink.write(_FIXED.pack(magic, VERSION, rows, n, len(hbytes)))
    sink.write(hbytes)
    sink.write(b"\x00" * ((-sink.pos) % 8))
    for col, (name, arr) in zip(header["columns"], columns.items()):
        data = np.ascontiguousarray(arr, dtype=np.dtype(col["dtype"]))
        sink.write(memoryview(data).cast("B"))
        sink.write(b"\x00" * ((-col["nbytes"]) % 8))


def write_columns(path, magic: bytes, rows: int, n: int, header: dict, columns: Mapping[str, np.ndarray]) -> str:
    """Write a columnar file atomically; returns its sha256 digest."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        sink = _HashSink(fh)
        _emit(sink, magic, rows, n, header, columns)
    os.replace(tmp, path)
    return sink.hash.hexdigest()


def columns_digest(magic: bytes, rows: int, n: int, header: dict, columns: Mapping[str, np.ndarray]) -> str:
    sink = _HashSink()
    _emit(sink, magic, rows, n, header, columns)
    return sink.hash.hexdigest()


def read_columns(path, magic: bytes, names=None, mmap: bool = True):
    """Read ``(rows, n, header, columns)``; ``names`` restricts which columns load."""
    with open(path, "rb") as fh:
        fixed = fh.read(_FIXED.size)
        if len(fixed) < _FIXED.size:
            raise ValidationError(f"{path}: truncated header")
        got_magic, version, rows, n, hlen = _FIXED.unpack(fixed)
        if got_magic != magic:
            raise ValidationError(f"{path}: not a {magic.rstrip(bytes(1)).decode()} file")
        if version != VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen))
    start = _FIXED.size + hlen
    start += (-start) % 8
    out = {}
    for col in header["columns"]:
        if names is not None and col["name"] not in names:
            continue
        dt = np.dtype(col["dtype"])
        count = int(np.prod(col["shape"])) if col["shape"] else 1
        if mmap and count:
            arr = np.memmap(path, dtype=dt, mode="r", offset=start + col["offset"], shape=tuple(col["shape"]))
        else:
            arr = np.fromfile(path, dtype=dt, count=count, offset=start + col["offset"]).reshape(col["shape"])
        out[col["name"]] = arr
    return rows, n, header, out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# posterior samples
# ---------------------------------------------------------------------------

_SAMPLE_COLUMNS = PosteriorSample.PARAM_COLUMNS + ("chain",) + PosteriorSample.LATENT_COLUMNS + PosteriorSample.PATIENT_COLUMNS


def _sample_parts(sample: PosteriorSample):
    header = {"ids": list(sample.ids)}
    columns = {name: getattr(sample, name) for name in _SAMPLE_COLUMNS}
    return sample.J, sample.n, header, columns


def sample_digest(sample: PosteriorSample) -> str:
    """Digest of the sample's binary serialization (cached on the object)."""
    cached = sample.meta.get("_digest")
    if cached is None:
        cached = columns_digest(STORE_MAGIC, *_sample_parts(sample))
        sample.meta["_digest"] = cached
    return cached


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _json_meta(meta: dict) -> dict:
    return {k: v for k, v in meta.items() if not k.startswith("_")}


def save_sample(sample: PosteriorSample, path) -> str:
    digest = write_columns(path, STORE_MAGIC, *_sample_parts(sample))
    sample.meta["_digest"] = digest
    side = {"meta": _json_meta(sample.meta), "digest": digest, "J": sample.J, "n": sample.n}
    with open(sidecar_path(path), "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
    return digest


def load_sample(path, mmap: bool = True, latents: bool = True, verify: bool = True) -> PosteriorSample:
    """Load a store; ``latents=False`` skips the (large) per-patient draws.

    With ``verify`` the binary is re-hashed and checked against the sidecar.
    """
    names = None if latents else set(_SAMPLE_COLUMNS) - set(PosteriorSample.LATENT_COLUMNS)
    rows, n, header, cols = read_columns(path, STORE_MAGIC, names=names, mmap=mmap)
    meta = {}
    side = sidecar_path(path)
    digest = file_digest(path) if verify or not side.exists() else None
    if side.exists():
        with open(side) as fh:
            sidecar = json.load(fh)
        meta = sidecar.get("meta", {})
        if verify and sidecar.get("digest") != digest:
            raise ValidationError(f"{path}: digest does not match sidecar")
        digest = digest or sidecar.get("digest")
    if not latents:
        # zero-stride placeholders keep shapes valid without reading the draws
        cols["eta"] = np.lib.stride_tricks.as_strided(np.zeros(1, dtype=np.int8), shape=(rows, n), strides=(0, 0))
        cols["u"] = np.lib.stride_tricks.as_strided(np.zeros(1), shape=(rows, n, 2), strides=(0, 0, 0))
    sample = PosteriorSample(ids=tuple(header["ids"]), meta=meta, **cols)
    sample.meta["_digest"] = digest
    sample.meta["_latents_loaded"] = latents
    return sample


def export_jsonl(sample: PosteriorSample, path):
    """Human-readable dump, one draw per line (debugging aid)."""
    with open(path, "w") as fh:
        for j in range(sample.J):
            row = {
                "draw": j,
                "chain": int(sample.chain[j]),
                "params": sample.params(j).to_dict(),
                "latents": {pid: sample.latents(j, i).to_dict() for i, pid in enumerate(sample.ids)},
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")

