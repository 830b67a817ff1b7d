"""Bit-exact persistence: the named-tensor archive, dataset manifests, and
training checkpoints.

Archive layout (all little-endian):
    magic "RACT" | version u16 | tensor_count u32
    per tensor: name_len u16 | name utf-8 | ndims u8 | dims u32 each
                | payload float64 row-major
Trailing bytes after the last tensor are rejected.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile

import numpy as np

log = logging.getLogger("ragcap.archive")

MAGIC = b"RACT"
VERSION = 1

CKPT_MAGIC = b"RCKP"


class ArchiveFormatError(ValueError):
    """Malformed archive, with a byte offset in the message."""


class ManifestError(ValueError):
    """Malformed dataset manifest, with a line number in the message."""


# ---------------------------------------------------------------------------
# tensor archive
# ---------------------------------------------------------------------------

def pack_archive(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise ArchiveFormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ArchiveFormatError(f"tensor name too long: {name!r}")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    return b"".join(parts)


def unpack_archive(buf: bytes) -> dict[str, np.ndarray]:
    def need(offset, n, what):
        if offset + n > len(buf):
            raise ArchiveFormatError(
                f"truncated archive: need {n} bytes for {what} at byte {offset}, "
                f"only {len(buf) - offset} available")

    need(0, 4, "magic")
    if buf[:4] != MAGIC:
        raise ArchiveFormatError(f"bad magic {buf[:4]!r} at byte 0")
    off = 4
    need(off, 6, "header")
    version, count = struct.unpack_from("<HI", buf, off)
    off += 6
    if version != VERSION:
        raise ArchiveFormatError(f"unknown archive version {version} at byte 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 2, "name length")
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, name_len, "name")
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        if name in out:
            raise ArchiveFormatError(f"duplicate tensor name {name!r} at byte {off}")
        need(off, 1, "ndims")
        ndims = buf[off]
        off += 1
        need(off, 4 * ndims, "dims")
        dims = struct.unpack_from(f"<{ndims}I", buf, off)
        off += 4 * ndims
        n_elems = 1
        for d in dims:
            n_elems *= d
        need(off, 8 * n_elems, f"payload of {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=n_elems, offset=off)
        off += 8 * n_elems
        out[name] = arr.reshape(dims).astype(np.float64)
    if off != len(buf):
        raise ArchiveFormatError(
            f"{len(buf) - off} trailing bytes after byte {off}")
    return out


def atomic_write_bytes(path: str, payload: bytes):
    """Write via a temp file + rename so readers never see partial data."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_archive(path: str, tensors: dict[str, np.ndarray]):
    atomic_write_bytes(path, pack_archive(tensors))


def read_archive(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return unpack_archive(f.read())


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

SPLITS = ("train", "valid", "test")


class ManifestRow:
    __slots__ = ("id", "split", "feature_path", "captions")

    def __init__(self, id, split, feature_path, captions):
        self.id = id
        self.split = split
        self.feature_path = feature_path
        self.captions = captions

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "split": self.split,
                           "feature_path": self.feature_path,
                           "captions": self.captions}, sort_keys=True)


def write_manifest(path: str, rows: list[ManifestRow]):
    atomic_write_bytes(path, ("\n".join(r.to_json() for r in rows) + "\n")
                       .encode("utf-8"))


def load_manifest(path: str, check_features: bool = True) -> list[ManifestRow]:
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    rows: list[ManifestRow] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {lineno}: invalid JSON ({e})") from e
            for field in ("id", "split", "feature_path", "captions"):
                if field not in rec:
                    raise ManifestError(f"line {lineno}: missing field {field!r}")
            if rec["id"] in seen:
                raise ManifestError(f"line {lineno}: duplicate id {rec['id']!r}")
            seen.add(rec["id"])
            if rec["split"] not in SPLITS:
                raise ManifestError(
                    f"line {lineno}: unknown split {rec['split']!r}")
            caps = rec["captions"]
            if not isinstance(caps, list) or not caps:
                raise ManifestError(f"line {lineno}: captions must be a "
                                    "nonempty list")
            fpath = rec["feature_path"]
            if not os.path.isabs(fpath):
                fpath = os.path.join(base, fpath)
            if check_features and not os.path.exists(fpath):
                raise ManifestError(
                    f"line {lineno}: feature_path not resolvable: "
                    f"{rec['feature_path']!r}")
            rows.append(ManifestRow(rec["id"], rec["split"], fpath,
                                    [str(c) for c in caps]))
    if not any(r.split == "train" for r in rows):
        raise ManifestError("manifest has no train rows")
    return rows


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def pack_checkpoint(tensors: dict[str, np.ndarray], metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    body = pack_archive(tensors)
    return CKPT_MAGIC + struct.pack("<I", len(meta)) + meta + body


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], metadata: dict):
    atomic_write_bytes(path, pack_checkpoint(tensors, metadata))


def load_checkpoint(path: str, expected_config_hash: str | None = None):
    """Returns (tensors, metadata). Warns on config-hash mismatch."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 8 or buf[:4] != CKPT_MAGIC:
        raise ArchiveFormatError(f"not a checkpoint: bad magic at byte 0")
    (meta_len,) = struct.unpack_from("<I", buf, 4)
    if 8 + meta_len > len(buf):
        raise ArchiveFormatError(
            f"truncated checkpoint: metadata of {meta_len} bytes at byte 8")
    metadata = json.loads(buf[8:8 + meta_len].decode("utf-8"))
    tensors = unpack_archive(buf[8 + meta_len:])
    if (expected_config_hash is not None
            and metadata.get("config_hash") != expected_config_hash):
        log.warning("checkpoint config hash %s does not match current config %s",
                    metadata.get("config_hash"), expected_config_hash)
    return tensors, metadata


def restore_params(named_params, tensors: dict[str, np.ndarray]):
    """Copy archived values into live parameters, checking shapes."""
    for name, p in named_params:
        if name not in tensors:
            raise ArchiveFormatError(f"checkpoint missing parameter {name!r}")
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise ArchiveFormatError(
                f"parameter {name!r} has shape {arr.shape}, "
                f"expected {p.data.shape}")
        p.data = arr.copy()
