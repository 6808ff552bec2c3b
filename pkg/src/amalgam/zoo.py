"""Versioned binary containers and the model-zoo registry.

Container layout (bit-exact, all integers little-endian):

    magic   4 bytes         b"AMLG"
    version u32             1
    spec    u32 length + that many bytes of UTF-8 JSON (sorted keys)
    table   u32 tensor count, then per tensor:
                u32 name length + UTF-8 name
                u8  dtype code (1 = float64, 2 = int64)
                u32 ndim, then ndim * u32 dims
                payload: row-major little-endian values
    check   u64             first 8 bytes of SHA-256 over all preceding bytes

The checksum is verified before any other field is trusted. Saving the same
content twice produces byte-identical files; there are no timestamps inside.

The registry is a plain-text index (``index.tsv``) next to the checkpoint
files: ``net_id<TAB>relative_path<TAB>role<TAB>comma-joined-tasks`` per line.
Mutations take a file lock and replace the index atomically, so concurrent
registrations all land and readers never see a torn file.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from filelock import FileLock

from .blocknet import BlockNet, BlockNetSpec, HeadSpec, _param_shapes
from .errors import (
    ConflictError,
    CorruptionError,
    FormatError,
    NotFoundError,
    SpecError,
    VersionError,
)
from .synthdata import LabeledDataset
from .tensor import Tensor

MAGIC = b"AMLG"
VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODE_FOR_KIND = {"f": 1, "i": 2}

ROLES = ("source", "component", "target")
_NAME_RE = re.compile(r"^[A-Za-z0-9._-]+$")


def _checksum(blob: bytes) -> bytes:
    return hashlib.sha256(blob).digest()[:8]


def write_container(path: str | Path, spec: dict, tensors: dict[str, np.ndarray]) -> None:
    """Serialize and atomically replace ``path``."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    spec_blob = json.dumps(spec, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(spec_blob)))
    parts.append(spec_blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind not in _CODE_FOR_KIND:
            raise SpecError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        code = _CODE_FOR_KIND[arr.dtype.kind]
        name_blob = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_blob)))
        parts.append(name_blob)
        parts.append(struct.pack("<B", code))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    blob = b"".join(parts)
    blob += _checksum(blob)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("container ends mid-field")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Checksum-verify, then parse. Raises CorruptionError / FormatError /
    VersionError / NotFoundError as appropriate."""
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no container at {path}")
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 4 + 8:
        raise CorruptionError(f"{path.name}: too short to be a container")
    body, stored = blob[:-8], blob[-8:]
    if _checksum(body) != stored:
        raise CorruptionError(f"{path.name}: checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path.name}: bad magic")
    version = r.u32()
    if version > VERSION:
        raise VersionError(f"{path.name}: version {version} is newer than {VERSION}")
    if version < 1:
        raise FormatError(f"{path.name}: nonsense version {version}")
    try:
        spec = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path.name}: bad spec block: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        code = r.u8()
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path.name}: unknown dtype code {code} for {name!r}")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        dtype = _DTYPE_CODES[code]
        raw = r.take(count * dtype.itemsize)
        if name in tensors:
            raise FormatError(f"{path.name}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if r.pos != len(body):
        raise FormatError(f"{path.name}: {len(body) - r.pos} trailing bytes")
    return spec, tensors


# ---------------------------------------------------------------------------
# blocknet and dataset adapters


def save_blocknet(path: str | Path, net: BlockNet) -> None:
    spec = {
        "kind": "blocknet",
        "input_shape": list(net.spec.input_shape),
        "stem_channels": net.spec.stem_channels,
        "block_channels": list(net.spec.block_channels),
        "block_strides": list(net.spec.block_strides),
        "heads": [[h.task_id, h.num_classes] for h in net.spec.heads],
    }
    write_container(path, spec, {name: p.data for name, p in net.params.items()})


def load_blocknet(path: str | Path) -> BlockNet:
    meta, tensors = read_container(path)
    if meta.get("kind") != "blocknet":
        raise FormatError(f"{Path(path).name}: not a blocknet container")
    try:
        spec = BlockNetSpec(
            input_shape=tuple(meta["input_shape"]),
            stem_channels=meta["stem_channels"],
            block_channels=tuple(meta["block_channels"]),
            block_strides=tuple(meta["block_strides"]),
            heads=tuple(HeadSpec(t, c) for t, c in meta["heads"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{Path(path).name}: incomplete blocknet spec: {exc}") from None
    expected = dict(_param_shapes(spec))
    if set(tensors) != set(expected):
        raise FormatError(
            f"{Path(path).name}: parameter names do not match the spec "
            f"(missing {sorted(set(expected) - set(tensors))}, "
            f"extra {sorted(set(tensors) - set(expected))})"
        )
    params = {}
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(f"{Path(path).name}: {name} has shape {tensors[name].shape}, expected {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True)
    return BlockNet(spec, params)


def save_dataset(path: str | Path, dataset: LabeledDataset, assignment: np.ndarray | None = None) -> None:
    spec = {
        "kind": "dataset",
        "task_classes": dataset.task_classes,
        "n": len(dataset),
    }
    tensors: dict[str, np.ndarray] = {"images": dataset.images}
    for task in sorted(dataset.labels):
        tensors[f"labels.{task}"] = dataset.labels[task].astype(np.int64)
    if dataset.scenes is not None:
        tensors["scenes"] = dataset.scenes
    if assignment is not None:
        tensors["split"] = assignment.astype(np.int64)
    write_container(path, spec, tensors)


def load_dataset(path: str | Path) -> tuple[LabeledDataset, np.ndarray | None]:
    meta, tensors = read_container(path)
    if meta.get("kind") != "dataset":
        raise FormatError(f"{Path(path).name}: not a dataset container")
    if "images" not in tensors:
        raise FormatError(f"{Path(path).name}: dataset container has no images table")
    labels = {
        name.split(".", 1)[1]: arr for name, arr in tensors.items() if name.startswith("labels.")
    }
    ds = LabeledDataset(
        images=tensors["images"],
        labels=labels,
        scenes=tensors.get("scenes"),
        task_classes={t: int(c) for t, c in meta.get("task_classes", {}).items()},
    )
    return ds, tensors.get("split")


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class ZooEntry:
    net_id: str
    path: str  # relative to the zoo root
    role: str
    tasks: tuple[str, ...]


class ZooRegistry:
    """Directory of checkpoints plus a locked, atomically rewritten index."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.tsv"
        self._lock_path = self.root / "index.lock"

    def _lock(self) -> FileLock:
        return FileLock(str(self._lock_path), timeout=30)

    def _read_index(self) -> dict[str, ZooEntry]:
        if not self.index_path.exists():
            return {}
        entries: dict[str, ZooEntry] = {}
        for line_no, line in enumerate(self.index_path.read_text().splitlines(), start=1):
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise FormatError(f"index line {line_no}: expected 4 fields, got {len(fields)}")
            net_id, rel, role, tasks = fields
            if net_id in entries:
                raise FormatError(f"index line {line_no}: duplicate id {net_id!r}")
            entries[net_id] = ZooEntry(net_id, rel, role, tuple(tasks.split(",")))
        return entries

    def _write_index(self, entries: dict[str, ZooEntry]) -> None:
        lines = [
            f"{e.net_id}\t{e.path}\t{e.role}\t{','.join(e.tasks)}\n"
            for e in entries.values()
        ]
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".index.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.writelines(lines)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.index_path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def register(self, net_id: str, rel_path: str, role: str, tasks: Iterable[str]) -> ZooEntry:
        tasks = tuple(sorted(tasks))
        if not _NAME_RE.match(net_id):
            raise SpecError(f"bad net id {net_id!r}")
        if role not in ROLES:
            raise SpecError(f"role must be one of {ROLES}, got {role!r}")
        if not tasks or any(not _NAME_RE.match(t) or "," in t for t in tasks):
            raise SpecError(f"bad task list {tasks!r}")
        if not (self.root / rel_path).exists():
            raise NotFoundError(f"checkpoint {rel_path!r} not found under {self.root}")
        entry = ZooEntry(net_id, rel_path, role, tasks)
        with self._lock():
            entries = self._read_index()
            if net_id in entries:
                raise ConflictError(f"net id {net_id!r} already registered")
            entries[net_id] = entry
            self._write_index(entries)
        return entry

    def lookup(self, net_id: str) -> ZooEntry:
        entries = self._read_index()
        if net_id not in entries:
            raise NotFoundError(f"net id {net_id!r} not in registry")
        return entries[net_id]

    def entries(self) -> list[ZooEntry]:
        return sorted(self._read_index().values(), key=lambda e: e.net_id)

    def list_by_task(self, task: str) -> list[ZooEntry]:
        return [e for e in self.entries() if task in e.tasks]

    def load_net(self, net_id: str) -> BlockNet:
        entry = self.lookup(net_id)
        return load_blocknet(self.root / entry.path)

    def save_net(self, net_id: str, net: BlockNet, role: str) -> ZooEntry:
        rel = f"{net_id}.amlg"
        save_blocknet(self.root / rel, net)
        return self.register(net_id, rel, role, sorted(net.task_set))

    def validate(self) -> None:
        """Re-read every entry's container, checksum included."""
        for entry in self.entries():
            read_container(self.root / entry.path)
