"""Binary checkpoints: named f64 tensors, optimizer state and a config echo.

Layout (all integers little-endian)::

    magic    8 bytes   b"ADCKPT\\x00\\x01"
    version  u32
    hlen     u64       length of the JSON header in bytes
    header   hlen      UTF-8 JSON, keys sorted
    payload  ...       tensors back to back as little-endian f64, in header order

The header lists each tensor's name, shape and original dtype, so integer
arrays (e.g. visit counts) come back with their dtype. Writing is
deterministic: identical contents give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .autograd import OptimState

MAGIC = b"ADCKPT\x00\x01"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")
# groups holding training state rather than model parameters
STATE_PREFIXES = ("opt.", "ifga/")


class CheckpointError(Exception):
    """Structured load/save failure: ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


@dataclass
class Checkpoint:
    kind: str  # detector | meta | fusion
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    optimizers: dict[str, dict] = field(default_factory=dict)  # name -> hyper-parameters
    epoch: int = 0
    info: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors stored under ``prefix/``, with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}

    def optimizer(self, name: str) -> OptimState:
        if name not in self.optimizers:
            raise CheckpointError("missing-optimizer", f"no optimizer state {name!r}")
        return OptimState.restore(self.optimizers[name], self.group(f"opt.{name}"))


def pack(kind: str, groups: dict[str, dict], optimizers: Optional[dict[str, OptimState]] = None, **kw) -> Checkpoint:
    """Build a checkpoint from named parameter groups and optimizer states."""
    tensors = {}
    for g, params in groups.items():
        for k, v in params.items():
            tensors[f"{g}/{k}"] = np.asarray(v)
    hypers = {}
    for name, st in (optimizers or {}).items():
        hypers[name] = st.hyper()
        for k, v in st.arrays().items():
            tensors[f"opt.{name}/{k}"] = np.asarray(v)
    return Checkpoint(kind, tensors, optimizers=hypers, **kw)


def dumps(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.tensors)
    entries = []
    for name in names:
        a = np.asarray(ckpt.tensors[name])
        if a.dtype.kind not in "fiub":
            raise CheckpointError("unsupported-dtype", f"{name} has dtype {a.dtype}")
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str})
    header = {
        "kind": ckpt.kind,
        "epoch": int(ckpt.epoch),
        "config": ckpt.config,
        "optimizers": ckpt.optimizers,
        "info": ckpt.info,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [_HEAD.pack(MAGIC, VERSION, len(hbytes)), hbytes]
    for name in names:
        chunks.append(np.ascontiguousarray(ckpt.tensors[name], dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob: bytes, expected_names: Optional[Iterable[str]] = None) -> Checkpoint:
    if len(blob) < _HEAD.size:
        raise CheckpointError("truncated", f"file is {len(blob)} bytes, shorter than the {_HEAD.size}-byte preamble")
    magic, version, hlen = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("bad-magic", "not an adaptdet checkpoint")
    if version != VERSION:
        raise CheckpointError(
            "version",
            f"checkpoint format v{version} is not supported by this build (v{VERSION}); "
            f"re-export it with a release that writes v{VERSION}, or retrain",
        )
    start = _HEAD.size
    if start + hlen > len(blob):
        raise CheckpointError("truncated", "header extends past the end of the file")
    try:
        header = json.loads(blob[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("bad-header", str(e)) from None
    entries = header["tensors"]
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in entries]
    payload = blob[start + hlen :]
    want = 8 * sum(sizes)
    if len(payload) != want:
        raise CheckpointError("payload-length", f"expected {want} payload bytes for {len(entries)} tensors, found {len(payload)}")
    tensors = {}
    at = 0
    for e, n in zip(entries, sizes):
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=at).reshape(e["shape"])
        dt = np.dtype(e["dtype"])
        tensors[e["name"]] = a.astype(np.float64) if dt.kind == "f" else a.astype(dt)
        at += 8 * n
    ckpt = Checkpoint(header["kind"], tensors, header["config"], header["optimizers"], header["epoch"], header["info"])
    if expected_names is not None:
        check_registry(ckpt, expected_names)
    return ckpt


def check_registry(ckpt: Checkpoint, expected_names: Iterable[str]) -> None:
    """Refuse a checkpoint whose parameter names differ from the model's registry."""
    have = {k for k in ckpt.tensors if not k.startswith(STATE_PREFIXES)}
    want = set(expected_names)
    if have != want:
        missing = sorted(want - have)[:5]
        extra = sorted(have - want)[:5]
        raise CheckpointError("registry", f"parameter names differ from the model (missing {missing}, unexpected {extra})")


def save(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path, expected_names: Optional[Iterable[str]] = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise CheckpointError("missing", f"no checkpoint at {path}") from None
    return loads(blob, expected_names)
