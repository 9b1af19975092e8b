"""Dataset cache: one self-describing file per split.

Layout (integers little-endian)::

    magic    8 bytes   b"ADDATA\\x00\\x01"
    version  u32
    hlen     u64
    header   hlen      UTF-8 JSON: version, split, kind, config echo, counts,
                       and one record per task (or frame) with scene seed,
                       start pose, n, per-frame pose and annotations, and the
                       trajectory index table
    payload  ...       every frame image [C, H, W] as little-endian f32, in
                       record order

Rendered images are already rounded to f32, so a round trip is lossless.
Scenes are not stored; they are regenerated from their seeds on load.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from typing import Sequence

import numpy as np

from . import world as W

MAGIC = b"ADDATA\x00\x01"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")


class CacheError(Exception):
    def __init__(self, reason: str, detail: str):
        super().__init__(f"{reason}: {detail}")
        self.reason = reason
        self.detail = detail


def _pose(p: W.Pose) -> list:
    return [int(p.cell[0]), int(p.cell[1]), int(p.heading)]


def _unpose(v) -> W.Pose:
    return W.Pose((int(v[0]), int(v[1])), int(v[2]))


def _ann(a: W.Annotation) -> list:
    return [int(a.class_id), [float(x) for x in a.box], int(a.object_index)]


def _unann(v) -> W.Annotation:
    return W.Annotation(int(v[0]), tuple(float(x) for x in v[1]), int(v[2]))


def _frame_meta(f: W.Frame) -> dict:
    return {"pose": _pose(f.pose), "annotations": [_ann(a) for a in f.annotations]}


def dumps_tasks(tasks: Sequence[W.TaskInstance], split: str, config: W.WorldConfig) -> bytes:
    records = []
    images = []
    for t in tasks:
        records.append(
            {
                "task_id": t.task_id,
                "scene_seed": int(t.scene.seed),
                "start": _pose(t.start),
                "n": int(t.n),
                "frames": [_frame_meta(f) for f in t.frames],
                "trajectories": t.trajectories.tolist() if t.trajectories is not None else None,
            }
        )
        images += [f.image for f in t.frames]
    return _pack("tasks", split, config, records, images)


def dumps_frames(frames: Sequence[W.Frame], split: str, config: W.WorldConfig) -> bytes:
    return _pack("frames", split, config, [_frame_meta(f) for f in frames], [f.image for f in frames])


def _pack(kind, split, config, records, images) -> bytes:
    shape = [config.channels, config.image_size, config.image_size]
    header = {
        "version": VERSION,
        "kind": kind,
        "split": split,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(config).items()},
        "image_shape": shape,
        "counts": {"records": len(records), "frames": len(images)},
        "records": records,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(im, dtype="<f4").tobytes() for im in images)
    return _HEAD.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def _unpack(blob: bytes):
    if len(blob) < _HEAD.size:
        raise CacheError("truncated", "file shorter than its preamble")
    magic, version, hlen = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise CacheError("bad-magic", "not an adaptdet dataset cache")
    if version != VERSION:
        raise CacheError("version", f"cache format v{version} unsupported (this build reads v{VERSION}); regenerate it with gen-data")
    header = json.loads(blob[_HEAD.size : _HEAD.size + hlen].decode())
    shape = tuple(header["image_shape"])
    count = header["counts"]["frames"]
    payload = blob[_HEAD.size + hlen :]
    want = 4 * count * int(np.prod(shape))
    if len(payload) != want:
        raise CacheError("payload-length", f"expected {want} image bytes, found {len(payload)}")
    images = np.frombuffer(payload, dtype="<f4").reshape((count,) + shape).astype(np.float64)
    return header, images


def world_config(header: dict) -> W.WorldConfig:
    cfg = dict(header["config"])
    for k, v in cfg.items():
        if isinstance(v, list):
            cfg[k] = tuple(v)
    return W.WorldConfig(**cfg)


def loads(blob: bytes) -> tuple[dict, list]:
    """``(header, items)``: TaskInstances for a task cache, Frames for a frame cache."""
    header, images = _unpack(blob)
    at = 0
    if header["kind"] == "frames":
        out = []
        for rec in header["records"]:
            out.append(W.Frame(images[at], tuple(_unann(a) for a in rec["annotations"]), _unpose(rec["pose"])))
            at += 1
        return header, out
    cfg = world_config(header)
    tasks = []
    for rec in header["records"]:
        frames = []
        for fm in rec["frames"]:
            frames.append(W.Frame(images[at], tuple(_unann(a) for a in fm["annotations"]), _unpose(fm["pose"])))
            at += 1
        scene = W.generate_scene(rec["scene_seed"], cfg)
        traj = None if rec["trajectories"] is None else np.asarray(rec["trajectories"], dtype=np.int64)
        tasks.append(
            W.TaskInstance(
                task_id=rec["task_id"],
                scene=scene,
                start=_unpose(rec["start"]),
                n=rec["n"],
                poses=[f.pose for f in frames],
                frames=frames,
                trajectories=traj,
            )
        )
    return header, tasks


def save(path, blob: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(blob)


def load(path) -> tuple[dict, list]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise CacheError("missing", f"no dataset cache at {path}; run gen-data first") from None
    return loads(blob)
