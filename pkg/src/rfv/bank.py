"""Video bank: demonstration clips with narrations and mid-level annotations.

A bank is an append-only collection of :class:`BankEntry` records. On disk it
is a directory holding ``bank.jsonl`` (one entry per line), ``meta.json`` and
a ``blobs/`` folder of binary payloads (see :mod:`rfv.blob`).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import kernels
from .blob import VERSION as BLOB_VERSION
from .blob import read_blob, write_blob
from .errors import (
    AreaMismatch,
    CorruptManifest,
    DuplicateId,
    FormatVersionMismatch,
    InvariantViolation,
)

MANIFEST = "bank.jsonl"
META = "meta.json"
FORMAT_VERSION = 1
TRAJ_MARGIN = 0.05


# --------------------------------------------------------------------------- RLE


def encode_rle(bitmap) -> list[int]:
    """Row-major run lengths, alternating background/foreground, background first."""
    bm = np.asarray(bitmap)
    if bm.ndim != 2 or bm.size == 0:
        raise ValueError("bitmap must be a non-empty 2-D array")
    flat = np.ascontiguousarray((bm != 0).ravel(), dtype=np.uint8)
    return [int(r) for r in kernels.rle_encode(flat)]


def decode_rle(runs, width: int, height: int) -> np.ndarray:
    r = np.ascontiguousarray(np.asarray(runs, dtype=np.int64).ravel())
    if r.size == 0 or (r < 0).any() or int(r.sum()) != width * height:
        raise AreaMismatch(
            f"runs sum to {int(r.sum()) if r.size else 0}, expected {width}*{height}={width * height}"
        )
    return kernels.rle_decode(r, width * height).reshape(height, width)


# ------------------------------------------------------------------------ types


@dataclass(frozen=True)
class Frame:
    width: int
    height: int
    data: np.ndarray  # (height, width, channels) uint8
    channels: int = 3

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvariantViolation("frame-dims", "width and height must be >= 1")
        if self.data.size != self.width * self.height * self.channels:
            raise InvariantViolation("frame-data", "data length != width*height*channels")


@dataclass(frozen=True)
class VideoClip:
    clip_id: str
    frames: np.ndarray  # (num_frames, height, width, 3) uint8
    fps: float
    view_id: str = ""

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def height(self) -> int:
        return int(self.frames.shape[1])

    @property
    def width(self) -> int:
        return int(self.frames.shape[2])

    def frame(self, i: int) -> Frame:
        return Frame(self.width, self.height, self.frames[i])


@dataclass(frozen=True)
class Narration:
    text: str
    indoor: bool = True


@dataclass(frozen=True)
class AffordanceMask:
    keyframe_index: int
    width: int
    height: int
    runs: tuple[int, ...]

    @classmethod
    def from_bitmap(cls, bitmap, keyframe_index: int) -> "AffordanceMask":
        bm = np.asarray(bitmap)
        return cls(int(keyframe_index), int(bm.shape[1]), int(bm.shape[0]), tuple(encode_rle(bm)))

    def bitmap(self) -> np.ndarray:
        return decode_rle(self.runs, self.width, self.height)


@dataclass(frozen=True)
class HandTrajectory:
    points: np.ndarray  # (n, 3): frame_index, x, y
    smoothed: bool = False

    @property
    def frames(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, 1:3]


@dataclass(frozen=True)
class BankEntry:
    entry_id: str
    narration: Narration
    clip: VideoClip
    mask: AffordanceMask
    trajectory: HandTrajectory
    embedding: np.ndarray | None = None
    frame_features: np.ndarray | None = None  # (num_frames, tokens, dim)

    def __post_init__(self):
        # Stored precision is f32 so that save/load is bit-exact.
        if self.embedding is not None:
            object.__setattr__(self, "embedding", np.asarray(self.embedding, dtype=np.float32))
        if self.frame_features is not None:
            object.__setattr__(
                self, "frame_features", np.asarray(self.frame_features, dtype=np.float32)
            )


def validate_entry(entry: BankEntry, embedding_dim: int | None = None,
                   margin: float = TRAJ_MARGIN) -> None:
    """Raise InvariantViolation naming the first failing invariant."""
    if not entry.entry_id:
        raise InvariantViolation("entry-id", "empty id")
    if not entry.narration.text.strip():
        raise InvariantViolation("narration-text", "empty narration")
    clip = entry.clip
    fr = np.asarray(clip.frames)
    if fr.ndim != 4 or fr.shape[-1] != 3 or fr.dtype != np.uint8:
        raise InvariantViolation("clip-frames", f"frames must be (n,h,w,3) uint8, got {fr.shape}")
    if clip.num_frames < 2:
        raise InvariantViolation("clip-frames", "a clip needs at least 2 frames")
    if clip.width < 1 or clip.height < 1:
        raise InvariantViolation("frame-dims")
    if not clip.fps > 0:
        raise InvariantViolation("clip-fps", f"fps={clip.fps}")

    m = entry.mask
    if (m.width, m.height) != (clip.width, clip.height):
        raise InvariantViolation("mask-dims", "mask dims differ from clip dims")
    runs = np.asarray(m.runs, dtype=np.int64)
    if runs.size == 0 or (runs < 0).any() or int(runs.sum()) != m.width * m.height:
        raise InvariantViolation("mask-area", "sum(runs) != width*height")
    if not runs[1::2].sum() > 0:
        raise InvariantViolation("mask-empty", "mask has no foreground")
    if not 0 <= m.keyframe_index < clip.num_frames:
        raise InvariantViolation("mask-keyframe", f"keyframe {m.keyframe_index} out of range")

    pts = np.asarray(entry.trajectory.points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
        raise InvariantViolation("traj-points", "need >= 2 (frame, x, y) points")
    if not np.all(np.isfinite(pts)):
        raise InvariantViolation("traj-finite")
    if not np.all(np.diff(pts[:, 0]) > 0):
        raise InvariantViolation("traj-monotonic", "frame indices must strictly increase")
    mx, my = margin * clip.width, margin * clip.height
    if (pts[:, 1].min() < -mx or pts[:, 1].max() > clip.width + mx
            or pts[:, 2].min() < -my or pts[:, 2].max() > clip.height + my):
        raise InvariantViolation("traj-bounds", "trajectory leaves the frame margin")

    if entry.embedding is not None:
        e = entry.embedding
        if e.ndim != 1 or not np.all(np.isfinite(e)):
            raise InvariantViolation("embedding-finite")
        if embedding_dim is not None and e.shape[0] != embedding_dim:
            raise InvariantViolation(
                "embedding-dim", f"embedding dim {e.shape[0]} != bank dim {embedding_dim}"
            )
    if entry.frame_features is not None:
        ff = entry.frame_features
        if ff.ndim != 3 or ff.shape[0] != clip.num_frames:
            raise InvariantViolation("features-shape", "features must be (num_frames, tokens, dim)")


# ------------------------------------------------------------------------- bank


@dataclass
class Bank:
    embedding_dim: int | None = None
    _entries: dict[str, BankEntry] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[BankEntry]:
        return iter(self._entries.values())

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def ids(self) -> list[str]:
        return list(self._entries)

    def get_entry(self, entry_id: str) -> BankEntry:
        return self._entries[entry_id]

    def add_entry(self, entry: BankEntry) -> str:
        if entry.entry_id in self._entries:
            raise DuplicateId(entry.entry_id)
        validate_entry(entry, self.embedding_dim)
        if entry.embedding is not None and self.embedding_dim is None:
            self.embedding_dim = int(entry.embedding.shape[0])
        self._entries[entry.entry_id] = entry
        return entry.entry_id


def add_entry(bank: Bank, entry: BankEntry) -> str:
    return bank.add_entry(entry)


def filter_indoor(bank: Bank) -> Bank:
    """A new bank holding only indoor entries; entries are shared, not copied."""
    view = Bank(bank.embedding_dim)
    for e in bank:
        if e.narration.indoor:
            view._entries[e.entry_id] = e
    return view


# ----------------------------------------------------------------- persistence


def entry_metadata(entry: BankEntry) -> dict:
    """JSON-ready metadata for an entry (no blob references)."""
    clip = entry.clip
    return {
        "entry_id": entry.entry_id,
        "narration": {"text": entry.narration.text, "indoor": bool(entry.narration.indoor)},
        "clip": {
            "clip_id": clip.clip_id,
            "fps": float(clip.fps),
            "view_id": clip.view_id,
            "width": clip.width,
            "height": clip.height,
            "num_frames": clip.num_frames,
        },
        "mask": {
            "keyframe": entry.mask.keyframe_index,
            "width": entry.mask.width,
            "height": entry.mask.height,
            "runs": [int(r) for r in entry.mask.runs],
        },
        "trajectory": {
            "points": [[int(p[0]) if float(p[0]).is_integer() else float(p[0]), float(p[1]), float(p[2])]
                       for p in np.asarray(entry.trajectory.points, dtype=np.float64)],
            "smoothed": bool(entry.trajectory.smoothed),
        },
    }


def save_bank(bank: Bank, path: str | os.PathLike) -> Path:
    root = Path(path)
    blobs = root / "blobs"
    blobs.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, e in enumerate(bank):
        rec = entry_metadata(e)
        clip_name = f"blobs/{i:06d}_clip.rfvb"
        write_blob(root / clip_name, e.clip.frames)
        rec["clip"]["blob"] = clip_name
        if e.embedding is not None:
            name = f"blobs/{i:06d}_emb.rfvb"
            write_blob(root / name, e.embedding)
            rec["embedding_blob"] = name
        if e.frame_features is not None:
            name = f"blobs/{i:06d}_feat.rfvb"
            write_blob(root / name, e.frame_features)
            rec["features_blob"] = name
            rec["features_shape"] = list(e.frame_features.shape)
        lines.append(json.dumps(rec, separators=(",", ":")))
    meta = {"format_version": FORMAT_VERSION, "blob_version": BLOB_VERSION,
            "embedding_dim": bank.embedding_dim, "count": len(bank)}
    (root / META).write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    (root / MANIFEST).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    return root / MANIFEST


def _entry_from_record(rec: dict, root: Path, lineno: int, embedding_dim: int | None) -> BankEntry:
    try:
        c = rec["clip"]
        w, h, nf = int(c["width"]), int(c["height"]), int(c["num_frames"])
        raw = read_blob(root / c["blob"], lineno)
        if raw.dtype != np.uint8 or raw.size != nf * h * w * 3:
            raise CorruptManifest(f"clip blob holds {raw.size} values, expected {nf * h * w * 3}", lineno)
        clip = VideoClip(c.get("clip_id", rec["entry_id"]), raw.reshape(nf, h, w, 3),
                         float(c["fps"]), c.get("view_id", ""))
        m = rec["mask"]
        mask = AffordanceMask(int(m["keyframe"]), int(m["width"]), int(m["height"]),
                              tuple(int(r) for r in m["runs"]))
        t = rec["trajectory"]
        traj = HandTrajectory(np.asarray(t["points"], dtype=np.float64).reshape(-1, 3),
                              bool(t["smoothed"]))
        emb = None
        if rec.get("embedding_blob"):
            emb = read_blob(root / rec["embedding_blob"], lineno)
            if emb.dtype != np.float32:
                raise CorruptManifest("embedding blob must be f32", lineno)
        feats = None
        if rec.get("features_blob"):
            feats = read_blob(root / rec["features_blob"], lineno)
            shape = tuple(int(s) for s in rec["features_shape"])
            if feats.dtype != np.float32 or feats.size != int(np.prod(shape)):
                raise CorruptManifest("features blob does not match features_shape", lineno)
            feats = feats.reshape(shape)
        n = rec["narration"]
        return BankEntry(rec["entry_id"], Narration(n["text"], bool(n["indoor"])),
                         clip, mask, traj, emb, feats)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptManifest(f"malformed entry ({exc!r})", lineno) from exc


def load_bank(path: str | os.PathLike) -> Bank:
    root = Path(path)
    if root.is_file():
        root = root.parent
    try:
        meta = json.loads((root / META).read_text(encoding="utf-8"))
        text = (root / MANIFEST).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise CorruptManifest(f"not a bank directory: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptManifest(f"{META}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"bank format {meta.get('format_version')}, expected {FORMAT_VERSION}"
        )
    bank = Bank(meta.get("embedding_dim"))
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptManifest(f"invalid JSON ({exc.msg})", lineno) from exc
        entry = _entry_from_record(rec, root, lineno, bank.embedding_dim)
        try:
            bank.add_entry(entry)
        except (InvariantViolation, DuplicateId) as exc:
            raise CorruptManifest(f"entry fails validation: {exc}", lineno) from exc
    if meta.get("count") is not None and meta["count"] != len(bank):
        raise CorruptManifest(f"manifest has {len(bank)} entries, meta says {meta['count']}")
    return bank
