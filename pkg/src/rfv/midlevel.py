"""Mid-level annotations from detector/segmenter outputs.

Given per-frame hand boxes and object segmentation bitmaps for a clip, this
module finds the hand-object contact keyframe, cuts the affordance mask out of
the keyframe bitmap, and turns the post-contact hand boxes into a smoothed
pixel trajectory.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solveh_banded

from . import kernels
from .bank import AffordanceMask, BankEntry, HandTrajectory, Narration, VideoClip
from .blob import read_blob
from .errors import (
    CorruptManifest,
    EmptyBitmap,
    InsufficientPoints,
    NoContactFound,
    NonMonotonicTime,
    TooFewPoints,
)

DEFAULT_IOU = 0.1
DEFAULT_SMOOTHING = 1.0


class NoOverlapWarning(UserWarning):
    """The hand box touches no object component; the largest one was used."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass
class DetectionTrack:
    hand_boxes: list[BoundingBox | None]
    object_bitmaps: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.object_bitmaps:
            self.object_bitmaps = [None] * len(self.hand_boxes)
        if len(self.object_bitmaps) != len(self.hand_boxes):
            raise ValueError("hand_boxes and object_bitmaps must have equal length")

    def __len__(self) -> int:
        return len(self.hand_boxes)


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    # fraction of each unit pixel [p, p+1) covered by the interval [lo, hi)
    p = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(p + 1.0, hi) - np.maximum(p, lo), 0.0, 1.0)


def box_overlap(box: BoundingBox, bitmap: np.ndarray) -> float:
    """Foreground area of ``bitmap`` inside ``box`` (fractional pixel coverage)."""
    bm = (np.asarray(bitmap) != 0).astype(np.float64)
    cy = _coverage(box.y_min, box.y_max, bm.shape[0])
    cx = _coverage(box.x_min, box.x_max, bm.shape[1])
    return float(cy @ bm @ cx)


def detect_contact_keyframe(track: DetectionTrack, iou_threshold: float = DEFAULT_IOU) -> int:
    """First frame whose hand box is covered by the object for at least ``iou_threshold``."""
    usable = False
    for i, (box, bm) in enumerate(zip(track.hand_boxes, track.object_bitmaps)):
        if box is None or bm is None:
            continue
        usable = True
        if box_overlap(box, bm) / box.area >= iou_threshold:
            return i
    raise NoContactFound("no frame has hand/object overlap" if usable
                         else "no frame has both a hand box and an object bitmap")


def bbox_centroid(box: BoundingBox) -> tuple[float, float]:
    return ((box.x_min + box.x_max) / 2.0, (box.y_min + box.y_max) / 2.0)


def raw_trajectory(track: DetectionTrack, keyframe: int) -> HandTrajectory:
    pts = [(i, *bbox_centroid(b)) for i, b in enumerate(track.hand_boxes)
           if i >= keyframe and b is not None]
    if len(pts) < 2:
        raise InsufficientPoints(f"{len(pts)} hand boxes at/after keyframe {keyframe}")
    return HandTrajectory(np.asarray(pts, dtype=np.float64), smoothed=False)


# ---------------------------------------------------------------- smoothing


def _reinsch(t: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Knot values and second derivatives of the cubic smoothing spline.

    Minimises sum (y_i - f(t_i))^2 + lam * integral f''^2 with natural ends.
    Returns (g, gamma) where gamma has zeros at both ends.
    """
    n = t.size
    h = np.diff(t)
    # Q is n x (n-2), R is (n-2) x (n-2) tridiagonal.
    inv = 1.0 / h
    q_lo = inv[:-1]               # Q[j, j]
    q_mid = -inv[:-1] - inv[1:]   # Q[j+1, j]
    q_hi = inv[1:]                # Q[j+2, j]
    m = n - 2
    r_diag = (h[:-1] + h[1:]) / 3.0
    r_off = h[1:-1] / 6.0
    # Q^T Q is pentadiagonal; assemble in upper banded form.
    ab = np.zeros((3, m))
    ab[2] = r_diag + lam * (q_lo**2 + q_mid**2 + q_hi**2)
    if m > 1:
        ab[1, 1:] = r_off + lam * (q_mid[:-1] * q_lo[1:] + q_hi[:-1] * q_mid[1:])
    if m > 2:
        ab[0, 2:] = lam * (q_hi[:-2] * q_lo[2:])
    qty = q_lo * y[:-2] + q_mid * y[1:-1] + q_hi * y[2:]
    gamma_in = solveh_banded(ab, qty)
    qg = np.zeros(n)
    qg[:-2] += q_lo * gamma_in
    qg[1:-1] += q_mid * gamma_in
    qg[2:] += q_hi * gamma_in
    g = y - lam * qg
    gamma = np.concatenate(([0.0], gamma_in, [0.0]))
    return g, gamma


def _evaluate(t: np.ndarray, g: np.ndarray, gamma: np.ndarray, s: np.ndarray) -> np.ndarray:
    i = np.clip(np.searchsorted(t, s, side="right") - 1, 0, t.size - 2)
    tl, tr = t[i], t[i + 1]
    h = tr - tl
    a, b = s - tl, tr - s
    return ((a * g[i + 1] + b * g[i]) / h
            - a * b / 6.0 * ((1.0 + a / h) * gamma[i + 1] + (1.0 + b / h) * gamma[i]))


def smoothing_spline(t, y, smoothing: float, at) -> np.ndarray:
    """Evaluate the 1-D cubic smoothing spline of (t, y) at points ``at``."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g, gamma = _reinsch(t, y, float(smoothing))
    return _evaluate(t, g, gamma, np.asarray(at, dtype=np.float64))


def smooth_trajectory(traj: HandTrajectory, smoothing: float = DEFAULT_SMOOTHING) -> HandTrajectory:
    """Fit x(t), y(t) as cubic smoothing splines and resample every integer frame."""
    pts = np.asarray(traj.points, dtype=np.float64)
    if pts.shape[0] < 4:
        raise TooFewPoints(f"cubic smoothing needs >= 4 points, got {pts.shape[0]}")
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    t = pts[:, 0]
    if not np.all(np.diff(t) > 0):
        raise NonMonotonicTime("frame indices must strictly increase")
    frames = np.arange(math.ceil(t[0]), math.floor(t[-1]) + 1, dtype=np.float64)
    x = smoothing_spline(t, pts[:, 1], smoothing, frames)
    y = smoothing_spline(t, pts[:, 2], smoothing, frames)
    return HandTrajectory(np.column_stack((frames, x, y)), smoothed=True)


def roughness(values) -> float:
    """Sum of squared second differences along the first axis."""
    v = np.asarray(values, dtype=np.float64)
    return float(np.sum(np.diff(v, n=2, axis=0) ** 2))


# ------------------------------------------------------------ affordance mask


def select_component(bitmap: np.ndarray, box: BoundingBox) -> tuple[np.ndarray, int, bool]:
    """Connected component of ``bitmap`` with the largest overlap with ``box``.

    Returns (component bitmap, component id, fell_back). Ids follow raster
    order of each component's first pixel; ties go to the smaller id. When no
    component touches the box the largest component is returned and
    ``fell_back`` is True.
    """
    bm = np.ascontiguousarray(np.asarray(bitmap) != 0, dtype=np.uint8)
    if not bm.any():
        raise EmptyBitmap("object bitmap has no foreground")
    labels, n = kernels.label_components(bm)
    cy = _coverage(box.y_min, box.y_max, bm.shape[0])
    cx = _coverage(box.x_min, box.x_max, bm.shape[1])
    weight = np.outer(cy, cx).ravel()
    flat = labels.ravel()
    overlap = np.bincount(flat, weights=weight, minlength=n + 1)[1:]
    fell_back = not overlap.max() > 0
    if fell_back:
        overlap = np.bincount(flat, minlength=n + 1)[1:].astype(np.float64)
    cid = int(np.argmax(overlap)) + 1  # argmax returns the first (smallest id) maximum
    return (labels == cid).astype(np.uint8), cid, fell_back


def build_affordance_mask(bitmap: np.ndarray, box: BoundingBox, keyframe: int) -> AffordanceMask:
    comp, cid, fell_back = select_component(bitmap, box)
    if fell_back:
        warnings.warn(f"hand box overlaps no object component at frame {keyframe}; "
                      f"using largest component {cid}", NoOverlapWarning, stacklevel=2)
    return AffordanceMask.from_bitmap(comp, keyframe)


@dataclass(frozen=True)
class MidLevel:
    keyframe: int
    mask: AffordanceMask
    trajectory: HandTrajectory
    mask_fallback: bool = False


def extract_midlevel(track: DetectionTrack, iou_threshold: float = DEFAULT_IOU,
                     smoothing: float = DEFAULT_SMOOTHING) -> MidLevel:
    """Keyframe, affordance mask and smoothed trajectory for one clip."""
    kf = detect_contact_keyframe(track, iou_threshold)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NoOverlapWarning)
        mask = build_affordance_mask(track.object_bitmaps[kf], track.hand_boxes[kf], kf)
    raw = raw_trajectory(track, kf)
    traj = smooth_trajectory(raw, smoothing) if len(raw.points) >= 4 else raw
    return MidLevel(kf, mask, traj, mask_fallback=bool(caught))


# ------------------------------------------------------------------ ingestion


def _read_u8(path: Path, size: int, lineno: int) -> np.ndarray:
    arr = read_blob(path, lineno)
    if arr.dtype != np.uint8 or arr.size != size:
        raise CorruptManifest(f"{path.name}: expected {size} u8 values, got {arr.size}", lineno)
    return arr


def load_detections(path: str | os.PathLike, iou_threshold: float = DEFAULT_IOU,
                    smoothing: float = DEFAULT_SMOOTHING) -> list[BankEntry]:
    """Read a detector-output JSON-lines file and build one bank entry per clip.

    Each line: ``clip_id, narration, indoor, view_id, fps, width, height,
    num_frames, clip_blob, frames: [{hand_box: [x0,y0,x1,y1]|null,
    object_blob: path|null}], embedding_blob?``. Blob paths are relative to
    the file's directory.
    """
    path = Path(path)
    root = path.parent
    entries = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise CorruptManifest(f"no such ingest file: {path}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            w, h, nf = int(rec["width"]), int(rec["height"]), int(rec["num_frames"])
            frames = _read_u8(root / rec["clip_blob"], nf * h * w * 3, lineno).reshape(nf, h, w, 3)
            if len(rec["frames"]) != nf:
                raise CorruptManifest(f"{len(rec['frames'])} frame records for {nf} frames", lineno)
            boxes, bitmaps = [], []
            for fr in rec["frames"]:
                hb = fr.get("hand_box")
                boxes.append(BoundingBox(*map(float, hb)) if hb else None)
                ob = fr.get("object_blob")
                bitmaps.append(_read_u8(root / ob, h * w, lineno).reshape(h, w) if ob else None)
            mid = extract_midlevel(DetectionTrack(boxes, bitmaps), iou_threshold, smoothing)
            emb = None
            if rec.get("embedding_blob"):
                emb = read_blob(root / rec["embedding_blob"], lineno)
            clip = VideoClip(rec["clip_id"], frames, float(rec.get("fps", 30.0)), rec.get("view_id", ""))
            entries.append(BankEntry(rec.get("entry_id", rec["clip_id"]),
                                     Narration(rec["narration"], bool(rec.get("indoor", True))),
                                     clip, mid.mask, mid.trajectory, emb))
        except json.JSONDecodeError as exc:
            raise CorruptManifest(f"invalid JSON ({exc.msg})", lineno) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptManifest(f"malformed detection record ({exc!r})", lineno) from exc
    return entries
