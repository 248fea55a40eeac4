"""Synthetic "human video" bank rendered from the same tabletop.

A hand cursor performs each task once; the rendered clip goes through the
regular mid-level pipeline (hand boxes + object silhouettes -> contact
keyframe, affordance mask, smoothed trajectory), exactly like ingested
detector output would.
"""

from __future__ import annotations

import math

import numpy as np

from ..bank import Bank, BankEntry, Narration, VideoClip
from ..errors import RfvError
from ..midlevel import BoundingBox, DetectionTrack, extract_midlevel
from ..retriever import EmbedderConfig, embed_text
from .world import (
    HAND_RADIUS,
    NARRATIONS,
    PAD_RADIUS,
    SITE_NAMES,
    SITE_POS,
    ObjectState,
    TaskSpec,
    WorldState,
    disc_mask,
    generate_task,
    render,
    shape_mask,
)

CLIP_FRAMES = 10
MAX_MOTION_FRAMES = 9
HAND_SPEED = 0.12
GOAL_NOISE = 0.035
BOX_JITTER = 0.5          # pixels
CONTACT_THRESHOLD = 0.3
WIDTH = HEIGHT = 48
FPS = 10.0


def _advance(p, target, speed):
    d = target - p
    n = float(np.linalg.norm(d))
    return target.copy() if n <= speed else p + d * (speed / n)


def _hand_path(start, waypoints, speed=HAND_SPEED):
    """Constant-speed polyline through ``waypoints``; returns positions and waypoint arrival frames."""
    pts = [np.asarray(start, dtype=np.float64)]
    arrivals = []
    for w in waypoints:
        w = np.asarray(w, dtype=np.float64)
        while np.linalg.norm(pts[-1] - w) > 1e-12:
            pts.append(_advance(pts[-1], w, speed))
        arrivals.append(len(pts) - 1)
    return pts, arrivals


def human_episode(spec: TaskSpec, site: int, rng: np.random.Generator,
                  width: int = WIDTH, height: int = HEIGHT):
    """Frames, detection track and true goal of one rendered hand demonstration.

    Returns None when the sampled motion does not fit in the clip.
    """
    state, task = generate_task(spec, int(rng.integers(2**31)), site=site)
    goal = np.clip(SITE_POS[site] + rng.normal(0.0, GOAL_NOISE, size=2), 0.05, 0.95)
    ang = rng.uniform(0, 2 * math.pi)
    if spec.task_type == "Reach":
        anchor = SITE_POS[site]
        dist = rng.uniform(0.3, 0.5)
        waypoints = [goal]
    else:
        anchor = state.objects[0].pos
        dist = rng.uniform(0.1, 0.2)
        waypoints = [anchor, goal]
    start = np.clip(anchor + dist * np.array([math.cos(ang), math.sin(ang)]), 0.05, 0.95)
    path, arrivals = _hand_path(start, waypoints)
    if len(path) - 1 > MAX_MOTION_FRAMES:
        return None
    path += [path[-1]] * (CLIP_FRAMES - len(path))
    grab = arrivals[0] if spec.task_type != "Reach" else None

    frames, boxes, bitmaps = [], [], []
    for i, p in enumerate(path):
        objs = [ObjectState(o.shape, o.x, o.y, o.size, o.color, o.held, o.pushable, o.graspable)
                for o in state.objects]
        if grab is not None and i >= grab:
            target = objs[0]
            target.x, target.y = float(p[0]), float(p[1])
            # carried objects are drawn on top of the hand; pushed ones stay full size
            target.held = spec.task_type != "Push"
        s = WorldState(np.array([p[0], p[1], 0.0, 0.0]), objs, [])
        frames.append(render(s, width, height, hand=True))
        if spec.task_type == "Reach":
            gx, gy = SITE_POS[site]
            bitmaps.append(disc_mask(gx, gy, PAD_RADIUS, width, height).astype(np.uint8))
        else:
            o = objs[0]
            bitmaps.append(shape_mask(ObjectState(o.shape, o.x, o.y, o.size, o.color), width, height)
                           .astype(np.uint8))
        jit = rng.normal(0.0, BOX_JITTER, size=2)
        cx, cy = p[0] * width + jit[0], p[1] * height + jit[1]
        rx, ry = HAND_RADIUS * width, HAND_RADIUS * height
        boxes.append(BoundingBox(cx - rx, cy - ry, cx + rx, cy + ry))
    return np.stack(frames), DetectionTrack(boxes, bitmaps), goal, task


def _start_in_mask_bbox(ml) -> bool:
    bm = ml.mask.bitmap()
    ys, xs = np.nonzero(bm)
    x, y = ml.trajectory.points[0, 1:3]
    return bool(xs.min() <= x <= xs.max() + 1 and ys.min() <= y <= ys.max() + 1)


def synthesize_human_bank(specs, n_per_task: int, seed: int = 0, embed_dim: int = 128,
                          view_id: str = "top", contact_threshold: float = CONTACT_THRESHOLD,
                          smoothing: float = 1.0, max_tries: int = 50) -> Bank:
    """``n_per_task`` entries per task spec; sites are assigned round-robin.

    Episodes whose contact cannot be detected, or whose trajectory start falls
    outside the affordance mask's bounding box, are re-sampled.
    """
    bank = Bank(embedding_dim=embed_dim)
    cfg = EmbedderConfig(embed_dim)
    for ti, spec in enumerate(specs):
        rng = np.random.default_rng([seed, ti])
        sites = list(spec.sites)
        tag = spec.task_type.lower()
        for j in range(n_per_task):
            site = sites[j % len(sites)]
            for _ in range(max_tries):
                ep = human_episode(spec, site, rng)
                if ep is None:
                    continue
                frames, track, goal, task = ep
                try:
                    ml = extract_midlevel(track, contact_threshold, smoothing)
                except RfvError:
                    continue
                if ml.mask_fallback or not _start_in_mask_bbox(ml):
                    continue
                break
            else:
                raise RuntimeError(f"could not synthesize an episode for {tag}/{SITE_NAMES[site]}")
            text = NARRATIONS[spec.task_type].format(site=SITE_NAMES[site])
            eid = f"{tag}-{SITE_NAMES[site]}-{j // len(sites):03d}"
            clip = VideoClip(f"clip-{eid}", frames, FPS, view_id)
            bank.add_entry(BankEntry(eid, Narration(text, True), clip, ml.mask, ml.trajectory,
                                     embedding=embed_text(text, cfg)))
    return bank
