"""Desk-scale 2-D tabletop: state, tasks, kinematic dynamics, rendering, expert.

Coordinates live in the unit square with y pointing down (image rows). The
desk has a fixed ring of named *sites* (unlabelled grey pads); instructions
refer to sites by name, so which pad is "the lamp" is knowledge that comes
from experience rather than from pixels.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ExpertFailure

TASK_TYPES = ("Reach", "PickPlace", "PlaceInBox", "Push")

SITE_NAMES = (
    "lamp stove shelf drawer mug plate bowl tray rack hook mat towel basket clock radio "
    "phone mouse monitor speaker printer stapler marker sponge blender oven fridge pantry "
    "cabinet counter door stool bench sofa pillow blanket mirror frame jar cup glass fork "
    "whisk scale charger cable router remote wallet"
).split()

TRAIN_COLORS = ("red", "lime", "blue", "orange", "purple", "cyan")
HELDOUT_COLORS = ("yellow", "pink")
COLORS = TRAIN_COLORS + HELDOUT_COLORS

PALETTE = {
    "background": (30, 30, 30),
    "pad": (70, 70, 70),
    "box": (150, 110, 60),
    "effector": (235, 235, 235),
    "effector_closed": (175, 175, 175),
    "hand": (224, 172, 105),
    "red": (220, 40, 40),
    "lime": (60, 200, 60),
    "blue": (50, 90, 230),
    "orange": (240, 140, 20),
    "purple": (150, 60, 200),
    "cyan": (40, 210, 210),
    "yellow": (235, 225, 40),
    "pink": (240, 110, 180),
}

TEMPLATES = {
    "Reach": "touch the {site}",
    "PickPlace": "place the {color} cube on the {site}",
    "PlaceInBox": "put the {color} ball in the box by the {site}",
    "Push": "push the {color} block towards the {site}",
}
# Human narrations describe the action but not the object colour.
NARRATIONS = {
    "Reach": "touch the {site}",
    "PickPlace": "place the cube on the {site}",
    "PlaceInBox": "put the ball in the box by the {site}",
    "Push": "push the block towards the {site}",
}
TASK_SHAPE = {"PickPlace": "rect", "PlaceInBox": "disc", "Push": "rect"}

CENTER = np.array([0.5, 0.5])
SITE_RADII = (0.34, 0.44)
PAD_RADIUS = 0.035
OBJ_SIZE = 0.05
BOX_HALF = 0.07
EFFECTOR_RADIUS = 0.025
HAND_RADIUS = 0.04
MAX_SPEED = 0.07
GRASP_RADIUS = 0.07
PUSH_RADIUS = 0.06
SUCCESS_RADIUS = 0.06
SPAWN_REGIONS = {"center": (0.0, 0.12), "ring": (0.14, 0.24)}
DISTRACTOR_REGION = (0.0, 0.26)
MIN_SEPARATION = 0.15  # > 2 * OBJ_SIZE * sqrt(2): squares cannot touch


def _site_positions() -> np.ndarray:
    n = len(SITE_NAMES)
    ang = 2 * math.pi * np.arange(n) / n
    rad = np.array([SITE_RADII[i % 2] for i in range(n)])
    return np.column_stack((CENTER[0] + rad * np.cos(ang), CENTER[1] + rad * np.sin(ang)))


SITE_POS = _site_positions()


def site_index(name: str) -> int:
    return SITE_NAMES.index(name)


@dataclass
class ObjectState:
    shape: str          # "disc" | "rect" | "box"
    x: float
    y: float
    size: float         # radius or half-extent
    color: str
    held: bool = False
    pushable: bool = False
    graspable: bool = True
    yaw: float = 0.0

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class WorldState:
    effector: np.ndarray                 # x, y, gripper in [0, 1], yaw
    objects: list[ObjectState]
    targets: list[tuple[float, float, float]]  # goal regions (x, y, radius)
    step_count: int = 0

    def copy(self) -> "WorldState":
        return WorldState(self.effector.copy(), [replace(o) for o in self.objects],
                          list(self.targets), self.step_count)

    @property
    def held(self) -> ObjectState | None:
        return next((o for o in self.objects if o.held), None)

    @property
    def gripper_closed(self) -> bool:
        return bool(self.effector[2] >= 0.5)


@dataclass(frozen=True)
class TaskSpec:
    task_type: str
    colors: tuple[str, ...] = TRAIN_COLORS
    sites: tuple[int, ...] = tuple(range(len(SITE_NAMES)))
    spawn_region: str = "center"
    distractors: int = 0
    success_radius: float = SUCCESS_RADIUS

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"unknown task type {self.task_type!r}")
        if self.spawn_region not in SPAWN_REGIONS:
            raise ValueError(f"unknown spawn region {self.spawn_region!r}")

    @property
    def template(self) -> str:
        return TEMPLATES[self.task_type]

    def instruction(self, color: str, site: int) -> str:
        return self.template.format(color=color, site=SITE_NAMES[site])


@dataclass
class Task:
    spec: TaskSpec
    color: str
    site: int
    instruction: str

    @property
    def goal(self) -> np.ndarray:
        return SITE_POS[self.site].copy()

    @property
    def target_object(self) -> int | None:
        return None if self.spec.task_type == "Reach" else 0


# ------------------------------------------------------------------ spawn


def _sample_in_annulus(rng, lo, hi):
    r = math.sqrt(rng.uniform(lo * lo, hi * hi))
    a = rng.uniform(0, 2 * math.pi)
    return CENTER + r * np.array([math.cos(a), math.sin(a)])


def generate_task(spec: TaskSpec, seed: int, color: str | None = None,
                  site: int | None = None) -> tuple[WorldState, Task]:
    """Deterministic initial state and task for ``seed``."""
    rng = np.random.default_rng(seed)
    color = color if color is not None else spec.colors[rng.integers(len(spec.colors))]
    site = site if site is not None else int(spec.sites[rng.integers(len(spec.sites))])
    objects: list[ObjectState] = []
    placed: list[np.ndarray] = []
    if spec.task_type != "Reach":
        p = _sample_in_annulus(rng, *SPAWN_REGIONS[spec.spawn_region])
        objects.append(ObjectState(TASK_SHAPE[spec.task_type], float(p[0]), float(p[1]), OBJ_SIZE,
                                   color, pushable=spec.task_type == "Push",
                                   graspable=spec.task_type != "Push"))
        placed.append(p)
    if spec.task_type == "PlaceInBox":
        g = SITE_POS[site]
        objects.append(ObjectState("box", float(g[0]), float(g[1]), BOX_HALF, "box", graspable=False))
    others = [c for c in COLORS if c != color]
    for _ in range(spec.distractors):
        for _attempt in range(1000):
            p = _sample_in_annulus(rng, *DISTRACTOR_REGION)
            if all(np.linalg.norm(p - q) >= MIN_SEPARATION for q in placed):
                break
        else:
            raise ExpertFailure("could not place distractor")
        c = others[rng.integers(len(others))]
        shape = ("disc", "rect")[int(rng.integers(2))]
        objects.append(ObjectState(shape, float(p[0]), float(p[1]), OBJ_SIZE, c))
        placed.append(p)
    eff = rng.uniform(0.15, 0.85, size=2)
    state = WorldState(np.array([eff[0], eff[1], 0.0, 0.0]), objects,
                       [(float(SITE_POS[site][0]), float(SITE_POS[site][1]), spec.success_radius)])
    return state, Task(spec, color, site, spec.instruction(color, site))


# --------------------------------------------------------------- dynamics


def step(state: WorldState, action) -> WorldState:
    """Kinematic update: move toward the commanded pose with clipped speed."""
    a = np.asarray(action, dtype=np.float64)
    s = state.copy()
    pos = s.effector[:2].copy()
    target = np.clip(a[:2], 0.0, 1.0)
    delta = target - pos
    dist = float(np.linalg.norm(delta))
    if dist > MAX_SPEED:
        delta *= MAX_SPEED / dist
    new_pos = pos + delta
    was_closed = s.gripper_closed
    grip = float(np.clip(a[2], 0.0, 1.0))
    yaw = float(s.effector[3] + np.clip(a[3] - s.effector[3], -0.2, 0.2))
    s.effector = np.array([new_pos[0], new_pos[1], grip, yaw])
    closed = s.gripper_closed
    held = s.held
    if held is not None:
        held.x, held.y = float(new_pos[0]), float(new_pos[1])
        if not closed:
            held.held = False
    elif closed and not was_closed:
        cands = [(np.linalg.norm(o.pos - new_pos), i) for i, o in enumerate(s.objects)
                 if o.graspable and np.linalg.norm(o.pos - new_pos) <= GRASP_RADIUS]
        if cands:
            o = s.objects[min(cands)[1]]
            o.held = True
            o.x, o.y = float(new_pos[0]), float(new_pos[1])
    if not closed:
        # contact is judged before the move, so approaching never shoves the block away
        for o in s.objects:
            if o.pushable and np.linalg.norm(o.pos - pos) <= PUSH_RADIUS:
                o.x = float(np.clip(o.x + delta[0], 0.0, 1.0))
                o.y = float(np.clip(o.y + delta[1], 0.0, 1.0))
    s.step_count += 1
    return s


def is_success(state: WorldState, task: Task) -> bool:
    """Task predicate; a pure function of the state."""
    goal = task.goal
    r = task.spec.success_radius
    tt = task.spec.task_type
    if tt == "Reach":
        return bool(np.linalg.norm(state.effector[:2] - goal) <= r)
    obj = state.objects[0]
    if tt == "PlaceInBox":
        inside = abs(obj.x - goal[0]) <= BOX_HALF - 0.01 and abs(obj.y - goal[1]) <= BOX_HALF - 0.01
        return bool(inside and not obj.held)
    return bool(np.linalg.norm(obj.pos - goal) <= r and not obj.held)


# --------------------------------------------------------------- rendering


def _pixel_grid(width, height):
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    return xs[None, :], ys[:, None]


def shape_mask(obj: ObjectState, width: int, height: int, size: float | None = None) -> np.ndarray:
    xs, ys = _pixel_grid(width, height)
    r = obj.size if size is None else size
    if obj.shape == "disc":
        return (xs - obj.x) ** 2 + (ys - obj.y) ** 2 <= r * r
    inside = (np.abs(xs - obj.x) <= r) & (np.abs(ys - obj.y) <= r)
    if obj.shape == "box":
        inner = (np.abs(xs - obj.x) <= r - 1.5 / width) & (np.abs(ys - obj.y) <= r - 1.5 / height)
        return inside & ~inner
    return inside


def disc_mask(x, y, r, width, height) -> np.ndarray:
    xs, ys = _pixel_grid(width, height)
    return (xs - x) ** 2 + (ys - y) ** 2 <= r * r


@functools.lru_cache(maxsize=16)
def _backdrop(width: int, height: int, pads: bool) -> np.ndarray:
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = PALETTE["background"]
    if pads:
        for x, y in SITE_POS:
            img[disc_mask(x, y, PAD_RADIUS, width, height)] = PALETTE["pad"]
    img.flags.writeable = False
    return img


def render(state: WorldState | None, width: int = 48, height: int = 48, hand: bool = False,
           pads: bool = True) -> np.ndarray:
    """Rasterise to an (height, width, 3) uint8 frame. ``hand`` draws a human hand cursor."""
    if state is None:
        img = np.empty((height, width, 3), dtype=np.uint8)
        img[:] = PALETTE["background"]
        return img
    img = _backdrop(width, height, pads).copy()
    for o in state.objects:
        if o.shape == "box":
            img[shape_mask(o, width, height)] = PALETTE["box"]
    for o in state.objects:
        if o.shape != "box" and not o.held:
            img[shape_mask(o, width, height)] = PALETTE[o.color]
    ex, ey = state.effector[:2]
    if hand:
        img[disc_mask(ex, ey, HAND_RADIUS, width, height)] = PALETTE["hand"]
    else:
        key = "effector_closed" if state.gripper_closed else "effector"
        img[disc_mask(ex, ey, EFFECTOR_RADIUS, width, height)] = PALETTE[key]
    for o in state.objects:
        if o.held:
            img[shape_mask(o, width, height, o.size * 0.8)] = PALETTE[o.color]
    return img


# ----------------------------------------------------------------- expert


@dataclass
class RobotObservation:
    frames: dict[str, np.ndarray]
    proprio: np.ndarray
    instruction: str


@dataclass
class Demo:
    instruction: str
    observations: list[RobotObservation]
    actions: np.ndarray          # (T, dof)
    success: bool
    task_type: str = ""
    site: int = -1
    states: list[WorldState] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.observations)


def observe(state: WorldState, task: Task, views=("top",), width=48, height=48) -> RobotObservation:
    frame = render(state, width, height)
    return RobotObservation({v: frame for v in views}, state.effector.copy(), task.instruction)


def expert_action(state: WorldState, task: Task, goal: np.ndarray | None = None,
                  tol: float = 0.02) -> np.ndarray:
    """Waypoint controller: approach -> grasp -> carry -> release (absolute targets)."""
    goal = task.goal if goal is None else goal
    pos = state.effector[:2]
    tt = task.spec.task_type
    if tt == "Reach":
        return np.array([goal[0], goal[1], 0.0, 0.0])
    obj = state.objects[0]
    if tt == "Push":
        # the block sticks to an open gripper within PUSH_RADIUS, keeping its offset
        if np.linalg.norm(obj.pos - pos) > PUSH_RADIUS:
            return np.array([obj.x, obj.y, 0.0, 0.0])
        tgt = goal + (pos - obj.pos)
        return np.array([tgt[0], tgt[1], 0.0, 0.0])
    if not obj.held:
        if np.linalg.norm(obj.pos - goal) <= tol and not state.gripper_closed:
            return np.array([pos[0], pos[1], 0.0, 0.0])
        close = np.linalg.norm(obj.pos - pos) <= tol
        return np.array([obj.x, obj.y, 1.0 if close else 0.0, 0.0])
    if np.linalg.norm(goal - pos) > tol:
        return np.array([goal[0], goal[1], 1.0, 0.0])
    return np.array([goal[0], goal[1], 0.0, 0.0])


def scripted_expert(state: WorldState, task: Task, views=("top",), max_steps: int = 60,
                    width: int = 48, height: int = 48, goal: np.ndarray | None = None,
                    keep_states: bool = False) -> Demo:
    """Roll the expert until the task predicate holds; raises ExpertFailure otherwise."""
    s = state.copy()
    obs, acts, states = [], [], [s]
    for _ in range(max_steps):
        obs.append(observe(s, task, views, width, height))
        a = expert_action(s, task, goal)
        acts.append(a)
        s = step(s, a)
        states.append(s)
        if goal is None and is_success(s, task):
            return Demo(task.instruction, obs, np.array(acts), True, task.spec.task_type,
                        task.site, states if keep_states else [])
        if goal is not None and _reached(s, task, goal):
            return Demo(task.instruction, obs, np.array(acts), True, task.spec.task_type,
                        task.site, states if keep_states else [])
    raise ExpertFailure(f"expert did not finish {task.instruction!r} in {max_steps} steps")


def _reached(state: WorldState, task: Task, goal: np.ndarray) -> bool:
    if task.spec.task_type == "Reach":
        return bool(np.linalg.norm(state.effector[:2] - goal) <= 0.02)
    obj = state.objects[0]
    return bool(np.linalg.norm(obj.pos - goal) <= 0.03 and not obj.held)
