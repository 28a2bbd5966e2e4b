"""Deterministic grid world: scenes, dynamics, ground-truth visibility, expert routes.

Coordinates are ``(x, y)`` cells with ``y`` growing southwards, so North is
``(0, -1)``. Rooms and object footprints are half-open cell rectangles
``[x0, x1) x [y0, y1)``.
"""
from __future__ import annotations

import enum
import json
import math
import random
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import kernels

Cell = tuple[int, int]

SCENE_FORMAT = "capfuzz-scene"
SCENE_VERSION = 1


class SceneGenerationError(RuntimeError):
    """Room packing or connectivity failed within the retry budget."""


class UnreachableGoalError(RuntimeError):
    """No 4-connected path exists between the requested cells."""


class Rect(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def contains(self, cell: Cell) -> bool:
        x, y = cell
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def cells(self) -> list[Cell]:
        return [
            (x, y)
            for y in range(int(self.y0), int(self.y1))
            for x in range(int(self.x0), int(self.x1))
        ]

    def expand(self, k: int) -> "Rect":
        return Rect(self.x0 - k, self.y0 - k, self.x1 + k, self.y1 + k)

    def intersects(self, other: "Rect") -> bool:
        return (
            self.x0 < other.x1
            and other.x0 < self.x1
            and self.y0 < other.y1
            and other.y0 < self.y1
        )


class Heading(enum.IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @property
    def vector(self) -> Cell:
        return _HEADING_VECTORS[self]

    def left(self) -> "Heading":
        return Heading((self - 1) % 4)

    def right(self) -> "Heading":
        return Heading((self + 1) % 4)


_HEADING_VECTORS = {
    Heading.NORTH: (0, -1),
    Heading.EAST: (1, 0),
    Heading.SOUTH: (0, 1),
    Heading.WEST: (-1, 0),
}


class Action(enum.Enum):
    MOVE_FORWARD = "MoveForward"
    TURN_LEFT = "TurnLeft"
    TURN_RIGHT = "TurnRight"
    STOP = "Stop"


class View(enum.Enum):
    FORWARD = "forward"
    LEFT = "left"
    RIGHT = "right"


VIEW_ORDER = (View.FORWARD, View.LEFT, View.RIGHT)


@dataclass(frozen=True)
class Room:
    label: str
    region: Rect


@dataclass(frozen=True)
class SceneObject:
    label: str
    anchor: Cell
    box: Rect


@dataclass(frozen=True)
class AgentState:
    position: Cell
    heading: Heading
    step_index: int = 0


@dataclass(frozen=True)
class Detection:
    """One labelled box in an egocentric view; shared by ground truth and agents."""

    view: View
    label: str
    box: Rect
    distance: float = 0.0


@dataclass(frozen=True)
class Observation:
    detections: tuple[Detection, ...] = ()

    @property
    def views(self) -> dict[View, list[Detection]]:
        out: dict[View, list[Detection]] = {v: [] for v in VIEW_ORDER}
        for det in self.detections:
            out[det.view].append(det)
        return out

    def labels(self) -> set[str]:
        return {d.label for d in self.detections}


class OutcomeKind(enum.Enum):
    SUCCESS = "Success"
    FAIL_POSITION = "FailPosition"
    FAIL_STEP = "FailStep"


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    final_distance: float
    steps_used: int

    @property
    def success(self) -> bool:
        return self.kind is OutcomeKind.SUCCESS


@dataclass(frozen=True)
class ViewConfig:
    sight_range: float = 8.0
    half_fov_deg: float = 45.0


@dataclass(frozen=True)
class SceneParams:
    width: int = 20
    height: int = 20
    min_rooms: int = 4
    max_rooms: int = 6
    room_min: int = 3
    room_max: int = 6
    min_objects: int = 2
    max_objects: int = 4
    extra_corridors: int = 1
    max_retries: int = 200

    def __post_init__(self):
        for name in ("width", "height", "min_rooms", "max_rooms", "room_min",
                     "room_max", "min_objects", "max_objects", "max_retries"):
            if getattr(self, name) <= 0:
                raise ValueError(f"scene parameter {name} must be positive")
        if self.min_rooms > self.max_rooms or self.room_min > self.room_max:
            raise ValueError("scene parameter bounds are inverted")
        if self.min_objects > self.max_objects:
            raise ValueError("scene parameter bounds are inverted")
        if self.room_min + 2 > min(self.width, self.height):
            raise ValueError("grid too small for the requested room size")


# Room vocabulary with per-category object priors. Object labels within one
# room are unique; the same label may appear in several rooms.
ROOM_PRIORS: dict[str, tuple[str, ...]] = {
    "kitchen": ("sink", "stove", "fridge", "table", "chair", "stool", "cabinet"),
    "bedroom": ("bed", "crib", "wardrobe", "cabinet", "desk", "lamp", "chair"),
    "bathroom": ("sink", "toilet", "bathtub", "cabinet", "mirror"),
    "living room": ("sofa", "armchair", "tv", "table", "plant", "lamp"),
    "dining room": ("table", "desk", "chair", "stool", "cabinet", "plant"),
    "office": ("desk", "table", "chair", "stool", "bookshelf", "lamp"),
    "laundry room": ("washer", "dryer", "sink", "cabinet", "wardrobe"),
    "study": ("desk", "table", "chair", "bookshelf", "armchair", "sofa"),
    "nursery": ("crib", "bed", "chair", "lamp", "wardrobe", "plant"),
}
ROOM_LABELS = tuple(ROOM_PRIORS)
OBJECT_LABELS = tuple(sorted({o for objs in ROOM_PRIORS.values() for o in objs}))


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    walls: frozenset[Cell]
    rooms: tuple[Room, ...]
    objects: tuple[SceneObject, ...]
    start: Cell
    start_heading: Heading = Heading.NORTH
    scene_seed: int = 0
    _fields: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for i, room in enumerate(self.rooms):
            r = room.region
            if r.x0 < 0 or r.y0 < 0 or r.x1 > self.width or r.y1 > self.height or r.area <= 0:
                raise ValueError(f"room {room.label!r} lies outside the grid")
            for other in self.rooms[i + 1:]:
                if r.intersects(other.region):
                    raise ValueError(f"rooms {room.label!r} and {other.label!r} overlap")
        for obj in self.objects:
            owners = [rm for rm in self.rooms if rm.region.contains(obj.anchor)]
            if len(owners) != 1:
                raise ValueError(f"object {obj.label!r} anchor is not inside exactly one room")
            if obj.anchor in self.walls:
                raise ValueError(f"object {obj.label!r} anchor is on a wall")
        if not self.in_bounds(self.start) or self.start in self.walls:
            raise ValueError("start cell must be a free cell")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    @cached_property
    def free_cells(self) -> frozenset[Cell]:
        return frozenset((x, y) for y in range(self.height) for x in range(self.width)
                         if (x, y) not in self.walls)

    @cached_property
    def free_mask(self) -> np.ndarray:
        mask = np.ones((self.height, self.width), dtype=np.uint8)
        for x, y in self.walls:
            mask[y, x] = 0
        mask.setflags(write=False)
        return mask

    def room(self, label: str) -> Room:
        for room in self.rooms:
            if room.label == label:
                return room
        raise KeyError(f"unknown room {label!r}")

    def room_at(self, cell: Cell) -> Room | None:
        for room in self.rooms:
            if room.region.contains(cell):
                return room
        return None

    def objects_in(self, room_label: str) -> list[SceneObject]:
        region = self.room(room_label).region
        return [o for o in self.objects if region.contains(o.anchor)]

    def find_object(self, room_label: str, object_label: str) -> SceneObject:
        for obj in self.objects_in(room_label):
            if obj.label == object_label:
                return obj
        raise KeyError(f"no {object_label!r} in {room_label!r}")

    def room_cells(self, label: str) -> frozenset[Cell]:
        key = ("room-cells", label)
        if key not in self._fields:
            region = self.room(label).region
            self._fields[key] = frozenset(c for c in region.cells() if self.is_free(c))
        return self._fields[key]

    def room_center(self, label: str) -> Cell:
        """Free room cell closest to the geometric centre (ties: row-major)."""
        key = ("center", label)
        if key not in self._fields:
            self._fields[key] = self._room_center(label)
        return self._fields[key]

    def _room_center(self, label: str) -> Cell:
        region = self.room(label).region
        cx = (region.x0 + region.x1 - 1) / 2
        cy = (region.y0 + region.y1 - 1) / 2
        cells = sorted(self.room_cells(label), key=lambda c: (abs(c[0] - cx) + abs(c[1] - cy), c[1], c[0]))
        return cells[0]

    def distance_field(self, goal: Iterable[Cell], avoid: Iterable[Cell] = ()) -> np.ndarray:
        """Cached BFS field to ``goal``; ``avoid`` cells are impassable."""
        goal = frozenset(goal)
        avoid = frozenset(avoid)
        key = (goal, avoid)
        cached = self._fields.get(key)
        if cached is None:
            mask = self.free_mask
            if avoid:
                mask = mask.copy()
                for x, y in avoid:
                    mask[y, x] = 0
            cached = kernels.bfs_field(mask, sorted(goal - avoid))
            cached.setflags(write=False)
            self._fields[key] = cached
        return cached

    def geodesic(self, a: Cell, goal: Iterable[Cell]) -> int:
        d = int(self.distance_field(goal)[a[1], a[0]])
        return d if d >= 0 else math.inf


# ---------------------------------------------------------------- generation

def _carve_l(free: set[Cell], a: Cell, b: Cell, horizontal_first: bool) -> None:
    (ax, ay), (bx, by) = a, b
    corner = (bx, ay) if horizontal_first else (ax, by)
    for (x0, y0), (x1, y1) in ((a, corner), (corner, b)):
        for x in range(min(x0, x1), max(x0, x1) + 1):
            for y in range(min(y0, y1), max(y0, y1) + 1):
                free.add((x, y))


def _center(rect: Rect) -> Cell:
    return (int(rect.x0 + rect.x1 - 1) // 2, int(rect.y0 + rect.y1 - 1) // 2)


def _place_rooms(rng: random.Random, params: SceneParams, n_rooms: int) -> list[Rect]:
    placed: list[Rect] = []
    for _ in range(n_rooms):
        for _try in range(100):
            w = rng.randint(params.room_min, params.room_max)
            h = rng.randint(params.room_min, params.room_max)
            if w + 2 > params.width or h + 2 > params.height:
                continue
            x0 = rng.randint(1, params.width - 1 - w)
            y0 = rng.randint(1, params.height - 1 - h)
            rect = Rect(x0, y0, x0 + w, y0 + h)
            if all(not rect.expand(1).intersects(p) for p in placed):
                placed.append(rect)
                break
    return placed


def _connected(free: set[Cell], start: Cell) -> bool:
    seen = {start}
    stack = [start]
    while stack:
        x, y = stack.pop()
        for dx, dy in ((0, -1), (1, 0), (0, 1), (-1, 0)):
            n = (x + dx, y + dy)
            if n in free and n not in seen:
                seen.add(n)
                stack.append(n)
    return len(seen) == len(free)


def generate_scene(scene_seed: int, params: SceneParams | None = None) -> Scene:
    """Procedurally build a connected multi-room scene; bit-identical per (seed, params)."""
    params = params or SceneParams()
    rng = random.Random(scene_seed)
    for _attempt in range(params.max_retries):
        n_rooms = rng.randint(params.min_rooms, params.max_rooms)
        rects = _place_rooms(rng, params, n_rooms)
        if len(rects) < params.min_rooms:
            continue
        labels = rng.sample(ROOM_LABELS, len(rects))
        free: set[Cell] = set()
        for r in rects:
            free.update(r.cells())

        # Prim spanning tree over room centres, then a few loop-closing corridors.
        centers = [_center(r) for r in rects]
        connected = [0]
        edges = []
        while len(connected) < len(rects):
            best = None
            for i in connected:
                for j in range(len(rects)):
                    if j in connected:
                        continue
                    d = abs(centers[i][0] - centers[j][0]) + abs(centers[i][1] - centers[j][1])
                    if best is None or d < best[0]:
                        best = (d, i, j)
            edges.append((best[1], best[2]))
            connected.append(best[2])
        pairs = [(i, j) for i in range(len(rects)) for j in range(i + 1, len(rects))
                 if (i, j) not in edges and (j, i) not in edges]
        rng.shuffle(pairs)
        edges.extend(pairs[: params.extra_corridors])
        for i, j in edges:
            _carve_l(free, centers[i], centers[j], rng.random() < 0.5)

        in_room = {c for r in rects for c in r.cells()}
        hall = sorted(c for c in free if c not in in_room)
        if not hall:
            # Single-room layouts get one doorway cell so the start lies outside.
            r = rects[0]
            door = (int(r.x0 + r.x1 - 1) // 2, int(r.y0) - 1)
            free.add(door)
            hall = [door]
        start = hall[rng.randrange(len(hall))]
        heading = Heading(rng.randrange(4))

        objects: list[SceneObject] = []
        for r, label in zip(rects, labels):
            prior = ROOM_PRIORS[label]
            count = min(rng.randint(params.min_objects, params.max_objects), len(prior))
            taken: list[Rect] = []
            for obj_label in rng.sample(prior, count):
                for _try in range(50):
                    w = rng.choice((1, 1, 2))
                    h = rng.choice((1, 1, 2))
                    if w > r.x1 - r.x0 or h > r.y1 - r.y0:
                        continue
                    ax = rng.randint(int(r.x0), int(r.x1) - w)
                    ay = rng.randint(int(r.y0), int(r.y1) - h)
                    box = Rect(ax, ay, ax + w, ay + h)
                    if all(not box.intersects(t) for t in taken):
                        taken.append(box)
                        objects.append(SceneObject(obj_label, (ax, ay), box))
                        break
        if not objects or not _connected(free, start):
            continue
        walls = frozenset(
            (x, y) for y in range(params.height) for x in range(params.width) if (x, y) not in free
        )
        return Scene(
            width=params.width,
            height=params.height,
            walls=walls,
            rooms=tuple(Room(lbl, r) for r, lbl in zip(rects, labels)),
            objects=tuple(objects),
            start=start,
            start_heading=heading,
            scene_seed=scene_seed,
        )
    raise SceneGenerationError(
        f"could not generate a scene for seed {scene_seed} within {params.max_retries} attempts"
    )


# ------------------------------------------------------------------ dynamics

def step(scene: Scene, state: AgentState, action: Action) -> AgentState:
    if action is Action.MOVE_FORWARD:
        dx, dy = state.heading.vector
        nxt = (state.position[0] + dx, state.position[1] + dy)
        pos = nxt if scene.is_free(nxt) else state.position
        return AgentState(pos, state.heading, state.step_index + 1)
    if action is Action.TURN_LEFT:
        return AgentState(state.position, state.heading.left(), state.step_index + 1)
    if action is Action.TURN_RIGHT:
        return AgentState(state.position, state.heading.right(), state.step_index + 1)
    return AgentState(state.position, state.heading, state.step_index + 1)


def action_toward(state: AgentState, nxt: Cell) -> Action:
    """Action that makes progress from ``state`` to the 4-adjacent cell ``nxt``."""
    dx = nxt[0] - state.position[0]
    dy = nxt[1] - state.position[1]
    want = {(0, -1): Heading.NORTH, (1, 0): Heading.EAST,
            (0, 1): Heading.SOUTH, (-1, 0): Heading.WEST}.get((dx, dy))
    if want is None:
        raise ValueError(f"{nxt} is not adjacent to {state.position}")
    if want == state.heading:
        return Action.MOVE_FORWARD
    if want == state.heading.left():
        return Action.TURN_LEFT
    return Action.TURN_RIGHT


# --------------------------------------------------------------- perception

def _view_of(fwd: float, rt: float) -> View | None:
    if fwd >= abs(rt):
        return View.FORWARD
    if rt > fwd and rt >= -fwd:
        return View.RIGHT
    if -rt > fwd and -rt >= -fwd:
        return View.LEFT
    return None


def _view_axes(heading: Heading, view: View) -> tuple[Cell, Cell]:
    d = {View.FORWARD: heading, View.LEFT: heading.left(), View.RIGHT: heading.right()}[view]
    return d.vector, d.right().vector


def to_view_box(state: AgentState, view: View, rect: Rect) -> Rect:
    """World footprint rectangle expressed in the (lateral, depth) frame of a view."""
    (dx, dy), (lx, ly) = _view_axes(state.heading, view)
    ox = state.position[0] + 0.5
    oy = state.position[1] + 0.5
    lats, deps = [], []
    for cx in (rect.x0, rect.x1):
        for cy in (rect.y0, rect.y1):
            vx, vy = cx - ox, cy - oy
            deps.append(vx * dx + vy * dy)
            lats.append(vx * lx + vy * ly)
    return Rect(min(lats), min(deps), max(lats), max(deps))


def from_view_box(state: AgentState, view: View, box: Rect) -> Rect:
    """Inverse of :func:`to_view_box`."""
    (dx, dy), (lx, ly) = _view_axes(state.heading, view)
    ox = state.position[0] + 0.5
    oy = state.position[1] + 0.5
    xs, ys = [], []
    for lat in (box.x0, box.x1):
        for dep in (box.y0, box.y1):
            xs.append(ox + dep * dx + lat * lx)
            ys.append(oy + dep * dy + lat * ly)
    return Rect(min(xs), min(ys), max(xs), max(ys))


@lru_cache(maxsize=1 << 16)
def detection_anchor(state: AgentState, det: Detection) -> Cell:
    rect = from_view_box(state, det.view, det.box)
    return (int(round(rect.x0)), int(round(rect.y0)))


def visible_cells_ok(scene: Scene, state: AgentState, cells: Sequence[Cell]) -> np.ndarray:
    if not cells:
        return np.zeros(0, dtype=np.uint8)
    return kernels.lines_clear(scene.free_mask, state.position[0], state.position[1], list(cells))


def observe(scene: Scene, state: AgentState, view_cfg: ViewConfig = ViewConfig()) -> Observation:
    """Ground-truth detections in the forward/left/right 90-degree views."""
    key = ("obs", state.position, state.heading, view_cfg)
    cached = scene._fields.get(key)
    if cached is None:
        cached = scene._fields[key] = _observe(scene, state, view_cfg)
    return cached


def _observe(scene: Scene, state: AgentState, view_cfg: ViewConfig) -> Observation:
    px, py = state.position
    hx, hy = state.heading.vector
    rx, ry = state.heading.right().vector
    candidates = []
    for obj in scene.objects:
        vx = obj.anchor[0] - px
        vy = obj.anchor[1] - py
        dist = math.hypot(vx, vy)
        if dist > view_cfg.sight_range:
            continue
        view = _view_of(vx * hx + vy * hy, vx * rx + vy * ry)
        if view is None:
            continue
        candidates.append((obj, view, dist))
    clear = visible_cells_ok(scene, state, [c[0].anchor for c in candidates])
    dets = [
        Detection(view, obj.label, to_view_box(state, view, obj.box), dist)
        for (obj, view, dist), ok in zip(candidates, clear)
        if ok
    ]
    order = {v: i for i, v in enumerate(VIEW_ORDER)}
    dets.sort(key=lambda d: (order[d.view], d.distance, d.label, d.box))
    return Observation(tuple(dets))


# ------------------------------------------------------------------- routes

def route(scene: Scene, start: Cell, goal: Iterable[Cell], avoid: Iterable[Cell] = (),
          strict: bool = False) -> list[Cell]:
    """Shortest 4-connected path from ``start`` to the nearest goal cell.

    Ties are broken by neighbour order N, E, S, W when descending the BFS
    field. Raises :class:`UnreachableGoalError` when no path exists; with
    ``strict`` that includes the case where only a path through ``avoid`` does.
    """
    start = tuple(start)
    avoid = frozenset(avoid)
    head: list[Cell] = []
    if start in avoid:
        # Already inside an avoided region: leave it by the shortest way first.
        goal = frozenset(goal)
        if start not in goal:
            exits = scene.free_cells - avoid
            head = kernels.descend(scene.distance_field(exits | (goal & avoid)), start)
            if not head:
                raise UnreachableGoalError(f"no way out of the avoided region from {start}")
            start = head.pop()
    field_ = scene.distance_field(goal, avoid - {start})
    path = kernels.descend(field_, start)
    if not path and avoid and not strict:
        # Stranded behind an avoided region (e.g. pushed there by faults):
        # crossing it beats not moving at all.
        path = kernels.descend(scene.distance_field(goal), start)
    if not path:
        raise UnreachableGoalError(f"no path from {start} to goal region")
    return head + path


def expert_route(scene: Scene, start: Cell, goal: Iterable[Cell]) -> list[Cell]:
    return route(scene, start, goal)


def chain_route(
    scene: Scene,
    start: Cell,
    waypoints: Sequence[Iterable[Cell]],
    goal: Iterable[Cell],
    avoid: Iterable[Cell] = (),
    strict: bool = False,
) -> list[Cell]:
    """Concatenated shortest segments through each waypoint region, then the goal."""
    path = [tuple(start)]
    for region in [*waypoints, goal]:
        seg = route(scene, path[-1], region, avoid, strict)
        path.extend(seg[1:])
    return path


# ------------------------------------------------------------------ outcome

def default_step_limit(expert_length: int, factor: float = 4.0, floor: int = 40) -> int:
    return max(floor, int(math.ceil(factor * expert_length)))


def classify_outcome(
    scene: Scene,
    final_state: AgentState,
    goal: Iterable[Cell],
    delta: float,
    t_max: int,
    stopped: bool,
) -> Outcome:
    steps = final_state.step_index
    dist = scene.geodesic(final_state.position, goal)
    if steps > t_max:
        return Outcome(OutcomeKind.FAIL_STEP, dist, steps)
    if not stopped:
        raise ValueError("episode has not terminated: no Stop and step budget not exhausted")
    if dist > delta:
        return Outcome(OutcomeKind.FAIL_POSITION, dist, steps)
    return Outcome(OutcomeKind.SUCCESS, dist, steps)


# ------------------------------------------------------------ serialization

def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "width": scene.width,
        "height": scene.height,
        "scene_seed": scene.scene_seed,
        "start": list(scene.start),
        "start_heading": scene.start_heading.name,
        "walls": sorted([list(c) for c in scene.walls]),
        "rooms": [{"label": r.label, "region": list(r.region)} for r in scene.rooms],
        "objects": [
            {"label": o.label, "anchor": list(o.anchor), "box": list(o.box)} for o in scene.objects
        ],
    }


def scene_from_dict(doc: dict) -> Scene:
    if doc.get("format") != SCENE_FORMAT:
        raise ValueError("not a scene document")
    if doc.get("version") != SCENE_VERSION:
        raise ValueError(f"unsupported scene version {doc.get('version')!r}")
    return Scene(
        width=int(doc["width"]),
        height=int(doc["height"]),
        walls=frozenset(tuple(c) for c in doc["walls"]),
        rooms=tuple(Room(r["label"], Rect(*r["region"])) for r in doc["rooms"]),
        objects=tuple(
            SceneObject(o["label"], tuple(o["anchor"]), Rect(*o["box"])) for o in doc["objects"]
        ),
        start=tuple(doc["start"]),
        start_heading=Heading[doc["start_heading"]],
        scene_seed=int(doc["scene_seed"]),
    )


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), indent=1, sort_keys=True)


def loads_scene(text: str) -> Scene:
    return scene_from_dict(json.loads(text))
